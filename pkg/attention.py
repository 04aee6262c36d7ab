"""
Full and neighboring attention over the joint visual+text sequence.

Token layout is 0-indexed: visual tokens occupy [0, T), text tokens [T, T+L).
A visual query i sees visual keys within radius r of itself plus every text
key; text queries see everything.
"""
import logging
from dataclasses import dataclass
from typing import List, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

import numerics as nx
from errors import DimensionError, VisualIndexError
from numerics import Tensor

logger = logging.getLogger(__name__)

FULL = "full"

Radius = Union[int, str, None]


@dataclass
class JointSequence:
    X: Tensor
    T: int
    L: int

    def __post_init__(self):
        if self.T < 1 or self.L < 1:
            raise DimensionError(f"joint sequence needs T >= 1 and L >= 1, got T={self.T}, L={self.L}")
        if self.X.ndim != 2 or self.X.shape[0] != self.T + self.L:
            raise DimensionError(f"X has shape {self.X.shape}, expected ({self.T + self.L}, D)")

    @property
    def D(self):
        return self.X.shape[1]

    @classmethod
    def join(cls, V: Tensor, Q: Tensor):
        return cls(nx.concat([V, Q], axis=0), V.shape[0], Q.shape[0])

    def split(self, X: Tensor = None):
        X = self.X if X is None else X
        T, L = self.T, self.L
        return nx.take(X, np.arange(T)), nx.take(X, np.arange(T, T + L))


@dataclass
class AttentionMask:
    visible: np.ndarray
    radius: Radius


@dataclass
class AttentionParams:
    w_q: List[Tensor]
    w_k: List[Tensor]
    w_v: List[Tensor]
    w_o: Tensor

    @property
    def heads(self):
        return len(self.w_q)

    @property
    def width(self):
        return self.w_o.shape[1]

    def tensors(self):
        return [*self.w_q, *self.w_k, *self.w_v, self.w_o]


def _is_full(r: Radius):
    return r is None or r == FULL


def neighbor_key_set(i: int, r: int, T: int, L: int) -> List[int]:
    if not 0 <= i < T:
        raise VisualIndexError(f"visual index {i} outside [0, {T})")
    return list(range(max(0, i - r), min(T - 1, i + r) + 1)) + list(range(T, T + L))


def build_mask(T: int, L: int, r: Radius) -> AttentionMask:
    n = T + L
    if _is_full(r):
        return AttentionMask(np.ones((n, n), dtype=bool), FULL)
    visible = np.zeros((n, n), dtype=bool)
    rows = np.arange(T)[:, None]
    cols = np.arange(T)[None, :]
    visible[:T, :T] = np.abs(rows - cols) <= r
    visible[:T, T:] = True
    visible[T:, :] = True
    return AttentionMask(visible, r)


def attend(queries: Tensor, keys: Tensor, params: AttentionParams, visible) -> Tensor:
    """Multi-head scaled dot-product attention; one mask shared by every head."""
    if queries.shape[1] != params.width or keys.shape[1] != params.width:
        raise DimensionError(
            f"attention inputs {queries.shape} / {keys.shape} do not match width {params.width}"
        )
    scale = 1.0 / np.sqrt(params.w_q[0].shape[1])
    heads = []
    for w_q, w_k, w_v in zip(params.w_q, params.w_k, params.w_v):
        q = queries @ w_q
        k = keys @ w_k
        v = keys @ w_v
        weights = nx.masked_softmax((q @ nx.transpose(k)) * scale, visible)
        heads.append(weights @ v)
    return nx.concat(heads, axis=1) @ params.w_o


def full_attention(X: JointSequence, params: AttentionParams) -> Tensor:
    n = X.T + X.L
    return attend(X.X, X.X, params, np.ones((n, n), dtype=bool))


def neighboring_attention(X: JointSequence, params: AttentionParams, mask: AttentionMask) -> Tensor:
    n = X.T + X.L
    if mask.visible.shape != (n, n):
        raise DimensionError(f"mask {mask.visible.shape} does not match sequence length {n}")
    return attend(X.X, X.X, params, mask.visible)


def windowed_attention(X: np.ndarray, T: int, params: AttentionParams, r: Radius) -> np.ndarray:
    """
    Inference-only neighboring attention that gathers each visual row's window
    instead of scoring the full key set. Numerically equal to
    neighboring_attention; used to measure the cost of the sparse operator.
    """
    if _is_full(r) or r >= T - 1:
        n = X.shape[0]
        return attend(Tensor._wrap(X), Tensor._wrap(X), params, np.ones((n, n), dtype=bool)).data

    if X.shape[0] - T < 1:
        raise DimensionError("windowed attention needs at least one text token")
    width = 2 * r + 1
    scale = 1.0 / np.sqrt(params.w_q[0].shape[1])
    positions = np.arange(-r, T + r)
    in_range = (positions >= 0) & (positions < T)
    window_ok = sliding_window_view(in_range, width)

    heads = []
    for w_q, w_k, w_v in zip(params.w_q, params.w_k, params.w_v):
        q = X @ w_q.data
        k = X @ w_k.data
        v = X @ w_v.data
        dh = q.shape[1]
        k_pad = np.concatenate([np.zeros((r, dh)), k[:T], np.zeros((r, dh))])
        v_pad = np.concatenate([np.zeros((r, dh)), v[:T], np.zeros((r, dh))])
        k_win = sliding_window_view(k_pad, width, axis=0)
        v_win = sliding_window_view(v_pad, width, axis=0)

        local = np.einsum("td,tdw->tw", q[:T], k_win) * scale
        local = np.where(window_ok, local, -np.inf)
        text = (q[:T] @ k[T:].T) * scale
        scores = np.concatenate([local, text], axis=1)
        scores = np.exp(scores - scores.max(axis=1, keepdims=True))
        scores /= scores.sum(axis=1, keepdims=True)
        visual_out = np.einsum("tw,tdw->td", scores[:, :width], v_win) + scores[:, width:] @ v[T:]

        text_scores = (q[T:] @ k.T) * scale
        text_scores = np.exp(text_scores - text_scores.max(axis=1, keepdims=True))
        text_scores /= text_scores.sum(axis=1, keepdims=True)
        heads.append(np.concatenate([visual_out, text_scores @ v]))

    return np.concatenate(heads, axis=1) @ params.w_o.data


def visual_window_pairs(T: int, r: Radius) -> int:
    """Number of visual-visual score pairs, closed form with boundary clamping."""
    if _is_full(r) or r >= T - 1:
        return T * T
    return T * (2 * r + 1) - r * (r + 1)


def attention_op_count(T: int, L: int, r: Radius) -> int:
    if _is_full(r):
        return (T + L) ** 2
    return visual_window_pairs(T, r) + T * L + L * (T + L)
