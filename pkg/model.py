"""
Encoders, the multi-scale cross-modal alignment stack and the integration block.

Parameters live in GroundingModel.params (an ordered name -> Tensor map); the
structured views (TransformerLayerParams, FeedForwardParams, ...) hold the very
same Tensor objects, so loading a checkpoint or taking an optimizer step
through either path is visible to both.
"""
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

import numerics as nx
from attention import FULL, AttentionParams, JointSequence, attend, build_mask, neighboring_attention
from errors import (CapacityError, CheckpointMismatchError, ConfigurationError, DimensionError,
                    FormatError, VocabularyError)
from numerics import Tensor

logger = logging.getLogger(__name__)

FIXED = "fixed"
INCREASE = "increase"
DECREASE = "decrease"
SCHEDULE_TYPES = (FIXED, INCREASE, DECREASE)

NEIGHBORING = "neighboring"
ATTENTION_TYPES = (NEIGHBORING, FULL)

CHECKPOINT_MAGIC = b"NFTVG1"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    D: int = 64
    heads: int = 4
    enc_layers: int = 2
    M: int = 4
    anchor_scales: Tuple[int, ...] = (4, 8, 16, 32)
    window_radii: Optional[Tuple[int, ...]] = None
    schedule_type: str = DECREASE
    fixed_radius: int = 8
    feature_dim: int = 32
    vocab_size: int = 64
    max_T: int = 128
    max_L: int = 16
    ffn_mult: int = 2
    head_hidden: int = 64
    dropout: float = 0.0
    ln_eps: float = 1e-5
    attention: str = NEIGHBORING
    multi_scale_detection: bool = True

    def __post_init__(self):
        self.anchor_scales = tuple(int(s) for s in self.anchor_scales)
        if self.window_radii is not None:
            self.window_radii = tuple(int(r) for r in self.window_radii)
        self.schedule_type = self.schedule_type.lower()

        if self.D % self.heads:
            raise ConfigurationError(f"D={self.D} is not divisible by heads={self.heads}")
        if self.window_radii is not None and len(self.window_radii) != self.M:
            raise ConfigurationError(f"window_radii has {len(self.window_radii)} entries, expected M={self.M}")
        scales = self.anchor_scales
        if not scales or scales[0] < 1 or any(b <= a for a, b in zip(scales, scales[1:])):
            raise ConfigurationError(f"anchor_scales must be strictly increasing positive integers, got {scales}")
        if self.schedule_type not in SCHEDULE_TYPES:
            raise ConfigurationError(f"unknown schedule_type '{self.schedule_type}'")
        if self.attention not in ATTENTION_TYPES:
            raise ConfigurationError(f"unknown attention '{self.attention}'")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError(f"dropout must be in [0, 1), got {self.dropout}")

    @property
    def H(self):
        return len(self.anchor_scales)


@dataclass
class RadiusSchedule:
    radii: Tuple[int, ...]
    per_layer_scales: Tuple[Tuple[int, ...], ...]
    schedule_type: str
    owner: Dict[int, int] = field(default_factory=dict)

    @property
    def M(self):
        return len(self.radii)

    @property
    def scales(self):
        return tuple(sorted(self.owner))

    def owning_layer(self, scale):
        return self.owner[scale]

    def owned_scales(self, layer):
        return [s for s in self.scales if self.owner[s] == layer]

    def detection_layers(self):
        return sorted(set(self.owner.values()))

    def layer_for_length(self, half_length):
        """Layer whose largest owned scale is nearest to a span's half-length; ties go deeper."""
        best, best_gap = None, None
        for layer in self.detection_layers():
            gap = abs(max(self.owned_scales(layer)) - half_length)
            if best_gap is None or gap <= best_gap:
                best, best_gap = layer, gap
        return best


def _allocate_scales(scales_desc, M):
    H = len(scales_desc)
    if H >= M:
        return [tuple(int(s) for s in group) for group in np.array_split(np.array(scales_desc), M)]
    return [(scales_desc[(j * H) // M],) for j in range(M)]


def derive_schedule(config: ModelConfig) -> RadiusSchedule:
    scales_desc = sorted(config.anchor_scales, reverse=True)
    H, M = len(scales_desc), config.M
    if H < M and config.window_radii is None:
        raise ConfigurationError(
            f"cannot allocate {H} anchor scales to {M} layers without explicit window_radii"
        )

    groups = _allocate_scales(scales_desc, M)
    if config.window_radii is not None:
        radii = list(config.window_radii)
    elif config.schedule_type == FIXED:
        radii = [config.fixed_radius] * M
    else:
        radii = [max(g) for g in groups]
        if config.schedule_type == INCREASE:
            groups, radii = groups[::-1], radii[::-1]

    owner = {}
    for j, group in enumerate(groups):
        for s in group:
            owner[s] = j
    if not config.multi_scale_detection:
        owner = {s: M - 1 for s in owner}

    schedule = RadiusSchedule(tuple(radii), tuple(groups), config.schedule_type, owner)
    logger.debug(f"Radius schedule {schedule.radii} with scales {schedule.per_layer_scales}")
    return schedule


@dataclass
class FeedForwardParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def __call__(self, x):
        return nx.gelu(x @ self.w1 + self.b1) @ self.w2 + self.b2


@dataclass
class TransformerLayerParams:
    ln1_gain: Tensor
    ln1_bias: Tensor
    attn: AttentionParams
    ln2_gain: Tensor
    ln2_bias: Tensor
    ffn: FeedForwardParams


@dataclass
class LayerOutputs:
    V: Tensor
    Q: Tensor
    V_tilde: Optional[Tensor] = None
    V_hat: Optional[Tensor] = None


@dataclass
class DetectionHeads:
    cls: FeedForwardParams
    reg: FeedForwardParams
    refine_cls: FeedForwardParams
    refine_reg: FeedForwardParams


class ParamStore:
    def __init__(self, rng, D):
        self.rng = rng
        self.bound = 1.0 / np.sqrt(D)
        self.params = {}

    def _add(self, name, data):
        tensor = Tensor(data, requires_grad=True)
        self.params[name] = tensor
        return tensor

    def uniform(self, name, shape):
        return self._add(name, self.rng.uniform(-self.bound, self.bound, size=shape))

    def normal(self, name, shape, std=0.02):
        return self._add(name, self.rng.normal(0.0, std, size=shape))

    def zeros(self, name, shape):
        return self._add(name, np.zeros(shape))

    def ones(self, name, shape):
        return self._add(name, np.ones(shape))

    def attention(self, prefix, D, heads):
        dh = D // heads
        return AttentionParams(
            w_q=[self.uniform(f"{prefix}.wq.h{h}", (D, dh)) for h in range(heads)],
            w_k=[self.uniform(f"{prefix}.wk.h{h}", (D, dh)) for h in range(heads)],
            w_v=[self.uniform(f"{prefix}.wv.h{h}", (D, dh)) for h in range(heads)],
            w_o=self.uniform(f"{prefix}.wo", (D, D)),
        )

    def mlp(self, prefix, n_in, hidden, n_out):
        return FeedForwardParams(
            w1=self.uniform(f"{prefix}.w1", (n_in, hidden)),
            b1=self.zeros(f"{prefix}.b1", (hidden,)),
            w2=self.uniform(f"{prefix}.w2", (hidden, n_out)),
            b2=self.zeros(f"{prefix}.b2", (n_out,)),
        )

    def transformer_layer(self, prefix, D, heads, ffn_width):
        return TransformerLayerParams(
            ln1_gain=self.ones(f"{prefix}.ln1.gain", (D,)),
            ln1_bias=self.zeros(f"{prefix}.ln1.bias", (D,)),
            attn=self.attention(f"{prefix}.attn", D, heads),
            ln2_gain=self.ones(f"{prefix}.ln2.gain", (D,)),
            ln2_bias=self.zeros(f"{prefix}.ln2.bias", (D,)),
            ffn=self.mlp(f"{prefix}.ffn", D, ffn_width, D),
        )


class GroundingModel:
    def __init__(self, config: ModelConfig, seed=0):
        self.config = config
        self.schedule = derive_schedule(config)

        D, H = config.D, config.H
        store = ParamStore(np.random.default_rng(seed), D)
        self.video_proj_w = store.uniform("video.proj.w", (config.feature_dim, D))
        self.video_proj_b = store.zeros("video.proj.b", (D,))
        self.video_pos = store.normal("video.pos", (config.max_T, D))
        self.token_embed = store.normal("text.embed", (config.vocab_size, D))
        self.text_pos = store.normal("text.pos", (config.max_L, D))

        ffn_width = config.ffn_mult * D
        self.video_layers = [store.transformer_layer(f"video.layer{i}", D, config.heads, ffn_width)
                             for i in range(config.enc_layers)]
        self.text_layers = [store.transformer_layer(f"text.layer{i}", D, config.heads, ffn_width)
                            for i in range(config.enc_layers)]
        self.cross_layers = [store.transformer_layer(f"cross.layer{j}", D, config.heads, ffn_width)
                             for j in range(config.M)]
        self.integration = store.attention("integration", D, config.heads)
        self.heads = DetectionHeads(
            cls=store.mlp("head.cls", 2 * D, config.head_hidden, H),
            reg=store.mlp("head.reg", 2 * D, config.head_hidden, 2 * H),
            refine_cls=store.mlp("refine.cls", 6 * D, config.head_hidden, 1),
            refine_reg=store.mlp("refine.reg", 6 * D, config.head_hidden, 2),
        )
        self.params = store.params

    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def parameter_count(self):
        return int(sum(p.size for p in self.params.values()))

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    # --- Building blocks ---

    def _block(self, x, layer, mix, rng=None):
        rate = self.config.dropout
        eps = self.config.ln_eps
        x = x + nx.dropout(mix(nx.layer_norm(x, layer.ln1_gain, layer.ln1_bias, eps)), rate, rng)
        return x + nx.dropout(layer.ffn(nx.layer_norm(x, layer.ln2_gain, layer.ln2_bias, eps)), rate, rng)

    def _self_attention_stack(self, x, layers, rng=None):
        n = x.shape[0]
        visible = np.ones((n, n), dtype=bool)
        for layer in layers:
            x = self._block(x, layer, lambda h, a=layer.attn: attend(h, h, a, visible), rng)
        return x

    # --- Encoders ---

    def encode_video(self, features, rng=None) -> Tensor:
        features = nx.as_tensor(features)
        T = features.shape[0]
        if T > self.config.max_T:
            raise CapacityError(f"video has {T} frames, model capacity is max_T={self.config.max_T}")
        if features.ndim != 2 or features.shape[1] != self.config.feature_dim:
            raise DimensionError(f"features have shape {features.shape}, expected (T, {self.config.feature_dim})")
        x = features @ self.video_proj_w + self.video_proj_b + nx.take(self.video_pos, np.arange(T))
        return self._self_attention_stack(x, self.video_layers, rng)

    def encode_text(self, token_ids: Sequence[int], rng=None) -> Tensor:
        ids = np.asarray(token_ids, dtype=np.int64)
        if ids.ndim != 1 or ids.size == 0:
            raise DimensionError(f"token_ids must be a non-empty sequence, got shape {ids.shape}")
        bad = ids[(ids < 0) | (ids >= self.config.vocab_size)]
        if bad.size:
            raise VocabularyError(f"token id {int(bad[0])} outside vocabulary of size {self.config.vocab_size}")
        L = ids.size
        if L > self.config.max_L:
            raise CapacityError(f"query has {L} tokens, model capacity is max_L={self.config.max_L}")
        x = nx.take(self.token_embed, ids) + nx.take(self.text_pos, np.arange(L))
        return self._self_attention_stack(x, self.text_layers, rng)

    # --- Cross-modal alignment ---

    def cross_modal_forward(self, V: Tensor, Q: Tensor, schedule: RadiusSchedule = None,
                            rng=None) -> List[LayerOutputs]:
        schedule = schedule or self.schedule
        if V.shape[1] != Q.shape[1]:
            raise DimensionError(f"visual width {V.shape[1]} != text width {Q.shape[1]}")
        T, L = V.shape[0], Q.shape[0]
        outputs = []
        for layer, r in zip(self.cross_layers, schedule.radii):
            radius = FULL if self.config.attention == FULL else r
            mask = build_mask(T, L, radius)
            joint = JointSequence.join(V, Q)
            mix = lambda h, a=layer.attn, m=mask: neighboring_attention(JointSequence(h, T, L), a, m)
            X = self._block(joint.X, layer, mix, rng)
            V, Q = joint.split(X)
            outputs.append(LayerOutputs(V=V, Q=Q))
        return outputs

    def integrate(self, V_j: Tensor, Q_j: Tensor) -> LayerOutputs:
        visible = np.ones((V_j.shape[0], Q_j.shape[0]), dtype=bool)
        V_tilde = attend(V_j, Q_j, self.integration, visible)
        return LayerOutputs(V=V_j, Q=Q_j, V_tilde=V_tilde, V_hat=nx.concat([V_tilde, V_j], axis=1))

    def forward(self, features, token_ids, rng=None) -> List[LayerOutputs]:
        V = self.encode_video(features, rng)
        Q = self.encode_text(token_ids, rng)
        return [self.integrate(out.V, out.Q) for out in self.cross_modal_forward(V, Q, rng=rng)]


# --- Checkpoint container ---

def save_checkpoint(model: GroundingModel, path):
    entries, blobs, offset = [], [], 0
    for name, tensor in model.params.items():
        blob = np.ascontiguousarray(tensor.data, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(tensor.shape), "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    manifest = {"version": CHECKPOINT_VERSION, "config": asdict(model.config), "parameters": entries}
    header = json.dumps(manifest).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)
    logger.info(f"Saved checkpoint with {model.parameter_count()} parameters to {path}")


def _valid_entry(entry):
    def count(x):
        return isinstance(x, int) and not isinstance(x, bool) and x >= 0

    return (isinstance(entry, dict) and isinstance(entry.get("name"), str)
            and isinstance(entry.get("shape"), list) and all(count(d) for d in entry["shape"])
            and count(entry.get("offset")))


def read_checkpoint(path):
    """Returns (manifest, {name: ndarray}) or raises FormatError with the failing offset."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise FormatError("bad checkpoint magic", offset=0, path=path)
    pos = len(CHECKPOINT_MAGIC)
    if len(raw) < pos + 4:
        raise FormatError("truncated checkpoint header", offset=len(raw), path=path)
    (header_len,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    if len(raw) < pos + header_len:
        raise FormatError("truncated checkpoint manifest", offset=len(raw), path=path)
    try:
        manifest = json.loads(raw[pos:pos + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"unreadable checkpoint manifest: {e}", offset=pos, path=path)
    entries = manifest.get("parameters") if isinstance(manifest, dict) else None
    if not isinstance(entries, list):
        raise FormatError("checkpoint manifest has no 'parameters' list", offset=pos, path=path)
    for entry in entries:
        if not _valid_entry(entry):
            raise FormatError(f"malformed checkpoint manifest entry {entry!r}", offset=pos, path=path)
    base = pos + header_len

    arrays = {}
    for entry in entries:
        shape = tuple(entry["shape"])
        start = base + entry["offset"]
        stop = start + 8 * int(np.prod(shape, dtype=np.int64))
        if stop > len(raw):
            raise FormatError(f"truncated parameter '{entry['name']}'", offset=len(raw), path=path)
        arrays[entry["name"]] = np.frombuffer(raw[start:stop], dtype="<f8").astype(np.float64).reshape(shape)
    return manifest, arrays


def load_checkpoint(model: GroundingModel, path):
    _, arrays = read_checkpoint(path)
    for name, tensor in model.params.items():
        if name not in arrays:
            raise CheckpointMismatchError(name, tensor.shape, None)
        if arrays[name].shape != tensor.shape:
            raise CheckpointMismatchError(name, tensor.shape, arrays[name].shape)
    for name, tensor in model.params.items():
        tensor.data = arrays[name].copy()
    logger.info(f"Loaded checkpoint {path}")
    return model
