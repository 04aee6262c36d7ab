"""
Label assignment, the two-stage grounding objective and the optimization loop.
"""
import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

import numerics as nx
from detection import Anchor, Proposal, ZoomInConfig, batch_iou, ground
from errors import ConfigurationError, ContractError, NonFiniteLossError, NumericError
from model import GroundingModel, save_checkpoint
from numerics import ComputationTrace, Tensor, backward

logger = logging.getLogger(__name__)

PROB_EPS = 1e-7
LOSS_COLUMNS = ("l_cls1", "l_reg1", "l_cls2", "l_reg2", "total")


@dataclass
class LossWeights:
    mu: float = 1e-3
    lam: float = 0.1
    iou_threshold: float = 0.5

    def __post_init__(self):
        if self.mu < 0 or self.lam < 0:
            raise ConfigurationError(f"loss weights must be non-negative, got mu={self.mu}, lam={self.lam}")
        if not 0.0 < self.iou_threshold < 1.0:
            raise ConfigurationError(f"iou_threshold must be in (0, 1), got {self.iou_threshold}")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    betas: Tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    batch_size: int = 8
    steps: int = 200
    seed: int = 0
    N: int = 16
    N_pos: int = 4
    zoom_in: bool = True
    weights: LossWeights = field(default_factory=LossWeights)
    threads: int = 1
    log_every: int = 20

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        self.betas = tuple(self.betas)
        if self.learning_rate < 0 or self.batch_size < 1 or self.steps < 0 or self.threads < 1:
            raise ConfigurationError(
                f"invalid training settings: lr={self.learning_rate}, batch_size={self.batch_size}, "
                f"steps={self.steps}, threads={self.threads}"
            )
        ZoomInConfig(self.N, self.N_pos)

    @property
    def zoom(self):
        return ZoomInConfig(self.N, self.N_pos, self.zoom_in)


# --- Labels ---

@dataclass
class LabelAssignment:
    labels: np.ndarray
    positive_set: np.ndarray
    degenerate: bool = False

    @property
    def N_reg(self):
        return int(self.positive_set.size)


def assign_span_labels(spans, gt, weights: LossWeights) -> LabelAssignment:
    spans = np.asarray(spans, dtype=np.float64).reshape(-1, 2)
    if gt[1] <= gt[0]:
        logger.warning(f"Zero-length ground truth {gt}; every label is 0")
        return LabelAssignment(np.zeros(len(spans)), np.zeros(0, dtype=np.int64), degenerate=True)
    labels = batch_iou(spans, gt)
    return LabelAssignment(labels, np.flatnonzero(labels > weights.iou_threshold))


def assign_labels(anchors: Sequence[Anchor], gt, weights: LossWeights, T: int) -> LabelAssignment:
    return assign_span_labels([a.clipped(T) for a in anchors], gt, weights)


# --- Losses ---

def classification_loss(p: Tensor, t) -> Tensor:
    if p.size == 0:
        raise ContractError("classification loss over zero predictions")
    t = np.asarray(t, dtype=np.float64).reshape(p.shape)
    q = nx.clip(p, PROB_EPS, 1.0 - PROB_EPS)
    log_likelihood = t * nx.log(q) + (1.0 - t) * nx.log(1.0 - q)
    return -nx.mean(log_likelihood)


def regression_loss(pred: Tensor, gt, positive_set, T: int) -> Tensor:
    positive_set = np.asarray(positive_set, dtype=np.int64)
    if positive_set.size == 0:
        return Tensor(0.0)
    error = (nx.take(pred, positive_set) - np.asarray(gt, dtype=np.float64)) / float(T)
    return nx.sum(nx.smooth_l1(error)) / float(positive_set.size)


def stage_loss(cls, reg, mu):
    return cls + mu * reg


def total_loss(L1, L2, lam):
    return L1 + lam * L2


def inject_positives(top_list: Sequence[Proposal], gt, N_pos: int, rng: np.random.Generator,
                     T: int) -> List[Proposal]:
    """Appends N_pos ground-truth spans jittered by up to 10% of their length."""
    out = list(top_list)
    jitter = 0.1 * (gt[1] - gt[0])
    for _ in range(N_pos):
        s = float(np.clip(gt[0] + rng.uniform(-jitter, jitter), 0.0, T - 1.0))
        e = float(np.clip(gt[1] + rng.uniform(-jitter, jitter), 0.0, T - 1.0))
        s, e = min(s, e), max(s, e)
        out.append(Proposal(s, e, 1.0, anchor=None, stage=2))
    return out


@dataclass
class SampleLoss:
    total: Tensor
    components: Dict[str, Tensor]
    candidates: List[Proposal]

    def values(self):
        return {name: float(t.data) for name, t in self.components.items()}


def _mean(terms):
    return sum(terms) / float(len(terms)) if terms else Tensor(0.0)


def sample_loss(model: GroundingModel, features, annotation, config: TrainConfig,
                rng: Optional[np.random.Generator] = None,
                candidates: Optional[List[Proposal]] = None) -> SampleLoss:
    """
    L = L1 + lam * L2 for one grounding instance. Stage-1 terms are averaged
    over the detection layers. `candidates` replays a frozen stage-2 input.
    """
    T = annotation.T
    gt = (float(annotation.t_s), float(annotation.t_e))
    w = config.weights
    zoom = config.zoom

    augment = None
    if zoom.enabled and config.N_pos > 0 and rng is not None:
        augment = lambda top: inject_positives(top, gt, config.N_pos, rng, T)
    out = ground(model, features, annotation.token_ids, zoom, augment=augment,
                 candidates=candidates, rng=rng)

    cls_terms, reg_terms = [], []
    for s1 in out.stage1:
        labels = assign_labels(s1.anchors, gt, w, T)
        cls_terms.append(classification_loss(s1.scores, labels.labels))
        reg_terms.append(regression_loss(s1.spans, gt, labels.positive_set, T))
    l_cls1, l_reg1 = _mean(cls_terms), _mean(reg_terms)

    if out.stage2 is not None:
        labels2 = assign_span_labels([p.span for p in out.stage2.candidates], gt, w)
        l_cls2 = classification_loss(out.stage2.scores, labels2.labels)
        l_reg2 = regression_loss(out.stage2.spans, gt, labels2.positive_set, T)
    else:
        l_cls2, l_reg2 = Tensor(0.0), Tensor(0.0)

    total = total_loss(stage_loss(l_cls1, l_reg1, w.mu), stage_loss(l_cls2, l_reg2, w.mu), w.lam)
    components = dict(zip(LOSS_COLUMNS, (l_cls1, l_reg1, l_cls2, l_reg2, total)))
    return SampleLoss(total, components, out.candidates)


# --- Optimizer ---

class Adam:
    def __init__(self, parameters: Sequence[Tensor], lr=1e-4, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(parameters)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, grads: Dict[Tensor, np.ndarray]):
        self.t += 1
        for i, p in enumerate(self.params):
            g = grads.get(p)
            if g is None:
                g = np.zeros_like(p.data)
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * g ** 2
            m_hat = self.m[i] / (1 - self.beta1 ** self.t)
            v_hat = self.v[i] / (1 - self.beta2 ** self.t)
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


# --- Loop ---

@dataclass
class TrainResult:
    rows: List[Dict[str, float]]

    @property
    def initial_total(self):
        return self.rows[0]["total"] if self.rows else float("nan")

    @property
    def final_total(self):
        return self.rows[-1]["total"] if self.rows else float("nan")


def _batches(n, batch_size, rng):
    order = []
    while True:
        if len(order) < batch_size:
            order.extend(rng.permutation(n).tolist())
        batch, order = order[:batch_size], order[batch_size:]
        yield batch


def _sample_gradients(model, sample, config, rng):
    features, annotation = sample
    with ComputationTrace() as trace:
        loss = sample_loss(model, features, annotation, config, rng)
    return loss.values(), backward(trace, loss.total, accumulate=False)


def train_loop(dataset, model: GroundingModel, config: TrainConfig, loss_log_path=None,
               checkpoint_path=None) -> TrainResult:
    """
    Adam over mean per-sample gradients. Per-sample work may run on
    config.threads workers; gradients are merged in batch order.
    """
    if not dataset:
        raise ConfigurationError("training dataset is empty")
    params = model.parameters()
    optimizer = Adam(params, config.learning_rate, config.betas, config.adam_eps)
    batches = _batches(len(dataset), config.batch_size, np.random.default_rng(config.seed))
    rows = []

    log_file = open(loss_log_path, "w", newline="", encoding="utf-8") if loss_log_path else None
    writer = csv.writer(log_file, lineterminator="\n") if log_file else None
    if writer:
        writer.writerow(("step",) + LOSS_COLUMNS)

    executor = ThreadPoolExecutor(max_workers=config.threads) if config.threads > 1 else None
    try:
        for step in range(1, config.steps + 1):
            batch = next(batches)
            rngs = [np.random.default_rng([config.seed, step, i]) for i in batch]
            work = lambda pair: _sample_gradients(model, dataset[pair[0]], config, pair[1])
            pairs = list(zip(batch, rngs))
            try:
                results = list(executor.map(work, pairs)) if executor else [work(p) for p in pairs]
            except NumericError as e:
                logger.error(f"Aborting at step {step}: {e}")
                raise NonFiniteLossError(step, {name: float("nan") for name in LOSS_COLUMNS}) from e

            merged = {}
            for _, grads in results:
                for p, g in grads.items():
                    merged[p] = merged[p] + g if p in merged else g.copy()
            scale = 1.0 / len(batch)
            merged = {p: g * scale for p, g in merged.items()}

            row = {name: float(np.mean([values[name] for values, _ in results])) for name in LOSS_COLUMNS}
            if not all(np.isfinite(v) for v in row.values()):
                logger.error(f"Aborting at step {step}: non-finite loss {row}")
                raise NonFiniteLossError(step, row)

            optimizer.step(merged)
            rows.append(row)
            if writer:
                writer.writerow([step] + [repr(row[name]) for name in LOSS_COLUMNS])
            if step == 1 or step % config.log_every == 0 or step == config.steps:
                logger.info(f"Step {step}/{config.steps} | total {row['total']:.5f} | "
                            f"cls1 {row['l_cls1']:.5f} | cls2 {row['l_cls2']:.5f}")
    finally:
        if executor:
            executor.shutdown()
        if log_file:
            log_file.close()

    if checkpoint_path:
        save_checkpoint(model, checkpoint_path)
    return TrainResult(rows)
