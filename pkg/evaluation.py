"""
R@n,IoU@m recall, SNR-bucketed accuracy, the attention cost benchmark and the
schedule ablation harness.
"""
import csv
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from attention import FULL, attention_op_count, windowed_attention
from data import Annotation, compute_snr
from detection import ZoomInConfig, batch_iou, ground
from errors import ContractError
from model import DECREASE, FIXED, INCREASE, GroundingModel, ModelConfig, ParamStore
from training import train_loop

logger = logging.getLogger(__name__)

BENCH_COLUMNS = ("config", "op_count", "wall_ms_median", "wall_ms_stddev")
ABLATION_COLUMNS = ("setting", "r1_iou05", "r5_iou05", "query_count")


@dataclass
class EvalConfig:
    recall_n: Tuple[int, ...] = (1, 5)
    recall_m: Tuple[float, ...] = (0.5, 0.7)
    snr_edges: Tuple[float, ...] = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)
    threads: int = 1

    def __post_init__(self):
        self.recall_n = tuple(int(n) for n in self.recall_n)
        self.recall_m = tuple(float(m) for m in self.recall_m)
        self.snr_edges = tuple(float(e) for e in self.snr_edges)


@dataclass
class BenchConfig:
    T_grid: Tuple[int, ...] = (200, 600)
    L: int = 20
    radii: Tuple = (4, 8, 16, FULL)
    repeats: int = 5
    D: int = 64
    heads: int = 4
    seed: int = 0

    def __post_init__(self):
        self.T_grid = tuple(int(t) for t in self.T_grid)
        self.radii = tuple(r if r == FULL else int(r) for r in self.radii)


def recall_key(n, m):
    return f"R@{n},IoU@{m}"


# --- Recall ---

def _top_ious(proposals, gt, n=None) -> np.ndarray:
    ranked = proposals if n is None else proposals[:n]
    if not ranked:
        return np.zeros(0)
    return batch_iou([p[:2] for p in ranked], gt)


def recall_at(predictions: Sequence[Sequence], gts: Sequence[Tuple[float, float]], n: int, m: float) -> float:
    """
    Percentage of queries with at least one of the top-n proposals at IoU
    strictly greater than m. A query without proposals counts as a miss.
    """
    if n < 1 or not 0.0 <= m < 1.0:
        raise ContractError(f"recall needs n >= 1 and 0 <= m < 1, got n={n}, m={m}")
    if len(predictions) != len(gts):
        raise ContractError(f"{len(predictions)} prediction lists for {len(gts)} ground truths")
    if not gts:
        return 0.0
    hits = sum(1 for proposals, gt in zip(predictions, gts) if np.any(_top_ious(proposals, gt, n) > m))
    return 100.0 * hits / len(gts)


@dataclass
class EvalResult:
    table: Dict[Tuple[int, float], float]
    query_count: int
    best_iou: List[float]
    empty_queries: List[int] = field(default_factory=list)

    def recall(self, n, m):
        return self.table[(n, m)]

    def recall_map(self):
        return {recall_key(n, m): value for (n, m), value in self.table.items()}


def evaluate(predictions, gts, config: EvalConfig = None) -> EvalResult:
    config = config or EvalConfig()
    empty = [i for i, proposals in enumerate(predictions) if not proposals]
    for i in empty:
        logger.warning(f"Query {i} has no predictions; counted as a miss")
    table = {(n, m): recall_at(predictions, gts, n, m) for n in config.recall_n for m in config.recall_m}
    best = [float(ious.max()) if ious.size else 0.0
            for ious in (_top_ious(p, gt) for p, gt in zip(predictions, gts))]
    return EvalResult(table, len(gts), best, empty)


# --- SNR buckets ---

@dataclass
class SnrBucketReport:
    edges: Tuple[float, ...]
    counts: List[int]
    recall: List[Optional[float]]  # R@1,IoU@0.5 per bucket, None when empty

    def to_list(self):
        return [{"lo": lo, "hi": hi, "count": c, "r1_iou05": r}
                for lo, hi, c, r in zip(self.edges[:-1], self.edges[1:], self.counts, self.recall)]


def bucket_index(value, edges) -> int:
    if not edges[0] <= value <= edges[-1]:
        raise ContractError(f"SNR {value} outside bucket range [{edges[0]}, {edges[-1]}]")
    if value == edges[-1]:
        return len(edges) - 2
    return int(np.searchsorted(edges, value, side="right")) - 1


def snr_buckets(predictions, annotations: Sequence[Annotation], edges) -> SnrBucketReport:
    edges = tuple(float(e) for e in edges)
    if len(edges) < 2 or any(b <= a for a, b in zip(edges, edges[1:])):
        raise ContractError(f"bucket edges must be strictly increasing, got {edges}")

    members = [[] for _ in range(len(edges) - 1)]
    for i, a in enumerate(annotations):
        members[bucket_index(compute_snr(a), edges)].append(i)

    recall = []
    for idx in members:
        if not idx:
            recall.append(None)
            continue
        recall.append(recall_at([predictions[i] for i in idx], [annotations[i].gt for i in idx], 1, 0.5))
    return SnrBucketReport(edges, [len(idx) for idx in members], recall)


# --- Model inference ---

def predict(model: GroundingModel, samples, zoom: ZoomInConfig, threads=1):
    """Ranked (start, end, score) proposals per sample, in sample order."""
    def run(sample):
        features, annotation = sample
        out = ground(model, features, annotation.token_ids, zoom)
        return annotation.query_id, [(p.start, p.end, p.score) for p in out.proposals]

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as executor:
            return list(executor.map(run, samples))
    return [run(s) for s in samples]


def evaluate_model(model: GroundingModel, samples, zoom: ZoomInConfig, config: EvalConfig = None):
    config = config or EvalConfig()
    records = predict(model, samples, zoom, config.threads)
    predictions = [proposals for _, proposals in records]
    annotations = [a for _, a in samples]
    result = evaluate(predictions, [a.gt for a in annotations], config)
    buckets = snr_buckets(predictions, annotations, config.snr_edges)
    return result, buckets, records


def build_report(result: EvalResult, buckets: SnrBucketReport):
    return {
        "recall": result.recall_map(),
        "snr_buckets": buckets.to_list(),
        "query_count": result.query_count,
        "empty_queries": result.empty_queries,
    }


def write_report(path, report):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(report, f, indent=4)
        f.write("\n")


# --- Attention cost benchmark ---

@dataclass
class BenchRow:
    config: str
    op_count: int
    wall_ms_median: float
    wall_ms_stddev: float


def bench_report(T: int, L: int, radii: Sequence, repeats: int, D=64, heads=4, seed=0) -> List[BenchRow]:
    """
    Times one attention block per radius (full attention included if listed).
    A tenth of the repeats, at least one, run first as warmup and are not timed.
    """
    if repeats < 1:
        raise ContractError(f"repeats must be >= 1, got {repeats}")
    rng = np.random.default_rng(seed)
    store = ParamStore(rng, D)
    params = store.attention("bench", D, heads)
    logger.info(f"Benchmark attention block holds {sum(t.size for t in params.tensors())} parameters")
    X = rng.standard_normal((T + L, D))
    warmup = max(1, repeats // 10)

    rows = []
    for r in radii:
        for _ in range(warmup):
            windowed_attention(X, T, params, r)
        times = []
        for _ in range(repeats):
            start = time.perf_counter()
            windowed_attention(X, T, params, r)
            times.append((time.perf_counter() - start) * 1000.0)
        label = f"T={T},L={L},r={r}"
        rows.append(BenchRow(label, attention_op_count(T, L, r), float(np.median(times)), float(np.std(times))))
        logger.info(f"{label}: {rows[-1].op_count} score pairs, median {rows[-1].wall_ms_median:.3f} ms")
    return rows


def run_bench(config: BenchConfig) -> List[BenchRow]:
    rows = []
    for T in config.T_grid:
        rows.extend(bench_report(T, config.L, config.radii, config.repeats, config.D, config.heads, config.seed))
    return rows


def write_bench_csv(path, rows: Sequence[BenchRow]):
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(BENCH_COLUMNS)
        for row in rows:
            writer.writerow([row.config, row.op_count, repr(row.wall_ms_median), repr(row.wall_ms_stddev)])


# --- Ablations ---

def ablation_settings(model_config: ModelConfig, train_config, zoom_grid=()):
    """(label, ModelConfig, TrainConfig) triples: the three schedules, then any (N, N_pos) pairs."""
    settings = [(kind, replace(model_config, schedule_type=kind, window_radii=None), train_config)
                for kind in (FIXED, INCREASE, DECREASE)]
    for N, N_pos in zoom_grid:
        settings.append((f"N={N},N_pos={N_pos}", model_config, replace(train_config, N=N, N_pos=N_pos)))
    return settings


def ablation_table(train_samples, eval_samples, model_config: ModelConfig, train_config,
                   zoom_grid=(), model_seed=0):
    rows = []
    for label, m_config, t_config in ablation_settings(model_config, train_config, zoom_grid):
        logger.info(f"Ablation setting '{label}'")
        model = GroundingModel(m_config, seed=model_seed)
        train_loop(train_samples, model, t_config)
        result, _, _ = evaluate_model(model, eval_samples, t_config.zoom)
        rows.append({"setting": label,
                     "r1_iou05": result.recall(1, 0.5),
                     "r5_iou05": result.recall(5, 0.5),
                     "query_count": result.query_count})
    return rows


def write_ablation_csv(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=ABLATION_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
