import json
import logging
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import List, Sequence, Tuple

import numpy as np

from errors import (AnnotationParseError, ConfigurationError, ContractError, DimensionError, FormatError,
                    GenerationError, MissingInputError)

logger = logging.getLogger(__name__)

FEATURE_MAGIC = b"NFTF"
FEATURE_VERSION = 1
FEATURE_HEADER = struct.Struct("<4sIII")
FEATURE_SUFFIX = ".nftf"

FEATURES_DIR = "features"
ANNOTATIONS_FILE = "annotations.jsonl"
MANIFEST_FILE = "manifest.json"
ANNOTATION_KEYS = ("query_id", "video_id", "token_ids", "t_s", "t_e", "T")


@dataclass
class Annotation:
    query_id: str
    video_id: str
    token_ids: List[int]
    t_s: float
    t_e: float
    T: int

    def __post_init__(self):
        self.token_ids = [int(t) for t in self.token_ids]
        if not isinstance(self.T, int) or self.T < 1:
            raise ContractError(f"T must be a positive integer, got {self.T!r}")
        if not 0 <= self.t_s < self.t_e <= self.T - 1:
            raise ContractError(f"span ({self.t_s}, {self.t_e}) violates 0 <= t_s < t_e <= T-1 with T={self.T}")

    @property
    def gt(self) -> Tuple[float, float]:
        return (float(self.t_s), float(self.t_e))

    def to_dict(self):
        return {k: getattr(self, k) for k in ANNOTATION_KEYS}


@dataclass
class SyntheticSpec:
    T: int = 100
    F: int = 32
    vocab_size: int = 64
    snr_range: Tuple[float, float] = (0.1, 0.3)
    noise_scale: float = 1.0
    pattern_strength: float = 3.0
    query_len: Tuple[int, int] = (3, 6)
    seed: int = 0
    pattern_seed: int = 1234

    def __post_init__(self):
        self.snr_range = tuple(float(x) for x in self.snr_range)
        self.query_len = tuple(int(x) for x in self.query_len)
        lo, hi = self.snr_range
        if not 0.0 < lo <= hi <= 1.0:
            raise ConfigurationError(f"snr_range must satisfy 0 < lo <= hi <= 1, got {self.snr_range}")
        if self.T < 2 or self.F < 1 or self.vocab_size < 1:
            raise ConfigurationError(f"invalid synthetic dims T={self.T}, F={self.F}, vocab={self.vocab_size}")
        if not 1 <= self.query_len[0] <= self.query_len[1]:
            raise ConfigurationError(f"invalid query_len {self.query_len}")


def compute_snr(a: Annotation) -> float:
    return (a.t_e - a.t_s) / a.T


def token_pattern(token_ids: Sequence[int], F: int, pattern_seed: int) -> np.ndarray:
    """Unit direction planted for a query: normalized sum of seeded per-token directions."""
    total = np.zeros(F)
    for token in token_ids:
        total += np.random.default_rng([pattern_seed, int(token)]).standard_normal(F)
    norm = np.linalg.norm(total)
    return total / norm if norm > 0 else total


def generate_sample(spec: SyntheticSpec, rng: np.random.Generator, index=0):
    T = spec.T
    lo, hi = spec.snr_range
    if int(round(hi * T)) < 1:
        raise GenerationError(f"snr_range {spec.snr_range} gives spans shorter than one frame at T={T}")

    n_tokens = int(rng.integers(spec.query_len[0], spec.query_len[1] + 1))
    token_ids = rng.integers(0, spec.vocab_size, size=n_tokens).tolist()
    length = min(int(round(rng.uniform(lo, hi) * T)), T - 1)
    if length < 1:
        raise GenerationError(f"drew a span shorter than one frame (snr_range {spec.snr_range}, T={T})")
    t_s = int(rng.integers(0, T - length))
    t_e = t_s + length

    features = rng.normal(0.0, spec.noise_scale, size=(T, spec.F))
    features[t_s:t_e + 1] += spec.pattern_strength * token_pattern(token_ids, spec.F, spec.pattern_seed)
    annotation = Annotation(f"q_{index:05d}", f"vid_{index:05d}", token_ids, float(t_s), float(t_e), T)
    return features, annotation


def generate_dataset(spec: SyntheticSpec, count: int, threads=1):
    """
    Each sample draws from its own generator seeded by (seed, index), so the
    result does not depend on the number of worker threads.
    """
    def build(index):
        return generate_sample(spec, np.random.default_rng([spec.seed, index]), index)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as executor:
            return list(executor.map(build, range(count)))
    return [build(i) for i in range(count)]


# --- Feature files ---

def write_features(path, features):
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] == 0 or features.shape[1] == 0:
        raise DimensionError(f"feature matrix must be T x F with T, F >= 1, got shape {features.shape}")
    T, F = features.shape
    with open(path, "wb") as f:
        f.write(FEATURE_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, T, F))
        f.write(np.ascontiguousarray(features, dtype="<f8").tobytes())


def _require(raw, pos, n, what, path):
    if len(raw) < pos + n:
        raise FormatError(f"truncated {what}", offset=pos, path=path)


def read_feature_header(raw: bytes, path=None):
    _require(raw, 0, 4, "magic", path)
    if raw[:4] != FEATURE_MAGIC:
        raise FormatError("bad feature magic", offset=0, path=path)
    _require(raw, 4, 4, "format version", path)
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != FEATURE_VERSION:
        raise FormatError(f"unsupported feature format version {version}", offset=4, path=path)
    _require(raw, 8, 4, "frame count", path)
    _require(raw, 12, 4, "feature width", path)
    _, _, T, F = FEATURE_HEADER.unpack_from(raw, 0)
    return version, T, F


def read_features(path) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    _, T, F = read_feature_header(raw, path)
    start = FEATURE_HEADER.size
    if T == 0 or F == 0:
        raise FormatError(f"empty feature matrix {T}x{F}", offset=8, path=path)
    _require(raw, start, 8 * T * F, "feature values", path)
    stop = start + 8 * T * F
    if len(raw) > stop:
        raise FormatError("trailing bytes after feature values", offset=stop, path=path)
    return np.frombuffer(raw[start:stop], dtype="<f8").astype(np.float64).reshape(T, F)


# --- JSON-lines files ---

def read_annotations(path) -> List[Annotation]:
    annotations = []
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise AnnotationParseError(f"malformed JSON ({e.msg})", line_no, path)
            if not isinstance(obj, dict) or set(obj) != set(ANNOTATION_KEYS):
                raise AnnotationParseError(f"expected keys {list(ANNOTATION_KEYS)}", line_no, path)
            try:
                annotations.append(Annotation(**obj))
            except (ContractError, TypeError, ValueError) as e:
                raise AnnotationParseError(str(e), line_no, path)
    return annotations


def write_annotations(path, annotations: Sequence[Annotation]):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for a in annotations:
            f.write(json.dumps(a.to_dict()) + "\n")


def write_predictions(path, records):
    """records: iterable of (query_id, [(start, end, score), ...]) already sorted by score."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for query_id, proposals in records:
            rows = [[float(s), float(e), float(score)] for s, e, score in proposals]
            f.write(json.dumps({"query_id": query_id, "proposals": rows}) + "\n")


def read_predictions(path):
    predictions = {}
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                predictions[obj["query_id"]] = [tuple(p) for p in obj["proposals"]]
            except (json.JSONDecodeError, KeyError, TypeError) as e:
                raise AnnotationParseError(f"bad prediction record ({e})", line_no, path)
    return predictions


# --- Dataset directories ---

def save_dataset(out_dir, samples, spec: SyntheticSpec):
    feature_dir = os.path.join(out_dir, FEATURES_DIR)
    os.makedirs(feature_dir, exist_ok=True)
    for features, annotation in samples:
        write_features(os.path.join(feature_dir, annotation.video_id + FEATURE_SUFFIX), features)
    write_annotations(os.path.join(out_dir, ANNOTATIONS_FILE), [a for _, a in samples])

    manifest = {"spec": asdict(spec), "seed": spec.seed, "count": len(samples),
                "feature_format": {"magic": FEATURE_MAGIC.decode("ascii"),
                                   "version": FEATURE_VERSION, "dtype": "float64"}}
    with open(os.path.join(out_dir, MANIFEST_FILE), "w", encoding="utf-8", newline="\n") as f:
        json.dump(manifest, f, indent=4)
        f.write("\n")
    logger.info(f"Wrote {len(samples)} samples to {out_dir}")


def load_dataset(data_dir):
    ann_path = os.path.join(data_dir, ANNOTATIONS_FILE)
    if not os.path.exists(ann_path):
        raise MissingInputError(f"No annotations found at {ann_path}")
    samples = []
    for annotation in read_annotations(ann_path):
        feat_path = os.path.join(data_dir, FEATURES_DIR, annotation.video_id + FEATURE_SUFFIX)
        if not os.path.exists(feat_path):
            raise MissingInputError(f"Feature file missing for {annotation.video_id}: {feat_path}")
        features = read_features(feat_path)
        if features.shape[0] != annotation.T:
            raise FormatError(f"{annotation.video_id} has {features.shape[0]} frames, annotation says T={annotation.T}",
                              path=feat_path)
        samples.append((features, annotation))
    logger.info(f"Loaded {len(samples)} samples from {data_dir}")
    return samples
