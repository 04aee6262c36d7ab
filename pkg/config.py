import json
import os
from dataclasses import asdict, dataclass, field, fields

from data import SyntheticSpec
from errors import ConfigurationError, MissingInputError
from evaluation import BenchConfig, EvalConfig
from model import ModelConfig
from training import TrainConfig


class Config:
    # Run Settings
    DEFAULT_SEED = 0
    DEFAULT_THREADS = 1  # determinism first; raise for parallel sample work
    DEFAULT_SAMPLE_COUNT = 512

    # Output names
    CHECKPOINT_FILE = 'model.ckpt'
    LOSS_LOG_FILE = 'loss.csv'
    REPORT_FILE = 'report.json'
    PREDICTIONS_FILE = 'predictions.jsonl'
    BENCH_FILE = 'bench.csv'
    ABLATION_FILE = 'ablation.csv'

    # Paths
    BASE_DIR = os.path.dirname(os.path.abspath(__file__))
    DEFAULT_CONFIG_FILE = os.path.join(BASE_DIR, 'run_config.json')

    # Logging
    LOG_LEVEL = "WARNING"


# Per-dataset settings: frame capacity, anchor scales, radii, regression weight, recall grid.
PRESETS = {
    "activitynet": {
        "model": {"max_T": 200, "anchor_scales": [4, 8, 16, 32, 48, 64, 80, 96], "window_radii": None},
        "train": {"N": 64, "N_pos": 4, "weights": {"mu": 1e-3, "lam": 0.1}},
        "data": {"T": 200},
        "eval": {"recall_n": [1, 5], "recall_m": [0.5, 0.7]},
    },
    "charades": {
        "model": {"max_T": 64, "anchor_scales": [8, 12, 16, 20], "window_radii": None},
        "train": {"N": 64, "N_pos": 4, "weights": {"mu": 5e-3, "lam": 0.1}},
        "data": {"T": 64},
        "eval": {"recall_n": [1, 5], "recall_m": [0.5, 0.7]},
    },
    "ego4d": {
        "model": {"max_T": 600, "anchor_scales": [4, 8], "window_radii": [32, 16, 8, 4]},
        "train": {"N": 64, "N_pos": 4, "weights": {"mu": 1e-3, "lam": 0.1}},
        "data": {"T": 600},
        "eval": {"recall_n": [1, 5], "recall_m": [0.3, 0.5]},
    },
}

SECTIONS = {
    "model": ModelConfig,
    "train": TrainConfig,
    "data": SyntheticSpec,
    "eval": EvalConfig,
    "bench": BenchConfig,
}


def _build(name, cls, values):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigurationError(f"Unknown key(s) in '{name}': {', '.join(unknown)}")
    try:
        return cls(**values)
    except TypeError as e:
        raise ConfigurationError(f"Invalid '{name}' section: {e}")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: SyntheticSpec = field(default_factory=SyntheticSpec)
    eval: EvalConfig = field(default_factory=EvalConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)
    seed: int = Config.DEFAULT_SEED
    threads: int = Config.DEFAULT_THREADS

    def __post_init__(self):
        self.train.seed = self.data.seed = self.bench.seed = self.seed
        self.train.threads = self.eval.threads = self.threads
        if self.threads < 1:
            raise ConfigurationError(f"threads must be >= 1, got {self.threads}")

    @classmethod
    def from_dict(cls, doc):
        if not isinstance(doc, dict):
            raise ConfigurationError("Configuration document must be a JSON object")
        unknown = sorted(set(doc) - set(SECTIONS) - {"seed", "threads"})
        if unknown:
            raise ConfigurationError(f"Unknown configuration section(s): {', '.join(unknown)}")
        sections = {name: _build(name, section, dict(doc.get(name) or {})) for name, section in SECTIONS.items()}
        return cls(**sections, seed=int(doc.get("seed", Config.DEFAULT_SEED)),
                   threads=int(doc.get("threads", Config.DEFAULT_THREADS)))

    def to_dict(self):
        return asdict(self)

    def check_data_fits_model(self):
        """The synthetic generator must produce inputs the model can take."""
        m, d = self.model, self.data
        problems = []
        if d.F != m.feature_dim:
            problems.append(f"data.F={d.F} != model.feature_dim={m.feature_dim}")
        if d.vocab_size > m.vocab_size:
            problems.append(f"data.vocab_size={d.vocab_size} > model.vocab_size={m.vocab_size}")
        if d.T > m.max_T:
            problems.append(f"data.T={d.T} > model.max_T={m.max_T}")
        if d.query_len[1] > m.max_L:
            problems.append(f"data.query_len max {d.query_len[1]} > model.max_L={m.max_L}")
        if problems:
            raise ConfigurationError("Data does not fit the model: " + "; ".join(problems))


def merge(base, update):
    """Recursive dict merge; `update` wins, nested dicts merge key by key."""
    out = dict(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = merge(out[key], value)
        else:
            out[key] = value
    return out


def read_config_document(path):
    if not os.path.exists(path):
        raise MissingInputError(f"Config file not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        text = f.read()
    if not text.strip():
        return {}
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"Config file {path} is not valid JSON: {e}")


def load_run_config(path=None, preset=None, overrides=None) -> RunConfig:
    """Precedence: defaults < preset < document < overrides."""
    doc = {}
    if preset:
        if preset not in PRESETS:
            raise ConfigurationError(f"Unknown preset '{preset}' (choose from {', '.join(sorted(PRESETS))})")
        doc = merge(doc, PRESETS[preset])
    if path:
        document = read_config_document(path)
        if not isinstance(document, dict):
            raise ConfigurationError(f"Config file {path} must hold a JSON object")
        doc = merge(doc, document)
    if overrides:
        doc = merge(doc, overrides)
    return RunConfig.from_dict(doc)
