import argparse
import logging
import os
import sys

from attention import FULL
from config import Config, PRESETS, load_run_config
from data import (FEATURE_MAGIC, compute_snr, generate_dataset, load_dataset, read_annotations,
                  read_features, save_dataset, write_predictions)
from errors import FormatError, GroundingError
from evaluation import (ablation_table, build_report, evaluate_model, run_bench, write_ablation_csv,
                        write_bench_csv, write_report)
from model import CHECKPOINT_MAGIC, GroundingModel, load_checkpoint, read_checkpoint
from training import train_loop

logger = logging.getLogger(__name__)

LOG_FORMAT = '%(asctime)s [%(levelname)s] %(name)s: %(message)s'


# --- Commands ---

def cmd_gen_data(config, out_dir, count):
    samples = generate_dataset(config.data, count, config.threads)
    save_dataset(out_dir, samples, config.data)
    print(f"Generated {count} samples in {out_dir}")
    return 0


def cmd_train(config, data_dir, out_checkpoint, loss_log=None):
    config.check_data_fits_model()
    samples = load_dataset(data_dir)
    model = GroundingModel(config.model, seed=config.seed)
    logger.info(f"Model has {model.parameter_count()} parameters; schedule radii {model.schedule.radii}")

    out_dir = os.path.dirname(os.path.abspath(out_checkpoint))
    os.makedirs(out_dir, exist_ok=True)
    loss_log = loss_log or os.path.join(out_dir, Config.LOSS_LOG_FILE)
    result = train_loop(samples, model, config.train, loss_log, out_checkpoint)
    print(f"Trained {len(result.rows)} steps: loss {result.initial_total:.5f} -> {result.final_total:.5f}")
    print(f"Checkpoint: {out_checkpoint}")
    print(f"Loss log: {loss_log}")
    return 0


def cmd_eval(config, checkpoint, data_dir, out_report, predictions_path=None):
    if not os.path.exists(checkpoint):
        raise FileNotFoundError(f"Checkpoint not found: {checkpoint}")
    model = load_checkpoint(GroundingModel(config.model, seed=config.seed), checkpoint)
    samples = load_dataset(data_dir)

    result, buckets, records = evaluate_model(model, samples, config.train.zoom, config.eval)
    out_dir = os.path.dirname(os.path.abspath(out_report))
    os.makedirs(out_dir, exist_ok=True)
    predictions_path = predictions_path or os.path.join(out_dir, Config.PREDICTIONS_FILE)
    write_predictions(predictions_path, records)
    write_report(out_report, build_report(result, buckets))

    for key, value in result.recall_map().items():
        print(f"{key}: {value:.2f}")
    print(f"Queries: {result.query_count} | report: {out_report}")
    return 0


def cmd_bench(config, out_csv):
    model = GroundingModel(config.model, seed=config.seed)
    logger.info(f"Model size: {model.parameter_count()} parameters")
    rows = run_bench(config.bench)
    write_bench_csv(out_csv, rows)
    for row in rows:
        print(f"{row.config:<24} ops {row.op_count:>9}  median {row.wall_ms_median:8.3f} ms")
    return 0


def cmd_inspect(path):
    if not os.path.exists(path):
        raise FileNotFoundError(f"No such file: {path}")
    with open(path, "rb") as f:
        head = f.read(len(CHECKPOINT_MAGIC))

    if head.startswith(CHECKPOINT_MAGIC):
        manifest, arrays = read_checkpoint(path)
        total = sum(a.size for a in arrays.values())
        print(f"Checkpoint (format version {manifest.get('version')})")
        print(f"Tensors: {len(arrays)}")
        print(f"Parameters: {total}")
        for entry in manifest["parameters"]:
            print(f"  {entry['name']}: {tuple(entry['shape'])}")
    elif head.startswith(FEATURE_MAGIC):
        features = read_features(path)
        T, F = features.shape
        print("Feature file (format version 1)")
        print(f"{T}x{F} float64")
    elif path.endswith(".jsonl"):
        annotations = read_annotations(path)
        print(f"Annotations: {len(annotations)}")
        if annotations:
            snrs = [compute_snr(a) for a in annotations]
            print(f"SNR range: {min(snrs):.3f} - {max(snrs):.3f}")
    else:
        raise FormatError("unrecognized file format", offset=0, path=path)
    return 0


def cmd_ablate(config, train_dir, eval_dir, out_csv, zoom_grid=()):
    config.check_data_fits_model()
    train_samples = load_dataset(train_dir)
    eval_samples = load_dataset(eval_dir)
    rows = ablation_table(train_samples, eval_samples, config.model, config.train, zoom_grid, config.seed)
    write_ablation_csv(out_csv, rows)
    for row in rows:
        print(f"{row['setting']:<16} R@1,IoU@0.5 {row['r1_iou05']:6.2f}  R@5,IoU@0.5 {row['r5_iou05']:6.2f}")
    return 0


# --- Argument parsing ---

def _radius(value):
    if value == FULL:
        return FULL
    try:
        radius = int(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"radius must be an integer or '{FULL}', got '{value}'")
    if radius < 0:
        raise argparse.ArgumentTypeError(f"radius must be >= 0, got {radius}")
    return radius


def _zoom_pair(value):
    try:
        n, n_pos = (int(x) for x in value.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected N:N_pos, got '{value}'")
    return n, n_pos


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None,
                        help=f"JSON run configuration document (without --config or --preset: {Config.DEFAULT_CONFIG_FILE})")
    common.add_argument("--preset", default=None, choices=sorted(PRESETS), help="dataset preset applied before --config")
    common.add_argument("--seed", type=int, default=None, help="seed for every random draw (overrides the config)")
    common.add_argument("--threads", type=int, default=None, help="worker threads for per-sample work")
    common.add_argument("--out", default=None, help="output path")
    common.add_argument("--log-level", default=Config.LOG_LEVEL,
                        choices=["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"], help="logging level")

    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(description="Temporal video grounding on synthetic features", formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], formatter_class=fmt, help="generate a synthetic dataset")
    p.add_argument("--count", type=int, default=Config.DEFAULT_SAMPLE_COUNT, help="number of samples")
    p.add_argument("--snr-range", type=float, nargs=2, default=None, metavar=("LO", "HI"),
                   help="span-to-video length range (overrides the config)")
    p.set_defaults(handler=_run_gen_data)

    p = sub.add_parser("train", parents=[common], formatter_class=fmt, help="train a model")
    p.add_argument("--data", required=True, help="dataset directory written by gen-data")
    p.add_argument("--steps", type=int, default=None, help="optimizer steps (overrides the config)")
    p.add_argument("--lr", type=float, default=None, help="Adam learning rate (overrides the config)")
    p.add_argument("--batch-size", type=int, default=None, help="samples per step (overrides the config)")
    p.add_argument("--loss-log", default=None, help="per-step loss CSV (default: next to the checkpoint)")
    p.set_defaults(handler=_run_train)

    p = sub.add_parser("eval", parents=[common], formatter_class=fmt, help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True, help="checkpoint written by train")
    p.add_argument("--data", required=True, help="dataset directory written by gen-data")
    p.add_argument("--predictions", default=None, help="prediction JSONL (default: next to the report)")
    p.set_defaults(handler=_run_eval)

    p = sub.add_parser("bench", parents=[common], formatter_class=fmt, help="benchmark attention cost")
    p.add_argument("--T", type=int, nargs="+", default=None, help="frame counts (overrides the config)")
    p.add_argument("--L", type=int, default=None, help="query length (overrides the config)")
    p.add_argument("--radii", type=_radius, nargs="+", default=None, help=f"radii, '{FULL}' for full attention")
    p.add_argument("--repeats", type=int, default=None, help="timed forward passes per row")
    p.set_defaults(handler=_run_bench)

    p = sub.add_parser("inspect", parents=[common], formatter_class=fmt,
                       help="summarize a checkpoint, feature file or annotations file")
    p.add_argument("path", help="file to inspect")
    p.set_defaults(handler=_run_inspect)

    p = sub.add_parser("ablate", parents=[common], formatter_class=fmt, help="compare radius schedules")
    p.add_argument("--train-data", required=True, help="training dataset directory")
    p.add_argument("--eval-data", required=True, help="evaluation dataset directory")
    p.add_argument("--zoom-grid", type=_zoom_pair, nargs="*", default=[], help="extra N:N_pos settings")
    p.set_defaults(handler=_run_ablate)
    return parser


def _overrides(args, **sections):
    doc = {name: {k: v for k, v in values.items() if v is not None} for name, values in sections.items()}
    if args.seed is not None:
        doc["seed"] = args.seed
    if args.threads is not None:
        doc["threads"] = args.threads
    return doc


def _config_path(args):
    # The shipped document only stands in when nothing else picks the settings.
    if args.config is None and args.preset is None:
        return Config.DEFAULT_CONFIG_FILE
    return args.config


def _load(args, **sections):
    return load_run_config(_config_path(args), args.preset, _overrides(args, **sections))


def _run_gen_data(args):
    config = _load(args, data={"snr_range": args.snr_range})
    return cmd_gen_data(config, args.out or "data", args.count)


def _run_train(args):
    config = _load(args, train={"steps": args.steps, "learning_rate": args.lr, "batch_size": args.batch_size})
    return cmd_train(config, args.data, args.out or Config.CHECKPOINT_FILE, args.loss_log)


def _run_eval(args):
    return cmd_eval(_load(args), args.checkpoint, args.data, args.out or Config.REPORT_FILE, args.predictions)


def _run_bench(args):
    config = _load(args, bench={"T_grid": args.T, "L": args.L, "radii": args.radii, "repeats": args.repeats})
    return cmd_bench(config, args.out or Config.BENCH_FILE)


def _run_inspect(args):
    return cmd_inspect(args.path)


def _run_ablate(args):
    return cmd_ablate(_load(args), args.train_data, args.eval_data, args.out or Config.ABLATION_FILE,
                      tuple(args.zoom_grid))


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format=LOG_FORMAT)

    try:
        return args.handler(args)
    except GroundingError as e:
        logger.critical(f"{args.command} failed: {e}")
        return e.exit_code
    except FileNotFoundError as e:
        logger.critical(f"{args.command} failed: {e}")
        return 2
    except OSError as e:
        logger.critical(f"{args.command} failed: I/O error on {e.filename}: {e.strerror}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
