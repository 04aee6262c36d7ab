import csv
import json
import struct

import pytest

from config import Config, load_run_config
from main import _load, build_parser, main
from model import CHECKPOINT_MAGIC, GroundingModel, save_checkpoint
from training import TrainConfig

TINY_RUN = {
    "model": {"D": 8, "heads": 2, "enc_layers": 1, "M": 2, "anchor_scales": [2, 4], "feature_dim": 4,
              "vocab_size": 10, "max_T": 16, "max_L": 6, "head_hidden": 8},
    "train": {"steps": 2, "batch_size": 2, "N": 6, "N_pos": 2, "learning_rate": 0.01},
    "data": {"T": 12, "F": 4, "vocab_size": 10, "snr_range": [0.2, 0.4], "query_len": [2, 4]},
    "bench": {"T_grid": [30, 40], "L": 5, "radii": [2, "full"], "repeats": 1, "D": 8, "heads": 2},
}


@pytest.fixture
def run_file(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps(TINY_RUN), encoding="utf-8")
    return str(path)


@pytest.fixture
def dataset(tmp_path, run_file):
    out = tmp_path / "data"
    assert main(["gen-data", "--config", run_file, "--count", "4", "--out", str(out)]) == 0
    return out


def _tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_gen_data_writes_features_annotations_and_manifest(dataset):
    assert len(list((dataset / "features").glob("*.nftf"))) == 4
    assert len((dataset / "annotations.jsonl").read_text(encoding="utf-8").splitlines()) == 4
    manifest = json.loads((dataset / "manifest.json").read_text(encoding="utf-8"))
    assert manifest["count"] == 4


def test_gen_data_is_byte_identical_for_a_seed(tmp_path, run_file, dataset):
    again = tmp_path / "again"
    assert main(["gen-data", "--config", run_file, "--count", "4", "--out", str(again)]) == 0
    assert _tree(again) == _tree(dataset)
    other = tmp_path / "other"
    assert main(["gen-data", "--config", run_file, "--count", "4", "--seed", "5", "--out", str(other)]) == 0
    assert _tree(other) != _tree(dataset)


def test_gen_data_with_zero_count(tmp_path, run_file):
    out = tmp_path / "empty"
    assert main(["gen-data", "--config", run_file, "--count", "0", "--out", str(out)]) == 0
    assert (out / "annotations.jsonl").read_text(encoding="utf-8") == ""
    assert not list((out / "features").iterdir())


def test_train_with_zero_learning_rate_keeps_initialization(tmp_path, run_file, dataset):
    ckpt = tmp_path / "model.ckpt"
    code = main(["train", "--config", run_file, "--data", str(dataset), "--steps", "1", "--lr", "0",
                 "--out", str(ckpt)])
    assert code == 0
    reference = tmp_path / "init.ckpt"
    save_checkpoint(GroundingModel(load_run_config(run_file).model, seed=0), reference)
    assert ckpt.read_bytes() == reference.read_bytes()
    assert (tmp_path / "loss.csv").exists()


def test_train_is_deterministic(tmp_path, run_file, dataset):
    logs = []
    for tag in ("a", "b"):
        log = tmp_path / f"loss_{tag}.csv"
        assert main(["train", "--config", run_file, "--data", str(dataset), "--out", str(tmp_path / f"{tag}.ckpt"),
                     "--loss-log", str(log)]) == 0
        logs.append(log.read_text(encoding="utf-8"))
    assert logs[0] == logs[1]


def test_train_without_data_exits_with_missing_input(tmp_path, run_file):
    assert main(["train", "--config", run_file, "--data", str(tmp_path / "nothing")]) == 2


def test_eval_writes_report_and_predictions(tmp_path, run_file, dataset):
    ckpt = tmp_path / "model.ckpt"
    assert main(["train", "--config", run_file, "--data", str(dataset), "--out", str(ckpt)]) == 0
    report_path = tmp_path / "out" / "report.json"
    args = ["eval", "--config", run_file, "--checkpoint", str(ckpt), "--data", str(dataset),
            "--out", str(report_path)]
    assert main(args) == 0
    first = report_path.read_bytes()
    report = json.loads(first)
    assert report["query_count"] == 4
    assert all(0.0 <= v <= 100.0 for v in report["recall"].values())
    assert sum(b["count"] for b in report["snr_buckets"]) == 4

    lines = (tmp_path / "out" / "predictions.jsonl").read_text(encoding="utf-8").splitlines()
    assert len(lines) == 4
    assert all(len(json.loads(line)["proposals"]) == min(6, 12 * 2) for line in lines)

    assert main(args) == 0
    assert report_path.read_bytes() == first


def test_eval_with_mismatched_checkpoint_fails(tmp_path, run_file, dataset, caplog):
    ckpt = tmp_path / "wide.ckpt"
    wide = dict(TINY_RUN, model=dict(TINY_RUN["model"], D=16))
    save_checkpoint(GroundingModel(load_run_config(overrides=wide).model), ckpt)
    code = main(["eval", "--config", run_file, "--checkpoint", str(ckpt), "--data", str(dataset),
                 "--out", str(tmp_path / "r.json")])
    assert code == 1
    assert "video.proj.w" in caplog.text


def test_bench_csv_has_one_row_per_grid_point(tmp_path, run_file):
    out = tmp_path / "bench.csv"
    assert main(["bench", "--config", run_file, "--out", str(out)]) == 0
    with open(out, newline="", encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 2 * 2
    assert [int(r["op_count"]) for r in rows] == [30 * 5 - 6 + 30 * 5 + 5 * 35, 35 * 35,
                                                  40 * 5 - 6 + 40 * 5 + 5 * 45, 45 * 45]


def test_inspect_summaries(tmp_path, run_file, dataset, capsys):
    ckpt = tmp_path / "model.ckpt"
    model = GroundingModel(load_run_config(run_file).model)
    save_checkpoint(model, ckpt)
    assert main(["inspect", str(ckpt)]) == 0
    assert f"Parameters: {model.parameter_count()}" in capsys.readouterr().out

    feature_file = next((dataset / "features").glob("*.nftf"))
    assert main(["inspect", str(feature_file)]) == 0
    assert "12x4 float64" in capsys.readouterr().out

    assert main(["inspect", str(dataset / "annotations.jsonl")]) == 0
    assert "Annotations: 4" in capsys.readouterr().out


def test_inspect_errors_map_to_format_exit_code(tmp_path, dataset, caplog):
    feature_file = next((dataset / "features").glob("*.nftf"))
    truncated = tmp_path / "cut.nftf"
    truncated.write_bytes(feature_file.read_bytes()[:12])
    assert main(["inspect", str(truncated)]) == 3
    assert "offset 12" in caplog.text

    unknown = tmp_path / "blob.bin"
    unknown.write_bytes(b"\x00\x01\x02")
    assert main(["inspect", str(unknown)]) == 3
    assert main(["inspect", str(tmp_path / "absent.bin")]) == 2


def test_ablate_reports_three_schedules(tmp_path, run_file, dataset):
    out = tmp_path / "ablation.csv"
    assert main(["ablate", "--config", run_file, "--train-data", str(dataset), "--eval-data", str(dataset),
                 "--out", str(out)]) == 0
    with open(out, newline="", encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    assert [r["setting"] for r in rows] == ["fixed", "increase", "decrease"]
    assert all(r["query_count"] == "4" for r in rows)


@pytest.mark.parametrize("command", ["gen-data", "train", "eval", "bench", "inspect", "ablate"])
def test_help_lists_flags_with_defaults(command, capsys):
    with pytest.raises(SystemExit) as info:
        build_parser().parse_args([command, "--help"])
    assert info.value.code == 0
    text = capsys.readouterr().out
    for flag in ("--config", "--seed", "--threads", "--out", "--preset", "--log-level"):
        assert flag in text
    assert "default" in text


@pytest.mark.parametrize("manifest", [
    {"version": 1},
    {"version": 1, "parameters": {"video.proj.w": [4, 8]}},
    {"version": 1, "parameters": [{"name": "video.proj.w", "shape": [4, 8]}]},
    {"version": 1, "parameters": [{"name": "video.proj.w", "shape": "4x8", "offset": 0}]},
    [1, 2, 3],
])
def test_inspect_malformed_checkpoint_manifest(tmp_path, manifest, caplog):
    header = json.dumps(manifest).encode("utf-8")
    path = tmp_path / "bad.ckpt"
    path.write_bytes(CHECKPOINT_MAGIC + struct.pack("<I", len(header)) + header)
    assert main(["inspect", str(path)]) == 3
    assert f"offset {len(CHECKPOINT_MAGIC) + 4}" in caplog.text


def test_shipped_config_applies_without_config_or_preset():
    parser = build_parser()
    shipped = _load(parser.parse_args(["train", "--data", "d"]))
    assert shipped.train.steps == load_run_config(Config.DEFAULT_CONFIG_FILE).train.steps == 2000
    assert shipped.train.learning_rate == 0.001

    preset = _load(parser.parse_args(["train", "--data", "d", "--preset", "charades"]))
    assert preset.model.max_T == 64
    assert preset.train.steps == TrainConfig().steps
