from dataclasses import replace

import numpy as np
import pytest

from config import Config, load_run_config
from data import generate_dataset
from detection import Anchor, Proposal, iou
from errors import ConfigurationError, NonFiniteLossError
from evaluation import evaluate_model
from model import GroundingModel
from numerics import ComputationTrace, Tensor, backward, finite_diff_check
from training import (Adam, LossWeights, TrainConfig, assign_labels, assign_span_labels, classification_loss,
                      inject_positives, regression_loss, sample_loss, stage_loss, total_loss, train_loop)


def test_assign_labels_matches_brute_force(rng):
    weights = LossWeights()
    for _ in range(50):
        T = int(rng.integers(8, 40))
        s = float(rng.integers(0, T - 2))
        gt = (s, float(rng.integers(int(s) + 1, T)))
        anchors = [Anchor(t, w, h, 0) for t in range(T) for h, w in enumerate((1, 3, 6))]
        result = assign_labels(anchors, gt, weights, T)
        expected = [iou((max(0, a.t - a.w_h), min(T - 1, a.t + a.w_h)), gt) for a in anchors]
        assert np.max(np.abs(result.labels - expected)) < 1e-12
        assert list(result.positive_set) == [i for i, v in enumerate(expected) if v > 0.5]
        assert result.N_reg == len(result.positive_set)


def test_zero_length_ground_truth_gives_all_zero_labels():
    result = assign_span_labels([(0.0, 4.0), (4.0, 6.0)], (5.0, 5.0), LossWeights())
    assert result.degenerate
    assert not result.labels.any()
    assert result.N_reg == 0


def test_classification_loss_matches_formula(rng):
    for _ in range(50):
        K = int(rng.integers(1, 20))
        p = rng.uniform(0.0, 1.0, size=K)
        p[rng.random(K) < 0.1] = 0.0
        t = rng.uniform(0.0, 1.0, size=K)
        q = np.clip(p, 1e-7, 1 - 1e-7)
        expected = -np.mean(t * np.log(q) + (1 - t) * np.log(1 - q))
        assert classification_loss(Tensor(p), t).item() == pytest.approx(expected, abs=1e-12)


def test_regression_loss_matches_formula(rng):
    for _ in range(50):
        K, T = int(rng.integers(1, 10)), 50
        pred = rng.uniform(0, T - 1, size=(K, 2))
        gt = (10.0, 30.0)
        positives = sorted(rng.choice(K, size=int(rng.integers(1, K + 1)), replace=False))
        errors = (pred[positives] - np.array(gt)) / T
        elementwise = np.where(np.abs(errors) < 1, 0.5 * errors ** 2, np.abs(errors) - 0.5)
        expected = elementwise.sum() / len(positives)
        assert regression_loss(Tensor(pred), gt, positives, T).item() == pytest.approx(expected, abs=1e-12)


def test_regression_loss_without_positives_is_zero():
    assert regression_loss(Tensor(np.ones((3, 2))), (0.0, 1.0), [], 10).item() == 0.0


def test_stage_and_total_loss_weights():
    L1 = stage_loss(Tensor(0.5), Tensor(2.0), 1e-3)
    L2 = stage_loss(Tensor(0.25), Tensor(4.0), 1e-3)
    assert total_loss(L1, L2, 0.1).item() == pytest.approx(0.502 + 0.1 * 0.254)


def test_injected_positives_overlap_ground_truth(rng):
    gt = (20.0, 40.0)
    top = [Proposal(0.0, 5.0, 0.9)]
    out = inject_positives(top, gt, 4, rng, 100)
    assert len(out) == 5 and out[0] is top[0]
    for p in out[1:]:
        assert p.anchor is None
        assert p.start <= p.end
        assert iou(p.span, gt) >= 0.8 - 1e-12


def test_sample_loss_combines_components(tiny_model, tiny_sample, tiny_train_config):
    features, annotation = tiny_sample
    loss = sample_loss(tiny_model, features, annotation, tiny_train_config, np.random.default_rng(0))
    values = loss.values()
    assert all(np.isfinite(v) for v in values.values())
    w = tiny_train_config.weights
    expected = values["l_cls1"] + w.mu * values["l_reg1"] + w.lam * (values["l_cls2"] + w.mu * values["l_reg2"])
    assert values["total"] == pytest.approx(expected, rel=1e-12)
    assert len(loss.candidates) == tiny_train_config.N + tiny_train_config.N_pos


def test_end_to_end_gradient_matches_finite_differences(tiny_model, tiny_sample, tiny_train_config):
    features, annotation = tiny_sample
    frozen = sample_loss(tiny_model, features, annotation, tiny_train_config, np.random.default_rng(0)).candidates
    objective = lambda: sample_loss(tiny_model, features, annotation, tiny_train_config, candidates=frozen).total
    error = finite_diff_check(objective, tiny_model.parameters(), step=1e-5, samples=100,
                              rng=np.random.default_rng(1))
    assert error < 1e-4


def test_every_parameter_receives_a_gradient_path(tiny_model, tiny_sample, tiny_train_config):
    features, annotation = tiny_sample
    with ComputationTrace() as trace:
        loss = sample_loss(tiny_model, features, annotation, tiny_train_config, np.random.default_rng(0))
    grads = backward(trace, loss.total, accumulate=False)
    reached = {name for name, p in tiny_model.params.items() if p in grads}
    assert {"video.proj.w", "text.embed", "integration.wo", "head.cls.w1", "refine.reg.w2"} <= reached


def test_adam_with_zero_learning_rate_leaves_parameters_untouched(tiny_model):
    before = {name: p.data.copy() for name, p in tiny_model.params.items()}
    optimizer = Adam(tiny_model.parameters(), lr=0.0)
    optimizer.step({p: np.ones_like(p.data) for p in tiny_model.parameters()})
    for name, p in tiny_model.params.items():
        np.testing.assert_array_equal(p.data, before[name])


def test_adam_moves_against_the_gradient():
    p = Tensor(np.array([1.0, -1.0]), requires_grad=True)
    Adam([p], lr=0.1).step({p: np.array([2.0, -3.0])})
    np.testing.assert_allclose(p.data, [0.9, -0.9], atol=1e-6)


def test_train_config_validation():
    with pytest.raises(ConfigurationError):
        TrainConfig(batch_size=0)
    with pytest.raises(ConfigurationError):
        TrainConfig(N=4, N_pos=6)
    assert TrainConfig(weights={"mu": 5e-3}).weights.mu == 5e-3


def _train(tiny_config, tiny_spec, config, tmp_path, tag):
    samples = generate_dataset(tiny_spec, 6)
    model = GroundingModel(tiny_config, seed=0)
    log = tmp_path / f"loss_{tag}.csv"
    ckpt = tmp_path / f"model_{tag}.ckpt"
    result = train_loop(samples, model, config, log, ckpt)
    return result, log.read_text(encoding="utf-8"), ckpt.read_bytes()


def test_training_is_deterministic_across_runs_and_threads(tiny_config, tiny_spec, tiny_train_config, tmp_path):
    _, log_a, ckpt_a = _train(tiny_config, tiny_spec, tiny_train_config, tmp_path, "a")
    _, log_b, ckpt_b = _train(tiny_config, tiny_spec, tiny_train_config, tmp_path, "b")
    _, log_c, ckpt_c = _train(tiny_config, tiny_spec, replace(tiny_train_config, threads=2), tmp_path, "c")
    assert log_a == log_b == log_c
    assert ckpt_a == ckpt_b == ckpt_c
    lines = log_a.splitlines()
    assert lines[0] == "step,l_cls1,l_reg1,l_cls2,l_reg2,total"
    assert len(lines) == 1 + tiny_train_config.steps


def test_training_reduces_the_loss(tiny_config, tiny_spec, tiny_train_config, tmp_path):
    config = replace(tiny_train_config, steps=40, batch_size=6)
    result, _, _ = _train(tiny_config, tiny_spec, config, tmp_path, "smoke")
    totals = [row["total"] for row in result.rows]
    assert np.mean(totals[-5:]) < np.mean(totals[:5])


def test_non_finite_loss_aborts_training(tiny_config, tiny_spec, tiny_train_config):
    model = GroundingModel(tiny_config, seed=0)
    model.params["head.cls.b2"].data = np.full(2, np.nan)
    with pytest.raises(NonFiniteLossError) as info:
        train_loop(generate_dataset(tiny_spec, 2), model, tiny_train_config)
    assert info.value.step == 1


def test_zero_stage2_weight_gives_refinement_no_gradient(tiny_model, tiny_sample, tiny_train_config):
    features, annotation = tiny_sample
    config = replace(tiny_train_config, weights=LossWeights(mu=1.0, lam=0.0))
    with ComputationTrace() as trace:
        loss = sample_loss(tiny_model, features, annotation, config, np.random.default_rng(0))
    grads = backward(trace, loss.total, accumulate=False)
    assert loss.values()["l_cls2"] > 0.0
    for name, p in tiny_model.params.items():
        if name.startswith("refine."):
            assert not np.any(grads.get(p, 0.0)), name
    assert np.any(grads[tiny_model.params["head.cls.w2"]])


def test_regression_gradient_vanishes_on_negative_rows(rng):
    pred = Tensor(rng.uniform(0, 49, size=(6, 2)), requires_grad=True)
    positives = [1, 4]
    with ComputationTrace() as trace:
        loss = regression_loss(pred, (10.0, 30.0), positives, 50)
    grad = backward(trace, loss, accumulate=False)[pred]
    assert np.all(np.any(grad[positives] != 0.0, axis=1))
    assert not np.any(np.delete(grad, positives, axis=0))


@pytest.mark.slow
def test_desk_scale_run_grounds_planted_queries():
    config = load_run_config(Config.DEFAULT_CONFIG_FILE)
    train = generate_dataset(config.data, 512)
    held_out = generate_dataset(replace(config.data, seed=config.data.seed + 1), 128)
    model = GroundingModel(config.model, seed=config.seed)
    train_loop(train, model, config.train)

    result, _, _ = evaluate_model(model, held_out, config.train.zoom, config.eval)
    assert result.recall(1, 0.5) >= 70.0
    assert result.recall(5, 0.5) >= result.recall(1, 0.5)
