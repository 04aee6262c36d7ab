import numpy as np
import pytest

from attention import (FULL, JointSequence, attention_op_count, build_mask, full_attention, neighbor_key_set,
                       neighboring_attention, visual_window_pairs, windowed_attention)
from errors import DimensionError, VisualIndexError
from model import ParamStore
from numerics import Tensor


def random_instance(rng, T, L, D, heads):
    params = ParamStore(rng, D).attention("attn", D, heads)
    X = JointSequence(Tensor(rng.normal(size=(T + L, D))), T, L)
    return X, params


def test_neighbor_key_set_matches_exhaustive_scan(rng):
    for _ in range(50):
        T, L = int(rng.integers(1, 20)), int(rng.integers(1, 6))
        r, i = int(rng.integers(0, 6)), int(rng.integers(0, T))
        expected = [k for k in range(T + L) if k >= T or abs(k - i) <= r]
        assert neighbor_key_set(i, r, T, L) == expected


@pytest.mark.parametrize("i, r, T, L, expected", [
    (0, 1, 5, 2, [0, 1, 5, 6]),
    (4, 2, 5, 1, [2, 3, 4, 5]),
    (2, 10, 5, 1, [0, 1, 2, 3, 4, 5]),
])
def test_neighbor_key_set_clamps_at_edges(i, r, T, L, expected):
    assert neighbor_key_set(i, r, T, L) == expected


def test_neighbor_key_set_rejects_text_index():
    with pytest.raises(VisualIndexError):
        neighbor_key_set(5, 1, 5, 2)


def test_mask_rows_follow_key_sets():
    T, L, r = 9, 3, 2
    mask = build_mask(T, L, r)
    for i in range(T):
        assert list(np.flatnonzero(mask.visible[i])) == neighbor_key_set(i, r, T, L)
    assert mask.visible[T:].all()
    assert build_mask(T, L, FULL).visible.all()
    assert build_mask(T, L, None).visible.all()


def test_large_radius_equals_full_attention(rng):
    for _ in range(100):
        T, L = int(rng.integers(1, 33)), int(rng.integers(1, 9))
        heads = int(rng.choice([1, 2, 4]))
        D = heads * int(rng.integers(1, 9))
        X, params = random_instance(rng, T, L, D, heads)
        r = T - 1 + int(rng.integers(0, 3))
        full = full_attention(X, params).data
        local = neighboring_attention(X, params, build_mask(T, L, r)).data
        assert np.max(np.abs(full - local)) < 1e-9


def test_tokens_outside_the_window_do_not_reach_a_visual_row(rng):
    for _ in range(100):
        T, L, r = int(rng.integers(4, 16)), int(rng.integers(1, 5)), int(rng.integers(0, 3))
        X, params = random_instance(rng, T, L, 8, 2)
        mask = build_mask(T, L, r)
        base = neighboring_attention(X, params, mask).data

        i = int(rng.integers(0, T))
        outside = [j for j in range(T) if abs(j - i) > r]
        if not outside:
            continue
        j = int(rng.choice(outside))
        perturbed = X.X.data.copy()
        perturbed[j] += rng.normal(size=8) * 5.0
        moved = neighboring_attention(JointSequence(Tensor(perturbed), T, L), params, mask).data
        assert np.max(np.abs(moved[i] - base[i])) < 1e-12


def test_text_rows_do_not_depend_on_radius(rng):
    T, L = 10, 3
    X, params = random_instance(rng, T, L, 8, 2)
    outputs = [neighboring_attention(X, params, build_mask(T, L, r)).data for r in (0, 1, 2, FULL)]
    for out in outputs[1:]:
        assert np.max(np.abs(out[T:] - outputs[0][T:])) < 1e-12


@pytest.mark.parametrize("r", [0, 1, 3, 7, 12, FULL])
def test_windowed_path_equals_masked_path(rng, r):
    T, L = 12, 4
    X, params = random_instance(rng, T, L, 8, 2)
    masked = neighboring_attention(X, params, build_mask(T, L, r)).data
    windowed = windowed_attention(X.X.data, T, params, r)
    assert np.max(np.abs(masked - windowed)) < 1e-9


def test_joint_sequence_round_trip(rng):
    V, Q = Tensor(rng.normal(size=(5, 4))), Tensor(rng.normal(size=(2, 4)))
    joint = JointSequence.join(V, Q)
    assert joint.X.shape == (7, 4) and joint.D == 4
    V2, Q2 = joint.split()
    np.testing.assert_array_equal(V2.data, V.data)
    np.testing.assert_array_equal(Q2.data, Q.data)


def test_joint_sequence_needs_text():
    with pytest.raises(DimensionError):
        JointSequence(Tensor(np.zeros((4, 2))), 4, 0)


def test_op_count_reference_values():
    assert attention_op_count(200, 20, FULL) == 48400
    na = attention_op_count(200, 20, 8)
    assert na == 200 * 17 - 8 * 9 + 200 * 20 + 20 * 220 == 11728
    assert na < 0.25 * 48400


def test_op_count_equals_mask_population(rng):
    for _ in range(50):
        T, L, r = int(rng.integers(1, 30)), int(rng.integers(1, 8)), int(rng.integers(0, 35))
        assert attention_op_count(T, L, r) == int(build_mask(T, L, r).visible.sum())
        assert visual_window_pairs(T, r) == int(build_mask(T, L, r).visible[:T, :T].sum())
