import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dimmix.butterfly import (
    ButterflySchedule,
    DebutFactor,
    block_groups,
    butterfly_permute,
    butterfly_unpermute,
    compute_stride,
    num_butterfly_layers,
    validate_debut_composition,
)
from dimmix.errors import IncomposableError, ScheduleError
from dimmix.tensor import Tensor, make_rng


def permutation_by_enumeration(N: int, r: int, stride: int) -> list[int]:
    """Position k of the permuted vector holds original index src[k]: blocks of r, r-step gather."""
    src = []
    for base in range(0, N, r * stride):
        for phase in range(stride):
            for j in range(r):
                src.append(base + phase + j * stride)
    return src


@pytest.mark.parametrize("N,r,i,expected", [(8, 2, 0, 1), (8, 2, 1, 2), (8, 2, 2, 4), (16, 4, 1, 4), (8, 4, 1, 2)])
def test_compute_stride_examples(N, r, i, expected):
    assert compute_stride(N, r, i) == expected


@pytest.mark.parametrize("N,r,L", [(8, 2, 3), (64, 8, 2), (32, 32, 1), (121, 11, 2), (32, 4, 3), (100, 10, 2)])
def test_num_layers(N, r, L):
    assert num_butterfly_layers(N, r) == L
    assert L == math.ceil(round(math.log(N, r), 9))


@pytest.mark.parametrize("N,r", [(10, 4), (8, 3), (8, 0)])
def test_radix_must_divide(N, r):
    with pytest.raises(ScheduleError):
        compute_stride(N, r, 0)
    with pytest.raises(ScheduleError):
        ButterflySchedule(N, r)


def test_radix_one_rejected():
    with pytest.raises(ScheduleError):
        num_butterfly_layers(8, 1)


def test_schedule_defaults_and_partial_flag():
    s = ButterflySchedule(64, 8)
    assert s.num_layers == 2 and s.strides == (1, 8) and not s.partial
    p = ButterflySchedule(64, 8, 1)
    assert p.partial and p.strides == (1,)
    assert ButterflySchedule(32, 4).strides == (1, 4, 8)


def test_longer_schedules_cycle():
    assert ButterflySchedule(16, 4, 5).strides == (1, 4, 1, 4, 1)


def test_schedule_rejects_nontiling_stride():
    # 4^2 = 16 > 12, so layer 1 clamps to 3 and 4 * 3 tiles 12; with N=24 layer 1 keeps stride 4 and 4 * 4 does not tile 24
    assert ButterflySchedule(12, 4).strides == (1, 3)
    with pytest.raises(ScheduleError):
        ButterflySchedule(24, 4)


def test_permute_hand_traced_example():
    x = Tensor(np.array([[0.0, 1.0, 2.0, 3.0]]))
    assert butterfly_permute(x, 2, 2).data.tolist() == [[0.0, 2.0, 1.0, 3.0]]


def test_stride_one_is_identity(rng):
    x = rng.standard_normal((3, 12))
    assert np.array_equal(butterfly_permute(Tensor(x), 4, 1).data, x)


@pytest.mark.parametrize("N,r", [(8, 2), (16, 4), (64, 8), (27, 3), (12, 4)])
def test_permute_matches_enumeration_oracle(N, r):
    x = np.arange(N, dtype=float)[None]
    for s in ButterflySchedule(N, r).strides:
        got = butterfly_permute(Tensor(x), r, s).data[0].astype(int).tolist()
        assert got == permutation_by_enumeration(N, r, s)
        assert np.array_equal(block_groups(N, r, s).reshape(-1), got)


def test_permute_rejects_bad_stride():
    with pytest.raises(ScheduleError):
        butterfly_permute(Tensor(np.ones(12)), 4, 2)


@settings(max_examples=60, deadline=None)
@given(st.sampled_from([2, 3, 4, 8]), st.integers(1, 4), st.integers(1, 3))
def test_unpermute_inverts_permute(r, L, lead):
    N = r**L
    rng = make_rng(N + lead)
    x = rng.standard_normal((lead, N))
    for s in ButterflySchedule(N, r).strides:
        y = butterfly_unpermute(butterfly_permute(Tensor(x), r, s), r, s)
        assert np.array_equal(y.data, x)


def test_block_groups_partition_dims():
    g = block_groups(64, 8, 8)
    assert g.shape == (8, 8)
    assert sorted(g.reshape(-1).tolist()) == list(range(64))
    assert g[0].tolist() == list(range(0, 64, 8))


# ---- DeBut ----


def naive_product(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            out[i, j] = sum(a[i, k] * b[k, j] for k in range(a.shape[1]))
    return out


def test_debut_support_shape():
    f = DebutFactor(8, 8, 2, 2, 4)
    s = f.support()
    assert s.shape == (8, 8)
    assert s.sum() == f.num_blocks * 2 * 2 * 4
    assert DebutFactor(8, 8, 4, 4, 1).support().sum() == 2 * 16


def test_debut_first_worked_example_dense_under_both_rules():
    c = validate_debut_composition(DebutFactor(8, 8, 2, 2, 4), DebutFactor(8, 8, 4, 4, 1))
    assert c.dense_original_rule and c.dense_relaxed_rule
    assert c.structural_dense and c.numeric_dense
    assert c.effective_partition_original == (8, 8)


def test_debut_second_worked_example_relaxed_only():
    c = validate_debut_composition(DebutFactor(8, 8, 4, 4, 2), DebutFactor(8, 8, 4, 4, 1))
    assert not c.dense_original_rule and c.dense_relaxed_rule
    assert c.structural_dense and c.numeric_dense
    assert c.effective_partition_relaxed == (8, 8)


def test_debut_counterexample_t2_above_r1():
    f2, f1 = DebutFactor(8, 8, 2, 2, 4), DebutFactor(8, 8, 2, 2, 1)
    c = validate_debut_composition(f2, f1)
    assert not c.dense_relaxed_rule
    assert not c.structural_dense and not c.numeric_dense
    rng = make_rng(3)
    prod = naive_product(f2.random_matrix(rng), f1.random_matrix(rng))
    assert np.any(np.abs(prod) <= 1e-12)


def test_debut_incomposable():
    with pytest.raises(IncomposableError):
        validate_debut_composition(DebutFactor(8, 16, 2, 4, 1), DebutFactor(8, 8, 2, 2, 1))


def test_debut_invalid_factor():
    with pytest.raises(ScheduleError):
        DebutFactor(8, 8, 3, 3, 1)


@pytest.mark.parametrize("r1,t2", [(2, 2), (4, 2), (4, 4), (8, 2), (8, 4), (8, 8), (2, 4), (2, 8), (4, 8)])
def test_debut_structural_and_numeric_verdicts_agree(r1, t2):
    f1 = DebutFactor(16, 16, r1, r1, 1)
    f2 = DebutFactor(16, 16, 2, 2, t2)
    c = validate_debut_composition(f2, f1, rng=make_rng(r1 * 31 + t2))
    assert c.structural_dense == c.numeric_dense
    if t2 > r1:
        assert not c.structural_dense
