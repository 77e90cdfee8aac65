# coding: utf-8

# Copyright (c) qdesk contributors.
# Distributed under the terms of the Modified BSD License.

import numpy as np
import pytest

from qdesk.log import InvalidInputError
from qdesk.quantizing.binfact import (
    BinfactFormat, DbfMatrix, MdbfMatrix, binfact_bits, binfact_objective, dequantize_binfact,
    deserialize_binfact, msvid_init, rank_for_bpw, refine_alternating, serialize_binfact,
    storage_bytes_binfact, to_mdbf,
)


def bimodal_matrix(rng, N=32, M=32, k=4):
    # Two row blocks living in orthogonal column subspaces at very different scales
    V, _ = np.linalg.qr(rng.normal(size=(M, 2 * k)))
    top = 10.0 * rng.normal(size=(N // 2, k)) @ V[:, :k].T
    bottom = rng.normal(size=(N - N // 2, k)) @ V[:, k:].T
    return np.vstack([top, bottom]) + 0.01 * rng.normal(size=(N, M))


def assert_same_factors(F, G):
    assert F.format == G.format
    assert np.array_equal(F.S_a, G.S_a)
    assert np.array_equal(F.S_b, G.S_b)
    for p, q in zip(F.params(), G.params()):
        np.testing.assert_array_equal(p, q)


def test_rank_for_bpw():
    assert rank_for_bpw(64, 64, 1.0) == 14
    R = rank_for_bpw(64, 64, 1.0)
    assert binfact_bits(64, 64, R, BinfactFormat.DBF) <= 1.02 * 4096
    assert binfact_bits(64, 64, R + 1, BinfactFormat.DBF) > 1.02 * 4096
    assert rank_for_bpw(64, 64, 2.0) > R
    assert rank_for_bpw(64, 64, 2.0, BinfactFormat.MDBF, 2) < rank_for_bpw(64, 64, 2.0)


def test_rank_for_bpw_errors():
    with pytest.raises(InvalidInputError):
        rank_for_bpw(8, 8, 0.1)
    with pytest.raises(InvalidInputError):
        rank_for_bpw(64, 64, 3.0)
    with pytest.raises(InvalidInputError):
        binfact_bits(4, 4, 1, 'tern')


def test_mdbf_envelope_bookkeeping():
    N, M = 48, 40
    for R in (1, 5, 12):
        dbf = binfact_bits(N, M, R, BinfactFormat.DBF)
        assert binfact_bits(N, M, R, BinfactFormat.MDBF, 1) - dbf == 16 * R


def test_all_ones_dbf():
    F = DbfMatrix(np.ones((3, 1)), np.ones((4, 1)), np.ones(3), np.ones(1), np.ones(4))
    np.testing.assert_array_equal(dequantize_binfact(F), np.ones((3, 4)))


def test_dbf_formula(rng):
    N, M, R = 5, 4, 3
    F = DbfMatrix(np.where(rng.normal(size=(N, R)) > 0, 1, -1),
                  np.where(rng.normal(size=(M, R)) > 0, 1, -1),
                  rng.uniform(0.5, 2, N), rng.uniform(0.5, 2, R), rng.uniform(0.5, 2, M))
    a, m, b = (p.astype(np.float64) for p in F.params())
    expected = np.diag(a) @ F.S_a @ np.diag(m) @ F.S_b.T @ np.diag(b)
    np.testing.assert_allclose(dequantize_binfact(F, np.float64), expected, rtol=1e-12)


def test_mdbf_contains_dbf(rng):
    F = msvid_init(rng.normal(size=(10, 7)), 4)
    assert isinstance(F, DbfMatrix)
    M = to_mdbf(F)
    assert isinstance(M, MdbfMatrix)
    assert M.envelope_rank == 1
    np.testing.assert_array_equal(dequantize_binfact(M), dequantize_binfact(F))


def test_factor_validation():
    with pytest.raises(InvalidInputError):
        DbfMatrix(np.zeros((3, 1)), np.ones((4, 1)), np.ones(3), np.ones(1), np.ones(4))
    with pytest.raises(InvalidInputError):
        DbfMatrix(np.ones((3, 1)), np.ones((4, 2)), np.ones(3), np.ones(1), np.ones(4))
    with pytest.raises(InvalidInputError):
        MdbfMatrix(np.ones((3, 2)), np.ones((4, 2)), np.ones((3, 2)), np.ones((2, 1)),
                   np.ones((4, 2)), np.ones((2, 2)))


def test_msvid_rank_one_is_exact(rng):
    u, v = rng.normal(size=6), rng.normal(size=5)
    W = np.outer(u, v)
    F = msvid_init(W, 1)
    assert binfact_objective(F, W) <= 1e-10 * np.sum(W * W)


def test_msvid_errors(rng):
    with pytest.raises(InvalidInputError):
        msvid_init(np.zeros((4, 4)), 2)
    with pytest.raises(InvalidInputError):
        msvid_init(rng.normal(size=(4, 4)), 0)


@pytest.mark.parametrize('l', [1, 2, 3])
def test_demodulated_envelope_rank(rng, l):
    F = msvid_init(rng.normal(size=(20, 16)), 6, envelope_rank=l)
    M = to_mdbf(F)
    L = M.S_a * (M.A.astype(np.float64) @ M.Q.T.astype(np.float64))
    s = np.linalg.svd(M.S_a * L, compute_uv=False)
    assert np.all(s[l:] <= 1e-6 * s[0])


def test_two_envelopes_beat_one_on_bimodal_matrices():
    wins = 0
    for seed in range(50):
        W = bimodal_matrix(np.random.default_rng(seed))
        one = binfact_objective(msvid_init(W, 8, envelope_rank=1), W)
        two = binfact_objective(msvid_init(W, 8, envelope_rank=2), W)
        wins += two < one
    assert wins >= 45


@pytest.mark.parametrize('l', [1, 2])
def test_refinement_trace_is_non_increasing(rng, l):
    W = rng.normal(size=(16, 12))
    F = msvid_init(W, 6, envelope_rank=l)
    result = refine_alternating(F, W, outer_iters=6)
    trace = result.trace
    assert trace[0] == pytest.approx(binfact_objective(F, W), rel=1e-5)
    assert all(b <= a for a, b in zip(trace, trace[1:]))
    assert type(result.factors) is type(F)
    assert binfact_objective(result.factors, W) <= trace[0] * (1 + 1e-5)


def test_weighted_refinement_is_non_increasing(rng):
    W = rng.normal(size=(12, 10))
    X = rng.normal(size=(40, 12)) @ (np.eye(12) + 0.3 * rng.normal(size=(12, 12)))
    H = X.T @ X
    F = msvid_init(W, 5)
    result = refine_alternating(F, W, outer_iters=4, H=H)
    assert all(b <= a for a, b in zip(result.trace, result.trace[1:]))
    with pytest.raises(InvalidInputError):
        refine_alternating(F, W, H=np.eye(5))


def test_mdbf_refined_from_dbf_is_no_worse(rng):
    W = bimodal_matrix(rng, 16, 16, 2)
    dbf = refine_alternating(msvid_init(W, 4), W, outer_iters=5).factors
    mdbf = refine_alternating(to_mdbf(dbf), W, outer_iters=5).factors
    assert isinstance(mdbf, MdbfMatrix)
    assert binfact_objective(mdbf, W) <= binfact_objective(dbf, W) * (1 + 1e-5)


def test_refine_shape_mismatch(rng):
    F = msvid_init(rng.normal(size=(6, 5)), 2)
    with pytest.raises(InvalidInputError):
        refine_alternating(F, rng.normal(size=(5, 6)))


@pytest.mark.parametrize('l', [1, 2])
def test_serialized_size_matches_budget(rng, l):
    N, M = 64, 48
    fmt = BinfactFormat.DBF if l == 1 else BinfactFormat.MDBF
    R = rank_for_bpw(N, M, 1.5, fmt, l)
    F = msvid_init(rng.normal(size=(N, M)), R, envelope_rank=l, fmt=fmt)
    buf = serialize_binfact(F)
    assert len(buf) == storage_bytes_binfact(F)
    bits = binfact_bits(N, M, R, fmt, l)
    assert bits <= 8 * len(buf) < bits + 16
    assert 8 * len(buf) <= 1.02 * 1.5 * N * M + 16
    again = deserialize_binfact(buf, (N, M), fmt, R, l)
    assert_same_factors(again, F.snapped())


def test_deserialize_rejects_wrong_length(rng):
    F = msvid_init(rng.normal(size=(6, 5)), 2)
    buf = serialize_binfact(F)
    with pytest.raises(InvalidInputError):
        deserialize_binfact(buf[:-2], (6, 5), BinfactFormat.DBF, 2)
    with pytest.raises(InvalidInputError):
        deserialize_binfact(buf, (6, 5), 'tern', 2)
