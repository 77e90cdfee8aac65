# coding: utf-8

# Copyright (c) qdesk contributors.
# Distributed under the terms of the Modified BSD License.

import numpy as np
import pytest

from qdesk.calib import CalibStats, accumulate_stats
from qdesk.log import InvalidInputError
from qdesk.preprocess import (
    Preconditioner, RotationKind, apply_rotation, apply_smooth, build_preconditioner, hadamard,
    incoherence, make_rotation, random_orthogonal, rotate_activations, sinkhorn_balance,
    smooth_scale,
)

from .utils import assert_close_rel


def outlier_activations(rng, T=64, n=16, channel=3, factor=50.0):
    X = rng.normal(size=(T, n))
    X[:, channel] *= factor
    return X


def test_smoothing_preserves_product(rng):
    X = outlier_activations(rng)
    W = rng.normal(size=(16, 8))
    scale = smooth_scale(X, W, alpha=0.5)
    X_s, W_s = apply_smooth(X, W, scale)
    assert_close_rel(X_s @ W_s, X @ W, 1e-5)
    # The outlier channel is tamed
    assert np.abs(X_s).max(axis=0)[3] < np.abs(X).max(axis=0)[3]


def test_smoothing_keeps_dead_channels():
    X = np.ones((4, 3))
    X[:, 1] = 0.0
    W = np.ones((3, 2))
    assert smooth_scale(X, W).s[1] == 1.0


def test_smoothing_alpha_range(rng):
    with pytest.raises(InvalidInputError):
        smooth_scale(rng.normal(size=(4, 3)), rng.normal(size=(3, 2)), alpha=1.5)


@pytest.mark.parametrize('kind', ['random', 'hadamard', 'none'])
def test_rotations_are_orthogonal(kind):
    rot = make_rotation(kind, 16, seed=2)
    np.testing.assert_allclose(rot.R @ rot.R.T, np.eye(16), atol=1e-6)
    assert rot.kind == RotationKind.resolve(kind)


def test_rotation_preserves_product(rng):
    X = rng.normal(size=(10, 16))
    W = rng.normal(size=(16, 6))
    R = random_orthogonal(16, seed=1)
    assert_close_rel(rotate_activations(X, R) @ apply_rotation(W, R), X @ W, 1e-5)
    Ro = random_orthogonal(6, 3)
    assert_close_rel(apply_rotation(W, Ro, 'output'), W @ Ro, 1e-12)


def test_rotation_errors(rng):
    with pytest.raises(InvalidInputError):
        hadamard(12)
    with pytest.raises(InvalidInputError):
        RotationKind.resolve('spin')
    with pytest.raises(InvalidInputError):
        apply_rotation(rng.normal(size=(8, 4)), np.eye(6))
    with pytest.raises(InvalidInputError):
        apply_rotation(rng.normal(size=(2, 2)), np.array([[1.0, 1.0], [0.0, 1.0]]))


def test_random_rotation_is_seeded():
    assert np.array_equal(random_orthogonal(8, 5), random_orthogonal(8, 5))
    assert not np.array_equal(random_orthogonal(8, 5), random_orthogonal(8, 6))


def test_incoherence_lower_bound(rng):
    for _ in range(20):
        assert incoherence(rng.normal(size=(7, 5))) >= 1.0
    assert incoherence(np.ones((4, 4))) == pytest.approx(1.0)
    with pytest.raises(InvalidInputError):
        incoherence(np.zeros((3, 3)))


def test_rotation_spreads_spikes(rng):
    reduced = 0
    for seed in range(50):
        W = 0.01 * rng.normal(size=(32, 32))
        W[rng.integers(32), rng.integers(32)] = 10.0
        if incoherence(apply_rotation(W, random_orthogonal(32, seed))) < incoherence(W):
            reduced += 1
    assert reduced >= 48


def test_sinkhorn_balance(rng):
    W = rng.normal(size=(12, 8)) * rng.uniform(0.1, 10.0, size=(12, 1))
    W_bal, row, col = sinkhorn_balance(W, 'l2', iters=500, tol=1e-4)
    assert_close_rel(row[:, None] * W_bal * col[None, :], W, 1e-5)
    rows = np.linalg.norm(W_bal, axis=1)
    cols = np.linalg.norm(W_bal, axis=0)
    assert rows.max() / rows.min() - 1 <= 1e-4
    assert cols.max() / cols.min() - 1 <= 1e-4


def test_sinkhorn_zero_row_keeps_unit_scale(rng):
    W = rng.normal(size=(5, 4))
    W[2] = 0.0
    W_bal, row, col = sinkhorn_balance(W, 'l1')
    assert row[2] == 1.0
    assert not np.any(W_bal[2])


def test_sinkhorn_strict_non_convergence(rng):
    W = rng.normal(size=(6, 6)) * np.logspace(0, 4, 6)[:, None]
    with pytest.raises(InvalidInputError):
        sinkhorn_balance(W, 'l2', iters=1, tol=1e-12, strict=True)


@pytest.mark.parametrize('rotation', ['none', 'random', 'hadamard'])
@pytest.mark.parametrize('balance', [None, 'l1', 'l2'])
def test_preconditioner_is_an_equivalence(rng, rotation, balance):
    X = outlier_activations(rng)
    W = rng.normal(size=(16, 8))
    stats = accumulate_stats(CalibStats.empty(16), X, X)
    precond = build_preconditioner(W, stats, 0.5, rotation, balance, seed=4)
    W_bal = precond.apply_weight(W)
    assert_close_rel(precond.effective(W_bal), W, 1e-5)
    assert_close_rel(precond.transform_activations(X) @ W_bal * precond.col[None, :], X @ W, 1e-5)


def test_preconditioner_dict_regenerates_rotation(rng):
    W = rng.normal(size=(16, 8))
    precond = build_preconditioner(W, None, None, 'random', 'l2', seed=11)
    again = Preconditioner.from_dict(precond.to_dict(), 16, 8)
    np.testing.assert_array_equal(again.input_map(), precond.input_map())
    np.testing.assert_array_equal(again.col, precond.col)


def test_identity_preconditioner(rng):
    precond = build_preconditioner(rng.normal(size=(4, 3)))
    assert precond.is_identity
    stats = CalibStats.empty(4)
    assert precond.transform_stats(stats) is stats


def test_smoothing_requires_stats(rng):
    with pytest.raises(InvalidInputError):
        build_preconditioner(rng.normal(size=(4, 3)), None, smooth_alpha=0.5)
