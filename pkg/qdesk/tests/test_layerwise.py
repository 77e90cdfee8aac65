# coding: utf-8

# Copyright (c) qdesk contributors.
# Distributed under the terms of the Modified BSD License.

import numpy as np
import pytest

from qdesk.calib import CalibStats, accumulate_stats, sample_calib
from qdesk.log import InvalidInputError, NumericalError
from qdesk.quant_format import QuantConfig, QuantizedMatrix, Scheme, dequantize
from qdesk.quantizing.gptq import GptqOptions, gptq_quantize, layer_objective, process_order
from qdesk.quantizing.layerwise import Method, quantize_layer
from qdesk.quantizing.lpcd import (
    Submodule, SubmoduleKind, gate_objective, lpcd_refine, relax_member, uniform_projector,
)
from qdesk.quantizing.qep import QepOptions, qep_target
from qdesk.quantizing.rtn import quantize_matrix
from qdesk.toymodel import ToyModel

from .utils import assert_close_rel, brute_force_codes


def correlated_inputs(rng, T, N, mix=0.5):
    return rng.normal(size=(T, N)) @ (np.eye(N) + mix * rng.normal(size=(N, N)))


def test_gptq_with_scaled_identity_is_rtn(rng):
    W = rng.normal(size=(12, 5))
    cfg = QuantConfig.from_group(3, 4)
    assert gptq_quantize(W, 2.5 * np.eye(12), cfg) == quantize_matrix(W, cfg)


def test_gptq_hand_case():
    W = np.array([[1.3], [1.4]])
    H = np.array([[1.0, 0.5], [0.5, 1.0]])
    cfg = QuantConfig.from_group(2, None, Scheme.ASYMMETRIC)
    grids = (np.ones((1, 1)), np.zeros((1, 1)))
    Q = gptq_quantize(W, H, cfg, grids=grids)
    assert Q.codes.ravel().tolist() == [1, 2]
    assert layer_objective(W, dequantize(Q), H) == pytest.approx(0.27)
    rtn = QuantizedMatrix(cfg, np.rint(W), *grids)
    assert layer_objective(W, dequantize(rtn), H) == pytest.approx(0.37)
    best, value = brute_force_codes(W, H, cfg, *grids)
    assert best == Q
    assert value == pytest.approx(0.27)


def test_actorder_sorts_by_hessian_diagonal():
    H = np.diag([1.0, 100.0])
    assert process_order(H, True).tolist() == [1, 0]
    assert process_order(H, False).tolist() == [0, 1]


def test_gptq_beats_rtn_on_most_instances(rng):
    wins = 0
    for i in range(200):
        bits = (2, 3, 4)[i % 3]
        X = correlated_inputs(rng, 64, 16)
        W = rng.normal(size=(16, 12))
        H = X.T @ X
        cfg = QuantConfig.from_group(bits, None)
        gptq = layer_objective(W, dequantize(gptq_quantize(W, H, cfg)), H)
        rtn = layer_objective(W, dequantize(quantize_matrix(W, cfg)), H)
        wins += gptq <= rtn
    assert wins >= 190


def test_gptq_actorder_and_groups_stay_valid(rng):
    X = correlated_inputs(rng, 40, 16)
    W = rng.normal(size=(16, 6))
    cfg = QuantConfig.from_group(4, 8, Scheme.ASYMMETRIC)
    Q = gptq_quantize(W, X.T @ X, cfg, GptqOptions(actorder=True, block_cols=5))
    assert Q.shape == W.shape
    assert Q.codes.min() >= cfg.q_min and Q.codes.max() <= cfg.q_max


def test_gptq_errors(rng):
    W = rng.normal(size=(2, 2))
    cfg = QuantConfig.from_group(4, None)
    with pytest.raises(NumericalError):
        gptq_quantize(W, np.array([[1.0, 2.0], [2.0, 1.0]]), cfg)
    with pytest.raises(NumericalError):
        gptq_quantize(W, np.array([[1.0, np.nan], [np.nan, 1.0]]), cfg)
    with pytest.raises(InvalidInputError):
        gptq_quantize(W, np.eye(3), cfg)
    with pytest.raises(InvalidInputError):
        GptqOptions(percdamp=0.0)


def _stats(rng, T=50, N=6, noise=0.2):
    X = correlated_inputs(rng, T, N)
    X_hat = X + noise * rng.normal(size=X.shape)
    return X, X_hat, accumulate_stats(CalibStats.empty(N), X, X_hat)


def test_qep_identity_cases(rng):
    W = rng.normal(size=(6, 4))
    X = rng.normal(size=(20, 6))
    clean = accumulate_stats(CalibStats.empty(6), X, X)
    np.testing.assert_array_equal(qep_target(W, clean), W)
    _, _, stats = _stats(rng)
    np.testing.assert_array_equal(qep_target(W, stats, QepOptions(alpha=0.0)), W)


def test_qep_matches_least_squares(rng):
    X, X_hat, stats = _stats(rng)
    W = rng.normal(size=(6, 4))
    target = qep_target(W, stats, QepOptions(1.0, 1e-8))
    U = np.linalg.lstsq(X_hat, X @ W, rcond=None)[0]
    assert_close_rel(target, U, 1e-4)


def test_qep_is_linear(rng):
    _, _, stats = _stats(rng)
    W1, W2 = rng.normal(size=(6, 4)), rng.normal(size=(6, 4))
    lhs = qep_target(2.0 * W1 - 3.0 * W2, stats)
    rhs = 2.0 * qep_target(W1, stats) - 3.0 * qep_target(W2, stats)
    assert_close_rel(lhs, rhs, 1e-6)


def test_qep_rejects_mismatch(rng):
    _, _, stats = _stats(rng)
    with pytest.raises(InvalidInputError):
        qep_target(rng.normal(size=(5, 4)), stats)
    with pytest.raises(InvalidInputError):
        QepOptions(alpha=1.5)


def test_quantize_layer_compositions(rng):
    X, X_hat, stats = _stats(rng)
    W = rng.normal(size=(6, 4))
    cfg = QuantConfig.from_group(3, None)
    assert quantize_layer(W, stats, cfg, Method.RTN) == quantize_matrix(W, cfg)
    clean = accumulate_stats(CalibStats.empty(6), X, X)
    assert (quantize_layer(W, clean, cfg, Method.GPTQ, QepOptions()) ==
            quantize_layer(W, clean, cfg, Method.GPTQ))
    with pytest.raises(InvalidInputError):
        quantize_layer(W, stats, cfg, 'awq')


def test_qep_improves_two_layer_chain(rng):
    wins = 0
    for _ in range(50):
        X0 = correlated_inputs(rng, 256, 16)
        W1 = rng.normal(size=(16, 16)) / 4
        W2 = rng.normal(size=(16, 12)) / 4
        W1_hat = dequantize(quantize_matrix(W1, QuantConfig.from_group(3, None)))
        X1, X1_hat = X0 @ W1, X0 @ W1_hat
        stats = accumulate_stats(CalibStats.empty(16), X1, X1_hat)
        cfg = QuantConfig.from_group(4, None)
        plain = dequantize(quantize_layer(W2, stats, cfg, Method.GPTQ))
        corrected = dequantize(quantize_layer(W2, stats, cfg, Method.GPTQ, QepOptions()))
        err_plain = np.sum((X1_hat @ plain - X1 @ W2) ** 2)
        err_corrected = np.sum((X1_hat @ corrected - X1 @ W2) ** 2)
        wins += err_corrected <= err_plain
    assert wins >= 45


def test_linear_lpcd_is_qep_then_projection(rng):
    _, _, stats = _stats(rng)
    W = rng.normal(size=(6, 4))
    cfg = QuantConfig.from_group(4, None)
    init = quantize_matrix(W, cfg)
    sub = Submodule.linear('blocks.0.q', W, stats, dequantize(init), init)
    payloads, current, report = lpcd_refine(sub, uniform_projector(cfg), iters=1, keep_best=False)
    expected = quantize_matrix(qep_target(W, stats, QepOptions(1.0, 0.01)), cfg)
    assert payloads['blocks.0.q'] == expected
    assert len(report.steps) == 1


def block_submodule(model, calib, kind, cfg):
    quantized = {}
    payloads = {}
    for name in model.linear_names():
        Q = quantize_matrix(model.weight(name), cfg)
        payloads[name] = Q
        quantized[name] = dequantize(Q)
    student = model.with_weights(quantized)
    fp_taps = [model.forward_with_taps(s) for s in calib]
    q_taps = [student.forward_with_taps(s) for s in calib]
    return Submodule.from_taps(kind, 0, fp_taps, q_taps, model.weights, quantized, payloads,
                               model.config)


@pytest.mark.parametrize('kind', [SubmoduleKind.QK, SubmoduleKind.VO, SubmoduleKind.GATE_UP_DOWN])
def test_relaxation_never_increases_objective(toy_model, calib_set, kind):
    cfg = QuantConfig.from_group(3, None)
    sub = block_submodule(toy_model, calib_set.sequences[:2], kind, cfg)
    payloads, current, report = lpcd_refine(sub, uniform_projector(cfg), iters=2)
    assert len(report.steps) == 2 * len(sub.members)
    for step in report.steps:
        assert step.J_relaxed <= step.J_before * (1 + 1e-6) + 1e-9, step
    assert report.J_final <= report.J_init
    assert set(payloads) == set(sub.members)


def test_lpcd_improves_blocks_over_seeds(slow, small_config, corpus):
    cfg = QuantConfig.from_group(3, None)
    improved = 0
    for seed in range(10):
        model = ToyModel.init(small_config, seed)
        calib = sample_calib(corpus, 'drop_rand', 2, 12, seed)
        sub = block_submodule(model, calib, SubmoduleKind.VO, cfg)
        _, _, report = lpcd_refine(sub, uniform_projector(cfg), iters=3)
        assert report.J_final <= report.J_init
        improved += report.J_final < report.J_init
    assert improved >= 7


def test_gate_gradient_matches_finite_differences(rng):
    x = rng.normal(size=(7, 4))
    U = rng.normal(size=(4, 3))
    up_out = rng.normal(size=(7, 3))
    D = rng.normal(size=(3, 2))
    F = rng.normal(size=(7, 2))
    _, grad = gate_objective(U, x, up_out, D, F)
    numeric = np.zeros_like(U)
    h = 1e-6
    for idx in np.ndindex(*U.shape):
        E = np.zeros_like(U)
        E[idx] = h
        numeric[idx] = (gate_objective(U + E, x, up_out, D, F)[0] -
                        gate_objective(U - E, x, up_out, D, F)[0]) / (2 * h)
    assert_close_rel(grad, numeric, 1e-4)


def test_submodule_errors(rng, toy_model):
    _, _, stats = _stats(rng)
    W = rng.normal(size=(6, 4))
    sub = Submodule.linear('blocks.0.q', W, stats, W)
    with pytest.raises(InvalidInputError):
        relax_member(sub, 'blocks.0.k', {})
    with pytest.raises(InvalidInputError):
        Submodule('attention', 0, ['blocks.0.q'], {'blocks.0.q': W}, {'blocks.0.q': W})
    with pytest.raises(InvalidInputError):
        Submodule(SubmoduleKind.QK, 0, ['blocks.0.q', 'blocks.0.k'], toy_model.weights,
                  toy_model.weights)
