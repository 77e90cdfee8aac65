# coding: utf-8

# Copyright (c) qdesk contributors.
# Distributed under the terms of the Modified BSD License.

import json
from collections import OrderedDict

import numpy as np
import pytest

from qdesk.autobit import (
    ConfigCandidate, ErrorMode, Solver, budget_from_bpw, candidate_grid, estimate_error, plan,
    plan_from_dict, plan_model, plan_to_dict, read_plan, uniform_equivalent, write_plan,
)
from qdesk.calib import sample_calib
from qdesk.log import ConfigError, InfeasibleBudgetError, InvalidInputError
from qdesk.metrics import kl_divergence
from qdesk.quant_format import QuantConfig, dequantize, storage_bytes_for
from qdesk.quantizing.rtn import quantize_matrix
from qdesk.toymodel import LayerGraph, ToyModel, ToyModelConfig

from .utils import with_outlier_channels


def cand(bits, cost, err, params=8):
    return ConfigCandidate(bits, None, cost_bytes=cost, err=err, params=params)


def random_instance(rng):
    n_mod = int(rng.integers(1, 6))
    candidates = OrderedDict()
    for m in range(n_mod):
        n_cand = int(rng.integers(1, 6))
        candidates['blocks.%d.q' % m] = [
            cand(2, int(rng.integers(1, 21)), float(rng.uniform(0, 10))) for _ in range(n_cand)]
    lo = sum(min(c.cost_bytes for c in cs) for cs in candidates.values())
    hi = sum(max(c.cost_bytes for c in cs) for cs in candidates.values())
    return candidates, int(rng.integers(lo, hi + 1))


def test_hand_example():
    candidates = OrderedDict([
        ('blocks.0.q', [cand(2, 2, 10.0), cand(4, 4, 1.0)]),
        ('blocks.0.k', [cand(2, 2, 3.0), cand(4, 4, 1.0)]),
    ])
    p = plan(candidates, 6)
    assert [c.bits for c in p.assignment.values()] == [4, 2]
    assert p.total_err == 4.0
    assert p.total_cost == 6
    assert p.achieved_bpw == pytest.approx(8.0 * 6 / 16)


def test_solvers_agree_with_exhaustive_search():
    for seed in range(100):
        candidates, budget = random_instance(np.random.default_rng(seed))
        reference = plan(candidates, budget, Solver.EXHAUSTIVE)
        for solver in (Solver.DP, Solver.BRANCH_BOUND):
            p = plan(candidates, budget, solver)
            assert p.total_err == pytest.approx(reference.total_err, rel=1e-12, abs=1e-12), seed
            assert p.total_cost <= budget


def test_total_error_is_non_increasing_in_budget(rng):
    candidates, _ = random_instance(rng)
    lo = sum(min(c.cost_bytes for c in cs) for cs in candidates.values())
    hi = sum(max(c.cost_bytes for c in cs) for cs in candidates.values())
    errs = [plan(candidates, b).total_err for b in range(lo, hi + 2)]
    assert all(b <= a + 1e-12 for a, b in zip(errs, errs[1:]))


def test_generous_budget_takes_least_error(rng):
    candidates, _ = random_instance(rng)
    hi = sum(max(c.cost_bytes for c in cs) for cs in candidates.values())
    p = plan(candidates, hi, Solver.BRANCH_BOUND)
    for name, chosen in p.assignment.items():
        assert chosen.err == min(c.err for c in candidates[name])


def test_infeasible_budget_reports_minimal_cost():
    candidates = OrderedDict([('blocks.0.q', [cand(2, 5, 1.0), cand(4, 9, 0.5)]),
                              ('blocks.0.k', [cand(2, 3, 1.0)])])
    with pytest.raises(InfeasibleBudgetError) as e:
        plan(candidates, 7)
    assert e.value.min_cost == 8
    assert '8' in str(e.value)


def test_plan_input_errors():
    with pytest.raises(InvalidInputError):
        plan(OrderedDict(), 10)
    with pytest.raises(InvalidInputError):
        plan(OrderedDict([('blocks.0.q', [])]), 10)
    with pytest.raises(InvalidInputError):
        plan(OrderedDict([('blocks.0.q', [cand(2, 1, 1.0)])]), 10, solver='ilp')
    with pytest.raises(InvalidInputError):
        cand(2, 1, float('nan'))


def test_candidate_grid_collapses_long_groups():
    grid = candidate_grid((16, 8))
    assert [c.bits for c in grid] == [2, 3, 4, 5, 6, 7, 8]
    assert all(c.group_size is None for c in grid)
    grid = candidate_grid((256, 8), bits=(4,))
    assert [(c.bits, c.group_size) for c in grid] == [(4, 128), (4, None)]
    cfg = QuantConfig.from_group(4, 128)
    assert grid[0].cost_bytes == storage_bytes_for((256, 8), cfg)


def test_error_estimates(rng):
    W = rng.normal(size=(8, 6))
    c = candidate_grid(W.shape, bits=(3,))[0]
    dW = W - dequantize(quantize_matrix(W, c.config))
    naive = estimate_error(W, c)
    assert naive == pytest.approx(np.sum(dW ** 2))
    assert estimate_error(W, c, 'act', a_diag=2 * np.ones(8)) == pytest.approx(naive)
    a = rng.uniform(0, 3, size=8)
    expected = 0.5 * np.sum(a[:, None] * dW ** 2)
    assert estimate_error(W, c, ErrorMode.ACT_AWARE, a_diag=a) == pytest.approx(expected)
    with pytest.raises(InvalidInputError):
        estimate_error(W, c, ErrorMode.ACT_AWARE)
    with pytest.raises(InvalidInputError):
        estimate_error(W, c, ErrorMode.ACT_AWARE, a_diag=np.ones(3))


def test_budget_from_bpw():
    graph = LayerGraph(ToyModelConfig(L=1, d=128, H=2, H_kv=1, d_ff=256, vocab=64))
    params = graph.parameter_count()
    assert budget_from_bpw(graph, 16) == 2 * params
    assert budget_from_bpw(graph, 8) == budget_from_bpw(graph, 16) // 2
    budget = budget_from_bpw(graph, 4.16)
    cfg = QuantConfig.from_group(4, 128)
    uniform = sum(storage_bytes_for(node.shape, cfg) for node in graph)
    assert abs(uniform - budget) <= 0.01 * budget
    assert uniform_equivalent(graph, budget) == '4b/g128/sym'
    with pytest.raises(InvalidInputError):
        budget_from_bpw(graph, 1.5)
    with pytest.raises(InvalidInputError):
        budget_from_bpw(graph, 0)


def test_plan_file_round_trip(tmpdir, toy_model):
    budget = budget_from_bpw(toy_model.graph, 4.5)
    p = plan_model(toy_model, budget)
    path = str(tmpdir.join('plan.json'))
    write_plan(p, path)
    again = read_plan(path, toy_model.graph)
    assert list(again.assignment) == toy_model.graph.ids()
    assert [c.config for c in again.assignment.values()] == [c.config for c in p.assignment.values()]
    assert again.total_cost == p.total_cost
    assert again.mode == ErrorMode.NAIVE


def test_plan_file_validation(tmpdir, toy_model):
    p = plan_model(toy_model, budget_from_bpw(toy_model.graph, 4.5))
    d = json.loads(json.dumps(plan_to_dict(p)))
    bad = json.loads(json.dumps(d))
    bad['assignment']['blocks.0.q']['bits'] = 9
    with pytest.raises(ConfigError):
        plan_from_dict(bad)
    partial = json.loads(json.dumps(d))
    del partial['assignment']['blocks.0.q']
    with pytest.raises(ConfigError):
        plan_from_dict(partial, toy_model.graph)
    path = tmpdir.join('broken.json')
    path.write('{"format": ')
    with pytest.raises(ConfigError):
        read_plan(str(path))


def test_plan_model(toy_model, calib_set):
    budget = budget_from_bpw(toy_model.graph, 4.5)
    for solver in Solver.ALL[1:]:
        p = plan_model(toy_model, budget, solver=solver)
        assert p.total_cost <= budget
        assert list(p.assignment) == toy_model.graph.ids()
    p = plan_model(toy_model, budget, ErrorMode.ACT_AWARE, calib=calib_set)
    assert p.mode == ErrorMode.ACT_AWARE
    with pytest.raises(InvalidInputError):
        plan_model(toy_model, budget, ErrorMode.ACT_AWARE)
    with pytest.raises(InvalidInputError):
        plan_model(toy_model, budget, 'hessian')


def _apply_plan(model, p):
    return model.with_weights({
        name: dequantize(quantize_matrix(model.weight(name), c.config))
        for name, c in p.assignment.items()})


def test_act_aware_plan_tracks_outlier_inputs(slow, small_config, corpus):
    wins = 0
    for seed in range(50):
        model = with_outlier_channels(ToyModel.init(small_config, seed), seed)
        calib = sample_calib(corpus, 'drop_rand', 2, 16, seed)
        budget = budget_from_bpw(model.graph, 4.5)
        naive = _apply_plan(model, plan_model(model, budget))
        aware = _apply_plan(model, plan_model(model, budget, ErrorMode.ACT_AWARE, calib=calib))
        reference = np.concatenate([model.forward(s) for s in calib])
        kl_naive = kl_divergence(reference, np.concatenate([naive.forward(s) for s in calib]))
        kl_aware = kl_divergence(reference, np.concatenate([aware.forward(s) for s in calib]))
        wins += kl_aware <= kl_naive
    assert wins >= 40
