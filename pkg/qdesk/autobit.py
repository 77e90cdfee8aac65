# coding: utf-8

# Copyright (c) qdesk contributors.
# Distributed under the terms of the Modified BSD License.

"""Mixed-precision planning under a byte budget.

Every quantizable module gets a list of candidate configurations with a
storage cost and a predicted error; `plan` picks one candidate per module
minimizing the summed error subject to the summed cost staying within the
budget (a multiple-choice knapsack).
"""

import io
import itertools
import json
import math
import os
from collections import OrderedDict
from dataclasses import dataclass
from functools import reduce
from typing import Optional

import numpy as np
from jsonschema import Draft4Validator as Validator
from jsonschema import ValidationError

from .log import InvalidInputError, ConfigError, InfeasibleBudgetError
from . import log
from .quant_format import QuantConfig, Scheme, storage_bytes_for, dequantize
from .quantizing.rtn import quantize_matrix

__all__ = [
    "ConfigCandidate", "Plan", "ErrorMode", "Solver", "candidate_grid", "estimate_error",
    "plan", "budget_from_bpw", "uniform_equivalent", "plan_to_dict", "plan_from_dict",
    "write_plan", "read_plan", "MIN_PLAN_BPW", "plan_model", "input_gram_diagonals",
]


DEFAULT_BITS = (2, 3, 4, 5, 6, 7, 8)
DEFAULT_GROUPS = (128, None)

# Mixed allocation is not supported below this average
MIN_PLAN_BPW = 2.0

PLAN_FORMAT = "qdesk-plan"
PLAN_VERSION = 1

schema_path = os.path.join(os.path.dirname(__file__), 'plan_format.schema.json')


class ErrorMode:
    NAIVE = "naive"
    ACT_AWARE = "act_aware"

    ALL = (NAIVE, ACT_AWARE)
    ALIASES = {"naive": NAIVE, "act": ACT_AWARE, "act_aware": ACT_AWARE}


class Solver:
    EXHAUSTIVE = "exhaustive"
    DP = "dp"
    BRANCH_BOUND = "branch_bound"

    ALL = (EXHAUSTIVE, DP, BRANCH_BOUND)


@dataclass(frozen=True)
class ConfigCandidate:
    bits: int
    group_size: Optional[int]
    scheme: str = Scheme.SYMMETRIC
    cost_bytes: int = 0
    err: float = 0.0
    params: int = 0

    def __post_init__(self):
        if not (math.isfinite(self.err) and self.err >= 0):
            raise InvalidInputError('candidate error must be finite and non-negative, got %r' % (self.err,))
        if self.cost_bytes < 0:
            raise InvalidInputError('candidate cost must be non-negative')

    @property
    def config(self):
        return QuantConfig.from_group(self.bits, self.group_size, self.scheme)

    def label(self):
        return self.config.label()

    def with_err(self, err):
        return ConfigCandidate(self.bits, self.group_size, self.scheme, self.cost_bytes, err, self.params)

    def to_dict(self):
        return dict(bits=int(self.bits), group_size=self.group_size, scheme=self.scheme,
                    cost_bytes=int(self.cost_bytes), err=float(self.err))


@dataclass
class Plan:
    assignment: "OrderedDict[str, ConfigCandidate]"
    total_cost: int
    total_err: float
    achieved_bpw: float
    budget_bytes: Optional[int] = None
    mode: Optional[str] = None


def candidate_grid(shape, bits=DEFAULT_BITS, groups=DEFAULT_GROUPS, scheme=Scheme.SYMMETRIC):
    """Candidates for one N x M matrix, errors not yet estimated.

    A group at least as long as the channel is the per-channel config and is
    listed once.
    """
    N, M = shape
    out = []
    seen = set()
    for b in bits:
        for g in groups:
            if g is not None and g >= N:
                g = None
            if (b, g) in seen:
                continue
            seen.add((b, g))
            cfg = QuantConfig.from_group(b, g, scheme)
            out.append(ConfigCandidate(b, g, scheme, storage_bytes_for(shape, cfg), 0.0, N * M))
    return out


def estimate_error(W, candidate, mode=ErrorMode.NAIVE, a_diag=None, b_diag=None):
    """Second-order proxy of the loss increase for one candidate.

    ``naive`` is ||dW||_F^2 for the round-to-nearest perturbation dW;
    ``act_aware`` is 1/2 tr(B dW^T A dW) restricted to diagonal A (input
    Gram, length N) and B (output curvature, length M, ones by default),
    i.e. 1/2 sum_ij A_i B_j dW_ij^2.
    """
    mode = ErrorMode.ALIASES.get(mode, mode)
    W = np.asarray(W, dtype=np.float64)
    dW = W - dequantize(quantize_matrix(W, candidate.config)).astype(np.float64)
    if mode == ErrorMode.NAIVE:
        return float(np.sum(dW * dW))
    if mode != ErrorMode.ACT_AWARE:
        raise InvalidInputError('unknown error mode %r' % (mode,))
    if a_diag is None:
        raise InvalidInputError('act-aware error needs the input Gram diagonal')
    a = np.asarray(a_diag, dtype=np.float64).ravel()
    b = np.ones(W.shape[1]) if b_diag is None else np.asarray(b_diag, dtype=np.float64).ravel()
    if a.shape != (W.shape[0],) or b.shape != (W.shape[1],):
        raise InvalidInputError('curvature diagonals of length %d/%d for weight of shape %r' % (
            a.size, b.size, W.shape))
    return 0.5 * float(np.sum(a[:, None] * b[None, :] * dW * dW))


def _check_candidates(candidates):
    if not candidates:
        raise InvalidInputError('no modules to plan')
    for name, cands in candidates.items():
        if not cands:
            raise InvalidInputError('module %r has no candidates' % (name,))


def _solve_exhaustive(costs, errs, budget):
    best = None
    best_err = math.inf
    for choice in itertools.product(*[range(len(c)) for c in costs]):
        cost = sum(c[k] for c, k in zip(costs, choice))
        if cost > budget:
            continue
        err = sum(e[k] for e, k in zip(errs, choice))
        if err < best_err:
            best, best_err = choice, err
    return best


def _solve_dp(costs, errs, budget):
    """Exact DP over integer byte costs, reduced by their common divisor."""
    flat = [c for cs in costs for c in cs if c > 0]
    g = reduce(math.gcd, flat) if flat else 1
    cap = budget // g
    n_mod = len(costs)
    # best[c]: least error of the modules so far with reduced cost <= c
    best = np.zeros(cap + 1)
    choices = []
    for m in range(n_mod):
        new = np.full(cap + 1, np.inf)
        pick = np.full(cap + 1, -1, dtype=np.int64)
        for k, (c, e) in enumerate(zip(costs[m], errs[m])):
            c = c // g
            if c > cap:
                continue
            cand = np.full(cap + 1, np.inf)
            cand[c:] = best[:cap + 1 - c] + e
            better = cand < new
            new[better] = cand[better]
            pick[better] = k
        best = new
        choices.append(pick)
    if not np.isfinite(best[cap]):
        return None
    choice = [0] * n_mod
    c = cap
    for m in reversed(range(n_mod)):
        k = int(choices[m][c])
        choice[m] = k
        c -= costs[m][k] // g
    return tuple(choice)


def _solve_branch_bound(costs, errs, budget):
    """Depth-first branch and bound with additive lower bounds."""
    n_mod = len(costs)
    min_err_tail = [0.0] * (n_mod + 1)
    min_cost_tail = [0] * (n_mod + 1)
    for m in reversed(range(n_mod)):
        min_err_tail[m] = min_err_tail[m + 1] + min(errs[m])
        min_cost_tail[m] = min_cost_tail[m + 1] + min(costs[m])
    orders = [sorted(range(len(e)), key=lambda k, e=e: e[k]) for e in errs]
    state = dict(best=None, best_err=math.inf)
    choice = [0] * n_mod

    def visit(m, cost, err):
        if err + min_err_tail[m] >= state['best_err']:
            return
        if cost + min_cost_tail[m] > budget:
            return
        if m == n_mod:
            state['best'] = tuple(choice)
            state['best_err'] = err
            return
        for k in orders[m]:
            choice[m] = k
            visit(m + 1, cost + costs[m][k], err + errs[m][k])

    visit(0, 0, 0.0)
    return state['best']


_SOLVERS = {
    Solver.EXHAUSTIVE: _solve_exhaustive,
    Solver.DP: _solve_dp,
    Solver.BRANCH_BOUND: _solve_branch_bound,
}


def plan(candidates, budget_bytes, solver=Solver.DP):
    """Least-error assignment of one candidate per module within the budget.

    `candidates` maps layer ids (in execution order) to candidate lists.
    Raises InfeasibleBudgetError, carrying the minimal achievable cost, when
    no assignment fits.
    """
    _check_candidates(candidates)
    if solver not in _SOLVERS:
        raise InvalidInputError('unknown solver %r, expected one of %r' % (solver, Solver.ALL))
    names = list(candidates)
    costs = [[int(c.cost_bytes) for c in candidates[n]] for n in names]
    errs = [[float(c.err) for c in candidates[n]] for n in names]
    budget = int(budget_bytes)
    min_cost = sum(min(c) for c in costs)
    if min_cost > budget:
        raise InfeasibleBudgetError(
            'budget of %d bytes is below the minimal achievable cost of %d bytes' % (budget, min_cost),
            min_cost)
    choice = _SOLVERS[solver](costs, errs, budget)
    if choice is None:
        raise InfeasibleBudgetError('no assignment fits %d bytes' % budget, min_cost)
    assignment = OrderedDict((n, candidates[n][k]) for n, k in zip(names, choice))
    total_cost = sum(c.cost_bytes for c in assignment.values())
    assert total_cost <= budget, 'plan exceeds its budget'
    total_err = 0.0
    for c in assignment.values():
        total_err += c.err
    params = sum(c.params for c in assignment.values())
    bpw = 8.0 * total_cost / params if params else 0.0
    log.debug('plan (%s): %d modules, %d/%d bytes, err %g', solver, len(names), total_cost, budget, total_err)
    return Plan(assignment, int(total_cost), total_err, bpw, budget)


def _graph_shapes(graph):
    return [node.shape for node in graph]


def uniform_equivalent(graph, budget_bytes, tolerance=0.01, bits=DEFAULT_BITS, groups=DEFAULT_GROUPS):
    """Label of the uniform config whose total size is within tolerance of the budget, if any."""
    best = None
    for b in bits:
        for g in groups:
            cfg = QuantConfig.from_group(b, g)
            total = sum(storage_bytes_for(shape, cfg) for shape in _graph_shapes(graph))
            rel = abs(total - budget_bytes) / float(budget_bytes)
            if rel <= tolerance and (best is None or rel < best[0]):
                best = (rel, cfg.label())
    return best[1] if best else None


def budget_from_bpw(graph, target_bpw):
    """Byte budget sum(params * bpw / 8) over the quantizable modules."""
    if not target_bpw > 0:
        raise InvalidInputError('target bpw must be positive, got %r' % (target_bpw,))
    if target_bpw < MIN_PLAN_BPW:
        raise InvalidInputError(
            'mixed-precision plans need at least %.1f bpw, got %r; use a binary-factor format '
            'for lower budgets' % (MIN_PLAN_BPW, target_bpw))
    params = sum(N * M for N, M in _graph_shapes(graph))
    budget = int(math.floor(params * target_bpw / 8.0 + 1e-9))
    equiv = uniform_equivalent(graph, budget)
    if equiv:
        log.info('%.3g bpw (%d bytes) is equivalent to uniform %s', target_bpw, budget, equiv)
    return budget


def plan_to_dict(p):
    return OrderedDict([
        ('format', PLAN_FORMAT),
        ('version', PLAN_VERSION),
        ('budget_bytes', p.budget_bytes),
        ('mode', p.mode),
        ('total_cost', int(p.total_cost)),
        ('total_err', float(p.total_err)),
        ('achieved_bpw', float(p.achieved_bpw)),
        ('assignment', OrderedDict((n, c.to_dict()) for n, c in p.assignment.items())),
    ])


_validator = None


def _get_validator():
    global _validator
    if _validator is None:
        with io.open(schema_path, encoding='utf8') as f:
            _validator = Validator(json.load(f))
    return _validator


def validate_plan_dict(d):
    try:
        _get_validator().validate(d)
    except ValidationError as e:
        raise ConfigError('invalid plan document: %s' % e.message)


def plan_from_dict(d, graph=None):
    """Rebuild a plan, checking it covers exactly the modules of `graph`."""
    validate_plan_dict(d)
    assignment = OrderedDict()
    for name, c in d['assignment'].items():
        shape = graph[name].shape if graph is not None else None
        params = shape[0] * shape[1] if shape else 0
        cand = ConfigCandidate(c['bits'], c.get('group_size'), c.get('scheme', Scheme.SYMMETRIC),
                               c['cost_bytes'], c.get('err', 0.0), params)
        QuantConfig.from_group(cand.bits, cand.group_size, cand.scheme)
        assignment[name] = cand
    if graph is not None:
        missing = [n for n in graph.ids() if n not in assignment]
        extra = [n for n in assignment if n not in graph]
        if missing or extra:
            raise ConfigError('plan does not match the model: missing %r, unknown %r' % (missing, extra))
        assignment = OrderedDict((n, assignment[n]) for n in graph.ids())
    return Plan(assignment, d['total_cost'], d['total_err'], d['achieved_bpw'],
                d.get('budget_bytes'), d.get('mode'))


def write_plan(p, path):
    with io.open(path, 'w', encoding='utf8') as f:
        json.dump(plan_to_dict(p), f, indent=1)
        f.write('\n')


def read_plan(path, graph=None):
    with io.open(path, encoding='utf8') as f:
        try:
            d = json.load(f)
        except ValueError as e:
            raise ConfigError('plan file %s is not valid JSON: %s' % (path, e))
    return plan_from_dict(d, graph)


def input_gram_diagonals(model, calib):
    """Per-layer diagonals of the full-precision input Gram X^T X."""
    out = OrderedDict((name, np.zeros(model.weight(name).shape[0])) for name in model.linear_names())
    for seq in calib:
        taps = model.forward_with_taps(seq)
        for name in out:
            x = taps.inputs[name]
            out[name] += np.sum(x * x, axis=0)
    return out


def plan_model(model, budget_bytes, mode=ErrorMode.NAIVE, solver=Solver.DP, calib=None,
               bits=DEFAULT_BITS, groups=DEFAULT_GROUPS, scheme=Scheme.SYMMETRIC):
    """Build candidates for every linear layer of `model` and solve the plan.

    The activation-aware mode needs a calibration set for the input Gram
    diagonals.
    """
    mode = ErrorMode.ALIASES.get(mode, mode)
    if mode not in ErrorMode.ALL:
        raise InvalidInputError('unknown error mode %r, expected one of %r' % (mode, ErrorMode.ALL))
    a_diags = {}
    if mode == ErrorMode.ACT_AWARE:
        if calib is None:
            raise InvalidInputError('act-aware planning needs a calibration set')
        a_diags = input_gram_diagonals(model, calib)
    candidates = OrderedDict()
    for node in model.graph:
        W = model.weight(node.layer_id)
        candidates[node.layer_id] = [
            c.with_err(estimate_error(W, c, mode, a_diags.get(node.layer_id)))
            for c in candidate_grid(node.shape, bits, groups, scheme)]
    p = plan(candidates, budget_bytes, solver)
    p.mode = mode
    return p
