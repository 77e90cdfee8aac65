# coding: utf-8

# Copyright (c) qdesk contributors.
# Distributed under the terms of the Modified BSD License.

"""Quantized models, the layer-wise sweep and the refiner chain.

The sweep walks the quantizable layers in execution order. For each layer
it forwards the calibration set through the full-precision model and
through the partially quantized student, accumulates the layer's input
statistics, quantizes the layer and installs the result in the student.
The first complete result is the pivot: a loadable, evaluable checkpoint
that refiners then improve one stage at a time.
"""

import csv
import io
import json
import os
import re
from collections import OrderedDict
from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np
from jsonschema import Draft4Validator as Validator
from jsonschema import ValidationError

from ._version import __version__
from .log import (
    QdeskError, InvalidInputError, ConfigError, ContainerError, LayerQuantizationError,
)
from . import log
from . import container
from .autobit import budget_from_bpw, plan_model, plan_to_dict, read_plan
from .calib import (
    CalibStats, TokenCorpus, accumulate_stats, read_corpus, sample_calib, synthetic_corpus,
)
from .metrics import fidelity_report, lowrank_residual_fit
from .preprocess import Preconditioner, build_preconditioner, incoherence, RotationKind
from .quant_format import QuantConfig, QuantizedMatrix, dequantize, storage_bytes
from .quantizing.binfact import (
    BinfactFormat, DbfMatrix, MdbfMatrix, dequantize_binfact, msvid_init, rank_for_bpw,
    refine_alternating, storage_bytes_binfact, binfact_objective,
)
from .quantizing.gptq import GptqOptions
from .quantizing.jointq import JointqOptions, jointq_refine
from .quantizing.layerwise import Method, quantize_layer
from .quantizing.lpcd import Submodule, SubmoduleKind, lpcd_refine
from .quantizing.qep import QepOptions, qep_target
from .quantizing.rtn import ScaleMode
from .toymodel import ToyModel, ToyModelConfig, dense_names, parse_layer_id
from .utils import write_json

__all__ = [
    "LayerFormat", "LayerSpec", "QuantizedLayer", "QuantizedModel", "PreprocessOptions",
    "BinfactOptions", "LpcdOptions", "SweepOptions", "inspect", "run_layerwise_sweep",
    "uniform_specs", "specs_from_plan", "Refiner", "make_refiner", "parse_refiner",
    "run_refiners", "PipelineConfig", "save_model", "load_model", "stage_table",
    "run_pipeline", "build_specs", "split_heldout", "write_stage_table", "preprocess_report",
]


LOWRANK_SUFFIXES = ('.lr_a', '.lr_b')


class LayerFormat:
    "Collection of per-layer storage formats."
    FP = "fp"
    UNIFORM = "uniform"
    DBF = BinfactFormat.DBF
    MDBF = BinfactFormat.MDBF

    ALL = (FP, UNIFORM, DBF, MDBF)


@dataclass(frozen=True)
class LayerSpec:
    """How one layer is to be stored.

    Uniform layers carry a QuantConfig; binary-factor layers a bpw target
    (or an explicit sign rank) and, for MDBF, the envelope rank.
    """
    format: str = LayerFormat.UNIFORM
    config: Optional[QuantConfig] = None
    bpw: Optional[float] = None
    rank: Optional[int] = None
    envelope_rank: int = 1

    def __post_init__(self):
        if self.format not in LayerFormat.ALL:
            raise InvalidInputError('unknown layer format %r, expected one of %r' % (
                self.format, LayerFormat.ALL))
        if self.format == LayerFormat.UNIFORM and self.config is None:
            raise InvalidInputError('uniform layers need a quantization config')
        if self.format in (LayerFormat.DBF, LayerFormat.MDBF) and self.bpw is None and self.rank is None:
            raise InvalidInputError('binary-factor layers need a bpw target or a rank')

    @classmethod
    def passthrough(cls):
        return cls(LayerFormat.FP)

    @classmethod
    def uniform(cls, cfg):
        return cls(LayerFormat.UNIFORM, cfg)

    @classmethod
    def binfact(cls, fmt=BinfactFormat.DBF, bpw=1.0, envelope_rank=1, rank=None):
        return cls(fmt, None, bpw, rank, envelope_rank if fmt == BinfactFormat.MDBF else 1)

    def sign_rank(self, shape):
        if self.rank is not None:
            return self.rank
        return rank_for_bpw(shape[0], shape[1], self.bpw, self.format, self.envelope_rank)


class QuantizedLayer(object):
    """One stored layer: payload, optional preconditioner and low-rank correction.

    The effective weight is ``K deq(payload) diag(col) + lr_a lr_b`` with
    the preconditioner's input map K.
    """

    def __init__(self, payload, precond=None, lowrank=None):
        if isinstance(payload, QuantizedMatrix):
            self.kind = LayerFormat.UNIFORM
        elif isinstance(payload, (DbfMatrix, MdbfMatrix)):
            self.kind = payload.format
        else:
            payload = np.asarray(payload, dtype=np.float32)
            self.kind = LayerFormat.FP
        self.payload = payload
        self.precond = None if precond is None or precond.is_identity else precond
        if lowrank is not None:
            B, A = (np.asarray(x, dtype=np.float32) for x in lowrank)
            if B.shape[0] != self.shape[0] or A.shape[1] != self.shape[1] or B.shape[1] != A.shape[0]:
                raise InvalidInputError('low-rank factors %r x %r do not fit a %r layer' % (
                    B.shape, A.shape, self.shape))
            lowrank = (B, A) if B.shape[1] else None
        self.lowrank = lowrank

    @property
    def shape(self):
        return tuple(self.payload.shape)

    def dequantized(self):
        """Weight in the preconditioned basis, float64."""
        if self.kind == LayerFormat.UNIFORM:
            return dequantize(self.payload).astype(np.float64)
        if self.kind == LayerFormat.FP:
            return self.payload.astype(np.float64)
        return dequantize_binfact(self.payload, np.float64)

    def base_weight(self):
        """Effective weight without the low-rank correction, float64."""
        W = self.dequantized()
        if self.precond is not None:
            W = self.precond.effective(W)
        return W

    def effective_weight(self):
        W = self.base_weight()
        if self.lowrank is not None:
            W = W + self.lowrank[0].astype(np.float64) @ self.lowrank[1].astype(np.float64)
        return W.astype(np.float32)

    def with_lowrank(self, lowrank):
        return QuantizedLayer(self.payload, self.precond, lowrank)

    def with_payload(self, payload):
        return QuantizedLayer(payload, self.precond, self.lowrank)

    def storage_bytes(self):
        """Bytes this layer occupies in the container payload.

        Full-precision payloads and low-rank factors are stored as f32.
        """
        if self.kind == LayerFormat.UNIFORM:
            n = storage_bytes(self.payload)
        elif self.kind == LayerFormat.FP:
            n = 4 * self.payload.size
        else:
            n = storage_bytes_binfact(self.payload)
        if self.lowrank is not None:
            n += 4 * (self.lowrank[0].size + self.lowrank[1].size)
        return n

    def describe(self):
        if self.kind == LayerFormat.UNIFORM:
            return self.payload.config.label()
        if self.kind == LayerFormat.FP:
            return 'fp'
        if self.kind == LayerFormat.DBF:
            return 'dbf/r%d' % self.payload.rank
        return 'mdbf/r%d/l%d' % (self.payload.rank, self.payload.envelope_rank)


class QuantizedModel(object):
    """A toy model whose linear layers are held as QuantizedLayers."""

    def __init__(self, config, dense, layers, metadata=None):
        self.config = config
        self.dense = OrderedDict((k, np.asarray(v, dtype=np.float32)) for k, v in dense.items())
        self.layers = OrderedDict(layers)
        self.metadata = dict(metadata or {})
        self.history = OrderedDict()
        names = ToyModel(config, self._weights()).linear_names()
        if list(self.layers) != names:
            self.layers = OrderedDict((n, self.layers[n]) for n in names)

    @classmethod
    def from_model(cls, model):
        dense = OrderedDict((n, model.weight(n)) for n in dense_names(model.config))
        layers = OrderedDict((n, QuantizedLayer(model.weight(n))) for n in model.linear_names())
        return cls(model.config, dense, layers)

    def _weights(self):
        weights = dict(self.dense)
        weights.update((n, l.effective_weight()) for n, l in self.layers.items())
        return weights

    def to_model(self):
        """The deployable dense model with effective weights installed."""
        return ToyModel(self.config, self._weights())

    def replace(self, updates):
        layers = OrderedDict(self.layers)
        layers.update(updates)
        out = QuantizedModel(self.config, self.dense, layers, self.metadata)
        out.history = OrderedDict(self.history)
        return out

    @property
    def graph(self):
        return self.to_model().graph

    def storage_bytes(self):
        return sum(l.storage_bytes() for l in self.layers.values())

    def bpw(self):
        params = sum(l.shape[0] * l.shape[1] for l in self.layers.values())
        return 8.0 * self.storage_bytes() / params

    def tensors(self):
        """Ordered name -> container record (or value) mapping."""
        out = OrderedDict()
        model_names = ToyModel(self.config, self._weights()).tensor_names()
        for name in model_names:
            if name in self.layers:
                layer = self.layers[name]
                out[name] = layer.payload
                if layer.lowrank is not None:
                    out[name + '.lr_a'] = layer.lowrank[0]
                    out[name + '.lr_b'] = layer.lowrank[1]
            else:
                out[name] = self.dense[name]
        return out

    def header_metadata(self):
        meta = dict(self.metadata)
        meta['model'] = self.config.to_dict()
        meta['producer'] = 'qdesk %s' % __version__
        meta['preconditioners'] = OrderedDict(
            (n, l.precond.to_dict()) for n, l in self.layers.items() if l.precond is not None)
        return meta

    def store(self, path):
        return container.store(path, self.tensors(), self.header_metadata())

    def dumps(self):
        return container.dumps(self.tensors(), self.header_metadata())

    @classmethod
    def loads(cls, buf):
        metadata, records = container.loads(buf)
        return cls._from_records(metadata, records)

    @classmethod
    def load(cls, path):
        metadata, records = container.load(path)
        return cls._from_records(metadata, records)

    @classmethod
    def _from_records(cls, metadata, records):
        try:
            config = ToyModelConfig.from_dict(metadata['model'])
        except (KeyError, TypeError, InvalidInputError) as e:
            raise ContainerError('container has no valid model description: %s' % e)
        skeleton = ToyModel.init(config, seed=0)
        expected = skeleton.tensor_names()
        linear = set(skeleton.linear_names())
        precs = metadata.get('preconditioners') or {}
        lowrank_names = set()
        for name in records:
            if name.endswith(LOWRANK_SUFFIXES) and name[:-len('.lr_a')] in linear:
                lowrank_names.add(name)
            elif name not in expected:
                raise ContainerError('unknown tensor %s in container' % name)
        missing = [n for n in expected if n not in records]
        if missing:
            raise ContainerError('container is missing tensors: %s' % ', '.join(missing))
        dense = OrderedDict()
        layers = OrderedDict()
        for name in expected:
            rec = records[name]
            value = container.decode_tensor(rec)
            shape = tuple(skeleton.weight(name).shape)
            if tuple(rec.shape) != shape:
                raise ContainerError('tensor %s has shape %r, expected %r' % (name, tuple(rec.shape), shape))
            if name not in linear:
                if rec.encoding != container.Encoding.F32:
                    raise ContainerError('tensor %s must be stored as f32' % name)
                dense[name] = value
                continue
            lowrank = None
            if name + '.lr_a' in records or name + '.lr_b' in records:
                try:
                    lowrank = (container.decode_tensor(records[name + '.lr_a']),
                               container.decode_tensor(records[name + '.lr_b']))
                except KeyError as e:
                    raise ContainerError('incomplete low-rank correction for %s: %s' % (name, e))
            precond = None
            if name in precs:
                try:
                    precond = Preconditioner.from_dict(precs[name], *shape)
                except (InvalidInputError, TypeError) as e:
                    raise ContainerError('invalid preconditioner for %s: %s' % (name, e))
            try:
                layers[name] = QuantizedLayer(value, precond, lowrank)
            except InvalidInputError as e:
                raise ContainerError('invalid layer %s: %s' % (name, e))
        meta = {k: v for k, v in metadata.items() if k not in ('model', 'producer', 'preconditioners')}
        return cls(config, dense, layers, meta)


def save_model(model, path):
    """Store a dense toy model as an all-f32 container."""
    return QuantizedModel.from_model(model).store(path)


def load_model(path):
    """Load a container as a dense model (quantized layers are dequantized)."""
    return QuantizedModel.load(path).to_model()


def inspect(model_path):
    """Layer graph of a stored model and a size report.

    Returns (graph, report) where the report lists every quantizable module
    in execution order and the total parameter count P with its 16-bit
    size 2P.
    """
    qmodel = QuantizedModel.load(model_path)
    model = qmodel.to_model()
    graph = model.graph
    modules = []
    for node in graph:
        layer = qmodel.layers[node.layer_id]
        n_params = node.shape[0] * node.shape[1]
        modules.append(OrderedDict([
            ('layer_id', node.layer_id), ('shape', list(node.shape)), ('params', n_params),
            ('format', layer.describe()), ('bytes', layer.storage_bytes()),
            ('bpw', 8.0 * layer.storage_bytes() / n_params),
        ]))
    P = model.parameter_count()
    report = OrderedDict([
        ('config', model.config.to_dict()),
        ('modules', modules),
        ('n_modules', len(graph)),
        ('parameters', P),
        ('quantizable_parameters', graph.parameter_count()),
        ('fp16_bytes', 2 * P),
        ('quantized_bytes', qmodel.storage_bytes()),
    ])
    return graph, report


@dataclass(frozen=True)
class PreprocessOptions:
    smooth_alpha: Optional[float] = None
    rotation: str = RotationKind.IDENTITY
    balance: Optional[str] = None
    seed: int = 0
    balance_iters: int = 50
    balance_tol: float = 1e-3

    def __post_init__(self):
        object.__setattr__(self, 'rotation', RotationKind.resolve(self.rotation))
        if self.balance == 'none':
            object.__setattr__(self, 'balance', None)

    @property
    def active(self):
        return (self.smooth_alpha is not None or self.rotation != RotationKind.IDENTITY or
                self.balance is not None)


@dataclass(frozen=True)
class BinfactOptions:
    outer_iters: int = 20
    inner_iters: int = 3
    weighted: bool = True


@dataclass(frozen=True)
class LpcdOptions:
    kinds: tuple = (SubmoduleKind.QK, SubmoduleKind.VO, SubmoduleKind.GATE_UP_DOWN)
    iters: int = 3

    def __post_init__(self):
        for k in self.kinds:
            if k not in SubmoduleKind.ROLES:
                raise InvalidInputError('unknown lpcd submodule %r, expected one of %r' % (
                    k, sorted(SubmoduleKind.ROLES)))


@dataclass(frozen=True)
class SweepOptions:
    method: str = Method.GPTQ
    gptq: GptqOptions = field(default_factory=GptqOptions)
    scale_mode: str = ScaleMode.MINMAX
    qep: Optional[QepOptions] = None
    lpcd: Optional[LpcdOptions] = None
    preprocess: PreprocessOptions = field(default_factory=PreprocessOptions)
    binfact: BinfactOptions = field(default_factory=BinfactOptions)


def uniform_specs(graph, cfg):
    return OrderedDict((n, LayerSpec.uniform(cfg)) for n in graph.ids())


def specs_from_plan(plan):
    """Layer specs of an AutoBit plan."""
    return OrderedDict((n, LayerSpec.uniform(c.config)) for n, c in plan.assignment.items())


def _calib_sequences(calib):
    seqs = [np.asarray(s) for s in calib]
    if not seqs:
        raise InvalidInputError('empty calibration set')
    return seqs


def dual_stats(teacher, student, sequences, name):
    """Input statistics of one layer from paired forwards of both models."""
    n = teacher.config.linear_shape(parse_layer_id(name)[1])[0]
    stats = CalibStats.empty(n)
    for seq in sequences:
        x_fp = teacher.forward_with_taps(seq).inputs[name]
        x_q = student.forward_with_taps(seq).inputs[name]
        stats = accumulate_stats(stats, x_fp, x_q)
    return stats


def _fit_binfact(W_bal, spec_or_layer, H, opts):
    """MSVID initialization plus alternating refinement, snapped to half precision."""
    if isinstance(spec_or_layer, LayerSpec):
        fmt = spec_or_layer.format
        R = spec_or_layer.sign_rank(W_bal.shape)
        l = spec_or_layer.envelope_rank
    else:
        F = spec_or_layer.payload
        fmt, R, l = F.format, F.rank, F.envelope_rank
    F = msvid_init(W_bal, R, l, fmt)
    result = refine_alternating(F, W_bal, opts.outer_iters, opts.inner_iters,
                                H=H if opts.weighted else None)
    return result.factors.snapped()


def _quantize_payload(W_bal, pstats, kind, spec_or_layer, opts):
    if kind == LayerFormat.FP:
        return np.asarray(W_bal, dtype=np.float32)
    if kind == LayerFormat.UNIFORM:
        cfg = spec_or_layer.config if isinstance(spec_or_layer, LayerSpec) else spec_or_layer.payload.config
        gptq = GptqOptions(opts.gptq.actorder, opts.gptq.percdamp, opts.gptq.block_cols, opts.scale_mode)
        return quantize_layer(W_bal, pstats, cfg, opts.method, None, gptq, opts.scale_mode)
    return _fit_binfact(W_bal, spec_or_layer, pstats.gram, opts.binfact)


def quantize_one(W, stats, spec, opts, seed=0):
    """Quantize one layer against its statistics into a QuantizedLayer."""
    if spec.format == LayerFormat.FP:
        return QuantizedLayer(W)
    target = qep_target(W, stats, opts.qep) if opts.qep is not None else np.asarray(W, dtype=np.float64)
    pre = opts.preprocess
    precond = None
    if pre.active:
        precond = build_preconditioner(target, stats, pre.smooth_alpha, pre.rotation, pre.balance,
                                       seed, pre.balance_iters, pre.balance_tol)
        W_bal = precond.apply_weight(target)
        pstats = precond.transform_stats(stats)
    else:
        W_bal, pstats = target, stats
    payload = _quantize_payload(W_bal, pstats, spec.format, spec, opts)
    return QuantizedLayer(payload, precond)


def layer_projector(layers, stats_for, opts):
    """Projection used by LPCD: re-quantize a relaxed weight in the layer's own format.

    Preconditioners are kept; low-rank corrections are dropped.
    """
    def project(name, W):
        old = layers[name]
        stats = stats_for[name]
        if old.precond is not None:
            W_bal = old.precond.apply_weight(W)
            pstats = old.precond.transform_stats(stats)
        else:
            W_bal, pstats = np.asarray(W, dtype=np.float64), stats
        new = QuantizedLayer(_quantize_payload(W_bal, pstats, old.kind, old, opts), old.precond)
        return new.effective_weight().astype(np.float64), new
    return project


def _block_lpcd(kind, block, teacher, student, sequences, layers, stats_for, opts, iters):
    """One LPCD pass over a block submodule; returns updated layers and the report."""
    members = ['blocks.%d.%s' % (block, r) for r in SubmoduleKind.ROLES[kind]]
    if all(layers[m].kind == LayerFormat.FP for m in members):
        return {}, None
    fp_taps = [teacher.forward_with_taps(s) for s in sequences]
    q_taps = [student.forward_with_taps(s) for s in sequences]
    quantized = {m: layers[m].effective_weight() for m in members}
    payloads = {m: layers[m] for m in members}
    sub = Submodule.from_taps(kind, block, fp_taps, q_taps, teacher.weights, quantized, payloads,
                              teacher.config)
    new_payloads, _, report = lpcd_refine(sub, layer_projector(layers, stats_for, opts), iters)
    log.info('lpcd %s block %d: J %.4g -> %.4g', kind, block, report.J_init, report.J_final)
    return {m: new_payloads[m] for m in members}, report


_LPCD_TRIGGER = {
    'k': SubmoduleKind.QK,
    'o': SubmoduleKind.VO,
    'down': SubmoduleKind.GATE_UP_DOWN,
}


def run_layerwise_sweep(model, calib, specs, opts=None):
    """Quantize every layer of `model` in execution order.

    `specs` maps every layer id to a LayerSpec (an AutoBit plan is accepted
    too). Activations are recomputed per layer through both models; only
    the current layer's statistics are kept. Returns the pivot
    QuantizedModel whose `history` holds per-layer objectives
    ||X_hat W_hat - X W||^2 and LPCD reports.
    """
    opts = opts or SweepOptions()
    if hasattr(specs, 'assignment'):
        specs = specs_from_plan(specs)
    graph = model.graph
    missing = [n for n in graph.ids() if n not in specs]
    if missing:
        raise InvalidInputError('plan does not cover layers: %s' % ', '.join(missing))
    sequences = _calib_sequences(calib)
    student = model.copy()
    layers = OrderedDict((n, QuantizedLayer(model.weight(n))) for n in graph.ids())
    stats_for = {}
    history = OrderedDict()
    for index, node in enumerate(graph):
        name = node.layer_id
        spec = specs[name]
        W = model.weight(name).astype(np.float64)
        try:
            stats = dual_stats(model, student, sequences, name)
            layer = quantize_one(W, stats, spec, opts, seed=opts.preprocess.seed + index)
        except (QdeskError, ValueError, ArithmeticError, np.linalg.LinAlgError) as e:
            raise LayerQuantizationError(name, e)
        layers[name] = layer
        stats_for[name] = stats
        W_eff = layer.effective_weight()
        student.set_weight(name, W_eff)
        objective = stats.objective(W, W_eff)
        history[name] = OrderedDict([('format', layer.describe()), ('objective', objective)])
        log.info('quantized %s (%s): objective %.4g', name, layer.describe(), objective)

        kind = _LPCD_TRIGGER.get(node.role)
        if opts.lpcd is not None and kind in opts.lpcd.kinds:
            try:
                updates, report = _block_lpcd(kind, node.block, model, student, sequences, layers,
                                              stats_for, opts, opts.lpcd.iters)
            except QdeskError as e:
                raise LayerQuantizationError(name, e)
            for m, l in updates.items():
                layers[m] = l
                student.set_weight(m, l.effective_weight())
            if report is not None:
                history['lpcd.%d.%s' % (node.block, kind)] = report.to_dict()

    dense = OrderedDict((n, model.weight(n)) for n in dense_names(model.config))
    pivot = QuantizedModel(model.config, dense, layers)
    pivot.history = history
    return pivot


# Refiners


class Refiner(object):
    """A stage mapping a complete quantized model to an improved one."""

    name = None

    def __init__(self, **params):
        self.params = params

    def apply(self, qmodel, teacher, sequences, opts):
        raise NotImplementedError

    def describe(self):
        if not self.params:
            return self.name
        return '%s(%s)' % (self.name, ','.join('%s=%s' % kv for kv in sorted(self.params.items())))


def _base_target(W, layer):
    "Target of the payload: the teacher weight minus the layer's low-rank correction."
    if layer.lowrank is None:
        return W
    B, A = layer.lowrank
    return W - B.astype(np.float64) @ A.astype(np.float64)


class JointqRefiner(Refiner):
    name = 'jointq'

    def apply(self, qmodel, teacher, sequences, opts):
        jopts = JointqOptions(lam=float(self.params.get('lam', 0.2)),
                              max_passes=int(self.params.get('max_passes', 8)))
        student = qmodel.to_model()
        updates = OrderedDict()
        traces = OrderedDict()
        for name, layer in qmodel.layers.items():
            if layer.kind != LayerFormat.UNIFORM:
                continue
            X = np.concatenate([student.forward_with_taps(s).inputs[name] for s in sequences])
            W = _base_target(teacher.weight(name).astype(np.float64), layer)
            if layer.precond is not None:
                X = layer.precond.transform_activations(X)
                W = layer.precond.apply_weight(W)
            result = jointq_refine(layer.payload, W, X, jopts)
            new = layer.with_payload(result.quantized)
            updates[name] = new
            traces[name] = result.trace
            student.set_weight(name, new.effective_weight())
            log.debug('jointq %s: %d moves, objective %.4g -> %.4g', name, result.accepted,
                      result.trace[0], result.trace[-1])
        out = qmodel.replace(updates)
        out.history['jointq'] = traces
        return out


class LowrankRefiner(Refiner):
    name = 'lowrank'

    def apply(self, qmodel, teacher, sequences, opts):
        r = int(self.params.get('rank', self.params.get('r', 2)))
        eta = float(self.params.get('eta', 0.01))
        student = qmodel.to_model()
        updates = OrderedDict()
        for name, layer in qmodel.layers.items():
            if layer.kind == LayerFormat.FP:
                continue
            stats = dual_stats(teacher, student, sequences, name)
            target = qep_target(teacher.weight(name), stats, QepOptions(1.0, eta))
            base = layer.base_weight()
            B, A = lowrank_residual_fit(target, base, r=min(r, *layer.shape), gram=stats.gram)
            new = layer.with_lowrank((B, A))
            if stats.objective(teacher.weight(name), new.effective_weight()) > \
                    stats.objective(teacher.weight(name), layer.effective_weight()):
                new = layer
            updates[name] = new
            student.set_weight(name, new.effective_weight())
        return qmodel.replace(updates)


class LpcdRefiner(Refiner):
    name = 'lpcd'

    def apply(self, qmodel, teacher, sequences, opts):
        iters = int(self.params.get('iters', 3))
        kinds = self.params.get('kinds', LpcdOptions().kinds)
        if isinstance(kinds, str):
            kinds = tuple(k for k in kinds.split('+') if k)
        LpcdOptions(tuple(kinds), iters)
        layers = OrderedDict(qmodel.layers)
        student = qmodel.to_model()
        reports = []
        for block in range(teacher.config.L):
            for kind in kinds:
                members = ['blocks.%d.%s' % (block, r) for r in SubmoduleKind.ROLES[kind]]
                stats_for = {m: dual_stats(teacher, student, sequences, m) for m in members}
                updates, report = _block_lpcd(kind, block, teacher, student, sequences, layers,
                                              stats_for, opts, iters)
                for m, l in updates.items():
                    layers[m] = l
                    student.set_weight(m, l.effective_weight())
                if report is not None:
                    reports.append(report.to_dict())
        out = qmodel.replace(layers)
        out.history['lpcd'] = reports
        return out


class BinfactRefiner(Refiner):
    name = 'binfact-refine'

    def apply(self, qmodel, teacher, sequences, opts):
        outer = int(self.params.get('iters', 20))
        student = qmodel.to_model()
        updates = OrderedDict()
        for name, layer in qmodel.layers.items():
            if layer.kind not in (LayerFormat.DBF, LayerFormat.MDBF):
                continue
            stats = dual_stats(teacher, student, sequences, name)
            W = _base_target(teacher.weight(name).astype(np.float64), layer)
            if layer.precond is not None:
                W = layer.precond.apply_weight(W)
                stats = layer.precond.transform_stats(stats)
            result = refine_alternating(layer.payload, W, outer, 3, H=stats.gram)
            F = result.factors.snapped()
            if binfact_objective(F, W, stats.gram) <= binfact_objective(layer.payload, W, stats.gram):
                layer = layer.with_payload(F)
            updates[name] = layer
            student.set_weight(name, layer.effective_weight())
        return qmodel.replace(updates)


REFINERS = OrderedDict((cls.name, cls) for cls in (
    JointqRefiner, LpcdRefiner, LowrankRefiner, BinfactRefiner))

_REFINER_RE = re.compile(r'^\s*([\w-]+)\s*(?:\((.*)\))?\s*$')


def _parse_value(text):
    text = text.strip()
    try:
        return json.loads(text)
    except ValueError:
        return text


def make_refiner(name, **params):
    try:
        cls = REFINERS[name]
    except KeyError:
        raise ConfigError('unknown refiner %r, expected one of %r' % (name, list(REFINERS)))
    return cls(**params)


def parse_refiner(spec):
    """Refiner from 'name', 'name(k=v,...)' or {'name': ..., 'params': {...}}."""
    if isinstance(spec, Refiner):
        return spec
    if isinstance(spec, dict):
        return make_refiner(spec.get('name'), **(spec.get('params') or {}))
    m = _REFINER_RE.match(spec)
    if not m:
        raise ConfigError('cannot parse refiner %r' % (spec,))
    params = {}
    if m.group(2):
        for part in m.group(2).split(','):
            if not part.strip():
                continue
            if '=' not in part:
                raise ConfigError('refiner parameter %r is not key=value' % (part,))
            k, v = part.split('=', 1)
            params[k.strip()] = _parse_value(v)
    return make_refiner(m.group(1), **params)


def run_refiners(pivot, refiners, teacher, calib, heldout=None, opts=None):
    """Apply refiners in order, evaluating after the pivot and every stage.

    Returns (model, trace) with trace a list of (stage, FidelityReport) of
    length len(refiners) + 1.
    """
    opts = opts or SweepOptions()
    refiners = [parse_refiner(r) for r in refiners]
    sequences = _calib_sequences(calib)
    layer_errors = OrderedDict((k, v['objective']) for k, v in pivot.history.items()
                               if isinstance(v, dict) and 'objective' in v)
    trace = [('pivot', fidelity_report(teacher, pivot.to_model(), sequences, heldout,
                                       layer_errors=layer_errors))]
    model = pivot
    for refiner in refiners:
        log.info('running refiner %s', refiner.describe())
        model = refiner.apply(model, teacher, sequences, opts)
        trace.append((refiner.describe(),
                      fidelity_report(teacher, model.to_model(), sequences, heldout)))
        log.info('after %s: kl %.4g', refiner.describe(), trace[-1][1].kl)
    return model, trace


def stage_table(trace):
    """(stage, metric, value) rows of a refiner trace."""
    rows = []
    for stage, report in trace:
        rows.extend(report.rows(stage))
    return rows


def preprocess_report(model, calib, opts):
    """Per-layer incoherence and equivalence error of the preprocessing transforms."""
    sequences = _calib_sequences(calib)
    rows = OrderedDict()
    for index, node in enumerate(model.graph):
        name = node.layer_id
        W = model.weight(name).astype(np.float64)
        stats = dual_stats(model, model, sequences, name)
        precond = build_preconditioner(W, stats, opts.smooth_alpha, opts.rotation, opts.balance,
                                       opts.seed + index, opts.balance_iters, opts.balance_tol)
        W_bal = precond.apply_weight(W)
        restored = precond.effective(W_bal)
        rows[name] = OrderedDict([
            ('incoherence_before', incoherence(W)),
            ('incoherence_after', incoherence(W_bal)),
            ('max_rel_error', float(np.abs(restored - W).max() / np.abs(W).max())),
        ])
    return rows


# Pipeline configuration


pipeline_schema_path = os.path.join(os.path.dirname(__file__), 'pipeline_config.schema.json')

_pipeline_validator = None


def _get_pipeline_validator():
    global _pipeline_validator
    if _pipeline_validator is None:
        with io.open(pipeline_schema_path, encoding='utf8') as f:
            _pipeline_validator = Validator(json.load(f))
    return _pipeline_validator


def default_seed():
    """Seed from QDESK_SEED, or 0."""
    value = os.environ.get('QDESK_SEED')
    if value is None or value == '':
        return 0
    try:
        return int(value)
    except ValueError:
        raise ConfigError('QDESK_SEED must be an integer, got %r' % (value,))


def _section(d, key, defaults):
    out = dict(defaults)
    out.update(d.get(key) or {})
    return out


@dataclass
class PipelineConfig:
    """Everything a `run` needs; validated against the pipeline schema."""
    model: Optional[str] = None
    model_config: dict = field(default_factory=dict)
    calib: dict = field(default_factory=dict)
    preprocess: dict = field(default_factory=dict)
    quantize: dict = field(default_factory=dict)
    method: dict = field(default_factory=dict)
    refiners: list = field(default_factory=list)
    seed: int = 0
    output: str = 'pivot.ocw'
    report: Optional[str] = None
    table: Optional[str] = None

    CALIB_DEFAULTS = dict(corpus=None, corpus_mode='binary', synthetic_tokens=20000,
                          strategy='drop_rand', n=16, length=64, heldout_fraction=0.1)
    PREPROCESS_DEFAULTS = dict(smooth_alpha=None, rotation='none', balance='none',
                               balance_iters=50, balance_tol=1e-3)
    QUANTIZE_DEFAULTS = dict(format='uniform', bits=4, group_size=128, scheme='symmetric',
                             plan=None, bpw=None, mode='act', solver='dp',
                             binfact_bpw=1.0, envelope_rank=2)
    METHOD_DEFAULTS = dict(name='gptq', actorder=False, percdamp=0.01, scale_mode='minmax',
                           qep=True, qep_alpha=1.0, qep_eta=0.01, lpcd=False, lpcd_iters=3)

    @classmethod
    def from_dict(cls, d):
        try:
            _get_pipeline_validator().validate(d)
        except ValidationError as e:
            path = '/'.join(str(p) for p in e.absolute_path)
            raise ConfigError('invalid pipeline config%s: %s' % (' at ' + path if path else '', e.message))
        seed = d['seed'] if d.get('seed') is not None else default_seed()
        config = cls(
            model=d.get('model'),
            model_config=dict(d.get('model_config') or {}),
            calib=_section(d, 'calib', cls.CALIB_DEFAULTS),
            preprocess=_section(d, 'preprocess', cls.PREPROCESS_DEFAULTS),
            quantize=_section(d, 'quantize', cls.QUANTIZE_DEFAULTS),
            method=_section(d, 'method', cls.METHOD_DEFAULTS),
            refiners=list(d.get('refiners') or []),
            seed=int(seed),
            output=d.get('output', 'pivot.ocw'),
            report=d.get('report'),
            table=d.get('table'),
        )
        # Resolve refiner names early so typos fail before any work
        for r in config.refiners:
            parse_refiner(r)
        return config

    @classmethod
    def from_file(cls, path):
        try:
            with io.open(path, encoding='utf8') as f:
                d = json.load(f)
        except ValueError as e:
            raise ConfigError('pipeline config %s is not valid JSON: %s' % (path, e))
        config = cls.from_dict(d)
        base = os.path.dirname(os.path.abspath(path))
        for attr in ('model', 'output', 'report', 'table'):
            value = getattr(config, attr)
            if value and not os.path.isabs(value):
                setattr(config, attr, os.path.join(base, value))
        for section, key in (('calib', 'corpus'), ('quantize', 'plan')):
            value = getattr(config, section).get(key)
            if value and not os.path.isabs(value):
                getattr(config, section)[key] = os.path.join(base, value)
        return config

    def to_dict(self):
        return asdict(self)

    def sweep_options(self):
        m = self.method
        p = self.preprocess
        qep = QepOptions(m['qep_alpha'], m['qep_eta']) if m['qep'] else None
        lpcd = LpcdOptions(iters=m['lpcd_iters']) if m['lpcd'] else None
        return SweepOptions(
            method=m['name'],
            gptq=GptqOptions(actorder=m['actorder'], percdamp=m['percdamp'], scale_mode=m['scale_mode']),
            scale_mode=m['scale_mode'],
            qep=qep,
            lpcd=lpcd,
            preprocess=PreprocessOptions(p['smooth_alpha'], p['rotation'], p['balance'], self.seed,
                                         p['balance_iters'], p['balance_tol']),
        )


# End-to-end runs


def split_heldout(corpus, fraction, length):
    """Split off the tail of a corpus as held-out sequences of `length` tokens.

    Returns (calibration corpus, list of held-out sequences).
    """
    if not 0 <= fraction < 1:
        raise ConfigError('held-out fraction must lie in [0, 1), got %r' % (fraction,))
    n_tail = int(len(corpus) * fraction)
    if n_tail < 2:
        return corpus, []
    head, tail = corpus.tokens[:-n_tail], corpus.tokens[-n_tail:]
    heldout = [tail[i:i + length] for i in range(0, n_tail, length)]
    heldout = [s for s in heldout if s.size >= 2]
    return TokenCorpus(head, corpus.vocab), heldout


def build_specs(config, model, calib):
    """Per-layer specs and, when planning was involved, the AutoBit plan."""
    q = config.quantize
    graph = model.graph
    fmt = q['format']
    if fmt == LayerFormat.FP:
        return OrderedDict((n, LayerSpec.passthrough()) for n in graph.ids()), None
    if fmt in (LayerFormat.DBF, LayerFormat.MDBF):
        spec = LayerSpec.binfact(fmt, q['binfact_bpw'], q['envelope_rank'])
        return OrderedDict((n, spec) for n in graph.ids()), None
    if q['plan']:
        p = read_plan(q['plan'], graph)
    elif q['bpw'] is not None:
        p = plan_model(model, budget_from_bpw(graph, q['bpw']), q['mode'], q['solver'], calib)
    else:
        cfg = QuantConfig.from_group(q['bits'], q['group_size'], q['scheme'])
        return uniform_specs(graph, cfg), None
    log.info('plan: %d bytes, %.3f bpw, err %.4g', p.total_cost, p.achieved_bpw, p.total_err)
    return specs_from_plan(p), p


def run_pipeline(config):
    """calib -> plan -> sweep -> refiners -> eval, as described by a PipelineConfig.

    Stores the final model at `config.output` and, when set, writes the JSON
    report and the CSV stage table. Returns (model, trace, report).
    """
    if config.model:
        teacher = load_model(config.model)
    else:
        mc = ToyModelConfig.from_dict(config.model_config) if config.model_config else ToyModelConfig()
        teacher = ToyModel.init(mc, config.seed)
        log.info('no model given, initialized a toy model with seed %d', config.seed)
    c = config.calib
    vocab = teacher.config.vocab
    if c['corpus']:
        corpus = read_corpus(c['corpus'], c['corpus_mode'], vocab)
    else:
        corpus = synthetic_corpus(c['synthetic_tokens'], vocab, config.seed)
    corpus, heldout = split_heldout(corpus, c['heldout_fraction'], c['length'])
    calib = sample_calib(corpus, c['strategy'], c['n'], c['length'], config.seed)
    log.info('calibration: %d x %d tokens (%s), %d held-out sequences',
             calib.n, calib.length, calib.strategy, len(heldout))

    specs, p = build_specs(config, teacher, calib)
    opts = config.sweep_options()
    pivot = run_layerwise_sweep(teacher, calib, specs, opts)
    model, trace = run_refiners(pivot, config.refiners, teacher, calib, heldout, opts)
    model.metadata['seed'] = config.seed
    model.store(config.output)

    report = OrderedDict([
        ('producer', 'qdesk %s' % __version__),
        ('config', config.to_dict()),
        ('plan', plan_to_dict(p) if p is not None else None),
        ('bpw', model.bpw()),
        ('storage_bytes', model.storage_bytes()),
        ('history', pivot.history),
        ('stages', [OrderedDict([('stage', stage), ('metrics', r.to_dict())]) for stage, r in trace]),
    ])
    if config.report:
        write_json(report, config.report)
    if config.table:
        write_stage_table(config.table, trace)
    return model, trace, report


def write_stage_table(path, trace):
    with io.open(path, 'w', encoding='utf8', newline='') as f:
        writer = csv.writer(f)
        writer.writerow(('stage', 'metric', 'value'))
        for row in stage_table(trace):
            writer.writerow(row[:2] + ('%.6g' % row[2],))
