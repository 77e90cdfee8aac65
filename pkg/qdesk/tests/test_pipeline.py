# coding: utf-8

# Copyright (c) qdesk contributors.
# Distributed under the terms of the Modified BSD License.

import io
import json
import os
import struct

import numpy as np
import pytest

from qdesk import container
from qdesk.calib import CalibStats, TokenCorpus, accumulate_stats, sample_calib, synthetic_corpus
from qdesk.log import ConfigError, ContainerError, InvalidInputError, LayerQuantizationError
from qdesk.pipeline import (
    BinfactOptions, LayerFormat, LayerSpec, LpcdOptions, PipelineConfig, PreprocessOptions,
    QuantizedModel, SweepOptions, build_specs, inspect, load_model, parse_refiner,
    preprocess_report, quantize_one, run_layerwise_sweep, run_pipeline, run_refiners, save_model,
    split_heldout, stage_table, uniform_specs,
)
from qdesk.quant_format import QuantConfig
from qdesk.quantizing.qep import QepOptions
from qdesk.toymodel import ToyModel, ToyModelConfig


def uniform(model, bits=4, group_size=None):
    return uniform_specs(model.graph, QuantConfig.from_group(bits, group_size))


def test_passthrough_sweep_keeps_the_model(toy_model, calib_set):
    specs = {n: LayerSpec.passthrough() for n in toy_model.graph.ids()}
    pivot = run_layerwise_sweep(toy_model, calib_set, specs)
    tokens = calib_set.sequences[0]
    np.testing.assert_array_equal(pivot.to_model().forward(tokens), toy_model.forward(tokens))
    assert all(h['objective'] == pytest.approx(0.0, abs=1e-8) for h in pivot.history.values())


def test_block_zero_quantization_leaves_block_one(two_block_model, calib_set):
    cfg = QuantConfig.from_group(3, None)
    specs = {n: LayerSpec.uniform(cfg) if n.startswith('blocks.0.') else LayerSpec.passthrough()
             for n in two_block_model.graph.ids()}
    pivot = run_layerwise_sweep(two_block_model, calib_set, specs)
    for name in two_block_model.graph.ids():
        layer = pivot.layers[name]
        if name.startswith('blocks.1.'):
            assert layer.kind == LayerFormat.FP
            np.testing.assert_array_equal(layer.effective_weight(), two_block_model.weight(name))
        else:
            assert layer.kind == LayerFormat.UNIFORM
            assert layer.describe() == '3b/ch/sym'


def test_sweep_is_deterministic(toy_model, calib_set):
    opts = SweepOptions(qep=QepOptions())
    a = run_layerwise_sweep(toy_model, calib_set, uniform(toy_model), opts)
    b = run_layerwise_sweep(toy_model, calib_set, uniform(toy_model), opts)
    assert a.dumps() == b.dumps()


def test_sweep_records_layer_objectives(toy_model, calib_set):
    pivot = run_layerwise_sweep(toy_model, calib_set, uniform(toy_model, 3))
    assert list(pivot.history) == toy_model.graph.ids()
    assert all(h['objective'] > 0 for h in pivot.history.values())
    assert all(h['format'] == '3b/ch/sym' for h in pivot.history.values())
    assert pivot.bpw() == pytest.approx(
        8.0 * pivot.storage_bytes() / toy_model.graph.parameter_count())


def test_sweep_with_lpcd(toy_model, calib_set):
    opts = SweepOptions(qep=QepOptions(), lpcd=LpcdOptions(iters=1))
    pivot = run_layerwise_sweep(toy_model, calib_set, uniform(toy_model, 3), opts)
    assert [k for k in pivot.history if k.startswith('lpcd.')] == [
        'lpcd.0.qk', 'lpcd.0.vo', 'lpcd.0.gate_up_down']
    for key in ('lpcd.0.qk', 'lpcd.0.vo', 'lpcd.0.gate_up_down'):
        report = pivot.history[key]
        assert report['J_final'] <= report['J_init']


def test_preconditioned_sweep_survives_the_container(toy_model, calib_set):
    pre = PreprocessOptions(smooth_alpha=0.5, rotation='hadamard', balance='l2', seed=2)
    pivot = run_layerwise_sweep(toy_model, calib_set, uniform(toy_model), SweepOptions(preprocess=pre))
    assert all(l.precond is not None for l in pivot.layers.values())
    again = QuantizedModel.loads(pivot.dumps())
    tokens = calib_set.sequences[1]
    np.testing.assert_allclose(again.to_model().forward(tokens), pivot.to_model().forward(tokens),
                               rtol=1e-5, atol=1e-6)


def test_preprocess_report(toy_model, calib_set):
    rows = preprocess_report(toy_model, calib_set, PreprocessOptions(rotation='random', balance='l2'))
    assert list(rows) == toy_model.graph.ids()
    for row in rows.values():
        assert row['max_rel_error'] < 1e-5
        assert row['incoherence_before'] >= 1.0


def test_sweep_errors(toy_model, calib_set):
    specs = uniform(toy_model)
    del specs['blocks.0.down']
    with pytest.raises(InvalidInputError):
        run_layerwise_sweep(toy_model, calib_set, specs)
    tiny = {n: LayerSpec.binfact(bpw=0.1) for n in toy_model.graph.ids()}
    with pytest.raises(LayerQuantizationError) as e:
        run_layerwise_sweep(toy_model, calib_set, tiny)
    assert e.value.layer_id == 'blocks.0.q'
    assert e.value.exit_code == 2
    with pytest.raises(InvalidInputError):
        run_layerwise_sweep(toy_model, [], uniform(toy_model))


def test_layer_spec_validation():
    with pytest.raises(InvalidInputError):
        LayerSpec('ternary')
    with pytest.raises(InvalidInputError):
        LayerSpec(LayerFormat.UNIFORM)
    with pytest.raises(InvalidInputError):
        LayerSpec(LayerFormat.DBF)
    assert LayerSpec.binfact('dbf', 1.0, envelope_rank=3).envelope_rank == 1


def test_quantize_one_binary_factor(rng):
    W = rng.normal(size=(64, 48))
    X = rng.normal(size=(80, 64))
    stats = accumulate_stats(CalibStats.empty(64), X, X)
    opts = SweepOptions(binfact=BinfactOptions(outer_iters=2, inner_iters=1))
    layer = quantize_one(W, stats, LayerSpec.binfact('mdbf', 2.0, 2), opts)
    assert layer.kind == LayerFormat.MDBF
    assert layer.describe().startswith('mdbf/r')
    assert 8 * layer.storage_bytes() <= 1.02 * 2.0 * W.size + 16
    assert layer.effective_weight().shape == W.shape


def test_binary_factor_pivot_and_refiner(calib_set):
    model = ToyModel.init(ToyModelConfig(L=1, d=64, H=2, H_kv=1, d_ff=128, vocab=64, T_max=64), 1)
    calib = calib_set.sequences[:2]
    specs = {n: LayerSpec.binfact('dbf', 2.0) for n in model.graph.ids()}
    opts = SweepOptions(binfact=BinfactOptions(outer_iters=2, inner_iters=1))
    pivot = run_layerwise_sweep(model, calib, specs, opts)
    assert all(l.kind == LayerFormat.DBF for l in pivot.layers.values())
    assert pivot.bpw() <= 2.05
    again = QuantizedModel.loads(pivot.dumps())
    assert [l.describe() for l in again.layers.values()] == [l.describe() for l in pivot.layers.values()]
    _, trace = run_refiners(pivot, ['binfact-refine(iters=2)'], model, calib, opts=opts)
    assert [stage for stage, _ in trace] == ['pivot', 'binfact-refine(iters=2)']


def test_refiner_chain(toy_model, calib_set):
    pivot = run_layerwise_sweep(toy_model, calib_set, uniform(toy_model, 3))
    model, trace = run_refiners(pivot, [], toy_model, calib_set)
    assert model is pivot
    assert [stage for stage, _ in trace] == ['pivot']
    assert trace[0][1].layer_errors['blocks.0.q'] == pivot.history['blocks.0.q']['objective']

    model, trace = run_refiners(pivot, ['jointq(max_passes=2)', 'lowrank(rank=1)', 'lpcd(iters=1)'],
                                toy_model, calib_set, heldout=calib_set.sequences[:1])
    assert [stage for stage, _ in trace] == [
        'pivot', 'jointq(max_passes=2)', 'lowrank(rank=1)', 'lpcd(iters=1)']
    assert all(report.nll is not None for _, report in trace)
    assert 'jointq' in model.history and 'lpcd' in model.history
    rows = stage_table(trace)
    assert rows[0] == ('pivot', 'kl', trace[0][1].kl)
    assert len(rows) == 4 * len(trace)
    # the pivot itself is never modified
    assert pivot.layers['blocks.0.q'].lowrank is None


def test_lowrank_refiner_adds_corrections(toy_model, calib_set):
    pivot = run_layerwise_sweep(toy_model, calib_set, uniform(toy_model, 2))
    model, _ = run_refiners(pivot, ['lowrank(rank=2)'], toy_model, calib_set)
    corrected = [n for n, l in model.layers.items() if l.lowrank is not None]
    assert corrected
    again = QuantizedModel.loads(model.dumps())
    assert [n for n, l in again.layers.items() if l.lowrank is not None] == corrected
    assert again.storage_bytes() == model.storage_bytes()


def _payload_bytes(buf, dense):
    """(linear layer bytes, total bytes) of a container's payload."""
    (header_length,) = struct.unpack('<Q', buf[4:12])
    entries = container.read_header(buf)['tensors']
    total = sum(e['nbytes'] for e in entries)
    assert len(buf) == 12 + header_length + total
    return sum(e['nbytes'] for e in entries if e['name'] not in dense), total


def test_payload_matches_storage_bytes(toy_model, calib_set):
    specs = {n: LayerSpec.passthrough() for n in toy_model.graph.ids()}
    passthrough = run_layerwise_sweep(toy_model, calib_set, specs)
    assert passthrough.storage_bytes() == 4 * toy_model.graph.parameter_count()
    pivot = run_layerwise_sweep(toy_model, calib_set, uniform(toy_model, 2))
    refined, _ = run_refiners(pivot, ['lowrank(rank=2)'], toy_model, calib_set)
    assert any(l.lowrank is not None for l in refined.layers.values())
    for model in (passthrough, pivot, refined):
        layer_bytes, total = _payload_bytes(model.dumps(), model.dense)
        assert layer_bytes == model.storage_bytes()
        assert total == layer_bytes + sum(4 * v.size for v in model.dense.values())


def test_parse_refiner():
    r = parse_refiner('jointq(lam=0.1, max_passes=2)')
    assert r.params == {'lam': 0.1, 'max_passes': 2}
    assert r.describe() == 'jointq(lam=0.1,max_passes=2)'
    assert parse_refiner({'name': 'lowrank', 'params': {'rank': 1}}).describe() == 'lowrank(rank=1)'
    assert parse_refiner('lpcd(kinds=vo+qk)').params == {'kinds': 'vo+qk'}
    assert parse_refiner(r) is r
    for bad in ('awq', 'jointq(lam)', '!!'):
        with pytest.raises(ConfigError):
            parse_refiner(bad)


def test_model_containers(tmpdir, toy_model):
    path = str(tmpdir.join('dense.ocw'))
    save_model(toy_model, path)
    loaded = load_model(path)
    for name in toy_model.tensor_names():
        np.testing.assert_array_equal(loaded.weight(name), toy_model.weight(name))
    with pytest.raises(ContainerError):
        QuantizedModel.loads(b'junk')
    with pytest.raises(ContainerError):
        QuantizedModel.loads(container.dumps({'x': np.zeros(2)}))
    tensors = QuantizedModel.from_model(toy_model).tensors()
    tensors['blocks.0.extra'] = np.zeros(2)
    with pytest.raises(ContainerError):
        QuantizedModel.loads(container.dumps(tensors, {'model': toy_model.config.to_dict()}))


def test_inspect_default_model(tmpdir):
    model = ToyModel.init(ToyModelConfig(), seed=0)
    path = str(tmpdir.join('default.ocw'))
    save_model(model, path)
    graph, report = inspect(path)
    assert report['n_modules'] == 14
    assert len(report['modules']) == 14
    assert report['fp16_bytes'] == 2 * model.parameter_count()
    assert report['modules'][0]['layer_id'] == 'blocks.0.q'
    assert report['modules'][0]['format'] == 'fp'
    assert graph.ids() == model.graph.ids()


def test_split_heldout():
    corpus = TokenCorpus(np.arange(1000) % 50, 50)
    calib, heldout = split_heldout(corpus, 0.1, 30)
    assert len(calib) == 900
    assert [len(s) for s in heldout] == [30, 30, 30, 10]
    same, none = split_heldout(corpus, 0.0, 30)
    assert same is corpus and none == []
    with pytest.raises(ConfigError):
        split_heldout(corpus, 1.0, 30)


def test_pipeline_config_defaults(monkeypatch):
    monkeypatch.delenv('QDESK_SEED', raising=False)
    config = PipelineConfig.from_dict({})
    assert config.seed == 0
    assert config.quantize['bits'] == 4
    opts = config.sweep_options()
    assert opts.qep is not None and opts.lpcd is None
    monkeypatch.setenv('QDESK_SEED', '7')
    assert PipelineConfig.from_dict({}).seed == 7
    assert PipelineConfig.from_dict({'seed': 3}).seed == 3
    monkeypatch.setenv('QDESK_SEED', 'seven')
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict({})


@pytest.mark.parametrize('doc', [
    {'quantize': {'bits': 12}},
    {'calibration': {}},
    {'method': {'percdamp': 0}},
    {'refiners': ['gptq2']},
    {'refiners': [{'params': {}}]},
])
def test_pipeline_config_validation(doc):
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict(dict(doc, seed=0))


def test_pipeline_config_file_paths(tmpdir):
    path = tmpdir.join('run.json')
    path.write(json.dumps({'output': 'out.ocw', 'calib': {'corpus': 'corpus.bin'}, 'seed': 0}))
    config = PipelineConfig.from_file(str(path))
    assert config.output == os.path.join(str(tmpdir), 'out.ocw')
    assert config.calib['corpus'] == os.path.join(str(tmpdir), 'corpus.bin')
    broken = tmpdir.join('broken.json')
    broken.write('{')
    with pytest.raises(ConfigError):
        PipelineConfig.from_file(str(broken))


def test_build_specs(toy_model, calib_set):
    specs, p = build_specs(PipelineConfig.from_dict({'seed': 0}), toy_model, calib_set)
    assert p is None
    assert {s.config.label() for s in specs.values()} == {'4b/g128/sym'}
    specs, p = build_specs(PipelineConfig.from_dict({'quantize': {'bpw': 4.5}, 'seed': 0}),
                           toy_model, calib_set)
    assert p is not None and p.mode == 'act_aware'
    assert list(specs) == toy_model.graph.ids()
    specs, _ = build_specs(PipelineConfig.from_dict({'quantize': {'format': 'fp'}, 'seed': 0}),
                           toy_model, calib_set)
    assert {s.format for s in specs.values()} == {LayerFormat.FP}


def test_run_pipeline(tmpdir, small_config):
    config = PipelineConfig.from_dict({
        'model_config': small_config.to_dict(),
        'calib': {'synthetic_tokens': 3000, 'n': 2, 'length': 16},
        'quantize': {'bits': 4, 'group_size': None},
        'refiners': ['lowrank(rank=1)'],
        'seed': 5,
        'output': str(tmpdir.join('out.ocw')),
        'report': str(tmpdir.join('report.json')),
        'table': str(tmpdir.join('stages.csv')),
    })
    model, trace, report = run_pipeline(config)
    assert [stage for stage, _ in trace] == ['pivot', 'lowrank(rank=1)']
    stored = QuantizedModel.load(config.output)
    assert stored.metadata['seed'] == 5
    assert stored.storage_bytes() == model.storage_bytes()
    with io.open(config.report, encoding='utf8') as f:
        written = json.load(f)
    assert len(written['stages']) == 2
    assert written['plan'] is None
    with io.open(config.table, encoding='utf8') as f:
        lines = f.read().splitlines()
    assert lines[0] == 'stage,metric,value'
    assert lines[1].startswith('pivot,kl,')
    assert report['bpw'] == pytest.approx(model.bpw())


def test_pipeline_runs_are_reproducible(tmpdir, small_config):
    def run(name):
        config = PipelineConfig.from_dict({
            'model_config': small_config.to_dict(),
            'calib': {'synthetic_tokens': 2000, 'n': 2, 'length': 16},
            'seed': 11,
            'output': str(tmpdir.join(name)),
        })
        run_pipeline(config)
        return tmpdir.join(name).read_binary()
    assert run('a.ocw') == run('b.ocw')


def test_refiner_chain_tends_to_reduce_kl(slow, small_config):
    corpus = synthetic_corpus(3000, small_config.vocab, seed=1)
    monotone = 0
    for seed in range(30):
        model = ToyModel.init(small_config, seed)
        calib = sample_calib(corpus, 'drop_rand', 4, 16, seed)
        pivot = run_layerwise_sweep(model, calib, uniform(model, 3))
        _, trace = run_refiners(pivot, ['jointq(max_passes=3)', 'lowrank(rank=2)'], model, calib)
        kls = [report.kl for _, report in trace]
        monotone += all(b <= a for a, b in zip(kls, kls[1:]))
    assert monotone >= 21
