# coding: utf-8

# Copyright (c) qdesk contributors.
# Distributed under the terms of the Modified BSD License.

import sys
from collections import OrderedDict

from .args import (
    ConfigBackedParser, add_generic_args, add_calib_args, add_model_arg, add_out_arg,
    add_preprocess_args, add_quantize_args, resolve_seed, run_command,
)
from .autobit import read_plan
from .log import InvalidInputError
from .pipeline import (
    LayerFormat, LayerSpec, LpcdOptions, PreprocessOptions, SweepOptions, load_model,
    run_layerwise_sweep, specs_from_plan, uniform_specs,
)
from .prettyprint import pretty_print_heading, pretty_print_key_value, pretty_print_table, PrettyPrintConfig, IND
from .quant_format import QuantConfig
from .quantizing.gptq import GptqOptions
from .quantizing.qep import QepOptions
from . import log
from .utils import Printer, calib_from_args, setup_std_streams, write_json


_description = """Quantize a model layer by layer.
Every layer is quantized against statistics of its inputs in the partially
quantized model, so errors of earlier layers are taken into account. The
result is stored as an OCW container.
"""


def sweep_options(args, seed):
    """SweepOptions from the quantization and preprocessing arguments."""
    return SweepOptions(
        method=args.method,
        gptq=GptqOptions(actorder=args.actorder, percdamp=args.percdamp, scale_mode=args.scale_mode),
        scale_mode=args.scale_mode,
        qep=QepOptions(args.qep_alpha) if args.qep else None,
        lpcd=LpcdOptions(iters=args.lpcd_iters) if args.lpcd else None,
        preprocess=PreprocessOptions(args.smooth_alpha, args.rotation, args.balance, seed),
    )


def layer_specs(args, graph):
    if args.format in (LayerFormat.DBF, LayerFormat.MDBF):
        if args.plan:
            raise InvalidInputError('--plan selects uniform configs and cannot be combined with --format %s'
                                    % args.format)
        bpw = args.bpw if args.bpw is not None else 1.0
        spec = LayerSpec.binfact(args.format, bpw, args.envelope_rank)
        return OrderedDict((n, spec) for n in graph.ids())
    if args.bpw is not None:
        log.warning('--bpw applies to binary-factor formats, ignored for uniform quantization')
    if args.plan:
        return specs_from_plan(read_plan(args.plan, graph))
    return uniform_specs(graph, QuantConfig.from_group(args.bits, args.group_size, args.scheme))


def main_quantize(args):
    model = load_model(args.model)
    seed = resolve_seed(args)
    calib = calib_from_args(args, model.config.vocab, seed)
    specs = layer_specs(args, model.graph)
    pivot = run_layerwise_sweep(model, calib, specs, sweep_options(args, seed))
    pivot.metadata['seed'] = seed
    pivot.store(args.output)
    log.info('wrote quantized model (%.3f bpw, %d bytes) to %s',
             pivot.bpw(), pivot.storage_bytes(), args.output)

    layers = OrderedDict(
        (name, OrderedDict([('format', layer.describe()), ('bpw', 8.0 * layer.storage_bytes() / (
            layer.shape[0] * layer.shape[1])), ('objective', pivot.history[name]['objective'])]))
        for name, layer in pivot.layers.items())
    if args.out:
        write_json(OrderedDict([('bpw', pivot.bpw()), ('storage_bytes', pivot.storage_bytes()),
                                ('layers', layers), ('history', pivot.history)]), args.out)
        return 0
    config = PrettyPrintConfig(out=Printer(), use_color=args.color)
    pretty_print_table(('module', 'format', 'bpw', 'objective'),
                       [(n, l['format'], l['bpw'], l['objective']) for n, l in layers.items()],
                       config)
    pretty_print_heading('totals', config)
    pretty_print_key_value('bpw', '%.4f' % pivot.bpw(), IND, config)
    pretty_print_key_value('storage_bytes', pivot.storage_bytes(), IND, config)
    return 0


def _build_arg_parser(prog=None):
    """Creates an argument parser for the quantize command."""
    parser = ConfigBackedParser(
        prog=prog or 'qdesk quantize',
        description=_description,
        add_help=True,
        )
    add_generic_args(parser)
    add_model_arg(parser)
    add_quantize_args(parser)
    add_preprocess_args(parser)
    add_calib_args(parser)
    parser.add_argument(
        '-o', '--output',
        default='pivot.ocw',
        help="quantized model container.")
    add_out_arg(parser, help="write the per-layer report as JSON to this file.")
    return parser


def main(args=None):
    if args is None:
        args = sys.argv[1:]
    setup_std_streams()
    arguments = _build_arg_parser().parse_args(args)
    return run_command(main_quantize, arguments)


if __name__ == "__main__":
    sys.exit(main())
