# coding: utf-8

# Copyright (c) qdesk contributors.
# Distributed under the terms of the Modified BSD License.

import sys
from collections import OrderedDict

from .args import (
    ConfigBackedParser, add_generic_args, add_calib_args, add_model_arg, add_out_arg,
    positive_int, resolve_seed, run_command,
)
from .log import InvalidInputError
from .pipeline import (
    QuantizedModel, SweepOptions, load_model, parse_refiner, run_refiners, REFINERS,
)
from .prettyprint import pretty_print_stage_trace, PrettyPrintConfig
from .quantizing.gptq import GptqOptions
from . import log
from .utils import Printer, calib_and_heldout, setup_std_streams, write_json


_description = """Improve a quantized model with a chain of refiners.
Each refiner takes the complete model and returns an improved one; the
fidelity to the full-precision model is measured after every stage.
Available refiners: %s. Parameters are given in parentheses,
e.g. 'lowrank(r=2)'.
""" % ', '.join(REFINERS)


def refiner_chain(args):
    """Refiners named with -r, preceded by jointq when --jointq is given."""
    chain = []
    if args.jointq:
        params = OrderedDict()
        if args.lam is not None:
            params['lam'] = args.lam
        if args.passes is not None:
            params['max_passes'] = args.passes
        chain.append(parse_refiner({'name': 'jointq', 'params': params}))
    elif args.lam is not None or args.passes is not None:
        raise InvalidInputError('--lambda and --passes need --jointq')
    chain.extend(parse_refiner(r) for r in args.refiner or ())
    return chain


def main_refine(args):
    pivot = QuantizedModel.load(args.model)
    teacher = load_model(args.teacher)
    if teacher.config != pivot.config:
        log.warning('teacher and quantized model have different configurations')
    refiners = refiner_chain(args)
    seed = resolve_seed(args)
    calib, heldout = calib_and_heldout(args, teacher.config.vocab, seed, args.heldout_fraction)
    opts = SweepOptions(
        method=args.method,
        gptq=GptqOptions(percdamp=args.percdamp, scale_mode=args.scale_mode),
        scale_mode=args.scale_mode,
    )
    model, trace = run_refiners(pivot, refiners, teacher, calib, heldout, opts)
    model.metadata['seed'] = seed
    model.store(args.output)
    stages = [(stage, report.to_dict()) for stage, report in trace]
    if args.out:
        write_json([OrderedDict([('stage', s), ('metrics', r)]) for s, r in stages], args.out)
    else:
        pretty_print_stage_trace(stages, PrettyPrintConfig(out=Printer(), use_color=args.color))
    return 0


def _build_arg_parser(prog=None):
    """Creates an argument parser for the refine command."""
    parser = ConfigBackedParser(
        prog=prog or 'qdesk refine',
        description=_description,
        add_help=True,
        )
    add_generic_args(parser)
    add_model_arg(parser, help="quantized model container to refine.")
    parser.add_argument(
        '--teacher',
        required=True,
        help="full-precision model the quantized one was made from.")
    parser.add_argument(
        '-r', '--refiner',
        action='append',
        help="refiner to apply; repeat for a chain, applied in order.")
    jointq = parser.add_argument_group(
        title='jointq',
        description='Shorthand for a leading jointq refiner.')
    jointq.add_argument(
        '--jointq',
        action='store_true',
        help="run jointq before the refiners given with -r.")
    jointq.add_argument(
        '--lambda',
        dest='lam',
        type=float,
        help="weight of the proximity term to the starting codes.")
    jointq.add_argument(
        '--passes',
        type=positive_int,
        help="maximum number of local search passes.")
    parser.add_argument(
        '--method',
        choices=('rtn', 'gptq'),
        help="quantizer used when refiners re-project weights.")
    parser.add_argument(
        '--scale-mode',
        choices=('minmax', 'mse_grid'),
        help="how grid scales are calibrated when re-projecting.")
    parser.add_argument(
        '--heldout-fraction',
        type=float,
        help="share of the corpus tail used for held-out likelihood.")
    add_calib_args(parser)
    parser.add_argument(
        '-o', '--output',
        default='refined.ocw',
        help="refined model container.")
    add_out_arg(parser, help="write the stage trace as JSON to this file.")
    return parser


def main(args=None):
    if args is None:
        args = sys.argv[1:]
    setup_std_streams()
    arguments = _build_arg_parser().parse_args(args)
    return run_command(main_refine, arguments)


if __name__ == "__main__":
    sys.exit(main())
