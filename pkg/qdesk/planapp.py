# coding: utf-8

# Copyright (c) qdesk contributors.
# Distributed under the terms of the Modified BSD License.

import sys

from .args import (
    ConfigBackedParser, add_generic_args, add_calib_args, add_model_arg, resolve_seed, run_command,
)
from .autobit import ErrorMode, budget_from_bpw, plan_model, plan_to_dict, write_plan
from .pipeline import load_model
from .prettyprint import pretty_print_plan, PrettyPrintConfig
from . import log
from .utils import Printer, calib_from_args, setup_std_streams


_description = """Choose per-module bit widths and group sizes under a bits-per-weight budget.
The plan minimizes the summed predicted error of all modules while the
total storage stays within the budget.
"""


def main_plan(args):
    model = load_model(args.model)
    budget = budget_from_bpw(model.graph, args.bpw)
    calib = None
    if ErrorMode.ALIASES.get(args.mode, args.mode) == ErrorMode.ACT_AWARE:
        calib = calib_from_args(args, model.config.vocab, resolve_seed(args))
    p = plan_model(model, budget, args.mode, args.solver, calib)
    log.info('plan uses %d of %d bytes (%.3f bpw)', p.total_cost, budget, p.achieved_bpw)
    if args.emit:
        write_plan(p, args.emit)
    else:
        pretty_print_plan(plan_to_dict(p), PrettyPrintConfig(out=Printer(), use_color=args.color))
    return 0


def _build_arg_parser(prog=None):
    """Creates an argument parser for the plan command."""
    parser = ConfigBackedParser(
        prog=prog or 'qdesk plan',
        description=_description,
        add_help=True,
        )
    add_generic_args(parser)
    add_model_arg(parser)
    parser.add_argument(
        '--bpw',
        type=float,
        help="target average bits per weight (at least 2).")
    parser.add_argument(
        '--mode',
        choices=('naive', 'act', 'act_aware'),
        help="naive: weight-space error; act: weighted by input activation energy.")
    parser.add_argument(
        '--solver',
        choices=('exhaustive', 'dp', 'branch_bound'),
        help="knapsack solver.")
    parser.add_argument(
        '--emit',
        default=None,
        help="write the plan as JSON to this file instead of printing it.")
    add_calib_args(parser)
    return parser


def main(args=None):
    if args is None:
        args = sys.argv[1:]
    setup_std_streams()
    arguments = _build_arg_parser().parse_args(args)
    return run_command(main_plan, arguments)


if __name__ == "__main__":
    sys.exit(main())
