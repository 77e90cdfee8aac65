# coding: utf-8

# Copyright (c) qdesk contributors.
# Distributed under the terms of the Modified BSD License.

import sys

from .args import (
    ConfigBackedParser, add_generic_args, add_calib_args, add_model_arg, add_out_arg,
    resolve_seed, run_command,
)
from .log import InvalidInputError
from .metrics import fidelity_report
from .pipeline import load_model, write_stage_table
from .prettyprint import pretty_print_fidelity, pretty_print_heading, PrettyPrintConfig
from .utils import Printer, calib_and_heldout, setup_std_streams, write_json


_description = """Measure how closely a quantized model follows the full-precision one.
Reports the next-token KL divergence, the cosine distance of hidden states,
the student's entropy and, on held-out tokens, its negative log-likelihood.
"""


def main_eval(args):
    student = load_model(args.model)
    teacher = load_model(args.teacher)
    if student.config != teacher.config:
        raise InvalidInputError('student and teacher have different model configurations')
    seed = resolve_seed(args)
    calib, heldout = calib_and_heldout(args, teacher.config.vocab, seed, args.heldout_fraction)
    report = fidelity_report(teacher, student, calib, heldout)
    if args.table:
        write_stage_table(args.table, [(args.stage, report)])
    if args.out:
        write_json(report.to_dict(), args.out)
    else:
        config = PrettyPrintConfig(out=Printer(), use_color=args.color)
        pretty_print_heading('fidelity of %s' % args.model, config)
        pretty_print_fidelity(report.to_dict(), config)
    return 0


def _build_arg_parser(prog=None):
    """Creates an argument parser for the eval command."""
    parser = ConfigBackedParser(
        prog=prog or 'qdesk eval',
        description=_description,
        add_help=True,
        )
    add_generic_args(parser)
    add_model_arg(parser, help="model container to evaluate.")
    parser.add_argument(
        '--teacher',
        required=True,
        help="full-precision reference model.")
    parser.add_argument(
        '--heldout-fraction',
        type=float,
        help="share of the corpus tail used for held-out likelihood.")
    parser.add_argument(
        '--table',
        default=None,
        help="write a stage/metric/value CSV table to this file.")
    parser.add_argument(
        '--stage',
        default='eval',
        help="stage name used in the table.")
    add_calib_args(parser)
    add_out_arg(parser)
    return parser


def main(args=None):
    if args is None:
        args = sys.argv[1:]
    setup_std_streams()
    arguments = _build_arg_parser().parse_args(args)
    return run_command(main_eval, arguments)


if __name__ == "__main__":
    sys.exit(main())
