# coding: utf-8

# Copyright (c) qdesk contributors.
# Distributed under the terms of the Modified BSD License.

import sys

from .args import (
    ConfigBackedParser, add_generic_args, add_calib_args, add_model_arg, add_out_arg,
    add_preprocess_args, resolve_seed, run_command,
)
from .pipeline import PreprocessOptions, load_model, preprocess_report
from .prettyprint import pretty_print_table, PrettyPrintConfig
from .utils import Printer, calib_from_args, setup_std_streams, write_json


_description = """Report how equivalence transforms change each layer.
Shows the incoherence of every weight before and after channel smoothing,
rotation and balancing, and how exactly the transformed layer reproduces
the original.
"""


def main_preprocess(args):
    model = load_model(args.model)
    seed = resolve_seed(args)
    calib = calib_from_args(args, model.config.vocab, seed)
    opts = PreprocessOptions(args.smooth_alpha, args.rotation, args.balance, seed)
    rows = preprocess_report(model, calib, opts)
    if args.out:
        write_json(rows, args.out)
        return 0
    config = PrettyPrintConfig(out=Printer(), use_color=args.color)
    colors = [config.GOOD if r['incoherence_after'] <= r['incoherence_before'] else config.BAD
              for r in rows.values()]
    pretty_print_table(
        ('module', 'mu before', 'mu after', 'max rel err'),
        [(name, r['incoherence_before'], r['incoherence_after'], r['max_rel_error'])
         for name, r in rows.items()],
        config, colors)
    return 0


def _build_arg_parser(prog=None):
    """Creates an argument parser for the preprocess command."""
    parser = ConfigBackedParser(
        prog=prog or 'qdesk preprocess',
        description=_description,
        add_help=True,
        )
    add_generic_args(parser)
    add_model_arg(parser)
    add_preprocess_args(parser)
    add_calib_args(parser)
    add_out_arg(parser)
    return parser


def main(args=None):
    if args is None:
        args = sys.argv[1:]
    setup_std_streams()
    arguments = _build_arg_parser().parse_args(args)
    return run_command(main_preprocess, arguments)


if __name__ == "__main__":
    sys.exit(main())
