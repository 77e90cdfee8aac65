# coding: utf-8

# Copyright (c) qdesk contributors.
# Distributed under the terms of the Modified BSD License.

import sys

from .args import ConfigBackedParser, add_generic_args, add_model_arg, add_out_arg, run_command
from .pipeline import inspect
from .prettyprint import pretty_print_inspect, PrettyPrintConfig
from .utils import Printer, setup_std_streams, write_json


_description = "List the quantizable modules of a stored model with their sizes."


def main_inspect(args):
    graph, report = inspect(args.model)
    if args.out:
        write_json(report, args.out)
    else:
        pretty_print_inspect(report, PrettyPrintConfig(out=Printer(), use_color=args.color))
    return 0


def _build_arg_parser(prog=None):
    """Creates an argument parser for the inspect command."""
    parser = ConfigBackedParser(
        prog=prog or 'qdesk inspect',
        description=_description,
        add_help=True,
        )
    add_generic_args(parser)
    add_model_arg(parser)
    add_out_arg(parser)
    return parser


def main(args=None):
    if args is None:
        args = sys.argv[1:]
    setup_std_streams()
    arguments = _build_arg_parser().parse_args(args)
    return run_command(main_inspect, arguments)


if __name__ == "__main__":
    sys.exit(main())
