# coding: utf-8

# Copyright (c) qdesk contributors.
# Distributed under the terms of the Modified BSD License.

import sys

from .args import ConfigBackedParser, add_generic_args, add_model_arg, run_command
from .pipeline import load_model, save_model
from . import log
from .utils import setup_std_streams


_description = """Write the effective weights of a quantized model as a plain f32 container.
The result loads without any quantized decoders.
"""


def main_export(args):
    model = load_model(args.model)
    n = save_model(model, args.output)
    log.info('exported %d tensors to %s (%d bytes)', len(model.tensor_names()), args.output, n)
    return 0


def _build_arg_parser(prog=None):
    """Creates an argument parser for the export command."""
    parser = ConfigBackedParser(
        prog=prog or 'qdesk export',
        description=_description,
        add_help=True,
        )
    add_generic_args(parser)
    add_model_arg(parser, help="quantized model container.")
    parser.add_argument(
        '-o', '--output',
        required=True,
        help="dense output container.")
    return parser


def main(args=None):
    if args is None:
        args = sys.argv[1:]
    setup_std_streams()
    arguments = _build_arg_parser().parse_args(args)
    return run_command(main_export, arguments)


if __name__ == "__main__":
    sys.exit(main())
