# coding: utf-8

# Copyright (c) qdesk contributors.
# Distributed under the terms of the Modified BSD License.

import sys

from .args import (
    ConfigBackedParser, add_generic_args, add_calib_args, add_model_arg, resolve_seed, run_command,
)
from .calib import write_calib_set
from .pipeline import load_model
from . import log
from .utils import calib_from_args, setup_std_streams


_description = """Sample a calibration set of token sequences.
Windows are cut from a corpus file, or from a seeded synthetic
corpus when no file is given.
"""


def main_calib(args):
    model = load_model(args.model)
    if model.config.T_max < args.length:
        log.warning('sequence length %d exceeds the model context of %d tokens',
                    args.length, model.config.T_max)
    calib = calib_from_args(args, model.config.vocab, resolve_seed(args))
    write_calib_set(calib, args.output)
    log.info('wrote %d sequences of %d tokens (%s, seed %d) to %s',
             calib.n, calib.length, calib.strategy, calib.seed, args.output)
    return 0


def _build_arg_parser(prog=None):
    """Creates an argument parser for the calib command."""
    parser = ConfigBackedParser(
        prog=prog or 'qdesk calib',
        description=_description,
        add_help=True,
        )
    add_generic_args(parser)
    add_model_arg(parser, help="model container; fixes the vocabulary.")
    add_calib_args(parser)
    parser.add_argument(
        '-o', '--output',
        default='calib.json',
        help="where to write the calibration set.")
    return parser


def main(args=None):
    if args is None:
        args = sys.argv[1:]
    setup_std_streams()
    arguments = _build_arg_parser().parse_args(args)
    return run_command(main_calib, arguments)


if __name__ == "__main__":
    sys.exit(main())
