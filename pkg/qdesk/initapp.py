# coding: utf-8

# Copyright (c) qdesk contributors.
# Distributed under the terms of the Modified BSD License.

import json
import sys

from .args import ConfigBackedParser, add_generic_args, resolve_seed, run_command
from .pipeline import save_model
from .toymodel import ToyModel, ToyModelConfig
from .log import ConfigError
from . import log
from .utils import setup_std_streams


_description = "Write a seeded toy decoder model to an OCW container."


def main_init(args):
    try:
        overrides = json.loads(args.model_config) if args.model_config else {}
        config = ToyModelConfig.from_dict(overrides)
    except (ValueError, TypeError) as e:
        raise ConfigError("invalid --model-config: %s" % e)
    seed = resolve_seed(args)
    model = ToyModel.init(config, seed)
    n = save_model(model, args.output)
    log.info('wrote toy model (%d parameters, seed %d) to %s (%d bytes)',
             model.parameter_count(), seed, args.output, n)
    return 0


def _build_arg_parser(prog=None):
    """Creates an argument parser for the init command."""
    parser = ConfigBackedParser(
        prog=prog or 'qdesk init',
        description=_description,
        add_help=True,
        )
    add_generic_args(parser)
    parser.add_argument(
        '-o', '--output',
        default='toy.ocw',
        help="output container.")
    parser.add_argument(
        '--model-config',
        default=None,
        help='JSON object overriding toy model dimensions, e.g. \'{"L": 1, "d": 64}\'.')
    return parser


def main(args=None):
    if args is None:
        args = sys.argv[1:]
    setup_std_streams()
    arguments = _build_arg_parser().parse_args(args)
    return run_command(main_init, arguments)


if __name__ == "__main__":
    sys.exit(main())
