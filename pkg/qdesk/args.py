# coding: utf-8

# Copyright (c) qdesk contributors.
# Distributed under the terms of the Modified BSD License.

import argparse
import json
import logging
import sys

from ._version import __version__
from .config import get_defaults_for_argparse, build_config, entrypoint_configurables
from .log import QdeskError, NumericalError, init_logging, set_qdesk_log_level
from . import log


class ConfigBackedParser(argparse.ArgumentParser):
    """Argument parser taking its defaults from the entry point's configurable.

    The entry point is the last word of `prog`, e.g. 'quantize' for
    'qdesk quantize'.
    """

    @property
    def entrypoint(self):
        return self.prog.split(' ')[-1]

    def parse_known_args(self, args=None, namespace=None):
        try:
            defs = get_defaults_for_argparse(self.entrypoint)
            self.set_defaults(**defs)
        except ValueError:
            pass
        return super(ConfigBackedParser, self).parse_known_args(args=args, namespace=namespace)


class LogLevelAction(argparse.Action):
    def __init__(self, option_strings, dest, default=None, **kwargs):
        # __call__ is not called if option not given:
        level = getattr(logging, default or 'INFO')
        init_logging(level=level)
        set_qdesk_log_level(level)
        super(LogLevelAction, self).__init__(option_strings, dest, default=default, **kwargs)

    def __call__(self, parser, namespace, values, option_string=None):
        setattr(namespace, self.dest, values)
        level = getattr(logging, values)
        set_qdesk_log_level(level, True)


def modify_config_for_print(config):
    output = {}
    for k, v in config.items():
        if isinstance(v, dict):
            output[k] = modify_config_for_print(v)
            if not output[k]:
                output[k] = '{}'
        else:
            output[k] = json.dumps(v)
    return output


class ConfigHelpAction(argparse.Action):
    def __init__(self, option_strings, dest, help=None):
        super(ConfigHelpAction, self).__init__(
            option_strings, dest, nargs=0, help=help)

    def __call__(self, parser, namespace, values, option_string=None):
        from .prettyprint import pretty_print_dict, PrettyPrintConfig

        entrypoint = parser.prog.split(' ')[-1]
        header = entrypoint_configurables[entrypoint].__name__
        config = build_config(entrypoint, True)
        pretty_print_dict(
            {
                header: modify_config_for_print(config),
            },
            config=PrettyPrintConfig(out=sys.stderr)
        )
        sys.exit(1)


def add_generic_args(parser):
    """Adds a set of arguments common to all qdesk commands.
    """
    parser.add_argument(
        '--version',
        action="version",
        version="%(prog)s " + __version__)
    parser.add_argument(
        '--config',
        help="list the valid config keys and their current effective values",
        action=ConfigHelpAction,
    )
    parser.add_argument(
        '--log-level',
        default='INFO',
        choices=('DEBUG', 'INFO', 'WARN', 'ERROR', 'CRITICAL'),
        help="set the log level by name.",
        action=LogLevelAction,
    )
    parser.add_argument(
        '--no-color',
        dest='color',
        action='store_false',
        help="do not colorize terminal reports.")
    parser.add_argument(
        '--seed',
        type=int,
        default=None,
        help="seed for sampling, initialization and rotations "
             "(default: QDESK_SEED or 0).")


def add_model_arg(parser, help="model container (OCW file)."):
    parser.add_argument('model', help=help)


def add_out_arg(parser, help="write the report as JSON to this file."):
    parser.add_argument('--out', default=None, help=help)


def add_calib_args(parser):
    """Arguments selecting the corpus and how calibration windows are cut."""
    calib = parser.add_argument_group(
        title='calibration',
        description='Where calibration tokens come from.')
    calib.add_argument(
        '--corpus',
        default=None,
        help="token corpus file; a seeded synthetic corpus is used when omitted.")
    calib.add_argument(
        '--corpus-mode',
        choices=('binary', 'text'),
        help="binary: 32-bit little-endian token ids; text: bytes are token ids.")
    calib.add_argument(
        '--calib',
        default=None,
        help="a calibration set written by `qdesk calib`; overrides the corpus options.")
    calib.add_argument(
        '--strategy',
        choices=('concat_chunk', 'drop_head', 'drop_rand'),
        help="how calibration windows are cut from the corpus.")
    calib.add_argument(
        '-n', '--n-samples',
        type=int,
        help="number of calibration sequences.")
    calib.add_argument(
        '--length',
        type=int,
        help="tokens per calibration sequence.")
    calib.add_argument(
        '--synthetic-tokens',
        type=int,
        help="size of the synthetic corpus.")


def add_preprocess_args(parser):
    pre = parser.add_argument_group(
        title='preprocessing',
        description='Equivalence transforms applied before quantization.')
    pre.add_argument(
        '--smooth-alpha',
        type=float,
        help="migration strength of channel smoothing.")
    pre.add_argument(
        '--rotation',
        choices=('none', 'random', 'hadamard'),
        help="input-side rotation.")
    pre.add_argument(
        '--balance',
        choices=('none', 'l1', 'l2'),
        help="Sinkhorn balancing norm.")


def add_quantize_args(parser):
    quant = parser.add_argument_group(
        title='quantization',
        description='Storage format and base quantizer.')
    quant.add_argument(
        '--plan',
        default=None,
        help="mixed-precision plan written by `qdesk plan --emit`.")
    quant.add_argument(
        '--bits',
        type=int,
        help="bit width of uniform quantization.")
    quant.add_argument(
        '--group-size',
        type=_group_size,
        help="group size along the input axis, or 'channel' for per-channel grids.")
    quant.add_argument(
        '--scheme',
        choices=('symmetric', 'asymmetric'),
        help="uniform quantization scheme.")
    quant.add_argument(
        '--format',
        dest='format',
        choices=('uniform', 'dbf', 'mdbf'),
        default='uniform',
        help="layer storage format.")
    quant.add_argument(
        '--bpw',
        type=float,
        default=None,
        help="bits per weight of binary-factor formats.")
    quant.add_argument(
        '--envelope-rank',
        type=int,
        help="envelope rank of MDBF layers.")
    quant.add_argument(
        '--method',
        choices=('rtn', 'gptq'),
        help="base quantizer.")
    quant.add_argument(
        '--scale-mode',
        choices=('minmax', 'mse_grid'),
        help="how grid scales are calibrated.")
    quant.add_argument(
        '--mse-grid',
        dest='scale_mode',
        action='store_const',
        const='mse_grid',
        help="calibrate grid scales by searching for the lowest squared error.")
    quant.add_argument(
        '--actorder',
        action='store_true',
        help="process inputs by descending Hessian diagonal in GPTQ.")
    quant.add_argument(
        '--percdamp',
        type=float,
        help="GPTQ dampening fraction.")
    quant.add_argument(
        '--qep',
        dest='qep',
        action='store_true',
        help="correct quantization targets for upstream error.")
    quant.add_argument(
        '--no-qep',
        dest='qep',
        action='store_false',
        help="quantize the full-precision weights as they are.")
    quant.add_argument(
        '--qep-alpha',
        type=float,
        help="strength of the upstream error correction.")
    quant.add_argument(
        '--lpcd',
        action='store_true',
        help="coordinate coupled layers of each block after they are quantized.")
    quant.add_argument(
        '--lpcd-iters',
        type=positive_int,
        help="coordinate descent sweeps per coupled submodule.")


def _group_size(value):
    if value in ('channel', 'none'):
        return None
    try:
        g = int(value)
    except ValueError:
        raise argparse.ArgumentTypeError('group size must be an integer or "channel"')
    if g < 1:
        raise argparse.ArgumentTypeError('group size must be positive')
    return g


def positive_int(value):
    try:
        n = int(value)
    except ValueError:
        raise argparse.ArgumentTypeError('%r is not an integer' % (value,))
    if n < 1:
        raise argparse.ArgumentTypeError('must be at least 1, got %d' % n)
    return n


def resolve_seed(arguments):
    from .pipeline import default_seed
    return arguments.seed if arguments.seed is not None else default_seed()


def exit_code(error):
    """Process exit code for an exception raised by a command."""
    if isinstance(error, QdeskError):
        return error.exit_code
    if isinstance(error, OSError):
        return 3
    if isinstance(error, (ArithmeticError, )):
        return NumericalError.exit_code
    return 1


def run_command(func, arguments):
    """Run `func(arguments)`, mapping qdesk and file errors to exit codes."""
    try:
        return func(arguments)
    except (QdeskError, OSError, ArithmeticError) as e:
        log.error('%s', e)
        log.debug('details', exc_info=True)
        return exit_code(e)
