# coding: utf-8

# Copyright (c) qdesk contributors.
# Distributed under the terms of the Modified BSD License.

import sys

from .args import ConfigBackedParser, add_generic_args, run_command
from .pipeline import PipelineConfig, run_pipeline
from .prettyprint import pretty_print_heading, pretty_print_key_value, pretty_print_stage_trace, PrettyPrintConfig, IND
from . import log
from .utils import Printer, setup_std_streams


_description = """Run the whole pipeline from one JSON config:
calibration, planning, the layer-wise sweep, refiners and evaluation.
The config is validated before any work starts.
"""


def main_run(args):
    config = PipelineConfig.from_file(args.config_file)
    if args.seed is not None:
        config.seed = args.seed
    if args.output:
        config.output = args.output
    model, trace, report = run_pipeline(config)
    log.info('wrote %s', config.output)
    printer = PrettyPrintConfig(out=Printer(), use_color=args.color)
    pretty_print_stage_trace([(stage, r.to_dict()) for stage, r in trace], printer)
    pretty_print_heading('output', printer)
    pretty_print_key_value('path', config.output, IND, printer)
    pretty_print_key_value('bpw', '%.4f' % report['bpw'], IND, printer)
    return 0


def _build_arg_parser(prog=None):
    """Creates an argument parser for the run command."""
    parser = ConfigBackedParser(
        prog=prog or 'qdesk run',
        description=_description,
        add_help=True,
        )
    add_generic_args(parser)
    parser.add_argument(
        'config_file',
        help="pipeline config (JSON).")
    parser.add_argument(
        '-o', '--output',
        default=None,
        help="override the output container of the config.")
    return parser


def main(args=None):
    if args is None:
        args = sys.argv[1:]
    setup_std_streams()
    arguments = _build_arg_parser().parse_args(args)
    return run_command(main_run, arguments)


if __name__ == "__main__":
    sys.exit(main())
