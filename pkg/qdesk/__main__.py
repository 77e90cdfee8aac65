# coding: utf-8

# Copyright (c) qdesk contributors.
# Distributed under the terms of the Modified BSD License.

import sys

from ._version import __version__

COMMANDS = ["init", "inspect", "calib", "plan", "preprocess", "quantize", "refine", "eval",
            "export", "run"]
HELP_MESSAGE_VERBOSE = ("Usage: qdesk [OPTIONS]\n\n"
                       "OPTIONS: -h, --version, --config, COMMANDS{%s}\n\n"
                       "Examples: qdesk --version\n"
                       "          qdesk init -o toy.ocw\n"
                       "          qdesk plan toy.ocw --bpw 3.5 --emit plan.json\n"
                       "          qdesk quantize toy.ocw --plan plan.json -o pivot.ocw\n"
                       "          qdesk refine pivot.ocw --teacher toy.ocw -r jointq -r 'lowrank(r=2)'\n"
                       "          qdesk run pipeline.json\n" % ", ".join(COMMANDS))


def main_dispatch(args=None):
    if args is None:
        args = sys.argv[1:]
    if len(args) < 1:
        sys.exit("Option missing.\n\n%s" % HELP_MESSAGE_VERBOSE)

    cmd = args[0]
    args = args[1:]

    if cmd == "init":
        from qdesk.initapp import main
    elif cmd == "inspect":
        from qdesk.inspectapp import main
    elif cmd == "calib":
        from qdesk.calibapp import main
    elif cmd == "plan":
        from qdesk.planapp import main
    elif cmd == "preprocess":
        from qdesk.preprocessapp import main
    elif cmd == "quantize":
        from qdesk.quantizeapp import main
    elif cmd == "refine":
        from qdesk.refineapp import main
    elif cmd == "eval":
        from qdesk.evalapp import main
    elif cmd == "export":
        from qdesk.exportapp import main
    elif cmd == "run":
        from qdesk.runapp import main
    else:
        if cmd == '--version':
            sys.exit(__version__)
        if cmd == '-h' or cmd == '--help':
            sys.exit(HELP_MESSAGE_VERBOSE)
        if cmd == '--config':
            # List all possible config options:
            from .args import modify_config_for_print
            from .config import build_config, entrypoint_configurables
            from .prettyprint import pretty_print_dict, PrettyPrintConfig
            print('All available config options, and their current values:\n',
                  file=sys.stderr)
            for entrypoint, cls in entrypoint_configurables.items():
                config = build_config(entrypoint, True)
                pretty_print_dict({
                        cls.__name__: modify_config_for_print(config),
                    },
                    config=PrettyPrintConfig(out=sys.stderr)
                )
                print('', file=sys.stderr)
            sys.exit(1)
        else:
            sys.exit("Unrecognized command '%s'\n\n%s." %
                     (cmd, HELP_MESSAGE_VERBOSE))
    return main(args)


if __name__ == "__main__":
    # This is triggered by "python -m qdesk <args>"
    sys.exit(main_dispatch())
