# -*- coding: utf-8 -*-

# Copyright (c) qdesk contributors.
# Distributed under the terms of the Modified BSD License.

from collections import namedtuple
import pprint
import sys

import colorama


# Indentation offset in pretty-print
IND = "  "

ColoredConstants = namedtuple('ColoredConstants', (
    'GOOD',
    'BAD',
    'INFO',
    'RESET',
))


col_const = {
    True: ColoredConstants(
        GOOD  = colorama.Fore.GREEN,
        BAD   = colorama.Fore.RED,
        INFO  = colorama.Fore.BLUE + colorama.Style.BRIGHT,
        RESET = colorama.Style.RESET_ALL,
    ),

    False: ColoredConstants(
        GOOD  = '',
        BAD   = '',
        INFO  = '',
        RESET = '',
    )
}


class PrettyPrintConfig:
    def __init__(self, out=None, use_color=True):
        # None means whatever sys.stdout is at write time
        self._out = out
        self.use_color = use_color

    @property
    def out(self):
        return self._out if self._out is not None else sys.stdout

    @property
    def GOOD(self):
        return col_const[self.use_color].GOOD

    @property
    def BAD(self):
        return col_const[self.use_color].BAD

    @property
    def INFO(self):
        return col_const[self.use_color].INFO

    @property
    def RESET(self):
        return col_const[self.use_color].RESET


DefaultConfig = PrettyPrintConfig()


def format_value(v):
    "Format simple value for printing. Floats get 6 significant digits, the rest uses pprint."
    if isinstance(v, float):
        return '%.6g' % v
    if isinstance(v, str):
        return v
    return pprint.pformat(v)


def pretty_print_key(k, prefix, config):
    config.out.write("%s%s:\n" % (prefix, k))


def pretty_print_key_value(k, v, prefix, config):
    config.out.write("%s%s: %s\n" % (prefix, k, v))


def pretty_print_heading(text, config=DefaultConfig):
    config.out.write("%s## %s%s\n" % (config.INFO, text, config.RESET))


def pretty_print_item(k, v, prefix="", config=DefaultConfig):
    if isinstance(v, dict):
        pretty_print_key(k, prefix, config)
        pretty_print_dict(v, (), prefix+IND, config)
    elif isinstance(v, list) and v and isinstance(v[0], (dict, list)):
        pretty_print_key(k, prefix, config)
        pretty_print_list(v, prefix+IND, config)
    else:
        vstr = format_value(v)
        if "\n" in vstr:
            pretty_print_key(k, prefix, config)
            for line in vstr.splitlines(False):
                config.out.write("%s%s\n" % (prefix+IND, line))
        else:
            pretty_print_key_value(k, vstr, prefix, config)


def pretty_print_list(li, prefix="", config=DefaultConfig):
    for i, v in enumerate(li):
        pretty_print_item('[%d]' % i, v, prefix, config)


def pretty_print_dict(d, exclude_keys=(), prefix="", config=DefaultConfig):
    """Pretty-print a dict without wrapper keys

    Instead of {'key': 'value'}, do

        key: value
        key:
          long
          value

    """
    for k in sorted(set(d) - set(exclude_keys)):
        pretty_print_item(k, d[k], prefix, config)


def pretty_print_table(headers, rows, config=DefaultConfig, colors=None):
    """Left-aligned text table; `colors` optionally gives a color prefix per row."""
    cells = [[format_value(c) for c in row] for row in rows]
    widths = [len(h) for h in headers]
    for row in cells:
        widths = [max(w, len(c)) for w, c in zip(widths, row)]
    fmt = "  ".join("%%-%ds" % w for w in widths)
    config.out.write("%s%s%s\n" % (config.INFO, (fmt % tuple(headers)).rstrip(), config.RESET))
    for i, row in enumerate(cells):
        color = colors[i] if colors else ''
        reset = config.RESET if color else ''
        config.out.write("%s%s%s\n" % (color, (fmt % tuple(row)).rstrip(), reset))


def pretty_print_inspect(report, config=DefaultConfig):
    pretty_print_heading("model", config)
    pretty_print_dict(report['config'], (), IND, config)
    pretty_print_heading("%d quantizable modules" % report['n_modules'], config)
    rows = [(m['layer_id'], '%dx%d' % tuple(m['shape']), m['params'], m['format'], m['bytes'],
             m['bpw']) for m in report['modules']]
    pretty_print_table(('module', 'shape', 'params', 'format', 'bytes', 'bpw'), rows, config)
    pretty_print_heading("totals", config)
    for key in ('parameters', 'quantizable_parameters', 'fp16_bytes', 'quantized_bytes'):
        pretty_print_key_value(key, report[key], IND, config)


def pretty_print_plan(plan_dict, config=DefaultConfig):
    pretty_print_heading("plan (%s)" % (plan_dict.get('mode') or 'given'), config)
    rows = [(name, c['bits'], c['group_size'] or 'channel', c['cost_bytes'], c['err'])
            for name, c in plan_dict['assignment'].items()]
    pretty_print_table(('module', 'bits', 'group', 'bytes', 'err'), rows, config)
    for key in ('budget_bytes', 'total_cost', 'total_err', 'achieved_bpw'):
        pretty_print_key_value(key, format_value(plan_dict[key]), IND, config)


def pretty_print_fidelity(report, config=DefaultConfig):
    """Print one FidelityReport (as a dict)."""
    for key in ('kl', 'hidden_cosine_mean', 'entropy', 'nll', 'teacher_nll'):
        if report.get(key) is not None:
            pretty_print_key_value(key, format_value(report[key]), IND, config)
    if report.get('layer_errors'):
        pretty_print_key('layer objectives', IND, config)
        for name, err in report['layer_errors'].items():
            pretty_print_key_value(name, format_value(err), IND*2, config)


def pretty_print_stage_trace(stages, config=DefaultConfig):
    """Stage table; a stage is green when its KL did not increase, red otherwise."""
    rows = []
    colors = []
    previous = None
    for stage, report in stages:
        rows.append((stage, report['kl'], report['hidden_cosine_mean'], report['entropy'],
                     report['nll'] if report.get('nll') is not None else '-'))
        if previous is None:
            colors.append('')
        else:
            colors.append(config.GOOD if report['kl'] <= previous else config.BAD)
        previous = report['kl']
    pretty_print_table(('stage', 'kl', 'hidden_cos', 'entropy', 'nll'), rows, config, colors)
