# coding: utf-8

# Copyright (c) qdesk contributors.
# Distributed under the terms of the Modified BSD License.

import os

from traitlets import Enum, Integer, Float, Bool, HasTraits
from traitlets.config.loader import JSONFileConfigLoader, ConfigFileNotFound

from .autobit import Solver
from .calib import Strategy
from .quant_format import Scheme
from .quantizing.layerwise import Method
from .quantizing.rtn import ScaleMode


CONFIG_BASENAME = 'qdesk_config'


def config_path():
    """Directories searched for config files, highest priority first."""
    return [os.getcwd(), os.path.join(os.path.expanduser('~'), '.qdesk')]


class QdeskConfigurable(HasTraits):

    def configured_traits(self, cls):
        traits = cls.class_own_traits(config=True)
        c = {}
        for name, _ in traits.items():
            c[name] = getattr(self, name)
        return c


_config_cache = {}
def config_instance(cls):
    if cls in _config_cache:
        return _config_cache[cls]
    instance = _config_cache[cls] = cls()
    return instance


def _load_config_files(basefilename, path=None):
    """Load config files (json) by filename and path.

    yield each config object in turn.
    """

    if not isinstance(path, list):
        path = [path]
    for path in path[::-1]:
        # path list is in descending priority order, so load files backwards:
        loader = JSONFileConfigLoader(basefilename+'.json', path=path)
        config = None
        try:
            config = loader.load_config()
        except ConfigFileNotFound:
            pass
        if config:
            yield config


def recursive_update(target, new, include_none):
    """Recursively update one dictionary using another.

    None values will delete their keys.
    """
    for k, v in new.items():
        if isinstance(v, dict):
            if k not in target:
                target[k] = {}
            recursive_update(target[k], v, include_none)
            if not include_none and not target[k]:
                # Prune empty subdicts
                del target[k]

        elif not include_none and v is None:
            target.pop(k, None)

        else:
            target[k] = v


def build_config(entrypoint, include_none=False):
    if entrypoint not in entrypoint_configurables:
        raise ValueError('Config for entrypoint name %r is not defined! Accepted values are %r.' % (
            entrypoint, list(entrypoint_configurables.keys())
        ))

    disk_config = {}
    for c in _load_config_files(CONFIG_BASENAME, path=config_path()):
        recursive_update(disk_config, c, include_none)

    config = {}
    configurable = entrypoint_configurables[entrypoint]
    for c in reversed(configurable.mro()):
        if issubclass(c, QdeskConfigurable):
            recursive_update(config, config_instance(c).configured_traits(c), include_none)
            if (c.__name__ in disk_config):
                recursive_update(config, disk_config[c.__name__], include_none)

    return config


def get_defaults_for_argparse(entrypoint):
    return build_config(entrypoint)


class Global(QdeskConfigurable):

    log_level = Enum(
        ('DEBUG', 'INFO', 'WARN', 'ERROR', 'CRITICAL'),
        'INFO',
        help="Set the log level by name.",
    ).tag(config=True)

    color = Bool(
        True,
        help="colorize terminal reports.",
    ).tag(config=True)

    seed = Integer(
        None,
        allow_none=True,
        help="seed for sampling, initialization and rotations "
             "(falls back to QDESK_SEED, then 0).",
    ).tag(config=True)


class _Calibrating(Global):

    strategy = Enum(
        Strategy.ALL,
        Strategy.DROP_RAND,
        help="how calibration windows are cut from the corpus.",
    ).tag(config=True)

    n_samples = Integer(
        16,
        help="number of calibration sequences.",
    ).tag(config=True)

    length = Integer(
        64,
        help="tokens per calibration sequence.",
    ).tag(config=True)

    corpus_mode = Enum(
        ('binary', 'text'),
        'binary',
        help="corpus file layout: 32-bit token ids or raw bytes.",
    ).tag(config=True)

    synthetic_tokens = Integer(
        20000,
        help="size of the synthetic corpus used when no corpus file is given.",
    ).tag(config=True)


class _Preprocessing(QdeskConfigurable):

    smooth_alpha = Float(
        None,
        allow_none=True,
        help="migration strength of channel smoothing (unset disables it).",
    ).tag(config=True)

    rotation = Enum(
        ('none', 'random', 'hadamard'),
        'none',
        help="input-side rotation applied before quantization.",
    ).tag(config=True)

    balance = Enum(
        ('none', 'l1', 'l2'),
        'none',
        help="Sinkhorn balancing norm.",
    ).tag(config=True)


class _Quantizing(_Calibrating, _Preprocessing):

    bits = Integer(
        4,
        help="bit width of uniform quantization.",
    ).tag(config=True)

    group_size = Integer(
        128,
        allow_none=True,
        help="group size along the input axis (unset for per-channel).",
    ).tag(config=True)

    scheme = Enum(
        Scheme.ALL,
        Scheme.SYMMETRIC,
        help="uniform quantization scheme.",
    ).tag(config=True)

    method = Enum(
        Method.ALL,
        Method.GPTQ,
        help="base quantizer of the layer-wise sweep.",
    ).tag(config=True)

    scale_mode = Enum(
        ScaleMode.ALL,
        ScaleMode.MINMAX,
        help="how grid scales are calibrated.",
    ).tag(config=True)

    actorder = Bool(
        False,
        help="process inputs by descending Hessian diagonal in GPTQ.",
    ).tag(config=True)

    percdamp = Float(
        0.01,
        help="GPTQ dampening as a fraction of the mean Hessian diagonal.",
    ).tag(config=True)

    qep = Bool(
        True,
        help="correct quantization targets for upstream error.",
    ).tag(config=True)

    qep_alpha = Float(
        1.0,
        help="strength of the upstream error correction.",
    ).tag(config=True)

    lpcd = Bool(
        False,
        help="run coordinated descent over coupled layers of each block.",
    ).tag(config=True)

    lpcd_iters = Integer(
        3,
        min=1,
        help="coordinate descent sweeps per coupled submodule.",
    ).tag(config=True)


class Inspect(Global):
    pass


class Calib(_Calibrating):
    pass


class Plan(_Calibrating):

    bpw = Float(
        4.0,
        help="target average bits per weight.",
    ).tag(config=True)

    mode = Enum(
        ('naive', 'act', 'act_aware'),
        'act',
        help="error estimate used to rank candidates.",
    ).tag(config=True)

    solver = Enum(
        Solver.ALL,
        Solver.DP,
        help="knapsack solver.",
    ).tag(config=True)


class Preprocess(_Calibrating, _Preprocessing):
    pass


class Quantize(_Quantizing):

    envelope_rank = Integer(
        2,
        help="envelope rank of MDBF layers.",
    ).tag(config=True)


class Refine(_Quantizing):

    heldout_fraction = Float(
        0.1,
        help="share of the corpus tail used for held-out likelihood.",
    ).tag(config=True)


class Eval(_Calibrating):

    heldout_fraction = Float(
        0.1,
        help="share of the corpus tail used for held-out likelihood.",
    ).tag(config=True)


class Export(Global):
    pass


class Run(Global):
    pass


class Init(Global):
    pass


entrypoint_configurables = {
    'inspect': Inspect,
    'calib': Calib,
    'plan': Plan,
    'preprocess': Preprocess,
    'quantize': Quantize,
    'refine': Refine,
    'eval': Eval,
    'export': Export,
    'run': Run,
    'init': Init,
}


class Namespace(object):
    def __init__(self, adict):
        self.__dict__.update(adict)
