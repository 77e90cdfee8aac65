# coding: utf-8

# Copyright (c) qdesk contributors.
# Distributed under the terms of the Modified BSD License.

import codecs
import io
import json
import locale
import os
import sys

import numpy as np

from .calib import read_calib_set, read_corpus, sample_calib, synthetic_corpus


def _setup_std_stream_encoding():
    """Setup encoding on stdout/err

    Ensures sys.stdout/err have error-escaping encoders,
    rather than raising errors.
    """
    if os.getenv('PYTHONIOENCODING'):
        return
    _default_encoding = locale.getpreferredencoding() or 'UTF-8'
    for name in ('stdout', 'stderr'):
        stream = getattr(sys, name)
        raw_stream = getattr(sys, '__%s__' % name)
        if stream is not raw_stream:
            # don't wrap captured or redirected output
            continue
        enc = getattr(stream, 'encoding', None) or _default_encoding
        errors = getattr(stream, 'errors', None) or 'strict'
        if errors == 'strict' or errors.startswith('surrogate'):
            new_stream = codecs.getwriter(enc)(stream.buffer, errors='backslashreplace')
            setattr(sys, name, new_stream)


def setup_std_streams():
    """Setup sys.stdout/err

    - Ensures sys.stdout/err have error-escaping encoders,
      rather than raising errors.
    - enables colorama for ANSI escapes on Windows
    """
    _setup_std_stream_encoding()
    # must enable colorama after setting up encoding,
    # or encoding will undo colorama setup
    if sys.platform.startswith('win'):
        import colorama
        colorama.init()


class Printer:
    """Writes through print(), so capsys sees the output in tests."""
    def write(self, text):
        print(text, end="")


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError('%r is not JSON serializable' % (o,))


def write_json(obj, path):
    with io.open(path, 'w', encoding='utf8') as f:
        json.dump(obj, f, indent=1, default=_json_default)
        f.write('\n')


def calib_from_args(arguments, vocab, seed):
    """The calibration set described by the calibration command-line options."""
    if getattr(arguments, 'calib', None):
        return read_calib_set(arguments.calib)
    if arguments.corpus:
        corpus = read_corpus(arguments.corpus, arguments.corpus_mode, vocab)
    else:
        corpus = synthetic_corpus(arguments.synthetic_tokens, vocab, seed)
    return sample_calib(corpus, arguments.strategy, arguments.n_samples, arguments.length, seed)


def calib_and_heldout(arguments, vocab, seed, heldout_fraction):
    """Calibration set plus held-out sequences cut from the tail of the corpus."""
    from .pipeline import split_heldout
    if arguments.corpus:
        corpus = read_corpus(arguments.corpus, arguments.corpus_mode, vocab)
    else:
        corpus = synthetic_corpus(arguments.synthetic_tokens, vocab, seed)
    corpus, heldout = split_heldout(corpus, heldout_fraction, arguments.length)
    if getattr(arguments, 'calib', None):
        calib = read_calib_set(arguments.calib)
    else:
        calib = sample_calib(corpus, arguments.strategy, arguments.n_samples, arguments.length, seed)
    return calib, heldout
