# -*- coding: utf-8 -*-

# Copyright (c) qdesk contributors.
# Distributed under the terms of the Modified BSD License.

import logging
import os

import numpy as np
from pytest import fixture, skip

from qdesk.calib import sample_calib, synthetic_corpus
from qdesk.pipeline import save_model
from qdesk.toymodel import ToyModel, ToyModelConfig


pjoin = os.path.join


def testspath():
    return os.path.abspath(os.path.dirname(__file__))


@fixture
def slow(request):
    if request.config.getoption('--quick', default=False):
        skip('skipping slow test')


@fixture
def rng():
    return np.random.default_rng(1234)


@fixture(scope='session')
def small_config():
    """A one-block model small enough for per-test sweeps."""
    return ToyModelConfig(L=1, d=16, H=2, H_kv=1, d_ff=32, vocab=64, T_max=64)


@fixture
def toy_model(small_config):
    return ToyModel.init(small_config, seed=0)


@fixture
def two_block_model():
    return ToyModel.init(ToyModelConfig(L=2, d=16, H=2, H_kv=1, d_ff=32, vocab=64, T_max=64), seed=3)


@fixture
def corpus(small_config):
    return synthetic_corpus(4000, small_config.vocab, seed=0)


@fixture
def calib_set(corpus):
    return sample_calib(corpus, 'concat_chunk', 4, 16, seed=0)


@fixture
def model_file(tmpdir, toy_model):
    path = str(tmpdir.join('toy.ocw'))
    save_model(toy_model, path)
    return path


@fixture
def in_tmpdir(tmpdir):
    """Run with the temporary directory as cwd, so no stray qdesk_config.json is read."""
    with tmpdir.as_cwd():
        yield tmpdir


@fixture
def reset_log():
    # clear root logger handlers before test and reset afterwards
    handlers = list(logging.getLogger().handlers)
    logging.getLogger().handlers[:] = []
    yield
    logging.getLogger().handlers[:] = handlers
