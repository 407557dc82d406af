"""Shared fixtures: a small synthetic corpus and briefly trained models.

Session scope keeps the suite fast; anything that mutates a model must work
on a deepcopy (training attaches adapters in place).
"""
import copy

import pytest

from motiongen.data import synth_corpus
from motiongen.instructions import build_instruction_corpus
from motiongen.lm import LmConfig, build_vocab, pretrain_base
from motiongen.vqvae import VqVaeConfig, train_vqvae

CODEBOOK = 64
FEATURE_DIM = 8


@pytest.fixture(scope="session")
def corpus():
    return synth_corpus(seed=3, n_clips=16, feature_dim=FEATURE_DIM, length_range=(32, 48))


@pytest.fixture(scope="session")
def vq_result(corpus):
    cfg = VqVaeConfig(feature_dim=FEATURE_DIM, codebook_size=CODEBOOK, latent_dim=16, hidden_dim=32)
    return train_vqvae(corpus, cfg, steps=400, seed=0)


@pytest.fixture(scope="session")
def vq_model(vq_result):
    return vq_result.model


@pytest.fixture(scope="session")
def records(corpus, vq_model):
    return build_instruction_corpus(corpus, vq_model, seed=0)


@pytest.fixture(scope="session")
def vocab(records):
    return build_vocab(records, CODEBOOK)


@pytest.fixture(scope="session")
def lm_cfg():
    return LmConfig(n_layers=2, n_heads=4, model_dim=64, ffn_dim=128, max_seq_len=160)


@pytest.fixture(scope="session")
def _base_lm(records, vocab, lm_cfg):
    return pretrain_base(records, vocab, lm_cfg, steps=30, seed=0)


@pytest.fixture
def base_lm(_base_lm):
    """Fresh copy per test; adapter attachment mutates the model in place."""
    return copy.deepcopy(_base_lm)
