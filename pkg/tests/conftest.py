import numpy as np
import pytest

from rnntkit.models import (AcousticSequence, ModelConfig, TokenSequence,
                            Vocabulary, init_elm, init_rnnt)


TINY_MODEL = ModelConfig(feature_dim=3, downsample=2, enc_hidden=5,
                         enc_layers=1, enc_out=4, pred_embed=3, pred_hidden=5,
                         pred_out=4, joint_hidden=4, elm_embed=3, elm_hidden=5)


@pytest.fixture
def tiny_vocab() -> Vocabulary:
    return Vocabulary.from_content(["a", "b", "c"])


@pytest.fixture
def tiny_rnnt(tiny_vocab):
    return init_rnnt(TINY_MODEL, tiny_vocab, np.random.default_rng(11))


@pytest.fixture
def tiny_elm(tiny_vocab):
    return init_elm(TINY_MODEL, tiny_vocab, np.random.default_rng(12))


def random_joint_tensor(rng, t_len, u_len, k):
    """A normalized random lattice tensor detached from any model."""
    from rnntkit.models import JointTensor
    from rnntkit import numgrad as ng
    from rnntkit.numgrad import Array
    logits = Array(rng.normal(size=(t_len, u_len + 1, k)))
    return JointTensor(ng.log_softmax(logits), 1.0)


def random_tokens(rng, u_len, k, blank=0):
    """Random non-blank labels in a K-class inventory with blank at 0."""
    return TokenSequence(int(rng.integers(1, k)) for _ in range(u_len))


def random_acoustic(rng, t_len, fdim):
    return AcousticSequence(rng.normal(size=(t_len, fdim)))
