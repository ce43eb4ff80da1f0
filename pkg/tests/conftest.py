import numpy as np
import pytest

from attrscope.corpus import make_syn_corpus
from attrscope.models import Hyperparams, init_params, train
from attrscope.models.params import AR, CLASSIFIER, DIFFUSION


@pytest.fixture(scope="session")
def corpus():
    return make_syn_corpus(8, [1, 2, 3, 4], 1000, seed=3)


@pytest.fixture(scope="session")
def ar_model(corpus):
    """Translation model trained to high held-out accuracy (used by the
    acceptance tests); expensive, built once per session."""
    hp = Hyperparams(kind=AR, vocab_size=len(corpus.vocab), layers=2, heads=2,
                     width=64, mlp_hidden=128, context_len=64)
    result = train(AR, list(corpus.train_pairs), corpus.vocab, hp, seed=0,
                   steps=2500, lr=0.05, batch_size=8)
    return result.params


@pytest.fixture(scope="session")
def tiny_corpus():
    return make_syn_corpus(4, [1, 2, 3, 4], 140, seed=5)


@pytest.fixture(scope="session")
def tiny_ar_model(tiny_corpus):
    """Cheap partially trained model for unit tests that only need
    well-behaved scores, not accuracy."""
    hp = Hyperparams(kind=AR, vocab_size=len(tiny_corpus.vocab), layers=2,
                     heads=2, width=32, mlp_hidden=64, context_len=32)
    result = train(AR, list(tiny_corpus.train_pairs), tiny_corpus.vocab, hp,
                   seed=1, steps=80, lr=0.05, batch_size=8)
    return result.params


@pytest.fixture(scope="session")
def diffusion_model(tiny_corpus):
    hp = Hyperparams(kind=DIFFUSION, vocab_size=len(tiny_corpus.vocab),
                     layers=2, heads=2, width=32, mlp_hidden=64,
                     context_len=32)
    result = train(DIFFUSION, list(tiny_corpus.train_pairs), tiny_corpus.vocab,
                   hp, seed=2, steps=120, lr=0.05, batch_size=8)
    return result.params


@pytest.fixture(scope="session")
def classifier_model(tiny_corpus):
    hp = Hyperparams(kind=CLASSIFIER, vocab_size=len(tiny_corpus.vocab),
                     layers=1, heads=2, width=32, mlp_hidden=64,
                     context_len=32, n_classes=3)
    return init_params(hp, tiny_corpus.vocab, seed=4)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
