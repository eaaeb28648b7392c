import numpy as np
import pytest

from gatedfl.privacy import build_dictionary, generate_corpus, generate_documents
from gatedfl.tinylm import ModelConfig, pretrain_base
from gatedfl.tokenizer import CharTokenizer

SMALL = ModelConfig(vocab_size=160, embed_dim=32, n_layers=1, context_len=128)


@pytest.fixture(scope="session")
def tok():
    return CharTokenizer()


@pytest.fixture(scope="session")
def dictionary():
    return build_dictionary(120, seed=3)


@pytest.fixture(scope="session")
def corpus(dictionary):
    return generate_corpus(3, 24, dictionary, seed=5, query_size=8, min_per_class=50)


@pytest.fixture(scope="session")
def small_model(dictionary, tok):
    """A briefly pretrained one-layer model, shared by the whole session."""
    docs = generate_documents(120, dictionary, np.random.default_rng(9))
    return pretrain_base(SMALL, [tok.encode_doc(d.text) for d in docs], steps=60, seed=1, lr=1e-2)
