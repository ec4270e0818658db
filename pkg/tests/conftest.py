import pytest
import torch

from corpus.synthetic import make_synthetic_corpus
from refmodel.model import PRESETS


@pytest.fixture(autouse=True)
def torch_defaults():
    dtype, threads = torch.get_default_dtype(), torch.get_num_threads()
    yield
    torch.set_default_dtype(dtype)
    torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(False)


@pytest.fixture
def toy_config():
    return PRESETS['toy'].ablated(dropout_p=0.0)


@pytest.fixture
def corpus_manifest(tmp_path):
    return make_synthetic_corpus(tmp_path / 'corpus', n_tokens=20_000, seed=0)
