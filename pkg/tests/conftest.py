import numpy as np
import pytest
import torch

from mixtts.config import load_config
from mixtts.corpus import make_toy_corpus
from mixtts.model import AcousticModel

torch.set_num_threads(1)

# filled by tests/test_acceptance.py, printed once at the end of the session
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])


@pytest.fixture
def micro_cfg():
    return load_config("micro")


@pytest.fixture
def micro_model(micro_cfg):
    torch.manual_seed(0)
    return AcousticModel(micro_cfg).eval()


@pytest.fixture(scope="session")
def toy_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("toy")
    return make_toy_corpus(0, 16, 4, out)


def random_batch(vocab_size, lengths, seed=0):
    """Random (tokens, word_ids, durations) batch; padding is token 0 / word id -1."""
    rng = np.random.default_rng(seed)
    items = []
    for n_words in lengths:
        wl = rng.integers(1, 4, size=n_words)
        tokens = rng.integers(1, vocab_size, size=int(wl.sum()))
        word_ids = np.repeat(np.arange(n_words), wl)
        durs = rng.integers(1, 7, size=n_words)
        durs[-1] += -durs.sum() % 4
        items.append((tokens, word_ids, durs))
    p = max(len(t) for t, _, _ in items)
    w = max(len(d) for _, _, d in items)
    tokens = torch.zeros(len(items), p, dtype=torch.long)
    word_ids = torch.full((len(items), p), -1, dtype=torch.long)
    durs = torch.zeros(len(items), w, dtype=torch.long)
    for i, (t, wi, d) in enumerate(items):
        tokens[i, : len(t)] = torch.from_numpy(t)
        word_ids[i, : len(wi)] = torch.from_numpy(wi)
        durs[i, : len(d)] = torch.from_numpy(d)
    return tokens, word_ids, durs
