import numpy as np
import pytest

from corefnet.model import ModelConfig, ModelParams
from corefnet.numerics import Rng
from corefnet.textmodel import ClusterSet, Document, generate_synthetic_corpus, split_corpus
from corefnet.training import TrainConfig, train

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def tiny_config(rng: np.random.Generator, attention=True, depth=None):
    d = int(rng.integers(2, 9))
    return ModelConfig(d_emb=int(rng.integers(2, 9)), d_model=d, d_att=int(rng.integers(2, 9)),
                       d_proj=int(rng.integers(2, 9)),
                       depth=int(rng.integers(0, 3)) if depth is None else depth,
                       attention=attention, embed_init=1.0)


def randomize(model: ModelParams, rng: np.random.Generator, scale=0.7):
    """Give every parameter (zero-initialized ones too) random values."""
    for p in model.all_params():
        p.value = rng.uniform(-scale, scale, p.shape)
    return model


def random_document(rng: np.random.Generator, n_tokens, n_mentions, vocab, doc_id="r"):
    tokens = [vocab[k] for k in rng.integers(0, len(vocab), n_tokens)]
    spans = set()
    while len(spans) < n_mentions:
        s = int(rng.integers(0, n_tokens))
        e = min(n_tokens - 1, s + int(rng.integers(0, 3)))
        spans.add((s, e))
    spans = sorted(spans)
    labels = rng.integers(0, max(1, n_mentions // 2 + 1), n_mentions)
    groups = {}
    for m, lab in enumerate(labels):
        groups.setdefault(int(lab), set()).add(m)
    return Document(doc_id, tuple(tokens), tuple(spans), ClusterSet(tuple(groups.values())))


def tiny_model(seed, vocab=("a", "b", "c", "d", "e"), **kw):
    rng = np.random.default_rng(seed)
    config = tiny_config(rng, **kw)
    model = ModelParams.build(config, list(vocab), Rng(seed))
    return randomize(model, rng), rng


@pytest.fixture(scope="session")
def corpus7():
    docs = generate_synthetic_corpus(500, 7)
    sp = split_corpus(docs, 7)
    by_id = {d.id: d for d in docs}
    return {"docs": docs,
            "train": [by_id[i] for i in sp.train],
            "dev": [by_id[i] for i in sp.dev],
            "test": [by_id[i] for i in sp.test]}


@pytest.fixture(scope="session")
def trained7(corpus7):
    """The default desk-scale run; shared by every test that needs a trained model."""
    import time

    t0 = time.perf_counter()
    result = train(corpus7["train"], corpus7["dev"], TrainConfig(seed=7), ModelConfig())
    result.seconds = time.perf_counter() - t0
    return result
