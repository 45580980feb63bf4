import numpy as np
import pytest

from wklm.encoder import ModelConfig, init_params
from wklm.kg import TripletStore


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def write(tmp_path):
    def _write(name, text):
        path = tmp_path / name
        path.write_text(text, encoding="utf-8")
        return str(path)

    return _write


@pytest.fixture
def small_store():
    return TripletStore.from_triples([
        ("a", "r", "b"), ("a", "s", "c"), ("b", "r", "c"), ("c", "t", "a"), ("b", "s", "d"),
    ])


def random_params(rng, n_layers=2, d=16, heads=2, n_words=12, n_relations=3, n_entities=4,
                  dtype="float64", scale=0.3, max_pos=32):
    cfg = ModelConfig(n_words=n_words, n_relations=n_relations, n_entities=n_entities, d_model=d,
                      n_heads=heads, n_layers=n_layers, d_ff=2 * d, max_pos=max_pos, dtype=dtype)
    params = init_params(cfg, rng)
    for k in params.tensors:
        params.tensors[k] = (params.tensors[k] + rng.normal(0, scale, params.tensors[k].shape)).astype(dtype)
    return params


def random_graph_batch(rng, n, p=0.3):
    """Random connected-or-not symmetric graph as a one-graph batch of words."""
    from wklm.graph import WkGraph, to_batch

    adj = rng.random((n, n)) < p
    adj = adj | adj.T
    np.fill_diagonal(adj, True)
    g = WkGraph(np.zeros(n), rng.integers(4, 12, n), rng.permutation(n), np.zeros(n, bool), adj)
    return g, to_batch([g])
