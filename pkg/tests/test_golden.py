"""Hand-built expectations for the fixture graphs under ``tests/golden``."""

import importlib.util
import os

import numpy as np
import pytest

from wklm.graph import ENTITY as E, RELATION as R, WORD as W, WkGraph, deserialize_graph, serialize_graph

_spec = importlib.util.spec_from_file_location(
    "make_golden", os.path.join(os.path.dirname(__file__), "golden", "make_golden.py"))
golden = importlib.util.module_from_spec(_spec)
_spec.loader.exec_module(golden)

# ids fixed by first appearance in kg.tsv / sentences.txt + aliases.tsv
HARRY, HOGWARTS, GRYFFINDOR, VOLDEMORT, RON, SCOTLAND, LONDON, ENGLAND = 0, 1, 2, 3, 5, 6, 7, 8
EDUCATED_AT, MEMBER_OF, ENEMY, FRIEND, LOCATED_IN, CAPITAL_OF = 0, 1, 2, 3, 4, 5
CLS = 2


def _hand(nodes, n_seq, edges):
    """``nodes`` as (kind, id, position, anchor); the first ``n_seq`` form the sentence."""
    n = len(nodes)
    adj = np.eye(n, dtype=bool)
    adj[:n_seq, :n_seq] = True
    for a, b in edges:
        adj[a, b] = adj[b, a] = True
    kinds, ids, pos, anchors = zip(*nodes)
    return WkGraph(kinds, ids, pos, anchors, adj)


def _word(vocab, w, p):
    return (W, vocab.stoi[w], p, False)


EXPECTED = {
    # harry potter studied at hogwarts
    0: lambda v: _hand(
        [(W, CLS, 0, False), (E, HARRY, 1, True), _word(v, "studied", 2), _word(v, "at", 3), (E, HOGWARTS, 4, True),
         (R, EDUCATED_AT, 2, False), (R, MEMBER_OF, 2, False), (E, GRYFFINDOR, 3, False),
         (R, ENEMY, 2, False), (E, VOLDEMORT, 3, False), (R, LOCATED_IN, 5, False), (E, SCOTLAND, 6, False)],
        5, [(1, 5), (5, 4), (1, 6), (6, 7), (1, 8), (8, 9), (4, 10), (10, 11)]),
    # the weather is nice today: no mention, plain word graph
    2: lambda v: _hand([(W, CLS, 0, False)] + [_word(v, w, i + 1) for i, w in
                                                enumerate("the weather is nice today".split())], 6, []),
    # london is the capital of england: the tail is the other anchor
    3: lambda v: _hand(
        [(W, CLS, 0, False), (E, LONDON, 1, True)] + [_word(v, w, i + 2) for i, w in
                                                       enumerate("is the capital of".split())]
        + [(E, ENGLAND, 6, True), (R, CAPITAL_OF, 2, False)], 7, [(1, 7), (7, 6)]),
    # ron
    6: lambda v: _hand([(W, CLS, 0, False), (E, RON, 1, True), (R, FRIEND, 2, False), (E, HARRY, 3, False)],
                       2, [(1, 2), (2, 3)]),
    # hogwarts is hogwarts: the repeated mention reuses the anchor
    7: lambda v: _hand([(W, CLS, 0, False), (E, HOGWARTS, 1, True), _word(v, "is", 2),
                        (R, LOCATED_IN, 2, False), (E, SCOTLAND, 3, False)], 3, [(1, 3), (3, 4)]),
}


@pytest.mark.parametrize("index", sorted(EXPECTED))
def test_golden_matches_hand_built_graph(index):
    _, vocab, _, _ = golden.fixture()
    expected = EXPECTED[index](vocab)
    with open(golden.golden_path(index), "rb") as fh:
        data = fh.read()
    assert deserialize_graph(data) == expected
    assert serialize_graph(expected) == data


def test_fixture_covers_required_cases():
    graphs = golden.fixture_graphs()
    assert len(graphs) == 10
    assert sum(not g.has_anchor for g in graphs) == 1
    sentences, vocab, _, index = golden.fixture()
    from wklm.graph import link_mentions
    from wklm.text import tokenize
    spans = [link_mentions(tokenize(s, vocab), index) for s in sentences]
    assert any(e - s > 1 for links in spans for (s, e), _ in links)
    # the ministry has more triplets than the cap, so its context is sampled
    assert (graphs[5].kinds == R).sum() == golden.MAX_NEIGHBORS
