import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wklm.errors import GraphTooLarge, OverlappingSpans, SpanOutOfRange
from wklm.graph import (ENTITY, NEG_INF, PAD_KIND, RELATION, WORD, BuilderConfig, WkGraph, build_graph,
                        deserialize_graph, link_mentions, serialize_graph, to_batch)
from wklm.kg import AliasIndex, TripletStore
from wklm.text import CLS_ID, PAD_ID, UNK_ID, Vocabulary, tokenize


def test_tokenize_known_words():
    vocab = Vocabulary.build(["Harry points his wand"])
    ids = tokenize("Harry points his wand", vocab)
    assert len(ids) == 4 and UNK_ID not in ids
    assert tokenize("", vocab) == []
    assert tokenize("harry waves", vocab)[1] == UNK_ID


def _index(entries):
    index = AliasIndex()
    for surface, ent in entries:
        index.add(surface, ent)
    return index


def test_link_longest_match():
    harry, potter, fights = 10, 11, 12
    index = _index([((harry, potter), 0)])
    assert link_mentions([harry, potter, fights], index) == [((0, 2), 0)]


def test_link_prefers_longer_surface():
    index = _index([((10,), 1), ((10, 11), 0)])
    assert link_mentions([10, 11, 12], index) == [((0, 2), 0)]


def test_link_no_match():
    assert link_mentions([5, 6, 7], _index([((9,), 0)])) == []


def _oracle_links(tokens, surfaces):
    """Best matching by exhaustive enumeration: leftmost start first, then longest."""
    spans = [(i, j, surfaces[tuple(tokens[i:j])]) for i in range(len(tokens))
             for j in range(i + 1, len(tokens) + 1) if tuple(tokens[i:j]) in surfaces]
    best = []
    for r in range(len(spans) + 1):
        for combo in itertools.combinations(spans, r):
            combo = sorted(combo)
            if any(a[1] > b[0] for a, b in zip(combo, combo[1:])):
                continue
            key = [(-s, e - s) for s, e, _ in combo]
            if key > [(-s, e - s) for s, e, _ in best]:
                best = combo
    return [((s, e), ent) for s, e, ent in best]


@settings(max_examples=150, deadline=None)
@given(tokens=st.lists(st.integers(4, 7), max_size=8),
       surfaces=st.dictionaries(st.lists(st.integers(4, 7), min_size=1, max_size=3).map(tuple),
                                st.integers(0, 5), max_size=6))
def test_link_matches_exhaustive_oracle(tokens, surfaces):
    index = _index(surfaces.items())
    assert link_mentions(tokens, index) == _oracle_links(tokens, surfaces)


def _star_store(n_triplets, shared=False):
    triples = [("anchor", f"r{i}", f"tail{i}") for i in range(n_triplets)]
    if shared:
        triples += [("other", "r0", "tail0")]
    return TripletStore.from_triples(triples)


def test_build_graph_single_anchor(rng):
    store = _star_store(3)
    g = build_graph([4, 5, 6, 7], [((1, 2), 0)], store, BuilderConfig(15), rng)
    # CLS, w0, ANCHOR, w2, w3, then (rel, tail) x 3
    assert g.kinds.tolist() == [WORD, WORD, ENTITY, WORD, WORD, RELATION, ENTITY, RELATION, ENTITY, RELATION, ENTITY]
    assert g.ids.tolist() == [CLS_ID, 4, 0, 6, 7, 0, 1, 1, 2, 2, 3]
    assert g.positions.tolist() == [0, 1, 2, 3, 4, 3, 4, 3, 4, 3, 4]
    assert g.anchors.tolist() == [False, False, True] + [False] * 8
    expected = np.eye(11, dtype=bool)
    expected[:5, :5] = True
    for rel, tail in ((5, 6), (7, 8), (9, 10)):
        expected[2, rel] = expected[rel, 2] = True
        expected[rel, tail] = expected[tail, rel] = True
    assert np.array_equal(g.adjacency, expected)


def test_build_graph_zero_neighbors(rng):
    g = build_graph([4, 5], [((0, 1), 0)], _star_store(3), BuilderConfig(0), rng)
    assert g.kinds.tolist() == [WORD, ENTITY, WORD]
    assert g.has_anchor


def test_build_graph_shared_tail_is_merged(rng):
    store = TripletStore.from_triples([("a", "r", "t"), ("b", "s", "t")])
    g = build_graph([4, 5, 6], [((0, 1), 0), ((2, 3), 2)], store, BuilderConfig(15), rng)
    # CLS, a, w, b, rel(r), t, rel(s)
    assert g.kinds.tolist() == [WORD, ENTITY, WORD, ENTITY, RELATION, ENTITY, RELATION]
    assert g.ids.tolist() == [CLS_ID, 0, 5, 2, 0, 1, 1]
    assert g.positions.tolist() == [0, 1, 2, 3, 2, 3, 4]
    tail = 5
    assert (g.ids[g.kinds == ENTITY] == 1).sum() == 1
    assert set(np.flatnonzero(g.adjacency[tail])) == {tail, 4, 6}
    assert g.relation_triples() == [(1, 4, 5), (3, 6, 5)]


def test_build_graph_tail_equal_to_anchor_reuses_anchor(rng):
    store = TripletStore.from_triples([("a", "r", "b"), ("b", "s", "x")])
    g = build_graph([4, 5], [((0, 1), 0), ((1, 2), 1)], store, BuilderConfig(15), rng)
    assert (g.kinds == ENTITY).sum() == 3
    assert g.relation_triples()[0] == (1, 3, 2)


def test_build_graph_multi_token_mention(rng):
    store = _star_store(1)
    g = build_graph([4, 5, 6, 7], [((1, 3), 0)], store, BuilderConfig(15), rng)
    assert g.kinds.tolist() == [WORD, WORD, ENTITY, WORD, RELATION, ENTITY]
    assert g.positions.tolist() == [0, 1, 2, 3, 3, 4]


def test_build_graph_no_links_flags_anchor_free(rng):
    g = build_graph([4, 5, 6], [], _star_store(1), BuilderConfig(), rng)
    assert not g.has_anchor
    assert g.adjacency.all()


def test_build_graph_span_errors(rng):
    store = _star_store(1)
    with pytest.raises(OverlappingSpans):
        build_graph([4, 5, 6], [((0, 2), 0), ((1, 3), 1)], store, BuilderConfig(), rng)
    with pytest.raises(SpanOutOfRange):
        build_graph([4, 5], [((1, 3), 0)], store, BuilderConfig(), rng)


def _random_store(rng, n_ent=12, n_rel=4, n_trip=40):
    trip = {(f"e{rng.integers(n_ent)}", f"r{rng.integers(n_rel)}", f"e{rng.integers(n_ent)}")
            for _ in range(n_trip)}
    return TripletStore.from_triples(sorted(trip))


def _random_graph(seed):
    rng = np.random.default_rng(seed)
    store = _random_store(rng)
    n_tok = int(rng.integers(1, 10))
    tokens = rng.integers(4, 20, n_tok).tolist()
    links, i = [], 0
    while i < n_tok:
        length = int(rng.integers(1, 3))
        if rng.random() < 0.4 and i + length <= n_tok:
            links.append(((i, i + length), int(rng.integers(store.n_entities))))
            i += length
        else:
            i += 1
    return build_graph(tokens, links, store, BuilderConfig(int(rng.integers(0, 6))), rng)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_graph_invariants(seed):
    g = _random_graph(seed)
    adj = g.adjacency
    assert np.array_equal(adj, adj.T)
    assert adj.diagonal().all()
    ent = g.ids[g.kinds == ENTITY]
    assert len(set(ent.tolist())) == len(ent)
    seq = (g.kinds == WORD) | g.anchors
    assert adj[np.ix_(seq, seq)].all()
    tails = (g.kinds == ENTITY) & ~g.anchors
    assert not adj[np.ix_(tails, g.kinds == WORD)].any()
    for head, rel, tail in g.relation_triples():
        assert adj[rel].sum() == 3
        assert g.anchors[head]
        assert g.positions[rel] - g.positions[head] == 1
        assert adj[rel, tail] and not adj[head, tail] or g.anchors[tail]
    assert sum(1 for _ in g.relation_triples()) == int((g.kinds == RELATION).sum())


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_rebuild_with_same_seed_is_identical(seed):
    assert serialize_graph(_random_graph(seed)) == serialize_graph(_random_graph(seed))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_serialization_round_trip(seed):
    g = _random_graph(seed)
    assert deserialize_graph(serialize_graph(g)) == g


def test_to_batch_connected_pair():
    g = WkGraph([WORD, WORD], [5, 6], [0, 1], [False, False], np.ones((2, 2), bool))
    b = to_batch([g], pad_to=3)
    assert b.mask[0, 0].tolist() == [0.0, 0.0, NEG_INF]
    assert b.kinds[0, 2] == PAD_KIND and b.ids[0, 2] == PAD_ID
    assert b.valid[0].tolist() == [True, True, False]


def test_to_batch_disconnected_pair():
    g = WkGraph([WORD, WORD], [5, 6], [0, 1], [False, False], np.eye(2, dtype=bool))
    b = to_batch([g])
    assert b.mask[0, 0, 1] == NEG_INF and b.mask[0, 1, 0] == NEG_INF
    assert b.mask[0, 0, 0] == 0.0


def test_to_batch_no_padding_needed():
    g = WkGraph([WORD] * 3, [5, 6, 7], [0, 1, 2], [False] * 3, np.ones((3, 3), bool))
    b = to_batch([g], pad_to=3)
    assert b.valid.all()
    assert (b.mask == 0).all()


def test_to_batch_too_large():
    g = WkGraph([WORD] * 3, [5, 6, 7], [0, 1, 2], [False] * 3, np.ones((3, 3), bool))
    with pytest.raises(GraphTooLarge) as exc:
        to_batch([g, g], pad_to=2)
    assert exc.value.index == 0


def test_neg_inf_underflows_to_zero():
    for dtype in (np.float32, np.float64):
        logits = np.array([30.0, -30.0 + NEG_INF], dtype=dtype)
        e = np.exp(logits - logits.max())
        assert e[1] == 0.0
