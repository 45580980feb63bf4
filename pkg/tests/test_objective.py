import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import random_params
from wklm.encoder import EntityRows
from wklm.errors import EmptySupport, NoMaskableNodes
from wklm.graph import ENTITY, RELATION, WORD, BuilderConfig, WkGraph, build_graph
from wklm.kg import TripletStore
from wklm.objective import (KEEP, MASK, RANDOM, BatchTargets, MaskEntry, MaskPlan, ObjectiveConfig, TokenSpace,
                            apply_plan, drop_anchor_neighbors, maskable_nodes, prepare_sample, sample_mask_plan,
                            sample_negatives, loss)
from wklm.text import CLS_ID, MASK_ID

SPACE = TokenSpace(n_words=30, n_entities=8, n_relations=5)


def _word_graph(n):
    ids = [CLS_ID] + list(range(4, 4 + n))
    return WkGraph([WORD] * (n + 1), ids, range(n + 1), [False] * (n + 1), np.ones((n + 1, n + 1), bool))


def test_config_validation():
    with pytest.raises(ValueError):
        ObjectiveConfig(mask_rate=1.5)
    with pytest.raises(ValueError):
        ObjectiveConfig(action_split=(0.5, 0.5, 0.5))
    with pytest.raises(ValueError):
        ObjectiveConfig(negatives=0)


def test_mask_plan_rates_and_action_split():
    rng = np.random.default_rng(3)
    g = _word_graph(20)
    cfg = ObjectiveConfig()
    selected, actions = 0, np.zeros(3)
    n_graphs = 4000
    for _ in range(n_graphs):
        plan = sample_mask_plan(g, cfg, rng, SPACE)
        selected += len(plan)
        for e in plan:
            actions[e.action] += 1
    # each of 20 nodes kept with prob 0.85; forced-one adds 0.85**20 per graph
    expected = 20 * 0.15 + 0.85 ** 20
    assert abs(selected / n_graphs - expected) < 0.05
    np.testing.assert_allclose(actions / actions.sum(), [0.8, 0.1, 0.1], atol=0.015)


def test_mask_plan_never_selects_cls_and_random_differs():
    rng = np.random.default_rng(4)
    g = _word_graph(6)
    cfg = ObjectiveConfig(mask_rate=0.9, action_split=(0, 1, 0))
    for _ in range(300):
        for e in sample_mask_plan(g, cfg, rng, SPACE):
            assert e.node != 0
            assert e.action == RANDOM
            assert e.replacement != e.original and 4 <= e.replacement < 30


def test_mask_rate_zero_forces_one():
    rng = np.random.default_rng(0)
    for _ in range(50):
        assert len(sample_mask_plan(_word_graph(5), ObjectiveConfig(mask_rate=0.0), rng, SPACE)) == 1


def test_mask_rate_one_selects_all():
    plan = sample_mask_plan(_word_graph(5), ObjectiveConfig(mask_rate=1.0), np.random.default_rng(0), SPACE)
    assert plan.nodes() == [1, 2, 3, 4, 5]


def test_only_cls_raises():
    with pytest.raises(NoMaskableNodes):
        sample_mask_plan(_word_graph(0), ObjectiveConfig(), np.random.default_rng(0), SPACE)


def test_random_with_single_id_falls_back_to_keep():
    space = TokenSpace(n_words=30, n_entities=1, n_relations=5)
    g = WkGraph([WORD, ENTITY], [CLS_ID, 0], [0, 1], [False, True], np.ones((2, 2), bool))
    plan = sample_mask_plan(g, ObjectiveConfig(mask_rate=1.0, action_split=(0, 1, 0)),
                            np.random.default_rng(0), space)
    assert [(e.action, e.replacement) for e in plan] == [(KEEP, 0)]


def test_mask_ids_per_kind():
    g = WkGraph([WORD, WORD, ENTITY, RELATION], [CLS_ID, 7, 2, 1], [0, 1, 2, 3], [False, False, True, False],
                np.ones((4, 4), bool))
    plan = sample_mask_plan(g, ObjectiveConfig(mask_rate=1.0, action_split=(1, 0, 0)),
                            np.random.default_rng(0), SPACE)
    corrupted = apply_plan(g, plan)
    assert corrupted.ids.tolist() == [CLS_ID, MASK_ID, 8, 5]
    assert g.ids.tolist() == [CLS_ID, 7, 2, 1]
    assert [e.original for e in plan] == [7, 2, 1]


def _two_anchor_graph(rng):
    store = TripletStore.from_triples([("a", "r", "t"), ("a", "s", "u"), ("b", "q", "t")])
    # entities: a=0, t=1, u=2, b=3
    return build_graph([9, 10, 11], [((0, 1), 0), ((2, 3), 3)], store, BuilderConfig(), rng)


def test_drop_anchor_neighbors_keeps_shared_tail(rng):
    g = _two_anchor_graph(rng)
    a = int(np.flatnonzero(g.anchors & (g.ids == 0))[0])
    dropped, keep = drop_anchor_neighbors(g, [a])
    # u only hangs off a and goes; t is still reached through b's relation
    assert sorted(dropped.ids[dropped.kinds == ENTITY].tolist()) == [0, 1, 3]
    assert dropped.ids[dropped.kinds == RELATION].tolist() == [2]
    assert dropped.relation_triples() and all(dropped.anchors[h] for h, _, _ in dropped.relation_triples())
    assert np.array_equal(dropped.adjacency, g.adjacency[np.ix_(keep, keep)])


def test_drop_both_anchors_leaves_sentence(rng):
    g = _two_anchor_graph(rng)
    dropped, _ = drop_anchor_neighbors(g, np.flatnonzero(g.anchors))
    assert (dropped.kinds == RELATION).sum() == 0
    assert dropped.anchors.sum() == 2
    assert len(dropped) == 4


def test_drop_nothing_returns_same_graph(rng):
    g = _two_anchor_graph(rng)
    dropped, keep = drop_anchor_neighbors(g, [])
    assert dropped is g and keep.tolist() == list(range(len(g)))


def test_prepare_sample_dropout_only_for_masked_anchors():
    rng = np.random.default_rng(5)
    g = _two_anchor_graph(rng)
    cfg = ObjectiveConfig(mask_rate=0.2, anchor_dropout_rate=1.0)
    for _ in range(200):
        corrupted, plan = prepare_sample(g, cfg, rng, TokenSpace(20, 4, 3))
        masked_anchors = {e.node for e in plan if corrupted.anchors[e.node]}
        heads = {head for head, _, _ in corrupted.relation_triples()}
        assert not masked_anchors & heads
        # an unmasked anchor keeps its relations
        for node in np.flatnonzero(corrupted.anchors):
            if node not in masked_anchors:
                assert node in heads
        for e in plan:
            if e.action == MASK:
                assert corrupted.ids[e.node] == TokenSpace(20, 4, 3).mask_id(e.kind)


def test_sample_negatives_excludes_positive():
    rng = np.random.default_rng(0)
    draws = sample_negatives(np.array([0.5, 0.25, 0.25]), 10_000, {0}, rng)
    assert 0 not in draws
    assert abs((draws == 1).mean() - 0.5) < 0.02


def test_sample_negatives_empty_support():
    with pytest.raises(EmptySupport):
        sample_negatives(np.array([1.0]), 3, {0}, np.random.default_rng(0))


def _targets(word=(), relation=(), entity=(), cands=None, k=1):
    def group(rows):
        rows = list(rows)
        return tuple(np.array([r[i] for r in rows], dtype=np.int64) for i in range(3))
    cand = np.zeros((0, k + 1), dtype=np.int64) if cands is None else np.asarray(cands)
    return BatchTargets(group(word), group(relation), group(entity), cand)


def test_entity_loss_with_zero_vectors_is_log_k_plus_one(rng):
    params = random_params(rng, d=8, heads=2, n_entities=50)
    k = 7
    cands = np.arange(k + 1)[None]
    rows = EntityRows(np.arange(k + 1), np.zeros((k + 1, 8)))
    hidden = rng.normal(size=(1, 3, 8))
    out = loss(hidden, _targets(entity=[(0, 1, 0)], cands=cands, k=k), params, rows, ObjectiveConfig())
    assert out.total == pytest.approx(math.log(k + 1), abs=1e-12)
    assert out.parts["entity"] == pytest.approx(math.log(k + 1), abs=1e-12)


def test_word_loss_hand_computed(rng):
    params = random_params(rng, d=4, heads=1, n_words=3)
    params.tensors["word_head.W"] = np.array([[1.0, 0, 0], [0, 1.0, 0], [0, 0, 1.0], [0, 0, 0]])
    params.tensors["word_head.b"] = np.zeros(3)
    hidden = np.zeros((1, 2, 4))
    hidden[0, 1, :3] = [2.0, 1.0, 0.0]
    out = loss(hidden, _targets(word=[(0, 1, 0)]), params, None, ObjectiveConfig())
    expected = -2.0 + math.log(math.exp(2) + math.exp(1) + 1)
    assert out.total == pytest.approx(expected, abs=1e-12)
    assert out.parts["relation"] == 0.0 and out.parts["entity"] == 0.0


def test_total_is_weighted_mean_over_masked_nodes(rng):
    params = random_params(rng, d=8, heads=2, n_words=10, n_relations=4)
    hidden = rng.normal(size=(1, 4, 8))
    tg = _targets(word=[(0, 1, 5), (0, 2, 6)], relation=[(0, 3, 2)])
    base = loss(hidden, tg, params, None, ObjectiveConfig())
    weighted = loss(hidden, tg, params, None, ObjectiveConfig(word_weight=2.0, relation_weight=0.5))
    w, r = base.parts["word"], base.parts["relation"]
    assert base.total == pytest.approx((2 * w + r) / 3, rel=1e-12)
    assert weighted.total == pytest.approx((2 * 2 * w + 0.5 * r) / 3, rel=1e-12)


def test_no_targets_gives_zero_loss(rng):
    params = random_params(rng)
    out = loss(rng.normal(size=(1, 3, 16)), _targets(), params, None, ObjectiveConfig())
    assert out.total == 0.0 and not out.d_hidden.any()


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_plan_entries_are_consistent(seed):
    rng = np.random.default_rng(seed)
    g = _two_anchor_graph(rng)
    plan = sample_mask_plan(g, ObjectiveConfig(mask_rate=0.4), rng, TokenSpace(20, 4, 3))
    assert set(plan.nodes()) <= set(maskable_nodes(g).tolist())
    assert len(set(plan.nodes())) == len(plan)
    for e in plan:
        assert e.kind == g.kinds[e.node] and e.original == g.ids[e.node]
        if e.action == KEEP:
            assert e.replacement == e.original


def test_mask_plan_container():
    plan = MaskPlan([MaskEntry(2, 5, WORD, MASK, MASK_ID)])
    assert len(plan) == 1 and plan.nodes() == [2]
