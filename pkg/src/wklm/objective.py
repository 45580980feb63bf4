"""Masked-node objective over WK graphs.

Words, entities and relations are all maskable. Word and relation targets
are scored against their full vocabularies; entity targets are scored by a
dot product against one positive and ``k`` sampled negative entity vectors.
"""

from dataclasses import dataclass, field

import numpy as np

from .encoder import LossOutput
from .errors import EmptySupport, NoMaskableNodes
from .graph import ENTITY, RELATION, WORD
from .text import CLS_ID, MASK_ID

MASK, RANDOM, KEEP = 0, 1, 2
ACTION_NAMES = ("MASK", "RANDOM", "KEEP")


@dataclass
class ObjectiveConfig:
    mask_rate: float = 0.15
    action_split: tuple = (0.8, 0.1, 0.1)
    anchor_dropout_rate: float = 0.5
    negatives: int = 200
    word_weight: float = 1.0
    entity_weight: float = 1.0
    relation_weight: float = 1.0

    def __post_init__(self):
        self.action_split = tuple(float(x) for x in self.action_split)
        for name in ("mask_rate", "anchor_dropout_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if len(self.action_split) != 3 or min(self.action_split) < 0 or abs(sum(self.action_split) - 1) > 1e-9:
            raise ValueError("action_split must be three non-negative probabilities summing to 1")
        if self.negatives < 1:
            raise ValueError("negatives must be >= 1")


@dataclass(frozen=True)
class TokenSpace:
    """Per-kind id ranges for random replacement and the reserved MASK ids."""

    n_words: int
    n_entities: int
    n_relations: int
    word_low: int = 4

    def random_range(self, kind):
        return {WORD: (self.word_low, self.n_words), ENTITY: (0, self.n_entities),
                RELATION: (0, self.n_relations)}[kind]

    def mask_id(self, kind):
        return {WORD: MASK_ID, ENTITY: self.n_entities, RELATION: self.n_relations}[kind]

    @classmethod
    def from_config(cls, cfg):
        return cls(cfg.n_words, cfg.n_entities, cfg.n_relations)


@dataclass(frozen=True)
class MaskEntry:
    node: int
    original: int
    kind: int
    action: int
    replacement: int


@dataclass
class MaskPlan:
    entries: list = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def nodes(self):
        return [e.node for e in self.entries]


def maskable_nodes(graph):
    """Every node except the CLS word node."""
    is_cls = (graph.kinds == WORD) & (graph.ids == CLS_ID)
    return np.flatnonzero(~is_cls)


def _draw_other(rng, low, high, original):
    if low <= original < high:
        if high - low < 2:
            return None
        x = int(rng.integers(low, high - 1))
        return x + 1 if x >= original else x
    if high <= low:
        return None
    return int(rng.integers(low, high))


def sample_mask_plan(graph, cfg, rng, space):
    """Select nodes to corrupt and draw a MASK/RANDOM/KEEP action for each.

    Each maskable node is selected independently with ``cfg.mask_rate``; if
    nothing is selected one node is forced. RANDOM replacements come from
    the same kind's vocabulary, never equal to the original id (a RANDOM draw
    with no alternative id falls back to KEEP).
    """
    pool = maskable_nodes(graph)
    if pool.size == 0:
        raise NoMaskableNodes("graph has no maskable nodes")
    chosen = pool[rng.random(pool.size) < cfg.mask_rate]
    if chosen.size == 0:
        chosen = pool[[int(rng.integers(pool.size))]]
    actions = rng.choice(3, size=chosen.size, p=cfg.action_split)
    entries = []
    for node, action in zip(chosen.tolist(), actions.tolist()):
        kind, original = int(graph.kinds[node]), int(graph.ids[node])
        replacement = original
        if action == MASK:
            replacement = space.mask_id(kind)
        elif action == RANDOM:
            other = _draw_other(rng, *space.random_range(kind), original)
            if other is None:
                action = KEEP
            else:
                replacement = other
        entries.append(MaskEntry(node, original, kind, action, replacement))
    return MaskPlan(entries)


def apply_plan(graph, plan):
    """Copy of ``graph`` with masked nodes' token ids replaced."""
    out = graph.copy()
    for e in plan:
        out.ids[e.node] = e.replacement
    return out


def drop_anchor_neighbors(graph, anchors):
    """Remove the knowledge context of the given anchor nodes.

    Relation nodes headed by a listed anchor go, and so does any non-anchor
    entity left with no relation neighbour. Returns the new graph and the
    kept original node indices.
    """
    anchors = set(int(a) for a in anchors)
    if not anchors:
        return graph, np.arange(len(graph))
    drop = set()
    for head, rel, _ in graph.relation_triples():
        if head in anchors:
            drop.add(rel)
    if not drop:
        return graph, np.arange(len(graph))
    alive = np.ones(len(graph), dtype=bool)
    alive[list(drop)] = False
    rel_alive = (graph.kinds == RELATION) & alive
    for j in np.flatnonzero((graph.kinds == ENTITY) & ~graph.anchors):
        if not (graph.adjacency[j] & rel_alive).any():
            alive[j] = False
    keep = np.flatnonzero(alive)
    return graph.subgraph(keep), keep


def apply_anchor_dropout(graph, cfg, rng, anchors=None):
    """Drop each candidate anchor's neighbours with ``cfg.anchor_dropout_rate``.

    ``anchors`` defaults to every anchor node in the graph.
    """
    if anchors is None:
        anchors = np.flatnonzero(graph.anchors)
    anchors = np.asarray(anchors, dtype=np.int64)
    hit = anchors[rng.random(anchors.size) < cfg.anchor_dropout_rate]
    return drop_anchor_neighbors(graph, hit)[0]


def sample_negatives(dist, k, exclude, rng):
    """``k`` i.i.d. draws from ``dist`` renormalized without ``exclude``."""
    p = np.array(dist, dtype=np.float64)
    ex = [e for e in exclude if 0 <= e < p.size]
    p[ex] = 0.0
    total = p.sum()
    if total <= 0:
        raise EmptySupport("no probability mass outside the excluded ids")
    return rng.choice(p.size, size=k, p=p / total)


def prepare_sample(graph, cfg, rng, space):
    """Mask plan, anchor dropout for masked anchors, then corruption.

    Returns ``(corrupted_graph, plan)`` with plan indices in the new graph.
    """
    plan = sample_mask_plan(graph, cfg, rng, space)
    masked_anchors = np.array([e.node for e in plan if graph.anchors[e.node]], dtype=np.int64)
    hit = masked_anchors[rng.random(masked_anchors.size) < cfg.anchor_dropout_rate]
    dropped, keep = drop_anchor_neighbors(graph, hit)
    if len(keep) != len(graph):
        remap = {int(old): new for new, old in enumerate(keep)}
        plan = MaskPlan([MaskEntry(remap[e.node], e.original, e.kind, e.action, e.replacement)
                         for e in plan if e.node in remap])
    return apply_plan(dropped, plan), plan


@dataclass
class BatchTargets:
    """Masked positions of a batch, grouped by node kind.

    ``entity_candidates`` is ``(n_entity_targets, k + 1)`` with the positive
    in column 0.
    """

    word: tuple
    relation: tuple
    entity: tuple
    entity_candidates: np.ndarray

    @property
    def count(self):
        return len(self.word[0]) + len(self.relation[0]) + len(self.entity[0])

    def entity_ids(self):
        return np.unique(self.entity_candidates)


def batch_targets(plans, dist=None, k=1, rng=None, exclude_mask_id=None):
    """Gather per-graph plans into batch targets, sampling entity negatives."""
    groups = {WORD: ([], [], []), RELATION: ([], [], []), ENTITY: ([], [], [])}
    cands = []
    for b, plan in enumerate(plans):
        for e in plan:
            bs, ns, ts = groups[e.kind]
            bs.append(b)
            ns.append(e.node)
            ts.append(e.original)
            if e.kind == ENTITY:
                negs = sample_negatives(dist, k, {e.original}, rng)
                cands.append(np.concatenate([[e.original], negs]))
    as_arrays = {kind: tuple(np.asarray(x, dtype=np.int64) for x in g) for kind, g in groups.items()}
    cand = np.asarray(cands, dtype=np.int64).reshape(-1, k + 1)
    return BatchTargets(as_arrays[WORD], as_arrays[RELATION], as_arrays[ENTITY], cand)


def _softmax_ce(logits, targets):
    z = logits - logits.max(-1, keepdims=True)
    logsum = np.log(np.exp(z).sum(-1, keepdims=True))
    logp = z - logsum
    ce = -logp[np.arange(len(targets)), targets]
    grad = np.exp(logp)
    grad[np.arange(len(targets)), targets] -= 1.0
    return ce, grad


def loss(hidden, targets, params, entity_rows, cfg):
    """Weighted mean cross-entropy over all masked nodes.

    Returns a :class:`~wklm.encoder.LossOutput`; ``parts`` holds per-kind
    mean losses and the raw logits for each kind.
    """
    d_hidden = np.zeros_like(hidden)
    head_grads = {}
    parts = {"word": 0.0, "relation": 0.0, "entity": 0.0}
    logits_out = {}
    n = targets.count
    if n == 0:
        return LossOutput(0.0, d_hidden, head_grads, None, parts)
    total = 0.0
    for name, (bs, ns, ts), weight in (("word", targets.word, cfg.word_weight),
                                       ("relation", targets.relation, cfg.relation_weight)):
        if len(bs) == 0:
            continue
        h = hidden[bs, ns]
        W, b = params[f"{name}_head.W"], params[f"{name}_head.b"]
        logits = h @ W + b
        ce, g = _softmax_ce(logits, ts)
        g *= weight / n
        total += weight * ce.sum()
        parts[name] = float(ce.mean())
        logits_out[name] = logits
        head_grads[f"{name}_head.W"] = h.T @ g
        head_grads[f"{name}_head.b"] = g.sum(0)
        d_hidden[bs, ns] += g @ W.T
    row_grads = None
    bs, ns, _ = targets.entity
    if len(bs):
        weight = cfg.entity_weight
        h = hidden[bs, ns]
        Wp, bp = params["entity_proj.W"], params["entity_proj.b"]
        z = h @ Wp + bp
        slots = entity_rows.slots(targets.entity_candidates)
        C = entity_rows.vectors[slots]
        scores = np.einsum("nd,nkd->nk", z, C)
        ce, g = _softmax_ce(scores, np.zeros(len(bs), dtype=np.int64))
        g *= weight / n
        total += weight * ce.sum()
        parts["entity"] = float(ce.mean())
        logits_out["entity"] = scores
        dz = np.einsum("nk,nkd->nd", g, C)
        row_grads = np.zeros_like(entity_rows.vectors)
        np.add.at(row_grads, slots, g[:, :, None] * z[:, None, :])
        head_grads["entity_proj.W"] = h.T @ dz
        head_grads["entity_proj.b"] = dz.sum(0)
        d_hidden[bs, ns] += dz @ Wp.T
    parts["logits"] = logits_out
    return LossOutput(float(total / n), d_hidden, head_grads, row_grads, parts)
