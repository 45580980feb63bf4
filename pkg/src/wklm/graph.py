"""Word-knowledge graph construction, batching and binary serialization.

A graph holds a leading CLS word node, the sentence's word and anchor nodes
(a linked mention span collapses into one anchor entity node), and for each
anchor a star of sampled ``(relation, tail)`` triplets. Soft positions give
an anchor at position ``p`` relation nodes at ``p + 1`` and tails at ``p + 2``.
"""

import io
import struct
from dataclasses import dataclass

import numpy as np

from .errors import GraphTooLarge, MalformedLine, OverlappingSpans, SpanOutOfRange
from .kg import neighbors
from .text import CLS_ID, PAD_ID

WORD, ENTITY, RELATION, PAD_KIND = 0, 1, 2, 3
KIND_NAMES = ("word", "entity", "relation")

# exp(NEG_INF - max_logit) underflows to exactly 0 in float32 and float64
NEG_INF = -1e9

MAGIC = b"WKGR"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class Node:
    kind: int
    token_id: int
    position: int
    anchor: bool = False


@dataclass
class BuilderConfig:
    max_neighbors: int = 15


class WkGraph:
    """Heterogeneous undirected graph stored as parallel node arrays."""

    def __init__(self, kinds, ids, positions, anchors, adjacency):
        self.kinds = np.asarray(kinds, dtype=np.int8)
        self.ids = np.asarray(ids, dtype=np.int64)
        self.positions = np.asarray(positions, dtype=np.int64)
        self.anchors = np.asarray(anchors, dtype=bool)
        self.adjacency = np.asarray(adjacency, dtype=bool)

    @classmethod
    def from_nodes(cls, nodes, edges):
        n = len(nodes)
        adj = np.eye(n, dtype=bool)
        for i, j in edges:
            adj[i, j] = adj[j, i] = True
        return cls(
            [nd.kind for nd in nodes],
            [nd.token_id for nd in nodes],
            [nd.position for nd in nodes],
            [nd.anchor for nd in nodes],
            adj,
        )

    def __len__(self):
        return len(self.kinds)

    @property
    def nodes(self):
        return [
            Node(int(k), int(t), int(p), bool(a))
            for k, t, p, a in zip(self.kinds, self.ids, self.positions, self.anchors)
        ]

    @property
    def has_anchor(self):
        return bool(self.anchors.any())

    def copy(self):
        return WkGraph(self.kinds.copy(), self.ids.copy(), self.positions.copy(),
                       self.anchors.copy(), self.adjacency.copy())

    def __eq__(self, other):
        if not isinstance(other, WkGraph):
            return NotImplemented
        return (len(self) == len(other)
                and np.array_equal(self.kinds, other.kinds)
                and np.array_equal(self.ids, other.ids)
                and np.array_equal(self.positions, other.positions)
                and np.array_equal(self.anchors, other.anchors)
                and np.array_equal(self.adjacency, other.adjacency))

    def __repr__(self):
        counts = np.bincount(self.kinds, minlength=3)
        return (f"WkGraph(n={len(self)}, words={counts[WORD]}, entities={counts[ENTITY]}, "
                f"relations={counts[RELATION]}, anchors={int(self.anchors.sum())})")

    def relation_triples(self):
        """``(head_node, relation_node, tail_node)`` for every relation node.

        The head of a relation node is always an anchor; when both entity
        neighbours are anchors the head is the one at ``position - 1``.
        """
        out = []
        for r in np.flatnonzero(self.kinds == RELATION):
            nbrs = [j for j in np.flatnonzero(self.adjacency[r]) if j != r]
            if len(nbrs) != 2:
                raise ValueError(f"relation node {r} has {len(nbrs)} neighbours")
            a, b = nbrs
            if self.anchors[a] and (not self.anchors[b] or self.positions[a] == self.positions[r] - 1):
                out.append((int(a), int(r), int(b)))
            else:
                out.append((int(b), int(r), int(a)))
        return out

    def subgraph(self, keep):
        keep = np.asarray(keep, dtype=np.int64)
        return WkGraph(self.kinds[keep], self.ids[keep], self.positions[keep],
                       self.anchors[keep], self.adjacency[np.ix_(keep, keep)])


def link_mentions(tokens, alias_index):
    """Greedy leftmost-longest dictionary match.

    Returns non-overlapping ``((start, end), entity_id)`` spans in order.
    """
    links = []
    i, n = 0, len(tokens)
    max_len = alias_index.max_surface_len
    while i < n:
        for length in range(min(max_len, n - i), 0, -1):
            ent = alias_index.get(tokens[i:i + length])
            if ent is not None:
                links.append(((i, i + length), ent))
                i += length
                break
        else:
            i += 1
    return links


def _check_links(links, n_tokens):
    spans = sorted(links, key=lambda x: x[0][0])
    prev_end = 0
    for (start, end), _ in spans:
        if not 0 <= start < end <= n_tokens:
            raise SpanOutOfRange(f"span [{start}, {end}) outside {n_tokens} tokens")
        if start < prev_end:
            raise OverlappingSpans(f"span [{start}, {end}) overlaps previous span ending at {prev_end}")
        prev_end = end
    return spans


class GraphAssembler:
    """Incremental node/edge bookkeeping shared by graph builders.

    Entity nodes are keyed by entity id so each entity appears once.
    """

    def __init__(self):
        self.nodes = []
        self.edges = []
        self.entity_node = {}
        self.sequence = []

    def add_sentence(self, tokens, spans, cls=True):
        """Word graph: CLS at 0, then words and anchors at positions 1..m.

        ``spans`` are validated ``((start, end), entity_id)`` pairs; a span
        whose entity already has a node reuses it.
        """
        spans = _check_links(spans, len(tokens))
        if cls:
            self.sequence.append(len(self.nodes))
            self.nodes.append(Node(WORD, CLS_ID, 0))
        starts = {start: (end, ent) for (start, end), ent in spans}
        pos = 0
        i = 0
        while i < len(tokens):
            pos += 1
            if i in starts:
                end, ent = starts[i]
                if ent not in self.entity_node:
                    self.entity_node[ent] = len(self.nodes)
                    self.nodes.append(Node(ENTITY, ent, pos, anchor=True))
                    self.sequence.append(self.entity_node[ent])
                i = end
            else:
                self.sequence.append(len(self.nodes))
                self.nodes.append(Node(WORD, tokens[i], pos))
                i += 1
        self._connect_sequence()
        return pos

    def append_anchor(self, entity_id, position):
        """Add an anchor after the sentence, joined to the whole word graph."""
        idx = len(self.nodes)
        self.entity_node[entity_id] = idx
        self.nodes.append(Node(ENTITY, entity_id, position, anchor=True))
        for j in self.sequence:
            self.edges.append((j, idx))
        self.sequence.append(idx)
        return idx

    def _connect_sequence(self):
        seq = self.sequence
        for a, i_node in enumerate(seq):
            for j_node in seq[a + 1:]:
                self.edges.append((i_node, j_node))

    def anchors(self):
        return sorted((idx, ent) for ent, idx in self.entity_node.items() if self.nodes[idx].anchor)

    def attach(self, anchor_idx, relation_id, tail_id):
        """Relation node at ``p + 1`` and tail entity at ``p + 2`` (reused if present)."""
        p = self.nodes[anchor_idx].position
        rel_idx = len(self.nodes)
        self.nodes.append(Node(RELATION, relation_id, p + 1))
        self.edges.append((anchor_idx, rel_idx))
        if tail_id not in self.entity_node:
            self.entity_node[tail_id] = len(self.nodes)
            self.nodes.append(Node(ENTITY, tail_id, p + 2))
        self.edges.append((rel_idx, self.entity_node[tail_id]))
        return rel_idx

    def graph(self):
        return WkGraph.from_nodes(self.nodes, self.edges)


def build_graph(tokens, links, store, cfg, rng, cls=True):
    """Assemble a WK graph from word ids and linked mention spans.

    Parameters
    ----------
    tokens : list of int
        Word ids of the sentence.
    links : list of ((start, end), entity_id)
        Non-overlapping mention spans, e.g. from :func:`link_mentions`.
    store : TripletStore
        Source of knowledge context; only outgoing triplets are sampled.
    cfg : BuilderConfig
    rng : np.random.Generator
    cls : bool
        Prepend the CLS word node at position 0.
    """
    asm = GraphAssembler()
    asm.add_sentence(tokens, links, cls=cls)
    for anchor_idx, ent in asm.anchors():
        for rel, tail in neighbors(store, ent, cfg.max_neighbors, rng):
            if tail != ent:
                asm.attach(anchor_idx, rel, tail)
    return asm.graph()


@dataclass
class Batch:
    """Padded arrays for a list of graphs.

    ``mask`` is the additive attention bias: 0 where nodes are connected,
    ``NEG_INF`` for disconnected or padded pairs.
    """

    kinds: np.ndarray
    ids: np.ndarray
    positions: np.ndarray
    mask: np.ndarray
    valid: np.ndarray

    @property
    def shape(self):
        return self.kinds.shape

    def entity_ids(self):
        """Sorted unique entity ids referenced by non-masked entity slots."""
        sel = self.kinds == ENTITY
        return np.unique(self.ids[sel])


def to_batch(graphs, pad_to=None):
    if pad_to is None:
        pad_to = max(len(g) for g in graphs)
    for i, g in enumerate(graphs):
        if len(g) > pad_to:
            raise GraphTooLarge(i, len(g), pad_to)
    b = len(graphs)
    kinds = np.full((b, pad_to), PAD_KIND, dtype=np.int8)
    ids = np.full((b, pad_to), PAD_ID, dtype=np.int64)
    positions = np.zeros((b, pad_to), dtype=np.int64)
    mask = np.full((b, pad_to, pad_to), NEG_INF)
    valid = np.zeros((b, pad_to), dtype=bool)
    for i, g in enumerate(graphs):
        n = len(g)
        kinds[i, :n] = g.kinds
        ids[i, :n] = g.ids
        positions[i, :n] = g.positions
        valid[i, :n] = True
        mask[i, :n, :n] = np.where(g.adjacency, 0.0, NEG_INF)
    return Batch(kinds, ids, positions, mask, valid)


def _write_varint(buf, value):
    if value < 0:
        raise ValueError("varint must be non-negative")
    while True:
        byte = value & 0x7F
        value >>= 7
        if value:
            buf.write(bytes((byte | 0x80,)))
        else:
            buf.write(bytes((byte,)))
            return


def _read_varint(buf):
    shift = result = 0
    while True:
        raw = buf.read(1)
        if not raw:
            raise EOFError("truncated varint")
        byte = raw[0]
        result |= (byte & 0x7F) << shift
        if not byte & 0x80:
            return result
        shift += 7


def serialize_graph(graph):
    """Encode one graph as a self-describing binary record."""
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<HI", FORMAT_VERSION, len(graph)))
    for k, t, p, a in zip(graph.kinds, graph.ids, graph.positions, graph.anchors):
        buf.write(bytes((int(k),)))
        _write_varint(buf, int(t))
        _write_varint(buf, int(p))
        buf.write(bytes((int(a),)))
    buf.write(np.packbits(graph.adjacency.ravel()).tobytes())
    return buf.getvalue()


def _read_graph(buf):
    magic = buf.read(4)
    if not magic:
        return None
    if magic != MAGIC:
        raise MalformedLine(0, f"bad graph record magic {magic!r}")
    version, n = struct.unpack("<HI", buf.read(6))
    if version != FORMAT_VERSION:
        raise MalformedLine(0, f"unsupported graph format version {version}")
    kinds, ids, positions, anchors = [], [], [], []
    for _ in range(n):
        kinds.append(buf.read(1)[0])
        ids.append(_read_varint(buf))
        positions.append(_read_varint(buf))
        anchors.append(bool(buf.read(1)[0]))
    n_bytes = (n * n + 7) // 8
    bits = np.unpackbits(np.frombuffer(buf.read(n_bytes), dtype=np.uint8))[: n * n]
    return WkGraph(kinds, ids, positions, anchors, bits.reshape(n, n).astype(bool))


def deserialize_graph(data):
    return _read_graph(io.BytesIO(data))


def write_graphs(path, graphs):
    with open(path, "wb") as fh:
        for g in graphs:
            fh.write(serialize_graph(g))


def read_graphs(path):
    with open(path, "rb") as fh:
        buf = io.BytesIO(fh.read())
    graphs = []
    while (g := _read_graph(buf)) is not None:
        graphs.append(g)
    return graphs
