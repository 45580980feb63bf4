"""Knowledge-graph triplet store, alias index and sampling helpers."""

from collections import Counter, defaultdict

import numpy as np

from .errors import EmptyStore, MalformedLine, UnknownEntity
from .text import UNK_ID, normalize


class TripletStore:
    """Indexed (head, relation, tail) triplets with id vocabularies.

    Attributes
    ----------
    entities, relations : list of str
        Names indexed by id, in first-seen order.
    by_head : dict[int, list[tuple[int, int]]]
        Outgoing ``(relation_id, tail_id)`` pairs per head entity.
    entity_freq : np.ndarray
        Occurrences of each entity as head or tail, over raw input lines.
    """

    def __init__(self):
        self.entities = []
        self.relations = []
        self.entity_index = {}
        self.relation_index = {}
        self.by_head = defaultdict(list)
        self._seen = set()
        self._order = []
        self._freq = Counter()

    @property
    def n_entities(self):
        return len(self.entities)

    @property
    def n_relations(self):
        return len(self.relations)

    @property
    def n_triples(self):
        return len(self._seen)

    @property
    def entity_freq(self):
        return np.array([self._freq[i] for i in range(self.n_entities)], dtype=np.int64)

    def _entity_id(self, name):
        if name not in self.entity_index:
            self.entity_index[name] = len(self.entities)
            self.entities.append(name)
        return self.entity_index[name]

    def _relation_id(self, name):
        if name not in self.relation_index:
            self.relation_index[name] = len(self.relations)
            self.relations.append(name)
        return self.relation_index[name]

    def add(self, head, relation, tail):
        h = self._entity_id(head)
        r = self._relation_id(relation)
        t = self._entity_id(tail)
        self._freq[h] += 1
        self._freq[t] += 1
        if (h, r, t) not in self._seen:
            self._seen.add((h, r, t))
            self._order.append((h, r, t))
            self.by_head[h].append((r, t))

    def add_entity(self, name):
        """Register an entity name without any triplet (frequency stays 0)."""
        return self._entity_id(name)

    def entity_id(self, name):
        try:
            return self.entity_index[name]
        except KeyError:
            raise UnknownEntity(name) from None

    def degree(self, head):
        return len(self.by_head.get(head, ()))

    def triples(self):
        """All stored triplets as id tuples, in insertion order."""
        return list(self._order)

    def set_frequencies(self, freq):
        self._freq = Counter({i: int(f) for i, f in enumerate(freq)})

    def named_triples(self):
        return [(self.entities[h], self.relations[r], self.entities[t]) for h, r, t in self.triples()]

    @classmethod
    def from_triples(cls, triples):
        store = cls()
        for h, r, t in triples:
            store.add(h, r, t)
        if store.n_triples == 0:
            raise EmptyStore("no triplets")
        return store


def load_triples(path):
    """Read a tab-separated ``head, relation, tail`` file into a store."""
    store = TripletStore()
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            fields = line.split("\t")
            if len(fields) != 3 or not all(f.strip() for f in fields):
                raise MalformedLine(line_no, f"expected 3 tab-separated fields, got {len(fields)}")
            store.add(*(f.strip() for f in fields))
    if store.n_triples == 0:
        raise EmptyStore(f"no triplets in {path}")
    return store


def neighbors(store, head, max_k, rng):
    """Sample up to ``max_k`` outgoing ``(relation, tail)`` pairs of ``head``.

    Sampling is uniform without replacement over the head's own triplets;
    reverse edges are never followed. The returned pairs keep store order.
    """
    if not 0 <= head < store.n_entities:
        raise UnknownEntity(head)
    if max_k < 0:
        raise ValueError("max_k must be non-negative")
    pairs = store.by_head.get(head, [])
    if len(pairs) <= max_k:
        return list(pairs)
    picked = np.sort(rng.choice(len(pairs), size=max_k, replace=False))
    return [pairs[i] for i in picked]


def negative_distribution(store_or_freq, power=0.75):
    """Unigram distribution raised to ``power`` and renormalized."""
    freq = store_or_freq.entity_freq if isinstance(store_or_freq, TripletStore) else store_or_freq
    freq = np.asarray(freq, dtype=np.float64)
    if freq.size == 0 or freq.sum() <= 0:
        raise EmptyStore("no entity frequencies")
    weights = freq ** power
    return weights / weights.sum()


class AliasIndex:
    """Surface-form to entity-id table keyed by word-id tuples."""

    def __init__(self):
        self.surfaces = {}
        self.names = {}
        self.max_surface_len = 0

    def add(self, surface_ids, entity_id, surface_text=None):
        key = tuple(surface_ids)
        # surfaces with out-of-vocabulary words would match any unknown word
        if not key or UNK_ID in key:
            return
        self.surfaces.setdefault(key, entity_id)
        if surface_text is not None:
            self.names.setdefault(surface_text, entity_id)
        self.max_surface_len = max(self.max_surface_len, len(key))

    def get(self, surface_ids):
        return self.surfaces.get(tuple(surface_ids))

    def __len__(self):
        return len(self.surfaces)


def read_alias_pairs(path):
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            fields = line.split("\t")
            if len(fields) != 2 or not all(f.strip() for f in fields):
                raise MalformedLine(line_no, "expected surface<TAB>entity")
            pairs.append((line_no, fields[0], fields[1].strip()))
    return pairs


def build_alias_index(pairs, word_vocab, store):
    """Index ``(line_no, surface, entity_name)`` records."""
    index = AliasIndex()
    for line_no, surface, name in pairs:
        if name not in store.entity_index:
            raise UnknownEntity(name, line_no)
        words = normalize(surface)
        index.add([word_vocab.lookup(w) for w in words], store.entity_index[name], " ".join(words))
    return index


def load_aliases(path, word_vocab, store):
    """Read a ``surface<TAB>entity`` file into an :class:`AliasIndex`."""
    return build_alias_index(read_alias_pairs(path), word_vocab, store)
