"""Relation completion over word-knowledge graphs and cloze probing.

A completion query is a sentence plus a triplet ``(h, r, t)``; the model
sees the sentence's word graph, the head anchor, a masked relation node and
the tail, and ranks all relations for the masked slot. In the inductive
setting the head was never seen in training: its anchor carries the entity
MASK embedding and its known neighbour triplets are attached instead.
"""

import csv
import os
from collections import Counter, defaultdict
from dataclasses import dataclass, field

import numpy as np

from . import encoder
from .encoder import EntityRows
from .errors import (EmptyRanks, InsufficientData, MalformedLine, MultipleMasks, UnknownEntity, UnknownRelation,
                     UnseenWithoutNeighbors, VersionMismatch, WKLMError)
from .graph import ENTITY, WORD, BuilderConfig, GraphAssembler, build_graph, link_mentions, to_batch
from .kg import build_alias_index
from .store import EmbeddingStore
from .text import MASK_ID, normalize

TRANSDUCTIVE, INDUCTIVE = "transductive", "inductive"


class EmptyProbes(WKLMError, ValueError):
    pass


@dataclass
class Pretrained:
    """A trained model with the vocabularies needed to build its inputs."""

    params: object
    store: EmbeddingStore
    vocab: object
    kg: object
    alias_index: object

    @classmethod
    def load(cls, model_path, store_path=None, vocab_dir=None):
        from .trainer import load_vocab_dir

        model_dir = os.path.dirname(os.path.abspath(model_path))
        params = encoder.load_checkpoint(model_path)
        store = EmbeddingStore.restore(store_path or os.path.join(model_dir, "store.bin"))
        vocab, kg, aliases = load_vocab_dir(vocab_dir or model_dir)
        cfg = params.config
        if store.dim != cfg.d_model or len(store) != cfg.n_entities:
            raise VersionMismatch(f"store is {len(store)}x{store.dim}, model expects "
                                  f"{cfg.n_entities}x{cfg.d_model}")
        if len(vocab) != cfg.n_words or kg.n_relations != cfg.n_relations or kg.n_entities != cfg.n_entities:
            raise VersionMismatch("vocabulary sizes do not match the checkpoint header")
        return cls(params, store, vocab, kg, build_alias_index(aliases, vocab, kg))

    def entity_rows(self, batch):
        ids = batch.ids[(batch.kinds == ENTITY) & (batch.ids != self.params.config.entity_mask_id)]
        ids = np.unique(ids)
        return EntityRows(ids, self.store.read_rows(ids)[0].astype(self.params["word_emb"].dtype))

    def hidden(self, graphs):
        batch = to_batch(graphs)
        return batch, encoder.forward(batch, self.params, self.entity_rows(batch))


@dataclass
class CompletionQuery:
    tokens: list
    head: str
    relation: str
    tail: str
    setting: str = TRANSDUCTIVE
    neighbors: list = field(default_factory=list)

    @property
    def sentence(self):
        return " ".join(self.tokens)


@dataclass
class RankingResult:
    ranks: np.ndarray
    mr: float
    mrr: float
    hits: dict

    def summary(self):
        return (f"MR {self.mr:.2f} MRR {self.mrr:.4f} HITS@1 {self.hits[1]:.4f} "
                f"HITS@3 {self.hits[3]:.4f} HITS@10 {self.hits[10]:.4f}")


def metrics(ranks, ks=(1, 3, 10)):
    """Mean rank, mean reciprocal rank and HITS@k of 1-based ranks."""
    ranks = np.asarray(ranks, dtype=np.float64)
    if ranks.size == 0:
        raise EmptyRanks("no ranks to summarize")
    if ranks.min() < 1:
        raise ValueError("ranks are 1-based")
    return RankingResult(ranks.astype(np.int64), float(ranks.mean()), float(np.mean(1.0 / ranks)),
                         {k: float(np.mean(ranks <= k)) for k in ks})


def rank_scores(scores):
    """Indices by descending score, ties broken by ascending index."""
    scores = np.asarray(scores)
    return np.lexsort((np.arange(scores.size), -scores))


def _find_span(tokens, words):
    n = len(words)
    for i in range(len(tokens) - n + 1):
        if tokens[i:i + n] == words:
            return i, i + n
    return None


def query_graph(query, model):
    """WK graph for a completion query and the index of its masked relation node."""
    kg, cfg = model.kg, model.params.config
    if query.relation not in kg.relation_index:
        raise UnknownRelation(query.relation)
    if query.tail not in kg.entity_index:
        raise UnknownEntity(query.tail)
    inductive = query.setting == INDUCTIVE
    if inductive and not query.neighbors:
        raise UnseenWithoutNeighbors(f"unseen head {query.head!r} has no neighbour triplets")
    if not inductive and query.head not in kg.entity_index:
        raise UnknownEntity(query.head)
    head_key = cfg.entity_mask_id if inductive else kg.entity_index[query.head]
    tail_id = kg.entity_index[query.tail]

    words = [w.lower() for w in query.tokens]
    ids = [model.vocab.lookup(w) for w in words]
    links = link_mentions(ids, model.alias_index)
    head_id = kg.entity_index.get(query.head)
    head_span = next((span for span, ent in links if ent == head_id), None)
    if head_span is None:
        head_span = _find_span(words, normalize(query.head.replace("_", " ")))
    if head_span is not None:
        hs, he = head_span
        links = [(span, ent) for span, ent in links
                 if span[1] <= hs or span[0] >= he]
        links = [(span, ent) for span, ent in links if ent != head_id]
        links.append(((hs, he), head_key))

    asm = GraphAssembler()
    last = asm.add_sentence(ids, links)
    head_idx = asm.entity_node.get(head_key)
    if head_idx is None:
        head_idx = asm.append_anchor(head_key, last + 1)
    rel_idx = asm.attach(head_idx, cfg.relation_mask_id, tail_id)
    if inductive:
        for rel_name, tail_name in query.neighbors:
            if rel_name not in kg.relation_index:
                raise UnknownRelation(rel_name)
            if tail_name not in kg.entity_index:
                raise UnknownEntity(tail_name)
            asm.attach(head_idx, kg.relation_index[rel_name], kg.entity_index[tail_name])
    return asm.graph(), rel_idx


def relation_scores(queries, model, batch_size=64):
    """Relation-head logits at each query's masked relation node."""
    out = []
    for start in range(0, len(queries), batch_size):
        built = [query_graph(q, model) for q in queries[start:start + batch_size]]
        batch, H = model.hidden([g for g, _ in built])
        h = H[np.arange(len(built)), [r for _, r in built]]
        out.append(h @ model.params["relation_head.W"] + model.params["relation_head.b"])
    return np.concatenate(out) if out else np.zeros((0, model.kg.n_relations))


def completion_rank(query, model):
    """Relation ids ordered from most to least likely for the query."""
    return rank_scores(relation_scores([query], model)[0])


def evaluate_completion(queries, model, batch_size=64):
    """1-based rank of each query's gold relation."""
    scores = relation_scores(queries, model, batch_size)
    ranks = []
    for q, s in zip(queries, scores):
        order = rank_scores(s)
        ranks.append(int(np.flatnonzero(order == model.kg.relation_index[q.relation])[0]) + 1)
    return np.array(ranks, dtype=np.int64)


def majority_ranks(queries, train_triples):
    """Ranks under a baseline that always orders relations by training frequency."""
    freq = Counter(r for _, r, _ in train_triples)
    names = sorted(freq, key=lambda r: (-freq[r], r))
    known = {r: i + 1 for i, r in enumerate(names)}
    worst = len(names) + 1
    return np.array([known.get(q.relation, worst) for q in queries], dtype=np.int64)


# ---------------------------------------------------------------------------
# query files


def parse_query_line(line, line_no=None):
    fields = line.rstrip("\n").split("\t")
    if len(fields) not in (5, 6):
        raise MalformedLine(line_no, "expected sentence, head, relation, tail, setting[, neighbours]")
    sentence, head, relation, tail, setting = (f.strip() for f in fields[:5])
    if setting not in (TRANSDUCTIVE, INDUCTIVE):
        raise MalformedLine(line_no, f"unknown setting {setting!r}")
    nbrs = []
    if len(fields) == 6 and fields[5].strip():
        for pair in fields[5].split(","):
            rel, _, tl = pair.strip().partition(":")
            nbrs.append((rel, tl))
    return CompletionQuery(normalize(sentence), head, relation, tail, setting, nbrs)


def format_query_line(q):
    row = [q.sentence, q.head, q.relation, q.tail, q.setting]
    if q.neighbors:
        row.append(",".join(f"{r}:{t}" for r, t in q.neighbors))
    return "\t".join(row)


def read_queries(path, kg=None):
    """Parse a query file; with ``kg`` given, names are checked and errors carry line numbers."""
    queries = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            q = parse_query_line(line, line_no)
            if kg is not None:
                for rel in [q.relation] + [r for r, _ in q.neighbors]:
                    if rel not in kg.relation_index:
                        raise UnknownRelation(rel, line_no)
                names = [q.tail] + [t for _, t in q.neighbors]
                if q.setting == TRANSDUCTIVE:
                    names.append(q.head)
                for name in names:
                    if name not in kg.entity_index:
                        raise UnknownEntity(name, line_no)
                if q.setting == INDUCTIVE and not q.neighbors:
                    raise UnseenWithoutNeighbors(f"line {line_no}: inductive query without neighbours")
            queries.append(q)
    return queries


def write_queries(path, queries):
    with open(path, "w", encoding="utf-8") as fh:
        fh.writelines(format_query_line(q) + "\n" for q in queries)


def write_results(path, queries, ranks):
    result = metrics(ranks)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["index", "setting", "head", "relation", "tail", "rank"])
        for i, (q, r) in enumerate(zip(queries, ranks)):
            writer.writerow([i, q.setting, q.head, q.relation, q.tail, int(r)])
        fh.write("# " + result.summary() + "\n")
    return result


# ---------------------------------------------------------------------------
# splits


@dataclass
class SplitConfig:
    n_transductive: int = 250
    n_inductive: int = 60
    min_inductive_degree: int = 3


@dataclass
class CompletionSplits:
    train_triples: list
    train_sentences: list
    transductive: list
    inductive: list
    inductive_entities: list

    def leak_report(self):
        """Violations of the train/eval separation; empty when clean."""
        train = set(self.train_triples)
        problems = []
        for q in self.transductive + self.inductive:
            if (q.head, q.relation, q.tail) in train:
                problems.append(f"query triplet {(q.head, q.relation, q.tail)} in training KG")
        seen = {e for h, _, t in self.train_triples for e in (h, t)}
        for e in self.inductive_entities:
            if e in seen:
                problems.append(f"inductive entity {e} appears in training KG")
        for text, trip in self.train_sentences:
            if trip not in train:
                problems.append(f"training sentence realizes withheld triplet {trip}")
            if trip[0] in self.inductive_entities or trip[2] in self.inductive_entities:
                problems.append(f"training sentence mentions inductive entity: {text}")
        for q in self.transductive:
            if q.head not in seen or q.tail not in seen:
                problems.append(f"transductive entity unseen: {(q.head, q.tail)}")
        return problems


def make_completion_splits(triples, sentences, cfg, rng):
    """Withhold triplets for transductive and inductive relation completion.

    Parameters
    ----------
    triples : list of (head, relation, tail) names
    sentences : list of (text, triplet)
        Sentence realizations; a triplet's sentences leave the training
        corpus together with the triplet.
    cfg : SplitConfig
    rng : np.random.Generator
    """
    triples = list(dict.fromkeys(triples))
    realized = defaultdict(list)
    for text, trip in sentences:
        realized[trip].append(text)
    if len(triples) < cfg.n_transductive + cfg.n_inductive:
        raise InsufficientData(f"{len(triples)} triplets cannot supply "
                               f"{cfg.n_transductive} + {cfg.n_inductive} queries")

    out_deg = defaultdict(list)
    for trip in triples:
        out_deg[trip[0]].append(trip)

    # inductive: hold out every triplet touching the chosen heads
    unseen = set()
    inductive = []
    heads = [h for h in sorted(out_deg) if len(out_deg[h]) >= cfg.min_inductive_degree
             and all(realized[t] for t in out_deg[h])]
    for i in rng.permutation(len(heads)):
        if len(inductive) >= cfg.n_inductive:
            break
        head = heads[i]
        trial = unseen | {head}
        remaining = [t for t in triples if t[0] not in trial and t[2] not in trial]
        seen = {e for h, _, t in remaining for e in (h, t)}
        own = [t for t in out_deg[head] if t[2] in seen]
        if len(own) < 2:
            continue
        unseen = trial
        for trip in own:
            nbrs = [(r, tl) for _, r, tl in own if (r, tl) != trip[1:]]
            text = realized[trip][int(rng.integers(len(realized[trip])))]
            inductive.append(CompletionQuery(normalize(text), *trip, INDUCTIVE, nbrs))
    if len(inductive) < cfg.n_inductive:
        raise InsufficientData(f"only {len(inductive)} inductive queries available")
    # later picks may have made earlier neighbours unseen
    remaining = [t for t in triples if t[0] not in unseen and t[2] not in unseen]
    seen = {e for h, _, t in remaining for e in (h, t)}
    for q in inductive:
        q.neighbors = [(r, t) for r, t in q.neighbors if t in seen]
    inductive = [q for q in inductive if q.neighbors and q.tail in seen]
    if len(inductive) < cfg.n_inductive:
        raise InsufficientData(f"only {len(inductive)} inductive queries survive the holdout")

    # transductive: withhold triplets whose entities and relation stay in training
    ent_count = Counter(e for h, _, t in remaining for e in (h, t))
    rel_count = Counter(r for _, r, _ in remaining)
    withheld = set()
    transductive = []
    for i in rng.permutation(len(remaining)):
        if len(transductive) >= cfg.n_transductive:
            break
        h, r, t = trip = remaining[i]
        if not realized[trip] or h == t or ent_count[h] < 2 or ent_count[t] < 2 or rel_count[r] < 2:
            continue
        ent_count[h] -= 1
        ent_count[t] -= 1
        rel_count[r] -= 1
        withheld.add(trip)
        text = realized[trip][int(rng.integers(len(realized[trip])))]
        transductive.append(CompletionQuery(normalize(text), h, r, t, TRANSDUCTIVE))
    if len(transductive) < cfg.n_transductive:
        raise InsufficientData(f"only {len(transductive)} transductive queries available")

    train = [t for t in remaining if t not in withheld]
    train_set = set(train)
    train_sentences = [(text, trip) for text, trip in sentences if trip in train_set]
    return CompletionSplits(train, train_sentences, transductive, inductive, sorted(unseen))


# ---------------------------------------------------------------------------
# cloze probing


def probe_graph(tokens, model, max_neighbors=0, rng=None):
    """Word graph for a probe, optionally with linked knowledge context."""
    links = link_mentions(tokens, model.alias_index) if max_neighbors else []
    rng = rng if rng is not None else np.random.default_rng(0)
    return build_graph(list(tokens), links, model.kg, BuilderConfig(max_neighbors), rng)


def cloze_p_at_1(probes, model, max_neighbors=0, batch_size=64, seed=0):
    """Fraction of probes whose gold word gets the top word-head logit.

    Each probe is ``(token_ids, gold_word_id)`` with exactly one MASK id.
    ``seed`` drives neighbour sampling when ``max_neighbors`` is non-zero.
    """
    if not probes:
        raise EmptyProbes("no probes given")
    graphs, slots = [], []
    rng = np.random.default_rng(seed)
    for tokens, _ in probes:
        if list(tokens).count(MASK_ID) != 1:
            raise MultipleMasks(f"probe needs exactly one mask, got {list(tokens).count(MASK_ID)}")
        g = probe_graph(tokens, model, max_neighbors, rng)
        graphs.append(g)
        slots.append(int(np.flatnonzero((g.kinds == WORD) & (g.ids == MASK_ID))[0]))
    hits = 0
    for start in range(0, len(graphs), batch_size):
        chunk = graphs[start:start + batch_size]
        _, H = model.hidden(chunk)
        h = H[np.arange(len(chunk)), slots[start:start + batch_size]]
        logits = h @ model.params["word_head.W"] + model.params["word_head.b"]
        for row, (_, gold) in zip(logits, probes[start:start + batch_size]):
            hits += int(rank_scores(row)[0] == gold)
    return hits / len(probes)
