"""Pretraining loop: corpus to graphs, masked-node loss, AdamW updates.

Dense parameters are updated by one serial AdamW; entity rows go through
the :class:`~wklm.store.EmbeddingStore`. All randomness is derived from the
run seed plus a fixed stream tag and an index (sentence, epoch or step), so
a run resumed from a checkpoint replays exactly the same steps.
"""

import csv
import dataclasses
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import encoder, objective
from .encoder import EntityRows, ModelConfig, compute_gradients, init_params
from .errors import NonFiniteLoss, VersionMismatch
from .graph import ENTITY, BuilderConfig, build_graph, link_mentions, read_graphs, to_batch, write_graphs
from .kg import TripletStore, build_alias_index, load_triples, negative_distribution, read_alias_pairs
from .objective import ObjectiveConfig, TokenSpace, batch_targets, prepare_sample
from .optim import AdamW, AdamWConfig
from .store import EmbeddingStore
from .text import Vocabulary, tokenize

log = logging.getLogger(__name__)

METRIC_FIELDS = ("step", "total_loss", "word_loss", "entity_loss", "relation_loss", "grad_norm")

# stream tags for seed derivation
_BUILD, _ORDER, _STEP, _INIT = 1, 2, 3, 4


@dataclass
class TrainConfig:
    batch_size: int = 16
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-6
    weight_decay: float = 0.01
    epochs: int = 1
    seed: int = 42
    max_neighbors: int = 15
    checkpoint_interval: int = 0
    max_steps: int = 0
    clip_norm: float = 1.0
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    d_ff: int = 256
    max_pos: int = 128
    dtype: str = "float32"
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)

    def __post_init__(self):
        for name in ("batch_size", "epochs", "d_model", "n_heads", "n_layers", "d_ff", "max_pos"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("lr", "weight_decay", "max_neighbors", "checkpoint_interval", "max_steps", "clip_norm"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        self.adamw  # validates betas and eps

    @property
    def adamw(self):
        return AdamWConfig(self.lr, self.beta1, self.beta2, self.eps, self.weight_decay)

    @property
    def builder(self):
        return BuilderConfig(self.max_neighbors)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["objective"]["action_split"] = list(d["objective"]["action_split"])
        return d


def parse_config(text, base=None):
    """Parse flat ``key=value`` lines into a :class:`TrainConfig`.

    Objective fields may be given bare or as ``objective.<name>``.
    """
    cfg = dataclasses.asdict(base or TrainConfig())
    obj = cfg.pop("objective")
    top = {f.name: f for f in dataclasses.fields(TrainConfig) if f.name != "objective"}
    sub = {f.name: f for f in dataclasses.fields(ObjectiveConfig)}
    for line_no, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {line_no}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key.startswith("objective."):
            key = key[len("objective."):]
            target, fields = obj, sub
        elif key in top:
            target, fields = cfg, top
        else:
            target, fields = obj, sub
        if key not in fields:
            raise ValueError(f"config line {line_no}: unknown key {key!r}")
        target[key] = _coerce(fields[key], value, line_no)
    return TrainConfig(**cfg, objective=ObjectiveConfig(**obj))


def _coerce(f, value, line_no):
    kind = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
    try:
        if kind == "int":
            return int(value)
        if kind == "float":
            return float(value)
        if kind == "tuple":
            return tuple(float(x) for x in value.replace(",", " ").split())
        return value
    except ValueError:
        raise ValueError(f"config line {line_no}: bad value {value!r} for {f.name}") from None


def load_config(path):
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


# ---------------------------------------------------------------------------
# corpus -> graphs


@dataclass
class Dataset:
    """Everything a pretraining run consumes."""

    vocab: Vocabulary
    kg: TripletStore
    aliases: list
    graphs: list
    n_sentences: int = 0
    n_dropped: int = 0

    @property
    def alias_index(self):
        return build_alias_index(self.aliases, self.vocab, self.kg)

    def stats(self):
        kinds = np.zeros(3, dtype=np.int64)
        for g in self.graphs:
            kinds += np.bincount(g.kinds, minlength=3)[:3]
        return {
            "sentences": self.n_sentences,
            "graphs": len(self.graphs),
            "dropped_anchor_free": self.n_dropped,
            "word_nodes": int(kinds[0]),
            "entity_nodes": int(kinds[1]),
            "relation_nodes": int(kinds[2]),
        }

    def save(self, out_dir):
        os.makedirs(out_dir, exist_ok=True)
        write_graphs(os.path.join(out_dir, "graphs.wkg"), self.graphs)
        save_vocab(os.path.join(out_dir, "vocab.json"), self.vocab, self.kg, self.aliases)
        write_triples(os.path.join(out_dir, "triples.tsv"), self.kg)
        with open(os.path.join(out_dir, "stats.txt"), "w", encoding="utf-8") as fh:
            for key, value in self.stats().items():
                fh.write(f"{key}\t{value}\n")

    @classmethod
    def load(cls, data_dir):
        vocab, kg, aliases = load_vocab_dir(data_dir)
        graphs = read_graphs(os.path.join(data_dir, "graphs.wkg"))
        stats = {}
        stats_path = os.path.join(data_dir, "stats.txt")
        if os.path.exists(stats_path):
            with open(stats_path, encoding="utf-8") as fh:
                stats = dict(line.rstrip("\n").split("\t") for line in fh if "\t" in line)
        return cls(vocab, kg, aliases, graphs, int(stats.get("sentences", len(graphs))),
                   int(stats.get("dropped_anchor_free", 0)))


def write_triples(path, kg):
    with open(path, "w", encoding="utf-8") as fh:
        for h, r, t in kg.named_triples():
            fh.write(f"{h}\t{r}\t{t}\n")


def save_vocab(path, vocab, kg, aliases):
    data = {
        "words": vocab.itos[vocab.n_special:],
        "entities": kg.entities,
        "relations": kg.relations,
        "entity_freq": kg.entity_freq.tolist(),
        "aliases": [[surface, name] for _, surface, name in aliases],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(data, fh, indent=0)


def load_vocab_dir(data_dir):
    """Word vocabulary, triplet store and alias records saved in a directory."""
    with open(os.path.join(data_dir, "vocab.json"), encoding="utf-8") as fh:
        data = json.load(fh)
    kg = load_triples(os.path.join(data_dir, "triples.tsv"))
    for name in data["entities"]:
        kg.add_entity(name)
    if kg.entities != data["entities"] or kg.relations != data["relations"]:
        raise VersionMismatch(f"vocab.json and triples.tsv in {data_dir} disagree on ids")
    if "entity_freq" in data:
        kg.set_frequencies(data["entity_freq"])
    aliases = [(i + 1, s, n) for i, (s, n) in enumerate(data["aliases"])]
    return Vocabulary.from_list(data["words"]), kg, aliases


def read_corpus(path):
    with open(path, encoding="utf-8") as fh:
        return [line.strip() for line in fh if line.strip()]


def build_graphs(sentences, vocab, alias_index, kg, seed=42, max_neighbors=15, workers=1):
    """One graph per sentence, anchor-free ones included.

    Sentence ``i`` samples its knowledge context from a generator seeded by
    ``(seed, i)``, so the result does not depend on ``workers``.
    """
    bcfg = BuilderConfig(max_neighbors)

    def one(item):
        i, sentence = item
        tokens = tokenize(sentence, vocab)
        rng = np.random.default_rng([seed, _BUILD, i])
        return build_graph(tokens, link_mentions(tokens, alias_index), kg, bcfg, rng)

    items = list(enumerate(sentences))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(one, items, chunksize=64))
    return [one(item) for item in items]


def build_dataset(sentences, kg, alias_pairs, seed=42, max_neighbors=15, workers=1):
    """Vocabulary, alias index and graphs for a corpus; anchor-free graphs are dropped."""
    vocab = Vocabulary.build(list(sentences) + [surface for _, surface, _ in alias_pairs])
    index = build_alias_index(alias_pairs, vocab, kg)
    built = build_graphs(sentences, vocab, index, kg, seed, max_neighbors, workers)
    graphs = [g for g in built if g.has_anchor]
    dropped = len(built) - len(graphs)
    if dropped:
        log.info("dropped %d of %d graphs without anchor nodes", dropped, len(built))
    return Dataset(vocab, kg, list(alias_pairs), graphs, len(built), dropped)


def build_dataset_from_files(corpus_path, triples_path, aliases_path, seed=42, max_neighbors=15, workers=1):
    kg = load_triples(triples_path)
    pairs = read_alias_pairs(aliases_path) if aliases_path else []
    return build_dataset(read_corpus(corpus_path), kg, pairs, seed, max_neighbors, workers)


# ---------------------------------------------------------------------------
# training


@dataclass
class StepMetrics:
    step: int
    total_loss: float
    word_loss: float
    entity_loss: float
    relation_loss: float
    grad_norm: float

    def row(self):
        return [self.step] + [repr(float(getattr(self, f))) for f in METRIC_FIELDS[1:]]


class Trainer:
    """Holds model, store and optimizer state for one pretraining run."""

    def __init__(self, cfg, dataset, params=None, store=None):
        self.cfg = cfg
        self.dataset = dataset
        kg = dataset.kg
        self.model_config = ModelConfig(
            n_words=len(dataset.vocab), n_relations=kg.n_relations, n_entities=kg.n_entities,
            d_model=cfg.d_model, n_heads=cfg.n_heads, n_layers=cfg.n_layers, d_ff=cfg.d_ff,
            max_pos=cfg.max_pos, dtype=cfg.dtype)
        init_rng = np.random.default_rng([cfg.seed, _INIT])
        self.params = params if params is not None else init_params(self.model_config, init_rng)
        self.store = store if store is not None else EmbeddingStore(kg.n_entities, cfg.d_model, cfg.dtype, init_rng)
        self.optimizer = AdamW(cfg.adamw)
        self.space = TokenSpace.from_config(self.model_config)
        self.neg_dist = negative_distribution(kg)
        self.step = 0

    def train_step(self, graphs, rng):
        """One forward/backward/update cycle on a list of graphs.

        Raises :class:`NonFiniteLoss` (and applies nothing) if the loss or any
        gradient is not finite.
        """
        cfg = self.cfg
        samples = [prepare_sample(g, cfg.objective, rng, self.space) for g in graphs]
        batch = to_batch([s[0] for s in samples])
        targets = batch_targets([s[1] for s in samples], self.neg_dist, cfg.objective.negatives, rng)
        node_ids = batch.ids[(batch.kinds == ENTITY) & (batch.ids != self.space.mask_id(ENTITY))]
        ids = np.union1d(node_ids, targets.entity_ids()).astype(np.int64)
        rows = EntityRows(ids, self.store.read_rows(ids)[0])

        def loss_fn(hidden):
            return objective.loss(hidden, targets, self.params, rows, cfg.objective)

        out, grads, row_grads = compute_gradients(batch, self.params, rows, loss_fn)
        if row_grads is None:
            row_grads = np.zeros_like(rows.vectors)
        sq = sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())
        sq += float(np.sum(np.square(row_grads, dtype=np.float64)))
        norm = float(np.sqrt(sq))
        if not np.isfinite(norm):
            raise NonFiniteLoss("gradient norm is not finite")
        if cfg.clip_norm and norm > cfg.clip_norm:
            scale = cfg.clip_norm / (norm + 1e-6)
            grads = {k: g * scale for k, g in grads.items()}
            row_grads = row_grads * scale
        self.optimizer.step(self.params.tensors, grads)
        if ids.size:
            self.store.apply_sparse_grads(ids, row_grads, cfg.adamw)
        self.step += 1
        return StepMetrics(self.step, out.total, out.parts["word"], out.parts["entity"],
                           out.parts["relation"], norm)

    def batches(self):
        """Yield ``(global_step, graphs)`` over all epochs in a seeded order."""
        graphs = self.dataset.graphs
        n, bs = len(graphs), self.cfg.batch_size
        step = 0
        for epoch in range(self.cfg.epochs):
            order = np.random.default_rng([self.cfg.seed, _ORDER, epoch]).permutation(n)
            for start in range(0, n, bs):
                step += 1
                yield step, [graphs[i] for i in order[start:start + bs]]

    def step_rng(self, step):
        return np.random.default_rng([self.cfg.seed, _STEP, step])

    # checkpoint files

    def save(self, out_dir, suffix=""):
        os.makedirs(out_dir, exist_ok=True)
        encoder.save_checkpoint(os.path.join(out_dir, "model.ckpt" + suffix), self.params)
        self.store.snapshot(os.path.join(out_dir, "store.bin" + suffix))
        names = list(self.params.tensors)
        with open(os.path.join(out_dir, "optim.bin" + suffix), "wb") as fh:
            fh.write(np.int64(self.optimizer.t).tobytes())
            encoder.write_tensors(fh, [self.optimizer.m.get(k, np.zeros_like(self.params[k])) for k in names]
                                  + [self.optimizer.v.get(k, np.zeros_like(self.params[k])) for k in names])
        with open(os.path.join(out_dir, "state.json" + suffix), "w", encoding="utf-8") as fh:
            json.dump({"step": self.step, "config": self.cfg.to_dict()}, fh, indent=1)

    def load(self, out_dir):
        params = encoder.load_checkpoint(os.path.join(out_dir, "model.ckpt"), self.cfg.dtype)
        for name, arr in params.tensors.items():
            if arr.shape != self.params[name].shape:
                raise VersionMismatch(f"checkpoint tensor {name} has shape {arr.shape}")
        self.params = params
        self.store = EmbeddingStore.restore(os.path.join(out_dir, "store.bin"), self.cfg.d_model,
                                            self.dataset.kg.n_entities)
        names = list(self.params.tensors)
        with open(os.path.join(out_dir, "optim.bin"), "rb") as fh:
            self.optimizer.t = int(np.frombuffer(fh.read(8), dtype=np.int64)[0])
            arrays = encoder.read_tensors(fh)
        dt = np.dtype(self.cfg.dtype)
        self.optimizer.m = {k: a.astype(dt) for k, a in zip(names, arrays[:len(names)])}
        self.optimizer.v = {k: a.astype(dt) for k, a in zip(names, arrays[len(names):])}
        with open(os.path.join(out_dir, "state.json"), encoding="utf-8") as fh:
            self.step = json.load(fh)["step"]


@dataclass
class RunResult:
    out_dir: str
    steps: int
    metrics: list

    @property
    def metrics_path(self):
        return os.path.join(self.out_dir, "metrics.csv")


def _read_metrics(path, upto):
    if not os.path.exists(path):
        return []
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    return [r for r in rows[1:] if r and int(r[0]) <= upto]


def run(dataset, cfg, out_dir, resume=False):
    """Train on ``dataset`` and write checkpoints plus ``metrics.csv`` to ``out_dir``.

    With ``resume=True`` and a checkpoint in ``out_dir``, training continues
    from the saved step. ``cfg.max_steps`` (when non-zero) stops the run
    early, as if interrupted, after writing a checkpoint.
    """
    os.makedirs(out_dir, exist_ok=True)
    trainer = Trainer(cfg, dataset)
    metrics_path = os.path.join(out_dir, "metrics.csv")
    kept = []
    if resume and os.path.exists(os.path.join(out_dir, "state.json")):
        trainer.load(out_dir)
        kept = _read_metrics(metrics_path, trainer.step)
        log.info("resumed from step %d", trainer.step)
    save_vocab(os.path.join(out_dir, "vocab.json"), dataset.vocab, dataset.kg, dataset.aliases)
    write_triples(os.path.join(out_dir, "triples.tsv"), dataset.kg)
    if not dataset.graphs:
        log.warning("no graph contains an anchor node; nothing to train on")
    done = []
    with open(metrics_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRIC_FIELDS)
        writer.writerows(kept)
        for step, graphs in trainer.batches():
            if step <= trainer.step:
                continue
            if cfg.max_steps and step > cfg.max_steps:
                break
            try:
                m = trainer.train_step(graphs, trainer.step_rng(step))
            except NonFiniteLoss:
                fh.flush()
                trainer.save(out_dir, suffix=".partial")
                raise
            writer.writerow(m.row())
            done.append(m)
            if cfg.checkpoint_interval and step % cfg.checkpoint_interval == 0:
                fh.flush()
                trainer.save(out_dir)
    trainer.save(out_dir)
    for suffix_file in ("model.ckpt", "store.bin", "optim.bin", "state.json"):
        partial = os.path.join(out_dir, suffix_file + ".partial")
        if os.path.exists(partial):
            os.remove(partial)
    return RunResult(out_dir, trainer.step, done)
