"""Relation completion on withheld triplets, seen and unseen heads.

Takes a few minutes on one CPU core.

    python3 demos/04_completion_eval.py
"""

import tempfile

import numpy as np

from wklm import evaluation, synthetic, trainer
from wklm.kg import TripletStore

syn = synthetic.generate(seed=0)
splits = evaluation.make_completion_splits(syn.triples, syn.sentences, evaluation.SplitConfig(200, 50),
                                           np.random.default_rng(1))
print(f"training on {len(splits.train_triples)} triplets / {len(splits.train_sentences)} sentences")
print(f"withheld: {len(splits.transductive)} transductive queries, {len(splits.inductive)} inductive queries "
      f"about {len(splits.inductive_entities)} unseen entities")
assert not splits.leak_report()

kg = TripletStore.from_triples(splits.train_triples)
pairs = [(i + 1, s, n) for i, (s, n) in enumerate(syn.aliases) if n in kg.entity_index]
ds = trainer.build_dataset([t for t, _ in splits.train_sentences], kg, pairs)
cfg = trainer.parse_config("epochs=26\nmax_steps=2000\nnegatives=32")

with tempfile.TemporaryDirectory() as out:
    trainer.run(ds, cfg, out)
    model = evaluation.Pretrained.load(f"{out}/model.ckpt")

q = splits.inductive[0]
print(f"\nan inductive query: {q.sentence!r}")
print(f"  gold: {q.head} -[{q.relation}]-> {q.tail}; head known only through {q.neighbors}")
order = evaluation.completion_rank(q, model)
print("  model ranking:", [model.kg.relations[i] for i in order[:3]])

for name, queries in (("transductive", splits.transductive), ("inductive", splits.inductive)):
    ranks = evaluation.evaluate_completion(queries, model)
    base = evaluation.majority_ranks(queries, splits.train_triples)
    print(f"\n{name}")
    print("  model    ", evaluation.metrics(ranks).summary())
    print("  majority ", evaluation.metrics(base).summary())
