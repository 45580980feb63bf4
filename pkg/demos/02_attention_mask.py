"""Masked attention only mixes information along graph edges.

A tail entity is three hops away from the sentence words (tail, relation,
anchor, word). With fewer than three encoder layers, perturbing it cannot
change any word's output; with three it can.

    python3 demos/02_attention_mask.py
"""

import numpy as np

from wklm.encoder import ModelConfig, embed, encode, init_params
from wklm.graph import WORD, BuilderConfig, build_graph, to_batch
from wklm.kg import TripletStore
from wklm.encoder import EntityRows

rng = np.random.default_rng(0)
kg = TripletStore.from_triples([("Ada", "works_on", "Engine")])
# CLS, "ada" anchor, two more words, then the relation and the tail
graph = build_graph([4, 5, 6], [((0, 1), 0)], kg, BuilderConfig(), rng)
batch = to_batch([graph])
tail = len(graph) - 1
words = np.flatnonzero(graph.kinds == WORD)
rows = EntityRows(np.arange(kg.n_entities), rng.normal(0, 0.5, (kg.n_entities, 32)))

for layers in (1, 2, 3):
    cfg = ModelConfig(n_words=10, n_relations=1, n_entities=kg.n_entities, d_model=32, n_heads=4,
                      n_layers=layers, d_ff=64, max_pos=16, dtype="float64")
    params = init_params(cfg, np.random.default_rng(1))
    X = embed(batch, params, rows)
    base = encode(X, batch.mask, params)[0]
    X2 = X.copy()
    X2[0, tail] += 5.0
    moved = np.abs(encode(X2, batch.mask, params)[0] - base).max(-1)
    print(f"{layers} layer(s): change in word outputs after nudging the tail entity:",
          np.array2string(moved[words], precision=2))
print("\nEach layer reaches one hop further. The tail only talks to its relation node,")
print("which talks to the anchor, so the words first see the tail in layer three.")
