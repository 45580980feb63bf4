"""Turn one sentence into a word-knowledge graph and look at it.

    python3 demos/01_build_graph.py
"""

import numpy as np

from wklm.graph import ENTITY, RELATION, BuilderConfig, build_graph, link_mentions, to_batch
from wklm.kg import TripletStore, build_alias_index
from wklm.text import Vocabulary, tokenize

kg = TripletStore.from_triples([
    ("Marie_Curie", "born_in", "Warsaw"),
    ("Marie_Curie", "field", "Physics"),
    ("Marie_Curie", "spouse", "Pierre_Curie"),
    ("Warsaw", "capital_of", "Poland"),
    ("Pierre_Curie", "field", "Physics"),
])
aliases = [(1, "marie curie", "Marie_Curie"), (2, "warsaw", "Warsaw"), (3, "pierre", "Pierre_Curie")]
sentence = "Marie Curie left Warsaw with Pierre"

vocab = Vocabulary.build([sentence] + [s for _, s, _ in aliases])
index = build_alias_index(aliases, vocab, kg)
tokens = tokenize(sentence, vocab)
links = link_mentions(tokens, index)
print("sentence:", sentence)
print("linked mentions:", [(" ".join(vocab.itos[t] for t in tokens[s:e]), kg.entities[ent])
                           for (s, e), ent in links])

graph = build_graph(tokens, links, kg, BuilderConfig(max_neighbors=15), np.random.default_rng(0))


def name(kind, i):
    if kind == ENTITY:
        return kg.entities[i]
    if kind == RELATION:
        return kg.relations[i]
    return vocab.itos[i]


print(f"\n{len(graph)} nodes (position, kind, token, anchor?):")
for i in range(len(graph)):
    k = int(graph.kinds[i])
    print(f"  {i:2d}  pos={graph.positions[i]}  {('word', 'entity', 'relation')[k]:8s} "
          f"{name(k, int(graph.ids[i])):14s} {'anchor' if graph.anchors[i] else ''}")

print("\nrelation triplets attached to anchors (head, relation, tail):")
for h, r, t in graph.relation_triples():
    print(f"  {name(1, graph.ids[h])} -[{name(2, graph.ids[r])}]-> {name(1, graph.ids[t])}")

print("\nPhysics is shared by two anchors, so it appears once and joins both sub-graphs.")
print("Attention mask (0 = may attend, . = blocked):")
mask = to_batch([graph]).mask[0]
for row in mask:
    print("  " + " ".join("0" if v == 0 else "." for v in row))
