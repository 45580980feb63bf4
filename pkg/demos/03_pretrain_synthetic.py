"""Pretrain a small model on a generated knowledge graph and watch the losses.

    python3 demos/03_pretrain_synthetic.py [steps]
"""

import sys
import tempfile

from wklm import synthetic, trainer
from wklm.kg import TripletStore

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 200
syn = synthetic.generate(seed=0)
print(f"generated {len(syn.entity_types)} entities, {len(syn.triples)} triplets, {len(syn.sentences)} sentences")
print("example sentences:")
for text, trip in syn.sentences[::500]:
    print(f"  {text!r:60s} <- {trip}")

kg = TripletStore.from_triples(syn.triples)
pairs = [(i + 1, s, n) for i, (s, n) in enumerate(syn.aliases)]
ds = trainer.build_dataset([t for t, _ in syn.sentences], kg, pairs)
print("\ndataset:", ds.stats())

cfg = trainer.parse_config(f"max_steps={steps}\nepochs=50\nnegatives=32")
with tempfile.TemporaryDirectory() as out:
    result = trainer.run(ds, cfg, out)
print(f"\n{'step':>5} {'total':>8} {'word':>8} {'entity':>8} {'relation':>8}")
for m in result.metrics[::max(1, steps // 10)] + result.metrics[-1:]:
    print(f"{m.step:5d} {m.total_loss:8.3f} {m.word_loss:8.3f} {m.entity_loss:8.3f} {m.relation_loss:8.3f}")
print("\nAll three losses start near their chance levels and fall as the model learns")
print("which relations and entities the templates express.")
