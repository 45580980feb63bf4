import filecmp
import os

import numpy as np
import pytest

from wklm import synthetic
from wklm.encoder import load_checkpoint
from wklm.errors import NonFiniteLoss
from wklm.kg import TripletStore
from wklm.store import EmbeddingStore
from wklm.trainer import (Dataset, TrainConfig, Trainer, build_dataset, parse_config, run)

SMALL = dict(d_model=16, n_heads=2, n_layers=1, d_ff=32, max_pos=64, batch_size=8)


@pytest.fixture(scope="module")
def kg_data():
    data = synthetic.generate(seed=3, n_persons=12, n_cities=5, n_countries=2, n_companies=3, n_universities=2)
    kg = TripletStore.from_triples(data.triples)
    pairs = [(i + 1, s, n) for i, (s, n) in enumerate(data.aliases)]
    return data, kg, pairs


@pytest.fixture(scope="module")
def dataset(kg_data):
    data, kg, pairs = kg_data
    return build_dataset([s for s, _ in data.sentences[:120]], kg, pairs, seed=1)


def _cfg(**kw):
    base = dict(SMALL, objective=parse_config("negatives=8").objective)
    base.update(kw)
    return TrainConfig(**base)


def test_build_dataset_drops_anchor_free(kg_data):
    _, kg, pairs = kg_data
    ds = build_dataset(["nothing to see here", "still nothing"], kg, pairs)
    assert ds.graphs == [] and ds.n_dropped == 2 and ds.n_sentences == 2


def test_build_dataset_independent_of_workers(kg_data):
    data, kg, pairs = kg_data
    sentences = [s for s, _ in data.sentences[:80]]
    a = build_dataset(sentences, kg, pairs, seed=5, workers=1)
    b = build_dataset(sentences, kg, pairs, seed=5, workers=3)
    assert a.graphs == b.graphs and a.vocab.itos == b.vocab.itos


def test_dataset_save_load_round_trip(tmp_path, dataset):
    dataset.save(tmp_path)
    back = Dataset.load(tmp_path)
    assert back.graphs == dataset.graphs
    assert back.vocab.itos == dataset.vocab.itos
    assert back.kg.entities == dataset.kg.entities
    assert np.array_equal(back.kg.entity_freq, dataset.kg.entity_freq)
    assert back.stats() == dataset.stats()


def test_zero_lr_keeps_parameters_bit_identical(dataset):
    trainer = Trainer(_cfg(lr=0.0), dataset)
    before = {k: v.copy() for k, v in trainer.params.tensors.items()}
    table = trainer.store.table.copy()
    for step, graphs in trainer.batches():
        trainer.train_step(graphs, trainer.step_rng(step))
        if step == 5:
            break
    assert all(np.array_equal(before[k], trainer.params[k]) for k in before)
    assert np.array_equal(table, trainer.store.table)
    assert trainer.store.versions.sum() > 0


def test_loss_decreases(dataset):
    trainer = Trainer(_cfg(lr=3e-3, epochs=20), dataset)
    losses = []
    for step, graphs in trainer.batches():
        losses.append(trainer.train_step(graphs, trainer.step_rng(step)).total_loss)
        if step == 60:
            break
    assert np.mean(losses[-10:]) < np.mean(losses[:10])


def _files_equal(a, b, names=("model.ckpt", "store.bin", "optim.bin", "metrics.csv")):
    return all(filecmp.cmp(os.path.join(a, n), os.path.join(b, n), shallow=False) for n in names)


def test_runs_are_deterministic(tmp_path, dataset):
    cfg = _cfg(max_steps=6)
    run(dataset, cfg, tmp_path / "a")
    run(dataset, cfg, tmp_path / "b")
    assert _files_equal(tmp_path / "a", tmp_path / "b")


def test_resume_equals_uninterrupted(tmp_path, dataset):
    straight = run(dataset, _cfg(max_steps=20, epochs=2), tmp_path / "straight")
    assert straight.steps == 20
    first = run(dataset, _cfg(max_steps=11, epochs=2), tmp_path / "resumed")
    assert first.steps == 11
    second = run(dataset, _cfg(max_steps=20, epochs=2), tmp_path / "resumed", resume=True)
    assert second.steps == 20 and len(second.metrics) == 9
    assert _files_equal(tmp_path / "straight", tmp_path / "resumed")


def test_zero_anchor_corpus_runs_zero_steps(tmp_path, kg_data):
    _, kg, pairs = kg_data
    ds = build_dataset(["no entity here"], kg, pairs)
    result = run(ds, _cfg(), tmp_path)
    assert result.steps == 0
    with open(result.metrics_path) as fh:
        assert len(fh.read().splitlines()) == 1


def test_single_sentence_gives_one_step(tmp_path, kg_data):
    data, kg, pairs = kg_data
    ds = build_dataset([data.sentences[0][0]], kg, pairs)
    result = run(ds, _cfg(), tmp_path)
    assert result.steps == 1
    params = load_checkpoint(tmp_path / "model.ckpt")
    assert all(np.isfinite(t).all() for t in params.tensors.values())
    assert EmbeddingStore.restore(tmp_path / "store.bin").versions.sum() > 0


def test_non_finite_loss_writes_partial_checkpoint(tmp_path, dataset, monkeypatch):
    from wklm import objective

    real = objective.loss

    def broken(*args, **kw):
        out = real(*args, **kw)
        out.total = float("nan")
        return out

    monkeypatch.setattr(objective, "loss", broken)
    with pytest.raises(NonFiniteLoss):
        run(dataset, _cfg(), tmp_path)
    assert os.path.exists(tmp_path / "model.ckpt.partial")
    assert os.path.exists(tmp_path / "store.bin.partial")


def test_parse_config():
    cfg = parse_config("# comment\nlr = 0.01\nbatch_size=4\nobjective.mask_rate=0.3\nnegatives=5\n"
                       "action_split = 0.6, 0.2, 0.2\n")
    assert cfg.lr == 0.01 and cfg.batch_size == 4
    assert cfg.objective.mask_rate == 0.3 and cfg.objective.negatives == 5
    assert cfg.objective.action_split == (0.6, 0.2, 0.2)
    assert parse_config("").to_dict() == TrainConfig().to_dict()


@pytest.mark.parametrize("text", ["lr=-1", "bogus=3", "batch_size=x", "lr", "batch_size=0"])
def test_parse_config_errors(text):
    with pytest.raises(ValueError):
        parse_config(text)
