"""``wklm`` command-line entry point.

Exit codes: 0 success, 2 usage or input error, 3 numeric failure during
training, 4 checkpoint/vocabulary mismatch.
"""

import argparse
import logging
import os
import sys

import numpy as np

from . import evaluation, trainer
from .errors import MalformedLine, NonFiniteLoss, VersionMismatch, WKLMError
from .graph import read_graphs
from .text import MASK, MASK_ID, normalize

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_MISMATCH = 0, 2, 3, 4
DATA_DIR_ENV = "WKLM_DATA_DIR"


def _data_dir(*parts):
    return os.path.join(os.environ.get(DATA_DIR_ENV, "wklm-data"), *parts)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _fail(code, message):
    print(f"error: {message}", file=sys.stderr)
    return code


# ---------------------------------------------------------------------------
# commands


def cmd_build_graphs(args):
    ds = trainer.build_dataset_from_files(args.corpus, args.triples, args.aliases, seed=args.seed,
                                          max_neighbors=args.max_neighbors, workers=args.workers)
    out = args.out or _data_dir("graphs")
    ds.save(out)
    for key, value in ds.stats().items():
        print(f"{key}\t{value}")
    print(f"wrote {len(ds.graphs)} graphs to {os.path.join(out, 'graphs.wkg')}")
    return EXIT_OK


def cmd_pretrain(args):
    cfg = trainer.load_config(args.config) if args.config else trainer.TrainConfig()
    overrides = {k: v for k, v in (("seed", args.seed), ("max_steps", args.max_steps)) if v is not None}
    if overrides:
        cfg = trainer.parse_config("\n".join(f"{k}={v}" for k, v in overrides.items()), base=cfg)
    if args.graphs:
        ds = trainer.Dataset.load(args.graphs)
    elif args.corpus and args.triples:
        ds = trainer.build_dataset_from_files(args.corpus, args.triples, args.aliases, seed=cfg.seed,
                                              max_neighbors=cfg.max_neighbors, workers=args.workers)
    else:
        return _fail(EXIT_USAGE, "pretrain needs --graphs or both --corpus and --triples")
    out = args.out_dir or _data_dir("model")
    result = trainer.run(ds, cfg, out, resume=args.resume)
    if result.metrics:
        last = result.metrics[-1]
        print(f"step {last.step} total {last.total_loss:.4f} word {last.word_loss:.4f} "
              f"entity {last.entity_loss:.4f} relation {last.relation_loss:.4f}")
    print(f"trained {result.steps} steps; checkpoint in {out}")
    return EXIT_OK


def _load_model(args):
    return evaluation.Pretrained.load(args.model, args.store, args.vocab_dir)


def cmd_eval_completion(args):
    model = _load_model(args)
    queries = evaluation.read_queries(args.queries, model.kg)
    ranks = evaluation.evaluate_completion(queries, model)
    out = args.out or _data_dir("completion.csv")
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    result = evaluation.write_results(out, queries, ranks)
    print(result.summary())
    return EXIT_OK


def read_probes(path, vocab):
    """Probe file: ``sentence<TAB>gold word`` with one ``[MASK]`` token per sentence."""
    probes = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            fields = line.rstrip("\n").split("\t")
            if len(fields) != 2:
                raise MalformedLine(line_no, "expected sentence<TAB>gold word")
            ids = [MASK_ID if w == MASK.lower() else vocab.lookup(w) for w in normalize(fields[0])]
            if ids.count(MASK_ID) != 1:
                raise MalformedLine(line_no, f"expected exactly one {MASK}")
            probes.append((ids, vocab.lookup(fields[1].strip().lower())))
    return probes


def cmd_probe(args):
    model = _load_model(args)
    probes = read_probes(args.probes, model.vocab)
    p = evaluation.cloze_p_at_1(probes, model, max_neighbors=args.max_neighbors, seed=args.seed)
    print(f"P@1 {p:.4f} over {len(probes)} probes")
    return EXIT_OK


def cmd_inspect_graph(args):
    from .trainer import load_vocab_dir

    path = args.graphs
    if os.path.isdir(path):
        vocab, kg, _ = load_vocab_dir(path)
        path = os.path.join(path, "graphs.wkg")
    else:
        vocab = kg = None
    graphs = read_graphs(path)
    if not 0 <= args.index < len(graphs):
        return _fail(EXIT_USAGE, f"index {args.index} outside 0..{len(graphs) - 1}")
    g = graphs[args.index]
    names = {0: (lambda i: vocab.itos[i] if vocab else str(i)),
             1: (lambda i: kg.entities[i] if kg and i < kg.n_entities else ("[MASK]" if kg else str(i))),
             2: (lambda i: kg.relations[i] if kg and i < kg.n_relations else ("[MASK]" if kg else str(i)))}
    kinds = ("word", "entity", "relation")
    print(f"graph {args.index}: {len(g)} nodes")
    print("idx\tkind\tpos\tanchor\ttoken\tneighbours")
    for i, (k, tok, pos, anc) in enumerate(zip(g.kinds, g.ids, g.positions, g.anchors)):
        nbrs = ",".join(str(j) for j in np.flatnonzero(g.adjacency[i]) if j != i)
        print(f"{i}\t{kinds[k]}\t{pos}\t{'*' if anc else ''}\t{names[int(k)](int(tok))}\t{nbrs}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser():
    parser = _Parser(prog="wklm", description="Word-knowledge graph language model toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("build-graphs", help="turn a corpus into serialized graphs")
    p.add_argument("--corpus", required=True)
    p.add_argument("--triples", required=True)
    p.add_argument("--aliases", required=True)
    p.add_argument("--out", help=f"output directory (default ${DATA_DIR_ENV}/graphs)")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--max-neighbors", type=int, default=15)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_build_graphs)

    p = sub.add_parser("pretrain", help="train the encoder")
    p.add_argument("--graphs", help="directory written by build-graphs")
    p.add_argument("--corpus")
    p.add_argument("--triples")
    p.add_argument("--aliases")
    p.add_argument("--config", help="key=value training config file")
    p.add_argument("--out-dir", help=f"checkpoint directory (default ${DATA_DIR_ENV}/model)")
    p.add_argument("--seed", type=int, default=None, help="overrides the config seed (default 42)")
    p.add_argument("--max-steps", type=int, default=None)
    p.add_argument("--resume", action="store_true")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_pretrain)

    for name, func, help_text in (("eval-completion", cmd_eval_completion, "rank relations for queries"),
                                  ("probe", cmd_probe, "cloze precision@1")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--model", required=True, help="model.ckpt")
        p.add_argument("--store", help="store.bin (default: next to the model)")
        p.add_argument("--vocab-dir", help="directory with vocab.json and triples.tsv (default: next to the model)")
        p.set_defaults(func=func)
        if name == "eval-completion":
            p.add_argument("--queries", required=True)
            p.add_argument("--out", help=f"results CSV (default ${DATA_DIR_ENV}/completion.csv)")
        else:
            p.add_argument("--probes", required=True)
            p.add_argument("--max-neighbors", type=int, default=0)
            p.add_argument("--seed", type=int, default=42)

    p = sub.add_parser("inspect-graph", help="print one serialized graph")
    p.add_argument("--graphs", required=True, help="graph shard or build-graphs directory")
    p.add_argument("--index", type=int, default=0)
    p.set_defaults(func=cmd_inspect_graph)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NonFiniteLoss as exc:
        return _fail(EXIT_NUMERIC, f"{exc}; partial checkpoint kept with .partial suffix")
    except VersionMismatch as exc:
        return _fail(EXIT_MISMATCH, str(exc))
    except (WKLMError, ValueError, OSError) as exc:
        return _fail(EXIT_USAGE, str(exc))


if __name__ == "__main__":
    sys.exit(main())
