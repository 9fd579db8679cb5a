"""Command-line entry point: ``micrograph <command> [flags]``.

Exit codes: 0 success, 1 usage error, 2 runtime error. Diagnostics go to
standard error; data goes to the files named by the flags.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from .graph import DatasetError, load_dataset, write_dataset
from .synth import (
    SynthSpec,
    generate,
    linear_probe,
    load_truth,
    mean_feature_baseline,
    motif_purity,
    write_truth,
)
from .trainer import (
    ConfigError,
    TrainConfig,
    TrainState,
    extract_features,
    load_state,
    parse_config_text,
    pretrain,
    segment_dataset,
)

log = logging.getLogger("micrograph")

USAGE_ERROR = 1
RUNTIME_ERROR = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--seed", type=int, default=default, help="override the seed of the spec or config")
    parser.add_argument("--threads", type=int, default=argparse.SUPPRESS if suppress else 1,
                        help="cap on BLAS threads (default 1)")
    parser.add_argument("--quiet", action="store_true", default=argparse.SUPPRESS if suppress else False,
                        help="only report warnings and errors")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="micrograph", description="Motif-based graph representation learning.")
    _global_flags(parser, suppress=False)
    common = _Parser(add_help=False)
    _global_flags(common, suppress=True)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("validate", parents=[common], help="check a dataset file")
    p.add_argument("path")

    p = sub.add_parser("generate-synth", parents=[common], help="write the synthetic motif benchmark")
    p.add_argument("--spec", help="JSON spec file (defaults when omitted)")
    p.add_argument("--out", required=True, help="dataset JSONL")
    p.add_argument("--truth", required=True, help="ground-truth JSONL")

    p = sub.add_parser("pretrain", parents=[common], help="self-supervised pretraining")
    p.add_argument("--dataset", required=True)
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--resume", help="checkpoint to continue from")

    p = sub.add_parser("segment", parents=[common], help="dump sampled subgraphs")
    p.add_argument("dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sampler", choices=("motif", "rw", "khop"), default="motif")
    p.add_argument("--config", help="key=value overrides for the checkpoint's config")
    p.add_argument("--out", required=True)

    p = sub.add_parser("dump-motifs", parents=[common], help="nearest subgraphs per motif slot")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--topk", type=int, default=3)
    p.add_argument("--out", required=True)

    p = sub.add_parser("probe", parents=[common], help="linear probe and motif purity report")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--report", required=True, help="output CSV")
    p.add_argument("--folds", type=int, default=5)

    p = sub.add_parser("diagnose", parents=[common], help="embedding and assignment diagnostics")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--graphs", type=int, default=64, help="number of graphs to analyse")
    p.add_argument("--pairs", type=int, default=5, help="subgraphs with elementwise products")
    return parser


# --- commands --------------------------------------------------------------

def _seed(args, default: int) -> int:
    return default if args.seed is None else args.seed


def _load_model(args):
    state, config = load_state(args.checkpoint)
    if getattr(args, "config", None):
        overrides = parse_config_text(Path(args.config).read_text(encoding="utf-8"))
        config = TrainConfig.from_dict({**config.to_dict(), **overrides})
    return state.model, config


def cmd_validate(args) -> int:
    graphs = load_dataset(args.path)
    nodes = sum(g.num_nodes for g in graphs)
    edges = sum(len(g.edges) for g in graphs)
    feats = graphs[0].num_features if graphs else 0
    print(f"{args.path}: {len(graphs)} graphs, {nodes} nodes, {edges} edges, {feats} features")
    return 0


def cmd_generate_synth(args) -> int:
    d = json.loads(Path(args.spec).read_text(encoding="utf-8") or "{}") if args.spec else {}
    if args.seed is not None:
        d["seed"] = args.seed
    graphs, truth = generate(SynthSpec.from_dict(d))
    write_dataset(graphs, args.out)
    write_truth(truth, args.truth)
    log.info("wrote %d graphs to %s", len(graphs), args.out)
    return 0


def cmd_pretrain(args) -> int:
    config = TrainConfig.from_file(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        config = config.replace(seed=args.seed)
    dataset = load_dataset(args.dataset)
    state = pretrain(dataset, config, out_dir=args.out, resume_from=args.resume)
    log.info("finished at epoch %d, step %d", state.epoch, state.step)
    return 0


def _jsonl(path, records) -> None:
    Path(path).write_text("".join(json.dumps(r, separators=(",", ":")) + "\n" for r in records), encoding="utf-8")


def cmd_segment(args) -> int:
    model, config = _load_model(args)
    dataset = load_dataset(args.dataset)
    seg = segment_dataset(dataset, model, config, seed=_seed(args, 0), sampler=args.sampler)
    _jsonl(args.out, ({"parent_id": s.parent_id, "nodes": list(s.node_indices), "sampler": args.sampler}
                      for s in seg.subgraphs))
    log.info("wrote %d subgraphs", len(seg.subgraphs))
    return 0


def cmd_dump_motifs(args) -> int:
    if args.topk < 1:
        raise UsageError("--topk must be >= 1")
    model, config = _load_model(args)
    dataset = load_dataset(args.dataset)
    seg = segment_dataset(dataset, model, config, seed=_seed(args, 0))
    records = []
    for k in range(seg.s.shape[0]):
        order = sorted(range(seg.s.shape[1]), key=lambda j: (-seg.s[k, j], j))[:args.topk]
        for rank, j in enumerate(order):
            s = seg.subgraphs[j]
            records.append({"slot": k, "rank": rank, "parent_id": s.parent_id,
                            "nodes": list(s.node_indices), "similarity": float(seg.s[k, j])})
    _jsonl(args.out, records)
    return 0


def cmd_probe(args) -> int:
    state, config = load_state(args.checkpoint)
    dataset = load_dataset(args.dataset)
    truth = load_truth(args.truth)
    labels = [g.y for g in dataset]
    if any(y is None for y in labels):
        raise ValueError("probe needs a label on every graph")
    seed = _seed(args, 0)
    untrained = TrainState.fresh(dataset[0].num_features, config).model
    rows = []
    for name, feats in (("pretrained", extract_features(dataset, state.model)),
                        ("untrained", extract_features(dataset, untrained)),
                        ("raw_mean", mean_feature_baseline(dataset))):
        res = linear_probe(feats, labels, folds=args.folds, seed=seed)
        rows.append((f"probe_{name}", res.mean, res.std))
    rows.append(("purity_pretrained", motif_purity((state.model, config), dataset, truth, seed=seed), ""))
    rows.append(("purity_untrained", motif_purity((untrained, config), dataset, truth, seed=seed), ""))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("metric", "mean", "std"))
    for name, mean, std in rows:
        w.writerow((name, repr(float(mean)), repr(float(std)) if std != "" else ""))
    Path(args.report).write_text(buf.getvalue(), encoding="utf-8")
    for name, mean, _ in rows:
        log.info("%s = %.4f", name, mean)
    return 0


def cmd_diagnose(args) -> int:
    from .diagnostics import diagnose

    model, config = _load_model(args)
    dataset = load_dataset(args.dataset)
    counts = diagnose(model, config, dataset, args.out, num_graphs=args.graphs, num_pairs=args.pairs,
                      seed=_seed(args, 0))
    for name, n in counts.items():
        log.info("%s: %d rows", name, n)
    return 0


COMMANDS = {
    "validate": cmd_validate,
    "generate-synth": cmd_generate_synth,
    "pretrain": cmd_pretrain,
    "segment": cmd_segment,
    "dump-motifs": cmd_dump_motifs,
    "probe": cmd_probe,
    "diagnose": cmd_diagnose,
}


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return USAGE_ERROR
    except SystemExit as exc:  # --help
        return int(exc.code or 0)

    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s", force=True)
    if args.threads is not None and args.threads < 1:
        print("micrograph: error: --threads must be >= 1", file=sys.stderr)
        return USAGE_ERROR
    try:
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=args.threads):
            return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"micrograph: error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except (DatasetError, ConfigError, ValueError, OSError, KeyError) as exc:
        print(f"micrograph {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return RUNTIME_ERROR


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
