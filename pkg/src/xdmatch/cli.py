"""Command-line entry point: synth, build-graph, train, index, retrieve, eval, ablate.

Exit codes: 0 success, 1 usage error, 2 data/validation error, 3
numerical divergence.  Progress goes to stderr; machine-readable results
go to stdout or --out files.  Every run writes a run_manifest.json with
the resolved configuration, paths, seed, and per-phase timings.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from . import __version__
from .checkpoint import export_embeddings_tsv, load_checkpoint
from .evaluation import ABLATION_VARIANTS, LeakageError, ablation_rows_to_csv
from .graph import Domain, GraphError, canonical_edge_tsv, canonical_node_tsv
from .losses import LossConfig
from .pipeline import (
    evaluate_dataset,
    index_from_checkpoint,
    load_graphs,
    run_ablations,
    train_model,
)
from .retrieval import BehaviorSequence, RetrievalIndex, match
from .synthdata import SynthConfig, generate, strict_cold_start_transform
from .training import DivergenceError, TrainerConfig

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_DIVERGED = 3


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_DATA):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    # usage problems must exit 1, not argparse's default 2
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        sys.exit(EXIT_USAGE)


def _progress(msg: str) -> None:
    sys.stderr.write(msg + "\n")
    sys.stderr.flush()


def _parse_config_file(path: str) -> dict[str, str]:
    if not os.path.exists(path):
        raise CliError(f"config file not found: {path}", EXIT_USAGE)
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    if text.lstrip().startswith("{"):
        data = json.loads(text)
        return {k: str(v) for k, v in data.get("config", data).items()}
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise CliError(f"{path}:{lineno}: expected key = value", EXIT_USAGE)
        key, _, value = line.partition("=")
        values[key.strip()] = value.strip()
    return values


TRAINER_KEYS = {
    "optimizer": str,
    "learning_rate": float,
    "epochs": int,
    "steps_per_epoch": int,
    "batch_size": int,
    "seed": int,
    "gradient_clip_norm": float,
    "dim_in": int,
    "dim_out": int,
}
LOSS_KEYS_CFG = {
    "lambda1": float,
    "lambda2": float,
    "lambda3": float,
    "lambda4": float,
    "tau": float,
    "negatives_per_anchor": int,
    "neighbor_pos_fanout": int,
}


def _trainer_config(args) -> TrainerConfig:
    values: dict[str, str] = {}
    if getattr(args, "config", None):
        values.update(_parse_config_file(args.config))
    # flags win over the config file
    for key in list(TRAINER_KEYS) + list(LOSS_KEYS_CFG) + ["fanouts"]:
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = str(flag)
    loss_kwargs = {}
    trainer_kwargs = {}
    for key, value in values.items():
        if key in LOSS_KEYS_CFG:
            loss_kwargs[key] = LOSS_KEYS_CFG[key](value)
        elif key in TRAINER_KEYS:
            trainer_kwargs[key] = TRAINER_KEYS[key](value)
        elif key == "fanouts":
            f1, f2 = value.split(",")
            trainer_kwargs["fanouts"] = (int(f1), int(f2))
        else:
            raise CliError(f"unknown config key {key!r}", EXIT_USAGE)
    try:
        return TrainerConfig(loss=LossConfig(**loss_kwargs), **trainer_kwargs)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_USAGE) from exc


def _channel_weights(pairs: list[str] | None) -> dict[str, float] | None:
    if not pairs:
        return None
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise CliError(f"--channel-weight wants kind=REAL, got {pair!r}", EXIT_USAGE)
        kind, _, value = pair.partition("=")
        out[kind] = float(value)
    return out


def _write_manifest(out_dir: str, subcommand: str, args, timings: dict, extra=None):
    manifest = {
        "subcommand": subcommand,
        "version": __version__,
        "seed": getattr(args, "seed", None),
        "config": {
            k: v for k, v in vars(args).items() if k not in ("func",) and v is not None
        },
        "timings_sec": {k: round(v, 3) for k, v in timings.items()},
    }
    if extra:
        manifest.update(extra)
    os.makedirs(out_dir, exist_ok=True)
    tmp = os.path.join(out_dir, ".run_manifest.json.tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")
    os.replace(tmp, os.path.join(out_dir, "run_manifest.json"))


# -- subcommands -------------------------------------------------------------


def cmd_synth(args) -> int:
    t0 = time.monotonic()
    cfg = SynthConfig(
        seed=args.seed,
        n_user_groups=args.users,
        n_items=args.items,
        n_tags=args.tags,
        n_categories=args.categories,
        n_medias=args.medias,
        n_words=args.words,
        user_overlap=args.user_overlap,
        taxonomy_overlap=args.taxonomy_overlap,
    )
    _progress(f"generating synthetic dataset (seed {args.seed}) ...")
    ds = generate(cfg)
    ds.write(args.out, strict_cold_start=(args.mode == "strict_cold_start"))
    _write_manifest(args.out, "synth", args, {"generate": time.monotonic() - t0})
    print(json.dumps({"out": args.out, "instances": len(ds.test_instances)}))
    return EXIT_OK


def cmd_build_graph(args) -> int:
    t0 = time.monotonic()
    source_net, target_net, aligned = load_graphs(
        args.data, min_ui_count=args.min_ui_count, smoothing=args.smoothing
    )
    os.makedirs(args.out, exist_ok=True)
    node_text = canonical_node_tsv(source_net) + canonical_node_tsv(target_net)
    edge_lines = sorted(
        canonical_edge_tsv(source_net).splitlines()
        + canonical_edge_tsv(target_net).splitlines()
    )
    with open(os.path.join(args.out, "nodes.tsv"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(sorted(node_text.splitlines())) + "\n")
    with open(os.path.join(args.out, "edges.tsv"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(edge_lines) + "\n")
    summary = {
        "source_nodes": source_net.n_nodes(),
        "target_nodes": target_net.n_nodes(),
        "source_edges": len(source_net.edge_list()),
        "target_edges": len(target_net.edge_list()),
        "aligned_nodes": len(aligned),
    }
    _write_manifest(args.out, "build-graph", args, {"build": time.monotonic() - t0})
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _trainer_config(args)
    if args.strict_cold_start:
        cfg = __import__("dataclasses").replace(cfg, strict_cold_start=True)
    os.makedirs(args.out, exist_ok=True)
    ckpt = os.path.join(args.out, "model.ckpt")
    t0 = time.monotonic()
    _progress(f"training (seed {cfg.seed}, epochs {cfg.epochs}) ...")
    with open(os.path.join(args.out, "loss_history.jsonl"), "w", encoding="utf-8") as log:
        model, history, (source_net, target_net, _) = train_model(
            args.data, cfg, checkpoint_path=ckpt, log_stream=log
        )
    timings = {"train": time.monotonic() - t0}
    if args.export_tsv:
        from .pipeline import final_embeddings

        emb = final_embeddings(model, source_net, target_net, cfg.fanouts, cfg.seed)
        export_embeddings_tsv(
            source_net.nodes + target_net.nodes,
            np.vstack([emb["source"], emb["target"]]),
            os.path.join(args.out, "embeddings.tsv"),
        )
    _write_manifest(args.out, "train", args, timings)
    print(
        json.dumps(
            {
                "checkpoint": ckpt,
                "steps": len(history),
                "final_total": history[-1]["total"] if history else None,
            }
        )
    )
    return EXIT_OK


def cmd_index(args) -> int:
    cfg = _trainer_config(args)
    t0 = time.monotonic()
    _progress("building retrieval index ...")
    index, corpus = index_from_checkpoint(
        args.data, args.checkpoint, cfg.fanouts, cfg.seed, k=args.k
    )
    os.makedirs(args.out, exist_ok=True)
    index_path = os.path.join(args.out, "index.tsv")
    index.save(index_path)
    _write_manifest(args.out, "index", args, {"index": time.monotonic() - t0})
    print(json.dumps({"index": index_path, "anchors": len(index.entries), "corpus": len(corpus)}))
    return EXIT_OK


def cmd_retrieve(args) -> int:
    index = RetrievalIndex.load(args.index)
    weights = _channel_weights(args.channel_weight)
    out_fh = open(args.out, "w", encoding="utf-8") if args.out else sys.stdout
    try:
        with open(args.sequences, encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                record = json.loads(line)
                seq = BehaviorSequence.from_json(record.get("sequence", record))
                result = match(seq, index, channel_weights=weights)
                out_fh.write(result.to_json_str() + "\n")
    finally:
        if args.out:
            out_fh.close()
    return EXIT_OK


def cmd_eval(args) -> int:
    t0 = time.monotonic()
    index = RetrievalIndex.load(args.index)
    _, target_net, _ = load_graphs(args.data)
    from .graph import NodeKind

    corpus = [
        target_net.nodes[i].external_id
        for i in target_net.indices_of_kind(NodeKind.ITEM)
    ]
    report, _ = evaluate_dataset(
        args.data, index, corpus, args.mode, _channel_weights(args.channel_weight)
    )
    timings = {"eval": time.monotonic() - t0}
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "eval_report.json"), "w", encoding="utf-8") as fh:
            json.dump(report.to_json(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        _write_manifest(args.out, "eval", args, timings)
    _progress(report.to_text())
    print(json.dumps(report.to_json(), sort_keys=True))
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _trainer_config(args)
    variants = args.ablate or list(ABLATION_VARIANTS)
    for v in variants:
        if v not in ABLATION_VARIANTS:
            raise CliError(f"unknown ablation variant {v!r}", EXIT_USAGE)
    seeds = [int(s) for s in args.seeds.split(",")]
    data_dirs = {"few_shot": args.data_few}
    if args.data_strict:
        data_dirs["strict_cold_start"] = args.data_strict
    t0 = time.monotonic()
    rows = run_ablations(data_dirs, cfg, variants, seeds)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "ablations.csv"), "w", encoding="utf-8") as fh:
        fh.write(ablation_rows_to_csv(rows))
    with open(os.path.join(args.out, "ablations.json"), "w", encoding="utf-8") as fh:
        json.dump(rows, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_manifest(args.out, "ablate", args, {"ablate": time.monotonic() - t0})
    print(json.dumps({"rows": len(rows), "out": args.out}))
    return EXIT_OK


# -- parser ------------------------------------------------------------------


def _add_trainer_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file; flags override it")
    p.add_argument("--seed", type=int, default=0, help="rng seed (default 0)")
    p.add_argument("--optimizer", choices=["adam", "sgd"], help="default adam")
    p.add_argument("--learning-rate", dest="learning_rate", type=float, help="default 1e-3")
    p.add_argument("--epochs", type=int, help="default 1")
    p.add_argument("--steps-per-epoch", dest="steps_per_epoch", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int, help="default 4096")
    p.add_argument("--gradient-clip-norm", dest="gradient_clip_norm", type=float, help="default 5.0")
    p.add_argument("--dim-in", dest="dim_in", type=int, help="base embedding dim (default 128)")
    p.add_argument("--dim-out", dest="dim_out", type=int, help="aggregated dim (default 100)")
    p.add_argument("--fanouts", help="layer fanouts F1,F2 (default 25,10)")
    p.add_argument("--lambda1", type=float, help="source neighbor loss weight (default 1.0)")
    p.add_argument("--lambda2", type=float, help="target neighbor loss weight (default 1.0)")
    p.add_argument("--lambda3", type=float, help="intra-contrast weight (default 1.5)")
    p.add_argument("--lambda4", type=float, help="cross-domain contrast weight (default 0.6)")
    p.add_argument("--tau", type=float, help="contrast temperature (default 1.0)")
    p.add_argument(
        "--negatives-per-anchor", dest="negatives_per_anchor", type=int, help="default 10"
    )
    p.add_argument(
        "--neighbor-pos-fanout", dest="neighbor_pos_fanout", type=int, help="default 5"
    )


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="xdmatch", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("synth", help="generate a synthetic two-domain dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--mode", choices=["few_shot", "strict_cold_start"], default="few_shot")
    p.add_argument("--users", type=int, default=2000, help="user groups per domain")
    p.add_argument("--items", type=int, default=5000)
    p.add_argument("--tags", type=int, default=200)
    p.add_argument("--categories", type=int, default=20)
    p.add_argument("--medias", type=int, default=100)
    p.add_argument("--words", type=int, default=1000)
    p.add_argument("--user-overlap", type=float, default=0.5)
    p.add_argument("--taxonomy-overlap", type=float, default=0.8)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("build-graph", help="load, validate and canonicalize graphs")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--min-ui-count", type=int, default=3, help="U-I weighted count threshold")
    p.add_argument("--smoothing", type=float, default=0.1, help="PMI clamp floor")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_build_graph)

    p = sub.add_parser("train", help="train embeddings on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--strict-cold-start", action="store_true")
    p.add_argument("--export-tsv", action="store_true", help="also export embeddings.tsv")
    _add_trainer_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("index", help="build the top-K retrieval index")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int, default=100, help="list length per anchor (default 100)")
    _add_trainer_flags(p)
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("retrieve", help="match behavior sequences against an index")
    p.add_argument("--index", required=True)
    p.add_argument("--sequences", required=True, help="behavior-sequence JSONL")
    p.add_argument("--out", help="output file (default stdout)")
    p.add_argument("--channel-weight", action="append", metavar="KIND=REAL")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("eval", help="offline HIT@N / coverage evaluation")
    p.add_argument("--data", required=True)
    p.add_argument("--index", required=True)
    p.add_argument("--mode", choices=["few_shot", "strict_cold_start"], default="few_shot")
    p.add_argument("--out")
    p.add_argument("--channel-weight", action="append", metavar="KIND=REAL")
    p.add_argument("--threads", type=int, default=1, help="parallel match workers")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train/evaluate the ablation matrix")
    p.add_argument("--data-few", required=True, help="few-shot dataset directory")
    p.add_argument("--data-strict", help="strict cold-start dataset directory")
    p.add_argument("--out", required=True)
    p.add_argument(
        "--ablate",
        action="append",
        choices=list(ABLATION_VARIANTS),
        help="variant to run (repeatable; default all)",
    )
    p.add_argument("--seeds", default="0,1,2", help="comma-separated seeds")
    p.add_argument("--threads", type=int, default=1)
    _add_trainer_flags(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def dispatch(argv: list[str]) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return exc.code
    except DivergenceError as exc:
        sys.stderr.write(f"error: training diverged: {exc}\n")
        return EXIT_DIVERGED
    except (GraphError, LeakageError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_DATA
    except FileNotFoundError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_DATA
    except ValueError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_DATA


def main() -> None:
    try:
        sys.exit(dispatch(sys.argv[1:]))
    except BrokenPipeError:
        # downstream reader (head, less) closed the pipe early
        os.dup2(os.open(os.devnull, os.O_WRONLY), sys.stdout.fileno())
        sys.exit(EXIT_OK)


if __name__ == "__main__":
    main()
