"""Command-line pipeline: build graphs, report stats, train models, run
evaluation grids, and apply checkpoints to unseen graphs.

Configuration precedence is CLI flags over a TOML config file over
built-in defaults. Every stochastic stage derives from the single
--seed flag. Exit codes: 2 for input or configuration problems, 3 for
training divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .errors import SpeechKgError, TrainingError
from .features import FeatureMatrix, load_features, random_features
from .graph import KnowledgeGraph, build_graph, graph_stats, read_corpus, split_graph
from .layers import ArchSpec, LAYER_KINDS, load_checkpoint, save_checkpoint
from .tasks import (
    TaskConfig,
    TrainedModel,
    evaluate_link_predictor,
    evaluate_node_classifier,
    train_link_predictor,
    train_node_classifier,
    transductive_infer,
    write_loss_csv,
)
from .util import atomic_write_text, derive_seed, setup_logging, sha256_file

log = logging.getLogger(__name__)

MODEL_CHOICES = list(LAYER_KINDS)
TASK_CHOICES = ["node-classification", "link-prediction"]
SETTING_CHOICES = ["inductive", "transductive"]
SAGE_DEFAULT_EPOCHS = 10
DEFAULT_EPOCHS = 250
DEFAULT_RANDOM_DIM = 768

# flag defaults live here so a TOML config can slot in between them and the CLI
TRAIN_DEFAULTS = {
    "task": "node-classification",
    "setting": "inductive",
    "label_target": "entity_type_binary",
    "epochs": None,  # resolved per model kind
    "lr": 0.005,
    "weight_decay": 0.05,
    "dropout": None,  # resolved per task
    "hidden": 64,
    "layers": 2,
    "heads": 1,
    "leaky_slope": 0.2,
    "negative_ratio": 1.0,
    "lambda_att": 0.1,
    "seed": 0,
    "ratios": "0.6,0.2,0.2",
    "features": None,
}


def main(argv=None) -> int:
    setup_logging()
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except TrainingError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except SpeechKgError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="speechkg",
        description="Build knowledge graphs from annotated transcripts and train GNNs on them.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_build = sub.add_parser("build", help="build a graph from a JSONL corpus")
    p_build.add_argument("corpus", help="JSONL corpus path")
    p_build.add_argument("--out", required=True, help="output graph JSON path")
    p_build.add_argument("--stats", default=None, help="stats TSV path (default: <out>.stats.tsv)")
    p_build.set_defaults(func=cmd_build)

    p_stats = sub.add_parser("stats", help="summarize a graph, optionally per split")
    p_stats.add_argument("graph", help="graph JSON path")
    p_stats.add_argument("--out", default="-", help="TSV output path, - for stdout")
    p_stats.add_argument("--split-unit", choices=["nodes", "edges"], default=None)
    p_stats.add_argument("--ratios", default="0.6,0.2,0.2")
    p_stats.add_argument("--seed", type=int, default=0)
    p_stats.set_defaults(func=cmd_stats)

    p_train = sub.add_parser("train", help="train one model on one graph")
    p_train.add_argument("graph", help="graph JSON path")
    p_train.add_argument("--model", required=True, choices=MODEL_CHOICES)
    p_train.add_argument("--out-dir", required=True)
    p_train.add_argument("--config", default=None, help="TOML config file")
    p_train.add_argument("--task", choices=TASK_CHOICES, default=None)
    p_train.add_argument("--setting", choices=SETTING_CHOICES, default=None)
    p_train.add_argument(
        "--features",
        default=None,
        help="random[:dim[:seed]] | file:<path> | jsonl:<path> (default random)",
    )
    p_train.add_argument("--label-target", dest="label_target", default=None)
    p_train.add_argument("--epochs", type=int, default=None)
    p_train.add_argument("--lr", type=float, default=None)
    p_train.add_argument("--weight-decay", dest="weight_decay", type=float, default=None)
    p_train.add_argument("--dropout", type=float, default=None)
    p_train.add_argument("--hidden", type=int, default=None)
    p_train.add_argument("--layers", type=int, default=None)
    p_train.add_argument("--heads", type=int, default=None)
    p_train.add_argument("--leaky-slope", dest="leaky_slope", type=float, default=None)
    p_train.add_argument("--negative-ratio", dest="negative_ratio", type=float, default=None)
    p_train.add_argument("--lambda-att", dest="lambda_att", type=float, default=None)
    p_train.add_argument("--seed", type=int, default=None)
    p_train.add_argument("--ratios", default=None)
    p_train.set_defaults(func=cmd_train)

    p_grid = sub.add_parser("grid", help="train every model kind per embedding source")
    p_grid.add_argument("graph")
    p_grid.add_argument("--embeddings-dir", default=None)
    p_grid.add_argument("--out", required=True, help="result TSV path")
    p_grid.add_argument("--config", default=None)
    p_grid.add_argument("--task", choices=TASK_CHOICES, default="node-classification")
    p_grid.add_argument("--seed", type=int, default=0)
    p_grid.add_argument("--epochs", type=int, default=None)
    p_grid.add_argument("--jobs", type=int, default=1)
    p_grid.add_argument("--random-dim", type=int, default=DEFAULT_RANDOM_DIM)
    p_grid.set_defaults(func=cmd_grid)

    p_transfer = sub.add_parser("transfer", help="apply a checkpoint to an unseen graph")
    p_transfer.add_argument("checkpoint")
    p_transfer.add_argument("graph", help="target graph JSON path")
    p_transfer.add_argument("--features", default=None, help="same forms as train --features")
    p_transfer.add_argument("--out", required=True, help="report JSON path")
    p_transfer.add_argument("--seed", type=int, default=0)
    p_transfer.set_defaults(func=cmd_transfer)

    return parser


def _load_toml(path, section: str) -> dict:
    if path is None:
        return {}
    with open(path, "rb") as fh:
        payload = tomllib.load(fh)
    merged = {k: v for k, v in payload.items() if not isinstance(v, dict)}
    merged.update(payload.get(section, {}))
    return merged


def _resolve(args, file_cfg: dict, defaults: dict) -> dict:
    """CLI flag if given, else config-file value, else default."""
    out = {}
    for key, default in defaults.items():
        cli = getattr(args, key, None)
        if cli is not None:
            out[key] = cli
        elif key in file_cfg:
            out[key] = file_cfg[key]
        else:
            out[key] = default
    return out


def _parse_ratios(text: str) -> tuple[float, float, float]:
    parts = [float(x) for x in str(text).split(",")]
    if len(parts) != 3:
        raise SpeechKgError(f"need 3 comma-separated ratios, got {text!r}")
    return tuple(parts)  # type: ignore[return-value]


def _resolve_features(spec, graph: KnowledgeGraph, run_seed: int) -> tuple[FeatureMatrix, str]:
    """Parse a features spec string into a matrix and a display name."""
    if spec is None:
        spec = "random"
    kind, _, rest = str(spec).partition(":")
    if kind == "random":
        dim_s, _, seed_s = rest.partition(":")
        dim = int(dim_s) if dim_s else DEFAULT_RANDOM_DIM
        seed = int(seed_s) if seed_s else derive_seed(run_seed, "features")
        return random_features(graph.n_nodes, dim, seed), f"random:{dim}"
    if kind == "file":
        return load_features(rest, graph, missing_policy="error"), os.path.basename(rest)
    if kind == "jsonl":
        return (
            load_features(rest, graph, missing_policy="error", fmt="jsonl"),
            os.path.basename(rest),
        )
    raise SpeechKgError(f"unknown features spec {spec!r}")


def _write_manifest(out_dir: str, command: str, config: dict, inputs, outputs, started: float):
    manifest = {
        "command": command,
        "config": config,
        "seed": config.get("seed"),
        "inputs": {str(p): sha256_file(p) for p in inputs if p and os.path.exists(str(p))},
        "outputs": [str(p) for p in outputs],
        "duration_s": round(time.monotonic() - started, 3),
    }
    atomic_write_text(os.path.join(out_dir, "manifest.json"), json.dumps(manifest, indent=2))


def cmd_build(args) -> int:
    started = time.monotonic()
    corpus = read_corpus(args.corpus)
    graph = build_graph(corpus)
    graph.save(args.out)
    stats_path = args.stats or f"{args.out}.stats.tsv"
    atomic_write_text(stats_path, graph_stats(graph).to_tsv())
    out_dir = os.path.dirname(os.path.abspath(args.out))
    _write_manifest(
        out_dir,
        "build",
        {"corpus": args.corpus, "out": args.out, "stats": stats_path, "seed": None},
        [args.corpus],
        [args.out, stats_path],
        started,
    )
    print(f"built graph: {graph.n_nodes} nodes, {graph.n_edges} edges -> {args.out}")
    return 0


def cmd_stats(args) -> int:
    graph = KnowledgeGraph.load(args.graph)
    split = None
    if args.split_unit:
        split = split_graph(graph, _parse_ratios(args.ratios), args.seed, args.split_unit)
    tsv = graph_stats(graph, split).to_tsv()
    if args.out == "-":
        sys.stdout.write(tsv)
    else:
        atomic_write_text(args.out, tsv)
    return 0


def _train_once(graph, features, cfg: TaskConfig, arch: ArchSpec, setting: str, ratios):
    """Shared by train and grid: split (or not), train, evaluate."""
    if cfg.task == "node_classification":
        if setting == "inductive":
            split = split_graph(graph, ratios, derive_seed(cfg.seed, "split"), "nodes")
            trained = train_node_classifier(graph, features, split, arch, cfg)
            dev_report = evaluate_node_classifier(
                trained, graph, features, split.indices("dev", "nodes")
            )
            test_report = evaluate_node_classifier(
                trained, graph, features, split.indices("test", "nodes")
            )
        else:
            trained = train_node_classifier(graph, features, None, arch, cfg)
            all_nodes = np.arange(graph.n_nodes, dtype=np.int64)
            dev_report = test_report = evaluate_node_classifier(
                trained, graph, features, all_nodes
            )
    else:
        if setting == "inductive":
            split = split_graph(graph, ratios, derive_seed(cfg.seed, "split"), "edges")
            trained = train_link_predictor(graph, features, split, arch, cfg)
            dev_report = evaluate_link_predictor(
                trained,
                graph,
                features,
                split.indices("dev", "edges"),
                negatives_purpose="dev_negatives",
            )
            test_report = evaluate_link_predictor(
                trained, graph, features, split.indices("test", "edges")
            )
        else:
            trained = train_link_predictor(graph, features, None, arch, cfg)
            all_edges = np.arange(graph.n_edges, dtype=np.int64)
            dev_report = test_report = evaluate_link_predictor(
                trained, graph, features, all_edges, message_edge_indices=all_edges
            )
    return trained, dev_report, test_report


def _resolved_train_config(args) -> dict:
    file_cfg = _load_toml(args.config, "train")
    cfg = _resolve(args, file_cfg, TRAIN_DEFAULTS)
    cfg["model"] = args.model
    if cfg["epochs"] is None:
        cfg["epochs"] = SAGE_DEFAULT_EPOCHS if args.model == "sage" else DEFAULT_EPOCHS
    if cfg["dropout"] is None:
        cfg["dropout"] = 0.2 if cfg["task"] == "node-classification" else 0.5
    return cfg


def cmd_train(args) -> int:
    started = time.monotonic()
    cfg_map = _resolved_train_config(args)
    graph = KnowledgeGraph.load(args.graph)
    features, feat_name = _resolve_features(cfg_map["features"], graph, int(cfg_map["seed"]))
    cfg = TaskConfig(
        task=cfg_map["task"].replace("-", "_"),
        label_target=cfg_map["label_target"],
        epochs=int(cfg_map["epochs"]),
        lr=float(cfg_map["lr"]),
        weight_decay=float(cfg_map["weight_decay"]),
        dropout=float(cfg_map["dropout"]),
        seed=int(cfg_map["seed"]),
        negative_ratio=float(cfg_map["negative_ratio"]),
        lambda_att=float(cfg_map["lambda_att"]),
    )
    arch = ArchSpec(
        kind=args.model,
        hidden_dim=int(cfg_map["hidden"]),
        n_layers=int(cfg_map["layers"]),
        attention_heads=int(cfg_map["heads"]),
        leaky_slope=float(cfg_map["leaky_slope"]),
    )
    ratios = _parse_ratios(cfg_map["ratios"])

    trained, dev_report, test_report = _train_once(
        graph, features, cfg, arch, cfg_map["setting"], ratios
    )

    os.makedirs(args.out_dir, exist_ok=True)
    ckpt_path = os.path.join(args.out_dir, "model.ckpt")
    losses_path = os.path.join(args.out_dir, "losses.csv")
    eval_path = os.path.join(args.out_dir, "eval.tsv")
    save_checkpoint(
        trained.model,
        ckpt_path,
        meta={
            "task": cfg.task,
            "label_target": cfg.label_target,
            "label_vocab": trained.label_vocab,
            "task_seed": cfg.seed,
            "best_epoch": trained.best_epoch,
        },
    )
    write_loss_csv(losses_path, trained.loss_curve)
    eval_lines = ["split\tap\tauc"]
    eval_lines.append(f"dev\t{dev_report.ap:.6f}\t{dev_report.auc:.6f}")
    eval_lines.append(f"test\t{test_report.ap:.6f}\t{test_report.auc:.6f}")
    atomic_write_text(eval_path, "\n".join(eval_lines) + "\n")
    cfg_map["features"] = feat_name
    _write_manifest(
        args.out_dir,
        "train",
        cfg_map,
        [args.graph, args.config],
        [ckpt_path, losses_path, eval_path],
        started,
    )
    print(
        f"trained {args.model} ({cfg.task}): best epoch {trained.best_epoch}, "
        f"test ap {test_report.ap:.4f}, auc {test_report.auc:.4f}"
    )
    return 0


def _grid_cell(payload) -> tuple[str, str, str, str]:
    """One grid run; returns a TSV row. Failures land in the row, not the exit code."""
    graph_path, feat_spec, feat_name, kind, task, seed, epochs = payload
    try:
        graph = KnowledgeGraph.load(graph_path)
        features, _ = _resolve_features(feat_spec, graph, seed)
        cfg = TaskConfig(
            task=task.replace("-", "_"),
            epochs=epochs or (SAGE_DEFAULT_EPOCHS if kind == "sage" else DEFAULT_EPOCHS),
            dropout=0.2 if task == "node-classification" else 0.5,
            seed=seed,
        )
        arch = ArchSpec(kind=kind)
        _, _, test_report = _train_once(graph, features, cfg, arch, "inductive", (0.6, 0.2, 0.2))
        return (kind, feat_name, f"{test_report.ap:.4f}", f"{test_report.auc:.4f}")
    except (SpeechKgError, OSError) as exc:
        log.warning("grid cell (%s, %s) failed: %s", kind, feat_name, exc)
        return (kind, feat_name, "failed", "failed")


def cmd_grid(args) -> int:
    started = time.monotonic()
    sources: list[tuple[str, str]] = [(None, f"random:{args.random_dim}")]
    if args.embeddings_dir:
        for name in sorted(os.listdir(args.embeddings_dir)):
            if name.endswith(".manifest.json"):
                continue  # exporter sidecar, not an embedding source
            path = os.path.join(args.embeddings_dir, name)
            if os.path.isfile(path):
                sources.append((f"file:{path}", name))
    cells = []
    for feat_spec, feat_name in sources:
        spec = feat_spec or f"random:{args.random_dim}:{derive_seed(args.seed, 'features')}"
        for kind in MODEL_CHOICES:
            cells.append((args.graph, spec, feat_name, kind, args.task, args.seed, args.epochs))

    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(_grid_cell, cells))
    else:
        rows = [_grid_cell(cell) for cell in cells]

    lines = ["model\tembedding\tap\tauc"]
    lines.extend("\t".join(row) for row in rows)
    atomic_write_text(args.out, "\n".join(lines) + "\n")
    out_dir = os.path.dirname(os.path.abspath(args.out))
    _write_manifest(
        out_dir,
        "grid",
        {
            "graph": args.graph,
            "task": args.task,
            "seed": args.seed,
            "jobs": args.jobs,
            "embeddings_dir": args.embeddings_dir,
        },
        [args.graph],
        [args.out],
        started,
    )
    if all(row[2] == "failed" for row in rows):
        print("error: every grid cell failed", file=sys.stderr)
        return 2
    return 0


def cmd_transfer(args) -> int:
    started = time.monotonic()
    model, meta = load_checkpoint(args.checkpoint)
    graph = KnowledgeGraph.load(args.graph)
    features, feat_name = _resolve_features(args.features, graph, args.seed)
    cfg = TaskConfig(
        task=meta.get("task", "node_classification"),
        label_target=meta.get("label_target", "entity_type_binary"),
        epochs=1,
        seed=int(meta.get("task_seed", args.seed)),
    )
    trained = TrainedModel(
        model=model,
        config=cfg,
        loss_curve=[],
        best_epoch=int(meta.get("best_epoch", 0)),
        label_vocab=meta.get("label_vocab"),
    )
    report = transductive_infer(trained, graph, features)
    payload = report.to_json_dict()
    payload["checkpoint"] = args.checkpoint
    payload["graph"] = args.graph
    payload["features"] = feat_name
    atomic_write_text(args.out, json.dumps(payload, indent=2))
    out_dir = os.path.dirname(os.path.abspath(args.out))
    _write_manifest(
        out_dir,
        "transfer",
        {"checkpoint": args.checkpoint, "graph": args.graph, "seed": args.seed},
        [args.checkpoint, args.graph],
        [args.out],
        started,
    )
    print(f"transfer: ap {report.ap:.4f}, auc {report.auc:.4f} -> {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
