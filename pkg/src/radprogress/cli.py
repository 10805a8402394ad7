"""Command-line front end for the full pipeline.

Verbs:

    synth-data    write a synthetic visit corpus as JSONL
    build-graph   mine the progression graph from a corpus' train split
    train-stage1  observation/progression predictor
    train-stage2  graph-reasoned report generator
    generate      decode reports for a split
    evaluate      decode and score a split (BLEU/ROUGE-L/CE/TEM)
    inspect-graph summarize a graph artifact

Every run writes a manifest (command, config hash, seed, input hashes)
before doing the work and fills in output hashes afterwards, so an artifact
directory is always traceable to the exact command that produced it.
Manifests carry no timestamps; reruns with identical inputs produce
identical artifacts. File outputs get a sibling ``<name>.manifest.json``,
directory outputs a ``manifest.json`` inside.

Exit codes: 0 success, 1 runtime failure (one-line ``error: ...`` on
stderr), 2 usage error, 3 configuration error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from .config import (
    ABLATIONS,
    ConfigError,
    ExperimentConfig,
    apply_overrides,
    experiment_config_to_obj,
    load_experiment_config,
    resolve_num_workers,
)
from .corpus import (
    PARTITIONS,
    Vocabulary,
    ingest_corpus,
    link_prior_visits,
    write_corpus_jsonl,
)
from .evaluator import compute_metrics, decode_reports
from .graph import (
    build_progression_graph,
    graph_from_json,
    graph_to_json,
    sha256_of_file,
    sha256_of_text,
)
from .synthetic import (
    SyntheticSpec,
    generate_synthetic_corpus,
    label_report_observations,
)
from .trainer import load_stage2_checkpoint, train_stage1, train_stage2

_MANIFEST_NAME = "manifest.json"


def _manifest_path(out: Path) -> Path:
    if out.suffix in (".json", ".jsonl"):
        return out.with_name(out.name + ".manifest.json")
    return out / _MANIFEST_NAME


def _write_json(path: Path, obj: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _config_hash(cfg: ExperimentConfig) -> str:
    return sha256_of_text(json.dumps(experiment_config_to_obj(cfg), sort_keys=True))


def _hash_file(path: Path) -> dict:
    return {"path": str(path), "sha256": sha256_of_file(path)}


def _hash_dir(path: Path) -> dict:
    out = {}
    for child in sorted(path.rglob("*")):
        if child.is_file() and child.name != _MANIFEST_NAME:
            out[str(child.relative_to(path))] = sha256_of_file(child)
    return out


def _start_manifest(
    out: Path, command: str, seed: int | None, cfg: ExperimentConfig | None, inputs: dict
) -> Path:
    path = _manifest_path(out)
    manifest = {
        "command": command,
        "seed": seed,
        "config_sha256": None if cfg is None else _config_hash(cfg),
        "config": None if cfg is None else experiment_config_to_obj(cfg),
        "inputs": inputs,
        "outputs": None,
    }
    _write_json(path, manifest)
    return path


def _finish_manifest(path: Path, outputs: dict) -> None:
    manifest = json.loads(path.read_text(encoding="utf-8"))
    manifest["outputs"] = outputs
    _write_json(path, manifest)


def _load_config(args: argparse.Namespace) -> ExperimentConfig:
    cfg = (
        load_experiment_config(args.config)
        if getattr(args, "config", None)
        else ExperimentConfig()
    )
    overrides = list(getattr(args, "set", None) or [])
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    return cfg


def _apply_seed(cfg: ExperimentConfig, seed: int | None) -> ExperimentConfig:
    if seed is None:
        return cfg
    return dataclasses.replace(
        cfg,
        stage1=dataclasses.replace(cfg.stage1, seed=seed),
        stage2=dataclasses.replace(cfg.stage2, seed=seed),
    )


def _read_corpus(path: str):
    return link_prior_visits(ingest_corpus(path))


def _load_graph(path: str):
    return graph_from_json(Path(path).read_text(encoding="utf-8"))


def cmd_synth_data(args: argparse.Namespace) -> int:
    out = Path(args.out)
    seed = 0 if args.seed is None else args.seed
    spec = SyntheticSpec(
        n_records=args.size, follow_up_ratio=args.follow_up_ratio, seed=seed
    )
    manifest = _start_manifest(
        out,
        "synth-data",
        seed,
        None,
        {"size": args.size, "follow_up_ratio": args.follow_up_ratio},
    )
    split = generate_synthetic_corpus(spec)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_corpus_jsonl(split, out)
    _finish_manifest(manifest, {out.name: sha256_of_file(out)})
    counts = {p: len(split.partition(p)) for p in PARTITIONS}
    print(f"wrote {len(split)} records to {out} {counts}")
    return 0


def cmd_build_graph(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    out = Path(args.out)
    k = cfg.model.top_k if args.k is None else args.k
    manifest = _start_manifest(
        out, "build-graph", args.seed, cfg, {"corpus": _hash_file(Path(args.corpus))}
    )
    split = _read_corpus(args.corpus)
    vocab = Vocabulary.from_corpus(split.train, min_count=cfg.model.min_count)
    graph = build_progression_graph(
        split.train, vocab, k=k, num_workers=resolve_num_workers()
    )
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(graph_to_json(graph) + "\n", encoding="utf-8")
    _finish_manifest(manifest, {out.name: sha256_of_file(out)})
    print(
        f"wrote graph with {len(graph.nodes)} nodes, {len(graph.edges)} edges "
        f"(K={graph.k}) to {out}"
    )
    return 0


def cmd_train_stage1(args: argparse.Namespace) -> int:
    cfg = _apply_seed(_load_config(args), args.seed)
    out = Path(args.out)
    manifest = _start_manifest(
        out, "train-stage1", args.seed, cfg, {"corpus": _hash_file(Path(args.corpus))}
    )
    split = _read_corpus(args.corpus)
    result = train_stage1(split, cfg, out, num_workers=resolve_num_workers())
    _finish_manifest(manifest, _hash_dir(out))
    print(
        f"stage-1 checkpoint at {out}: best epoch {result.best_epoch}, "
        f"validation macro-F1 (abnormal) {result.best_metric:.4f}"
    )
    return 0


def _epochs_explicitly_set(args: argparse.Namespace) -> bool:
    if any(o.startswith("stage2.epochs=") for o in (getattr(args, "set", None) or [])):
        return True
    if getattr(args, "config", None):
        try:
            obj = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError):
            return False
        return isinstance(obj, dict) and "epochs" in obj.get("stage2", {})
    return False


def cmd_train_stage2(args: argparse.Namespace) -> int:
    cfg = _apply_seed(_load_config(args), args.seed)
    if args.ablation is not None:
        cfg = dataclasses.replace(
            cfg, stage2=dataclasses.replace(cfg.stage2, ablation=args.ablation)
        )
    # Variants that drop the observation context train longer by default.
    if cfg.stage2.ablation in ("no-obs", "no-op") and not _epochs_explicitly_set(args):
        cfg = dataclasses.replace(
            cfg, stage2=dataclasses.replace(cfg.stage2, epochs=10)
        )
    cfg.validate()
    out = Path(args.out)
    inputs = {
        "corpus": _hash_file(Path(args.corpus)),
        "graph": _hash_file(Path(args.graph)),
    }
    if args.checkpoint:
        inputs["stage1_checkpoint"] = _hash_dir(Path(args.checkpoint))
    manifest = _start_manifest(out, "train-stage2", args.seed, cfg, inputs)
    split = _read_corpus(args.corpus)
    graph = _load_graph(args.graph)
    result = train_stage2(
        split,
        graph,
        cfg,
        out,
        stage1_dir=args.checkpoint,
        num_workers=resolve_num_workers(),
    )
    _finish_manifest(manifest, _hash_dir(out))
    print(
        f"stage-2 checkpoint at {out}: best epoch {result.best_epoch}, "
        f"validation BLEU-4 {result.best_metric:.4f} "
        f"(ablation {cfg.stage2.ablation})"
    )
    return 0


def _decode_split(args: argparse.Namespace):
    split = _read_corpus(args.corpus)
    records = list(split.partition(args.split))
    if not records:
        raise ConfigError(f"partition {args.split!r} of {args.corpus} is empty")
    graph = _load_graph(args.graph)
    bundle = load_stage2_checkpoint(args.checkpoint, graph)
    max_steps = (
        bundle.config.model.max_steps if args.max_steps is None else args.max_steps
    )
    generated = decode_reports(
        bundle.generator,
        records,
        graph,
        stage1_model=bundle.stage1_model,
        max_steps=max_steps,
        mode=args.mode,
        beam_size=args.beam_size,
        batch_size=bundle.config.stage2.eval_batch_size,
    )
    texts = [" ".join(tokens) for tokens in generated]
    return records, texts, bundle, graph, max_steps


def _write_generated(path: Path, records, texts) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record, text in zip(records, texts):
            fh.write(
                json.dumps(
                    {
                        "subject_id": record.subject_id,
                        "study_id": record.study_id,
                        "generated": text,
                        "reference": record.report,
                    },
                    sort_keys=True,
                )
            )
            fh.write("\n")


def _decode_inputs(args: argparse.Namespace) -> dict:
    return {
        "corpus": _hash_file(Path(args.corpus)),
        "graph": _hash_file(Path(args.graph)),
        "checkpoint": _hash_dir(Path(args.checkpoint)),
        "split": args.split,
    }


def cmd_generate(args: argparse.Namespace) -> int:
    out = Path(args.out)
    manifest = _start_manifest(out, "generate", args.seed, None, _decode_inputs(args))
    records, texts, _, _, _ = _decode_split(args)
    out.mkdir(parents=True, exist_ok=True)
    generated_path = out / "generated.jsonl"
    _write_generated(generated_path, records, texts)
    _finish_manifest(manifest, _hash_dir(out))
    print(f"wrote {len(texts)} generated reports to {generated_path}")
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    out = Path(args.out)
    manifest = _start_manifest(out, "evaluate", args.seed, None, _decode_inputs(args))
    records, texts, bundle, graph, max_steps = _decode_split(args)
    report = compute_metrics(
        texts, [r.report for r in records], label_report_observations
    )
    obj = report.to_obj()
    obj["provenance"] = {
        "split": args.split,
        "mode": args.mode,
        "max_steps": max_steps,
        "corpus_sha256": sha256_of_file(Path(args.corpus)),
        "graph_sha256": bundle.graph_sha256,
        "checkpoint_sha256": sha256_of_file(Path(args.checkpoint) / "params.pt"),
        "checkpoint_config_sha256": sha256_of_file(
            Path(args.checkpoint) / "config.json"
        ),
    }
    out.mkdir(parents=True, exist_ok=True)
    _write_generated(out / "generated.jsonl", records, texts)
    _write_json(out / "metrics.json", obj)
    _finish_manifest(manifest, _hash_dir(out))
    print(report.table())
    print(f"metrics written to {out / 'metrics.json'}")
    return 0


def _node_name(graph, index: int) -> str:
    node = graph.nodes[index]
    if node.is_entity:
        return node.label
    return f"{node.label}[{node.status},{node.side}]"


def cmd_inspect_graph(args: argparse.Namespace) -> int:
    graph = _load_graph(args.graph)
    node_counts: dict[str, int] = {}
    for node in graph.nodes:
        node_counts[node.kind] = node_counts.get(node.kind, 0) + 1
    edge_counts: dict[str, int] = {}
    for edge in graph.edges:
        edge_counts[edge.relation] = edge_counts.get(edge.relation, 0) + 1
    strongest: dict[str, list[dict]] = {}
    for relation in sorted(edge_counts):
        scored = [e for e in graph.edges if e.relation == relation and e.pmi is not None]
        scored.sort(key=lambda e: (-e.pmi, _node_name(graph, e.source), _node_name(graph, e.target)))
        strongest[relation] = [
            {
                "source": _node_name(graph, e.source),
                "target": _node_name(graph, e.target),
                "pmi": e.pmi,
            }
            for e in scored[:5]
        ]
    summary = {
        "k": graph.k,
        "n_nodes": len(graph.nodes),
        "n_edges": len(graph.edges),
        "nodes_by_kind": node_counts,
        "edges_by_relation": edge_counts,
        "strongest_edges": strongest,
    }
    text = json.dumps(summary, indent=2, sort_keys=True)
    print(text)
    if args.out:
        out = Path(args.out)
        manifest = _start_manifest(
            out, "inspect-graph", args.seed, None,
            {"graph": _hash_file(Path(args.graph))},
        )
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text + "\n", encoding="utf-8")
        _finish_manifest(manifest, {out.name: sha256_of_file(out)})
    return 0


def _add_common(parser: argparse.ArgumentParser, *, config: bool = True) -> None:
    if config:
        parser.add_argument("--config", help="JSON config file")
        parser.add_argument(
            "--set",
            action="append",
            metavar="SECTION.KEY=VALUE",
            help="config override, repeatable (wins over the file)",
        )
    parser.add_argument("--seed", type=int, help="seed controlling all randomness")


def _add_decode_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--corpus", required=True, help="corpus JSONL file")
    parser.add_argument("--graph", required=True, help="graph JSON artifact")
    parser.add_argument(
        "--checkpoint", required=True, help="stage-2 checkpoint directory"
    )
    parser.add_argument(
        "--split", choices=PARTITIONS, default="test", help="corpus partition"
    )
    parser.add_argument("--max-steps", type=int, help="decoding step limit")
    parser.add_argument("--mode", choices=("greedy", "beam"), default="greedy")
    parser.add_argument("--beam-size", type=int, default=4)
    parser.add_argument("--out", required=True, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="radprogress",
        description="Two-stage progression-aware radiology report generation.",
    )
    sub = parser.add_subparsers(dest="verb", required=True, metavar="VERB")

    p = sub.add_parser("synth-data", help="write a synthetic corpus")
    p.add_argument("--out", required=True, help="corpus JSONL path")
    p.add_argument("--size", type=int, default=200, help="number of records")
    p.add_argument("--follow-up-ratio", type=float, default=0.24)
    _add_common(p, config=False)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("build-graph", help="mine the progression graph")
    p.add_argument("--corpus", required=True, help="corpus JSONL file")
    p.add_argument("--out", required=True, help="graph JSON path")
    p.add_argument("--k", type=int, help="entities kept per (observation, relation)")
    _add_common(p)
    p.set_defaults(func=cmd_build_graph)

    p = sub.add_parser("train-stage1", help="train the observation predictor")
    p.add_argument("--corpus", required=True, help="corpus JSONL file")
    p.add_argument("--out", required=True, help="checkpoint directory")
    _add_common(p)
    p.set_defaults(func=cmd_train_stage1)

    p = sub.add_parser("train-stage2", help="train the report generator")
    p.add_argument("--corpus", required=True, help="corpus JSONL file")
    p.add_argument("--graph", required=True, help="graph JSON artifact")
    p.add_argument(
        "--checkpoint",
        help="stage-1 checkpoint directory (optional for no-obs/no-op)",
    )
    p.add_argument("--ablation", choices=ABLATIONS, help="structural variant")
    p.add_argument("--out", required=True, help="checkpoint directory")
    _add_common(p)
    p.set_defaults(func=cmd_train_stage2)

    p = sub.add_parser("generate", help="decode reports for a split")
    _add_decode_flags(p)
    _add_common(p, config=False)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", help="decode and score a split")
    _add_decode_flags(p)
    _add_common(p, config=False)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("inspect-graph", help="summarize a graph artifact")
    p.add_argument("--graph", required=True, help="graph JSON artifact")
    p.add_argument("--out", help="optional summary JSON path")
    _add_common(p, config=False)
    p.set_defaults(func=cmd_inspect_graph)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except Exception as exc:  # one-line machine-parseable failure contract
        print(f"error: {exc}", file=sys.stderr)
        return 1


__all__ = ["build_parser", "main"]
