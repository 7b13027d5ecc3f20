"""``sgprior`` command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure (non-finite values, diverged training).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from . import __version__
from .config import ConfigError, EngineConfig, default_config_dict, load_config
from .frame_ingest import load_external_embeddings, load_frame, write_embeddings, write_frame
from .gnn import checkpoint
from .gnn.dataset import label_embeddings
from .gnn.model import NumericError, init_params
from .gnn.train import TrainConfig, standardize_for, train
from .knowledge_graph import KnowledgeGraph, read_kg_json, write_kg_json
from .pipeline import (
    FrameError,
    attach_embeddings,
    build_global,
    dataset_batches,
    discover_scenes,
    extract_kg,
    infer,
    model_config,
)
from .scene_model import SceneGraph
from .serialize import deserialize_graph, serialize_graph, to_dot
from .synth import SceneSpec, corrupt, generate

logger = logging.getLogger("sgprior")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")


def _out_dir(args, cfg: EngineConfig) -> Path:
    out = args.out or cfg.paths.output_dir
    if not out:
        raise UsageError("no output directory: pass --out or set paths.output_dir")
    p = Path(out)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _read_kg(path: Optional[str]) -> Optional[KnowledgeGraph]:
    if not path:
        return None
    return read_kg_json(json.loads(Path(path).read_text()))


def _write_graph(graph: SceneGraph, path: Path, meta=None) -> None:
    path.write_text(serialize_graph(graph, meta))


def cmd_build(args, cfg: EngineConfig) -> int:
    out = _out_dir(args, cfg)
    frames = [load_frame(p) for p in args.frames]
    result = build_global(frames, cfg)
    _write_graph(result.global_graph, out / "global.json")
    for frame, local in zip(frames, result.local_graphs):
        _write_graph(local, out / f"local_{frame.frame_id:04d}.json", {"frame_id": frame.frame_id})
    _dump_json(result.report_dict(), out / "report.json")
    return EXIT_OK


def cmd_kg_extract(args, cfg: EngineConfig) -> int:
    out = _out_dir(args, cfg)
    kg, report = extract_kg(cfg)
    _dump_json(write_kg_json(kg), out / "kg.json")
    _dump_json(report, out / "kg_report.json")
    return EXIT_OK


def cmd_kg_embed(args, cfg: EngineConfig) -> int:
    kg = _read_kg(args.kg)
    report = attach_embeddings(kg, cfg)
    if report["embedding"] == "none":
        raise UsageError("kg.embedding is 'none'; choose numberbatch or spectral")
    Path(args.out).write_text(json.dumps(write_kg_json(kg), sort_keys=True, indent=1) + "\n")
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


def cmd_train(args, cfg: EngineConfig) -> int:
    out = _out_dir(args, cfg)
    kg = _read_kg(args.kg)
    mcfg = model_config(cfg, kg)
    scenes = discover_scenes(Path(args.dataset))
    if not scenes:
        raise FileNotFoundError(f"no *.frame files under {args.dataset}")
    batches = dataset_batches(scenes, cfg, mcfg, kg)
    params = standardize_for(init_params(mcfg), batches)
    tcfg = TrainConfig(cfg.train.epochs, cfg.train.learning_rate, cfg.train.seed)
    losses: List[float] = []
    try:
        result = train(params, batches, tcfg, on_epoch=lambda e, l: losses.append(l))
    finally:
        (out / "losses.txt").write_text(
            "".join(f"{i} {repr(l)}\n" for i, l in enumerate(losses)))
    ckpt = Path(cfg.paths.checkpoint) if cfg.paths.checkpoint else out / "model.ckpt"
    checkpoint.save(result.params, ckpt)
    logger.info("trained %d epochs on %d batches", tcfg.epochs, len(batches))
    return EXIT_OK


def cmd_infer(args, cfg: EngineConfig) -> int:
    ckpt = args.checkpoint or cfg.paths.checkpoint
    if not ckpt:
        raise UsageError("no checkpoint: pass --checkpoint or set paths.checkpoint")
    params = checkpoint.load(ckpt)
    if params.config.num_node_classes != len(cfg.classes):
        raise ValueError(f"checkpoint has {params.config.num_node_classes} classes, "
                         f"config lists {len(cfg.classes)}")
    out = _out_dir(args, cfg)
    kg = _read_kg(args.kg)
    if kg is not None and (kg.embedding_dim or 0) != params.config.concept_dim:
        raise ValueError(f"knowledge graph embedding width {kg.embedding_dim} does not match "
                         f"the checkpoint's {params.config.concept_dim}")
    frames = [load_frame(p) for p in args.frames]
    emb = None
    if params.config.local_embedding_dim:
        emb = []
        for p in args.frames:
            path = Path(p).with_suffix(".emb")
            if not path.exists():
                raise FileNotFoundError(f"model expects local embeddings; {path} is missing")
            emb.append(load_external_embeddings(path, "segment"))
    res = infer(params, frames, cfg, kg, context=not args.context_free, local_embeddings=emb)
    _write_graph(res.build.global_graph, out / "global.json")
    for frame, local in zip(frames, res.build.local_graphs):
        _write_graph(local, out / f"local_{frame.frame_id:04d}.json", {"frame_id": frame.frame_id})
    _dump_json(res.report, out / "report.json")
    return EXIT_OK


def cmd_gen(args, cfg: EngineConfig) -> int:
    out = _out_dir(args, cfg)
    for k in range(args.scenes):
        seed = args.seed + k
        spec = SceneSpec(seed=seed, frames=args.frames, dropout=args.dropout,
                         noise_sigma=args.noise, num_supporters=args.supporters)
        seq = generate(spec, cfg.resolution)
        d = out / f"scene_{seed:05d}"
        d.mkdir(exist_ok=True)
        for i, frame in enumerate(seq.frames):
            write_frame(frame, d / f"frame_{i:03d}.frame")
            if args.label_noise is not None:
                noisy = corrupt(frame, args.label_noise, seed=seed * 1000 + i,
                                classes=cfg.classes)
                write_embeddings(label_embeddings(noisy, cfg.classes), d / f"frame_{i:03d}.emb")
        truth = {
            "seed": seed,
            "objects": [{"index": o.index, "class": o.cls,
                         "min": [float(f"{v:.9g}") for v in o.lo],
                         "max": [float(f"{v:.9g}") for v in o.hi]} for o in seq.objects],
            "supports": [list(p) for p in seq.supports],
            "contacts": [list(p) for p in seq.contacts],
            "next_to": [list(p) for p in seq.next_to],
            "identity": [{str(s): o for s, o in sorted(ident.items())} for ident in seq.identity],
        }
        _dump_json(truth, d / "truth.json")
    return EXIT_OK


def _graph_stats(graph: SceneGraph) -> dict:
    nodes, edges, layers = {}, {}, {}
    for n in graph.nodes.values():
        nodes[n.node_type] = nodes.get(n.node_type, 0) + 1
        if n.node_type in ("local_object", "global_object"):
            layers[str(n.layer)] = layers.get(str(n.layer), 0) + 1
    for e in graph.edges.values():
        edges[e.edge_type] = edges.get(e.edge_type, 0) + 1
    return {"nodes": nodes, "edges": edges, "object_layers": layers}


def cmd_stats(args, cfg: EngineConfig) -> int:
    path = Path(args.path)
    if path.suffix == ".frame":
        f = load_frame(path)
        stats = {"frame_id": f.frame_id, "points": int(len(f.points)),
                 "segments": len(f.segments), "labeled": len(f.gt_class),
                 "relations": len(f.gt_relations)}
    else:
        stats = _graph_stats(deserialize_graph(path.read_bytes()))
    print(json.dumps(stats, sort_keys=True, indent=1))
    return EXIT_OK


def cmd_export(args, cfg: EngineConfig) -> int:
    graph = deserialize_graph(Path(args.graph).read_bytes())
    text = to_dot(graph, Path(args.graph).stem)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_config(args, cfg: EngineConfig) -> int:
    print(json.dumps(cfg.to_dict() if args.effective else default_config_dict(),
                     sort_keys=True, indent=1))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON configuration file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value, e.g. model.hidden_dim=32")
    common.add_argument("-v", "--verbose", action="count", default=0)

    p = _Parser(prog="sgprior", description="Layered 3D scene graphs with expectation priors.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("build", parents=[common], help="fuse frames into a global graph")
    s.add_argument("frames", nargs="*")
    s.add_argument("--out")
    s.set_defaults(func=cmd_build)

    s = sub.add_parser("kg-extract", parents=[common], help="extract a knowledge subgraph")
    s.add_argument("--dump", help="assertion dump (overrides paths.kg_dump)")
    s.add_argument("--out")
    s.set_defaults(func=cmd_kg_extract)

    s = sub.add_parser("kg-embed", parents=[common], help="attach embeddings to a subgraph")
    s.add_argument("kg", help="knowledge graph JSON from kg-extract")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_kg_embed)

    s = sub.add_parser("train", parents=[common], help="train the classifier")
    s.add_argument("dataset", help="directory of scene folders with *.frame files")
    s.add_argument("--kg", help="knowledge graph JSON")
    s.add_argument("--epochs", type=int)
    s.add_argument("--out")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("infer", parents=[common], help="predict and annotate frames")
    s.add_argument("frames", nargs="+")
    s.add_argument("--checkpoint")
    s.add_argument("--kg", help="knowledge graph JSON")
    s.add_argument("--context-free", action="store_true",
                   help="suppress cross-layer conduits (local-only prediction)")
    s.add_argument("--out")
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("gen", parents=[common], help="generate synthetic scenes")
    s.add_argument("--out")
    s.add_argument("--scenes", type=int, default=1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--frames", type=int, default=1)
    s.add_argument("--supporters", type=int, default=2)
    s.add_argument("--dropout", type=float, default=0.0)
    s.add_argument("--noise", type=float, default=0.0, help="point noise sigma in meters")
    s.add_argument("--label-noise", type=float,
                   help="also write per-frame label embeddings with this corruption rate")
    s.set_defaults(func=cmd_gen)

    s = sub.add_parser("stats", parents=[common], help="summarize a graph or frame file")
    s.add_argument("path")
    s.set_defaults(func=cmd_stats)

    s = sub.add_parser("export", parents=[common], help="render a graph as Graphviz DOT")
    s.add_argument("graph")
    s.add_argument("--out")
    s.set_defaults(func=cmd_export)

    s = sub.add_parser("config", parents=[common], help="print the default configuration")
    s.add_argument("--effective", action="store_true",
                   help="print the configuration after --config and --set")
    s.set_defaults(func=cmd_config)
    return p


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, FrameError):
        exc = exc.cause
    if isinstance(exc, (NumericError, FloatingPointError)):
        return EXIT_NUMERIC
    if isinstance(exc, (ConfigError, UsageError)):
        return EXIT_USAGE
    return EXIT_DATA


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = list(args.set)
        if getattr(args, "epochs", None) is not None:
            overrides.append(f"train.epochs={args.epochs}")
        if getattr(args, "dump", None):
            overrides.append(f"paths.kg_dump={json.dumps(args.dump)}")
        cfg = load_config(args.config, overrides)
        return args.func(args, cfg)
    except Exception as exc:  # every failure becomes a one-line diagnostic and an exit code
        code = _exit_code(exc)
        print(f"sgprior: error: {exc}", file=sys.stderr)
        logger.debug("traceback", exc_info=True)
        return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
