"""``dualmode`` command-line entry point.

Every invocation creates ``<out>/<subcommand>-<timestamp>-<confighash>/``
holding ``config.json`` (the resolved config plus overrides and seed) and all
artifacts. Exit codes: 0 success, 1 runtime failure, 2 usage/config error;
failures print a one-line JSON error object on stderr.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, load_config, load_config_file

logger = logging.getLogger("dualmode")

OUT_ENV = "DUALMODE_OUT"

SUBCOMMANDS = ("synth-data", "prepare", "pretrain", "finetune", "extract-embeddings", "kmeans", "distill",
               "finetune-dual", "eval-grid", "probe", "layer-sweep", "analyze-masks")

# subcommand -> (allowed stages, default stage)
STAGE_COMMANDS = {
    "pretrain": (("S1", "brq_dm"), "S1"),
    "finetune": (("S2", "baseline_streaming", "baseline_full_context"), "S2"),
    "distill": (("S3", "distill_from_E1"), "S3"),
    "finetune-dual": (("S4",), "S4"),
}


class UsageError(Exception):
    pass


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted config override, applied after --config (repeatable)")
    common.add_argument("--seed", type=int, help="shorthand for --set seed=N")
    common.add_argument("--out", help=f"output root (default ${OUT_ENV} or ./runs)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="dualmode", description="Dual-mode speech encoder training recipe.")
    sub = p.add_subparsers(dest="command", metavar="SUBCOMMAND")
    sub.required = True

    s = sub.add_parser("synth-data", parents=[common], help="write the synthetic tone-sequence corpus")
    s.add_argument("--n-utts", type=int, default=240)

    sub.add_parser("prepare", parents=[common], help="compute features and dataset splits")

    for name, (stages, default) in STAGE_COMMANDS.items():
        s = sub.add_parser(name, parents=[common], help=f"train stage {'/'.join(stages)}")
        s.add_argument("--stage", choices=stages, default=None, help=f"default: config stage or {default}")
        s.add_argument("--init", help="parent checkpoint (stage.init)")
        s.add_argument("--resume", help="resume from this stage's own mid-run checkpoint")
        if name == "distill":
            s.add_argument("--teacher", help="teacher checkpoint (stage.teacher)")
            s.add_argument("--pseudo-labels", help="precomputed pseudo-label directory")

    s = sub.add_parser("extract-embeddings", parents=[common], help="dump teacher block embeddings")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--block", type=int, required=True, help="0-based Conformer block")
    s.add_argument("--split", default="train")

    s = sub.add_parser("kmeans", parents=[common], help="fit k-means and write pseudo-labels")
    s.add_argument("--embeddings", required=True, help="extract-embeddings output directory")
    s.add_argument("--k", type=int, help="default: stage.distill.k_clusters")

    s = sub.add_parser("eval-grid", parents=[common], help="WER of one checkpoint over the context grid")
    s.add_argument("--checkpoint", required=True)

    for name in ("probe", "layer-sweep"):
        s = sub.add_parser(name, parents=[common], help="frozen-encoder probing")
        s.add_argument("--checkpoint", required=True)
        s.add_argument("--max-train", type=int, default=0, help="cap on probe training utterances (0: all)")
        s.add_argument("--no-plots", action="store_true")

    s = sub.add_parser("analyze-masks", parents=[common], help="print an attention mask and its reachability")
    s.add_argument("--T", type=int, required=True)
    s.add_argument("--lb-frames", default="inf")
    s.add_argument("--la-frames", default="inf")
    s.add_argument("--layers", type=int, default=2)
    return p


def _frames(text: str):
    if text.lower() in ("inf", "none"):
        return float("inf")
    v = int(text)
    if v < 0:
        raise UsageError(f"frame counts must be >= 0, got {v}")
    return v


def _resolve_config(args) -> tuple[RunConfig, list]:
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    cfg = load_config_file(args.config, overrides) if args.config else load_config({}, overrides)
    return cfg, overrides


def _run_dir(args, cfg: RunConfig) -> Path:
    root = Path(args.out or os.environ.get(OUT_ENV) or "runs")
    stamp = time.strftime("%Y%m%d-%H%M%S")
    d = root / f"{args.command}-{stamp}-{cfg.config_hash()}"
    n = 1
    while d.exists():
        d = root / f"{args.command}-{stamp}-{cfg.config_hash()}-{n}"
        n += 1
    d.mkdir(parents=True)
    return d


def _write_snapshot(run_dir: Path, cfg: RunConfig, overrides: list, args) -> None:
    snap = {"command": args.command, "config": cfg.to_dict(), "overrides": overrides, "seed": cfg.seed,
            "config_file": args.config}
    (run_dir / "config.json").write_text(json.dumps(snap, indent=1, sort_keys=True))


# --------------------------------------------------------------------------
# subcommand bodies; each returns a JSON-able summary


def _cmd_synth_data(args, cfg, run_dir):
    from .audio_io import synth_dataset

    manifest, entries = synth_dataset(args.n_utts, cfg.seed, run_dir / "data")
    return {"manifest": str(manifest), "n_utts": len(entries)}


def _corpus(cfg, run_dir=None):
    from .pipeline import prepare_corpus

    if not cfg.data.manifest:
        raise ConfigError("data.manifest", "required")
    return prepare_corpus(cfg)


def _cmd_prepare(args, cfg, run_dir):
    from dataclasses import replace

    from .pipeline import prepare_corpus

    if not cfg.data.manifest:
        raise ConfigError("data.manifest", "required")
    if not cfg.data.feature_cache:
        cfg = replace(cfg, data=replace(cfg.data, feature_cache=str(run_dir / "features")))
    corpus = prepare_corpus(cfg)
    (run_dir / "splits.json").write_text(json.dumps(corpus.splits, indent=1))
    (run_dir / "tokenizer.json").write_text(json.dumps(corpus.tokenizer.words))
    return {"feature_cache": cfg.data.feature_cache, "splits": {k: len(v) for k, v in corpus.splits.items()},
            "vocab_size": corpus.tokenizer.vocab_size}


def _cmd_stage(args, cfg, run_dir):
    from .config import stage_config
    from .pipeline import run_stage

    allowed, default = STAGE_COMMANDS[args.command]
    stage = args.stage or (cfg.stage.name if cfg.stage.name in allowed else default)
    extra = []
    if args.init:
        extra.append(("stage.init", args.init))
    if getattr(args, "teacher", None):
        extra.append(("stage.teacher", args.teacher))
    if getattr(args, "pseudo_labels", None):
        extra.append(("stage.pseudo_labels", args.pseudo_labels))
    scfg = stage_config(cfg, stage, extra)
    _write_snapshot(run_dir, scfg, args._overrides + [f"{k}={v}" for k, v in extra], args)
    res = run_stage(scfg, _corpus(scfg), run_dir / "checkpoint", resume=args.resume)
    return {"stage": stage, "checkpoint": str(res.path), "checkpoint_id": res.checkpoint_id,
            "final_loss": res.losses[-1] if res.losses else None}


def _cmd_extract(args, cfg, run_dir):
    from .pipeline import load_encoder
    from .quantizer import extract_embeddings

    corpus = _corpus(cfg)
    enc, meta = load_encoder(args.checkpoint)
    ids = corpus.split(args.split)
    store = extract_embeddings(enc, args.block, {u: corpus.features[u] for u in ids}, meta["checkpoint_id"])
    store.save(run_dir / "embeddings")
    return {"embeddings": str(run_dir / "embeddings"), "n_utts": len(store), "block": args.block,
            "checkpoint_id": meta["checkpoint_id"]}


def _cmd_kmeans(args, cfg, run_dir):
    from .quantizer import EmbeddingStore, assign, kmeans_fit

    store = EmbeddingStore.load(args.embeddings)
    d = cfg.stage.distill
    cents = kmeans_fit(store, args.k or d.k_clusters, seed=d.kmeans_seed, subsample=d.kmeans_subsample)
    cents.save(run_dir / "centroids")
    assign(store, cents).save(run_dir / "pseudo_labels")
    return {"centroids": str(run_dir / "centroids"), "pseudo_labels": str(run_dir / "pseudo_labels"),
            "inertia": cents.inertia, "n_iter": cents.n_iter}


def _cmd_eval_grid(args, cfg, run_dir):
    from .pipeline import evaluate_grid, write_table

    rows = evaluate_grid(args.checkpoint, cfg.eval.grid, _corpus(cfg), cfg.eval.split)
    csv_path, _ = write_table(rows, run_dir, "eval_grid")
    return {"table": str(csv_path), "rows": rows}


def _probe_setup(args, cfg):
    from .maskgen import ContextSpec
    from .pipeline import load_encoder, probe_items
    from .probe import ProbeConfig

    corpus = _corpus(cfg)
    enc, meta = load_encoder(args.checkpoint)
    train_ids = corpus.split("train")
    if args.max_train:
        train_ids = train_ids[: args.max_train]
    need_contours = any(t in ("pitch_contour", "intensity_contour", "speaking_rate")
                        for t in (cfg.probe.tasks + [cfg.probe.task]))
    train = probe_items(corpus, corpus.transcribed(train_ids), need_contours)
    dev = probe_items(corpus, corpus.transcribed(corpus.split("dev")), need_contours)
    pcfg = ProbeConfig(steps=cfg.probe.steps, batch_size=cfg.probe.batch_size, lr=cfg.probe.lr, seed=cfg.seed)
    ctx = ContextSpec.from_json(cfg.probe.context)
    return corpus, enc, meta, train, dev, pcfg, ctx


def _cmd_probe(args, cfg, run_dir):
    from .probe import LayerSelection, ProbeReport, ProbeTask, evaluate_probe, train_probe

    corpus, enc, meta, train, dev, pcfg, ctx = _probe_setup(args, cfg)
    task = ProbeTask(cfg.probe.task)
    layer = cfg.probe.layer
    sel = LayerSelection("weighted_sum") if layer == "all" else LayerSelection("single", int(layer))
    head = train_probe(enc, task, sel, ctx, train, pcfg, max(len(corpus.classes), 1), corpus.tokenizer.vocab_size)
    value = evaluate_probe(head, enc, dev, ctx)
    row = {"task": task.kind, "metric": task.metric, "layer": sel.label(), "context": ctx.label(),
           "split": "dev", "value": value, "checkpoint_id": meta["checkpoint_id"], "seed": cfg.seed}
    if sel.mode == "weighted_sum":
        row["layer_weights"] = head.layer_weights().tolist()
    ProbeReport([row]).save(run_dir, plots=False)
    return row


def _cmd_layer_sweep(args, cfg, run_dir):
    from .probe import ProbeTask, layer_sweep

    corpus, enc, meta, train, dev, pcfg, ctx = _probe_setup(args, cfg)
    tasks = [ProbeTask(t) for t in cfg.probe.tasks]
    report = layer_sweep(enc, tasks, ctx, train, dev, pcfg, meta["checkpoint_id"],
                         max(len(corpus.classes), 1), corpus.tokenizer.vocab_size)
    report.save(run_dir, plots=not args.no_plots)
    return {"report": str(run_dir / "probe_report.csv"), "best_layers": report.best_layers()}


def _cmd_analyze_masks(args, cfg, run_dir):
    from .maskgen import build_mask, reachability_table, verify_no_lookahead_accumulation

    if args.T < 1:
        raise UsageError("--T must be >= 1")
    if args.layers < 1:
        raise UsageError("--layers must be >= 1")
    mask = build_mask(args.T, _frames(args.lb_frames), _frames(args.la_frames))
    dense = mask.dense()
    lines = ["".join("1" if v else "0" for v in row) for row in dense]
    rows = reachability_table(mask, args.layers)
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=["t", "layers", "min_reach", "max_reach"], lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    print("\n".join(lines))
    print()
    print(buf.getvalue(), end="")
    (run_dir / "allow.txt").write_text("\n".join(lines) + "\n")
    (run_dir / "reachability.csv").write_text(buf.getvalue())
    np.save(run_dir / "allow.npy", dense)
    return {"no_lookahead_accumulation": verify_no_lookahead_accumulation(mask, args.layers),
            "chunk_size": mask.chunk_size if np.isfinite(mask.chunk_size) else None}


COMMANDS = {
    "synth-data": _cmd_synth_data,
    "prepare": _cmd_prepare,
    "pretrain": _cmd_stage,
    "finetune": _cmd_stage,
    "distill": _cmd_stage,
    "finetune-dual": _cmd_stage,
    "extract-embeddings": _cmd_extract,
    "kmeans": _cmd_kmeans,
    "eval-grid": _cmd_eval_grid,
    "probe": _cmd_probe,
    "layer-sweep": _cmd_layer_sweep,
    "analyze-masks": _cmd_analyze_masks,
}


def _error(kind: str, message: str, **extra) -> None:
    print(json.dumps({"error": kind, "message": message, **extra}), file=sys.stderr)


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # argparse already printed usage
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg, overrides = _resolve_config(args)
        args._overrides = overrides
        run_dir = _run_dir(args, cfg)
        _write_snapshot(run_dir, cfg, overrides, args)
    except ConfigError as e:
        _error("config", str(e), key_path=e.key_path)
        return 2
    except FileNotFoundError as e:
        _error("usage", str(e))
        return 2
    try:
        summary = COMMANDS[args.command](args, cfg, run_dir)
    except ConfigError as e:
        _error("config", str(e), key_path=e.key_path)
        return 2
    except UsageError as e:
        _error("usage", str(e))
        return 2
    except Exception as e:  # noqa: BLE001 - reported as machine-readable error
        logger.debug("failure", exc_info=True)
        _error(type(e).__name__, str(e), run_dir=str(run_dir))
        return 1
    summary = {"run_dir": str(run_dir), **(summary or {})}
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=1, default=str))
    if args.command != "analyze-masks":
        print(json.dumps(summary, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
