"""Experiment runner CLI: synth | train | eval | ablate | report.

Exit codes: 0 success, 1 config error, 2 runtime abort (non-finite loss),
3 I/O error. Every run directory is self-describing: config + manifest +
JSONL logs reproduce the run bit-identically on the same machine.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import ExperimentConfig, apply_toggles, load_config
from .evalkit import evaluate_split, protocol_rounds, random_rank1_rate, run_protocol
from .pipeline import (
    MetricLog,
    StagePlan,
    TrainConfig,
    TrainedModel,
    TrainingDiverged,
    load_checkpoint,
    run_stage_finetune,
    run_stage_prompt,
    save_checkpoint,
    train,
)
from .synthdata import ConfigError, DatasetSplit, build_dataset

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_IO = 0, 1, 2, 3

ABLATION_GRID = (
    ("baseline", dict(three_stage=False, use_grl=False, apn=False)),
    ("three_stage", dict(three_stage=True, use_grl=False, apn=False)),
    ("guidance", dict(three_stage=False, use_grl=True, apn=True)),
    ("full_no_apn", dict(three_stage=True, use_grl=True, apn=False)),
    ("full", dict(three_stage=True, use_grl=True, apn=True)),
)


def _write_manifest(out_dir: Path, cfg: ExperimentConfig, seeds: list[int],
                    end_time: str | None = None, artifacts: list[str] | None = None):
    manifest = {
        "config_hash": cfg.config_hash(),
        "code_version": __version__,
        "seeds": seeds,
        "start_time": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "end_time": end_time,
        "artifacts": artifacts or [],
    }
    existing = out_dir / "manifest.json"
    if existing.exists():
        manifest["start_time"] = json.loads(existing.read_text())["start_time"]
    existing.write_text(json.dumps(manifest, indent=2, sort_keys=True))


def _save_dataset(split: DatasetSplit, path: Path):
    arrays = {}
    meta = {"sections": {}}
    for section, samples in (("query", split.query), ("gallery", split.gallery)):
        arrays[f"{section}_pixels"] = np.stack([s.pixels for s in samples])
        meta["sections"][section] = {
            "pids": [s.pid for s in samples],
            "domain_ids": [s.domain_id for s in samples],
            "camera_ids": [s.camera_id for s in samples],
        }
    for dom in sorted(split.train):
        samples = split.train[dom]
        arrays[f"train{dom}_pixels"] = np.stack([s.pixels for s in samples])
        meta["sections"][f"train{dom}"] = {
            "pids": [s.pid for s in samples],
            "domain_ids": [s.domain_id for s in samples],
            "camera_ids": [s.camera_id for s in samples],
        }
    meta["heldout_domain"] = split.heldout_domain
    np.savez(path, **arrays)
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def cmd_synth(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    split = build_dataset(cfg.data)
    _save_dataset(split, out / "dataset.npz")
    counts = {
        "train": len(split.train_samples),
        "query": len(split.query),
        "gallery": len(split.gallery),
    }
    (out / "dataset_manifest.json").write_text(json.dumps({
        "config_hash": cfg.config_hash(),
        "counts": counts,
        "heldout_domain": split.heldout_domain,
    }, indent=2, sort_keys=True))
    print(f"dataset written to {out}/dataset.npz: {counts}")
    return EXIT_OK


def _train_one_seed(cfg: ExperimentConfig, train_cfg: TrainConfig, seed: int,
                    out: Path, resume: str | None) -> tuple[TrainedModel, MetricLog]:
    split = build_dataset(cfg.data)
    tc = replace(train_cfg, seed=seed)
    if resume:
        model = load_checkpoint(resume, tc)
        log = MetricLog()
        if "prompt" in model.stages_run:
            model = run_stage_finetune(tc, model, split, log)
        elif "initial" in model.stages_run:
            model = run_stage_prompt(tc, model, split, log)
            model = run_stage_finetune(tc, model, split, log)
        else:
            model, log = train(tc, split, model)
    else:
        model, log = train(tc, split)
    model.config_hash = cfg.config_hash()
    save_checkpoint(model, out / f"model_seed{seed}.ckpt")
    log.write(out / f"metrics_seed{seed}.jsonl")
    return model, log


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.full_epochs:
        cfg.train.plan = StagePlan.full_scale()
    out = Path(args.out or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seeds = [args.seed] if args.seed is not None else cfg.seeds
    (out / "config.json").write_text(cfg.canonical_json())
    _write_manifest(out, cfg, seeds)
    artifacts = []
    for seed in seeds:
        model, _ = _train_one_seed(cfg, cfg.train, seed, out, args.resume)
        artifacts += [f"model_seed{seed}.ckpt", f"metrics_seed{seed}.jsonl"]
        print(f"seed {seed}: stages {model.stages_run} -> {out}/model_seed{seed}.ckpt")
    _write_manifest(out, cfg, seeds, end_time=time.strftime("%Y-%m-%dT%H:%M:%S"),
                    artifacts=artifacts)
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    split = build_dataset(cfg.data)
    model = load_checkpoint(
        args.checkpoint, cfg.train,
        expected_num_pids=len(split.label_map()))
    mode = args.mode or cfg.protocol
    if mode == "p1" and len(protocol_rounds(cfg.data, "p1")) == 1:
        report = evaluate_split(model, split)
    else:
        # feature-only evaluation of one fixed model across protocol rounds
        report = run_protocol(lambda _split: model, cfg.data, mode)
    doc = report.to_dict()
    doc["protocol"] = mode
    doc["stages_run"] = model.stages_run
    doc["chance_rank1"] = random_rank1_rate(split)
    out = Path(args.out) if args.out else None
    text = json.dumps(doc, indent=2, sort_keys=True)
    if out:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text)
    print(text)
    return EXIT_OK


def _estimate_total_minutes(n_runs: int, probe_seconds: float) -> float:
    return n_runs * probe_seconds / 60.0


def cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    toggles = cfg.ablation

    rows: list[tuple[str, TrainConfig, dict]] = []
    grid = [(name, tg) for name, tg in ABLATION_GRID]
    betas = toggles.beta if isinstance(toggles.beta, list) else None
    inits = toggles.init_epochs if isinstance(toggles.init_epochs, list) else None
    for name, tg in grid:
        rows.append((name, apply_toggles(cfg, **tg), dict(tg)))
    if betas:
        for b in betas:
            rows.append((f"beta_{b}", apply_toggles(
                cfg, three_stage=True, use_grl=True, apn=True, beta=float(b)),
                dict(three_stage=True, use_grl=True, apn=True, beta=b)))
    if inits:
        for ie in inits:
            rows.append((f"init_{ie}", apply_toggles(
                cfg, three_stage=ie > 0, use_grl=True, apn=True, init_epochs=int(ie)),
                dict(three_stage=ie > 0, use_grl=True, apn=True, init_epochs=ie)))

    n_runs = len(rows) * len(cfg.seeds)
    probe_start = time.monotonic()
    results = []
    budget = args.budget_minutes
    for i, (name, tc, tg) in enumerate(rows):
        run_dir = out / name
        run_dir.mkdir(exist_ok=True)
        (run_dir / "toggles.json").write_text(json.dumps(
            {"name": name, "toggles": tg, "delta_vs_baseline": {
                k: v for k, v in tg.items() if v not in (False, None)}},
            indent=2, sort_keys=True))
        (run_dir / "config.json").write_text(cfg.canonical_json())
        _write_manifest(run_dir, cfg, cfg.seeds)
        for seed in cfg.seeds:
            model, _ = _train_one_seed(cfg, tc, seed, run_dir, None)
            split = build_dataset(cfg.data)
            report = evaluate_split(model, split)
            results.append({
                "config": name, "seed": seed,
                "mAP": report.map_score,
                "rank1": report.cmc[1], "rank5": report.cmc[5], "rank10": report.cmc[10],
            })
            done = len(results)
            if budget and done == 1:
                per_run = time.monotonic() - probe_start
                estimate = _estimate_total_minutes(n_runs, per_run)
                if estimate > budget:
                    print(f"refusing: estimated {estimate:.1f} min for {n_runs} runs "
                          f"exceeds budget {budget} min", file=sys.stderr)
                    return EXIT_CONFIG
        _write_manifest(run_dir, cfg, cfg.seeds,
                        end_time=time.strftime("%Y-%m-%dT%H:%M:%S"))

    csv_path = out / "ablation.csv"
    with csv_path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["config", "seed", "mAP",
                                                "rank1", "rank5", "rank10"])
        writer.writeheader()
        writer.writerows(results)
    series: dict[str, dict] = {}
    for r in results:
        series.setdefault(r["config"], {"x": [], "y": []})
        series[r["config"]]["x"].append(r["seed"])
        series[r["config"]]["y"].append(r["mAP"])
    (out / "plot_data.json").write_text(json.dumps(
        {"metric": "mAP", "series": series}, indent=2, sort_keys=True))
    print(f"{len(results)} runs -> {csv_path}")
    return EXIT_OK


def cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    if not run_dir.exists():
        raise OSError(f"run directory not found: {run_dir}")
    rows = []
    csv_path = run_dir / "ablation.csv"
    if csv_path.exists():
        with csv_path.open() as fh:
            rows = list(csv.DictReader(fh))
    reports = sorted(run_dir.rglob("eval*.json"))
    if not rows and not reports:
        metrics = sorted(run_dir.rglob("metrics_seed*.jsonl"))
        if not metrics:
            raise OSError(f"no results found under {run_dir}")
        print(f"{len(metrics)} metric log(s), no evaluation results yet:")
        for m in metrics:
            last = [json.loads(line) for line in m.read_text().splitlines()][-1]
            print(f"  {m.relative_to(run_dir)}: last stage={last['stage']} "
                  f"epoch={last['epoch']} loss={last['loss_total']:.4f}")
        return EXIT_OK
    by_config: dict[str, list[float]] = {}
    for r in rows:
        by_config.setdefault(r["config"], []).append(float(r["mAP"]))
    print(f"{'config':<28}{'mAP mean':>10}{'min':>8}{'max':>8}{'seeds':>7}")
    for name, vals in by_config.items():
        print(f"{name:<28}{np.mean(vals):>10.4f}{np.min(vals):>8.4f}"
              f"{np.max(vals):>8.4f}{len(vals):>7}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fgdi",
        description="Prompt-guided cross-domain re-identification harness.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="generate a synthetic dataset")
    p_synth.add_argument("--config", required=True)
    p_synth.add_argument("--out")
    p_synth.set_defaults(func=cmd_synth)

    p_train = sub.add_parser("train", help="run the staged training")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--out")
    p_train.add_argument("--seed", type=int)
    p_train.add_argument("--resume", help="checkpoint to resume from")
    p_train.add_argument("--full-epochs", action="store_true",
                         help="use the full-scale epoch plan 3/120/30/60")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    p_eval.add_argument("checkpoint")
    p_eval.add_argument("--config", required=True)
    p_eval.add_argument("--out")
    p_eval.add_argument("--mode", choices=["p1", "p2", "p3"],
                        help="protocol mode (default: the config's protocol)")
    p_eval.set_defaults(func=cmd_eval)

    p_abl = sub.add_parser("ablate", help="run the component toggle grid / sweeps")
    p_abl.add_argument("--config", required=True)
    p_abl.add_argument("--out")
    p_abl.add_argument("--budget-minutes", type=float)
    p_abl.set_defaults(func=cmd_ablate)

    p_rep = sub.add_parser("report", help="aggregate run metrics into a table")
    p_rep.add_argument("run_dir")
    p_rep.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDiverged as exc:
        print(f"runtime abort: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
