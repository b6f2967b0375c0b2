"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 invalid input or configuration.
Every command that writes files also writes one run manifest next to its
output, with a sha256 over the output files so reruns can be compared.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, data_io, hierarchy, metrics, reconcile, task_opt, training, verification
from .errors import CoherentCastError, ConfigError, DataError, DimensionMismatch, HierarchyError

log = logging.getLogger("coherent_cast")

VALIDATION_ERRORS = (ConfigError, DataError, HierarchyError, DimensionMismatch)


class ValidationFailure(Exception):
    pass


# ---------------------------------------------------------------- manifest


def artifact_hash(paths) -> str:
    digest = hashlib.sha256()
    for path in sorted(Path(p) for p in paths):
        digest.update(path.name.encode())
        digest.update(b"\0")
        digest.update(path.read_bytes())
    return digest.hexdigest()


def write_manifest(path: Path, command: str, config: dict, seed, outputs, started: float) -> None:
    doc = {
        "command": command,
        "version": __version__,
        "config": config,
        "seed": seed,
        "outputs": [str(p) for p in outputs],
        "artifact_sha256": artifact_hash(outputs),
        "timing": {"seconds": round(time.perf_counter() - started, 3)},
    }
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _args_snapshot(args) -> dict:
    return {k: v for k, v in vars(args).items() if k != "func"}


# ---------------------------------------------------------------- commands


def cmd_generate(args) -> int:
    started = time.perf_counter()
    h = hierarchy.load_json(args.hierarchy)
    cfg = data_io.SynthConfig(season_period=args.season, noise_scale=args.noise, trend_scale=args.trend)
    panel = data_io.synth_generate(h, args.length, args.seed, cfg)
    out = Path(args.out)
    data_io.save_csv(panel, out)
    reloaded = data_io.load_csv(out, h)
    print(f"wrote {h.n} series x {panel.T} steps to {out}")
    if h.r:
        print(f"coherence: co_mape = {reloaded.coherence:.3e}")
    write_manifest(out.with_name(out.name + ".manifest.json"), "generate", _args_snapshot(args), args.seed, [out], started)
    return 0


def _windows_for(cfg: training.ModelConfig, panel: data_io.SeriesPanel) -> data_io.WindowSet:
    return data_io.make_windows(panel, cfg.context, cfg.horizon, cfg.stride, cfg.split)


def cmd_train(args) -> int:
    started = time.perf_counter()
    cfg = training.load_config(args.config, seed=args.seed)
    h = hierarchy.load_json(args.hierarchy)
    panel = data_io.load_csv(args.data, h)
    windows = _windows_for(cfg, panel)
    ckpt, hist = training.train(cfg, windows, h)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_path, hist_path = out / "checkpoint.json", out / "history.csv"
    ckpt.save(ckpt_path)
    hist.to_csv(hist_path)
    print(f"trained {cfg.epochs} epochs; best validation loss {min(hist.val_loss, default=float('nan')):.6g} at epoch {hist.best_epoch}")
    if hist.skipped:
        print(f"skipped {hist.skipped} batches after QP failures")
    snapshot = {**_args_snapshot(args), "model": cfg.to_json()}
    write_manifest(out / "manifest.json", "train", snapshot, cfg.seed, [ckpt_path, hist_path], started)
    return 0


def _checkpoint_windows(args):
    ckpt = training.Checkpoint.load(args.checkpoint)
    h = hierarchy.load_json(args.hierarchy) if args.hierarchy else ckpt.hierarchy
    if h != ckpt.hierarchy:
        raise ValidationFailure("hierarchy does not match the checkpoint")
    panel = data_io.load_csv(args.data, h)
    ws = _windows_for(ckpt.config, panel)
    windows = ws.split(args.split)
    if not windows:
        raise ValidationFailure(f"split {args.split!r} has no windows")
    return ckpt, windows


def cmd_evaluate(args) -> int:
    started = time.perf_counter()
    ckpt, windows = _checkpoint_windows(args)
    report = training.evaluate(ckpt, windows)
    out = Path(args.out)
    out.write_text(report.to_json() + "\n")
    print(report.to_json())
    write_manifest(out.with_name(out.name + ".manifest.json"), "evaluate", _args_snapshot(args), ckpt.config.seed, [out], started)
    return 0


def cmd_reconcile(args) -> int:
    started = time.perf_counter()
    h = hierarchy.load_json(args.hierarchy)
    panel = data_io.load_csv(args.forecasts, h)
    method = reconcile.CLI_METHODS[args.method]
    cfg = reconcile.ReconcileConfig(
        method=method, delta1=args.delta1, delta2=args.delta2, eps1=args.eps1, eps2=args.eps2, nonneg=args.nonneg
    )
    residuals = None
    if method == "mint_shr":
        if not args.residuals:
            raise ValidationFailure("--method mint-shr needs --residuals")
        residuals = data_io.load_csv(args.residuals, h).values.T
    out_values = reconcile.reconcile(panel.values, h, cfg, residuals=residuals)
    out = Path(args.out)
    data_io.save_csv(data_io.SeriesPanel(h, out_values, panel.timestamps), out)
    if h.r:
        before = metrics.co_mape(panel.values, h)
        after = metrics.co_mape(out_values, h)
        print(f"coherence: co_mape {before:.3e} -> {after:.3e}")
    write_manifest(out.with_name(out.name + ".manifest.json"), "reconcile", _args_snapshot(args), None, [out], started)
    return 0


def cmd_schedule(args) -> int:
    started = time.perf_counter()
    ckpt, windows = _checkpoint_windows(args)
    model = ckpt.model()
    h = model.h
    pen = task_opt.expand_penalties(task_opt.PenaltyTable.from_csv(args.penalties), h)
    pred = training.predict(model, windows)
    if ckpt.config.head == "decide":
        decisions = np.stack([task_opt.decide(task_opt.SchedulingProblem(h, pen, b)) for b in pred.base])
    else:
        decisions = pred.final
    truth = pred.target
    pooled_dec = decisions.transpose(1, 0, 2).reshape(h.n, -1)
    pooled_truth = truth.transpose(1, 0, 2).reshape(h.n, -1)
    per_window = [task_opt.task_loss(d, t, pen) for d, t in zip(decisions, truth)]
    report = {
        "head": ckpt.config.head,
        "windows": len(windows),
        "task_cost_total": float(np.sum(per_window)),
        "task_cost_per_step": float(np.sum(per_window) / (len(windows) * ckpt.config.horizon)),
        "task_cost_per_window": per_window,
        "cost_split_per_level": task_opt.task_cost_split(pooled_dec, pooled_truth, pen, h),
        "mape": metrics.mape(pooled_truth, pooled_dec),
        "base_mape": metrics.mape(pooled_truth, pred.pooled("base")),
        "co_mape": metrics.co_mape(pooled_dec, h) if h.r else None,
        "decisions": [
            {"start": w.start, "values": {lab: d[i].tolist() for i, lab in enumerate(h.labels)}}
            for w, d in zip(windows, decisions)
        ],
    }
    out = Path(args.out)
    out.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(f"task cost per step {report['task_cost_per_step']:.4f}  mape {report['mape']:.4f}  co_mape {report['co_mape']}")
    write_manifest(out.with_name(out.name + ".manifest.json"), "schedule", _args_snapshot(args), ckpt.config.seed, [out], started)
    return 0


def cmd_verify(args) -> int:
    started = time.perf_counter()
    checks = verification.run(args.suite)
    print(verification.format_table(checks))
    failed = [c.name for c in checks if not c.passed]
    if args.out:
        out = Path(args.out)
        rows = [{"name": c.name, "tol": c.tol, "observed": c.observed, "passed": c.passed} for c in checks]
        out.write_text(json.dumps(rows, indent=2) + "\n")
        write_manifest(out.with_name(out.name + ".manifest.json"), "verify", _args_snapshot(args), None, [out], started)
    if failed:
        print(f"{len(failed)} check(s) failed: {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="coherent-cast", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic coherent panel")
    p.add_argument("--hierarchy", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--length", type=int, default=400)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--season", type=int, default=24)
    p.add_argument("--noise", type=float, default=0.3)
    p.add_argument("--trend", type=float, default=2.0)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a model from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--hierarchy", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.set_defaults(func=cmd_train)

    for name, func, helptext in (
        ("evaluate", cmd_evaluate, "score a checkpoint on one split"),
        ("schedule", cmd_schedule, "roll scheduling decisions over one split"),
    ):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--data", required=True)
        p.add_argument("--hierarchy", default=None, help="defaults to the hierarchy stored in the checkpoint")
        p.add_argument("--split", choices=("train", "val", "test"), default="test")
        p.add_argument("--out", required=True)
        if name == "schedule":
            p.add_argument("--penalties", required=True)
        p.set_defaults(func=func)

    p = sub.add_parser("reconcile", help="reconcile external base forecasts")
    p.add_argument("--method", required=True, choices=tuple(reconcile.CLI_METHODS))
    p.add_argument("--forecasts", required=True)
    p.add_argument("--hierarchy", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--residuals", default=None, help="in-sample errors (panel CSV) for mint-shr")
    p.add_argument("--delta1", type=float, default=-0.2)
    p.add_argument("--delta2", type=float, default=0.2)
    p.add_argument("--eps1", type=float, default=0.01)
    p.add_argument("--eps2", type=float, default=0.01)
    p.add_argument("--nonneg", action="store_true")
    p.set_defaults(func=cmd_reconcile)

    p = sub.add_parser("verify", help="run the built-in check suites")
    p.add_argument("--suite", choices=("grads", "qp", "matrices", "all"), default="all")
    p.add_argument("--out", default=None, help="optional JSON report")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ValidationFailure, *VALIDATION_ERRORS) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (CoherentCastError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
