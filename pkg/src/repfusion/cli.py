"""Command-line entry point.

Exit codes: 0 success, 2 configuration or input error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import report as rep
from .datasets import save_dataset, to_csv
from .diffusion import linear_beta_schedule, save_teacher
from .linear_dpm import random_psd, tradeoff_curve, write_tradeoff_csv
from .numeric import NumericalError, RngStream
from .pipeline import (ConfigError, ExperimentConfig, Mode, build_teacher, load_student, make_dataset,
                       plot_losses, plot_trace, run_ablation, run_seed, run_stage1, run_stage2,
                       save_student, write_ablation_csv, report_header, emit_report)
from .probe import probe_sweep

log = logging.getLogger("repfusion")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


def _parse_grid(text: str | None):
    if text is None:
        return None
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"--t-grid must be comma-separated integers, got {text!r}") from None
    if not vals:
        raise ConfigError("--t-grid is empty")
    return vals


def _config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    over = {}
    if getattr(args, "seed", None) is not None:
        over["seeds"] = [args.seed]
    if getattr(args, "mode", None):
        over["mode"] = str(Mode.parse(args.mode))
    if getattr(args, "loss", None):
        over["distill.loss"] = args.loss
        over["distill.weight"] = None
    if getattr(args, "teacher", None):
        over["teacher.checkpoint"] = args.teacher
    return cfg.replace(**over) if over else cfg


def _out(args, cfg) -> Path:
    out = Path(args.out or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_train_dpm(args):
    cfg = _config(args)
    out = _out(args, cfg)
    seed = cfg.seeds[0]
    t0 = time.perf_counter()
    ds, train, test = make_dataset(cfg.dataset, seed)
    teacher = build_teacher(cfg, train, seed)
    save_teacher(teacher, out / "teacher")
    save_dataset(ds, out / "dataset.bin")
    to_csv(ds, out / "dataset.csv")
    hist = teacher.history
    rep.write_csv(out / "loss.csv", ["epoch", "loss"], [[i, v] for i, v in enumerate(hist)])
    rep.plot_svg({"ddpm loss": (list(range(len(hist))), hist)}, out / "loss.svg", "Teacher training", "epoch", "loss")
    report = report_header(cfg, "train-dpm")
    report.update({"seed": seed, "teacher_digest": teacher.digest(), "teacher_loss": hist,
                   "teacher_checkpoint": "teacher.json"})
    emit_report(report, out, {"train": time.perf_counter() - t0})
    return report


def cmd_probe(args):
    cfg = _config(args)
    if args.t_grid:
        cfg = cfg.replace(probe_grid=_parse_grid(args.t_grid))
    out = _out(args, cfg)
    seed = cfg.seeds[0]
    ds, train, _ = make_dataset(cfg.dataset, seed)
    teacher = build_teacher(cfg, train, seed)
    pr = probe_sweep(teacher, ds.X, cfg.grid(), ds.y)
    pr.write_csv(out / "probe.csv")
    rep.plot_svg({"effective rank": (pr.t, pr.erank)}, out / "erank.svg", "Effective rank of teacher features",
                 "t", "effective rank")
    if pr.separability:
        rep.plot_svg({"silhouette": (pr.t, pr.separability)}, out / "separability.svg",
                     "Cluster separability", "t", "silhouette")
    if pr.attention_off_diag:
        rep.plot_svg({"off-diagonal mass": (pr.t, pr.attention_off_diag)}, out / "attention.svg",
                     "Attention off-diagonal mass", "t", "mass")
    report = report_header(cfg, "probe")
    report.update({"seed": seed, "teacher_digest": teacher.digest(), "probe": pr.to_dict()})
    emit_report(report, out)
    return report


def cmd_linear_dpm(args):
    cfg = _config(args)
    out = _out(args, cfg)
    lin = cfg.linear
    sched = linear_beta_schedule(lin.T)
    grid = _parse_grid(args.t_grid) or list(range(1, lin.T + 1))
    if any(not 1 <= t <= lin.T for t in grid):
        raise ConfigError(f"linear-dpm steps must lie in [1, {lin.T}]")
    rng = RngStream(cfg.seeds[0]).spawn("linear")
    series, curves = {}, []
    for i in range(lin.n_covariances):
        S = random_psd(lin.L, rng, (lin.lam_min, lin.lam_max))
        rows = tradeoff_curve(S, sched, grid)
        name = "tradeoff.csv" if lin.n_covariances == 1 else f"tradeoff_{i}.csv"
        write_tradeoff_csv(rows, out / name)
        lam = np.linalg.eigvalsh(S)
        curves.append({"eigenvalues": lam, "t": [r.t for r in rows], "kappa": [r.kappa for r in rows],
                       "limit_small_t": float(lam.max() / lam.min())})
        series[f"cov {i}"] = ([r.t for r in rows], [r.kappa for r in rows])
    rep.plot_svg(series, out / "kappa.svg", "Condition number of the optimal map", "t", "kappa")
    report = report_header(cfg, "linear-dpm")
    report["curves"] = curves
    emit_report(report, out)
    return report


def cmd_distill(args):
    cfg = _config(args)
    out = _out(args, cfg)
    seed = cfg.seeds[0]
    ds, train, _ = make_dataset(cfg.dataset, seed)
    teacher = build_teacher(cfg, train, seed)
    before = teacher.digest()
    s1 = run_stage1(cfg, teacher, train, seed)
    if teacher.digest() != before:
        raise RuntimeError("stage 1 modified the teacher")
    save_student(out / "student.bin", s1, {"mode": cfg.mode, "seed": seed, "config_hash": cfg.hash()})
    s1.trace.write_csv(out / "time_trace.csv")
    plot_trace(s1.trace, out / "time_trace.svg")
    rep.write_csv(out / "distill_loss.csv", ["epoch", "loss"], [[i, v] for i, v in enumerate(s1.losses)])
    report = report_header(cfg, "distill")
    report.update({"seed": seed, "mode": cfg.mode, "teacher_digest": before, "stage1_loss": s1.losses,
                   "stage1_steps": len(s1.trace), "final_mean_t": s1.final_mean_t, "modal_t": s1.modal_t,
                   "student_digest": s1.params.digest()[:16]})
    emit_report(report, out)
    return report


def cmd_finetune(args):
    cfg = _config(args)
    out = _out(args, cfg)
    seed = cfg.seeds[0]
    if args.student:
        ds, train, test = make_dataset(cfg.dataset, seed)
        student, params, meta = load_student(args.student)
        s2 = run_stage2(cfg, student, params, train, test, seed)
        record = {"seed": seed, "student": str(args.student), "stage2_loss": s2.losses,
                  "train_accuracy": s2.train_accuracy, "test_accuracy": s2.test_accuracy}
        timing = None
    else:
        r = run_seed(cfg, seed)
        record, timing = r["record"], r["timing"]
        r["trace"].write_csv(out / "time_trace.csv")
        plot_trace(r["trace"], out / "time_trace.svg")
        plot_losses([record], out / "loss_curves.svg")
    rep.write_csv(out / "finetune_loss.csv", ["epoch", "loss"],
                  [[i, v] for i, v in enumerate(record["stage2_loss"])])
    report = report_header(cfg, "finetune")
    report["seeds"] = [record]
    emit_report(report, out, timing)
    return report


def cmd_ablate(args):
    cfg = _config(args)
    out = _out(args, cfg)
    modes = None
    grid = _parse_grid(args.t_grid)
    if grid is not None:
        modes = ["none", "random"] + [f"fixed:{t}" for t in grid] + ["reinforced"]
    report = run_ablation(cfg, modes, out)
    for row in report["table"]:
        log.info("%-12s %.4f +- %.4f", row["mode"], row["mean"], row["std"])
    return report


def cmd_report(args):
    """Re-render CSV and SVG files from an existing ``report.json``."""
    import json
    out = Path(args.out or ".")
    path = out / "report.json"
    try:
        report = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    if report.get("schema_version") != rep.SCHEMA_VERSION:
        raise ConfigError(f"{path}: unsupported schema version {report.get('schema_version')!r}")
    kind = report.get("kind")
    if kind == "ablation":
        write_ablation_csv(report, out / "ablation.csv")
        rep.atomic_write(out / "ablation.svg", rep.bar_chart_svg(
            [r["mode"] for r in report["table"]], [r["mean"] for r in report["table"]],
            [r["std"] for r in report["table"]], "Test accuracy by time-selection mode", "accuracy"))
    elif kind in ("run", "finetune"):
        plot_losses(report["seeds"], out / "loss_curves.svg")
        rows = [[s["seed"], s.get("mode", ""), s["train_accuracy"], s["test_accuracy"]] for s in report["seeds"]]
        rep.write_csv(out / "accuracy.csv", ["seed", "mode", "train_accuracy", "test_accuracy"], rows)
    elif kind == "attention":
        lo, hi = report["t_low"], report["t_high"]
        rep.write_csv(out / "attention.csv", ["seed", "t_low", "off_diag_low", "t_high", "off_diag_high"],
                      [[s["seed"], lo, s["off_diag_low"], hi, s["off_diag_high"]] for s in report["seeds"]])
    elif kind == "probe":
        p = report["probe"]
        rep.plot_svg({"effective rank": (p["t"], p["erank"])}, out / "erank.svg",
                     "Effective rank of teacher features", "t", "effective rank")
        rep.write_csv(out / "erank.csv", ["t", "erank"], list(zip(p["t"], p["erank"])))
    elif kind == "linear-dpm":
        series = {f"cov {i}": (c["t"], c["kappa"]) for i, c in enumerate(report["curves"])}
        rep.plot_svg(series, out / "kappa.svg", "Condition number of the optimal map", "t", "kappa")
    elif kind in ("train-dpm", "distill"):
        key = "teacher_loss" if kind == "train-dpm" else "stage1_loss"
        ys = report.get(key, [])
        rep.plot_svg({key: (list(range(len(ys))), ys)}, out / f"{key}.svg", key, "epoch", "loss")
    else:
        raise ConfigError(f"{path}: unknown report kind {kind!r}")
    return report


COMMANDS = {
    "train-dpm": (cmd_train_dpm, "train a diffusion teacher and save its checkpoint"),
    "probe": (cmd_probe, "effective rank / separability / attention of teacher features across t"),
    "linear-dpm": (cmd_linear_dpm, "condition-number trade-off curve of the optimal linear denoiser"),
    "distill": (cmd_distill, "stage 1: distil a teacher into a student"),
    "finetune": (cmd_finetune, "stage 2 on a saved student, or a full two-stage run"),
    "ablate": (cmd_ablate, "compare time-selection modes across seeds"),
    "report": (cmd_report, "re-render CSV and SVG files from report.json"),
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="repfusion", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name, (_, help_) in COMMANDS.items():
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--out", help="output directory")
        if name == "report":
            continue
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--seed", type=int, help="run a single seed")
        if name in ("probe", "distill", "finetune", "ablate"):
            sp.add_argument("--teacher", help="teacher checkpoint (.json sidecar or .bin)")
        if name in ("distill", "finetune", "ablate"):
            sp.add_argument("--loss", choices=["hint", "at", "rkd"])
        if name in ("distill", "finetune"):
            sp.add_argument("--mode", help="reinforced | fixed:<t> | random | none")
        if name in ("probe", "linear-dpm", "ablate"):
            sp.add_argument("--t-grid", help="comma-separated timesteps")
        if name == "finetune":
            sp.add_argument("--student", help="student checkpoint from `distill`")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s")
    if getattr(args, "seed", None) is not None and args.seed < 0:
        print("error: --seed must be non-negative", file=sys.stderr)
        return EXIT_CONFIG
    try:
        COMMANDS[args.command][0](args)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ValueError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FloatingPointError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
