"""End-to-end runs: teacher, stage 1 distillation, stage 2 finetuning, ablations.

A run is fully determined by an :class:`ExperimentConfig` and a seed.  All
randomness is drawn from labelled sub-streams of the seed, so two runs with the
same inputs write byte-identical ``report.json`` files.  Wall-clock times go to
a separate ``timing.json``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import report as rep
from .autonet import SGD, DenoiserArch, ParamStore, load_params, save_params
from .datasets import LabeledDataset, bars8x8, gaussian_mixture, nuisance_mixture, split
from .diffusion import Teacher, TeacherConfig, load_teacher, linear_beta_schedule, scaled_linear_schedule, \
    train_teacher
from .distill import DistillConfig, FinetuneConfig, StudentArch, StudentNet, distill_step, finetune
from .numeric import NumericalError, RngStream
from .policy import PolicyConfig, SelectorState, joint_step, modal_action, sample_time
from .probe import attention_mass, probe_sweep

log = logging.getLogger(__name__)

ABLATION_GRID = (0, 1, 5, 10, 20, 30, 50, 99)


class ConfigError(ValueError):
    """Invalid or unknown configuration entries."""


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------

@dataclass
class DatasetSpec:
    kind: str = "nuisance"  # nuisance | mixture | bars8x8
    k: int = 4
    d: int = 16
    n: int = 2048
    spread: float = 0.3
    radius: float = 1.0
    class_dims: int = 4
    nuisance_scale: float = 3.0
    noise: float = 0.1
    train_fraction: float = 0.5
    label_fraction: float = 0.1

    def validate(self):
        if self.kind not in ("nuisance", "mixture", "bars8x8"):
            raise ConfigError(f"dataset.kind must be nuisance, mixture or bars8x8, got {self.kind!r}")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError("dataset.train_fraction must lie in (0, 1)")
        if not 0.0 < self.label_fraction <= 1.0:
            raise ConfigError("dataset.label_fraction must lie in (0, 1]")

    @property
    def input_dim(self) -> int:
        return 64 if self.kind == "bars8x8" else self.d


@dataclass
class TeacherSpec:
    T: int = 100
    schedule: str = "scaled_linear"  # scaled_linear | linear
    hidden_dims: list = field(default_factory=lambda: [64, 32, 64])
    time_dim: int = 16
    attention: bool = False
    n_tokens: int = 8
    token_embed_dim: int = 8
    epochs: int = 300
    batch_size: int = 128
    lr: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 1e-4
    ema: float = 0.999
    checkpoint: str | None = None

    def validate(self):
        if self.T < 2:
            raise ConfigError("teacher.T must be at least 2")
        if self.schedule not in ("scaled_linear", "linear"):
            raise ConfigError("teacher.schedule must be 'scaled_linear' or 'linear'")


@dataclass
class StudentSpec:
    hidden_dims: list = field(default_factory=lambda: [64, 32])


@dataclass
class DistillSpec:
    loss: str = "hint"
    weight: float | None = None
    epochs: int = 40
    batch_size: int = 128
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    grad_clip: float = 5.0


@dataclass
class FinetuneSpec:
    epochs: int = 40
    batch_size: int = 128
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    grad_clip: float = 5.0


@dataclass
class PolicySpec:
    # faster than the PolicyConfig defaults: the decoder must track the policy's
    # shifting timestep mix or early choices lock in
    lambda_h: float = 0.1
    policy_lr: float = 1.0
    decoder_lr: float = 1.0
    momentum: float = 0.9
    weight_decay: float = 1e-4
    hidden: int = 32
    use_baseline: bool = False
    baseline_momentum: float = 0.9


@dataclass
class LinearSpec:
    L: int = 8
    T: int = 1000
    lam_min: float = 0.5
    lam_max: float = 10.0
    n_covariances: int = 1

    def validate(self):
        if self.L < 2 or self.T < 2:
            raise ConfigError("linear.L and linear.T must be at least 2")
        if not 0.0 < self.lam_min < self.lam_max:
            raise ConfigError("need 0 < linear.lam_min < linear.lam_max")
        if self.n_covariances < 1:
            raise ConfigError("linear.n_covariances must be at least 1")


@dataclass(frozen=True)
class Mode:
    kind: str
    t: int | None = None

    @classmethod
    def parse(cls, text: str) -> "Mode":
        text = str(text).strip()
        if text in ("reinforced", "random", "none"):
            return cls(text)
        if text.startswith("fixed:"):
            try:
                return cls("fixed", int(text[6:]))
            except ValueError:
                raise ConfigError(f"bad fixed timestep in mode {text!r}") from None
        raise ConfigError(f"mode must be reinforced, random, none or fixed:<t>, got {text!r}")

    def __str__(self):
        return f"fixed:{self.t}" if self.kind == "fixed" else self.kind


_SECTIONS = {"dataset": DatasetSpec, "teacher": TeacherSpec, "student": StudentSpec, "distill": DistillSpec,
             "finetune": FinetuneSpec, "policy": PolicySpec, "linear": LinearSpec}


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


@dataclass
class ExperimentConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    teacher: TeacherSpec = field(default_factory=TeacherSpec)
    student: StudentSpec = field(default_factory=StudentSpec)
    distill: DistillSpec = field(default_factory=DistillSpec)
    finetune: FinetuneSpec = field(default_factory=FinetuneSpec)
    policy: PolicySpec = field(default_factory=PolicySpec)
    linear: LinearSpec = field(default_factory=LinearSpec)
    mode: str = "reinforced"
    seeds: list = field(default_factory=lambda: [1, 2, 3])
    probe_grid: list | None = None
    ablation_modes: list | None = None
    out: str = "runs/default"

    def __post_init__(self):
        self.validate()

    def validate(self):
        self.dataset.validate()
        self.teacher.validate()
        self.linear.validate()
        m = Mode.parse(self.mode)
        if m.kind == "fixed" and not 0 <= m.t < self.teacher.T:
            raise ConfigError(f"fixed timestep {m.t} outside [0, {self.teacher.T})")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if any(not isinstance(s, int) or s < 0 for s in self.seeds):
            raise ConfigError("seeds must be non-negative integers")
        if self.distill.loss not in ("hint", "at", "rkd"):
            raise ConfigError("distill.loss must be hint, at or rkd")
        if self.distill.weight is not None and self.distill.weight <= 0:
            raise ConfigError("distill.weight must be positive")
        for t in self.grid():
            if not 0 <= t < self.teacher.T:
                raise ConfigError(f"probe grid entry {t} outside [0, {self.teacher.T})")
        for s in self.modes():
            mm = Mode.parse(s)
            if mm.kind == "fixed" and not 0 <= mm.t < self.teacher.T:
                raise ConfigError(f"ablation mode {s} outside [0, {self.teacher.T})")

    @property
    def run_mode(self) -> Mode:
        return Mode.parse(self.mode)

    def grid(self) -> list[int]:
        if self.probe_grid is not None:
            return [int(t) for t in self.probe_grid]
        T = self.teacher.T
        return sorted({int(round(f * (T - 1))) for f in np.linspace(0.0, 1.0, 11)})

    def modes(self) -> list[str]:
        if self.ablation_modes is not None:
            return [str(m) for m in self.ablation_modes]
        T = self.teacher.T
        grid = sorted({min(int(round(t * T / 100)), T - 1) for t in ABLATION_GRID})
        return ["none", "random"] + [f"fixed:{t}" for t in grid] + ["reinforced"]

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - names)
        if unknown:
            raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
        kw = {}
        for k, v in data.items():
            kw[k] = _build(_SECTIONS[k], v, k) if k in _SECTIONS else v
        try:
            return cls(**kw)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            data = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return asdict(self)

    def replace(self, **kw) -> "ExperimentConfig":
        d = self.to_dict()
        for k, v in kw.items():
            if "." in k:
                sec, key = k.split(".", 1)
                d[sec][key] = v
            else:
                d[k] = v
        return ExperimentConfig.from_dict(d)

    def hash(self) -> str:
        """Digest of everything that affects results (output directory excluded)."""
        d = self.to_dict()
        d.pop("out")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


# --------------------------------------------------------------------------
# building blocks
# --------------------------------------------------------------------------

def make_dataset(spec: DatasetSpec, seed: int):
    """Full dataset plus its stratified ``(train, test)`` split."""
    rng = RngStream(seed).spawn("dataset")
    if spec.kind == "bars8x8":
        ds = bars8x8(spec.k, spec.n, spec.noise, rng.spawn("draw"))
    elif spec.kind == "nuisance":
        ds = nuisance_mixture(spec.k, spec.d, spec.n, spec.spread, rng.spawn("draw"), spec.radius, spec.class_dims,
                              spec.nuisance_scale)
    else:
        ds = gaussian_mixture(spec.k, spec.d, spec.n, spec.spread, rng.spawn("draw"), spec.radius)
    train, test = split(ds, spec.train_fraction, rng.spawn("split"))
    # re-centre on training statistics so the teacher sees zero-mean data
    shift = train.X.mean(axis=0)
    train, test = (LabeledDataset(part.X - shift, part.y, part.k, part.mean + shift * part.std, part.std)
                   for part in (train, test))
    ds = LabeledDataset(ds.X - shift, ds.y, ds.k, ds.mean + shift * ds.std, ds.std)
    return ds, train, test


def labeled_subset(train: LabeledDataset, fraction: float, seed: int) -> LabeledDataset:
    if fraction >= 1.0:
        return train
    sub, _ = split(train, fraction, RngStream(seed).spawn("labels"))
    return sub


def make_schedule(spec: TeacherSpec):
    return scaled_linear_schedule(spec.T) if spec.schedule == "scaled_linear" else linear_beta_schedule(spec.T)


def make_arch(cfg: ExperimentConfig) -> DenoiserArch:
    t = cfg.teacher
    return DenoiserArch(cfg.dataset.input_dim, tuple(t.hidden_dims), t.time_dim, attention=t.attention,
                        n_tokens=t.n_tokens if t.attention else 0, token_embed_dim=t.token_embed_dim)


def build_teacher(cfg: ExperimentConfig, train: LabeledDataset, seed: int) -> Teacher:
    t = cfg.teacher
    if t.checkpoint:
        teacher = load_teacher(t.checkpoint)
        if teacher.arch.input_dim != cfg.dataset.input_dim:
            raise ConfigError("teacher checkpoint input width does not match the dataset")
        return teacher
    tc = TeacherConfig(epochs=t.epochs, batch_size=t.batch_size, lr=t.lr, momentum=t.momentum,
                       weight_decay=t.weight_decay, ema=t.ema)
    return train_teacher(make_arch(cfg), make_schedule(t), train, tc, RngStream(seed).spawn("teacher"))


def make_student(cfg: ExperimentConfig, teacher: Teacher) -> StudentNet:
    return StudentNet(StudentArch(cfg.dataset.input_dim, tuple(cfg.student.hidden_dims), cfg.dataset.k,
                                  teacher.feature_dim))


@dataclass
class TimeTrace:
    """Per training step: mean and std of the selected ``t`` (plus reward and entropy when reinforced)."""

    T: int
    mean_t: list = field(default_factory=list)
    std_t: list = field(default_factory=list)
    mean_reward: list = field(default_factory=list)
    entropy: list = field(default_factory=list)

    def append(self, t, reward=None, entropy=None):
        t = np.asarray(t)
        m = float(t.mean())
        if not 0.0 <= m <= self.T - 1:
            raise NumericalError("selected timestep outside range")
        self.mean_t.append(m)
        self.std_t.append(float(t.std()))
        self.mean_reward.append(float("nan") if reward is None else float(reward))
        self.entropy.append(float("nan") if entropy is None else float(entropy))

    def __len__(self):
        return len(self.mean_t)

    def rows(self):
        return [[i, self.mean_t[i], self.std_t[i], self.mean_reward[i], self.entropy[i]] for i in range(len(self))]

    def write_csv(self, path):
        return rep.write_csv(path, ["step", "mean_t", "std_t", "mean_reward", "entropy"], self.rows())


@dataclass
class Stage1Result:
    student: StudentNet
    params: ParamStore
    trace: TimeTrace
    losses: list
    steps_per_epoch: int
    final_mean_t: float | None
    modal_t: int | None


def run_stage1(cfg: ExperimentConfig, teacher: Teacher | None, train: LabeledDataset, seed: int,
               mode: Mode | str | None = None) -> Stage1Result:
    """Distil the teacher into a fresh student under the given time-selection mode."""
    if teacher is None:
        raise ValueError("stage 1 needs a trained teacher")
    mode = Mode.parse(mode) if isinstance(mode, str) else (mode or cfg.run_mode)
    if mode.kind == "fixed" and not 0 <= mode.t < teacher.T:
        raise ConfigError(f"fixed timestep {mode.t} outside [0, {teacher.T})")
    root = RngStream(seed)
    student = make_student(cfg, teacher)
    params = student.init(root.spawn("student"))
    trace = TimeTrace(teacher.T)
    d = cfg.distill
    n = train.n
    steps = -(-n // d.batch_size)
    if mode.kind == "none":
        return Stage1Result(student, params, trace, [], steps, None, None)
    dcfg = DistillConfig(d.loss, d.weight, d.epochs, d.batch_size, d.lr, d.momentum, d.weight_decay, d.grad_clip)
    opt = SGD(dcfg.lr, dcfg.momentum, dcfg.weight_decay)
    order_rng, t_rng = root.spawn("stage1-order"), root.spawn("stage1-time")
    state = None
    if mode.kind == "reinforced":
        p = cfg.policy
        pcfg = PolicyConfig(p.lambda_h, p.policy_lr, p.decoder_lr, p.momentum, p.weight_decay, p.hidden,
                            p.use_baseline, p.baseline_momentum)
        state = SelectorState.create(train.d, teacher.T, teacher.feature_dim, train.k, pcfg, root.spawn("policy"))
    labeled = labeled_subset(train, cfg.dataset.label_fraction, seed)
    lab_rng = root.spawn("stage1-labels")
    losses = []
    for epoch in range(dcfg.epochs):
        order = order_rng.permutation(n)
        ep = []
        for s in range(0, n, dcfg.batch_size):
            Xb = train.X[order[s:s + dcfg.batch_size]]
            if mode.kind == "fixed":
                t = np.full(len(Xb), mode.t)
                trace.append(t)
            elif mode.kind == "random":
                t = t_rng.integers(0, teacher.T, size=len(Xb))
                trace.append(t)
            else:
                if labeled is train:
                    Xl, yl = Xb, train.y[order[s:s + dcfg.batch_size]]
                else:
                    idx = lab_rng.integers(0, labeled.n, size=min(dcfg.batch_size, labeled.n))
                    Xl, yl = labeled.X[idx], labeled.y[idx]
                t, rec = joint_step(state, teacher, Xl, yl, pcfg, t_rng)
                if labeled is not train:
                    # the distillation batch is unlabeled; draw its timesteps from the updated policy
                    t = sample_time(state.policy, state.policy_params, Xb, t_rng)
                trace.append(t, rec.mean_reward, rec.entropy)
            params, value = distill_step(student, params, teacher, Xb, t, dcfg, opt)
            ep.append(value)
        losses.append(float(np.mean(ep)))
    final_mean = float(np.mean(trace.mean_t[-steps:])) if len(trace) else None
    modal = modal_action(state.policy, state.policy_params, train.X) if state else None
    return Stage1Result(student, params, trace, losses, steps, final_mean, modal)


@dataclass
class Stage2Result:
    params: ParamStore
    train_accuracy: float
    test_accuracy: float
    losses: list


def run_stage2(cfg: ExperimentConfig, student: StudentNet, params: ParamStore, train: LabeledDataset,
               test: LabeledDataset, seed: int, epochs: int | None = None) -> Stage2Result:
    f = cfg.finetune
    fcfg = FinetuneConfig(f.epochs, f.batch_size, f.lr, f.momentum, f.weight_decay, f.grad_clip)
    labeled = labeled_subset(train, cfg.dataset.label_fraction, seed)
    res = finetune(student, params, labeled, epochs, fcfg, RngStream(seed).spawn("stage2"), test)
    return Stage2Result(res.params, res.train_accuracy, res.test_accuracy, res.losses)


# --------------------------------------------------------------------------
# full runs and reports
# --------------------------------------------------------------------------

def _quantile_of(value: float, T: int) -> float:
    return float(value / T)


def run_seed(cfg: ExperimentConfig, seed: int, teacher: Teacher | None = None, data=None,
             mode: Mode | str | None = None) -> dict:
    """One full two-stage run.  Returns a JSON-ready per-seed record plus private objects."""
    mode = Mode.parse(mode) if isinstance(mode, str) else (mode or cfg.run_mode)
    timing = {}
    t0 = time.perf_counter()
    ds, train, test = data or make_dataset(cfg.dataset, seed)
    if teacher is None:
        teacher = build_teacher(cfg, train, seed)
    timing["teacher"] = time.perf_counter() - t0
    digest_before = teacher.digest()
    t1 = time.perf_counter()
    s1 = run_stage1(cfg, teacher, train, seed, mode)
    timing["stage1"] = time.perf_counter() - t1
    if teacher.digest() != digest_before:
        raise RuntimeError("stage 1 modified the teacher")
    t2 = time.perf_counter()
    s2 = run_stage2(cfg, s1.student, s1.params, train, test, seed)
    timing["stage2"] = time.perf_counter() - t2
    record = {
        "seed": seed,
        "mode": str(mode),
        "teacher_digest": digest_before,
        "teacher_loss": list(teacher.history),
        "stage1_loss": s1.losses,
        "stage2_loss": s2.losses,
        "train_accuracy": s2.train_accuracy,
        "test_accuracy": s2.test_accuracy,
        "stage1_steps": len(s1.trace),
        "student_digest": s2.params.digest()[:16],
    }
    if s1.final_mean_t is not None:
        record["final_mean_t"] = s1.final_mean_t
        record["final_t_quantile"] = _quantile_of(s1.final_mean_t, teacher.T)
    if s1.modal_t is not None:
        record["modal_t"] = s1.modal_t
    return {"record": record, "trace": s1.trace, "teacher": teacher, "stage1": s1, "stage2": s2,
            "timing": timing, "data": (ds, train, test)}


def probe_summary(cfg: ExperimentConfig, teacher: Teacher, ds: LabeledDataset) -> dict:
    pr = probe_sweep(teacher, ds.X, cfg.grid(), ds.y)
    return {"t": pr.t, "erank": pr.erank, "separability": pr.separability,
            "attention_off_diag": pr.attention_off_diag}


def report_header(cfg: ExperimentConfig, kind: str) -> dict:
    return {"schema_version": rep.SCHEMA_VERSION, "kind": kind, "config_hash": cfg.hash(),
            "config": cfg.to_dict()}


def run_experiment(cfg: ExperimentConfig, out: str | Path | None = None) -> dict:
    """Full two-stage run for every seed in ``cfg.seeds``; writes the report files."""
    out = Path(out or cfg.out)
    report = report_header(cfg, "run")
    report["mode"] = cfg.mode
    seeds, timing = [], {}
    for seed in cfg.seeds:
        r = run_seed(cfg, seed)
        rec = r["record"]
        rec["probe"] = probe_summary(cfg, r["teacher"], r["data"][0])
        seeds.append(rec)
        timing[str(seed)] = r["timing"]
        r["trace"].write_csv(out / f"time_trace_seed{seed}.csv")
        plot_trace(r["trace"], out / f"time_trace_seed{seed}.svg")
    report["seeds"] = seeds
    accs = [s["test_accuracy"] for s in seeds]
    report["summary"] = {"mean_test_accuracy": float(np.mean(accs)),
                         "std_test_accuracy": float(np.std(accs, ddof=1)) if len(accs) > 1 else 0.0}
    emit_report(report, out, timing)
    plot_losses(seeds, out / "loss_curves.svg")
    return report


def emit_report(report: dict, out, timing: dict | None = None) -> Path:
    out = Path(out)
    path = rep.write_json(out / "report.json", report)
    if timing is not None:
        rep.write_json(out / "timing.json", timing)
    return path


def attention_report(cfg: ExperimentConfig, out=None, n_samples: int = 128) -> dict:
    """Off-diagonal attention mass at ``ceil(0.1 T)`` and ``ceil(0.9 T)`` for every seed.

    Purely descriptive: ``trend_matches`` records whether the mass grows with
    noise level on every seed, nothing is asserted.
    """
    if not cfg.teacher.attention:
        raise ConfigError("attention report needs teacher.attention = true")
    T = cfg.teacher.T
    lo, hi = math.ceil(0.1 * T), min(math.ceil(0.9 * T), T - 1)
    seeds = []
    for seed in cfg.seeds:
        ds, train, _ = make_dataset(cfg.dataset, seed)
        teacher = build_teacher(cfg, train, seed)
        seeds.append({"seed": seed, "teacher_digest": teacher.digest(),
                      "off_diag_low": attention_mass(teacher, ds.X, lo, n_samples)[1],
                      "off_diag_high": attention_mass(teacher, ds.X, hi, n_samples)[1]})
    report = report_header(cfg, "attention")
    report.update({"t_low": lo, "t_high": hi, "n_samples": n_samples, "seeds": seeds,
                   "trend_matches": all(s["off_diag_high"] > s["off_diag_low"] for s in seeds)})
    if out is not None:
        out = Path(out)
        emit_report(report, out)
        rep.write_csv(out / "attention.csv", ["seed", "t_low", "off_diag_low", "t_high", "off_diag_high"],
                      [[s["seed"], lo, s["off_diag_low"], hi, s["off_diag_high"]] for s in seeds])
    return report


def plot_trace(trace: TimeTrace, path):
    steps = list(range(len(trace)))
    lo = [m - s for m, s in zip(trace.mean_t, trace.std_t)]
    hi = [m + s for m, s in zip(trace.mean_t, trace.std_t)]
    return rep.plot_svg({"mean t": (steps, trace.mean_t)}, path, "Selected timestep", "step", "t",
                        bands={"mean t": (steps, lo, hi)} if steps else None)


def plot_losses(seeds: list[dict], path):
    series = {}
    for s in seeds:
        for stage in ("teacher_loss", "stage1_loss", "stage2_loss"):
            ys = s.get(stage) or []
            if ys:
                series[f"{stage.split('_')[0]} s{s['seed']}"] = (list(range(len(ys))), ys)
    return rep.plot_svg(series, path, "Loss curves", "epoch", "loss")


# --------------------------------------------------------------------------
# ablation
# --------------------------------------------------------------------------

@dataclass
class AblationRow:
    mode: str
    accuracies: list

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def std(self) -> float:
        return float(np.std(self.accuracies, ddof=1)) if len(self.accuracies) > 1 else 0.0


def ordering_checks(rows: dict, T: int) -> dict:
    """The directional assertions on mean accuracy; entries are ``None`` when a mode is missing."""
    def m(name):
        return rows[name].mean if name in rows else None

    r, rnd, last, none = m("reinforced"), m("random"), m(f"fixed:{T - 1}"), m("none")
    out = {}
    out["reinforced>=random"] = None if r is None or rnd is None else bool(r >= rnd)
    out["reinforced>=fixed_last"] = None if r is None or last is None else bool(r >= last)
    out["fixed_last<=none"] = None if last is None or none is None else bool(last <= none)
    return out


def run_ablation(cfg: ExperimentConfig, modes: list[str] | None = None, out=None,
                 teachers: dict | None = None) -> dict:
    """Every mode for every seed against one shared teacher per seed."""
    modes = [str(Mode.parse(m)) for m in (modes or cfg.modes())]
    for m in modes:
        mm = Mode.parse(m)
        if mm.kind == "fixed" and not 0 <= mm.t < cfg.teacher.T:
            raise ConfigError(f"ablation mode {m} outside [0, {cfg.teacher.T})")
    teachers = teachers or {}
    rows = {m: AblationRow(m, []) for m in modes}
    per_seed, timing = [], {}
    for seed in cfg.seeds:
        data = make_dataset(cfg.dataset, seed)
        teacher = teachers.get(seed) or build_teacher(cfg, data[1], seed)
        if teacher.arch != make_arch(cfg) or teacher.T != cfg.teacher.T:
            raise ValueError(f"inconsistent teachers: seed {seed} teacher does not match the config")
        digest = teacher.digest()
        entry = {"seed": seed, "teacher_digest": digest, "modes": {}}
        for m in modes:
            t0 = time.perf_counter()
            r = run_seed(cfg, seed, teacher, data, m)
            if r["record"]["teacher_digest"] != digest or teacher.digest() != digest:
                raise ValueError("inconsistent teachers across ablation modes")
            rows[m].accuracies.append(r["record"]["test_accuracy"])
            keep = {k: r["record"][k] for k in ("test_accuracy", "train_accuracy", "final_mean_t", "modal_t")
                    if k in r["record"]}
            entry["modes"][m] = keep
            timing[f"{seed}/{m}"] = time.perf_counter() - t0
        per_seed.append(entry)
    report = report_header(cfg, "ablation")
    report["modes"] = modes
    report["table"] = [{"mode": m, "mean": rows[m].mean, "std": rows[m].std, "accuracies": rows[m].accuracies}
                       for m in modes]
    report["per_seed"] = per_seed
    report["checks"] = ordering_checks(rows, cfg.teacher.T)
    if out is not None:
        out = Path(out)
        emit_report(report, out, timing)
        write_ablation_csv(report, out / "ablation.csv")
        rep.atomic_write(out / "ablation.svg", rep.bar_chart_svg(
            modes, [rows[m].mean for m in modes], [rows[m].std for m in modes],
            "Test accuracy by time-selection mode", "accuracy"))
    return report


def write_ablation_csv(report: dict, path):
    return rep.write_csv(path, ["mode", "mean", "std", "n"],
                         [[r["mode"], r["mean"], r["std"], len(r["accuracies"])] for r in report["table"]])


def save_student(path, stage1: Stage1Result, meta: dict | None = None):
    arch = stage1.student.arch
    m = {"kind": "student", "arch": {"input_dim": arch.input_dim, "hidden_dims": list(arch.hidden_dims),
                                     "n_classes": arch.n_classes, "teacher_dim": arch.teacher_dim}}
    m.update(meta or {})
    save_params(path, stage1.params, m)


def load_student(path):
    params, meta = load_params(path)
    if meta.get("kind") != "student":
        raise ValueError(f"{path} is not a student checkpoint")
    a = meta["arch"]
    return StudentNet(StudentArch(a["input_dim"], tuple(a["hidden_dims"]), a["n_classes"], a["teacher_dim"])), \
        params, meta
