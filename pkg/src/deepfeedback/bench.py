"""Benchmark harness: run a solver mode over the test split and aggregate.

Report CSV columns are ``method,steps,time_ms,<metric>_mean,<metric>_median,
...,outlier_pct`` followed by ``forward_ms,update_ms,energy_violations,
data_energy_mean``. IK has no outlier column. Floats are written with 6
significant digits. Medians use the lower-median rule.
"""
from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field

import numpy as np

from .classic import GaussianEulerPrior, StopRule, ik_energy, minimize_adam, minimize_lbfgs, model_energy
from .solver import SolverConfig, energy_violations, solve
from .tasks import IKTask

MODES = ("feedback", "feedback+damping", "regression", "adam", "lbfgs", "feedback-then-lbfgs")
LEARNED = ("feedback", "feedback+damping", "regression", "feedback-then-lbfgs")

# CSV column stems per task metric key
COLUMNS = {"trans": "trans_m", "rot": "rot_deg", "mse": "mse", "pos": "pos_cm"}


def g6(v):
    """Six significant digits; ``nan`` for missing values."""
    v = float(v)
    if not np.isfinite(v):
        return "nan"
    s = f"{v:.6g}"
    return "0" if s == "-0" else s


def lower_median(values):
    v = np.sort(np.asarray(values, dtype=np.float64))
    if v.size == 0:
        raise ValueError("median of an empty sequence")
    return float(v[(v.size - 1) // 2])


@dataclass
class BenchConfig:
    stages: int | None = None
    lr: float = 0.05
    max_iter: int = 500
    patience: int = 20
    memory: int = 10
    prior_weight: float = 0.001
    fd_step: float = 1e-3
    time_budget: float | None = None
    timing: bool = True


@dataclass
class InstanceResult:
    index: int
    metrics: dict
    steps: int
    forward_ms: float
    update_ms: float
    data_energy: float
    violations: int = 0
    stage_metrics: list = field(default_factory=list)
    trajectory: object = None
    x: np.ndarray = None


@dataclass
class BenchReport:
    method: str
    metric_names: tuple
    has_outlier: bool
    steps: float
    time_ms: float
    forward_ms: float
    update_ms: float
    means: dict
    medians: dict
    outlier_pct: float
    violations: int
    data_energy_mean: float
    stage_means: list = field(default_factory=list)
    stage_medians: list = field(default_factory=list)

    def header(self):
        cols = ["method", "steps", "time_ms"]
        for m in self.metric_names:
            cols += [f"{COLUMNS[m]}_mean", f"{COLUMNS[m]}_median"]
        if self.has_outlier:
            cols.append("outlier_pct")
        return cols + ["forward_ms", "update_ms", "energy_violations", "data_energy_mean"]

    def row(self, timing=True):
        t = (lambda v: g6(v)) if timing else (lambda v: "nan")
        out = [self.method, g6(self.steps), t(self.time_ms)]
        for m in self.metric_names:
            out += [g6(self.means[m]), g6(self.medians[m])]
        if self.has_outlier:
            out.append(g6(self.outlier_pct))
        return out + [t(self.forward_ms), t(self.update_ms), str(self.violations), g6(self.data_energy_mean)]

    def to_csv(self, timing=True):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.header())
        w.writerow(self.row(timing))
        return buf.getvalue()

    def stages_csv(self):
        """Per-stage error curve: one row per stage of the learned solver."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        cols = ["method", "stage"]
        for m in self.metric_names:
            cols += [f"{COLUMNS[m]}_mean", f"{COLUMNS[m]}_median"]
        if self.has_outlier:
            cols.append("outlier_pct")
        w.writerow(cols)
        for t, (means, medians) in enumerate(zip(self.stage_means, self.stage_medians)):
            row = [self.method, t]
            for m in self.metric_names:
                row += [g6(means[m]), g6(medians[m])]
            if self.has_outlier:
                row.append(g6(means["outlier"] * 100.0))
            w.writerow(row)
        return buf.getvalue()


def _summaries(rows, names):
    means = {m: float(np.mean([r[m] for r in rows])) for m in names}
    medians = {m: lower_median([r[m] for r in rows]) for m in names}
    if "outlier" in rows[0]:
        means["outlier"] = float(np.mean([bool(r["outlier"]) for r in rows]))
    return means, medians


def aggregate(method, results, metric_names):
    """Fold per-instance results (in sample order) into a :class:`BenchReport`."""
    if not results:
        raise ValueError("no results to aggregate")
    rows = [r.metrics for r in results]
    has_outlier = "outlier" in rows[0]
    means, medians = _summaries(rows, metric_names)
    stage_means, stage_medians = [], []
    n_curve = min(len(r.stage_metrics) for r in results)
    for t in range(n_curve):
        sm, sd = _summaries([r.stage_metrics[t] for r in results], metric_names)
        stage_means.append(sm)
        stage_medians.append(sd)
    fwd = float(np.mean([r.forward_ms for r in results]))
    upd = float(np.mean([r.update_ms for r in results]))
    return BenchReport(
        method=method,
        metric_names=tuple(metric_names),
        has_outlier=has_outlier,
        steps=float(np.mean([r.steps for r in results])),
        time_ms=fwd + upd,
        forward_ms=fwd,
        update_ms=upd,
        means=means,
        medians=medians,
        outlier_pct=100.0 * means.get("outlier", 0.0),
        violations=int(sum(r.violations for r in results)),
        data_energy_mean=float(np.mean([r.data_energy for r in results])),
        stage_means=stage_means,
        stage_medians=stage_medians,
    )


class _TimedEnergy:
    """Wraps a data term so time spent in the forward model is measured."""

    def __init__(self, fn):
        self.fn = fn
        self.ms = 0.0

    def __call__(self, x):
        t0 = time.perf_counter()
        v = self.fn(x)
        self.ms += 1e3 * (time.perf_counter() - t0)
        return v


def classic_energy(task, sample, prior=None, cfg=None):
    cfg = cfg or BenchConfig()
    if isinstance(task, IKTask):
        return ik_energy(task.skel, sample.y, prior, cfg.prior_weight)
    return model_energy(task.model(sample.scene), sample.y, fd_step=cfg.fd_step)


def fit_prior(task, dataset):
    """Euler-angle prior from the training rotations (IK only)."""
    if not isinstance(task, IKTask):
        return None
    rots = np.stack([s.x_gt.reshape(-1, 4) for s in dataset.split("train")])
    return GaussianEulerPrior.fit(rots)


def _run_classic(task, sample, method, x0, cfg, prior):
    energy = classic_energy(task, sample, prior, cfg)
    timed = _TimedEnergy(energy.data)
    energy.data = timed
    stop = StopRule(cfg.max_iter, cfg.patience)
    if method == "adam":
        res = minimize_adam(energy, x0, lr=cfg.lr, stop=stop, time_budget=cfg.time_budget)
    else:
        res = minimize_lbfgs(energy, x0, memory=cfg.memory, stop=stop, time_budget=cfg.time_budget)
    total = 1e3 * res.elapsed_s
    return res, timed.ms, max(total - timed.ms, 0.0)


def run_instance(task, sample, method, nets=None, cfg=None, prior=None):
    """Solve one test instance with ``method`` and score it."""
    cfg = cfg or BenchConfig()
    if method not in MODES:
        raise ValueError(f"unknown mode {method!r}")
    model = task.model(sample.scene)
    x0 = task.initial_estimate(sample.scene)
    if method in ("adam", "lbfgs"):
        res, fwd, upd = _run_classic(task, sample, method, x0, cfg, prior)
        x = model.project(res.x)
        return InstanceResult(sample.index, task.metrics(x, sample.x_gt, sample.scene), res.iterations,
                              fwd, upd, res.data_energy, energy_violations(res.trace),
                              [task.metrics(x0, sample.x_gt, sample.scene),
                               task.metrics(x, sample.x_gt, sample.scene)], x=x)
    if not nets:
        raise ValueError(f"mode {method!r} needs trained networks")
    if method == "regression":
        stage_nets = nets[:1]
    else:
        stage_nets = nets[: cfg.stages] if cfg.stages else nets
    scfg = SolverConfig(stages=len(stage_nets), damping=method == "feedback+damping", evaluate_final=True)
    traj = solve(sample.y, model, x0, [task.update_fn(n) for n in stage_nets], scfg)
    fwd, upd = float(np.sum(traj.forward_ms)), float(np.sum(traj.update_ms))
    stage_metrics = [task.metrics(s, sample.x_gt, sample.scene) for s in traj.states]
    x, steps, e = traj.x, traj.n_stages, traj.energies[-1]
    if method == "feedback-then-lbfgs":
        res, cfwd, cupd = _run_classic(task, sample, "lbfgs", x, cfg, prior)
        x = model.project(res.x)
        steps += res.iterations
        fwd += cfwd
        upd += cupd
        e = min(e, res.data_energy)
        if res.data_energy > traj.energies[-1]:
            x = traj.x
    return InstanceResult(sample.index, task.metrics(x, sample.x_gt, sample.scene), steps, fwd, upd, e,
                          energy_violations(traj.energies), stage_metrics, traj, x)


def run_bench(task, dataset, method, nets=None, cfg=None, split="test"):
    """Run every sample of ``split`` (in index order) and aggregate."""
    cfg = cfg or BenchConfig()
    prior = fit_prior(task, dataset) if method in ("adam", "lbfgs", "feedback-then-lbfgs") else None
    samples = sorted(dataset.split(split), key=lambda s: s.index)
    if not samples:
        raise ValueError(f"dataset has no {split} samples")
    results = [run_instance(task, s, method, nets, cfg, prior) for s in samples]
    return aggregate(method, results, task.metric_names), results
