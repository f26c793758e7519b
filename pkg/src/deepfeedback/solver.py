"""Iterative feedback solver.

Each stage simulates the current estimate, hands ``(x, f(x), y)`` to an
update function and adds its output to the estimate::

    y_t = f(x_t)
    x_{t+1} = project(x_t + lam * g_t(x_t, y_t, y))

``lam`` is 1 unless damping is enabled, in which case it is halved until the
data energy strictly decreases (see :func:`adaptive_step`).
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np


class ForwardModel(Protocol):
    def simulate(self, x: np.ndarray) -> np.ndarray: ...

    def data_energy(self, y_sim: np.ndarray, y_obs: np.ndarray) -> float: ...

    def project(self, x: np.ndarray) -> np.ndarray: ...


UpdateFn = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]


class SolverError(RuntimeError):
    pass


@dataclass
class SolverConfig:
    stages: int = 5
    damping: bool = False
    lambda_floor: float = 2.0**-10
    tol: float | None = None
    evaluate_final: bool = False

    def __post_init__(self):
        if self.stages < 1:
            raise ValueError("stages must be >= 1")
        if not 0.0 < self.lambda_floor <= 1.0:
            raise ValueError("lambda_floor must lie in (0, 1]")


@dataclass
class Trajectory:
    """Record of one solve.

    ``states`` has one more entry than the number of executed stages.
    ``energies[t]`` is the data energy of ``states[t]`` (NaN when it was
    never evaluated). ``forward_ms`` / ``update_ms`` are per executed stage.
    """

    states: list = field(default_factory=list)
    energies: list = field(default_factory=list)
    lambdas: list = field(default_factory=list)
    stalled: list = field(default_factory=list)
    forward_ms: list = field(default_factory=list)
    update_ms: list = field(default_factory=list)
    simulations: list = field(default_factory=list)
    forward_calls: int = 0
    update_calls: int = 0
    converged: bool = False

    @property
    def x(self):
        return self.states[-1]

    @property
    def n_stages(self):
        return len(self.states) - 1


class _CountingModel:
    def __init__(self, model, traj):
        self.model = model
        self.traj = traj
        self.ms = 0.0

    def simulate(self, x):
        t0 = time.perf_counter()
        y = self.model.simulate(x)
        self.ms += 1e3 * (time.perf_counter() - t0)
        self.traj.forward_calls += 1
        return y

    def data_energy(self, y_sim, y_obs):
        return self.model.data_energy(y_sim, y_obs)

    def project(self, x):
        return self.model.project(x)


def adaptive_step(x, delta, model, y, e_prev, lambda_floor=2.0**-10):
    """Damped update ``x + lam * delta`` with lam halved until energy drops.

    Returns
    -------
    x_next, lam, energy, y_next, stalled
        On a stall (no strictly lower energy down to ``lambda_floor``) the
        input ``x`` is returned unchanged with ``energy == e_prev`` and
        ``y_next`` is None.
    """
    lam = 1.0
    while True:
        cand = model.project(x + lam * delta)
        y_cand = model.simulate(cand)
        e = float(model.data_energy(y_cand, y))
        if not np.isfinite(e):
            raise SolverError(f"non-finite candidate energy at lambda={lam}")
        if e < e_prev:
            return cand, lam, e, y_cand, False
        if lam <= lambda_floor:
            return x, lam, e_prev, None, True
        lam = max(lam * 0.5, lambda_floor)


def solve(y, model, x0, nets, cfg=None):
    """Run the feedback loop from ``x0`` towards observation ``y``.

    Parameters
    ----------
    y : array
        Observation.
    model : ForwardModel
    x0 : array
        Initial estimate (projected before use).
    nets : callable or sequence of callables
        Update functions ``g(x, y_t, y) -> delta``. A single callable is
        shared across stages; a sequence supplies one per stage.
    cfg : SolverConfig
    """
    cfg = cfg or SolverConfig()
    if callable(nets):
        stage_nets = [nets] * cfg.stages
    else:
        stage_nets = list(nets)
        if len(stage_nets) == 1:
            stage_nets = stage_nets * cfg.stages
        if len(stage_nets) < cfg.stages:
            raise ValueError(f"{len(stage_nets)} update networks for {cfg.stages} stages")

    traj = Trajectory()
    fm = _CountingModel(model, traj)
    x = model.project(np.asarray(x0, dtype=np.float64))
    traj.states.append(x)
    y_t = None
    e_t = np.nan
    for t in range(cfg.stages):
        fm.ms = 0.0
        if y_t is None:
            y_t = fm.simulate(x)
            e_t = float(model.data_energy(y_t, y))
        if t == 0:
            traj.energies.append(e_t)
        traj.simulations.append(y_t)

        t0 = time.perf_counter()
        delta = np.asarray(stage_nets[t](x, y_t, y), dtype=np.float64)
        update_ms = 1e3 * (time.perf_counter() - t0)
        traj.update_calls += 1
        if delta.shape != x.shape:
            raise SolverError(f"stage {t}: update has shape {delta.shape}, estimate has {x.shape}")
        if not np.all(np.isfinite(delta)):
            raise SolverError(f"stage {t}: non-finite update")

        if cfg.damping:
            x_next, lam, e_next, y_next, stalled = adaptive_step(x, delta, fm, y, e_t, cfg.lambda_floor)
            if stalled:
                y_next = y_t
        else:
            x_next = model.project(x + delta)
            lam, stalled = 1.0, False
            y_next, e_next = None, np.nan

        traj.forward_ms.append(fm.ms)
        traj.update_ms.append(update_ms)
        traj.lambdas.append(lam)
        traj.stalled.append(stalled)
        step = float(np.linalg.norm(x_next - x))
        x, y_t, e_t = x_next, y_next, e_next
        traj.states.append(x)
        traj.energies.append(e_t)
        if cfg.tol is not None and step <= cfg.tol:
            traj.converged = True
            break

    if cfg.evaluate_final and y_t is None:
        y_t = model.simulate(x)
        traj.energies[-1] = float(model.data_energy(y_t, y))
    if y_t is not None:
        traj.simulations.append(y_t)
    return traj


def runtime_breakdown(traj):
    """Mean forward and update milliseconds per stage, and their sum."""
    if not traj.forward_ms:
        raise ValueError("trajectory has no timed stages")
    fwd = float(np.mean(traj.forward_ms))
    upd = float(np.mean(traj.update_ms))
    return fwd, upd, fwd + upd


def energy_violations(energies):
    """Count increases in a data-energy sequence (NaN entries are skipped)."""
    e = np.asarray([v for v in energies if np.isfinite(v)])
    return int(np.sum(np.diff(e) > 0))
