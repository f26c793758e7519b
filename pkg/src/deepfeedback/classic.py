"""Energy-minimization baselines: Adam and L-BFGS on ``E_data + w * E_prior``.

Gradients are analytic when an energy supplies one and central finite
differences otherwise. Quaternion-valued iterates are projected back onto the
unit sphere after every step via the energy's ``project`` callable.
"""
from __future__ import annotations

import time
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .geometry import euler_from_quat, quat_normalize
from .kinematics import fk_backward, fk_energy, forward_kinematics


@dataclass(frozen=True)
class StopRule:
    """Stop after ``max_iter`` iterations or ``patience`` iterations without
    a strict improvement of the data energy."""

    max_iter: int = 500
    patience: int = 20

    def __post_init__(self):
        if self.max_iter < 1 or self.patience < 1:
            raise ValueError("max_iter and patience must be positive")


class Energy:
    """``E(x) = data(x) + weight * prior(x)`` with evaluation counting.

    Parameters
    ----------
    data : callable
        Data term ``x -> float``.
    prior : callable, optional
        Prior term ``x -> float``.
    weight : float
        Prior weight.
    grad : callable, optional
        Analytic gradient of the total energy.
    fd_step : float
        Central-difference step when ``grad`` is absent.
    project : callable, optional
        Manifold projection applied to optimizer iterates.
    """

    def __init__(self, data, prior=None, weight=0.0, grad=None, fd_step=1e-5, project=None):
        self.data = data
        self.prior = prior
        self.weight = weight
        self.grad = grad
        self.fd_step = fd_step
        self.project = project or (lambda x: x)
        self.evals = 0

    def terms(self, x):
        self.evals += 1
        d = float(self.data(x))
        p = float(self.prior(x)) if self.prior is not None and self.weight else 0.0
        return d, d + self.weight * p

    def __call__(self, x):
        return self.terms(x)[1]

    def fd_gradient(self, x):
        x = np.asarray(x, dtype=np.float64)
        g = np.empty_like(x)
        h = self.fd_step
        for i in range(x.size):
            e = np.zeros_like(x)
            e[i] = h
            g[i] = (self(x + e) - self(x - e)) / (2 * h)
        return g

    def gradient(self, x):
        if self.grad is not None:
            self.evals += 1
            return np.asarray(self.grad(x), dtype=np.float64)
        return self.fd_gradient(x)


@dataclass
class OptimResult:
    x: np.ndarray
    energy: float
    data_energy: float
    trace: list = field(default_factory=list)
    iterations: int = 0
    evals: int = 0
    flag: str = ""
    elapsed_s: float = 0.0


class _Best:
    def __init__(self, x, data, total):
        self.x, self.data, self.total = x.copy(), data, total
        self.best_data = data
        self.stale = 0

    def offer(self, x, data, total):
        if total < self.total:
            self.x, self.data, self.total = x.copy(), data, total
        if data < self.best_data:
            self.best_data = data
            self.stale = 0
        else:
            self.stale += 1


def minimize_adam(energy, x0, lr=0.05, stop=StopRule(), betas=(0.9, 0.999), eps=1e-8, time_budget=None):
    """Adam on the energy; returns the best-seen iterate.

    ``time_budget`` (seconds) adds a wall-clock stop on top of ``stop``.
    """
    t_start = time.perf_counter()
    x = energy.project(np.array(x0, dtype=np.float64))
    d, e = energy.terms(x)
    if not np.isfinite(e):
        raise ValueError("energy is not finite at the initial point")
    best = _Best(x, d, e)
    trace = [e]
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    b1, b2 = betas
    flag = "max_iter"
    it = 0
    for it in range(1, stop.max_iter + 1):
        g = energy.gradient(x)
        if not np.all(np.isfinite(g)):
            flag = "nonfinite"
            break
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x = energy.project(x - lr * (m / (1 - b1**it)) / (np.sqrt(v / (1 - b2**it)) + eps))
        d, e = energy.terms(x)
        if not np.isfinite(e):
            flag = "nonfinite"
            break
        best.offer(x, d, e)
        trace.append(best.total)
        if best.stale >= stop.patience:
            flag = "patience"
            break
        if time_budget is not None and time.perf_counter() - t_start >= time_budget:
            flag = "time"
            break
    return OptimResult(best.x, best.total, best.data, trace, it, energy.evals, flag,
                       time.perf_counter() - t_start)


def _two_loop(g, s_hist, y_hist):
    q = g.copy()
    alphas = []
    for s, y in reversed(list(zip(s_hist, y_hist))):
        rho = 1.0 / np.dot(y, s)
        a = rho * np.dot(s, q)
        q -= a * y
        alphas.append((rho, a))
    if s_hist:
        s, y = s_hist[-1], y_hist[-1]
        q *= np.dot(s, y) / np.dot(y, y)
    for (s, y), (rho, a) in zip(zip(s_hist, y_hist), reversed(alphas)):
        b = rho * np.dot(y, q)
        q += s * (a - b)
    return -q


def _wolfe(energy, x, e, g, direction, c1=1e-4, c2=0.9, max_trials=40):
    """Weak Wolfe step by bisection: backtrack on the Armijo condition and
    expand while the curvature condition fails, so accepted pairs keep
    ``s.y > 0``. Returns ``(x, data, energy, grad)`` or None."""
    slope = float(np.dot(g, direction))
    if slope >= 0:
        return None
    lo, hi, step = 0.0, np.inf, 1.0
    armijo_ok = None
    for _ in range(max_trials):
        cand = energy.project(x + step * direction)
        d, ec = energy.terms(cand)
        if not np.isfinite(ec) or ec > e + c1 * step * slope:
            hi = step
        else:
            gc = energy.gradient(cand)
            armijo_ok = (cand, d, ec, gc)
            if float(np.dot(gc, direction)) >= c2 * slope:
                return armijo_ok
            lo = step
        step = 2.0 * lo if hi == np.inf else 0.5 * (lo + hi)
    return armijo_ok


def minimize_lbfgs(energy, x0, memory=10, stop=StopRule(), gtol=1e-12, time_budget=None):
    """Limited-memory BFGS (two-loop recursion) with a weak Wolfe line search.

    A failed line search falls back to a steepest-descent step (flag
    ``"fallback"``); if that fails too the run ends with ``"linesearch"``.
    """
    t_start = time.perf_counter()
    x = energy.project(np.array(x0, dtype=np.float64))
    d, e = energy.terms(x)
    if not np.isfinite(e):
        raise ValueError("energy is not finite at the initial point")
    best = _Best(x, d, e)
    trace = [e]
    s_hist = deque(maxlen=memory)
    y_hist = deque(maxlen=memory)
    g = energy.gradient(x)
    flag = "max_iter"
    it = 0
    for it in range(1, stop.max_iter + 1):
        if not np.all(np.isfinite(g)):
            flag = "nonfinite"
            break
        if np.linalg.norm(g) <= gtol:
            flag = "converged"
            it -= 1
            break
        direction = _two_loop(g, list(s_hist), list(y_hist))
        res = _wolfe(energy, x, e, g, direction)
        if res is None:
            s_hist.clear()
            y_hist.clear()
            res = _wolfe(energy, x, e, g, -g)
            if res is None:
                flag = "linesearch"
                break
            flag = "fallback"
        x_new, d, e_new, g_new = res
        s = x_new - x
        yv = g_new - g
        if np.dot(s, yv) > 1e-12 * max(1.0, np.dot(yv, yv)):
            s_hist.append(s)
            y_hist.append(yv)
        x, e, g = x_new, e_new, g_new
        best.offer(x, d, e)
        trace.append(best.total)
        if best.stale >= stop.patience:
            flag = "patience"
            break
        if time_budget is not None and time.perf_counter() - t_start >= time_budget:
            flag = "time"
            break
    return OptimResult(best.x, best.total, best.data, trace, max(it, 0), energy.evals, flag,
                       time.perf_counter() - t_start)


# ---------------------------------------------------------------------------
# Priors and task energies
# ---------------------------------------------------------------------------

VAR_FLOOR = 1e-6


def _wrap(a):
    return (a + np.pi) % (2 * np.pi) - np.pi


@dataclass
class GaussianEulerPrior:
    """Independent Gaussians over each joint's XYZ Euler angles (radians)."""

    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def from_angles(cls, angles, var_floor=VAR_FLOOR):
        a = np.asarray(angles, dtype=np.float64)
        if a.ndim < 2 or a.shape[0] < 1:
            raise ValueError("need at least one sample of Euler angles")
        if a.shape[0] < 2:
            raise ValueError("need at least two samples per joint")
        mean = a.mean(axis=0)
        var = np.maximum(a.var(axis=0), var_floor)
        return cls(mean, var)

    @classmethod
    def fit(cls, rotations, var_floor=VAR_FLOOR):
        """Fit from training rotations of shape ``(samples, joints, 4)``."""
        r = np.asarray(rotations, dtype=np.float64)
        if r.size == 0:
            raise ValueError("no training rotations")
        return cls.from_angles(euler_from_quat(quat_normalize(r)), var_floor)

    def energy(self, rotations):
        """Negative log density up to its minimum: ``sum (a - mean)^2 / (2 var)``."""
        ang = euler_from_quat(quat_normalize(np.asarray(rotations, dtype=np.float64)))
        d = _wrap(ang - self.mean)
        return np.sum(d * d / (2.0 * self.var), axis=(-1, -2))

    def gradient(self, rotations, h=1e-6):
        """Central-difference gradient wrt the ``(N, 4)`` quaternion entries."""
        q = np.asarray(rotations, dtype=np.float64)
        n = q.size
        eye = np.eye(n).reshape((n,) + q.shape) * h
        plus = self.energy(q[None] + eye)
        minus = self.energy(q[None] - eye)
        return ((plus - minus) / (2 * h)).reshape(q.shape)


def unit_norm_penalty(q):
    """Quadratic penalty ``(|q|^2 - 1)^2`` keeping quaternions near the sphere."""
    q = np.asarray(q, dtype=np.float64)
    return float((np.dot(q, q) - 1.0) ** 2)


def ik_energy(skel, y_obs, prior=None, weight=0.001):
    """Joint-position data energy plus optional Euler prior, analytic data gradient."""
    n = skel.n_joints

    def project(x):
        return quat_normalize(x.reshape(n, 4)).reshape(-1)

    def data(x):
        return fk_energy(forward_kinematics(skel, project(x).reshape(n, 4), check=False), y_obs)

    def prior_e(x):
        return float(prior.energy(x.reshape(n, 4)))

    def grad(x):
        raw = x.reshape(n, 4)
        norm = np.linalg.norm(raw, axis=1, keepdims=True)
        p = raw / norm
        dy = forward_kinematics(skel, p, check=False) - y_obs
        gp = fk_backward(skel, p, 2.0 * dy)
        graw = (gp - p * np.sum(p * gp, axis=1, keepdims=True)) / norm
        if prior is not None and weight:
            graw = graw + weight * prior.gradient(raw)
        return graw.reshape(-1)

    return Energy(data, prior_e if prior is not None else None, weight if prior is not None else 0.0,
                  grad=grad, project=project)


def model_energy(model, y_obs, fd_step=1e-3, penalty_weight=0.0):
    """Energy over any forward model with finite-difference gradients.

    Used for the renderer-based tasks, whose forward models have no
    gradients. ``fd_step`` of 1e-3 lets perturbations cross pixel boundaries.
    """

    def data(x):
        return model.data_energy(model.simulate(model.project(x)), y_obs)

    prior = (lambda x: unit_norm_penalty(x[:4])) if penalty_weight else None
    return Energy(data, prior, penalty_weight, fd_step=fd_step, project=model.project)
