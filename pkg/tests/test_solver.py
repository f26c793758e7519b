import numpy as np
import pytest

from deepfeedback.solver import SolverConfig, SolverError, adaptive_step, energy_violations, runtime_breakdown, solve
from deepfeedback.tasks import perfect_update, zero_update


class Linear:
    """f(x) = A x with squared-error energy; counts simulations."""

    def __init__(self, a):
        self.a = np.asarray(a, dtype=float)
        self.calls = 0

    def simulate(self, x):
        self.calls += 1
        return self.a @ x

    def data_energy(self, y_sim, y_obs):
        return float(np.sum((y_sim - y_obs) ** 2))

    def project(self, x):
        return np.asarray(x, dtype=float)


A = np.array([[2.0, 0.0], [0.0, 1.0]])


def test_perfect_update_reaches_zero_energy_in_one_stage():
    m = Linear(A)
    x_gt = np.array([1.0, -2.0])
    traj = solve(m.a @ x_gt, m, np.zeros(2), perfect_update(x_gt), SolverConfig(stages=3, evaluate_final=True))
    assert np.array_equal(traj.x, x_gt)
    assert traj.energies[-1] == 0.0
    assert traj.n_stages == 3


def test_undamped_uses_exactly_one_simulation_per_stage():
    m = Linear(A)
    traj = solve(np.ones(2), m, np.zeros(2), lambda x, yt, y: 0.1 * np.ones(2), SolverConfig(stages=5))
    assert traj.forward_calls == 5 and m.calls == 5
    assert traj.update_calls == 5
    assert np.isnan(traj.energies[1])
    assert len(traj.forward_ms) == len(traj.update_ms) == 5


def test_evaluate_final_does_not_count_as_forward_call():
    m = Linear(A)
    traj = solve(np.ones(2), m, np.zeros(2), zero_update, SolverConfig(stages=2, evaluate_final=True))
    assert traj.forward_calls == 2 and m.calls == 3
    assert traj.energies[-1] == pytest.approx(2.0)


def test_zero_net_keeps_initial_estimate():
    m = Linear(A)
    x0 = np.array([0.5, 0.25])
    traj = solve(np.ones(2), m, x0, [zero_update] * 4, SolverConfig(stages=4))
    assert all(np.array_equal(s, x0) for s in traj.states)


def test_tolerance_stops_zero_net_after_first_stage():
    m = Linear(A)
    traj = solve(np.ones(2), m, np.zeros(2), zero_update, SolverConfig(stages=5, tol=1e-12))
    assert traj.converged and traj.n_stages == 1


def test_damping_halves_overshooting_updates():
    m = Linear(np.eye(2))
    y = np.array([1.0, 0.0])
    # overshoot by 4: lambda 1 gives E=9, 1/2 gives E=1 (not a strict decrease), 1/4 lands on y
    traj = solve(y, m, np.zeros(2), lambda x, yt, yy: 4.0 * (yy - x), SolverConfig(stages=1, damping=True))
    assert traj.lambdas == [0.25]
    np.testing.assert_allclose(traj.x, [1.0, 0.0])
    assert traj.energies == [1.0, 0.0]


def test_damping_stall_keeps_estimate():
    m = Linear(np.eye(2))
    y = np.array([1.0, 0.0])
    x0 = np.array([1.0, 0.0])
    bad = lambda x, yt, yy: np.array([0.0, 1.0])
    traj = solve(y, m, x0, bad, SolverConfig(stages=2, damping=True, lambda_floor=2.0**-4))
    assert traj.stalled == [True, True]
    assert np.array_equal(traj.x, x0)
    assert traj.energies == [0.0, 0.0, 0.0]
    assert traj.lambdas == [2.0**-4, 2.0**-4]


def test_adaptive_step_direct():
    m = Linear(np.eye(1))
    x, lam, e, y_next, stalled = adaptive_step(np.array([0.0]), np.array([8.0]), m, np.array([1.0]), 1.0)
    assert (lam, stalled) == (0.125, False)
    assert e == pytest.approx(0.0)
    assert y_next is not None


@pytest.mark.parametrize("seed", range(10))
def test_damped_energies_never_increase(seed):
    rng = np.random.default_rng(seed)
    m = Linear(rng.standard_normal((3, 3)))
    y = rng.standard_normal(3)
    noisy = lambda x, yt, yy: rng.standard_normal(3)
    traj = solve(y, m, np.zeros(3), noisy, SolverConfig(stages=8, damping=True))
    assert energy_violations(traj.energies) == 0
    assert np.all(np.diff(traj.energies) <= 0)


def test_solver_rejects_bad_updates():
    m = Linear(A)
    with pytest.raises(SolverError, match="stage 0"):
        solve(np.ones(2), m, np.zeros(2), lambda x, yt, y: np.zeros(3), SolverConfig(stages=1))
    with pytest.raises(SolverError, match="non-finite"):
        solve(np.ones(2), m, np.zeros(2), lambda x, yt, y: np.array([np.nan, 0.0]), SolverConfig(stages=1))
    with pytest.raises(ValueError):
        solve(np.ones(2), m, np.zeros(2), [zero_update] * 2, SolverConfig(stages=3))


def test_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(stages=0)
    with pytest.raises(ValueError):
        SolverConfig(lambda_floor=0.0)


def test_runtime_breakdown_sums():
    m = Linear(A)
    traj = solve(np.ones(2), m, np.zeros(2), zero_update, SolverConfig(stages=3))
    fwd, upd, total = runtime_breakdown(traj)
    assert total == pytest.approx(fwd + upd)


def test_energy_violations_counts_increases():
    assert energy_violations([3.0, 2.0, 2.0, 2.5, 1.0, 1.5]) == 2
    assert energy_violations([1.0, float("nan"), 0.5]) == 0
