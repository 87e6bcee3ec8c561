import math

import numpy as np
import pytest
from scipy import stats

from tagdiff.configuration import Configuration, TorusBox
from tagdiff.dynamics import (
    SUBSTEP_ADAPTIVE,
    CoupledState,
    IntegratorParams,
    StepDiagnostics,
    coupled_drift,
    coupled_from_absolute,
    equilibrium_states,
    member_generators,
    simulate_ensemble,
    step_coupled,
    step_full,
)
from tagdiff.potential import lennard_jones, zero_potential

BOX = TorusBox(10.0, 2)
LJ = lennard_jones(1.0, 1.0, 2, cutoff=2.5)
FREE = zero_potential(2)


def lattice_env(n_side=4, spacing=1.6, box=BOX):
    g = (np.arange(n_side) - (n_side - 1) / 2) * spacing
    pts = np.array([[a, b] for a in g for b in g if (a, b) != (0.0, 0.0)])
    return Configuration(pts + 0.3, box)


class TestStepFull:
    def test_free_increments_gaussian(self):
        dt = 1e-3
        c = Configuration(np.zeros((50_000, 2)), BOX)
        new = step_full(c, IntegratorParams(dt), FREE, np.random.default_rng(0))
        inc = new.positions.ravel() / math.sqrt(2 * dt)
        assert stats.kstest(inc, "norm").pvalue > 0.01

    def test_attraction_without_noise(self):
        c = Configuration([[-0.75, 0.0], [0.75, 0.0]], BOX)
        new = step_full(c, IntegratorParams(1e-3), LJ, None, noise=np.zeros((2, 2)))
        assert new.positions[0, 0] > -0.75 and new.positions[1, 0] < 0.75
        np.testing.assert_array_equal(new.positions[:, 1], 0.0)

    def test_deterministic(self):
        c = lattice_env()
        p = IntegratorParams(1e-3)
        a = step_full(c, p, LJ, np.random.default_rng(3))
        b = step_full(c, p, LJ, np.random.default_rng(3))
        np.testing.assert_array_equal(a.positions, b.positions)

    def test_adaptive_substeps_close_pair(self):
        c = Configuration([[0.0, 0.0], [0.85, 0.0]], BOX)
        diag = StepDiagnostics()
        new = step_full(c, IntegratorParams(1e-2, scheme=SUBSTEP_ADAPTIVE), LJ, np.random.default_rng(1),
                        diagnostics=diag)
        assert diag.substeps > 1
        assert np.all(np.isfinite(new.positions))


class TestStepCoupled:
    def test_free_variances(self):
        dt = 1e-3
        rng = np.random.default_rng(3)
        start = CoupledState.at_origin(Configuration([[0.0, 0.0]], BOX))
        xi, y = [], []
        for _ in range(20000):
            s = step_coupled(start, IntegratorParams(dt), FREE, rng)
            xi.append(s.displacement)
            y.append(s.environment.positions[0])
        xi, y = np.array(xi), np.array(y)
        # per coordinate: Var(sqrt2 dB0) = 2 dt, Var(sqrt2 (dBi - dB0)) = 4 dt
        np.testing.assert_allclose(xi.var(axis=0), 2 * dt, rtol=0.04)
        np.testing.assert_allclose(y.var(axis=0), 4 * dt, rtol=0.04)

    def test_tagged_drift_single_particle(self):
        y = np.array([1.3, 0.4])
        tagged, env = coupled_drift(Configuration([y], BOX), LJ)
        np.testing.assert_allclose(tagged, LJ.gradient(y), rtol=1e-14)
        # environment drift: -grad phi(y) - grad phi(y)
        np.testing.assert_allclose(env[0], -2 * LJ.gradient(y), rtol=1e-14)

    def test_displacement_unwrapped(self):
        s = CoupledState(np.array([4.999, 0.0]), np.zeros(2), Configuration.empty(BOX))
        new = step_coupled(s, IntegratorParams(1e-3), FREE, None, noise=np.array([[1.0, 0.0]]))
        assert new.displacement[0] > 0 and new.xi[0] < 0

    @pytest.mark.parametrize("seed", range(10))
    def test_frame_equivalence(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 31))
        pts = []
        while len(pts) < n:
            x = rng.uniform(-5, 5, 2)
            if all(np.linalg.norm(BOX.min_image(x, p)) > 0.9 for p in pts) and np.linalg.norm(x) > 0.9:
                pts.append(x)
        state = CoupledState(rng.uniform(-5, 5, 2), np.zeros(2), Configuration(np.array(pts), BOX)).quantized()
        absolute = state.absolute()
        params = IntegratorParams(1e-3)
        r1, r2 = np.random.default_rng(100 + seed), np.random.default_rng(100 + seed)
        disp = np.zeros(2)
        for _ in range(100):
            old = absolute.positions[0].copy()
            absolute = step_full(absolute, params, LJ, r1)
            disp += BOX.min_image(absolute.positions[0], old)
            state = step_coupled(state, params, LJ, r2)
        via_full = coupled_from_absolute(absolute)
        assert np.max(np.abs(via_full.environment.positions - state.environment.positions)) == 0.0
        assert np.max(np.abs(via_full.xi - state.xi)) == 0.0
        np.testing.assert_allclose(state.displacement, disp, atol=1e-12)


class TestEnsemble:
    def test_zero_horizon(self):
        trajs = simulate_ensemble([CoupledState.at_origin(lattice_env())], 0.0, IntegratorParams(1e-3), LJ, 1)
        assert len(trajs[0].times) == 1 and trajs[0].times[0] == 0.0
        np.testing.assert_array_equal(trajs[0].displacement, 0.0)

    def test_matches_sequential_steps(self):
        env = lattice_env()
        params = IntegratorParams(1e-3, record_stride=10)
        traj = simulate_ensemble([CoupledState.at_origin(env)], 0.05, params, LJ, seed_base=42)[0]
        rng, _ = member_generators(42, 0)
        state = CoupledState.at_origin(env).quantized()
        comp = np.zeros(2)
        for _ in range(50):
            tagged, _ = coupled_drift(state.environment, LJ)
            comp += tagged * params.dt
            state = step_coupled(state, params, LJ, rng)
        np.testing.assert_array_equal(traj.displacement[-1], state.displacement)
        np.testing.assert_allclose(traj.compensator[-1], comp, rtol=1e-12, atol=1e-14)
        np.testing.assert_allclose(traj.snapshots[-1][1].positions, state.environment.positions, atol=1e-12)
        assert [t for t, _ in traj.snapshots] == pytest.approx([0.0, 0.01, 0.02, 0.03, 0.04, 0.05])

    def test_permutation_invariance(self):
        envs = [lattice_env(3, 1.8), lattice_env(4, 1.6), Configuration.empty(BOX)]
        states = equilibrium_states(envs)
        p = IntegratorParams(1e-3)
        a = simulate_ensemble(states, 0.03, p, LJ, 9)
        b = simulate_ensemble(states[::-1], 0.03, p, LJ, 9, indices=[2, 1, 0])
        for x, y in zip(a, b[::-1]):
            np.testing.assert_array_equal(x.displacement, y.displacement)

    def test_equilibrium_mean_zero(self, lj_samples):
        p = IntegratorParams(1e-4)
        trajs = simulate_ensemble(equilibrium_states(lj_samples), 0.2, p, LJ, 5)
        X = np.array([t.displacement[-1] for t in trajs])
        se = X.std(axis=0, ddof=1) / math.sqrt(len(X))
        assert np.all(np.abs(X.mean(axis=0)) < 3 * se)
        caps = sum(t.cap_event_count for t in trajs)
        evals = sum(t.force_evaluations for t in trajs)
        assert caps / evals < 1e-4
        assert not any(t.biased for t in trajs)

    def test_dt_halving(self, lj_samples):
        # weak consistency: E|X_T|^2 agrees across dt within Monte Carlo error
        states = equilibrium_states(lj_samples)
        vals = []
        for dt in (2e-4, 1e-4):
            trajs = simulate_ensemble(states * 5, 0.2, IntegratorParams(dt), LJ, 77, indices=range(200))
            vals.append(np.array([np.sum(t.displacement[-1] ** 2) for t in trajs]))
        se = math.hypot(vals[0].std(ddof=1), vals[1].std(ddof=1)) / math.sqrt(200)
        assert abs(vals[0].mean() - vals[1].mean()) < 3 * se

    def test_negative_horizon(self):
        with pytest.raises(ValueError):
            simulate_ensemble([CoupledState.at_origin(lattice_env())], -1.0, IntegratorParams(1e-3), LJ)

    def test_bad_params(self):
        with pytest.raises(ValueError):
            IntegratorParams(0.0)
        with pytest.raises(ValueError):
            IntegratorParams(1e-3, record_stride=0)
        with pytest.raises(ValueError):
            IntegratorParams(1e-3, scheme="rk4")
