"""Desk-scale acceptance run: d=2, L=10, density about 0.3, dt=1e-4.

Each test prints one PASS/FAIL line (collected again in the terminal
summary) and then asserts.  Wall-clock budgets are part of each criterion.
"""
import math
import time

import numpy as np
import pytest
from scipy import stats

from conftest import record_acceptance
from tagdiff import estimators as est
from tagdiff import functionals as fn
from tagdiff.configuration import Configuration, TorusBox
from tagdiff.dynamics import (
    CoupledState,
    IntegratorParams,
    coupled_from_absolute,
    equilibrium_states,
    simulate_ensemble,
    step_coupled,
    step_full,
)
from tagdiff.gibbs import (
    BIRTH,
    DEATH,
    DISPLACE,
    GcmcParams,
    LatticeGas,
    log_target,
    sample_chain,
    sample_independent,
    transition_density,
)
from tagdiff.potential import audit_conditions, lennard_jones, slow_tail_attraction, smooth_bump, zero_potential

pytestmark = pytest.mark.slow

BOX = TorusBox(10.0, 2)
LJ = lennard_jones(1.0, 1.0, 2, cutoff=2.5)
FREE = zero_potential(2)
DT = 1e-4
Z_LJ = 0.25  # gives density ~0.3 for truncated LJ at unit temperature


class Clock:
    def __init__(self, budget):
        self.budget = budget
        self.start = time.perf_counter()

    @property
    def elapsed(self):
        return time.perf_counter() - self.start

    @property
    def ok(self):
        return self.elapsed < self.budget


def _fmt(x):
    return np.array2string(np.asarray(x, float), precision=4, separator=",")


# -- 1 ---------------------------------------------------------------------


def test_01_free_particle_calibration():
    clock = Clock(60)
    init = sample_independent(GcmcParams(0.3), FREE, BOX, 200, 30, seed_base=101)
    trajs = simulate_ensemble(equilibrium_states(init), 1.0, IntegratorParams(DT, record_stride=10**9, series_stride=10),
                              FREE, seed_base=102)
    D = est.diffusion_matrix(trajs, np.linspace(0.1, 1.0, 10))
    free = est.free_particle_report(D)
    mart = est.martingale_diagnostics(trajs)
    qv = mart[1]
    passed = free.passed and qv.passed and clock.ok
    record_acceptance(1, "free-particle calibration", passed,
                      f"D_hat={_fmt(D.D_hat.ravel())} se={_fmt(D.D_se.ravel())} qv={_fmt(qv.estimate)}"
                      f"+-{_fmt(qv.standard_error)} t={clock.elapsed:.0f}s")
    assert passed


# -- 2 ---------------------------------------------------------------------


def test_02_frame_equivalence():
    clock = Clock(60)
    env = sample_independent(GcmcParams(Z_LJ), LJ, BOX, 1, 200, seed_base=201)[0]
    params = IntegratorParams(DT)
    worst = 0.0
    for seed in range(50):
        coupled = CoupledState.at_origin(env).quantized()
        full = coupled.absolute()
        r1, r2 = np.random.default_rng(seed), np.random.default_rng(seed)
        for _ in range(100):
            full = step_full(full, params, LJ, r1)
            coupled = step_coupled(coupled, params, LJ, r2)
            back = coupled_from_absolute(full)
            worst = max(worst, float(np.max(np.abs(back.environment.positions - coupled.environment.positions))),
                        float(np.max(np.abs(back.xi - coupled.xi))))
    passed = worst == 0.0 and clock.ok
    record_acceptance(2, "frame equivalence", passed, f"n={env.n} max discrepancy={worst} t={clock.elapsed:.0f}s")
    assert passed


# -- 3 ---------------------------------------------------------------------


def _poisson_p(counts, mean):
    lo, hi = int(stats.poisson.ppf(0.005, mean)), int(stats.poisson.ppf(0.995, mean))
    ks = np.arange(lo, hi + 1)
    obs = np.array([np.sum(counts < lo)] + [np.sum(counts == k) for k in ks] + [np.sum(counts > hi)])
    p = np.concatenate([[stats.poisson.cdf(lo - 1, mean)], stats.poisson.pmf(ks, mean), [stats.poisson.sf(hi, mean)]])
    return stats.chisquare(obs, p * len(counts)).pvalue


def _hand_states():
    return [
        Configuration([[1.2, 0.3]], BOX),
        Configuration([[1.2, 0.3], [-0.4, 1.5]], BOX),
        Configuration([[1.2, 0.3], [-0.4, 1.5], [2.0, -1.1]], BOX),
        Configuration([[1.0, 0.0], [2.1, 0.0], [0.0, -1.3], [-1.1, -1.2]], BOX),
    ]


def test_03_gcmc_correctness():
    clock = Clock(60)
    ideal = sample_chain(GcmcParams(0.3), FREE, BOX, 3000, thin_sweeps=10, burn_in_sweeps=50,
                         rng=np.random.default_rng(301))
    p_poisson = _poisson_p(ideal.counts, 0.3 * BOX.volume)

    lg = LatticeGas(activity=0.8, field=(0.3, -0.2), coupling=((0.0, 0.7), (0.7, 0.0)))
    run = lg.run(400_000, np.random.default_rng(302))
    exact = lg.exact_distribution()
    z_toy = []
    for k, s in enumerate(run["states"]):
        ind = (run["trace"] == k).astype(float)
        m, se = est.batch_means_se(ind, 50)
        z_toy.append(abs(m - exact[s]) / se)

    worst_rel = 0.0
    for pot in (LJ, smooth_bump(2.0, 1.5, 2)):
        for mix in ((1 / 3, 1 / 3, 1 / 3), (0.5, 0.2, 0.3)):
            params = GcmcParams(0.7, move_mix=mix, displacement_scale=0.4)
            for c in _hand_states():
                for i in range(c.n):
                    smaller = c.remove(i)
                    a = log_target(c, pot, params) + math.log(transition_density(c, DEATH, pot, params, i=i))
                    b = log_target(smaller, pot, params) + math.log(
                        transition_density(smaller, BIRTH, pot, params, x=c.positions[i]))
                    worst_rel = max(worst_rel, abs(math.expm1(a - b)))
                y = c.positions[0] + np.array([0.3, 0.25])
                moved = c.with_positions(np.vstack([y, c.positions[1:]]))
                a = log_target(c, pot, params) + math.log(transition_density(c, DISPLACE, pot, params, i=0, x=y))
                b = log_target(moved, pot, params) + math.log(
                    transition_density(moved, DISPLACE, pot, params, i=0, x=c.positions[0]))
                worst_rel = max(worst_rel, abs(math.expm1(a - b)))

    passed = p_poisson > 0.01 and max(z_toy) < 3 and worst_rel < 1e-12 and clock.ok
    record_acceptance(3, "GCMC correctness", passed,
                      f"poisson p={p_poisson:.3f} toy max z={max(z_toy):.2f} balance rel={worst_rel:.1e} "
                      f"t={clock.elapsed:.0f}s")
    assert passed


# -- 4 and 5 share one long chain --------------------------------------------


@pytest.fixture(scope="module")
def long_chain():
    t0 = time.perf_counter()
    res = sample_chain(GcmcParams(Z_LJ), LJ, BOX, 20_000, thin_sweeps=10, burn_in_sweeps=200,
                       rng=np.random.default_rng(401))
    return res.samples, time.perf_counter() - t0


def _fields():
    b = fn.Bump((0.3, 0.0), 3.0)
    return [
        fn.DirectionField(b, (1.0, 0.3)),
        fn.DirectionField(fn.Bump((-1.0, 0.5), 2.5), (0.0, 1.0)),
        fn.RadialField(fn.Bump((0.0, 0.0), 3.5), (0.0, 0.0)),
        fn.RadialField(fn.gaussian_clipped((0.5, 0.5), 1.0, 3.0), (1.0, 0.0)),
        fn.DirectionField(fn.PlateauBox(1.5, 1.0, (0.0, 0.5)), (-0.6, 0.8)),
    ]


def _cylinders():
    return [
        fn.CylinderFunction(fn.sine_outer([1.0, 0.5]), (fn.Bump((0.5, 0.0), 2.5), fn.gaussian_clipped((-1, 1), 1.0, 3.0))),
        fn.CylinderFunction(fn.tanh_outer([0.3]), (fn.PlateauBox(1.5, 1.0, (0.0, 0.5)),)),
        fn.CylinderFunction(fn.quadratic_outer([[0.2, 0.05], [0.05, 0.1]]),
                            (fn.Bump((0.0, 0.0), 2.0), fn.SmoothCoordinate(0, 1.5, 1.0, (0.0, 0.0)))),
        fn.CylinderFunction(fn.ratio_outer(2.0), (fn.Bump((1.0, -1.0), 2.0), fn.PlateauBox(1.0, 1.0, (0.0, 0.0)))),
        fn.CylinderFunction(fn.linear_outer([1.0, -0.5]),
                            (fn.SmoothCoordinate(1, 1.0, 1.5, (0.5, 0.0)), fn.gaussian_clipped((0.0, -1.0), 0.8, 2.5))),
    ]


def test_04_integration_by_parts(long_chain):
    samples, t_chain = long_chain
    clock = Clock(300 - t_chain)
    Fs, vs = _cylinders(), _fields()
    r1 = [est.ibp_check(Fs[k], vs[k], samples, LJ) for k in range(5)]
    r2 = [est.ibp2_check(Fs[k], Fs[(k + 1) % 5], samples, LJ) for k in range(5)]
    z = [float(np.max(np.abs(np.asarray(r.estimate) / r.standard_error))) for r in r1 + r2]
    passed = all(r.passed for r in r1 + r2) and len(samples) >= 20_000 and clock.ok
    record_acceptance(4, "IBP-1 and IBP-2", passed,
                      f"samples={len(samples)} |z| ibp1={_fmt(z[:5])} ibp2={_fmt(z[5:])} "
                      f"t={clock.elapsed + t_chain:.0f}s")
    assert passed


def test_05_generator_consistency(long_chain):
    samples, t_chain = long_chain
    clock = Clock(300)
    Fs = _cylinders()
    sym = [est.generator_symmetry_check(Fs[k], Fs[(k + 2) % 5], samples, LJ) for k in range(5)]
    F = Fs[0]
    f = fn.Bump((0.2, 0.0), 1.0)
    configs = [Configuration([[1.2, 0.3]], BOX)] + [samples[k] for k in (0, 5000, 10000)]
    fk = []
    for k, c in enumerate(configs):
        fk.append(est.feynman_kac_check(F, c, LJ, delta=1e-5, draws=20000, seed=500 + k))
        fk.append(est.feynman_kac_check(F, c, LJ, delta=1e-5, draws=20000, seed=600 + k, f=f,
                                        xi=np.array([0.15, -0.1])))
    passed = all(r.passed for r in sym + fk) and clock.ok
    zs = [abs(float(r.estimate)) / float(r.standard_error) for r in sym]
    fk_ok = sum(r.passed for r in fk)
    record_acceptance(5, "generator consistency", passed,
                      f"dirichlet |z|={_fmt(zs)} feynman-kac {fk_ok}/{len(fk)} t={clock.elapsed:.0f}s")
    assert passed


# -- 6 ---------------------------------------------------------------------


def test_06_mean_forward_velocity():
    clock = Clock(300)
    gammas = sample_independent(GcmcParams(Z_LJ), LJ, BOX, 10, 200, seed_base=601)
    reps = [est.mean_forward_velocity(g, LJ, ensemble_size=500, params=IntegratorParams(DT), seed=610 + k)
            for k, g in enumerate(gammas)]
    z = [float(np.max(np.abs(r.estimate - r.details["target"]) / r.standard_error)) for r in reps]
    passed = all(r.passed for r in reps) and clock.ok
    record_acceptance(6, "mean forward velocity", passed,
                      f"{sum(r.passed for r in reps)}/10 max |z| per config={_fmt(z)} t={clock.elapsed:.0f}s")
    assert passed


# -- 7 ---------------------------------------------------------------------


def test_07_displacement_reconstruction():
    clock = Clock(600)
    init = sample_independent(GcmcParams(0.3), FREE, BOX, 400, 30, seed_base=701)
    schedules = [fn.averaging_schedule(FREE, n, 0.005) for n in (1.0, 2.0, 3.0)]
    acc = est.ReconstructionAccumulator(0, schedules, FREE, DT)
    simulate_ensemble(equilibrium_states(init), 0.5, IntegratorParams(DT, record_stride=10**9, series_stride=100),
                      FREE, seed_base=702, observers=[acc])
    sup, ratio = acc.report(3.0)
    passed = sup.passed and ratio.passed and clock.ok
    record_acceptance(7, "displacement reconstruction", passed,
                      f"sup={_fmt(sup.estimate)}+-{_fmt(sup.standard_error)} res2/qv={_fmt(ratio.estimate)} "
                      f"t={clock.elapsed:.0f}s")
    assert passed


# -- 8 ---------------------------------------------------------------------


def _lattice_start(n=30):
    g = np.array([(i, j) for i in range(6) for j in range(6)], float) * (10 / 6) - 5 + 10 / 12
    g = g[np.argsort(np.sum(g**2, axis=1))][1 : n + 1]
    return Configuration(g, BOX)


def _cluster_start(n=30):
    # triangular patch around the box corner, as far from the tagged particle as possible
    pts = np.array([[i * 1.12 + 0.56 * j, j * 1.12 * math.sqrt(3) / 2] for i in range(-5, 6) for j in range(-5, 6)])
    pts = pts[np.argsort(np.sum(pts**2, axis=1))][:n] + 5.0
    return Configuration(pts, BOX)


def test_08_stationarity_and_ergodicity():
    clock = Clock(600)
    obs = [est.neighbor_count(1.5), est.subbox_count(2.5), est.subbox_count(1.5), est.field_energy(LJ),
           est.linear_observable(fn.Bump((1.0, 1.0), 2.0))]
    init = sample_independent(GcmcParams(Z_LJ), LJ, BOX, 200, 200, seed_base=801)
    trajs = simulate_ensemble(equilibrium_states(init), 1.0, IntegratorParams(DT, record_stride=10_000), LJ,
                              seed_base=802)
    stat = est.stationarity_check([t.snapshots[0][1] for t in trajs], [t.snapshots[-1][1] for t in trajs], obs)

    # dispersed starts: a loose lattice and a dense cluster, 50 replicas each
    averages = []
    for k, start in enumerate((_lattice_start(), _cluster_start())):
        ob = est.TimeAverageObserver(obs[:4], start_step=50_000, stride=100)
        simulate_ensemble([CoupledState.at_origin(start)] * 50, 15.0,
                          IntegratorParams(DT, record_stride=10**9, series_stride=10**9), LJ,
                          seed_base=810 + k, observers=[ob])
        averages.append(ob.time_averages())
    erg = est.compare_time_averages(*averages)
    passed = stat.passed and erg.passed and clock.ok
    record_acceptance(8, "stationarity and ergodicity", passed,
                      f"stationarity z={_fmt(stat.estimate / stat.standard_error)} "
                      f"dispersed z={_fmt(erg.estimate / erg.standard_error)} t={clock.elapsed:.0f}s")
    assert passed


# -- 9 ---------------------------------------------------------------------


def test_09_invariance_scaling():
    clock = Clock(900)
    init = sample_independent(GcmcParams(Z_LJ), LJ, BOX, 500, 200, seed_base=901)
    trajs = simulate_ensemble(equilibrium_states(init), 4.0, IntegratorParams(DT, record_stride=10**9, series_stride=100),
                              LJ, seed_base=902)
    D = est.diffusion_matrix(trajs, np.linspace(0.2, 4.0, 20))
    res = est.invariance_scaling_test(trajs, [1.0, 2**-0.5, 0.5], np.linspace(0.0, 1.0, 11), D_result=D)
    by_name = {r.name: r for r in res.reports}
    normal = by_name["scaling.normality_acceptance"]
    r2 = by_name["scaling.linearity_r2"]
    slopes = [r for r in res.reports if r.name.startswith("scaling.slope_vs_D_hat")]
    passed = normal.passed and r2.passed and all(r.passed for r in slopes) and clock.ok
    record_acceptance(9, "invariance-principle scaling", passed,
                      f"D_hat={_fmt(D.D_hat.ravel())} normal={normal.estimate:.3f} R2={r2.estimate:.4f} "
                      f"slope |z| max={max(float(np.max(np.abs(r.estimate / r.standard_error))) for r in slopes):.2f} t={clock.elapsed:.0f}s")
    assert passed


# -- 10 --------------------------------------------------------------------


def test_10_potential_audit():
    clock = Clock(60)
    lines, ok = [], True
    for d in (2, 3):
        pot = lennard_jones(1.0, 1.0, d)
        for p in (2, 4):
            rep = audit_conditions(pot, p)
            good = all(rep.verdict[c] == "pass" for c in ("I", "LR", f"DL{p}"))
            ok &= good
            lines.append(f"d{d}p{p}={'ok' if good else 'bad'}")
    fail_case = audit_conditions(slow_tail_attraction(3), 2)
    ok &= fail_case.verdict["LR"] == "fail"
    passed = ok and clock.ok
    record_acceptance(10, "potential audit", passed,
                      f"{' '.join(lines)} slow-tail LR={fail_case.verdict['LR']} t={clock.elapsed:.1f}s")
    assert passed
