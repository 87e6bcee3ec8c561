"""Statistical checks on GCMC samples and simulated trajectories.

Every check returns an :class:`EstimatorReport` whose pass flag is recomputed
from the stored estimate, standard error and tolerance rule, so a saved
report is its own evidence.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from .configuration import Configuration, TorusBox
from .dynamics import CoupledState, IntegratorParams, coupled_drift, simulate_ensemble
from .functionals import (AveragingSchedule, ConfigurationBatch, CylinderFunction, TestFunction, VectorField,
                          _field_gradients, averaging_batch, batch_directional_gradient, batch_drift_Bv,
                          batch_generator_env, batch_gradients, batch_values, generator_coup, generator_env,
                          gradients, y_tilde)
from .potential import PairPotential

# -- reports -----------------------------------------------------------------


@dataclass(frozen=True)
class ToleranceRule:
    """How a report decides pass/fail.

    kinds:
      ``zscore``       |estimate - target| <= k * se (componentwise)
      ``zscore_plus``  |estimate - target| <= k * se + allowance
      ``min_value``    estimate >= threshold (e.g. p-values, acceptance rates)
      ``max_value``    estimate <= threshold
      ``decreasing``   estimate is a strictly decreasing sequence
    """

    kind: str
    k: float = 3.0
    target: object = 0.0
    threshold: float = 0.0
    allowance: object = 0.0

    def evaluate(self, estimate, se) -> bool:
        est = np.asarray(estimate, float)
        if self.kind == "zscore":
            return bool(np.all(np.abs(est - np.asarray(self.target, float)) <= self.k * np.asarray(se, float)))
        if self.kind == "zscore_plus":
            tol = self.k * np.asarray(se, float) + np.asarray(self.allowance, float)
            return bool(np.all(np.abs(est - np.asarray(self.target, float)) <= tol))
        if self.kind == "min_value":
            return bool(np.all(est >= self.threshold))
        if self.kind == "max_value":
            return bool(np.all(est <= self.threshold))
        if self.kind == "decreasing":
            return bool(np.all(np.diff(est) < 0))
        raise ValueError(f"unknown tolerance kind {self.kind!r}")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "k": self.k, "target": _jsonable(self.target),
                "threshold": self.threshold, "allowance": _jsonable(self.allowance)}


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    return v


@dataclass
class EstimatorReport:
    name: str
    estimate: object
    standard_error: object
    sample_count: int
    tolerance_rule: ToleranceRule
    details: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.tolerance_rule.evaluate(self.estimate, self.standard_error)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "estimate": _jsonable(self.estimate),
            "standard_error": _jsonable(self.standard_error),
            "sample_count": int(self.sample_count),
            "tolerance_rule": self.tolerance_rule.to_dict(),
            "pass": self.passed,
            "details": _jsonable(self.details),
        }

    def rows(self):
        """Flat (estimator, estimate, stderr, pass) rows, one per component."""
        est = np.atleast_1d(np.asarray(self.estimate, float)).ravel()
        se = np.broadcast_to(np.atleast_1d(np.asarray(self.standard_error, float)).ravel(), est.shape) \
            if np.size(self.standard_error) in (1, est.size) else np.full(est.shape, np.nan)
        if est.size == 1:
            return [(self.name, float(est[0]), float(se[0]), self.passed)]
        return [(f"{self.name}[{k}]", float(e), float(s), self.passed) for k, (e, s) in enumerate(zip(est, se))]


class ReportBundle(list):
    """A list of reports that passes when all members pass."""

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self)

    def to_dict(self) -> list:
        return [r.to_dict() for r in self]

    def rows(self):
        return [row for r in self for row in r.rows()]


# -- basic statistics --------------------------------------------------------


def mean_and_se(x, axis=0):
    x = np.asarray(x, float)
    n = x.shape[axis]
    return x.mean(axis=axis), x.std(axis=axis, ddof=1) / math.sqrt(n)


def batch_means_se(x, n_batches: int = 20):
    """Mean and batch-means standard error for a correlated chain (axis 0)."""
    x = np.asarray(x, float)
    n = len(x)
    b = max(2, min(n_batches, n // 2))
    size = n // b
    trimmed = x[: size * b]
    means = trimmed.reshape((b, size) + x.shape[1:]).mean(axis=1)
    return x.mean(axis=0), means.std(axis=0, ddof=1) / math.sqrt(b)


def paired_zscore_report(name: str, samples, correlated: bool = True, k: float = 3.0, details=None) -> EstimatorReport:
    """Test E[samples] = 0 for per-sample differences of the two sides."""
    samples = np.asarray(samples, float)
    mean, se = batch_means_se(samples) if correlated else mean_and_se(samples)
    return EstimatorReport(name, mean, se, len(samples), ToleranceRule("zscore", k=k, target=0.0), details or {})


# -- identity checks on Gibbs samples -----------------------------------------


def _as_batch(samples) -> ConfigurationBatch:
    return samples if isinstance(samples, ConfigurationBatch) else ConfigurationBatch.from_configurations(samples)


def ibp_check(F: CylinderFunction, v: VectorField, samples, potential: PairPotential,
              name: str = "ibp1") -> EstimatorReport:
    """E[grad_v F] + E[F B_v] = 0, with paired per-sample differences.

    ``samples`` is a GCMC chain (list of configurations or a batch); the
    standard error uses batch means.
    """
    batch = _as_batch(samples)
    lhs = batch_directional_gradient(F, v, batch)
    rhs = batch_values(F, batch) * batch_drift_Bv(v, batch, potential)
    rep = paired_zscore_report(name, lhs + rhs)
    rep.details.update({"mean_grad_v_F": float(lhs.mean()), "mean_F_Bv": float(rhs.mean())})
    return rep


def ibp2_check(F: CylinderFunction, G: CylinderFunction, samples, potential: PairPotential,
               name: str = "ibp2") -> EstimatorReport:
    """E[F grad_gamma G] + E[grad_gamma F G] - E[<grad phi> F G] = 0 per component."""
    batch = _as_batch(samples)
    Fv, Gv = batch_values(F, batch), batch_values(G, batch)
    _, gF = batch_gradients(F, batch)
    _, gG = batch_gradients(G, batch)
    field_sum = batch.field_gradients(potential).sum(axis=1)
    vals = Fv[:, None] * gG + gF * Gv[:, None] - field_sum * (Fv * Gv)[:, None]
    return paired_zscore_report(name, vals)


def generator_symmetry_check(F: CylinderFunction, G: CylinderFunction, samples, potential: PairPotential,
                             name: str = "dirichlet") -> EstimatorReport:
    """E[-L_env F G] = E[(grad F, grad G) + (grad_gamma F, grad_gamma G)]."""
    batch = _as_batch(samples)
    lhs = -batch_generator_env(F, batch, potential) * batch_values(G, batch)
    pF, aF = batch_gradients(F, batch)
    pG, aG = batch_gradients(G, batch)
    rhs = np.sum(pF * pG, axis=(1, 2)) + np.sum(aF * aG, axis=1)
    rep = paired_zscore_report(name, lhs - rhs)
    rep.details.update({"mean_lhs": float(lhs.mean()), "mean_rhs": float(rhs.mean())})
    return rep


def bv_mean_check(v: VectorField, samples, potential: PairPotential) -> EstimatorReport:
    """E[B_v] = 0, the F = 1 case of the first identity."""
    return paired_zscore_report("mean_Bv", batch_drift_Bv(v, _as_batch(samples), potential))


# -- short-time oracle for the generators --------------------------------------


def _values_on_batch(F: CylinderFunction, pos: np.ndarray) -> np.ndarray:
    stats_ = np.stack([np.sum(f.value(pos), axis=-1) for f in F.inner], axis=-1)
    return np.array([F.outer.value(t) for t in stats_])


def _grad_on_batch(F: CylinderFunction, config: Configuration):
    per, _ = gradients(F, config)
    return per


def feynman_kac_check(F: CylinderFunction, config: Configuration, potential: PairPotential, delta: float = 1e-4,
                      draws: int = 20000, seed: int = 0, f: TestFunction | None = None, xi=None,
                      name: str = "feynman_kac") -> EstimatorReport:
    """Compare the generator formula with (E[F(state_delta)] - F(state_0)) / delta.

    One Euler step of size h in {delta, 2 delta, 4 delta} with common Gaussian
    draws; the mean-zero first-order noise term is subtracted as a control
    variate and the finite-h drifts are Richardson-extrapolated.  With ``f``
    given the coupled generator on f(xi) F(gamma) is checked, otherwise the
    environment generator.
    """
    box = config.box
    d = box.dimension
    n = config.n
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((draws, n + 1, d))
    tag_drift, env_drift = coupled_drift(config, potential)
    y0 = config.positions
    xi0 = np.zeros(d) if xi is None else np.asarray(xi, float)
    per = _grad_on_batch(F, config) if n else np.zeros((0, d))
    F0 = F.value(config)
    if f is not None:
        fx = f.value(xi0[None, :])[0]
        fg = f.gradient(xi0[None, :])[0]
        base = fx * F0
        target = generator_coup(f, F, xi0, config, potential)
    else:
        base = F0
        target = generator_env(F, config, potential)

    def drift_estimates(h):
        s = math.sqrt(2.0 * h)
        noise_env = s * (z[:, 1:, :] - z[:, :1, :])
        y = y0[None] + env_drift[None] * h + noise_env
        y = box.wrap(y)
        Fv = _values_on_batch(F, y) if n else np.full(draws, F0)
        cv = np.einsum("nd,knd->k", per, noise_env) if n else np.zeros(draws)
        if f is None:
            return (Fv - base - cv) / h
        noise_tag = s * z[:, 0, :]
        xi = xi0[None] + tag_drift * h + noise_tag
        fv = f.value(xi)
        cv_full = fx * cv + F0 * (noise_tag @ fg)
        return (fv * Fv - base - cv_full) / h

    D1, D2, D4 = (drift_estimates(h) for h in (delta, 2 * delta, 4 * delta))
    R1 = 2 * D1 - D2  # per-draw Richardson estimate
    R2 = 2 * D2 - D4
    est, se = mean_and_se(R1)
    allowance = abs(float(R1.mean() - R2.mean()))
    rule = ToleranceRule("zscore_plus", k=3.0, target=target, allowance=allowance)
    return EstimatorReport(name, float(est), float(se), draws, rule,
                           {"generator": float(target), "drift_h": float(D1.mean()), "drift_2h": float(D2.mean()),
                            "richardson_gap": allowance, "h": delta})


# -- mean forward velocity ----------------------------------------------------


def _resolving_dt(gamma0: Configuration, potential: PairPotential, dt: float, sigmas: float = 5.0) -> float:
    """Largest step <= dt with sigmas * sqrt(4 * 8 dt) below the distance from
    any tagged-environment pair to a force jump at the cutoff."""
    if not potential.is_truncated or gamma0.n == 0:
        return dt
    r_c = potential.cutoff_radius
    if float(np.abs(potential.radial_derivative(r_c))) < 1e-12:
        return dt
    gap = float(np.min(np.abs(np.linalg.norm(gamma0.positions, axis=1) - r_c)))
    return float(max(min(dt, gap**2 / (32.0 * sigmas**2)), 1e-12))


def mean_forward_velocity(gamma0: Configuration, potential: PairPotential, delta_grid=None,
                          ensemble_size: int = 200, params: IntegratorParams | None = None,
                          seed: int = 0, name: str = "mean_forward_velocity") -> EstimatorReport:
    """(1/delta) E[X_delta | gamma0] extrapolated linearly to delta = 0.

    X_delta is the drift integral plus the tagged noise, which has mean zero,
    so each replica contributes only its drift integral.  That integral is
    taken with the trapezoid rule along the path: the left-point sum would
    carry an O(dt) offset that a linear fit in delta cannot remove.

    The default grid is (2, 4, 8) dt since close neighbours of the tagged
    particle relax within ~1e-3.  With a truncated potential whose force
    jumps at the cutoff, dt is first shrunk until the relative noise over the
    longest delta stays well inside the gap between the nearest neighbour
    distance and the cutoff; otherwise the jump enters at a rate that is not
    linear in delta and the extrapolation misses the limit.
    """
    params = params or IntegratorParams(dt=1e-4)
    if delta_grid is None:
        dt = _resolving_dt(gamma0, potential, params.dt)
        params = replace(params, dt=dt)
        delta_grid = (2 * dt, 4 * dt, 8 * dt)
    deltas = np.sort(np.asarray(delta_grid, float))
    if np.any(deltas < params.dt * (1 - 1e-9)):
        raise ValueError("every delta must be >= dt")
    dt = params.dt
    steps = np.rint(deltas / dt).astype(int)
    run = IntegratorParams(dt=dt, scheme=params.scheme, force_cap=params.force_cap,
                           record_stride=10**9, seed=seed, series_stride=1)
    start = CoupledState.at_origin(gamma0)
    traj = simulate_ensemble([start] * ensemble_size, float(steps[-1] + 1) * dt, run, potential, seed_base=seed)
    C = np.stack([t.compensator for t in traj])  # (K, steps+2, d), left-point sums
    a = np.diff(C, axis=1) / dt  # drift at each grid time
    trap = np.stack([(C[:, s] + 0.5 * (a[:, s] - a[:, 0]) * dt) / (s * dt) for s in steps], axis=1)
    d1, d2 = deltas[0], deltas[1]
    ext = (d2 * trap[:, 0] - d1 * trap[:, 1]) / (d2 - d1)
    v = trap
    est, se = mean_and_se(ext)
    target = _field_gradients(gamma0, potential).sum(axis=0)
    rule = ToleranceRule("zscore", k=3.0, target=target)
    return EstimatorReport(name, est, se, ensemble_size, rule,
                           {"target": target, "per_delta": v.mean(axis=0), "deltas": deltas, "dt": dt,
                            "cap_events": int(sum(t.cap_event_count for t in traj))})


# -- martingale diagnostics ---------------------------------------------------


def martingale_diagnostics(trajectories, alpha: float = 0.01, normality_points: int = 20) -> ReportBundle:
    """M_t = X_t - int_0^t <grad phi, gamma_s> ds: mean at T, QV slope per
    coordinate, cross QV, and normality of increments on a coarse grid."""
    if not trajectories:
        raise ValueError("no trajectories")
    for t in trajectories:
        if t.compensator is None or len(t.compensator) != len(t.displacement):
            raise ValueError("trajectory lacks compensator accumulators")
    M = np.stack([t.martingale for t in trajectories])  # (K, n, d)
    times = trajectories[0].times
    T = times[-1]
    if T <= 0:
        raise ValueError("trajectories have zero length")
    K, _, d = M.shape
    dM = np.diff(M, axis=1)
    qv = np.einsum("knd,kne->kde", dM, dM) / T  # (K, d, d)
    mean_T, se_T = mean_and_se(M[:, -1])
    qv_diag, qv_diag_se = mean_and_se(np.diagonal(qv, axis1=1, axis2=2))
    iu = np.triu_indices(d, 1)
    cross = qv[:, iu[0], iu[1]] if d > 1 else np.zeros((K, 1))
    cross_m, cross_se = mean_and_se(cross)
    # normality of coarse increments, standardized by the known variance 2 dt
    idx = np.linspace(0, len(times) - 1, normality_points + 1).round().astype(int)
    inc = np.diff(M[:, idx], axis=1)
    dts = np.diff(times[idx])
    zs = (inc / np.sqrt(2.0 * dts)[None, :, None]).ravel()
    p = float(stats.kstest(zs, "norm").pvalue)
    return ReportBundle([
        EstimatorReport("martingale.mean_T", mean_T, se_T, K, ToleranceRule("zscore", target=0.0)),
        EstimatorReport("martingale.qv_slope", qv_diag, qv_diag_se, K, ToleranceRule("zscore", target=2.0)),
        EstimatorReport("martingale.cross_qv", cross_m, cross_se, K, ToleranceRule("zscore", target=0.0)),
        EstimatorReport("martingale.normality_p", p, 0.0, zs.size, ToleranceRule("min_value", threshold=alpha),
                        {"statistic": "Kolmogorov-Smirnov vs N(0,1) of M increments / sqrt(2 dt)"}),
    ])


# -- displacement reconstruction ---------------------------------------------

SHELL_RULES = ("step", "left")


class ReconstructionAccumulator:
    """Streaming evaluation of

        eta_t = -int_0^t H dF_n^delta + int_0^t H Y~_i^n ds

    at integrator resolution, for several schedules at once, together with
    the paired residual eta_t - (X_t - X_0), its running sup and the QV bound
    2 int H [c/(r n^d + c)^2 + (c/(r n^d + c) - 1)^2] ds (c = <c_n^0, gamma>).

    ``shell_rule`` controls the integrand H on a step [t, t+dt]: ``"left"``
    uses H(gamma_t); ``"step"`` additionally requires H(gamma_{t+dt}) = 1 and
    no particle entering or leaving (-n, n)^d during the step, which keeps
    particles that jump across a thin shell from being missed.

    Use as an observer of :func:`simulate_ensemble`, or feed configurations
    with :meth:`update_configurations`.
    """

    def __init__(self, axis: int, schedules: Sequence[AveragingSchedule], potential: PairPotential, dt: float,
                 shell_rule: str = "step"):
        if shell_rule not in SHELL_RULES:
            raise ValueError(f"shell_rule must be one of {SHELL_RULES}")
        self.axis = axis
        self.schedules = list(schedules)
        self.potential = potential
        self.dt = dt
        self.shell_rule = shell_rule
        self._prev = None
        self.eta = None
        self.sup = None
        self.qv = None
        self.h_time = None
        self.residual = None
        self.x0 = None
        self.steps = 0

    def _ytilde(self, sched, rel, mask, box):
        if self.potential.is_zero:
            return np.zeros(len(rel))
        out = np.empty(len(rel))
        for m in range(len(rel)):
            out[m] = y_tilde(self.axis, sched, Configuration(rel[m][mask[m]], box), self.potential)
        return out

    def update(self, rel: np.ndarray, mask: np.ndarray, X: np.ndarray, box: TorusBox) -> None:
        """Consume the state at the next grid time.  ``X`` is the tagged
        displacement component, shape (M,)."""
        cur = []
        for s in self.schedules:
            s.check_box(box)
            F, H, inside, c0 = averaging_batch(self.axis, s, rel, mask)
            cur.append((F, H, inside, c0, self._ytilde(s, rel, mask, box)))
        M, S = len(rel), len(self.schedules)
        if self._prev is None:
            self.eta = np.zeros((S, M))
            self.sup = np.zeros((S, M))
            self.qv = np.zeros((S, M))
            self.h_time = np.zeros((S, M))
            self.residual = np.zeros((S, M))
            self.x0 = np.array(X, float)
        else:
            for k, s in enumerate(self.schedules):
                F0, H0, in0, c0, Y0 = self._prev[k]
                F1, H1, in1, _, _ = cur[k]
                H = H0.copy()
                if self.shell_rule == "step":
                    H &= H1 & ~np.any(in0 != in1, axis=1)
                Hf = H.astype(float)
                self.eta[k] += -Hf * (F1 - F0) + Hf * Y0 * self.dt
                norm = s.offset + c0
                self.qv[k] += 2.0 * Hf * (c0 / norm**2 + (c0 / norm - 1.0) ** 2) * self.dt
                self.h_time[k] += Hf * self.dt
            self.residual = self.eta - (np.asarray(X, float) - self.x0)[None, :]
            np.maximum(self.sup, np.abs(self.residual), out=self.sup)
            self.steps += 1
        self._prev = cur

    def __call__(self, view) -> None:
        self.update(view.relative(), view.environment_mask(), view.displacement[:, self.axis], view.box)

    def update_configurations(self, configs: Sequence[Configuration], X) -> None:
        box = configs[0].box
        N = max(c.n for c in configs)
        rel = np.zeros((len(configs), N, box.dimension))
        mask = np.zeros((len(configs), N), bool)
        for m, c in enumerate(configs):
            rel[m, : c.n] = c.positions
            mask[m, : c.n] = True
        self.update(rel, mask, np.asarray(X, float), box)

    def report(self, k_bound: float = 3.0) -> ReportBundle:
        if self.eta is None:
            raise ValueError("no data accumulated")
        M = self.eta.shape[1]
        sup_m, sup_se = mean_and_se(self.sup, axis=1)
        r2 = self.residual**2
        r2_m, r2_se = mean_and_se(r2, axis=1)
        qv_m = self.qv.mean(axis=1)
        ns = [s.n for s in self.schedules]
        diffs = np.diff(self.sup, axis=0)
        dm, dse = mean_and_se(diffs, axis=1) if len(ns) > 1 else (np.zeros(0), np.zeros(0))
        details = {
            "n_grid": ns,
            "delta": [s.delta for s in self.schedules],
            "r_n": [s.r for s in self.schedules],
            "shell_rule": self.shell_rule,
            "mean_sup_error": sup_m,
            "paired_sup_difference": dm,
            "paired_sup_difference_z": dm / np.where(dse > 0, dse, np.inf),
            "mean_residual_sq": r2_m,
            "mean_qv_bound": qv_m,
            "h_fraction": self.h_time.mean(axis=1) / max(self.steps * self.dt, 1e-300),
        }
        ratio = r2_m / np.where(qv_m > 0, qv_m, np.inf)
        return ReportBundle([
            EstimatorReport("reconstruction.sup_error", sup_m, sup_se, M, ToleranceRule("decreasing"), details),
            EstimatorReport("reconstruction.residual_sq_over_qv_bound", ratio, 0.0, M,
                            ToleranceRule("max_value", threshold=k_bound),
                            {"mean_residual_sq": r2_m, "residual_sq_se": r2_se, "mean_qv_bound": qv_m}),
        ])


def reconstruct_displacement(snapshots: Sequence[Configuration], displacement, axis: int,
                             schedules: Sequence[AveragingSchedule], potential: PairPotential, dt: float,
                             shell_rule: str = "step"):
    """Reconstruct one path from environments recorded at every integrator step.

    Returns ``(eta, residual, report)``; ``eta`` and ``residual`` have shape
    (len(schedules), len(snapshots)).
    """
    displacement = np.asarray(displacement, float)
    if len(snapshots) != len(displacement):
        raise ValueError("need one displacement value per snapshot")
    acc = ReconstructionAccumulator(axis, schedules, potential, dt, shell_rule)
    S = len(schedules)
    eta = np.zeros((S, len(snapshots)))
    residual = np.zeros((S, len(snapshots)))
    for k, (c, x) in enumerate(zip(snapshots, displacement)):
        acc.update_configurations([c], np.atleast_1d(x[axis] if np.ndim(x) else x))
        eta[:, k] = acc.eta[:, 0]
        residual[:, k] = acc.residual[:, 0]
    return eta, residual, acc


# -- ergodicity and stationarity -----------------------------------------------


def subbox_count(half_width: float):
    def obs(rel, mask):
        return np.sum(np.all(np.abs(rel) <= half_width, axis=-1) & mask, axis=-1).astype(float)
    obs.__name__ = f"subbox_count({half_width})"
    return obs


def neighbor_count(radius: float):
    """Environment particles within ``radius`` of the tagged particle."""
    def obs(rel, mask):
        return np.sum((np.sum(rel * rel, axis=-1) < radius * radius) & mask, axis=-1).astype(float)
    obs.__name__ = f"neighbor_count({radius})"
    return obs


def field_energy(potential: PairPotential):
    def obs(rel, mask):
        e = np.where(mask, potential.evaluate(np.where(mask[..., None], rel, 10 * potential.sigma + 1e3)), 0.0)
        return e.sum(axis=-1)
    obs.__name__ = "field_energy"
    return obs


def linear_observable(f: TestFunction):
    def obs(rel, mask):
        return np.where(mask, f.value(rel), 0.0).sum(axis=-1)
    obs.__name__ = f"linear({type(f).__name__})"
    return obs


def constant_observable(c: float):
    def obs(rel, mask):
        return np.full(rel.shape[0], float(c))
    obs.__name__ = f"constant({c})"
    return obs


def configurations_as_batch(configs: Sequence[Configuration]):
    d = configs[0].box.dimension
    N = max(1, max(c.n for c in configs))
    rel = np.zeros((len(configs), N, d))
    mask = np.zeros((len(configs), N), bool)
    for m, c in enumerate(configs):
        rel[m, : c.n] = c.positions
        mask[m, : c.n] = True
    return rel, mask


class TimeAverageObserver:
    """Accumulates time averages of batch observables from ``start_step`` on,
    sampling every ``stride`` steps."""

    def __init__(self, observables: Sequence[Callable], start_step: int = 0, stride: int = 1):
        self.observables = list(observables)
        self.start_step = start_step
        self.stride = stride
        self.samples = []

    def __call__(self, view) -> None:
        if view.step < self.start_step or (view.step - self.start_step) % self.stride:
            return
        rel, mask = view.relative(), view.environment_mask()
        self.samples.append(np.stack([o(rel, mask) for o in self.observables], axis=-1))

    def time_averages(self) -> np.ndarray:
        """(members, observables)."""
        return time_average(np.stack(self.samples, axis=1))


def time_average(series: np.ndarray) -> np.ndarray:
    """Mean over axis 1; a constant series returns its value exactly."""
    series = np.asarray(series, float)
    avg = series.mean(axis=1)
    const = np.all(series == series[:, :1], axis=1)
    return np.where(const, series[:, 0], avg)


def ergodicity_time_average(time_averages, ensemble_values, names=None, ensemble_correlated: bool = True,
                            name: str = "ergodicity.time_vs_ensemble") -> EstimatorReport:
    """Mean of per-trajectory time averages against the Gibbs ensemble mean.

    ``time_averages``: (members, observables); ``ensemble_values``: (samples,
    observables).  Members are independent; GCMC samples use batch means.
    """
    ta = np.atleast_2d(np.asarray(time_averages, float))
    ev = np.asarray(ensemble_values, float)
    ev = ev[:, None] if ev.ndim == 1 else ev
    tm, tse = mean_and_se(ta) if len(ta) > 1 else (ta[0], np.zeros(ta.shape[1]))
    em, ese = batch_means_se(ev) if ensemble_correlated else mean_and_se(ev)
    diff = tm - em
    se = np.sqrt(tse**2 + ese**2)
    return EstimatorReport(name, diff, se, len(ta), ToleranceRule("zscore", target=0.0),
                           {"time_average": tm, "time_average_se": tse, "ensemble_average": em,
                            "ensemble_average_se": ese, "observables": list(names or [])})


def compare_time_averages(a, b, names=None, name: str = "ergodicity.dispersed_starts") -> EstimatorReport:
    """Two independent sets of time averages (members, observables) agree."""
    a = np.atleast_2d(np.asarray(a, float))
    b = np.atleast_2d(np.asarray(b, float))
    am, ase = mean_and_se(a)
    bm, bse = mean_and_se(b)
    return EstimatorReport(name, am - bm, np.sqrt(ase**2 + bse**2), len(a) + len(b), ToleranceRule("zscore", target=0.0),
                           {"start_a": am, "start_b": bm, "observables": list(names or [])})


def stationarity_check(initial: Sequence[Configuration], final: Sequence[Configuration], observables: Sequence[Callable],
                       name: str = "stationarity") -> EstimatorReport:
    """Paired change of observable means between time 0 and time T."""
    r0, m0 = configurations_as_batch(initial)
    r1, m1 = configurations_as_batch(final)
    a = np.stack([o(r0, m0) for o in observables], axis=-1)
    b = np.stack([o(r1, m1) for o in observables], axis=-1)
    diff, se = mean_and_se(b - a)
    return EstimatorReport(name, diff, se, len(initial), ToleranceRule("zscore", target=0.0),
                           {"initial_mean": a.mean(axis=0), "final_mean": b.mean(axis=0),
                            "observables": [getattr(o, "__name__", "obs") for o in observables]})


# -- diffusion matrix and scaling ----------------------------------------------


@dataclass
class ScalingResult:
    D_hat: np.ndarray
    D_se: np.ndarray
    t_grid: np.ndarray
    covariances: np.ndarray  # (len(t_grid), d, d)
    r_squared: float
    epsilon_grid: np.ndarray = field(default_factory=lambda: np.zeros(0))
    scaled_covariances: list = field(default_factory=list)  # per epsilon: increment Cov / dt
    normality_pvalues: list = field(default_factory=list)  # per epsilon: (intervals, d)
    independence_pvalues: list = field(default_factory=list)
    reports: ReportBundle = field(default_factory=ReportBundle)

    @property
    def min_eigenvalue(self) -> float:
        return float(np.min(np.linalg.eigvalsh(self.D_hat)))

    @property
    def passed(self) -> bool:
        return self.reports.passed

    def to_dict(self) -> dict:
        return {
            "D_hat": self.D_hat.tolist(),
            "D_se": self.D_se.tolist(),
            "t_grid": self.t_grid.tolist(),
            "r_squared": self.r_squared,
            "epsilon_grid": np.asarray(self.epsilon_grid).tolist(),
            "reports": self.reports.to_dict(),
        }


def _series_at(trajectories, t_grid):
    times = trajectories[0].times
    idx = np.searchsorted(times, np.asarray(t_grid, float) - 1e-12)
    if np.any(idx >= len(times)) or np.any(np.abs(times[np.minimum(idx, len(times) - 1)] - t_grid) > 1e-9):
        raise ValueError("t_grid points must lie on the recorded time grid within [0, T]")
    return np.stack([t.displacement[idx] for t in trajectories])  # (K, len, d)


def _cov_stack(X):
    """Symmetric sample covariances over axis 0 for every time: (len, d, d)."""
    Xc = X - X.mean(axis=0, keepdims=True)
    return np.einsum("ktd,kte->tde", Xc, Xc) / (len(X) - 1)


def stationary_covariance(trajectories, lags, origin_spacing: float | None = None) -> np.ndarray:
    """Cov(X_t) from increments X_{s+t} - X_s pooled over trajectories and
    time origins s; valid when the environment starts in equilibrium, so
    that increments are stationary.  Returns (len(lags), d, d)."""
    times = trajectories[0].times
    X = np.stack([t.displacement for t in trajectories])  # (K, n, d)
    dt = times[1] - times[0]
    stride = 1 if origin_spacing is None else max(1, int(round(origin_spacing / dt)))
    out = []
    for lag in np.asarray(lags, float):
        L = int(round(lag / dt))
        if L <= 0 or L >= len(times) or abs(times[L] - lag) > 1e-9:
            raise ValueError(f"lag {lag} is not on the recorded grid within [0, T]")
        inc = X[:, L::stride][:, : (len(times) - L + stride - 1) // stride] - X[:, : len(times) - L : stride]
        inc = inc.reshape(-1, X.shape[-1])
        inc = inc - inc.mean(axis=0)
        out.append(inc.T @ inc / (len(inc) - 1))
    return np.array(out)


def _slope_through_origin(t, C):
    t = np.asarray(t, float)
    return np.einsum("t,tde->de", t, C) / np.sum(t * t)


def _r_squared(t, y):
    """R^2 of the ordinary least-squares line y ~ a + b t."""
    t, y = np.asarray(t, float), np.asarray(y, float)
    b, a = np.polyfit(t, y, 1)
    ss_res = np.sum((y - a - b * t) ** 2)
    ss_tot = np.sum((y - y.mean()) ** 2)
    return 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0


def diffusion_matrix(trajectories, t_grid, min_trajectories: int = 10) -> ScalingResult:
    """D_hat = least-squares slope through the origin of Cov(X_t) against t,
    so that the free particle gives 2 I.  Jackknife standard errors."""
    K = len(trajectories)
    if K < min_trajectories:
        raise ValueError(f"diffusion_matrix needs at least {min_trajectories} trajectories, got {K}")
    t_grid = np.asarray(t_grid, float)
    if np.any(t_grid <= 0):
        raise ValueError("t_grid must be positive")
    X = _series_at(trajectories, t_grid)
    C = _cov_stack(X)
    D = _slope_through_origin(t_grid, C)
    D = 0.5 * (D + D.T)
    # leave-one-out covariances from running sums
    S1 = X.sum(axis=0)
    S2 = np.einsum("ktd,kte->tde", X, X)
    jk = np.empty((K,) + D.shape)
    for k in range(K):
        s1 = S1 - X[k]
        s2 = S2 - np.einsum("td,te->tde", X[k], X[k])
        m = s1 / (K - 1)
        Ck = (s2 - (K - 1) * np.einsum("td,te->tde", m, m)) / (K - 2)
        Dk = _slope_through_origin(t_grid, Ck)
        jk[k] = 0.5 * (Dk + Dk.T)
    se = np.sqrt((K - 1) / K * np.sum((jk - jk.mean(axis=0)) ** 2, axis=0))
    d = D.shape[0]
    r2 = min(_r_squared(t_grid, C[:, i, i]) for i in range(d))
    reports = ReportBundle([
        EstimatorReport("diffusion.linearity_r2", r2, 0.0, K, ToleranceRule("min_value", threshold=0.99)),
        EstimatorReport("diffusion.psd_min_eigenvalue", float(np.min(np.linalg.eigvalsh(D))), float(se.max()), K,
                        ToleranceRule("min_value", threshold=-3.0 * float(se.max()))),
    ])
    return ScalingResult(D, se, t_grid, C, r2, reports=reports)


def free_particle_report(result: ScalingResult) -> EstimatorReport:
    d = result.D_hat.shape[0]
    return EstimatorReport("diffusion.free_particle", result.D_hat, result.D_se, 0,
                           ToleranceRule("zscore", target=2.0 * np.eye(d)))


def isotropy_report(result: ScalingResult, trajectories) -> EstimatorReport:
    """D11 - D22 and D12 against 0 with jackknife errors."""
    X = _series_at(trajectories, result.t_grid)
    K = len(X)

    def stat(Xs):
        C = _cov_stack(Xs)
        D = _slope_through_origin(result.t_grid, C)
        return np.array([D[0, 0] - D[1, 1], 0.5 * (D[0, 1] + D[1, 0])])

    full = stat(X)
    jk = np.array([stat(np.delete(X, k, axis=0)) for k in range(K)])
    se = np.sqrt((K - 1) / K * np.sum((jk - jk.mean(axis=0)) ** 2, axis=0))
    return EstimatorReport("diffusion.isotropy", full, se, K, ToleranceRule("zscore", target=0.0))


def invariance_scaling_test(trajectories, epsilon_grid, t_points, D_result: ScalingResult | None = None,
                            alpha: float = 0.01, acceptance: float = 0.95) -> ScalingResult:
    """Scaled paths eps X_{t / eps^2}: normality of increments, independence of
    consecutive increments and increment covariance against D_hat."""
    eps = np.sort(np.asarray(epsilon_grid, float))[::-1]
    t_points = np.asarray(t_points, float)
    T = trajectories[0].times[-1]
    if eps.min() ** -2 * t_points.max() > T + 1e-9:
        raise ValueError("eps^-2 max(t_points) exceeds the simulated horizon")
    real_max = t_points.max() / eps.min() ** 2
    base = D_result or diffusion_matrix(trajectories, np.linspace(real_max / 20, real_max, 20))
    K = len(trajectories)
    d = base.D_hat.shape[0]
    pvals, indep, scov = [], [], []
    reports = ReportBundle()
    for e in eps:
        real = t_points / e**2
        X = _series_at(trajectories, real) if real[0] > 0 else np.concatenate(
            [np.zeros((K, 1, d)), _series_at(trajectories, real[1:])], axis=1)
        Z = e * X
        inc = np.diff(Z, axis=1)  # (K, intervals, d)
        dt = np.diff(t_points)
        p = np.array([[stats.normaltest(inc[:, j, c]).pvalue for c in range(d)] for j in range(inc.shape[1])])
        pvals.append(p)
        if inc.shape[1] > 1:
            r = np.array([[stats.pearsonr(inc[:, j, c], inc[:, j + 1, c]).pvalue for c in range(d)]
                          for j in range(inc.shape[1] - 1)])
        else:
            r = np.ones((0, d))
        indep.append(r)
        incc = inc - inc.mean(axis=0, keepdims=True)
        per_interval = np.einsum("kjd,kje->jde", incc, incc) / (K - 1) / dt[:, None, None]
        scov.append(per_interval.mean(axis=0))
    smallest = eps[-2:] if len(eps) >= 2 else eps
    sel = [k for k, e in enumerate(eps) if e in smallest]
    rate = float(np.mean(np.concatenate([(pvals[k] >= alpha).ravel() for k in sel])))
    reports.append(EstimatorReport("scaling.normality_acceptance", rate, 0.0, K,
                                   ToleranceRule("min_value", threshold=acceptance),
                                   {"epsilons": smallest, "alpha": alpha}))
    ind_all = np.concatenate([indep[k].ravel() for k in sel]) if sel else np.ones(1)
    ind_rate = float(np.mean(ind_all >= alpha)) if ind_all.size else 1.0
    reports.append(EstimatorReport("scaling.independence_acceptance", ind_rate, 0.0, K,
                                   ToleranceRule("min_value", threshold=acceptance)))
    # per-epsilon slope of Cov(eps X_{t/eps^2}) against t, with jackknife errors
    r2s = []
    for e in smallest:
        real = t_points[t_points > 0] / e**2
        Xs = _series_at(trajectories, real)
        C = _cov_stack(Xs)
        slope = _slope_through_origin(real, C)
        slope = 0.5 * (slope + slope.T)
        jk = np.empty((K,) + slope.shape)
        S1, S2 = Xs.sum(axis=0), np.einsum("ktd,kte->tde", Xs, Xs)
        for k in range(K):
            m = (S1 - Xs[k]) / (K - 1)
            Ck = (S2 - np.einsum("td,te->tde", Xs[k], Xs[k]) - (K - 1) * np.einsum("td,te->tde", m, m)) / (K - 2)
            Dk = _slope_through_origin(real, Ck)
            jk[k] = 0.5 * (Dk + Dk.T)
        slope_se = np.sqrt((K - 1) / K * np.sum((jk - jk.mean(axis=0)) ** 2, axis=0))
        comb = np.sqrt(slope_se**2 + base.D_se**2)
        reports.append(EstimatorReport(f"scaling.slope_vs_D_hat[eps={e:.4g}]", slope - base.D_hat, comb, K,
                                       ToleranceRule("zscore", target=0.0), {"slope": slope, "slope_se": slope_se}))
        Cs = stationary_covariance(trajectories, real)
        r2s.append(min(_r_squared(real, Cs[:, i, i]) for i in range(d)))
    r2 = min(r2s)
    reports.append(EstimatorReport("scaling.linearity_r2", r2, 0.0, K, ToleranceRule("min_value", threshold=0.99),
                                   {"per_epsilon": r2s, "covariance": "pooled over time origins"}))
    return ScalingResult(base.D_hat, base.D_se, base.t_grid, base.covariances, r2, eps, scov, pvals, indep, reports)
