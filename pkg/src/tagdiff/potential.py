"""Pair potentials, truncation for the torus, and a numerical auditor for the
admissibility conditions (SS), (LR), (I) and (DL^p).

All potentials here are radial: ``phi(x) = u(|x|_2)``.  The *raw* radial
profile ``u`` is the untruncated interaction on R^d; ``evaluate`` and
``gradient`` act on the truncated-and-shifted version that the simulator uses
when ``cutoff_radius`` is finite.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from scipy import integrate, special

LENNARD_JONES = "lennard_jones"
SMOOTH_BUMP = "smooth_bump"
ZERO = "zero"
KINDS = (LENNARD_JONES, SMOOTH_BUMP, ZERO)

# |x| below CORE_GUARD * sigma is treated as the singularity
CORE_GUARD = 1e-12


class SingularityError(ArithmeticError):
    """Raised when a gradient is requested inside the singular core."""


@dataclass(frozen=True)
class PairPotential:
    """Radial pair potential, optionally truncated at ``cutoff_radius`` and
    shifted by ``shift_constant`` so that it is continuous there.

    ``smooth_bump`` is ``epsilon * exp(1 - 1/(1 - (r/sigma)^2))`` for
    ``r < sigma`` and 0 beyond: bounded, compactly supported, C^infinity.
    """

    kind: str = LENNARD_JONES
    epsilon: float = 1.0
    sigma: float = 1.0
    dimension: int = 3
    cutoff_radius: float = math.inf
    shift_constant: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown potential kind {self.kind!r}; expected one of {KINDS}")
        if self.dimension < 1:
            raise ValueError("dimension must be >= 1")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if not self.cutoff_radius > 0:
            raise ValueError("cutoff_radius must be positive")

    # -- raw radial profile (untruncated) ---------------------------------
    @property
    def is_zero(self) -> bool:
        return self.kind == ZERO or self.epsilon == 0.0

    @property
    def core_radius(self) -> float:
        return CORE_GUARD * self.sigma

    @property
    def is_truncated(self) -> bool:
        return math.isfinite(self.cutoff_radius)

    def radial(self, r):
        """Untruncated profile u(r); +inf inside the core for Lennard-Jones."""
        r = np.asarray(r, dtype=float)
        if self.is_zero:
            return np.zeros_like(r)
        if self.kind == LENNARD_JONES:
            with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
                s6 = (self.sigma / r) ** 6
                out = 4.0 * self.epsilon * (s6 * s6 - s6)
            return np.where(r < self.core_radius, np.inf, out)
        u = r / self.sigma
        with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
            out = self.epsilon * np.exp(1.0 - 1.0 / (1.0 - u * u))
        return np.where(u < 1.0, out, 0.0)

    def radial_derivative(self, r):
        """u'(r) of the untruncated profile."""
        r = np.asarray(r, dtype=float)
        if self.is_zero:
            return np.zeros_like(r)
        if self.kind == LENNARD_JONES:
            with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
                s6 = (self.sigma / r) ** 6
                out = 4.0 * self.epsilon * (-12.0 * s6 * s6 + 6.0 * s6) / r
            return np.where(r < self.core_radius, -np.inf, out)
        u = r / self.sigma
        with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
            w = 1.0 - u * u
            val = self.epsilon * np.exp(1.0 - 1.0 / w)
            out = val * (-2.0 * u / (w * w)) / self.sigma
        return np.where(u < 1.0, out, 0.0)

    def untruncated(self) -> "PairPotential":
        return replace(self, cutoff_radius=math.inf, shift_constant=0.0)

    # -- truncated potential on displacements ------------------------------
    def _check(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim == 0 or x.shape[-1] != self.dimension:
            raise ValueError(
                f"displacement has trailing dimension {x.shape[-1] if x.ndim else 0}, "
                f"potential expects {self.dimension}"
            )
        return x

    def radial_truncated(self, r):
        r = np.asarray(r, dtype=float)
        u = self.radial(r) - self.shift_constant
        return np.where(r < self.cutoff_radius, u, 0.0)

    def gradient_coefficient(self, r2):
        """phi'(r)/r for the truncated potential as a function of r^2, so that
        grad phi(x) = coefficient(|x|^2) * x.  Zero beyond the cutoff."""
        r2 = np.asarray(r2, dtype=float)
        if self.is_zero:
            return np.zeros_like(r2)
        r = np.sqrt(r2)
        with np.errstate(divide="ignore", invalid="ignore"):
            c = self.radial_derivative(r) / r
        return np.where(r < self.cutoff_radius, c, 0.0)

    def evaluate(self, x):
        """phi(x) of the truncated-and-shifted potential; +inf in the core."""
        x = self._check(x)
        r = np.sqrt(np.sum(x * x, axis=-1))
        out = self.radial_truncated(r)
        if self.kind == LENNARD_JONES and not self.is_zero:
            out = np.where(r < self.core_radius, np.inf, out)
        return out[()] if out.ndim == 0 else out

    def gradient(self, x):
        """grad phi(x) of the truncated potential."""
        x = self._check(x)
        r2 = np.sum(x * x, axis=-1)
        if not self.is_zero and np.any(r2 < self.core_radius**2):
            raise SingularityError("gradient evaluated inside the singular core")
        return self.gradient_coefficient(r2)[..., None] * x


def lennard_jones(epsilon=1.0, sigma=1.0, dimension=3, cutoff=None) -> PairPotential:
    pot = PairPotential(LENNARD_JONES, epsilon, sigma, dimension)
    return pot if cutoff is None else truncate_and_shift(pot, cutoff)


def zero_potential(dimension=3) -> PairPotential:
    return PairPotential(ZERO, 0.0, 1.0, dimension)


def smooth_bump(epsilon=1.0, sigma=1.0, dimension=3) -> PairPotential:
    # supported on r < sigma, so the natural cutoff costs no shift
    return PairPotential(SMOOTH_BUMP, epsilon, sigma, dimension, cutoff_radius=float(sigma))


def evaluate(potential: PairPotential, displacement):
    return potential.evaluate(displacement)


def gradient(potential: PairPotential, displacement):
    return potential.gradient(displacement)


def truncate_and_shift(potential: PairPotential, r_c: float) -> PairPotential:
    """phi - phi(r_c) inside r_c, 0 outside.  Idempotent for unchanged r_c."""
    if not r_c > 0:
        raise ValueError("cutoff radius must be positive")
    if potential.kind == LENNARD_JONES and r_c <= potential.core_radius:
        raise ValueError("cutoff radius lies inside the singular core")
    shift = float(potential.radial(r_c)) if not potential.is_zero else 0.0
    return replace(potential, cutoff_radius=float(r_c), shift_constant=shift)


# ---------------------------------------------------------------------------
# Auditing the admissibility conditions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RadialFunction:
    """Ad-hoc radial potential for auditing, e.g. ``u(r) = -(1+r)^-d``."""

    value: Callable
    derivative: Callable
    dimension: int
    sigma: float = 1.0
    is_zero: bool = False

    def radial(self, r):
        return np.asarray(self.value(np.asarray(r, dtype=float)), dtype=float)

    def radial_derivative(self, r):
        return np.asarray(self.derivative(np.asarray(r, dtype=float)), dtype=float)


def slow_tail_attraction(dimension: int) -> RadialFunction:
    """u(r) = -(1+r)^-d: its negative part has no integrable radial envelope."""
    d = dimension
    return RadialFunction(
        value=lambda r: -((1.0 + r) ** (-d)),
        derivative=lambda r: d * (1.0 + r) ** (-d - 1),
        dimension=d,
    )


@dataclass(frozen=True)
class QuadratureParams:
    initial_limit: float = 8.0  # in units of sigma
    converged_rtol: float = 1e-6
    divergence_growth: float = 0.01
    divergence_doublings: int = 8
    max_doublings: int = 40
    quad_limit: int = 200
    envelope_points: int = 2001


@dataclass
class AuditReport:
    dimension: int
    p: float
    integral_I: float
    integral_DL: dict
    psi_tail_integral: float
    lr_envelope_ok: bool
    ss_heuristic_ok: bool
    verdict: dict
    diagnostics: dict = field(default_factory=dict)

    @property
    def required(self) -> tuple:
        return ("I", "LR", "DL1", f"DL{_fmt_p(self.p)}")

    @property
    def passed(self) -> bool:
        return all(self.verdict[k] == "pass" for k in self.required)

    def to_dict(self) -> dict:
        def clean(v):
            if isinstance(v, float) and not math.isfinite(v):
                return "inf" if v > 0 else ("-inf" if v < 0 else "nan")
            if isinstance(v, dict):
                return {str(k): clean(w) for k, w in v.items()}
            if isinstance(v, (list, tuple)):
                return [clean(w) for w in v]
            if isinstance(v, (np.floating, np.integer, np.bool_)):
                return clean(v.item())
            return v

        return clean(
            {
                "dimension": self.dimension,
                "p": self.p,
                "integral_I": self.integral_I,
                "integral_DL": self.integral_DL,
                "psi_tail_integral": self.psi_tail_integral,
                "lr_envelope_ok": self.lr_envelope_ok,
                "ss_heuristic_ok": self.ss_heuristic_ok,
                "verdict": self.verdict,
                "required": list(self.required),
                "passed": self.passed,
                "diagnostics": self.diagnostics,
            }
        )


def _fmt_p(p: float) -> str:
    return str(int(p)) if float(p).is_integer() else str(p)


def sphere_area(d: int) -> float:
    """Surface area of the unit sphere in R^d (2 for d = 1)."""
    return 2.0 * math.pi ** (d / 2) / special.gamma(d / 2)


def _classify(values, q: QuadratureParams) -> str:
    """Apply the doubling rule to a sequence of partial integrals."""
    rel = []
    for a, b in zip(values[:-1], values[1:]):
        if not (math.isfinite(a) and math.isfinite(b)):
            return "divergent"
        change = abs(b - a)
        scale = max(abs(a), abs(b))
        rel.append(0.0 if change == 0.0 else (change / scale if scale > 0 else math.inf))
    for i in range(1, len(rel)):
        if rel[i - 1] < q.converged_rtol and rel[i] < q.converged_rtol:
            return "convergent"
    k = q.divergence_doublings
    for i in range(k - 1, len(rel)):
        if all(v > q.divergence_growth for v in rel[i - k + 1 : i + 1]):
            return "divergent"
    return "undecided"


def _doubling_integral(piece: Callable[[float, float], float], r0: float, q: QuadratureParams):
    """Integrate over [0, R] for R = r0 * 2^k until the doubling rule decides."""
    total = piece(0.0, r0)
    values = [total]
    upper = r0
    status = "undecided"
    for _ in range(q.max_doublings):
        total += piece(upper, 2.0 * upper)
        upper *= 2.0
        values.append(total)
        status = _classify(values, q)
        if status != "undecided":
            break
    return total, status, upper


def _quad_pieces(f: Callable[[float], float], q: QuadratureParams, sigma: float):
    def piece(a, b):
        # geometric sub-breaks resolve the core and the well of the potential
        pts = [a]
        lo = max(a, 1e-3 * sigma)
        if lo < b:
            pts.extend(np.geomspace(lo, b, 12)[int(lo == a):].tolist())
        else:
            pts.append(b)
        total = 0.0
        for u, v in zip(pts[:-1], pts[1:]):
            if v > u:
                val, _ = integrate.quad(f, u, v, limit=q.quad_limit, epsabs=0.0, epsrel=1e-11)
                total += val
        return total

    return piece


def _radial_integrand(pot, d, kind: str, p: float = 1.0):
    def f(r):
        with np.errstate(all="ignore"):
            u = float(pot.radial(r))
            if kind == "I":
                val = abs(-math.expm1(-u)) if math.isfinite(u) else 1.0
            else:
                du = abs(float(pot.radial_derivative(r)))
                if not math.isfinite(u) or du == 0.0:
                    val = 0.0
                else:
                    val = math.exp(p * math.log(du) - u)
        return val * r ** (d - 1)

    return f


def _envelope_integral(pot, d, q: QuadratureParams, sigma: float):
    """Integral of the least decreasing majorant psi of phi^- (times t^{d-1})."""
    r0 = q.initial_limit * sigma
    n = q.envelope_points

    def grid(a, b):
        if a == 0.0:
            head = np.linspace(0.0, 1e-3 * sigma, 8)[:-1]
            return np.concatenate([head, np.geomspace(1e-3 * sigma, b, n)])
        return np.geomspace(a, b, n)

    edges = [0.0, r0]
    values = []
    status = "undecided"
    for _ in range(q.max_doublings + 1):
        grids = [grid(a, b) for a, b in zip(edges[:-1], edges[1:])]
        with np.errstate(all="ignore"):
            neg = [np.maximum(-np.nan_to_num(pot.radial(g), nan=0.0, posinf=0.0), 0.0) for g in grids]
        # running sup from the right, across pieces
        psi = []
        tail_max = 0.0
        for v in reversed(neg):
            run = np.maximum.accumulate(v[::-1])[::-1]
            run = np.maximum(run, tail_max)
            tail_max = run[0]
            psi.append(run)
        psi.reverse()
        total = 0.0
        for g, s in zip(grids, psi):
            total += float(np.trapezoid(s * g ** (d - 1), g))
        values.append(total)
        if len(values) >= 2:
            status = _classify(values, q)
            if status != "undecided":
                break
        edges.append(2.0 * edges[-1])
    return values[-1], status, edges[-1]


def _core_divergence(pot, d, q: QuadratureParams, sigma: float):
    """Sufficient condition for (SS): the decreasing minorant
    theta(s) = min_{u<=s} u(phi) has a non-integrable singularity at 0."""
    r = 0.5 * sigma
    values = []
    lo = r
    status = "undecided"
    for _ in range(q.max_doublings + 1):
        lo_next = lo / 2.0
        g = np.geomspace(lo_next, r, 400 + 40 * len(values))
        with np.errstate(all="ignore"):
            u = pot.radial(g)
        theta = np.minimum.accumulate(np.nan_to_num(u, posinf=np.finfo(float).max / 1e10))
        # integrate theta s^{d-1} on [lo_next, r] in log coordinates
        y = theta * g**d
        values.append(float(np.trapezoid(y, np.log(g))))
        lo = lo_next
        if len(values) >= 2:
            status = _classify(values, q)
            if status != "undecided":
                break
    return values[-1], status


def audit_conditions(potential, p: float = 2.0, quadrature: QuadratureParams | None = None) -> AuditReport:
    """Numerically audit (I), (DL^1), (DL^p), (LR) and the hard-core sufficient
    condition for (SS) on the untruncated radial profile of ``potential``."""
    if p < 2:
        raise ValueError("p must be >= 2")
    q = quadrature or QuadratureParams()
    d = potential.dimension
    sigma = getattr(potential, "sigma", 1.0)
    omega = sphere_area(d)
    if isinstance(potential, PairPotential):
        potential = potential.untruncated()
    diagnostics: dict = {}
    verdict: dict = {}

    def run(kind, power=1.0):
        f = _radial_integrand(potential, d, kind, power)
        try:
            val, status, upper = _doubling_integral(_quad_pieces(f, q, sigma), q.initial_limit * sigma, q)
        except Exception as exc:  # quadrature breakdown -> inconclusive
            return math.nan, "undecided", {"error": repr(exc)}
        return omega * val, status, {"status": status, "upper_limit": upper}

    def label(status):
        return {"convergent": "pass", "divergent": "fail"}.get(status, "inconclusive")

    if potential.is_zero:
        integral_I, dl = 0.0, {1: 0.0, p: 0.0}
        verdict.update({"I": "pass", "DL1": "pass", f"DL{_fmt_p(p)}": "pass", "LR": "pass", "SS": "pass"})
        diagnostics["note"] = "ideal gas: every integral vanishes; stability holds with B = 0"
        return AuditReport(d, p, integral_I, {str(k): v for k, v in dl.items()}, 0.0, True, True, verdict, diagnostics)

    integral_I, st, diag = run("I")
    verdict["I"] = label(st)
    diagnostics["I"] = diag
    dl = {}
    for power in sorted({1.0, float(p)}):
        val, st, diag = run("DL", power)
        key = f"DL{_fmt_p(power)}"
        dl[_fmt_p(power)] = val
        verdict[key] = label(st)
        diagnostics[key] = diag
    if p <= d:
        diagnostics["p_note"] = f"p = {p} does not exceed d = {d}; the main results need p in (d, inf)"

    psi_val, st, upper = _envelope_integral(potential, d, q, sigma)
    verdict["LR"] = label(st)
    diagnostics["LR"] = {"status": st, "upper_limit": upper}

    core_val, st = _core_divergence(potential, d, q, sigma)
    ss_ok = st == "divergent"
    verdict["SS"] = "pass" if ss_ok else "inconclusive"
    diagnostics["SS"] = {"status": st, "core_integral": core_val}

    return AuditReport(
        dimension=d,
        p=float(p),
        integral_I=float(integral_I),
        integral_DL=dl,
        psi_tail_integral=float(psi_val),
        lr_envelope_ok=verdict["LR"] == "pass",
        ss_heuristic_ok=ss_ok,
        verdict=verdict,
        diagnostics=diagnostics,
    )
