"""Cylinder functions on configurations and the operators acting on them.

A cylinder function is ``F(gamma) = g(<f_1, gamma>, ..., <f_N, gamma>)`` with
an outer function ``g`` (analytic gradient and Hessian) and compactly
supported test functions ``f_k`` (analytic gradient and Laplacian).  On top of
that this module evaluates the environment and coupled generators, the drift
functional ``B_v`` of the integration-by-parts formula, and the averaging
construction that recovers the tagged displacement from the environment.

Test functions and vector fields act on arrays of shape ``(..., d)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import integrate

from .configuration import Configuration, TorusBox, neighbor_pairs
from .potential import PairPotential

# -- smoothstep profile --------------------------------------------------------


def smoothstep(t):
    """C^2 quintic step: 0 for t <= 0, 1 for t >= 1, 6t^5 - 15t^4 + 10t^3 between."""
    t = np.clip(t, 0.0, 1.0)
    return t * t * t * (10.0 + t * (-15.0 + 6.0 * t))


def smoothstep_d1(t):
    t = np.clip(t, 0.0, 1.0)
    return 30.0 * t * t * (1.0 - t) ** 2


def smoothstep_d2(t):
    t = np.clip(t, 0.0, 1.0)
    return 60.0 * t * (1.0 - t) * (1.0 - 2.0 * t)


# -- test functions ------------------------------------------------------------


class TestFunction:
    """Scalar field with analytic gradient and Laplacian."""

    __test__ = False  # not a pytest class
    dimension: int

    def value(self, x):
        raise NotImplementedError

    def gradient(self, x):
        raise NotImplementedError

    def laplacian(self, x):
        raise NotImplementedError

    def extent(self) -> tuple:
        """(center, half-width in sup-norm) of a box containing the support."""
        raise NotImplementedError

    def fits_in(self, box: TorusBox) -> bool:
        c, w = self.extent()
        return bool(np.all(np.abs(c) + w < box.half))

    def __call__(self, x):
        return self.value(x)

    def __mul__(self, other: "TestFunction") -> "TestFunction":
        return Product(self, other)


def _as_points(x, d):
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != d:
        raise ValueError(f"points have trailing dimension {x.shape[-1]}, expected {d}")
    return x


@dataclass(frozen=True)
class Bump(TestFunction):
    """a (1 - |x-c|^2/R^2)^3 inside the ball of radius R."""

    center: tuple
    radius: float
    amplitude: float = 1.0

    @property
    def dimension(self):
        return len(self.center)

    def _s(self, x):
        x = _as_points(x, self.dimension)
        u = x - np.asarray(self.center, float)
        s = np.sum(u * u, axis=-1) / self.radius**2
        return u, s, s < 1.0

    def value(self, x):
        _, s, inside = self._s(x)
        return np.where(inside, self.amplitude * (1.0 - s) ** 3, 0.0)

    def gradient(self, x):
        u, s, inside = self._s(x)
        coef = np.where(inside, -6.0 * self.amplitude * (1.0 - s) ** 2 / self.radius**2, 0.0)
        return coef[..., None] * u

    def laplacian(self, x):
        u, s, inside = self._s(x)
        R2 = self.radius**2
        d = self.dimension
        lap = self.amplitude * (24.0 * (1.0 - s) * s / R2 - 6.0 * d * (1.0 - s) ** 2 / R2)
        return np.where(inside, lap, 0.0)

    def extent(self):
        return np.asarray(self.center, float), self.radius


@dataclass(frozen=True)
class PlateauBox(TestFunction):
    """prod_k S((a + delta - |x_k - c_k|)/delta): 1 on the cube of half-width
    a, 0 outside half-width a + delta."""

    half_width: float
    margin: float
    center: tuple
    amplitude: float = 1.0

    def __post_init__(self):
        if not self.margin > 0:
            raise ValueError("margin must be positive")

    @property
    def dimension(self):
        return len(self.center)

    def _parts(self, x):
        x = _as_points(x, self.dimension)
        u = x - np.asarray(self.center, float)
        t = (self.half_width + self.margin - np.abs(u)) / self.margin
        return np.sign(u), smoothstep(t), smoothstep_d1(t), smoothstep_d2(t)

    @staticmethod
    def _others(s):
        # product over all axes except k, for every k
        d = s.shape[-1]
        out = np.ones_like(s)
        for k in range(d):
            for l in range(d):
                if l != k:
                    out[..., k] = out[..., k] * s[..., l]
        return out

    def value(self, x):
        _, s, _, _ = self._parts(x)
        return self.amplitude * np.prod(s, axis=-1)

    def gradient(self, x):
        sgn, s, s1, _ = self._parts(x)
        return self.amplitude * self._others(s) * s1 * (-sgn / self.margin)

    def laplacian(self, x):
        _, s, _, s2 = self._parts(x)
        return self.amplitude * np.sum(self._others(s) * s2, axis=-1) / self.margin**2

    def extent(self):
        return np.asarray(self.center, float), self.half_width + self.margin


@dataclass(frozen=True)
class SmoothCoordinate(TestFunction):
    """(x_axis - c_axis) times a plateau box: the coordinate on the cube of
    half-width a, cut off to 0 across a shell of width delta."""

    axis: int
    half_width: float
    margin: float
    center: tuple

    @property
    def dimension(self):
        return len(self.center)

    @property
    def plateau(self) -> PlateauBox:
        return PlateauBox(self.half_width, self.margin, self.center)

    def value(self, x):
        x = _as_points(x, self.dimension)
        return (x[..., self.axis] - self.center[self.axis]) * self.plateau.value(x)

    def gradient(self, x):
        x = _as_points(x, self.dimension)
        p = self.plateau
        g = (x[..., self.axis] - self.center[self.axis])[..., None] * p.gradient(x)
        g[..., self.axis] += p.value(x)
        return g

    def laplacian(self, x):
        x = _as_points(x, self.dimension)
        p = self.plateau
        return 2.0 * p.gradient(x)[..., self.axis] + (x[..., self.axis] - self.center[self.axis]) * p.laplacian(x)

    def extent(self):
        return np.asarray(self.center, float), self.half_width + self.margin


@dataclass(frozen=True)
class Product(TestFunction):
    left: TestFunction
    right: TestFunction

    @property
    def dimension(self):
        return self.left.dimension

    def value(self, x):
        return self.left.value(x) * self.right.value(x)

    def gradient(self, x):
        return self.left.value(x)[..., None] * self.right.gradient(x) + self.right.value(x)[..., None] * self.left.gradient(x)

    def laplacian(self, x):
        cross = np.sum(self.left.gradient(x) * self.right.gradient(x), axis=-1)
        return self.left.value(x) * self.right.laplacian(x) + self.right.value(x) * self.left.laplacian(x) + 2.0 * cross

    def extent(self):
        (c1, w1), (c2, w2) = self.left.extent(), self.right.extent()
        return (c1, w1) if w1 <= w2 else (c2, w2)


@dataclass(frozen=True)
class Gaussian(TestFunction):
    """a exp(-|x-c|^2 / (2 w^2)); not compactly supported on its own."""

    center: tuple
    width: float
    amplitude: float = 1.0

    @property
    def dimension(self):
        return len(self.center)

    def value(self, x):
        u = _as_points(x, self.dimension) - np.asarray(self.center, float)
        return self.amplitude * np.exp(-0.5 * np.sum(u * u, axis=-1) / self.width**2)

    def gradient(self, x):
        u = _as_points(x, self.dimension) - np.asarray(self.center, float)
        return -(self.value(x) / self.width**2)[..., None] * u

    def laplacian(self, x):
        u = _as_points(x, self.dimension) - np.asarray(self.center, float)
        r2 = np.sum(u * u, axis=-1)
        return self.value(x) * (r2 / self.width**4 - self.dimension / self.width**2)

    def extent(self):
        return np.asarray(self.center, float), math.inf


def gaussian_clipped(center, width: float, radius: float, amplitude: float = 1.0) -> TestFunction:
    """Gaussian profile multiplied by a bump of the given radius."""
    return Product(Gaussian(tuple(center), width, amplitude), Bump(tuple(center), radius))


@dataclass(frozen=True)
class Constant(TestFunction):
    """Constant function; only meaningful as a function of the tagged position."""

    level: float
    dim: int

    @property
    def dimension(self):
        return self.dim

    def value(self, x):
        x = _as_points(x, self.dim)
        return np.full(x.shape[:-1], float(self.level))

    def gradient(self, x):
        return np.zeros_like(_as_points(x, self.dim))

    def laplacian(self, x):
        x = _as_points(x, self.dim)
        return np.zeros(x.shape[:-1])

    def extent(self):
        return np.zeros(self.dim), math.inf


def finite_difference_gradient(f: Callable, x, h: float = 1e-6):
    """Central-difference gradient of a scalar field at points ``x`` (..., d)."""
    x = np.asarray(x, float)
    out = np.empty_like(x)
    for k in range(x.shape[-1]):
        e = np.zeros(x.shape[-1])
        e[k] = h
        out[..., k] = (f(x + e) - f(x - e)) / (2 * h)
    return out


# -- outer functions -----------------------------------------------------------


@dataclass(frozen=True)
class OuterFunction:
    """g: R^N -> R with gradient and Hessian.  Missing derivatives fall back
    to central differences and set ``numeric``."""

    arity: int
    fun: Callable
    grad: Callable | None = None
    hess: Callable | None = None
    name: str = "custom"
    fd_step: float = 1e-4

    @property
    def numeric(self) -> bool:
        return self.grad is None or self.hess is None

    def value(self, t) -> float:
        return float(self.fun(np.asarray(t, float)))

    def gradient(self, t) -> np.ndarray:
        t = np.asarray(t, float)
        if self.grad is not None:
            return np.asarray(self.grad(t), float).reshape(self.arity)
        h = self.fd_step
        out = np.empty(self.arity)
        for k in range(self.arity):
            e = np.zeros(self.arity)
            e[k] = h
            out[k] = (self.fun(t + e) - self.fun(t - e)) / (2 * h)
        return out

    def hessian(self, t) -> np.ndarray:
        t = np.asarray(t, float)
        if self.hess is not None:
            return np.asarray(self.hess(t), float).reshape(self.arity, self.arity)
        h = self.fd_step
        out = np.empty((self.arity, self.arity))
        for k in range(self.arity):
            e = np.zeros(self.arity)
            e[k] = h
            out[k] = (self.gradient(t + e) - self.gradient(t - e)) / (2 * h)
        return 0.5 * (out + out.T)


def linear_outer(coeffs, const: float = 0.0) -> OuterFunction:
    a = np.asarray(coeffs, float)
    n = len(a)
    return OuterFunction(n, lambda t: const + a @ t, lambda t: a, lambda t: np.zeros((n, n)), "linear")


def quadratic_outer(A, b=None, c: float = 0.0) -> OuterFunction:
    """c + b.t + t.A.t/2 with A symmetrized."""
    A = np.asarray(A, float)
    A = 0.5 * (A + A.T)
    n = len(A)
    b = np.zeros(n) if b is None else np.asarray(b, float)
    return OuterFunction(n, lambda t: c + b @ t + 0.5 * t @ A @ t, lambda t: b + A @ t, lambda t: A, "quadratic")


def sine_outer(freqs, phase: float = 0.0) -> OuterFunction:
    """sin(w.t + phase), bounded with bounded derivatives."""
    w = np.asarray(freqs, float)
    return OuterFunction(
        len(w),
        lambda t: math.sin(w @ t + phase),
        lambda t: math.cos(w @ t + phase) * w,
        lambda t: -math.sin(w @ t + phase) * np.outer(w, w),
        "sine",
    )


def tanh_outer(weights) -> OuterFunction:
    w = np.asarray(weights, float)

    def grad(t):
        return (1.0 - math.tanh(w @ t) ** 2) * w

    def hess(t):
        th = math.tanh(w @ t)
        return -2.0 * th * (1.0 - th * th) * np.outer(w, w)

    return OuterFunction(len(w), lambda t: math.tanh(w @ t), grad, hess, "tanh")


def ratio_outer(offset: float) -> OuterFunction:
    """t1 / (offset + t2)."""

    def grad(t):
        den = offset + t[1]
        return np.array([1.0 / den, -t[0] / den**2])

    def hess(t):
        den = offset + t[1]
        return np.array([[0.0, -1.0 / den**2], [-1.0 / den**2, 2.0 * t[0] / den**3]])

    return OuterFunction(2, lambda t: t[0] / (offset + t[1]), grad, hess, "ratio")


def constant_outer(level: float, arity: int = 1) -> OuterFunction:
    return OuterFunction(arity, lambda t: level, lambda t: np.zeros(arity), lambda t: np.zeros((arity, arity)), "constant")


# -- cylinder functions --------------------------------------------------------


@dataclass(frozen=True)
class CylinderFunction:
    outer: OuterFunction
    inner: tuple

    def __post_init__(self):
        object.__setattr__(self, "inner", tuple(self.inner))
        if len(self.inner) != self.outer.arity:
            raise ValueError(f"outer takes {self.outer.arity} arguments, got {len(self.inner)} test functions")

    def statistics(self, config: Configuration) -> np.ndarray:
        x = config.positions
        return np.array([float(np.sum(f.value(x))) for f in self.inner])

    def value(self, config: Configuration) -> float:
        return self.outer.value(self.statistics(config))

    def gradients(self, config: Configuration):
        return gradients(self, config)


@dataclass
class _Local:
    """Per-particle data of the inner test functions on one configuration."""

    values: np.ndarray  # (N, n)
    grads: np.ndarray  # (N, n, d)
    laps: np.ndarray  # (N, n)

    @classmethod
    def of(cls, F: CylinderFunction, config: Configuration) -> "_Local":
        x = config.positions
        n, d = x.shape
        N = len(F.inner)
        vals, grads, laps = np.zeros((N, n)), np.zeros((N, n, d)), np.zeros((N, n))
        for k, f in enumerate(F.inner):
            if n:
                vals[k], grads[k], laps[k] = f.value(x), f.gradient(x), f.laplacian(x)
        return cls(vals, grads, laps)

    @property
    def stats(self):
        return self.values.sum(axis=1)


def evaluate(F: CylinderFunction, config: Configuration) -> float:
    return F.value(config)


def gradients(F: CylinderFunction, config: Configuration):
    """Per-particle gradient (n, d) and aggregate gradient (d,)."""
    loc = _Local.of(F, config)
    dg = F.outer.gradient(loc.stats)
    per = np.einsum("k,knd->nd", dg, loc.grads)
    return per, per.sum(axis=0)


def directional_gradient(F: CylinderFunction, v: "VectorField", config: Configuration) -> float:
    """sum over particles of (v(x), grad^Gamma F(x))."""
    if config.n == 0:
        return 0.0
    per, _ = gradients(F, config)
    return float(np.sum(per * v.value(config.positions)))


def _field_gradients(config: Configuration, potential: PairPotential) -> np.ndarray:
    """grad phi(x) for every particle: the field of a tagged particle at 0."""
    if config.n == 0 or potential.is_zero:
        return np.zeros_like(config.positions)
    return potential.gradient(config.positions)


def _pair_gradients(config: Configuration, potential: PairPotential):
    """(i, j, grad phi(x_i - x_j)) over interacting pairs i < j."""
    box = config.box
    if config.n < 2 or potential.is_zero:
        return np.zeros(0, int), np.zeros(0, int), np.zeros((0, box.dimension))
    box.check_potential(potential)
    r_c = potential.cutoff_radius if potential.is_truncated else box.half
    i, j, disp = neighbor_pairs(config, r_c)
    return i, j, potential.gradient(disp) if len(disp) else np.zeros((0, box.dimension))


def generator_env(F: CylinderFunction, config: Configuration, potential: PairPotential) -> float:
    """Environment generator applied to F at ``config``."""
    if config.n == 0:
        return 0.0
    loc = _Local.of(F, config)
    t = loc.stats
    dg = F.outer.gradient(t)
    d2g = F.outer.hessian(t)
    G = loc.grads
    agg = G.sum(axis=1)  # (N, d)
    A = np.einsum("ind,jnd->ij", G, G) + agg @ agg.T
    gphi = _field_gradients(config, potential)
    I, J, pg = _pair_gradients(config, potential)
    pair_term = np.einsum("pd,kpd->k", pg, G[:, I, :] - G[:, J, :]) if len(I) else np.zeros(len(dg))
    b = 2.0 * loc.laps.sum(axis=1) - np.einsum("nd,knd->k", gphi, G) - agg @ gphi.sum(axis=0) - pair_term
    return float(np.sum(d2g * A) + dg @ b)


def generator_coup(f: TestFunction, F: CylinderFunction, xi, config: Configuration, potential: PairPotential) -> float:
    """Coupled generator applied to f(xi) F(gamma)."""
    xi = np.asarray(xi, float)[None, :]
    fv, fg, fl = float(f.value(xi)[0]), f.gradient(xi)[0], float(f.laplacian(xi)[0])
    Fv = F.value(config)
    _, agg = gradients(F, config)
    drift = _field_gradients(config, potential).sum(axis=0)
    return fv * generator_env(F, config, potential) - 2.0 * float(agg @ fg) + float(drift @ fg) * Fv + fl * Fv


# -- vector fields and the drift functional ----------------------------------


class VectorField:
    dimension: int

    def value(self, x):
        raise NotImplementedError

    def divergence(self, x):
        raise NotImplementedError

    def jacobian(self, x):
        """J[..., k, l] = d v_k / d x_l."""
        raise NotImplementedError


@dataclass(frozen=True)
class DirectionField(VectorField):
    """v(x) = f(x) a for a fixed direction a."""

    profile: TestFunction
    direction: tuple

    @property
    def dimension(self):
        return len(self.direction)

    def value(self, x):
        return self.profile.value(x)[..., None] * np.asarray(self.direction, float)

    def divergence(self, x):
        return self.profile.gradient(x) @ np.asarray(self.direction, float)

    def jacobian(self, x):
        return np.asarray(self.direction, float)[:, None] * self.profile.gradient(x)[..., None, :]


@dataclass(frozen=True)
class RadialField(VectorField):
    """v(x) = f(x) (x - c)."""

    profile: TestFunction
    center: tuple

    @property
    def dimension(self):
        return len(self.center)

    def value(self, x):
        u = np.asarray(x, float) - np.asarray(self.center, float)
        return self.profile.value(x)[..., None] * u

    def divergence(self, x):
        u = np.asarray(x, float) - np.asarray(self.center, float)
        return np.sum(self.profile.gradient(x) * u, axis=-1) + self.dimension * self.profile.value(x)

    def jacobian(self, x):
        u = np.asarray(x, float) - np.asarray(self.center, float)
        eye = np.eye(self.dimension)
        return u[..., :, None] * self.profile.gradient(x)[..., None, :] + self.profile.value(x)[..., None, None] * eye


@dataclass(frozen=True)
class ZeroField(VectorField):
    dim: int

    @property
    def dimension(self):
        return self.dim

    def value(self, x):
        return np.zeros_like(np.asarray(x, float))

    def divergence(self, x):
        return np.zeros(np.asarray(x).shape[:-1])

    def jacobian(self, x):
        x = np.asarray(x, float)
        return np.zeros(x.shape + (self.dim,))


def drift_Bv(v: VectorField, config: Configuration, potential: PairPotential) -> float:
    """<div v, gamma> - sum (grad phi(x), v(x)) - sum_pairs (grad phi(x-y), v(x)-v(y))."""
    if config.n == 0:
        return 0.0
    x = config.positions
    vx = v.value(x)
    out = float(np.sum(v.divergence(x))) - float(np.sum(_field_gradients(config, potential) * vx))
    I, J, pg = _pair_gradients(config, potential)
    if len(I):
        out -= float(np.sum(pg * (vx[I] - vx[J])))
    return out


# -- batched evaluation over many configurations -----------------------------


@dataclass
class ConfigurationBatch:
    """Padded stack of configurations: ``positions`` (S, N, d) with live ``mask``.

    Used to evaluate cylinder functions, generators and B_v on long sample
    lists without a Python loop over particles.  Pair sums reuse the compiled
    drift kernel with the force cap disabled.
    """

    positions: np.ndarray
    mask: np.ndarray
    box: TorusBox

    @classmethod
    def from_configurations(cls, configs: Sequence[Configuration]) -> "ConfigurationBatch":
        box = configs[0].box
        N = max(1, max(c.n for c in configs))
        pos = np.zeros((len(configs), N, box.dimension))
        mask = np.zeros((len(configs), N), bool)
        for m, c in enumerate(configs):
            pos[m, : c.n] = c.positions
            mask[m, : c.n] = True
        return cls(pos, mask, box)

    def __len__(self):
        return len(self.positions)

    @property
    def counts(self) -> np.ndarray:
        return self.mask.sum(axis=1)

    def field_gradients(self, potential: PairPotential) -> np.ndarray:
        if potential.is_zero:
            return np.zeros_like(self.positions)
        out = np.zeros_like(self.positions)
        out[self.mask] = potential.gradient(self.positions[self.mask])
        return out

    def pair_sums(self, potential: PairPotential) -> np.ndarray:
        """Q_i = sum_{j != i} grad phi(x_i - x_j) for every live particle."""
        from .kernels import pair_drifts

        if potential.is_zero:
            return np.zeros_like(self.positions)
        self.box.check_potential(potential)
        # live rows are packed first, which is what the kernel expects
        drift, _ = pair_drifts(self.positions, self.counts, self.box.side_length, potential, math.inf)
        return -drift * self.mask[..., None]

    def local(self, F: CylinderFunction):
        """values (S, K, N), gradients (S, K, N, d), Laplacians (S, K, N)."""
        m = self.mask
        x = self.positions
        vals = np.stack([f.value(x) * m for f in F.inner], axis=1)
        grads = np.stack([f.gradient(x) * m[..., None] for f in F.inner], axis=1)
        laps = np.stack([f.laplacian(x) * m for f in F.inner], axis=1)
        return vals, grads, laps


def _outer_rows(F: CylinderFunction, stats: np.ndarray, order: int):
    if order == 0:
        return np.array([F.outer.value(t) for t in stats])
    if order == 1:
        return np.array([F.outer.gradient(t) for t in stats])
    return np.array([F.outer.hessian(t) for t in stats])


def batch_values(F: CylinderFunction, batch: ConfigurationBatch) -> np.ndarray:
    vals, _, _ = batch.local(F)
    return _outer_rows(F, vals.sum(axis=2), 0)


def batch_gradients(F: CylinderFunction, batch: ConfigurationBatch):
    """Per-particle gradients (S, N, d) and aggregate gradients (S, d)."""
    vals, grads, _ = batch.local(F)
    dg = _outer_rows(F, vals.sum(axis=2), 1)
    per = np.einsum("sk,sknd->snd", dg, grads)
    return per, per.sum(axis=1)


def batch_directional_gradient(F: CylinderFunction, v: VectorField, batch: ConfigurationBatch) -> np.ndarray:
    per, _ = batch_gradients(F, batch)
    return np.sum(per * v.value(batch.positions), axis=(1, 2))


def batch_drift_Bv(v: VectorField, batch: ConfigurationBatch, potential: PairPotential) -> np.ndarray:
    x, m = batch.positions, batch.mask
    vx = v.value(x) * m[..., None]
    force = batch.field_gradients(potential) + batch.pair_sums(potential)
    return np.sum(v.divergence(x) * m, axis=1) - np.sum(force * vx, axis=(1, 2))


def batch_generator_env(F: CylinderFunction, batch: ConfigurationBatch, potential: PairPotential) -> np.ndarray:
    vals, G, laps = batch.local(F)
    t = vals.sum(axis=2)
    dg = _outer_rows(F, t, 1)
    d2g = _outer_rows(F, t, 2)
    agg = G.sum(axis=2)  # (S, K, d)
    A = np.einsum("sind,sjnd->sij", G, G) + np.einsum("sid,sjd->sij", agg, agg)
    gphi = batch.field_gradients(potential)
    Q = batch.pair_sums(potential)
    b = (2.0 * laps.sum(axis=2) - np.einsum("snd,sknd->sk", gphi + Q, G)
         - np.einsum("skd,sd->sk", agg, gphi.sum(axis=1)))
    return np.sum(d2g * A, axis=(1, 2)) + np.sum(dg * b, axis=1)


# -- averaging schedule ------------------------------------------------------


def _sup_norm_weight(r, n, d: int, directions=None):
    """A(r) = integral over the unit sphere of min(n, r |omega|_inf)."""
    r = np.asarray(r, float)
    if d == 1:
        return 2.0 * np.minimum(n, r)
    if d == 2:
        q = np.pi / 4
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(r > 0, n / r, np.inf)
            theta0 = np.arccos(np.clip(ratio, 0.0, 1.0))
        theta0 = np.minimum(theta0, q)
        full = r * math.sin(q)
        part = n * theta0 + r * (math.sin(q) - np.sin(theta0))
        return 8.0 * np.where(ratio >= 1.0, full, part)
    # d >= 3: fixed quasi-uniform directions on the sphere
    if directions is None:
        directions = _sphere_directions(d)
    area = 2 * math.pi ** (d / 2) / math.gamma(d / 2)
    m = np.max(np.abs(directions), axis=1)
    return area * np.mean(np.minimum(n, r[..., None] * m), axis=-1)


def _sphere_directions(d: int, count: int = 20000) -> np.ndarray:
    g = np.random.default_rng(20240101).standard_normal((count, d))
    return g / np.linalg.norm(g, axis=1, keepdims=True)


def tail_integral(potential: PairPotential, n: float) -> float:
    """integral over R^d of |grad phi| exp(-phi)(x) min(n, |x|_inf) dx for the
    untruncated potential; equals int_0^n int_{|x|_inf > r} |grad phi| e^{-phi} dx dr."""
    pot = potential.untruncated()
    if pot.is_zero:
        return 0.0
    d = pot.dimension
    dirs = _sphere_directions(d) if d >= 3 else None

    def integrand(r):
        if r <= 0:
            return 0.0
        with np.errstate(all="ignore"):
            u = float(pot.radial(r))
            du = abs(float(pot.radial_derivative(r)))
        if not math.isfinite(u) or u > 700:
            return 0.0
        w = float(_sup_norm_weight(np.array([r]), n, d, dirs)[0])
        return du * math.exp(-u) * r ** (d - 1) * w

    s = pot.sigma
    breaks = sorted({0.0, 0.5 * s, s, 2 ** (1 / 6) * s, 1.5 * s, 2 * s, n, n * math.sqrt(2), n * math.sqrt(d), 4 * s, 8 * s})
    total = 0.0
    for a, b in zip(breaks[:-1], breaks[1:]):
        if b > a:
            total += integrate.quad(integrand, a, b, limit=200)[0]
    total += integrate.quad(integrand, breaks[-1], np.inf, limit=200)[0]
    return total


@dataclass(frozen=True)
class AveragingSchedule:
    """Box scale n, mollifier margin delta and the normalizer r_n = sqrt(q_n)."""

    n: float
    delta: float
    q: float
    dimension: int

    def __post_init__(self):
        if not self.n > 0 or not self.delta > 0:
            raise ValueError("n and delta must be positive")
        if not self.q > 0:
            raise ValueError("q must be positive")

    @property
    def r(self) -> float:
        return math.sqrt(self.q)

    @property
    def offset(self) -> float:
        """r_n n^d, the constant part of the normalizer."""
        return self.r * self.n**self.dimension

    def check_box(self, box: TorusBox) -> None:
        if self.n + self.delta >= box.half:
            raise ValueError(f"schedule n + delta = {self.n + self.delta} does not fit in the box half-width {box.half}")

    def coordinate_function(self, axis: int) -> SmoothCoordinate:
        return SmoothCoordinate(axis, self.n, self.delta, (0.0,) * self.dimension)

    def cutoff_function(self) -> PlateauBox:
        return PlateauBox(self.n, self.delta, (0.0,) * self.dimension)

    def cylinder(self, axis: int) -> CylinderFunction:
        """F_n^delta as a cylinder function of (<f_n^delta>, <c_n^delta>)."""
        return CylinderFunction(ratio_outer(self.offset), (self.coordinate_function(axis), self.cutoff_function()))


def averaging_schedule(potential: PairPotential, n: float, delta: float) -> AveragingSchedule:
    q = (1.0 + tail_integral(potential, n)) / n
    return AveragingSchedule(float(n), float(delta), q, potential.dimension)


def schedule_is_monotone(schedules: Sequence[AveragingSchedule]) -> bool:
    """r_n and q_n / r_n both strictly decrease along the grid."""
    q = np.array([s.q for s in schedules])
    return bool(np.all(np.diff(q) < 0))


def cube_indicator(x, n: float):
    """c_n^0: indicator of the closed cube [-n, n]^d."""
    return np.all(np.abs(np.asarray(x, float)) <= n, axis=-1)


def in_shell(x, n: float, delta: float):
    """Membership in A_n^delta = [-n-delta, n+delta]^d minus (-n, n)^d."""
    a = np.abs(np.asarray(x, float))
    return np.all(a <= n + delta, axis=-1) & ~np.all(a < n, axis=-1)


def y_tilde(axis: int, schedule: AveragingSchedule, config: Configuration, potential: PairPotential) -> float:
    c0 = cube_indicator(config.positions, schedule.n).astype(float)
    gphi = _field_gradients(config, potential)[:, axis]
    total = float(gphi.sum())
    if potential.is_zero:
        return 0.0
    norm = schedule.offset + c0.sum()
    I, J, pg = _pair_gradients(config, potential)
    pair = float(np.sum(pg[:, axis] * (c0[I] - c0[J]))) if len(I) else 0.0
    return -(float(np.sum(gphi * c0)) + total * c0.sum() + pair) / norm + total


def averaging_functional(axis: int, schedule: AveragingSchedule, config: Configuration):
    """(F_n^delta(gamma), H_n^delta(gamma))."""
    schedule.check_box(config.box)
    x = config.positions
    if config.n == 0:
        return 0.0, 1
    c = schedule.cutoff_function().value(x)
    f = schedule.coordinate_function(axis).value(x)
    F = float(f.sum() / (schedule.offset + c.sum()))
    H = 0 if np.any(in_shell(x, schedule.n, schedule.delta)) else 1
    return F, H


def averaging_batch(axis: int, schedule: AveragingSchedule, rel: np.ndarray, mask: np.ndarray):
    """Vectorized F_n^delta, H_n^delta, membership of (-n, n)^d and <c_n^0>
    for an ensemble of environments ``rel`` (M, N, d) with live ``mask``."""
    a = np.abs(rel)
    t = (schedule.n + schedule.delta - a) / schedule.delta
    c = np.prod(smoothstep(t), axis=-1) * mask
    f = rel[..., axis] * c
    F = f.sum(axis=1) / (schedule.offset + c.sum(axis=1))
    shell = in_shell(rel, schedule.n, schedule.delta) & mask
    H = ~np.any(shell, axis=1)
    inside = np.all(a < schedule.n, axis=-1) & mask
    c0 = (np.all(a <= schedule.n, axis=-1) & mask).sum(axis=1)
    return F, H, inside, c0
