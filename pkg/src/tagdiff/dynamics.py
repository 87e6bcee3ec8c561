"""Euler-Maruyama integration of the interacting particle system and of the
coupled tagged-particle / environment process on the torus.

Positions and every per-step increment are rounded to the dyadic grid
2^-32.  Sums and differences of such numbers are exact in double precision,
so advancing absolute positions and then changing frame gives bit-for-bit
the same environment as advancing relative coordinates directly.

Noise layout: a step over a system with the tagged particle plus ``n``
environment particles consumes one ``(n + 1, d)`` standard normal block from
the generator; row 0 drives the tagged particle.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .configuration import DEFAULT_FORCE_CAP, Configuration, TorusBox
from .kernels import drift_batch, kernel_parameters
from .potential import PairPotential

EULER_MARUYAMA = "euler_maruyama"
SUBSTEP_ADAPTIVE = "substep_adaptive"
SCHEMES = (EULER_MARUYAMA, SUBSTEP_ADAPTIVE)

GRID = 2.0**32
MAX_HALVINGS = 8
BIAS_THRESHOLD = 1e-4


def quantize(v):
    """Round to the dyadic grid 2^-32."""
    return np.rint(np.asarray(v, dtype=float) * GRID) / GRID


@dataclass(frozen=True)
class IntegratorParams:
    dt: float
    scheme: str = EULER_MARUYAMA
    force_cap: float = DEFAULT_FORCE_CAP
    record_stride: int = 100
    seed: int = 0
    series_stride: int = 1
    adaptive_fraction: float = 0.1

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}; expected one of {SCHEMES}")
        if self.record_stride < 1 or self.series_stride < 1:
            raise ValueError("strides must be >= 1")
        if not self.force_cap > 0:
            raise ValueError("force_cap must be positive")


@dataclass
class CoupledState:
    """Tagged position ``xi`` (wrapped), unwrapped displacement ``X`` and the
    environment in coordinates relative to the tagged particle."""

    xi: np.ndarray
    displacement: np.ndarray
    environment: Configuration

    def __post_init__(self):
        box = self.environment.box
        self.xi = box.wrap(np.asarray(self.xi, float).reshape(box.dimension))
        self.displacement = np.asarray(self.displacement, float).reshape(box.dimension).copy()

    @classmethod
    def at_origin(cls, environment: Configuration) -> "CoupledState":
        d = environment.box.dimension
        return cls(np.zeros(d), np.zeros(d), environment)

    @property
    def box(self) -> TorusBox:
        return self.environment.box

    def absolute(self) -> Configuration:
        """All particles in absolute coordinates, tagged particle first."""
        pos = np.vstack([self.xi[None, :], self.environment.positions + self.xi])
        return Configuration(pos, self.box)

    def quantized(self) -> "CoupledState":
        return CoupledState(quantize(self.xi), quantize(self.displacement),
                            Configuration(quantize(self.environment.positions), self.box))


def coupled_from_absolute(config: Configuration, displacement=None, tagged: int = 0) -> CoupledState:
    """Frame change (x^0, x^i) -> (xi, y^i = x^i - x^0)."""
    box = config.box
    xi = config.positions[tagged]
    others = np.delete(config.positions, tagged, axis=0)
    disp = np.zeros(box.dimension) if displacement is None else displacement
    return CoupledState(xi, disp, Configuration(box.min_image(others, xi), box))


@dataclass
class StepDiagnostics:
    cap_events: int = 0
    force_evaluations: int = 0
    substeps: int = 0

    @property
    def cap_fraction(self) -> float:
        return self.cap_events / self.force_evaluations if self.force_evaluations else 0.0


def _drift(positions: np.ndarray, box: TorusBox, potential: PairPotential, f_max: float, diag):
    pos = np.ascontiguousarray(positions[None, :, :], dtype=np.float64)
    out = np.empty_like(pos)
    n = len(positions)
    caps = drift_batch(pos, np.array([n], dtype=np.int64), float(box.side_length), *kernel_parameters(potential),
                       float(f_max), out)
    if diag is not None:
        diag.cap_events += int(caps[0])
        diag.force_evaluations += n * (n - 1)
    return out[0]


def _needs_substep(drift, dt, params: IntegratorParams, potential: PairPotential) -> bool:
    if params.scheme != SUBSTEP_ADAPTIVE or not len(drift):
        return False
    return float(np.max(np.linalg.norm(drift, axis=-1))) * dt > params.adaptive_fraction * potential.sigma


def _advance_absolute(pos, box, potential, params, dt, w, rng, level, diag):
    """Advance absolute positions over ``dt`` with noise increment ``w``
    (sqrt(2) times a Brownian increment over ``dt``).  Returns the new
    positions, the tagged increment and the compensator contribution."""
    drift = _drift(pos, box, potential, params.force_cap, diag)
    if level < MAX_HALVINGS and _needs_substep(drift, dt, params, potential):
        half = 0.5 * dt
        bridge = rng if rng is not None else np.random.default_rng(0)
        w1 = 0.5 * w + math.sqrt(dt / 2.0) * bridge.standard_normal(w.shape)
        w2 = w - w1
        pos1, inc1, c1 = _advance_absolute(pos, box, potential, params, half, w1, rng, level + 1, diag)
        pos2, inc2, c2 = _advance_absolute(pos1, box, potential, params, half, w2, rng, level + 1, diag)
        return pos2, inc1 + inc2, c1 + c2
    if diag is not None:
        diag.substeps += 1
    step = quantize(drift * dt) + quantize(w)
    new = box.wrap(pos + step)
    tagged_drift = drift[0] * dt if len(drift) else np.zeros(box.dimension)
    return new, step[0] if len(step) else np.zeros(box.dimension), tagged_drift


def step_full(config: Configuration, params: IntegratorParams, potential: PairPotential,
              rng: np.random.Generator, noise=None, diagnostics: StepDiagnostics | None = None,
              bridge_rng: np.random.Generator | None = None) -> Configuration:
    """x_i <- wrap(x_i + drift_i dt + sqrt(2 dt) N_i) for every particle."""
    box = config.box
    box.check_potential(potential)
    dt = params.dt
    if noise is None:
        noise = rng.standard_normal(config.positions.shape)
    w = math.sqrt(2.0 * dt) * np.asarray(noise, float)
    bridge = bridge_rng if bridge_rng is not None else rng
    new, _, _ = _advance_absolute(config.positions, box, potential, params, dt, w, bridge, 0, diagnostics)
    return Configuration(new, box)


def coupled_drift(environment: Configuration, potential: PairPotential, f_max: float = DEFAULT_FORCE_CAP,
                  diagnostics: StepDiagnostics | None = None):
    """(tagged drift sum_j grad phi(y_j), environment drifts).

    Environment drift of y_i is -sum_{j != i} grad phi(y_i - y_j) - grad phi(y_i)
    - sum_j grad phi(y_j).
    """
    box = environment.box
    pos = np.vstack([np.zeros((1, box.dimension)), environment.positions])
    a = _drift(pos, box, potential, f_max, diagnostics)
    return a[0], a[1:] - a[0]


def step_coupled(state: CoupledState, params: IntegratorParams, potential: PairPotential,
                 rng: np.random.Generator, noise=None, diagnostics: StepDiagnostics | None = None) -> CoupledState:
    """One Euler-Maruyama step of (xi, y) with independent dB^0, dB^i."""
    box = state.box
    box.check_potential(potential)
    dt = params.dt
    n = state.environment.n
    if noise is None:
        noise = rng.standard_normal((n + 1, box.dimension))
    noise = np.asarray(noise, float)
    pos = np.vstack([np.zeros((1, box.dimension)), state.environment.positions])
    a = _drift(pos, box, potential, params.force_cap, diagnostics)
    if _needs_substep(a, dt, params, potential):
        # adaptive steps go through the absolute frame, which is exact
        absolute = state.absolute()
        w = math.sqrt(2.0 * dt) * noise
        new, inc, _ = _advance_absolute(absolute.positions, box, potential, params, dt, w, rng, 0, diagnostics)
        return coupled_from_absolute(Configuration(new, box), state.displacement + inc)
    if diagnostics is not None:
        diagnostics.substeps += 1
    drift_inc = quantize(a * dt)
    noise_inc = quantize(math.sqrt(2.0 * dt) * noise)
    tagged_inc = drift_inc[0] + noise_inc[0]
    y = state.environment.positions + (drift_inc[1:] - drift_inc[0]) + (noise_inc[1:] - noise_inc[0])
    return CoupledState(box.wrap(state.xi + tagged_inc), state.displacement + tagged_inc, Configuration(y, box))


# -- ensembles ---------------------------------------------------------------


@dataclass
class Trajectory:
    """Recorded path of one ensemble member.

    ``displacement`` and ``compensator`` are sampled every ``series_stride``
    integrator steps; the compensator is the left-point sum of the tagged
    drift <grad phi, gamma_s> ds.  ``snapshots`` holds ``(t, environment)``
    every ``record_stride`` steps.
    """

    times: np.ndarray
    displacement: np.ndarray
    compensator: np.ndarray
    counts: np.ndarray
    snapshots: list = field(default_factory=list)
    seed: int = 0
    cap_event_count: int = 0
    force_evaluations: int = 0

    @property
    def martingale(self) -> np.ndarray:
        return self.displacement - self.compensator

    @property
    def cap_fraction(self) -> float:
        return self.cap_event_count / self.force_evaluations if self.force_evaluations else 0.0

    @property
    def biased(self) -> bool:
        return self.cap_fraction > BIAS_THRESHOLD


def member_seed(seed_base: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence((int(seed_base) ^ int(index)) & 0xFFFFFFFFFFFFFFFF)


def member_generators(seed_base: int, index: int):
    """(noise stream, bridge stream) for ensemble member ``index``."""
    noise_seq, bridge_seq = member_seed(seed_base, index).spawn(2)
    return np.random.default_rng(noise_seq), np.random.default_rng(bridge_seq)


@njit(cache=True)
def _em_update(pos, counts, drift, noise, dt, sqrt2dt, side, skip, disp, comp, grid):
    M, N, d = pos.shape
    for m in range(M):
        if skip[m]:
            continue
        n = counts[m]
        for k in range(d):
            comp[m, k] += drift[m, 0, k] * dt
        for i in range(n):
            for k in range(d):
                inc = np.rint(drift[m, i, k] * dt * grid) / grid + np.rint(sqrt2dt * noise[m, i, k] * grid) / grid
                if i == 0:
                    disp[m, k] += inc
                v = pos[m, i, k] + inc
                pos[m, i, k] = v - side * np.floor((v + 0.5 * side) / side)


class EnsembleView:
    """Read-only view handed to observers at every integrator step.

    ``positions[m, 0]`` is the tagged particle (absolute frame) and
    ``positions[m, 1:counts[m]]`` the environment; ``relative()`` returns
    environment coordinates.  ``tagged_drift`` is <grad phi, gamma> at the
    start of the step.
    """

    def __init__(self, box: TorusBox):
        self.box = box
        self.step = 0
        self.t = 0.0
        self.positions = None
        self.counts = None
        self.tagged_drift = None
        self.displacement = None

    def relative(self) -> np.ndarray:
        rel = self.box.min_image(self.positions, self.positions[:, :1, :])
        return rel[:, 1:, :]

    def environment_mask(self) -> np.ndarray:
        n = self.positions.shape[1] - 1
        return np.arange(n)[None, :] < (self.counts - 1)[:, None]


def simulate_ensemble(initial: list, T: float, params: IntegratorParams, potential: PairPotential,
                      seed_base: int | None = None, observers=(), indices=None) -> list:
    """Integrate each initial ``CoupledState`` to time T in the absolute frame.

    Member ``k`` draws its noise from ``SeedSequence(seed_base ^ indices[k])``
    (``indices`` defaults to ``range(len(initial))``), so a trajectory does not
    depend on which other members share the batch.  Observers are called as
    ``observer(view)`` before every step and once at the end.
    """
    if T < 0:
        raise ValueError("T must be >= 0")
    if not initial:
        return []
    box = initial[0].box
    box.check_potential(potential)
    seed_base = params.seed if seed_base is None else seed_base
    indices = list(range(len(initial))) if indices is None else list(indices)
    M, d = len(initial), box.dimension
    steps = int(round(T / params.dt))
    counts = np.array([s.environment.n + 1 for s in initial], dtype=np.int64)
    N = int(counts.max())
    pos = np.zeros((M, N, d))
    disp = np.zeros((M, d))
    for m, s in enumerate(initial):
        q = s.quantized()
        pos[m, : counts[m]] = q.absolute().positions
        disp[m] = q.displacement
    comp = np.zeros((M, d))
    gens = [member_generators(seed_base, k) for k in indices]
    kp = kernel_parameters(potential)
    side = float(box.side_length)
    dt = params.dt
    sqrt2dt = math.sqrt(2.0 * dt)

    n_series = steps // params.series_stride + 1
    series_t = np.zeros(n_series)
    series_x = np.zeros((M, n_series, d))
    series_c = np.zeros((M, n_series, d))
    snaps = [[] for _ in range(M)]
    caps = np.zeros(M, dtype=np.int64)
    evals = np.zeros(M, dtype=np.int64)
    drift = np.empty_like(pos)
    view = EnsembleView(box)
    skip = np.zeros(M, dtype=np.bool_)

    block = max(1, min(256, int(4e6 // max(1, M * N * d))))
    noise_block = np.zeros((block, M, N, d))
    diag = [StepDiagnostics() for _ in range(M)]

    def record(step):
        if step % params.series_stride == 0:
            r = step // params.series_stride
            series_t[r] = step * dt
            series_x[:, r] = disp
            series_c[:, r] = comp
        if step % params.record_stride == 0:
            for m in range(M):
                rel = box.min_image(pos[m, 1 : counts[m]], pos[m, 0])
                snaps[m].append((step * dt, Configuration(rel, box)))

    for step in range(steps + 1):
        c = drift_batch(pos, counts, side, *kp, float(params.force_cap), drift)
        caps += c
        evals += counts * (counts - 1)
        record(step)
        view.step, view.t, view.positions, view.counts = step, step * dt, pos, counts
        view.tagged_drift, view.displacement = drift[:, 0, :], disp
        for obs in observers:
            obs(view)
        if step == steps:
            break
        b = step % block
        if b == 0:
            for m, (g, _) in enumerate(gens):
                noise_block[:, m, : counts[m]] = g.standard_normal((block, counts[m], d))
        noise = noise_block[b]
        if params.scheme == SUBSTEP_ADAPTIVE:
            fmax = np.max(np.linalg.norm(drift, axis=-1), axis=1)
            skip = fmax * dt > params.adaptive_fraction * potential.sigma
            for m in np.flatnonzero(skip):
                n = counts[m]
                dg = diag[m]
                before = (dg.cap_events, dg.force_evaluations)
                new, inc, cinc = _advance_absolute(pos[m, :n].copy(), box, potential, params, dt,
                                                   sqrt2dt * noise[m, :n], gens[m][1], 0, dg)
                pos[m, :n] = new
                disp[m] += inc
                comp[m] += cinc
                caps[m] += dg.cap_events - before[0]
                evals[m] += dg.force_evaluations - before[1]
        _em_update(pos, counts, drift, noise, dt, sqrt2dt, side, skip, disp, comp, GRID)

    out = []
    for m in range(M):
        out.append(Trajectory(series_t.copy(), series_x[m], series_c[m], None, snaps[m],
                              int((seed_base ^ indices[m]) & 0xFFFFFFFFFFFFFFFF), int(caps[m]), int(evals[m])))
        out[-1].counts = np.full(n_series, counts[m] - 1, dtype=np.int64)
    return out


def equilibrium_states(configs: list) -> list:
    """Coupled states with the tagged particle at the origin."""
    return [CoupledState.at_origin(c) for c in configs]
