"""Grand-canonical Metropolis sampling of the environment Gibbs measure.

Target on the torus: density ``z^n exp(-U(gamma))`` with respect to the
Lebesgue-Poisson measure, where

    U(gamma) = sum_{pairs} phi(x - y) + sum_x phi(x)

The second sum is the field of the tagged particle frozen at the origin.
Births are proposed uniformly on the box, deaths pick a uniform particle,
displacements are Gaussian; every factor of the target sits in the
acceptance ratio.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .configuration import Configuration, TorusBox
from .kernels import kernel_parameters
from .potential import PairPotential

BIRTH, DEATH, DISPLACE = 0, 1, 2
MOVE_NAMES = ("birth", "death", "displacement")


@dataclass(frozen=True)
class GcmcParams:
    activity: float
    move_mix: tuple = (1 / 3, 1 / 3, 1 / 3)
    displacement_scale: float = 0.3
    sweeps: int = 100
    seed: int = 0
    external_field: bool = True
    pair_interaction: bool = True
    min_moves_per_sweep: int = 10

    def __post_init__(self):
        if not self.activity >= 0:
            raise ValueError("activity must be >= 0")
        mix = tuple(float(p) for p in self.move_mix)
        if len(mix) != 3 or min(mix) < 0 or abs(sum(mix) - 1.0) > 1e-12:
            raise ValueError("move_mix must be three nonnegative probabilities summing to 1")
        if (mix[0] > 0) != (mix[1] > 0):
            raise ValueError("birth and death moves must be enabled together")
        object.__setattr__(self, "move_mix", mix)
        if not self.displacement_scale > 0:
            raise ValueError("displacement_scale must be positive")
        if self.sweeps < 0:
            raise ValueError("sweeps must be >= 0")

    def moves_in_sweep(self, volume: float) -> int:
        """A sweep is max(ceil(z |box|), min_moves_per_sweep) single moves.

        The length must not depend on the current state, otherwise sampling
        at sweep ends is biased."""
        return max(math.ceil(self.activity * volume), self.min_moves_per_sweep)


@dataclass
class MoveRecord:
    proposed: np.ndarray = field(default_factory=lambda: np.zeros(3, dtype=np.int64))
    accepted: np.ndarray = field(default_factory=lambda: np.zeros(3, dtype=np.int64))

    def merge(self, other: "MoveRecord") -> None:
        self.proposed += other.proposed
        self.accepted += other.accepted

    def acceptance_rates(self) -> dict:
        return {
            name: (float(self.accepted[k] / self.proposed[k]) if self.proposed[k] else float("nan"))
            for k, name in enumerate(MOVE_NAMES)
        }


# -- compiled move kernel ----------------------------------------------------


@njit(cache=True)
def _pair_energy(code, eps, sigma, rc2, core2, shift, r2):
    if code == 0 or r2 >= rc2:
        return 0.0
    if code == 1:
        if r2 < core2:
            return np.inf
        s2 = sigma * sigma / r2
        s6 = s2 * s2 * s2
        return 4.0 * eps * (s6 * s6 - s6) - shift
    u2 = r2 / (sigma * sigma)
    if u2 >= 1.0:
        return -shift
    return eps * np.exp(1.0 - 1.0 / (1.0 - u2)) - shift


@njit(cache=True)
def _site_energy(pos, n, skip, x, side, code, eps, sigma, rc2, core2, shift, use_field, use_pair):
    """phi(x) (field) + sum_{j != skip} phi(x - x_j) (pairs)."""
    d = x.shape[0]
    e = 0.0
    if use_field:
        r2 = 0.0
        for k in range(d):
            r2 += x[k] * x[k]
        e += _pair_energy(code, eps, sigma, rc2, core2, shift, r2)
    if use_pair:
        for j in range(n):
            if j == skip:
                continue
            r2 = 0.0
            for k in range(d):
                v = x[k] - pos[j, k]
                v = v - side * np.floor((v + 0.5 * side) / side)
                r2 += v * v
            e += _pair_energy(code, eps, sigma, rc2, core2, shift, r2)
    return e


@njit(cache=True)
def _gcmc_moves(pos, n, side, z, p_birth, p_death, scale, code, eps, sigma, rc2, core2, shift,
                use_field, use_pair, rand, proposed, accepted):
    d = pos.shape[1]
    volume = side**d
    x = np.empty(d)
    for t in range(rand.shape[0]):
        r = rand[t]
        u = r[0]
        if u < p_birth:
            proposed[0] += 1
            for k in range(d):
                x[k] = side * (r[3 + k] - 0.5)
            du = _site_energy(pos, n, -1, x, side, code, eps, sigma, rc2, core2, shift, use_field, use_pair)
            if du == np.inf or z == 0.0:
                continue
            ratio = z * volume * np.exp(-du) / (n + 1) * (p_death / p_birth)
            if r[2] < ratio:
                for k in range(d):
                    pos[n, k] = x[k]
                n += 1
                accepted[0] += 1
        elif u < p_birth + p_death:
            proposed[1] += 1
            if n == 0:
                continue
            i = min(int(r[1] * n), n - 1)
            for k in range(d):
                x[k] = pos[i, k]
            du = _site_energy(pos, n, i, x, side, code, eps, sigma, rc2, core2, shift, use_field, use_pair)
            ratio = n * np.exp(du) / (z * volume) * (p_birth / p_death) if z > 0.0 else np.inf
            if r[2] < ratio:
                # keep order: shift the tail down
                for j in range(i, n - 1):
                    for k in range(d):
                        pos[j, k] = pos[j + 1, k]
                n -= 1
                accepted[1] += 1
        else:
            proposed[2] += 1
            if n == 0:
                continue
            i = min(int(r[1] * n), n - 1)
            for k in range(d):
                v = pos[i, k] + scale * r[3 + d + k]
                x[k] = v - side * np.floor((v + 0.5 * side) / side)
            e_new = _site_energy(pos, n, i, x, side, code, eps, sigma, rc2, core2, shift, use_field, use_pair)
            if e_new == np.inf:
                continue
            e_old = _site_energy(pos, n, i, pos[i], side, code, eps, sigma, rc2, core2, shift, use_field, use_pair)
            if r[2] < np.exp(e_old - e_new):
                for k in range(d):
                    pos[i, k] = x[k]
                accepted[2] += 1
    return n


def _draw(rng: np.random.Generator, moves: int, d: int) -> np.ndarray:
    rand = np.empty((moves, 3 + 2 * d))
    rand[:, : 3 + d] = rng.random((moves, 3 + d))
    rand[:, 3 + d :] = rng.standard_normal((moves, d))
    return rand


def _run_moves(config: Configuration, params: GcmcParams, potential: PairPotential, rng, moves: int,
               record: MoveRecord) -> Configuration:
    box = config.box
    box.check_potential(potential)
    d = box.dimension
    rand = _draw(rng, moves, d)
    pos = np.zeros((config.n + moves, d))
    pos[: config.n] = config.positions
    code, eps, sigma, rc2, core2 = kernel_parameters(potential)
    p_birth, p_death, _ = params.move_mix
    n = _gcmc_moves(pos, config.n, float(box.side_length), float(params.activity), p_birth, p_death,
                    float(params.displacement_scale), code, eps, sigma, rc2, core2,
                    float(potential.shift_constant), bool(params.external_field), bool(params.pair_interaction),
                    rand, record.proposed, record.accepted)
    return Configuration(pos[:n].copy(), box)


def gcmc_step(config: Configuration, params: GcmcParams, potential: PairPotential, rng: np.random.Generator):
    """One Metropolis move.  Returns the new configuration and its record."""
    record = MoveRecord()
    return _run_moves(config, params, potential, rng, 1, record), record


def run_sweeps(config: Configuration, params: GcmcParams, potential: PairPotential, rng, sweeps: int,
               record: MoveRecord | None = None) -> Configuration:
    record = record if record is not None else MoveRecord()
    for _ in range(sweeps):
        config = _run_moves(config, params, potential, rng, params.moves_in_sweep(config.box.volume), record)
    return config


def sample_equilibrium(params: GcmcParams, potential: PairPotential, box: TorusBox, burn_in_sweeps: int,
                       rng: np.random.Generator | None = None, initial: Configuration | None = None) -> Configuration:
    """Configuration after ``burn_in_sweeps`` sweeps from ``initial`` (empty by default)."""
    if burn_in_sweeps < 0:
        raise ValueError("burn_in_sweeps must be >= 0")
    rng = rng if rng is not None else np.random.default_rng(params.seed)
    config = initial if initial is not None else Configuration.empty(box)
    return run_sweeps(config, params, potential, rng, burn_in_sweeps)


@dataclass
class ChainResult:
    samples: list
    counts: np.ndarray
    record: MoveRecord


def sample_chain(params: GcmcParams, potential: PairPotential, box: TorusBox, n_samples: int,
                 thin_sweeps: int = 1, burn_in_sweeps: int | None = None,
                 rng: np.random.Generator | None = None, initial: Configuration | None = None) -> ChainResult:
    """Burn in, then keep one configuration every ``thin_sweeps`` sweeps."""
    rng = rng if rng is not None else np.random.default_rng(params.seed)
    burn = params.sweeps if burn_in_sweeps is None else burn_in_sweeps
    config = sample_equilibrium(params, potential, box, burn, rng, initial)
    record = MoveRecord()
    samples = []
    for _ in range(n_samples):
        config = run_sweeps(config, params, potential, rng, thin_sweeps, record)
        samples.append(config)
    return ChainResult(samples, np.array([s.n for s in samples]), record)


def sample_independent(params: GcmcParams, potential: PairPotential, box: TorusBox, n_chains: int,
                       burn_in_sweeps: int, seed_base: int | None = None) -> list:
    """One burned-in configuration per chain; chain k is seeded with seed_base ^ k."""
    base = params.seed if seed_base is None else seed_base
    return [
        sample_equilibrium(params, potential, box, burn_in_sweeps, np.random.default_rng(np.random.SeedSequence(base ^ k)))
        for k in range(n_chains)
    ]


# -- analytic target and kernel (used by the detailed-balance checks) -------


def site_energy(config: Configuration, x, potential: PairPotential, params: GcmcParams, skip: int | None = None) -> float:
    """Energy of a particle at x with the field and all particles except ``skip``."""
    box = config.box
    x = np.asarray(x, float)
    e = 0.0
    if params.external_field:
        e += float(potential.evaluate(box.wrap(x)))
    if params.pair_interaction and config.n:
        others = np.delete(config.positions, skip, axis=0) if skip is not None else config.positions
        if len(others):
            e += float(np.sum(potential.evaluate(box.min_image(x, others))))
    return e


def total_energy(config: Configuration, potential: PairPotential, params: GcmcParams) -> float:
    e = 0.0
    for i in range(config.n):
        x = config.positions[i]
        if params.external_field:
            e += float(potential.evaluate(x))
        if params.pair_interaction:
            for j in range(i + 1, config.n):
                e += float(potential.evaluate(config.box.min_image(x, config.positions[j])))
    return e


def log_target(config: Configuration, potential: PairPotential, params: GcmcParams) -> float:
    """log of z^n exp(-U) (density w.r.t. the Lebesgue-Poisson measure)."""
    n = config.n
    if n and params.activity == 0:
        return -math.inf
    return (n * math.log(params.activity) if n else 0.0) - total_energy(config, potential, params)


def birth_acceptance(config: Configuration, x, potential: PairPotential, params: GcmcParams) -> float:
    du = site_energy(config, x, potential, params)
    if params.activity == 0 or du == math.inf:
        return 0.0
    p_b, p_d, _ = params.move_mix
    return min(1.0, params.activity * config.box.volume * math.exp(-du) / (config.n + 1) * (p_d / p_b))


def death_acceptance(config: Configuration, i: int, potential: PairPotential, params: GcmcParams) -> float:
    du = site_energy(config, config.positions[i], potential, params, skip=i)
    if params.activity == 0:
        return 1.0
    p_b, p_d, _ = params.move_mix
    return min(1.0, config.n * math.exp(du) / (params.activity * config.box.volume) * (p_b / p_d))


def displacement_acceptance(config: Configuration, i: int, x_new, potential: PairPotential, params: GcmcParams) -> float:
    e_new = site_energy(config, x_new, potential, params, skip=i)
    if e_new == math.inf:
        return 0.0
    e_old = site_energy(config, config.positions[i], potential, params, skip=i)
    return min(1.0, math.exp(e_old - e_new))


def transition_density(config: Configuration, move: int, potential: PairPotential, params: GcmcParams,
                       i: int | None = None, x=None) -> float:
    """Density of the one-move kernel toward the neighbor state described by
    ``move`` (birth at x, death of i, displacement of i to x).

    Birth densities are per unit volume, death densities per particle choice,
    displacement densities per unit volume of the new position.
    """
    p_b, p_d, p_m = params.move_mix
    if move == BIRTH:
        return p_b / config.box.volume * birth_acceptance(config, x, potential, params)
    if move == DEATH:
        return p_d / config.n * death_acceptance(config, i, potential, params)
    if move == DISPLACE:
        s = params.displacement_scale
        step = config.box.min_image(x, config.positions[i])
        d = config.box.dimension
        q = math.exp(-0.5 * float(step @ step) / s**2) / (2 * math.pi * s * s) ** (d / 2)
        return p_m / config.n * q * displacement_acceptance(config, i, x, potential, params)
    raise ValueError(f"unknown move {move}")


# -- two-site lattice gas ----------------------------------------------------


@dataclass(frozen=True)
class LatticeGas:
    """Sites with occupancy <= 1, site field ``h`` and pair couplings ``J``.
    Target weight of an occupied set S: z^|S| exp(-sum_S h - sum_{pairs in S} J)."""

    activity: float
    field: tuple
    coupling: tuple
    move_mix: tuple = (1 / 3, 1 / 3, 1 / 3)

    @property
    def sites(self) -> int:
        return len(self.field)

    def energy(self, occ) -> float:
        occ = np.asarray(occ, bool)
        h = np.asarray(self.field, float)
        J = np.asarray(self.coupling, float)
        return float(h[occ].sum() + 0.5 * (J[np.ix_(occ, occ)].sum() - np.trace(J[np.ix_(occ, occ)])))

    def states(self) -> list:
        return [tuple(bool(b) for b in s) for s in np.ndindex(*(2,) * self.sites)]

    def exact_distribution(self) -> dict:
        w = {s: self.activity ** sum(s) * math.exp(-self.energy(s)) for s in self.states()}
        total = sum(w.values())
        return {s: v / total for s, v in w.items()}

    def run(self, steps: int, rng: np.random.Generator, start=None) -> dict:
        """Empirical state frequencies along a chain of ``steps`` moves."""
        M = self.sites
        occ = np.zeros(M, bool) if start is None else np.asarray(start, bool).copy()
        p_b, p_d, _ = self.move_mix
        u = rng.random((steps, 4))
        counts = {s: 0 for s in self.states()}
        z = self.activity
        trace = np.empty(steps, dtype=np.int64)
        codes = {s: k for k, s in enumerate(self.states())}
        table = {s: self.energy(s) for s in self.states()}
        energy = lambda o: table[tuple(bool(b) for b in o)]  # noqa: E731
        for t in range(steps):
            n = int(occ.sum())
            e0 = energy(occ)
            if u[t, 0] < p_b:
                site = min(int(u[t, 1] * M), M - 1)
                if not occ[site]:
                    new = occ.copy()
                    new[site] = True
                    ratio = z * M * math.exp(e0 - energy(new)) / (n + 1) * (p_d / p_b)
                    if u[t, 2] < ratio:
                        occ = new
            elif u[t, 0] < p_b + p_d:
                if n:
                    idx = np.flatnonzero(occ)
                    site = idx[min(int(u[t, 1] * n), n - 1)]
                    new = occ.copy()
                    new[site] = False
                    ratio = n * math.exp(e0 - energy(new)) / (z * M) * (p_b / p_d) if z > 0 else math.inf
                    if u[t, 2] < ratio:
                        occ = new
            elif n:
                idx = np.flatnonzero(occ)
                src = idx[min(int(u[t, 1] * n), n - 1)]
                others = [s for s in range(M) if s != src]
                dst = others[min(int(u[t, 3] * len(others)), len(others) - 1)]
                if not occ[dst]:
                    new = occ.copy()
                    new[src], new[dst] = False, True
                    if u[t, 2] < math.exp(e0 - energy(new)):
                        occ = new
            key = tuple(bool(b) for b in occ)
            counts[key] += 1
            trace[t] = codes[key]
        return {"counts": counts, "trace": trace, "states": self.states()}
