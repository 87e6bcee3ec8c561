"""Finite configurations on the periodic torus [-L/2, L/2)^d.

Pair sums use the minimum-image convention and a cell list with cell side
>= r_c (neighbor search over the 3^d adjacent cells).
"""
from __future__ import annotations

import csv
import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .potential import PairPotential

DEFAULT_FORCE_CAP = 1e6


@dataclass(frozen=True)
class TorusBox:
    side_length: float
    dimension: int

    def __post_init__(self):
        if not self.side_length > 0:
            raise ValueError("side_length must be positive")
        if self.dimension < 1:
            raise ValueError("dimension must be >= 1")

    @property
    def volume(self) -> float:
        return self.side_length**self.dimension

    @property
    def half(self) -> float:
        return 0.5 * self.side_length

    def wrap(self, x):
        """Representative of x in [-L/2, L/2)^d."""
        x = np.asarray(x, dtype=float)
        L = self.side_length
        return x - L * np.floor((x + 0.5 * L) / L)

    def min_image(self, x, y=None):
        """Representative of x - y with every coordinate in [-L/2, L/2)."""
        diff = np.asarray(x, dtype=float) if y is None else np.asarray(x, dtype=float) - np.asarray(y, dtype=float)
        return self.wrap(diff)

    def check_potential(self, potential: PairPotential) -> None:
        if potential.dimension != self.dimension:
            raise ValueError("potential and box dimensions differ")
        if not potential.is_zero and potential.cutoff_radius > self.half * (1 + 1e-12):
            raise ValueError(
                f"cutoff radius {potential.cutoff_radius} exceeds half the box side {self.half}; "
                "truncate the potential first"
            )


def min_image(box: TorusBox, x, y):
    return box.min_image(x, y)


class CellList:
    """Cell index with side >= r_c.  Rebuilding never changes query results."""

    def __init__(self, positions: np.ndarray, box: TorusBox, r_c: float):
        self.box = box
        self.r_c = float(r_c)
        L, d = box.side_length, box.dimension
        self.ncell = max(1, int(math.floor(L / r_c))) if math.isfinite(r_c) and r_c > 0 else 1
        self.width = L / self.ncell
        idx = np.floor((np.asarray(positions) + 0.5 * L) / self.width).astype(int) % self.ncell
        flat = np.ravel_multi_index(idx.T, (self.ncell,) * d) if len(positions) else np.zeros(0, int)
        order = np.argsort(flat, kind="stable")
        self.members = {}
        for k in order:
            self.members.setdefault(int(flat[k]), []).append(int(k))
        self.cell_of = flat

    def neighbor_cells(self, cell: int) -> list:
        d, m = self.box.dimension, self.ncell
        coord = np.unravel_index(cell, (m,) * d)
        out = set()
        for off in itertools.product((-1, 0, 1), repeat=d):
            c = tuple((ci + oi) % m for ci, oi in zip(coord, off))
            out.add(int(np.ravel_multi_index(c, (m,) * d)))
        return sorted(out)

    def candidate_pairs(self):
        """Index pairs (i < j) from the same or adjacent cells, each once."""
        ii, jj = [], []
        for c, mem in self.members.items():
            for c2 in self.neighbor_cells(c):
                if c2 < c or c2 not in self.members:
                    continue
                a = np.asarray(mem)
                b = np.asarray(self.members[c2])
                if c2 == c:
                    iu, ju = np.triu_indices(len(a), k=1)
                    ii.append(a[iu])
                    jj.append(a[ju])
                else:
                    A, B = np.meshgrid(a, b, indexing="ij")
                    ii.append(A.ravel())
                    jj.append(B.ravel())
        if not ii:
            return np.zeros(0, int), np.zeros(0, int)
        i = np.concatenate(ii)
        j = np.concatenate(jj)
        lo, hi = np.minimum(i, j), np.maximum(i, j)
        return lo, hi

    def candidates_near(self, x) -> np.ndarray:
        L = self.box.side_length
        idx = np.floor((np.asarray(x, float) + 0.5 * L) / self.width).astype(int) % self.ncell
        c = int(np.ravel_multi_index(tuple(idx), (self.ncell,) * self.box.dimension))
        out = [self.members[c2] for c2 in self.neighbor_cells(c) if c2 in self.members]
        return np.asarray(sorted(itertools.chain.from_iterable(out)), dtype=int)


@dataclass
class Configuration:
    """Finite point set on the torus; coincident points are allowed."""

    positions: np.ndarray
    box: TorusBox
    _cells: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=float).reshape(-1, self.box.dimension)
        self.positions = self.box.wrap(pos)

    @classmethod
    def empty(cls, box: TorusBox) -> "Configuration":
        return cls(np.zeros((0, box.dimension)), box)

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def n(self) -> int:
        return len(self.positions)

    def copy(self) -> "Configuration":
        return Configuration(self.positions.copy(), self.box)

    def with_positions(self, positions) -> "Configuration":
        return Configuration(positions, self.box)

    def add(self, x) -> "Configuration":
        return Configuration(np.vstack([self.positions, np.reshape(x, (1, -1))]), self.box)

    def remove(self, i: int) -> "Configuration":
        return Configuration(np.delete(self.positions, i, axis=0), self.box)

    def cell_index(self, r_c: float) -> CellList:
        if r_c not in self._cells:
            self._cells.clear()
            self._cells[r_c] = CellList(self.positions, self.box, r_c)
        return self._cells[r_c]

    def rebuild_index(self) -> None:
        self._cells.clear()


def _interaction_range(potential: PairPotential, box: TorusBox) -> float:
    box.check_potential(potential)
    return potential.cutoff_radius if potential.is_truncated else box.half


def neighbor_pairs(config: Configuration, r_c: float, method: str = "cells"):
    """All pairs i < j with minimum-image separation below ``r_c``.

    Returns ``(i, j, disp)`` with ``disp[k] = min_image(x_i - x_j)``.
    """
    n = config.n
    if method == "naive" or n < 2:
        i, j = np.triu_indices(n, k=1)
    elif method == "cells":
        i, j = config.cell_index(r_c).candidate_pairs()
    else:
        raise ValueError(f"unknown method {method!r}")
    disp = config.box.min_image(config.positions[i], config.positions[j])
    keep = np.sum(disp * disp, axis=-1) < r_c * r_c
    i, j, disp = i[keep], j[keep], disp[keep]
    order = np.lexsort((j, i))
    return i[order], j[order], disp[order]


def linear_statistic(config: Configuration, h) -> float:
    """<h, gamma> = sum of h over the particles (h vectorized over (n, d))."""
    if config.n == 0:
        probe = np.asarray(h(np.zeros((1, config.box.dimension))))
        return np.zeros(probe.shape[1:]) if probe.ndim > 1 else 0.0
    return np.sum(np.asarray(h(config.positions)), axis=0)


def interaction_energy(config: Configuration, potential: PairPotential, method: str = "cells") -> float:
    """Sum of phi over unordered pairs; +inf if a pair sits in the core."""
    r_c = _interaction_range(potential, config.box)
    if potential.is_zero or config.n < 2:
        return 0.0
    _, _, disp = neighbor_pairs(config, r_c, method)
    if len(disp) == 0:
        return 0.0
    return float(np.sum(potential.evaluate(disp)))


def local_energy(config: Configuration, x, potential: PairPotential, method: str = "cells") -> float:
    """W(x, gamma): energy of a ghost particle at x with every particle."""
    r_c = _interaction_range(potential, config.box)
    if potential.is_zero or config.n == 0:
        return 0.0
    if method == "cells":
        idx = config.cell_index(r_c).candidates_near(config.box.wrap(x))
    else:
        idx = np.arange(config.n)
    if len(idx) == 0:
        return 0.0
    disp = config.box.min_image(np.asarray(x, float), config.positions[idx])
    return float(np.sum(potential.evaluate(disp)))


@dataclass
class ForceDiagnostics:
    cap_events: int = 0
    evaluations: int = 0


def capped_pair_gradients(disp, potential: PairPotential, f_max: float = DEFAULT_FORCE_CAP, diagnostics=None):
    """grad phi at each displacement, rescaled to norm ``f_max`` when larger.
    Pairs inside the core contribute zero and count as cap events."""
    disp = np.asarray(disp, float)
    r2 = np.sum(disp * disp, axis=-1)
    core = r2 < potential.core_radius**2
    with np.errstate(all="ignore"):
        g = potential.gradient_coefficient(np.where(core, 1.0, r2))[..., None] * disp
    g[core] = 0.0
    norm = np.sqrt(np.sum(g * g, axis=-1))
    big = norm > f_max
    if np.any(big):
        g[big] *= (f_max / norm[big])[:, None]
    if diagnostics is not None:
        diagnostics.cap_events += int(np.sum(big)) + (0 if potential.is_zero else int(np.sum(core)))
        diagnostics.evaluations += len(r2)
    return g


def all_pair_forces(config: Configuration, potential: PairPotential, f_max: float = DEFAULT_FORCE_CAP,
                    diagnostics: ForceDiagnostics | None = None, method: str = "cells") -> np.ndarray:
    """Drift -sum_{j != i} grad phi(x_i - x_j) for every particle."""
    out = np.zeros_like(config.positions)
    if potential.is_zero or config.n < 2:
        return out
    r_c = _interaction_range(potential, config.box)
    i, j, disp = neighbor_pairs(config, r_c, method)
    g = capped_pair_gradients(disp, potential, f_max, diagnostics)
    np.add.at(out, i, -g)
    np.add.at(out, j, g)
    return out


def pair_force(config: Configuration, i: int, potential: PairPotential, f_max: float = DEFAULT_FORCE_CAP,
               diagnostics: ForceDiagnostics | None = None, method: str = "cells") -> np.ndarray:
    """Drift on particle i from all others."""
    if not 0 <= i < config.n:
        raise IndexError(f"particle index {i} out of range for {config.n} particles")
    d = config.box.dimension
    if potential.is_zero or config.n < 2:
        return np.zeros(d)
    r_c = _interaction_range(potential, config.box)
    if method == "cells":
        idx = config.cell_index(r_c).candidates_near(config.positions[i])
    else:
        idx = np.arange(config.n)
    idx = idx[idx != i]
    disp = config.box.min_image(config.positions[i], config.positions[idx])
    keep = np.sum(disp * disp, axis=-1) < r_c * r_c
    g = capped_pair_gradients(disp[keep], potential, f_max, diagnostics)
    return -np.sum(g, axis=0)


def recenter(config: Configuration, xi) -> Configuration:
    """Environment seen from a particle at xi: positions x - xi (wrapped)."""
    return Configuration(config.box.min_image(config.positions, np.asarray(xi, float)), config.box)


# -- snapshot files ----------------------------------------------------------


def save_snapshot(config: Configuration, path, sidecar: bool = True) -> None:
    """CSV ``particle,x1,...,xd`` plus (optionally) a JSON sidecar with the box."""
    path = Path(path)
    d = config.box.dimension
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["particle"] + [f"x{k + 1}" for k in range(d)])
        for i, x in enumerate(config.positions):
            w.writerow([i] + [repr(float(v)) for v in x])
    if sidecar:
        meta = {"side_length": config.box.side_length, "dimension": d}
        path.with_suffix(".json").write_text(json.dumps(meta, indent=2))


def load_snapshot(path, box: TorusBox | None = None) -> Configuration:
    path = Path(path)
    if box is None:
        meta = json.loads(path.with_suffix(".json").read_text())
        box = TorusBox(float(meta["side_length"]), int(meta["dimension"]))
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    if header[0] != "particle" or len(header) != box.dimension + 1:
        raise ValueError(f"unexpected snapshot header {header}")
    pos = np.array([[float(v) for v in r[1:]] for r in body], dtype=float).reshape(-1, box.dimension)
    return Configuration(pos, box)
