"""Finite atomic measures on the dyadic lattice.

Atoms live on the lattice (1/2^M)Z^n so that cube membership is exact
integer arithmetic.  Masses are stored both as floats (for numerics) and
as the original decimal strings (for bit-exact round trips through the
file format).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Measure",
    "PointSet",
    "mass",
    "average_and_moment",
    "common_points",
    "puncture",
    "load_measure",
    "dump_measure",
]


def _mass_str(m) -> str:
    if isinstance(m, str):
        return m
    return repr(float(m))


@dataclass(frozen=True)
class Measure:
    """Finite atomic nonnegative measure at resolution 2^-M.

    points : integer numerators, shape (natoms, dim); atom i sits at
             points[i] / 2^resolution.
    masses : strictly positive atom masses, shape (natoms,).
    """

    dim: int
    resolution: int
    points: np.ndarray
    masses: np.ndarray
    mass_strs: tuple = field(default=(), compare=False)

    @staticmethod
    def from_atoms(dim, resolution, atoms) -> "Measure":
        """Build a measure from (coords, mass) pairs, merging duplicates."""
        merged: dict[tuple, float] = {}
        strs: dict[tuple, str] = {}
        for coords, m in atoms:
            key = tuple(int(c) for c in coords)
            if len(key) != dim:
                raise ValueError(f"atom {key} has dim {len(key)}, expected {dim}")
            fm = float(m)
            if fm <= 0:
                raise ValueError(f"atom at {key} has nonpositive mass {m}")
            if key in merged:
                merged[key] += fm
                strs[key] = repr(merged[key])
            else:
                merged[key] = fm
                strs[key] = _mass_str(m)
        keys = sorted(merged)
        pts = np.array(keys, dtype=np.int64).reshape(len(keys), dim)
        ms = np.array([merged[k] for k in keys], dtype=np.float64)
        return Measure(dim, resolution, pts, ms, tuple(strs[k] for k in keys))

    @property
    def natoms(self) -> int:
        return len(self.masses)

    @property
    def total_mass(self) -> float:
        return float(self.masses.sum())

    def coords_float(self) -> np.ndarray:
        """Atom locations as floats (exact: dyadic rationals)."""
        return self.points.astype(np.float64) / float(2 ** self.resolution)

    def in_box(self, lo, hi) -> np.ndarray:
        """Boolean mask of atoms in the half-open box [lo, hi), lattice units."""
        lo = np.asarray(lo, dtype=np.int64)
        hi = np.asarray(hi, dtype=np.int64)
        return np.all((self.points >= lo) & (self.points < hi), axis=1)

    def in_box4(self, lo4, hi4) -> np.ndarray:
        """Membership against a box given in quarter-lattice units 2^-(M+2)."""
        p4 = self.points * 4
        lo4 = np.asarray(lo4, dtype=np.int64)
        hi4 = np.asarray(hi4, dtype=np.int64)
        return np.all((p4 >= lo4) & (p4 < hi4), axis=1)

    def rescale(self, resolution: int) -> "Measure":
        """Re-express atoms at a finer lattice 2^-resolution (exact)."""
        if resolution < self.resolution:
            raise ValueError("can only rescale to a finer resolution")
        f = 2 ** (resolution - self.resolution)
        return Measure(self.dim, resolution, self.points * f, self.masses,
                       self.mass_strs)

    def subset(self, mask) -> "Measure":
        """Restriction of the measure to the atoms selected by the mask."""
        mask = np.asarray(mask, dtype=bool)
        strs = self.mass_strs or tuple(repr(m) for m in self.masses)
        return Measure(self.dim, self.resolution, self.points[mask],
                       self.masses[mask],
                       tuple(s for s, keep in zip(strs, mask) if keep))

    def scaled(self, lam: float) -> "Measure":
        return Measure(self.dim, self.resolution, self.points,
                       self.masses * lam,
                       tuple(repr(m * lam) for m in self.masses))


PointSet = frozenset  # of integer coordinate tuples at a shared resolution


def _box_of(q):
    """(lo, hi) lattice-unit corners for a Cube or (lo, hi) pair."""
    if hasattr(q, "lo"):
        lo = np.asarray(q.lo, dtype=np.int64)
        return lo, lo + q.side
    lo, hi = q
    return np.asarray(lo, dtype=np.int64), np.asarray(hi, dtype=np.int64)


def mass(q_or_region, mu: Measure) -> float:
    """Total mu-mass of a cube, an (lo, hi) box, or a Region."""
    if hasattr(q_or_region, "boxes4"):  # Region in quarter units
        total = 0.0
        seen = np.zeros(mu.natoms, dtype=bool)
        for lo4, hi4 in q_or_region.boxes4:
            seen |= mu.in_box4(lo4, hi4)
        return float(mu.masses[seen].sum())
    lo, hi = _box_of(q_or_region)
    return float(mu.masses[mu.in_box(lo, hi)].sum())


def average_and_moment(q, mu: Measure, f=None):
    """(E_Q f, barycenter m_Q, flag) under mu; zero-mass cubes flag as empty.

    f is a vector of values over the atoms of mu (defaults to 1).
    """
    lo, hi = _box_of(q)
    sel = mu.in_box(lo, hi)
    w = mu.masses[sel]
    tot = float(w.sum())
    if tot <= 0.0:
        return 0.0, np.zeros(mu.dim), False
    if f is None:
        avg = 1.0
    else:
        avg = float(np.dot(w, np.asarray(f, dtype=np.float64)[sel])) / tot
    xs = mu.coords_float()[sel]
    m = (w[:, None] * xs).sum(axis=0) / tot
    return avg, m, True


def common_points(sigma: Measure, omega: Measure) -> PointSet:
    """Common atom locations of two measures at the same resolution."""
    if sigma.resolution != omega.resolution:
        raise ValueError("measures must share a resolution")
    a = {tuple(p) for p in sigma.points}
    b = {tuple(p) for p in omega.points}
    return frozenset(a & b)


def puncture(q, mu: Measure, pts: PointSet) -> float:
    """|Q|_mu minus the largest single mu-atom located in Q intersect pts."""
    lo, hi = _box_of(q)
    sel = mu.in_box(lo, hi)
    total = float(mu.masses[sel].sum())
    best = 0.0
    for i in np.nonzero(sel)[0]:
        if tuple(mu.points[i]) in pts:
            best = max(best, float(mu.masses[i]))
    return total - best


# ---------------------------------------------------------------------------
# file format


def dump_measure(mu: Measure) -> str:
    strs = mu.mass_strs or tuple(repr(m) for m in mu.masses)
    atoms = [
        {"num": [int(c) for c in mu.points[i]], "mass": strs[i]}
        for i in range(mu.natoms)
    ]
    return json.dumps(
        {"dim": mu.dim, "resolution": mu.resolution, "atoms": atoms},
        indent=1,
    )


def load_measure(text: str) -> Measure:
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as e:
        raise ValueError(f"measure parse error at line {e.lineno}: {e.msg}") from e
    for key in ("dim", "resolution", "atoms"):
        if key not in obj:
            raise ValueError(f"measure file missing field {key!r}")
    return Measure.from_atoms(
        obj["dim"],
        obj["resolution"],
        [(a["num"], a["mass"]) for a in obj["atoms"]],
    )
