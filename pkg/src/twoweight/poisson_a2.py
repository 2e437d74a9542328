"""Poisson integrals and Muckenhoupt-type constants for a weight pair.

All integrals are finite sums over the atoms of the measures, so every
value here is exact up to float rounding.  The suprema defining the
constants are taken over an enumerated cube family: every cube of each
supplied grid plus the augmented cubes (side-doubled cubes whose dyadic
children belong to the grid), restricted to cubes meeting the joint
support of the pair.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .grid import Cube, Grid
from .measure import Measure, common_points, mass, puncture

__all__ = [
    "A2Report",
    "poisson",
    "halfspace_poisson",
    "a2_constants",
    "enumerate_cubes",
]


# ---------------------------------------------------------------------------
# Poisson integrals


def _center_distances(q: Cube, mu: Measure) -> np.ndarray:
    c = np.array(q.center4, dtype=np.float64) / 2 ** (q.resolution + 2)
    if mu.natoms == 0:
        return np.zeros(0)
    d = mu.coords_float() - c
    return np.sqrt((d * d).sum(axis=1))


def poisson(kind: str, q: Cube, mu: Measure, alpha: float,
            delta: float | None = None) -> float:
    """Poisson integral of mu on the cube Q.

    standard     sum w * l / (l + |x - c|)^(n+1-alpha)
    reproducing  sum w * (l / (l + |x - c|)^2)^(n-alpha)
    small        sum w * l^(1+delta) / (l + |x - c|)^(n+1+delta-alpha)
    """
    n = mu.dim
    if not 0 <= alpha < n:
        raise ValueError("alpha must lie in [0, n)")
    if mu.natoms == 0:
        return 0.0
    ell = q.sidelength
    dist = _center_distances(q, mu)
    if kind == "standard":
        ker = ell / (ell + dist) ** (n + 1 - alpha)
    elif kind == "reproducing":
        ker = (ell / (ell + dist) ** 2) ** (n - alpha)
    elif kind == "small":
        if delta is None or delta <= 0:
            raise ValueError("kind='small' needs delta > 0")
        ker = ell ** (1 + delta) / (ell + dist) ** (n + 1 + delta - alpha)
    else:
        raise ValueError(f"unknown Poisson kind {kind!r}")
    return float(np.dot(mu.masses, ker))


def halfspace_poisson(direction: str, *, alpha: float, n: int,
                      x=None, t: float | None = None, rho: Measure | None = None,
                      upper_atoms=None) -> float:
    """Upper-half-space Poisson integral or its dual.

    forward: value at (x, t), t > 0, of the half-space kernel applied to
             the measure rho on R^n:  sum w * t / (t^2+|x-y|^2)^((n+1-alpha)/2).
    dual:    value at x of the dual kernel applied to an atomic measure on
             the upper half space, given as (ys, ts, ws):
             sum w * t^2 / (t^2+|x-y|^2)^((n+1-alpha)/2).
    """
    ex = (n + 1 - alpha) / 2
    if direction == "forward":
        if t is None or t <= 0:
            raise ValueError("forward kernel needs t > 0")
        if rho is None or rho.natoms == 0:
            return 0.0
        d = rho.coords_float() - np.asarray(x, dtype=np.float64)
        d2 = (d * d).sum(axis=1)
        return float(np.dot(rho.masses, t / (t * t + d2) ** ex))
    if direction == "dual":
        if upper_atoms is None:
            return 0.0
        ys, ts, ws = upper_atoms
        ys = np.atleast_2d(np.asarray(ys, dtype=np.float64))
        ts = np.asarray(ts, dtype=np.float64)
        ws = np.asarray(ws, dtype=np.float64)
        if len(ws) == 0:
            return 0.0
        if np.any(ts <= 0):
            raise ValueError("upper-half-space atoms need t > 0")
        d = ys - np.asarray(x, dtype=np.float64)
        d2 = (d * d).sum(axis=1)
        return float(np.dot(ws, ts ** 2 / (ts ** 2 + d2) ** ex))
    raise ValueError(f"unknown direction {direction!r}")


# ---------------------------------------------------------------------------
# cube enumeration


def _support_bounds(ms, grid_res):
    pts = [m.rescale(grid_res).points for m in ms if m.natoms]
    if not pts:
        return None
    allp = np.vstack(pts)
    return tuple(allp.min(axis=0)), tuple(allp.max(axis=0) + 1)


def enumerate_cubes(grids, sigma: Measure, omega: Measure,
                    include_augmented: bool = True):
    """All cubes of the grids (plus augmented ones) meeting the supports."""
    seen = set()
    for g in grids:
        b = _support_bounds((sigma, omega), g.M)
        if b is None:
            continue
        lo, hi = b
        for q in g.cubes(lo, hi):
            if q not in seen:
                seen.add(q)
                yield q
        if include_augmented:
            for q in g.augmented_cubes(lo, hi):
                if q not in seen:
                    seen.add(q)
                    yield q


# ---------------------------------------------------------------------------
# Muckenhoupt constants


@dataclass
class A2Report:
    calA2: float = 0.0
    calA2_star: float = 0.0
    classicalA2: float = 0.0
    classicalA2_diverges: bool = False
    punct: float = 0.0
    punct_star: float = 0.0
    energyA2: float = 0.0
    energyA2_star: float = 0.0
    witnesses: dict = field(default_factory=dict)

    @property
    def aggregate(self) -> float:
        return self.calA2 + self.calA2_star + self.punct + self.punct_star

    def as_dict(self) -> dict:
        return {
            "calA2": self.calA2,
            "calA2_star": self.calA2_star,
            "classicalA2": self.classicalA2,
            "classicalA2_diverges": self.classicalA2_diverges,
            "punct": self.punct,
            "punct_star": self.punct_star,
            "energyA2": self.energyA2,
            "energyA2_star": self.energyA2_star,
            "aggregate": self.aggregate,
            "witnesses": {k: {"lo": list(q.lo), "side": q.side,
                              "resolution": q.resolution}
                          for k, q in self.witnesses.items()},
        }


def _norm_moment(q: Cube, mu: Measure) -> float:
    """Integral of |x - m_Q|^2 over Q against mu (0 on empty cubes)."""
    lo = np.array(q.lo, dtype=np.int64) * 2 ** (mu.resolution - q.resolution)
    hi = lo + q.side * 2 ** (mu.resolution - q.resolution)
    sel = mu.in_box(lo, hi)
    w = mu.masses[sel]
    tot = float(w.sum())
    if tot <= 0:
        return 0.0
    xs = mu.coords_float()[sel]
    m = (w[:, None] * xs).sum(axis=0) / tot
    d2 = ((xs - m) ** 2).sum(axis=1)
    return float(np.dot(w, d2))


def a2_constants(sigma: Measure, omega: Measure, grids, alpha: float,
                 include_augmented: bool = True) -> A2Report:
    """Muckenhoupt constants of the pair over an enumerated cube family.

    The energy variants are evaluated with the plain martingale projection
    (unit testing functions), for which the sharp-norm square of x/l(Q)
    collapses to the normalized second moment of omega (resp. sigma) on Q.
    """
    if sigma.dim != omega.dim or sigma.resolution != omega.resolution:
        raise ValueError("weight pair must share dimension and resolution")
    n = sigma.dim
    if not 0 <= alpha < n:
        raise ValueError("alpha must lie in [0, n)")
    pts = common_points(sigma, omega)
    rep = A2Report(classicalA2_diverges=bool(pts))
    for q in enumerate_cubes(grids, sigma, omega, include_augmented):
        ell = q.sidelength
        size = ell ** (n - alpha)  # |Q|^(1 - alpha/n)
        f = 2 ** (sigma.resolution - q.resolution)
        lo = np.array(q.lo, dtype=np.int64) * f
        hi = lo + q.side * f
        s_in = sigma.in_box(lo, hi)
        w_in = omega.in_box(lo, hi)
        qs = float(sigma.masses[s_in].sum())
        qw = float(omega.masses[w_in].sum())
        if qs == 0.0 and qw == 0.0:
            continue
        box = (tuple(lo), tuple(hi))
        cands = {}
        if qw > 0.0:
            hole = poisson("reproducing", q, sigma.subset(~s_in), alpha)
            cands["calA2"] = hole * qw / size
        if qs > 0.0:
            hole = poisson("reproducing", q, omega.subset(~w_in), alpha)
            cands["calA2_star"] = hole * qs / size
        if qs > 0.0 and qw > 0.0:
            cands["classicalA2"] = qs * qw / size ** 2
        if qs > 0.0:
            cands["punct"] = puncture(box, omega, pts) * qs / size ** 2
        if qw > 0.0:
            cands["punct_star"] = puncture(box, sigma, pts) * qw / size ** 2
        if qs > 0.0:
            cands["energyA2"] = (_norm_moment(q, omega) / ell ** 2) \
                * qs / size ** 2
        if qw > 0.0:
            cands["energyA2_star"] = (_norm_moment(q, sigma) / ell ** 2) \
                * qw / size ** 2
        for key, val in cands.items():
            if val > getattr(rep, key):
                setattr(rep, key, val)
                rep.witnesses[key] = q
    return rep
