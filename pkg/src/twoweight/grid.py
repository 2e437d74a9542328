"""Truncated dyadic grids and their geometry.

All coordinates are integers.  A grid at resolution M works in lattice
units of 2^-M; regions, bodies and distances use quarter units 2^-(M+2)
so that centers, thirds-of-corners and halo endpoints stay exact.

Two parameterizations of the random grids are supported:

* Construction #1: independent scale bits beta_i in {0,1} per axis for
  each level i in (N, M].  The level-l offset (lattice units) is
  off(l) = sum_{i=l+1}^{M} 2^{M-i} beta_i, so off(M) = 0 and
  off(l) = off(l+1) + 2^{M-l-1} beta_{l+1}, which forces nesting.
* Construction #2: a single translation g in [0, 2^{M-N}) applied to
  every level.

Both have parameter space of size 2^{n(M-N)}.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

__all__ = [
    "Grid",
    "Cube",
    "Region",
    "make_grid",
    "relatives",
    "whitney",
    "body",
    "skeleton",
    "is_eps_good",
    "sharp_cross",
    "m_deep",
    "halo_region",
    "bad_probability_mc",
    "dist2_boxes4",
    "dist_cube_to_region",
    "scaled_box4",
]


# ---------------------------------------------------------------------------
# types


@dataclass(frozen=True)
class Grid:
    """Truncated dyadic grid on levels N..M (side of a level-l cube: 2^-l).

    offsets[axis][l - N] is the level-l offset in lattice units 2^-M.
    """

    dim: int
    M: int
    N: int
    offsets: tuple

    def off(self, level: int) -> tuple:
        return tuple(self.offsets[a][level - self.N] for a in range(self.dim))

    def side_units(self, level: int) -> int:
        return 2 ** (self.M - level)

    def cube(self, level: int, coords) -> "Cube":
        s = self.side_units(level)
        off = self.off(level)
        lo = tuple(off[a] + s * int(coords[a]) for a in range(self.dim))
        return Cube(self.M, lo, s, level, self)

    def cube_containing(self, level: int, point_units) -> "Cube":
        """The level-`level` grid cube whose half-open box contains the point."""
        s = self.side_units(level)
        off = self.off(level)
        coords = tuple((int(point_units[a]) - off[a]) // s
                       for a in range(self.dim))
        return self.cube(level, coords)

    def cubes_at_level(self, level: int, lo_units=None, hi_units=None):
        """All level-`level` cubes meeting the box [lo, hi) (default [0,1)^n)."""
        s = self.side_units(level)
        off = self.off(level)
        lo = lo_units if lo_units is not None else (0,) * self.dim
        hi = hi_units if hi_units is not None else (2 ** self.M,) * self.dim
        ranges = []
        for a in range(self.dim):
            k0 = math.floor((lo[a] - off[a]) / s)
            k1 = math.ceil((hi[a] - off[a]) / s)
            ranges.append(range(k0, k1))
        for coords in itertools.product(*ranges):
            yield self.cube(level, coords)

    def cubes(self, lo_units=None, hi_units=None):
        for level in range(self.N, self.M + 1):
            yield from self.cubes_at_level(level, lo_units, hi_units)

    def augmented_cubes_at_level(self, level: int, lo_units=None,
                                 hi_units=None):
        """Cubes of side 2^-level whose dyadic children are grid cubes.

        Corners range over the level-(level+1) lattice, so the family
        contains the grid cubes of that side themselves.
        """
        if level >= self.M:
            return
        s = self.side_units(level)
        half = s // 2
        off = self.off(level + 1)
        lo = lo_units if lo_units is not None else (0,) * self.dim
        hi = hi_units if hi_units is not None else (2 ** self.M,) * self.dim
        ranges = []
        for a in range(self.dim):
            k0 = math.floor((lo[a] - off[a] - s) / half) + 1
            k1 = math.ceil((hi[a] - off[a]) / half)
            ranges.append(range(k0, k1))
        for coords in itertools.product(*ranges):
            clo = tuple(off[a] + half * coords[a] for a in range(self.dim))
            yield Cube(self.M, clo, s, level, None)

    def augmented_cubes(self, lo_units=None, hi_units=None):
        for level in range(self.N, self.M):
            yield from self.augmented_cubes_at_level(level, lo_units, hi_units)


@dataclass(frozen=True)
class Cube:
    """Half-open cube lo + [0, side)^n in lattice units 2^-resolution.

    `grid` is a navigation handle only; augmented cubes carry grid=None.
    Identity is purely geometric.
    """

    resolution: int
    lo: tuple
    side: int
    level: int = field(compare=False)
    grid: Grid | None = field(default=None, compare=False, repr=False)

    @property
    def dim(self) -> int:
        return len(self.lo)

    @property
    def hi(self) -> tuple:
        return tuple(x + self.side for x in self.lo)

    @property
    def sidelength(self) -> float:
        return self.side / 2.0 ** self.resolution

    @property
    def lo4(self) -> tuple:
        return tuple(4 * x for x in self.lo)

    @property
    def hi4(self) -> tuple:
        return tuple(4 * (x + self.side) for x in self.lo)

    @property
    def center4(self) -> tuple:
        return tuple(4 * x + 2 * self.side for x in self.lo)

    def center(self) -> np.ndarray:
        return np.array(self.center4, dtype=np.float64) / 2.0 ** (self.resolution + 2)

    def corner(self) -> np.ndarray:
        return np.array(self.lo, dtype=np.float64) / 2.0 ** self.resolution

    def contains_cube(self, other: "Cube") -> bool:
        return all(self.lo[a] <= other.lo[a]
                   and other.lo[a] + other.side <= self.lo[a] + self.side
                   for a in range(self.dim))

    def contains_point_units(self, p) -> bool:
        return all(self.lo[a] <= p[a] < self.lo[a] + self.side
                   for a in range(self.dim))

    def meets(self, other: "Cube") -> bool:
        return all(self.lo[a] < other.lo[a] + other.side
                   and other.lo[a] < self.lo[a] + self.side
                   for a in range(self.dim))

    def parent(self) -> "Cube":
        if self.grid is None:
            raise ValueError("cube has no grid handle")
        if self.level <= self.grid.N:
            raise ValueError("parent would leave the truncated level range")
        return self.grid.cube_containing(self.level - 1, self.lo)

    def children(self) -> list:
        if self.level >= self.resolution:
            raise ValueError("children would leave the truncated level range")
        half = self.side // 2
        out = []
        for bits in itertools.product((0, 1), repeat=self.dim):
            lo = tuple(self.lo[a] + half * bits[a] for a in range(self.dim))
            out.append(Cube(self.resolution, lo, half, self.level + 1, self.grid))
        return out


@dataclass(frozen=True)
class Region:
    """Finite union of boxes in quarter units 2^-(resolution+2).

    Boxes may be degenerate (hi == lo on some axis); those carry no mass
    but participate in distance computations as closed sets.
    """

    resolution: int
    boxes4: tuple

    def volume(self) -> float:
        unit = (1.0 / 2 ** (self.resolution + 2)) ** len(self.boxes4[0][0]) \
            if self.boxes4 else 0.0
        tot = 0
        for lo4, hi4 in self.boxes4:
            v = 1
            for a in range(len(lo4)):
                v *= hi4[a] - lo4[a]
            tot += v
        return tot * unit


# ---------------------------------------------------------------------------
# construction


def make_grid(dim: int, M: int, N: int, param) -> Grid:
    """Build a grid from a parameter spec.

    param is a dict with "kind" one of:
      "beta"   bits[axis][i] for levels i = N+1..M (Construction #1)
      "gamma"  g[axis], integer translation in lattice units, 0 <= g < 2^{M-N}
      "random" seed; draws Construction #1 bits reproducibly
    """
    if not (N <= 0 <= M):
        raise ValueError(f"need N <= 0 <= M, got N={N}, M={M}")
    if N < -16 or M > 20:
        raise ValueError("levels outside the supported range [-16, 20]")
    kind = param["kind"]
    if kind == "random":
        rng = np.random.default_rng(param["seed"])
        bits = rng.integers(0, 2, size=(dim, M - N))
        param = {"kind": "beta", "bits": bits.tolist()}
        kind = "beta"
    if kind == "beta":
        bits = param["bits"]
        if len(bits) != dim or any(len(b) != M - N for b in bits):
            raise ValueError(f"need {dim} axes of {M - N} bits")
        offsets = []
        for a in range(dim):
            offs = [0] * (M - N + 1)  # index: level - N
            for lev in range(M - 1, N - 1, -1):
                b = int(bits[a][lev + 1 - (N + 1)])
                if b not in (0, 1):
                    raise ValueError("scale bits must be 0 or 1")
                offs[lev - N] = offs[lev + 1 - N] + b * 2 ** (M - lev - 1)
            offsets.append(tuple(offs))
        return Grid(dim, M, N, tuple(offsets))
    if kind == "gamma":
        g = param["g"]
        if len(g) != dim:
            raise ValueError(f"need {dim} translation components")
        offsets = []
        for a in range(dim):
            ga = int(g[a])
            if not 0 <= ga < 2 ** (M - N):
                raise ValueError(f"translation {ga} outside [0, 2^(M-N))")
            offsets.append(tuple(ga for _ in range(N, M + 1)))
        return Grid(dim, M, N, tuple(offsets))
    raise ValueError(f"unknown grid construction {kind!r}")


# ---------------------------------------------------------------------------
# relations


def relatives(q: Cube, k: int = 1):
    """k-fold parent, children, grandchildren and inner/outer split."""
    anc = q
    for _ in range(k):
        anc = anc.parent()
    kids = q.children() if q.level < q.resolution else []
    grand = [g for c in kids for g in c.children()] \
        if q.level + 1 < q.resolution else []
    inner, outer = [], []
    for g in grand:
        touches = any(g.lo[a] == q.lo[a]
                      or g.lo[a] + g.side == q.lo[a] + q.side
                      for a in range(q.dim))
        (outer if touches else inner).append(g)
    return anc, kids, grand, inner, outer


# ---------------------------------------------------------------------------
# Whitney decomposition and body


def _triple_inside(s: Cube, k: Cube) -> bool:
    # 3S, the concentric triple, as a half-open box in lattice units
    return all(k.lo[a] <= s.lo[a] - s.side
               and s.lo[a] + 2 * s.side <= k.lo[a] + k.side
               for a in range(s.dim))


def whitney(k: Cube):
    """Maximal subcubes S with 3S inside K, truncated at the finest level.

    Returns (cubes, residual) where residual is the list of finest-level
    tiles of K not covered by any returned cube.  The greedy coarse-to-
    fine scan makes maximality automatic: a candidate overlapping an
    already chosen cube is nested inside it.
    """
    chosen: list[Cube] = []
    residual: list[Cube] = []

    def descend(s: Cube):
        if _triple_inside(s, k):
            chosen.append(s)
        elif s.level == s.resolution:
            residual.append(s)
        else:
            for c in s.children():
                descend(c)

    if k.level == k.resolution:
        return [], [k]
    for c in k.children():
        descend(c)
    return chosen, residual


def _faces4(q: Cube):
    """Closed boundary faces of a cube as degenerate quarter-unit boxes."""
    lo4, hi4 = q.lo4, q.hi4
    for a in range(q.dim):
        for pos in (lo4[a], hi4[a]):
            flo = tuple(pos if b == a else lo4[b] for b in range(q.dim))
            fhi = tuple(pos if b == a else hi4[b] for b in range(q.dim))
            yield flo, fhi


def body(k: Cube) -> Region:
    """Union of the boundaries of the Whitney cubes of K."""
    cubes, _ = whitney(k)
    faces = {f for s in cubes for f in _faces4(s)}
    return Region(k.resolution, tuple(sorted(faces)))


def skeleton(k: Cube) -> Region:
    """Union of the boundaries of the children of K."""
    faces = {f for c in k.children() for f in _faces4(c)}
    return Region(k.resolution, tuple(sorted(faces)))


# ---------------------------------------------------------------------------
# distances (exact integer arithmetic in quarter units)


def dist2_boxes4(alo, ahi, blo, bhi) -> int:
    d2 = 0
    for a in range(len(alo)):
        gap = max(0, blo[a] - ahi[a], alo[a] - bhi[a])
        d2 += gap * gap
    return d2


def dist_cube_to_region(q: Cube, reg: Region) -> float:
    """Euclidean distance (absolute units) from a cube to a region."""
    if not reg.boxes4:
        return math.inf
    lo4, hi4 = q.lo4, q.hi4
    best = min(dist2_boxes4(lo4, hi4, blo, bhi) for blo, bhi in reg.boxes4)
    return math.sqrt(best) / 2 ** (q.resolution + 2)


# ---------------------------------------------------------------------------
# goodness


def is_eps_good(j: Cube, k: Cube, eps: float, body_k: Region | None = None):
    """Whether dist(J, body K) exceeds 2 l(J)^eps l(K)^(1-eps).

    Returns (good, distance).  The comparison is done on squared
    quarter-unit quantities; for eps = 1/2 and square side products it
    is exact integer-versus-integer.
    """
    if not 0 < eps < 1:
        raise ValueError("eps must lie in (0, 1)")
    if j.sidelength > k.sidelength:
        raise ValueError("goodness needs l(J) <= l(K)")
    if body_k is None:
        body_k = body(k)
    if not body_k.boxes4:
        return True, math.inf
    if j.resolution > k.resolution:
        raise ValueError("J must live at a resolution no finer than K's")
    f = 2 ** (k.resolution - j.resolution)
    lo4 = tuple(x * f for x in j.lo4)
    hi4 = tuple(x * f for x in j.hi4)
    d2q = min(dist2_boxes4(lo4, hi4, blo, bhi) for blo, bhi in body_k.boxes4)
    # threshold in quarter units: 8 * sideJ^eps * sideK^(1-eps)
    sj = j.side * f
    t2q = 64.0 * sj ** (2 * eps) * k.side ** (2 - 2 * eps)
    dist = math.sqrt(d2q) / 2 ** (k.resolution + 2)
    return float(d2q) > t2q, dist


def _ancestor_chain(j: Cube, grid: Grid):
    """Grid cubes containing J, coarsest first, finest last."""
    chain = []
    for level in range(grid.N, grid.M + 1):
        if grid.side_units(level) < j.side * 2 ** (grid.M - j.resolution):
            break
        k = grid.cube_containing(level, tuple(
            x * 2 ** (grid.M - j.resolution) for x in j.lo))
        jk = j if j.resolution == grid.M else Cube(
            grid.M, tuple(x * 2 ** (grid.M - j.resolution) for x in j.lo),
            j.side * 2 ** (grid.M - j.resolution), j.level, None)
        if k.contains_cube(jk):
            chain.append(k)
        elif chain:
            break
    return chain


def sharp_cross(j: Cube, grid: Grid, eps: float, body_cache: dict | None = None):
    """Smallest supercube Q with J good in every grid supercube K >= Q.

    Returns (q, j_flat) where j_flat is the grandchild of q containing J
    (None when q is missing or has no grandchildren above the cutoff).
    """
    chain = _ancestor_chain(j, grid)
    if not chain:
        return None, None
    q = None
    for k in chain:
        if body_cache is not None and k in body_cache:
            bk = body_cache[k]
        else:
            bk = body(k)
            if body_cache is not None:
                body_cache[k] = bk
        good, _ = is_eps_good(j, k, eps, bk)
        if good:
            q = k
        else:
            break
    if q is None:
        return None, None
    j_flat = None
    if q.level + 2 <= grid.M and j.sidelength <= q.sidelength / 4:
        jc4 = tuple(c * 2 ** (grid.M - j.resolution) for c in j.center4)
        for g in (gg for c in q.children() for gg in c.children()):
            if all(g.lo4[a] <= jc4[a] < g.hi4[a] for a in range(g.dim)):
                j_flat = g
                break
    return q, j_flat


# ---------------------------------------------------------------------------
# deep embedding


def _dist_to_boundary_units(j: Cube, k: Cube) -> int:
    """dist(J, dK) in lattice units, for J inside K (negative if outside)."""
    return min(min(j.lo[a] - k.lo[a],
                   (k.lo[a] + k.side) - (j.lo[a] + j.side))
               for a in range(j.dim))


def m_deep(k: Cube, rho: int, eps: float, grid: Grid | None = None):
    """Maximal J with l(J) <= 2^-rho l(K) and d(J, dK) >= 2 l(J)^eps l(K)^(1-eps)."""
    if rho < 1:
        raise ValueError("rho must be a positive integer")
    if not 0 < eps <= 1:
        raise ValueError("eps must lie in (0, 1]")
    g = grid if grid is not None else k.grid
    if g is None:
        raise ValueError("m_deep needs a grid")
    chosen: list[Cube] = []
    for level in range(k.level + rho, g.M + 1):
        s = g.side_units(level)
        for j in g.cubes_at_level(level, k.lo, k.hi):
            if not k.contains_cube(j):
                continue
            if any(c.contains_cube(j) for c in chosen):
                continue
            d = _dist_to_boundary_units(j, k)
            # threshold in lattice units: 2 sideJ^eps sideK^(1-eps)
            if d >= 2.0 * s ** eps * k.side ** (1 - eps):
                chosen.append(j)
    return chosen


# ---------------------------------------------------------------------------
# halos


def scaled_box4(q: Cube, factor) -> tuple:
    """(lo4, hi4) of the concentric dilate factor*Q; needs exact quarters."""
    half4 = factor * 2 * q.side  # half side in quarter units
    h = round(half4)
    if abs(half4 - h) > 1e-9:
        raise ValueError(f"dilate {factor} of side {q.side} leaves the "
                         "quarter lattice")
    c4 = q.center4
    return tuple(c - h for c in c4), tuple(c + h for c in c4)


def _box_minus(outer, inner, dim):
    """Decompose outer \\ inner into disjoint boxes (inner inside outer)."""
    olo, ohi = list(outer[0]), list(outer[1])
    ilo, ihi = inner
    out = []
    for a in range(dim):
        if olo[a] < ilo[a]:
            lo = tuple(olo[b] if b != a else olo[a] for b in range(dim))
            hi = tuple(ohi[b] if b != a else ilo[a] for b in range(dim))
            out.append((lo, hi))
            olo[a] = ilo[a]
        if ihi[a] < ohi[a]:
            lo = tuple(olo[b] if b != a else ihi[a] for b in range(dim))
            hi = tuple(ohi[b] if b != a else ohi[a] for b in range(dim))
            out.append((lo, hi))
            ohi[a] = ihi[a]
    return out


def halo_region(q: Cube, lam) -> Region:
    """The halo (1+lam)Q minus (1-lam)Q, per-axis widths allowed."""
    lams = list(lam) if hasattr(lam, "__len__") else [lam] * q.dim
    if len(lams) != q.dim:
        raise ValueError("one halo width per axis required")
    if any(not 0 < la < 0.5 for la in lams):
        raise ValueError("halo widths must lie in (0, 1/2)")
    c4 = q.center4
    outer_lo, outer_hi, inner_lo, inner_hi = [], [], [], []
    for a in range(q.dim):
        half4 = 2 * q.side  # quarter-unit half side of Q
        d = lams[a] * half4
        dd = round(d)
        if abs(d - dd) > 1e-9:
            raise ValueError(f"halo width {lams[a]} of side {q.side} leaves "
                             "the quarter lattice")
        outer_lo.append(c4[a] - half4 - dd)
        outer_hi.append(c4[a] + half4 + dd)
        inner_lo.append(c4[a] - half4 + dd)
        inner_hi.append(c4[a] + half4 - dd)
    boxes = _box_minus((tuple(outer_lo), tuple(outer_hi)),
                       (tuple(inner_lo), tuple(inner_hi)), q.dim)
    return Region(q.resolution, tuple(boxes))


# ---------------------------------------------------------------------------
# Monte-Carlo goodness probabilities


@lru_cache(maxsize=32)
def _unit_body_points(depth: int) -> np.ndarray:
    """Sorted endpoints of the Whitney intervals of [0,1) down to 2^-depth."""
    g = make_grid(1, depth, 0, {"kind": "beta", "bits": [[0] * depth]})
    k = g.cube(0, (0,))
    cubes, _ = whitney(k)
    pts = set()
    for s in cubes:
        pts.add(s.lo[0] / 2 ** depth)
        pts.add((s.lo[0] + s.side) / 2 ** depth)
    return np.array(sorted(pts))


def _axis_bad_fraction(k: int, eps: float, shifts: np.ndarray) -> np.ndarray:
    """Per-trial badness of J = [0, 2^-k) against a shifted unit interval.

    The containing side-1 cube is [-t, 1-t); its body is the unit body
    translated by -t.  J is bad when its distance to the body is at most
    2 * 2^(-eps k), or when it straddles two side-1 cubes.
    """
    lj = 2.0 ** (-k)
    thresh = 2.0 * lj ** eps
    depth = min(k + 10, 20)
    pts = _unit_body_points(depth)
    straddle = shifts > 1.0 - lj
    # nearest body point to the interval [t, t + lj] in body coordinates
    left = np.searchsorted(pts, shifts)
    right = np.searchsorted(pts, shifts + lj)
    inside = right > left  # a body point falls inside J: distance 0
    dist = np.full(len(shifts), np.inf)
    has_left = left > 0
    dist[has_left] = shifts[has_left] - pts[left[has_left] - 1]
    has_right = right < len(pts)
    dr = pts[right[has_right]] - (shifts[has_right] + lj)
    dist[has_right] = np.minimum(dist[has_right], dr)
    dist[inside] = 0.0
    return straddle | (dist <= thresh)


def bad_probability_mc(dim: int, k: int, eps: float, trials: int, seed: int):
    """Monte-Carlo estimate of P(J is k-bad) with J of side 2^-k.

    Grids are sampled through a uniform translation per axis; axes are
    independent, so the n-dimensional estimate combines the per-axis
    fractions as 1 - prod(1 - p_axis).  Returns (estimate, stderr).
    """
    if trials < 1000:
        raise ValueError("need at least 10^3 trials")
    if k == 0:
        return 1.0, 0.0
    rng = np.random.default_rng(seed)
    p_axes, var_axes = [], []
    for _ in range(dim):
        shifts = rng.random(trials)
        bad = _axis_bad_fraction(k, eps, shifts)
        p = float(bad.mean())
        p_axes.append(p)
        var_axes.append(p * (1 - p) / trials)
    est = 1.0
    var = 0.0
    for a in range(dim):
        others = 1.0
        for b in range(dim):
            if b != a:
                others *= 1.0 - p_axes[b]
        var += others ** 2 * var_axes[a]
        est *= 1.0 - p_axes[a]
    return 1.0 - est, math.sqrt(var)
