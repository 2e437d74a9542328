"""Weakly accretive testing families and martingale-difference calculus.

A family assigns to every cube Q below a root a function b_Q supported
on the atoms of Q.  Children where b changes (or where the integral of b
vanishes, which would break the division in the natural operators) are
"broken"; everything downstream (box/flat/broken operators, Carleson
averaging, sharp and star square functions) keys off that split.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .grid import Cube, Grid
from .measure import Measure

__all__ = [
    "BFamily",
    "make_family",
    "truncate_family",
    "reverse_holder_adjust",
    "mart_apply",
    "expand",
    "frame_and_riesz",
    "telescope_check",
    "projection_check",
    "sharp_norm_sq",
    "star_norm_sq",
]

_ZERO = 1e-14


@dataclass
class BFamily:
    mu: Measure
    grid: Grid
    root: Cube
    values: dict            # Cube -> full-length atom array, zero off Q
    p: float                # accretivity exponent, math.inf allowed
    c_b: float
    C_b: float
    broken_children: dict = field(default_factory=dict)  # Cube -> frozenset
    kind: str = "explicit"

    # ---- plumbing

    def atoms_in(self, q: Cube) -> np.ndarray:
        f = 2 ** (self.mu.resolution - q.resolution)
        lo = np.array(q.lo, dtype=np.int64) * f
        return self.mu.in_box(lo, lo + q.side * f)

    def cubes(self):
        """Nonempty cubes of the family, coarse to fine."""
        return sorted(self.values, key=lambda q: (-q.side, q.lo))

    def b(self, q: Cube) -> np.ndarray:
        v = self.values.get(q)
        if v is None:
            return np.zeros(self.mu.natoms)
        return v

    def integral_b(self, q: Cube) -> float:
        return float(np.dot(self.mu.masses, self.b(q)))

    def children_of(self, q: Cube):
        if q.level >= self.grid.M:
            return []
        return [c for c in q.children() if c in self.values]

    def natural_children(self, q: Cube):
        brok = self.broken_children.get(q, frozenset())
        return [c for c in self.children_of(q) if c not in brok]

    def mass(self, q: Cube) -> float:
        return float(self.mu.masses[self.atoms_in(q)].sum())


def _walk_cubes(grid: Grid, root: Cube):
    stack = [root]
    while stack:
        q = stack.pop()
        yield q
        if q.level < grid.M:
            stack.extend(q.children())


def _classify_broken(fam: BFamily):
    for q in list(fam.values):
        if q.level >= fam.grid.M:
            continue
        brok = set()
        for c in fam.children_of(q):
            same = np.array_equal(fam.values[c], fam.values[q] * fam.atoms_in(c))
            if not same or abs(fam.integral_b(c)) <= _ZERO:
                brok.add(c)
        if brok:
            fam.broken_children[q] = frozenset(brok)


def _accretivity(fam: BFamily):
    """(c_b, C_b) over nonempty cubes; raises naming a violating cube."""
    w = fam.mu.masses
    c_lo, c_hi = math.inf, 0.0
    for q, v in fam.values.items():
        tot = fam.mass(q)
        if tot <= 0:
            continue
        avg = float(np.dot(w, v)) / tot
        if avg <= 0:
            raise ValueError(f"accretivity fails on cube lo={q.lo} "
                             f"side={q.side}: average {avg}")
        c_lo = min(c_lo, avg)
        if math.isinf(fam.p):
            c_hi = max(c_hi, float(np.abs(v).max(initial=0.0)))
        else:
            pw = float(np.dot(w, np.abs(v) ** fam.p)) / tot
            c_hi = max(c_hi, pw ** (1.0 / fam.p))
    if not math.isfinite(c_lo):
        raise ValueError("family has no nonempty cube")
    return c_lo, c_hi


def make_family(kind: str, mu: Measure, grid: Grid, root: Cube,
                p: float = 4.0, seed: int | None = None,
                values: dict | None = None,
                global_values=None) -> BFamily:
    """Build a testing family on all nonempty subcubes of the root.

    kinds: "unit" (b_Q = 1_Q), "random" (fresh values in [1/2, 2] per
    cube, every child broken), "global" (one function restricted
    everywhere, nothing broken), "explicit" (caller-supplied dict).
    """
    if not (p > 2):
        raise ValueError("accretivity exponent must exceed 2")
    fam = BFamily(mu, grid, root, {}, p, 0.0, 0.0, kind=kind)
    rng = np.random.default_rng(seed)
    if kind == "explicit":
        if values is None:
            raise ValueError("explicit family needs values")
    if kind == "global" and global_values is None:
        global_values = np.ones(mu.natoms)
    for q in _walk_cubes(grid, root):
        sel = fam.atoms_in(q)
        if not sel.any():
            continue
        if kind == "unit":
            v = sel.astype(np.float64)
        elif kind == "random":
            v = np.where(sel, rng.uniform(0.5, 2.0, mu.natoms), 0.0)
        elif kind == "global":
            v = np.where(sel, np.asarray(global_values, dtype=np.float64), 0.0)
        elif kind == "explicit":
            if q not in values:
                continue
            v = np.where(sel, np.asarray(values[q], dtype=np.float64), 0.0)
        else:
            raise ValueError(f"unknown family kind {kind!r}")
        fam.values[q] = v
    fam.c_b, fam.C_b = _accretivity(fam)
    _classify_broken(fam)
    return fam


# ---------------------------------------------------------------------------
# truncation to an infinity-accretive family


def truncate_family(fam: BFamily, eps: float) -> BFamily:
    """Cap each b_Q at the level lambda(eps) and double, giving p = infinity.

    lambda = (p/(p-2) * C_b^p / eps)^(1/(p-2)); the capped family keeps its
    averages at least 1 provided the input averages were at least 1.
    """
    if not 0 < eps <= 0.25:
        raise ValueError("eps must lie in (0, 1/4]")
    if math.isinf(fam.p):
        raise ValueError("family is already infinity-accretive")
    p, cb = fam.p, fam.C_b
    lam = (p / (p - 2) * cb ** p / eps) ** (1.0 / (p - 2))
    new_values = {}
    for q, v in fam.values.items():
        absv = np.abs(v)
        with np.errstate(divide="ignore", invalid="ignore"):
            capped = np.where(absv <= lam, v, lam * np.sign(v))
        new_values[q] = 2.0 * capped
    out = BFamily(fam.mu, fam.grid, fam.root, new_values, math.inf,
                  0.0, 0.0, kind=fam.kind + "-truncated")
    out.c_b, out.C_b = _accretivity(out)
    _classify_broken(out)
    w = fam.mu.masses
    for q, v in out.values.items():
        tot = out.mass(q)
        if tot <= 0:
            continue
        avg = abs(float(np.dot(w, v))) / tot
        if avg < 1.0 - 1e-12:
            raise ValueError(f"truncated average {avg} below 1 on cube "
                             f"lo={q.lo} side={q.side}; input averages must "
                             "be at least 1")
        if np.abs(v).max() > 2 * lam + 1e-12:
            raise ValueError("truncation failed to cap the family")
    out.trunc_lambda = lam
    return out


# ---------------------------------------------------------------------------
# reverse-Hoelder adjustment


def reverse_holder_adjust(fam: BFamily, q: Cube, stopping, delta: float,
                          mode: str = "children"):
    """Flatten b_Q on selected subcubes so averages control sup norms.

    mode="children": stopping must be the children of Q; only children
    whose average is tiny relative to their sup norm are adjusted.
    mode="corona": stopping is any pairwise-disjoint family inside Q and
    every listed cube is adjusted, with the sign-split parts replaced by
    their constant averages.

    Returns (new_values, adjusted) where adjusted lists the modified
    cubes.
    """
    n, cb = fam.mu.dim, fam.C_b
    if mode == "children":
        dmax = 1.0 / (2 ** (n + 1) * cb ** 3)
    elif mode == "corona":
        dmax = 1.0 / (4 * cb ** 3)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    if not 0 < delta < dmax:
        raise ValueError(f"delta must lie in (0, {dmax})")
    w = fam.mu.masses
    v = fam.values[q].copy()
    root_s = math.sqrt(cb * delta)
    adjusted = []
    for qi in stopping:
        sel = fam.atoms_in(qi)
        tot = float(w[sel].sum())
        if tot <= 0:
            continue
        vi = fam.values[q][sel]
        wi = w[sel]
        avg = float(np.dot(wi, vi)) / tot
        sup = float(np.abs(vi).max(initial=0.0))
        small = sup <= _ZERO or abs(avg) < (delta / cb) * sup
        if mode == "children" and not small:
            continue  # the child is "big": leave b_Q alone there
        avg_abs = float(np.dot(wi, np.abs(vi))) / tot
        pos = np.maximum(vi, 0.0)
        neg = np.maximum(-vi, 0.0)
        if avg_abs <= _ZERO:
            new = np.full(vi.shape, delta)
        elif avg_abs <= root_s:
            new = np.full(vi.shape, avg_abs)
        else:
            int_p = float(np.dot(wi, pos))
            int_n = float(np.dot(wi, neg))
            if int_n > int_p:
                adj = pos - neg * (1.0 + root_s)
            else:
                adj = (1.0 + root_s) * pos - neg
            if mode == "corona":
                new = np.full(vi.shape, float(np.dot(wi, adj)) / tot)
            else:
                new = adj
        v[sel] = new
        adjusted.append(qi)
    return v, adjusted


# ---------------------------------------------------------------------------
# martingale operators


def _avg(fam: BFamily, q: Cube, f: np.ndarray) -> float:
    sel = fam.atoms_in(q)
    tot = float(fam.mu.masses[sel].sum())
    if tot <= 0:
        return 0.0
    return float(np.dot(fam.mu.masses[sel], f[sel])) / tot


def _e_op(fam: BFamily, q: Cube, f: np.ndarray, b: np.ndarray) -> np.ndarray:
    """1_Q (int_Q f b dmu) / (int_Q b dmu), guarded on degenerate cubes."""
    sel = fam.atoms_in(q)
    w = fam.mu.masses
    den = float(np.dot(w[sel], b[sel]))
    if abs(den) <= _ZERO:
        return np.zeros(fam.mu.natoms)
    num = float(np.dot(w[sel], (f * b)[sel]))
    return sel * (num / den)


def _f_op(fam: BFamily, q: Cube, f: np.ndarray, b: np.ndarray,
          hat: bool = False) -> np.ndarray:
    """1_Q b (int_Q f dmu) / (int_Q b dmu); the hat variant drops the b."""
    sel = fam.atoms_in(q)
    w = fam.mu.masses
    den = float(np.dot(w[sel], b[sel]))
    if abs(den) <= _ZERO:
        return np.zeros(fam.mu.natoms)
    num = float(np.dot(w[sel], f[sel]))
    ratio = num / den
    if hat:
        return sel * ratio
    return np.where(sel, b, 0.0) * ratio


def mart_apply(fam: BFamily, op: str, q: Cube, f) -> np.ndarray:
    """Evaluate one martingale operator at a cube, per-atom.

    E, F, Fhat          expectation / accretive averaging and its hat
    Delta, Box          martingale differences (E resp. F version)
    FPi, BoxPi          parent-b variants
    BoxBrokPi           correction sum over broken children
    Nabla, NablaHat     Carleson averaging over broken children
    FlatBoxHat, FlatBox flat differences (averages over broken children
                        removed); FlatBox multiplies back by b_Q
    FlatBoxBrok         sum of accretive averages over broken children
    """
    f = np.asarray(f, dtype=np.float64)
    w = fam.mu.masses
    bq = fam.b(q)
    # below the finest level there are no children: all difference and
    # broken-child operators vanish by convention
    if q.level >= fam.grid.M and op in (
            "Delta", "Box", "BoxPi", "BoxBrokPi", "Nabla", "NablaHat",
            "FlatBoxHat", "FlatBox", "FlatBoxBrok"):
        return np.zeros(fam.mu.natoms)
    if op == "E":
        return _e_op(fam, q, f, bq)
    if op == "F":
        return _f_op(fam, q, f, bq)
    if op == "Fhat":
        return _f_op(fam, q, f, bq, hat=True)
    if op == "Delta":
        out = -_e_op(fam, q, f, bq)
        for c in fam.children_of(q):
            out += _e_op(fam, c, f, fam.b(c))
        return out
    if op == "Box":
        out = -_f_op(fam, q, f, bq)
        for c in fam.children_of(q):
            out += _f_op(fam, c, f, fam.b(c))
        return out
    if op == "FPi":
        if q == fam.root:
            return _f_op(fam, q, f, bq)
        return _f_op(fam, q, f, fam.b(q.parent()))
    if op == "BoxPi":
        out = -_f_op(fam, q, f, bq)
        for c in fam.children_of(q):
            out += _f_op(fam, c, f, bq)
        return out
    if op == "BoxBrokPi":
        out = np.zeros(fam.mu.natoms)
        for c in fam.broken_children.get(q, ()):
            out += _f_op(fam, c, f, fam.b(c)) - _f_op(fam, c, f, bq)
        return out
    if op == "Nabla":
        out = np.zeros(fam.mu.natoms)
        for c in fam.broken_children.get(q, ()):
            out += fam.atoms_in(c) * _avg(fam, c, np.abs(f))
        return out
    if op == "NablaHat":
        top = _avg(fam, q, np.abs(f))
        out = np.zeros(fam.mu.natoms)
        for c in fam.broken_children.get(q, ()):
            out += fam.atoms_in(c) * (_avg(fam, c, np.abs(f)) + top)
        return out
    if op in ("FlatBoxHat", "FlatBox"):
        sel = fam.atoms_in(q)
        den_q = float(np.dot(w[sel], bq[sel]))
        gq = 0.0 if abs(den_q) <= _ZERO \
            else float(np.dot(w[sel], f[sel])) / den_q
        out = np.zeros(fam.mu.natoms)
        brok = fam.broken_children.get(q, frozenset())
        for c in fam.children_of(q):
            cs = fam.atoms_in(c)
            if c in brok:
                out -= cs * gq
            else:
                den_c = float(np.dot(w[cs], bq[cs]))
                gc = 0.0 if abs(den_c) <= _ZERO \
                    else float(np.dot(w[cs], f[cs])) / den_c
                out += cs * (gc - gq)
        if op == "FlatBox":
            return out * bq
        return out
    if op == "FlatBoxBrok":
        out = np.zeros(fam.mu.natoms)
        for c in fam.broken_children.get(q, ()):
            out += _f_op(fam, c, f, fam.b(c))
        return out
    raise ValueError(f"unknown martingale operator {op!r}")


def _l2(fam: BFamily, g: np.ndarray) -> float:
    return float(np.dot(fam.mu.masses, g * g))


# ---------------------------------------------------------------------------
# expansion / frames


def expand(fam: BFamily, f):
    """Coefficients {Q: Box_Q f} plus the top term, with the L2 residual."""
    f = np.asarray(f, dtype=np.float64)
    coeffs = {}
    recon = mart_apply(fam, "F", fam.root, f)
    for q in fam.values:
        c = mart_apply(fam, "Box", q, f)
        coeffs[q] = c
        recon = recon + c
    residual = math.sqrt(_l2(fam, f - recon))
    return coeffs, residual


def frame_and_riesz(fam: BFamily, f, collection=None):
    """Frame sums, the upper-Riesz ratio and the star norm of a batch.

    Returns a dict with the squared function norm, the box- and
    delta-flavoured frame sums (each including the top averaging term),
    and for the chosen collection the energy of its pseudoprojection.
    """
    f = np.asarray(f, dtype=np.float64)
    norm2 = _l2(fam, f)
    box_sum = _l2(fam, mart_apply(fam, "F", fam.root, f))
    delta_sum = _l2(fam, mart_apply(fam, "E", fam.root, f))
    nabla_hat_sum = 0.0
    for q in fam.values:
        nab2 = _l2(fam, mart_apply(fam, "Nabla", q, f))
        box_sum += _l2(fam, mart_apply(fam, "Box", q, f)) + nab2
        delta_sum += _l2(fam, mart_apply(fam, "Delta", q, f)) + nab2
        nabla_hat_sum += _l2(fam, mart_apply(fam, "NablaHat", q, f))
    out = {
        "norm_sq": norm2,
        "box_frame_sum": box_sum,
        "delta_frame_sum": delta_sum,
        "box_frame_ratio": box_sum / norm2 if norm2 > 0 else 0.0,
        "delta_frame_ratio": delta_sum / norm2 if norm2 > 0 else 0.0,
        "nabla_hat_sum": nabla_hat_sum,
    }
    if collection is not None:
        psi = np.zeros(fam.mu.natoms)
        bound = 0.0
        star2 = 0.0
        for q in collection:
            bq_f = mart_apply(fam, "Box", q, f)
            psi = psi + bq_f
            bound += _l2(fam, bq_f)
            star2 += _l2(fam, bq_f) \
                + _l2(fam, mart_apply(fam, "Nabla", q, f))
            bound += _l2(fam, mart_apply(fam, "NablaHat", q, f))
        out["psi_norm_sq"] = _l2(fam, psi)
        out["riesz_bound"] = bound
        out["riesz_ratio"] = out["psi_norm_sq"] / bound if bound > 0 else 0.0
        out["star_norm_sq"] = star2
    return out


# ---------------------------------------------------------------------------
# sharp and star square functions (vector argument allowed)


def _coordwise(fam: BFamily, op: str, q: Cube, coords) -> list:
    return [mart_apply(fam, op, q, coords[:, a])
            for a in range(coords.shape[1])]


def _broken_inf_term(fam: BFamily, q: Cube, coords: np.ndarray,
                     extra_candidates=()) -> float:
    """inf over z of sum_{J' broken} |J'| (E_{J'} |x - z|)^2.

    The objective is convex in z, so a local search from the best of a
    few natural candidates finds the infimum.
    """
    brok = fam.broken_children.get(q, frozenset())
    brok = [c for c in brok if fam.mass(c) > 0]
    if not brok:
        return 0.0
    w = fam.mu.masses
    sels = [fam.atoms_in(c) for c in brok]

    def objective(z):
        tot = 0.0
        for c, sel in zip(brok, sels):
            d = np.sqrt(((coords[sel] - z) ** 2).sum(axis=1))
            m = float(w[sel].sum())
            tot += m * (float(np.dot(w[sel], d)) / m) ** 2
        return tot

    cands = [coords[sel].T @ w[sel] / w[sel].sum() for sel in sels]
    qsel = fam.atoms_in(q)
    cands.append(coords[qsel].T @ w[qsel] / w[qsel].sum())
    cands.extend(np.asarray(c, dtype=np.float64) for c in extra_candidates)
    best = min(cands, key=objective)
    res = minimize(objective, best, method="Nelder-Mead",
                   options={"xatol": 1e-10, "fatol": 1e-14, "maxiter": 400})
    return min(objective(best), float(res.fun))


def sharp_norm_sq(fam: BFamily, cubes, coords=None, extra_candidates=()) -> float:
    """Squared sharp norm of the pseudoprojection of x onto the cubes."""
    if coords is None:
        coords = fam.mu.coords_float()
    coords = np.asarray(coords, dtype=np.float64)
    total = 0.0
    for q in cubes:
        if q not in fam.values:
            continue
        total += sum(_l2(fam, g) for g in _coordwise(fam, "Delta", q, coords))
        total += _broken_inf_term(fam, q, coords, extra_candidates)
    return total


def star_norm_sq(fam: BFamily, cubes, psi) -> float:
    """Squared star norm: box pieces plus broken-average pieces, no inf."""
    psi = np.asarray(psi, dtype=np.float64)
    total = 0.0
    for q in cubes:
        if q not in fam.values:
            continue
        total += _l2(fam, mart_apply(fam, "Box", q, psi))
        total += _l2(fam, mart_apply(fam, "Nabla", q, psi))
    return total


# ---------------------------------------------------------------------------
# identity checks


def telescope_check(fam: BFamily, k: Cube, lcube: Cube, f) -> float:
    """Residual of the telescoping identity along the chain from K to L.

    Sums plain averages over the K-child of the flat-hat differences for
    pi(K) up to L and compares with the matching difference of averaged
    hat operators; K a broken child of its parent selects the one-term
    branch.
    """
    f = np.asarray(f, dtype=np.float64)
    if k == lcube:
        return 0.0
    if not lcube.contains_cube(k):
        raise ValueError("need K inside L")
    chain = []
    cur = k
    while cur != lcube:
        parent = cur.parent()
        chain.append((parent, cur))
        cur = parent
    total = 0.0
    for i_cube, i_k in chain:
        g = mart_apply(fam, "FlatBoxHat", i_cube, f)
        total += _avg(fam, i_k, g)
    e_l = _avg(fam, lcube, mart_apply(fam, "Fhat", lcube, f))
    if k in fam.broken_children.get(k.parent(), frozenset()):
        want = -e_l
    else:
        want = _avg(fam, k, mart_apply(fam, "Fhat", k, f)) - e_l
    return abs(total - want)


def projection_check(fam: BFamily, r: Cube, q: Cube, f) -> float:
    """Residual of Delta_R Delta_Q = [R == Q] Delta_Q applied to f."""
    f = np.asarray(f, dtype=np.float64)
    inner = mart_apply(fam, "Delta", q, f)
    lhs = mart_apply(fam, "Delta", r, inner)
    rhs = inner if r == q else np.zeros_like(inner)
    return math.sqrt(_l2(fam, lhs - rhs))
