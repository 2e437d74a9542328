"""Stopping-time constructions on dyadic trees over atomic measures.

A corona decomposition is a forest of stopping cubes inside a root cube
together with the criterion each stopping cube satisfied.  Everything
below works with exact finite recursions: averages, Poisson integrals,
and tent masses are finite sums, and maximal/minimal cube selections are
depth-first scans of the dyadic tree.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .grid import Cube, Grid, scaled_box4, sharp_cross
from .measure import Measure, mass
from .poisson_a2 import _norm_moment, poisson

__all__ = [
    "Corona",
    "HalfSpaceMeasure",
    "cz_stopping",
    "accretive_stopping",
    "energy_stopping",
    "best_subpartition",
    "iterated_stopping",
    "stopping_data",
    "lacey_bottom_up",
    "indented_corona",
    "size_functionals",
    "shifted_corona",
    "carleson_norm",
    "generation_masses",
]


# ---------------------------------------------------------------------------
# tree helpers


def _kids(q: Cube):
    if q.level >= q.resolution:
        return []
    return q.children()


def _subtree(q: Cube):
    stack = [q]
    while stack:
        c = stack.pop()
        yield c
        stack.extend(_kids(c))


def _atoms_in(mu: Measure, q: Cube) -> np.ndarray:
    f = 2 ** (mu.resolution - q.resolution)
    lo = np.array(q.lo, dtype=np.int64) * f
    return mu.in_box(lo, lo + q.side * f)


def _avg_abs(mu: Measure, f: np.ndarray, q: Cube) -> float:
    sel = _atoms_in(mu, q)
    tot = float(mu.masses[sel].sum())
    if tot <= 0.0:
        return 0.0
    return float(np.dot(mu.masses[sel], np.abs(f[sel]))) / tot


def _avg(mu: Measure, f: np.ndarray, q: Cube) -> float:
    sel = _atoms_in(mu, q)
    tot = float(mu.masses[sel].sum())
    if tot <= 0.0:
        return 0.0
    return float(np.dot(mu.masses[sel], f[sel])) / tot


# ---------------------------------------------------------------------------
# the corona object


@dataclass
class Corona:
    kind: str
    mu: Measure
    root: Cube
    stopping: list                       # all stopping cubes, root first
    parent: dict                         # forest parent links, root -> None
    alpha_bound: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)
    criteria: dict = field(default_factory=dict)   # cube -> firing record
    energies: dict = field(default_factory=dict)   # top -> stopping energy^2

    def forest_children(self, f: Cube) -> list:
        return [g for g in self.stopping if self.parent.get(g) == f]

    def in_corona(self, q: Cube) -> Cube | None:
        """Smallest stopping cube containing q (None if q is outside)."""
        best = None
        for f in self.stopping:
            if f.contains_cube(q) and (best is None or best.contains_cube(f)):
                best = f
        return best

    def corona_of(self, f: Cube) -> list:
        """Cubes of the restricted corona below f, coarse to fine."""
        kids = self.forest_children(f)
        out = []
        stack = [f]
        while stack:
            q = stack.pop()
            out.append(q)
            for c in _kids(q):
                if not any(g.contains_cube(c) for g in kids):
                    stack.append(c)
        return sorted(out, key=lambda q: (-q.side, q.lo))

    def depth(self, f: Cube) -> int:
        d, cur = 0, f
        while self.parent.get(cur) is not None:
            cur = self.parent[cur]
            d += 1
        return d

    def export(self) -> str:
        lines = [f"corona kind={self.kind} root lo={self.root.lo} "
                 f"side={self.root.side} stopping={len(self.stopping)}"]
        for f in self.stopping:
            rec = self.criteria.get(f, {})
            fired = ",".join(sorted(rec)) if rec else "root"
            a = self.alpha_bound.get(f)
            astr = f" alpha={a:.17g}" if a is not None else ""
            lines.append(f"  depth={self.depth(f)} lo={f.lo} side={f.side} "
                         f"criterion={fired}{astr}")
        return "\n".join(lines)


def _attach(parents: dict, tops_done: list, f: Cube, top: Cube):
    parents[f] = top
    tops_done.append(f)


# ---------------------------------------------------------------------------
# Calderon-Zygmund stopping times


def cz_stopping(mu: Measure, f, root: Cube, c0: float) -> Corona:
    """Stopping cubes where the local average of |f| jumps by factor c0.

    Generations are recursive: below each stopping cube the comparison
    average resets to that cube's own.
    """
    if c0 <= 1.0:
        raise ValueError("c0 must exceed 1")
    f = np.asarray(f, dtype=np.float64)
    stopping, parents, alphas, crit = [root], {root: None}, {}, {}
    queue = [root]
    while queue:
        top = queue.pop()
        a_top = _avg_abs(mu, f, top)
        alphas[top] = a_top
        stack = list(_kids(top))
        while stack:
            q = stack.pop()
            if float(mu.masses[_atoms_in(mu, q)].sum()) <= 0.0:
                continue
            a = _avg_abs(mu, f, q)
            if a_top > 0.0 and a > c0 * a_top:
                stopping.append(q)
                parents[q] = top
                crit[q] = {"cz": a}
                queue.append(q)
            else:
                stack.extend(_kids(q))
    order = sorted(stopping, key=lambda q: (-q.side, q.lo))
    return Corona("cz", mu, root, order, parents, alphas,
                  params={"c0": c0}, criteria=crit)


# ---------------------------------------------------------------------------
# accretive / weak-testing stopping times


def accretive_stopping(fam, t_diag, root: Cube, gamma: float,
                       big_gamma: float, t_const: float) -> Corona:
    """Stop where the family average degenerates or local testing blows up.

    t_diag(q, top) must return the integral over q of |T(b_top)|^2
    against the target measure, with b_top the family's function on the
    current corona top.  A cube stops when |avg b_top| < gamma or that
    integral exceeds big_gamma * t_const^2 * |q|_sigma.
    """
    if not 0.0 < gamma < 1.0 < big_gamma:
        raise ValueError("need 0 < gamma < 1 < big_gamma")
    mu = fam.mu
    thresh = big_gamma * t_const * t_const
    stopping, parents, crit = [root], {root: None}, {}
    queue = [root]
    while queue:
        top = queue.pop()
        b_top = fam.b(top)
        stack = list(_kids(top))
        while stack:
            q = stack.pop()
            qs = float(mu.masses[_atoms_in(mu, q)].sum())
            if qs <= 0.0:
                continue
            rec = {}
            a = _avg(mu, b_top, q)
            if abs(a) < gamma:
                rec["accretive"] = a
            ti = t_diag(q, top)
            if ti > thresh * qs:
                rec["weak_testing"] = ti / qs
            if rec:
                stopping.append(q)
                parents[q] = top
                crit[q] = rec
                queue.append(q)
            else:
                stack.extend(_kids(q))
    order = sorted(stopping, key=lambda q: (-q.side, q.lo))
    return Corona("accretive", mu, root, order, parents,
                  params={"gamma": gamma, "big_gamma": big_gamma,
                          "t_const": t_const}, criteria=crit)


# ---------------------------------------------------------------------------
# energy stopping times


def best_subpartition(top: Cube, sigma_amb: Measure, omega: Measure,
                      alpha: float, depth: int | None = None) -> dict:
    """Best dyadic-subpartition energy below top against ambient sigma.

    Returns a dict cube -> value, where value is the largest sum of
    (P(J, sigma_amb)/l(J))^2 * second moment of omega on J over dyadic
    subpartitions of the cube, at most `depth` levels deep (None for
    unlimited).  The table covers the whole subtree of top.
    """
    term = {}
    for q in _subtree(top):
        p = poisson("standard", q, sigma_amb, alpha)
        term[q] = (p / q.sidelength) ** 2 * _norm_moment(q, omega)

    def solve(q: Cube, d):
        kids = _kids(q)
        if not kids or (d is not None and d <= 0):
            return term[q]
        return max(term[q],
                   sum(solve(c, None if d is None else d - 1)
                       for c in kids))

    return {q: solve(q, depth) for q in _subtree(top)}


def energy_stopping(sigma: Measure, omega: Measure, root: Cube,
                    c_en: float, e2: float, a2: float, alpha: float,
                    depth: int | None = None) -> Corona:
    """Stop where the subpartition energy reaches c_en(e2^2 + a2)|I|_sigma.

    The Poisson ambient is the current corona top.  The per-corona
    stopping energy (largest quotient over strictly inner cubes) is
    recorded; by construction it stays below the threshold.
    """
    if c_en <= 1.0:
        raise ValueError("c_en must exceed 1")
    tau = c_en * (e2 * e2 + a2)
    stopping, parents, crit, energies = [root], {root: None}, {}, {}
    queue = [root]
    while queue:
        top = queue.pop()
        amb = sigma.subset(_atoms_in(sigma, top))
        best = best_subpartition(top, amb, omega, alpha, depth)
        x_sq = 0.0
        stack = list(_kids(top))
        while stack:
            q = stack.pop()
            qs = float(sigma.masses[_atoms_in(sigma, q)].sum())
            if qs <= 0.0:
                continue
            val = best[q] / qs
            if val >= tau and tau > 0.0:
                stopping.append(q)
                parents[q] = top
                crit[q] = {"energy": val}
                queue.append(q)
            else:
                x_sq = max(x_sq, val)
                stack.extend(_kids(q))
        energies[top] = x_sq
    order = sorted(stopping, key=lambda q: (-q.side, q.lo))
    return Corona("energy", sigma, root, order, parents,
                  params={"c_en": c_en, "e2": e2, "a2": a2, "alpha": alpha,
                          "depth": depth, "tau": tau},
                  criteria=crit, energies=energies)


# ---------------------------------------------------------------------------
# iterated (triple) stopping times


def _shadow_pass(fam, omega, f, t_factory, root, params):
    """Union of the size, accretivity/testing, and energy criteria."""
    mu = fam.mu
    c0 = params["c0"]
    gamma, big_gamma = params["gamma"], params["big_gamma"]
    thresh = big_gamma * params["t_const"] ** 2
    tau = params["c_en"] * (params["e2"] ** 2 + params["a2"])
    alpha = params["alpha"]
    stopping, parents, crit = [root], {root: None}, {}
    queue = [root]
    while queue:
        top = queue.pop()
        a_top = _avg_abs(mu, f, top)
        b_top = fam.b(top)
        t_int = t_factory(b_top)
        amb = mu.subset(_atoms_in(mu, top))
        best = best_subpartition(top, amb, omega, alpha)
        stack = list(_kids(top))
        while stack:
            q = stack.pop()
            qs = float(mu.masses[_atoms_in(mu, q)].sum())
            if qs <= 0.0:
                continue
            rec = {}
            a = _avg_abs(mu, f, q)
            if a_top > 0.0 and a > c0 * a_top:
                rec["cz"] = a
            ab = _avg(mu, b_top, q)
            if abs(ab) < gamma:
                rec["accretive"] = ab
            ti = t_int(q)
            if ti > thresh * qs:
                rec["weak_testing"] = ti / qs
            if tau > 0.0 and best[q] / qs >= tau:
                rec["energy"] = best[q] / qs
            if rec:
                stopping.append(q)
                parents[q] = top
                crit[q] = rec
                queue.append(q)
            else:
                stack.extend(_kids(q))
    return stopping, parents, crit


def iterated_stopping(fam, omega: Measure, f, t_factory, root: Cube,
                      params: dict):
    """Shadow stopping, reverse-Holder adjustment, then a testing re-run.

    t_factory(b_values) must return a callable q -> integral over q of
    |T(b)|^2 against omega.  params needs c0, gamma, big_gamma, t_const,
    c_en, e2, a2, alpha, and delta (reverse-Holder).  Returns the corona
    and the adjusted family.
    """
    from .bfamily import make_family, reverse_holder_adjust

    f = np.asarray(f, dtype=np.float64)
    shadow, sh_parents, sh_crit = _shadow_pass(fam, omega, f, t_factory,
                                               root, params)
    shadow_set = set(shadow)

    # adjust b on every shadow corona top, coarse to fine
    work = fam
    adjusted_at = {}
    for top in sorted(shadow_set, key=lambda q: (-q.side, q.lo)):
        kids = [g for g in shadow_set if sh_parents.get(g) == top]
        if not kids:
            adjusted_at[top] = []
            continue
        new_top_value, adj = reverse_holder_adjust(work, top, kids,
                                                   params["delta"],
                                                   mode="corona")
        values = dict(work.values)
        values[top] = new_top_value
        work = make_family("explicit", work.mu, work.grid, work.root,
                           p=work.p, values=values)
        adjusted_at[top] = adj
    adjusted = work

    # weak-testing re-run on the adjusted family, forced stops at shadow cubes
    mu = fam.mu
    gamma, big_gamma = params["gamma"], params["big_gamma"]
    thresh = big_gamma * params["t_const"] ** 2
    stopping, parents, crit = [root], {root: None}, {}
    queue = [root]
    while queue:
        top = queue.pop()
        b_top = adjusted.b(top)
        t_int = t_factory(b_top)
        stack = list(_kids(top))
        while stack:
            q = stack.pop()
            qs = float(mu.masses[_atoms_in(mu, q)].sum())
            if qs <= 0.0:
                continue
            rec = dict(sh_crit.get(q, {})) if q in shadow_set else {}
            if q in shadow_set:
                rec["shadow"] = True
            ab = _avg(mu, b_top, q)
            if abs(ab) < gamma:
                rec["accretive_adjusted"] = ab
            ti = t_int(q)
            if ti > thresh * qs:
                rec["weak_testing_adjusted"] = ti / qs
            if rec:
                stopping.append(q)
                parents[q] = top
                crit[q] = rec
                queue.append(q)
            else:
                stack.extend(_kids(q))
    order = sorted(stopping, key=lambda q: (-q.side, q.lo))
    alphas = {}
    for q in order:
        base = _avg_abs(mu, f, q)
        p = parents.get(q)
        alphas[q] = base if p is None else max(base, alphas[p])
    corona = Corona("iterated", mu, root, order, parents, alphas,
                    params=dict(params), criteria=crit)
    corona.params["shadow"] = sorted(shadow_set,
                                     key=lambda q: (-q.side, q.lo))
    corona.params["adjusted_at"] = adjusted_at
    return corona, adjusted


# ---------------------------------------------------------------------------
# stopping data verification


def stopping_data(corona: Corona, f) -> dict:
    """Checks the four stopping-data properties and the quasi-orthogonality.

    Returns the measured constants; `ok` collects per-property pass flags
    with witnesses for any failure.
    """
    mu = corona.mu
    f = np.asarray(f, dtype=np.float64)
    c0 = corona.params.get("c0", 1.0)
    norm_sq = float(np.dot(mu.masses, f * f))

    # (1) corona control of averages
    prop1, wit1 = 0.0, None
    for top in corona.stopping:
        a = corona.alpha_bound.get(top, 0.0)
        if a <= 0.0:
            continue
        for q in corona.corona_of(top):
            if float(mu.masses[_atoms_in(mu, q)].sum()) <= 0.0:
                continue
            r = _avg_abs(mu, f, q) / a
            if r > prop1:
                prop1, wit1 = r, (top, q)

    # (2) sigma-Carleson of the stopping family
    carleson = carleson_norm(corona.stopping, mu)

    # (3) quasi-orthogonality sum
    quasi = sum(corona.alpha_bound.get(top, 0.0) ** 2
                * mass(top, mu) for top in corona.stopping)
    quasi_ratio = quasi / norm_sq if norm_sq > 0 else 0.0

    # (4) monotonicity of the alpha bounds along the forest
    mono, wit4 = True, None
    for top in corona.stopping:
        p = corona.parent.get(top)
        if p is not None and corona.alpha_bound.get(top, 0.0) \
                < corona.alpha_bound.get(p, 0.0) - 1e-12:
            mono, wit4 = False, (p, top)

    # pointwise quasi-orthogonal sum against f
    g = np.zeros(mu.natoms)
    for top in corona.stopping:
        sel = _atoms_in(mu, top)
        g[sel] += corona.alpha_bound.get(top, 0.0)
    qorth = float(np.dot(mu.masses, g * g)) / norm_sq if norm_sq > 0 else 0.0

    a0 = max(c0, carleson, math.sqrt(quasi_ratio) if quasi_ratio > 0 else 0.0)
    return {
        "a0": a0,
        "avg_control": prop1,
        "avg_control_ok": prop1 <= c0 + 1e-12,
        "avg_control_witness": wit1,
        "carleson": carleson,
        "quasi_ratio": quasi_ratio,
        "alpha_monotone": mono,
        "alpha_monotone_witness": wit4,
        "qorth_ratio": qorth,
    }


# ---------------------------------------------------------------------------
# half-space measures and tents


@dataclass
class HalfSpaceMeasure:
    """Atomic measure on the upper half space with dyadic-friendly atoms.

    Atoms sit at (center, t) where t is a cube sidelength; coordinates
    are stored as integer quarter units so tent membership is exact.
    """

    dim: int
    resolution: int
    centers4: np.ndarray           # (k, dim) int64, quarter units
    sides: np.ndarray              # (k,) int64, lattice units
    masses: np.ndarray

    @staticmethod
    def from_cubes(cubes, masses) -> "HalfSpaceMeasure":
        cubes = list(cubes)
        masses = np.asarray(masses, dtype=np.float64)
        if len(cubes) != len(masses):
            raise ValueError("one mass per cube required")
        if not cubes:
            return HalfSpaceMeasure(0, 0, np.zeros((0, 0), dtype=np.int64),
                                    np.zeros(0, dtype=np.int64), masses)
        res = max(q.resolution for q in cubes)
        dim = cubes[0].dim
        cs, ss = [], []
        for q in cubes:
            fac = 2 ** (res - q.resolution)
            cs.append(tuple(c * fac for c in q.center4))
            ss.append(q.side * fac)
        return HalfSpaceMeasure(dim, res,
                                np.array(cs, dtype=np.int64),
                                np.array(ss, dtype=np.int64), masses)

    @property
    def total(self) -> float:
        return float(self.masses.sum())

    def tent_mask(self, k: Cube) -> np.ndarray:
        """Atoms (c, t) whose cube of side t centered at c sits inside k."""
        if len(self.masses) == 0:
            return np.zeros(0, dtype=bool)
        if k.resolution <= self.resolution:
            fk, fa = 2 ** (self.resolution - k.resolution), 1
        else:
            fk, fa = 1, 2 ** (k.resolution - self.resolution)
        ck = np.array(k.center4, dtype=np.int64) * fk
        sk = k.side * fk
        cs = self.centers4 * fa
        ss = self.sides * fa
        fits = ss <= sk
        off = np.abs(cs - ck).max(axis=1)
        return fits & (off <= 2 * (sk - ss))

    def tent_mass(self, k: Cube) -> float:
        return float(self.masses[self.tent_mask(k)].sum())

    def union_tent_mass(self, cubes) -> float:
        if len(self.masses) == 0:
            return 0.0
        m = np.zeros(len(self.masses), dtype=bool)
        for k in cubes:
            m |= self.tent_mask(k)
        return float(self.masses[m].sum())

    def second_coordinate_sq_integral(self, k: Cube | None = None) -> float:
        """Integral of t^2, optionally over the tent of k."""
        t = self.sides / 2.0 ** self.resolution
        if k is None:
            return float(np.dot(self.masses, t * t))
        sel = self.tent_mask(k)
        return float(np.dot(self.masses[sel], (t * t)[sel]))


# ---------------------------------------------------------------------------
# size functionals


def _size_quotient(k: Cube, sigma: Measure, ambient: Cube,
                   omega_flat: HalfSpaceMeasure, alpha: float) -> float:
    sel_a = _atoms_in(sigma, ambient)
    sel_k = _atoms_in(sigma, k)
    qs = float(sigma.masses[sel_k].sum())
    if qs <= 0.0:
        return 0.0
    outside = sigma.subset(sel_a & ~sel_k)
    p = poisson("standard", k, outside, alpha)
    return (p / k.sidelength) ** 2 * omega_flat.tent_mass(k) / qs


def size_functionals(pairs, omega_flat: HalfSpaceMeasure, sigma: Measure,
                     a_cube: Cube, alpha: float) -> dict:
    """Initial and augmented size of a pair collection below a_cube.

    The quotient at K is (P(K, sigma off K inside A)/l(K))^2 times the
    tent mass over |K|_sigma.  The initial form restricts K to subcubes
    of first components; the augmented form scans every subcube of A.
    The localized form re-ambients to a given subcube S.
    """
    p1 = [k for k, _ in pairs]
    init, init_w, aug, aug_w = 0.0, None, 0.0, None
    for k in _subtree(a_cube):
        val = _size_quotient(k, sigma, a_cube, omega_flat, alpha)
        if val > aug:
            aug, aug_w = val, k
        if val > init and any(p.contains_cube(k) for p in p1):
            init, init_w = val, k

    def localized(s_cube: Cube) -> float:
        best = 0.0
        for k in _subtree(s_cube):
            best = max(best, _size_quotient(k, sigma, s_cube,
                                            omega_flat, alpha))
        return best

    return {"init": init, "init_witness": init_w,
            "aug": aug, "aug_witness": aug_w, "localized": localized}


# ---------------------------------------------------------------------------
# bottom-up generations and the indented subforest


def _minimal_with(root: Cube, pred) -> list:
    """Minimal cubes in the subtree satisfying pred (post-order scan)."""
    out = []

    def scan(q: Cube) -> bool:
        found = False
        for c in _kids(q):
            found |= scan(c)
        if found:
            return True
        if pred(q):
            out.append(q)
            return True
        return False

    scan(root)
    return out


def lacey_bottom_up(pairs, omega_flat: HalfSpaceMeasure, sigma: Measure,
                    a_cube: Cube, alpha: float, eps_size: float,
                    rho: float | None = None) -> list:
    """Generations of stopping cubes driven by tent-mass growth.

    Generation 0 holds the minimal cubes whose size quotient reaches
    eps_size times the initial size; each later generation holds the
    minimal cubes whose tent mass is at least rho times the union of the
    previous generation's tents inside them.  A final residual
    generation keeps the maximal first-component cubes not yet stopped.
    """
    if eps_size <= 0.0:
        raise ValueError("eps_size must be positive")
    rho = 1.0 + eps_size if rho is None else rho
    if rho <= 1.0:
        raise ValueError("rho must exceed 1")
    sizes = size_functionals(pairs, omega_flat, sigma, a_cube, alpha)
    s_init = sizes["init"]
    p1 = [k for k, _ in pairs]
    gens = []
    if s_init > 0.0:
        cut = eps_size * s_init

        def qualifies(q):
            return any(p.contains_cube(q) for p in p1) and \
                _size_quotient(q, sigma, a_cube, omega_flat, alpha) >= cut

        gens.append(_minimal_with(a_cube, qualifies))
    else:
        gens.append([])
    while gens[-1]:
        prev = gens[-1]

        def grows(q):
            below = [l for l in prev if q.contains_cube(l) and l != q]
            if not below:
                return False
            u = omega_flat.union_tent_mass(below)
            return u > 0.0 and omega_flat.tent_mass(q) >= rho * u

        nxt = _minimal_with(a_cube, grows)
        if not nxt:
            break
        gens.append(nxt)
    done = {q for g in gens for q in g}
    tops = [p for p in p1
            if not any(g.contains_cube(p) and g != p for g in p1)]
    residual = []
    for t in sorted(set(tops), key=lambda q: (-q.side, q.lo)):
        if t not in done:
            residual.append(t)
    gens.append(residual)
    return gens


def _triple_inside_box(l: Cube, h: Cube) -> bool:
    lo4, hi4 = scaled_box4(l, 3)
    fl = 2 ** max(0, h.resolution - l.resolution)
    fh = 2 ** max(0, l.resolution - h.resolution)
    return all(h.lo4[a] * fh <= lo4[a] * fl and hi4[a] * fl <= h.hi4[a] * fh
               for a in range(l.dim))


def indented_corona(l_cubes) -> tuple:
    """Subforest of cubes whose triples nest in their forest parents.

    Accepts the flat collection (or generations) and returns (levels,
    parent) where levels[k] lists the depth-k cubes; every cube at depth
    one or more satisfies 3H inside its parent exactly.
    """
    flat = []
    for item in l_cubes:
        if isinstance(item, Cube):
            flat.append(item)
        else:
            flat.extend(item)
    flat = list(dict.fromkeys(flat))
    if not flat:
        return [], {}
    tops = [q for q in flat
            if not any(p.contains_cube(q) and p != q for p in flat)]
    levels = [sorted(set(tops), key=lambda q: (-q.side, q.lo))]
    parent = {q: None for q in levels[0]}
    frontier = levels[0]
    while True:
        nxt = []
        for h in frontier:
            cands = [l for l in flat
                     if l != h and h.contains_cube(l)
                     and _triple_inside_box(l, h)]
            chosen = [l for l in cands
                      if not any(c.contains_cube(l) and c != l
                                 for c in cands)]
            for l in chosen:
                parent[l] = h
                nxt.append(l)
        if not nxt:
            break
        levels.append(sorted(set(nxt), key=lambda q: (-q.side, q.lo)))
        frontier = nxt
    return levels, parent


# ---------------------------------------------------------------------------
# shifted coronas


def shifted_corona(corona: Corona, f_cube: Cube, grid_g: Grid, eps: float,
                   body_cache: dict | None = None) -> list:
    """Cubes of the other grid whose goodness crossover lands in the corona.

    A cube J of grid_g belongs to the shifted corona of f_cube when its
    finest all-good ancestor exists and lies in the restricted corona of
    f_cube.  Cubes with no crossover belong to no shifted corona.
    """
    kids = corona.forest_children(f_cube)

    def in_restricted(q: Cube | None) -> bool:
        if q is None or not f_cube.contains_cube(q):
            return False
        return not any(g.contains_cube(q) for g in kids)

    grid_d = corona.root.grid
    out = []
    for j in grid_g.cubes():
        q, _ = sharp_cross(j, grid_d, eps, body_cache)
        if in_restricted(q):
            out.append(j)
    return out


# ---------------------------------------------------------------------------
# Carleson norms and generation masses


def carleson_norm(cube_family, mu: Measure, extra_tested=()) -> float:
    """Largest quotient sum of member masses inside S over |S|_mu."""
    fam = list(cube_family)
    best = 0.0
    for s in list(dict.fromkeys(fam)) + list(extra_tested):
        ms = mass(s, mu)
        if ms <= 0.0:
            continue
        tot = sum(mass(f2, mu) for f2 in fam if s.contains_cube(f2))
        best = max(best, tot / ms)
    return best


def generation_masses(corona: Corona) -> list:
    """Total stopping-cube mass per forest depth, depth 0 first."""
    by_depth = {}
    for f in corona.stopping:
        by_depth.setdefault(corona.depth(f), 0.0)
        by_depth[corona.depth(f)] += mass(f, corona.mu)
    return [by_depth[k] for k in sorted(by_depth)]
