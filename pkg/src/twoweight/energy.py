"""Energy constants, pseudoprojection norms, and half-space testing.

Strong and Whitney energies are suprema over enumerated cubes and dyadic
subpartitions; the subpartition search is a dynamic program over the
tree, so deeper searches never lose to shallower ones.  Functional
energy is estimated from below over a finite dictionary of test
functions, and the Appendix-style half-space inequalities are evaluated
verbatim on atomic measures.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .bfamily import mart_apply, sharp_norm_sq, star_norm_sq
from .corona import Corona, HalfSpaceMeasure, shifted_corona
from .grid import Cube, scaled_box4, whitney
from .measure import Measure, mass
from .poisson_a2 import _norm_moment, enumerate_cubes, halfspace_poisson, \
    poisson
from .singular import apply as kernel_apply

__all__ = [
    "EnergyReport",
    "PseudoEnergy",
    "strong_energy",
    "whitney_energy",
    "pseudo_energy",
    "monotonicity_check",
    "functional_energy_context",
    "functional_energy_lhs",
    "functional_energy_estimate",
    "mu_bar_from_corona",
    "halfspace_testing",
]


def _atoms_in(mu: Measure, q: Cube) -> np.ndarray:
    f = 2 ** (mu.resolution - q.resolution)
    lo = np.array(q.lo, dtype=np.int64) * f
    return mu.in_box(lo, lo + q.side * f)


def _atoms_in_scaled(mu: Measure, q: Cube, factor: float) -> np.ndarray:
    lo4, hi4 = scaled_box4(q, factor)
    f = 2 ** (mu.resolution - q.resolution)
    return mu.in_box4(tuple(x * f for x in lo4), tuple(x * f for x in hi4))


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


def _contains(outer: Cube, inner: Cube) -> bool:
    fo = 2 ** max(0, inner.resolution - outer.resolution)
    fi = 2 ** max(0, outer.resolution - inner.resolution)
    return all(outer.lo[a] * fo <= inner.lo[a] * fi
               and (inner.lo[a] + inner.side) * fi
               <= (outer.lo[a] + outer.side) * fo
               for a in range(outer.dim))


def _weighted(mu: Measure, dens) -> Measure:
    """The measure with the given nonnegative density against mu."""
    dens = np.abs(np.asarray(dens, dtype=np.float64))
    keep = dens * mu.masses > 0
    return Measure(mu.dim, mu.resolution, mu.points[keep],
                   (mu.masses * dens)[keep], ())


# ---------------------------------------------------------------------------
# strong energy


@dataclass
class EnergyReport:
    strong: float = 0.0
    strong_star: float = 0.0
    depth: int | None = None
    strong_witness: Cube | None = None
    strong_partition: list = field(default_factory=list)
    strong_star_witness: Cube | None = None
    whitney: dict = field(default_factory=dict)

    @property
    def aggregate(self) -> float:
        return self.strong + self.strong_star

    def as_dict(self) -> dict:
        def _cube(q):
            if q is None:
                return None
            return {"lo": list(q.lo), "side": q.side,
                    "resolution": q.resolution}
        return {
            "strong": self.strong,
            "strong_star": self.strong_star,
            "aggregate": self.aggregate,
            "depth": self.depth,
            "strong_witness": _cube(self.strong_witness),
            "strong_star_witness": _cube(self.strong_star_witness),
            "whitney": dict(self.whitney),
        }


def _best_partition(top: Cube, depth: int | None, term_fn):
    """Largest subpartition sum of term_fn below top, with its partition."""
    def solve(q: Cube, d):
        own = term_fn(q)
        kids = _kids(q)
        if not kids or (d is not None and d <= 0):
            return own, [q]
        tot, parts = 0.0, []
        for c in kids:
            v, p = solve(c, None if d is None else d - 1)
            tot += v
            parts.extend(p)
        if own >= tot:
            return own, [q]
        return tot, parts

    return solve(top, depth)


def _strong_one_direction(sigma: Measure, omega: Measure, cubes, alpha,
                          depth):
    best, witness, partition = 0.0, None, []
    for i in cubes:
        qs = float(sigma.masses[_atoms_in(sigma, i)].sum())
        if qs <= 0.0:
            continue
        amb = sigma.subset(_atoms_in(sigma, i))

        def term(j: Cube) -> float:
            p = poisson("standard", j, amb, alpha)
            return (p / j.sidelength) ** 2 * _norm_moment(j, omega)

        val, parts = _best_partition(i, depth, term)
        if val / qs > best:
            best, witness, partition = val / qs, i, parts
    return math.sqrt(best), witness, partition


def strong_energy(sigma: Measure, omega: Measure, grids, alpha: float,
                  depth: int | None = 3,
                  include_augmented: bool = True) -> EnergyReport:
    """Strong energy constants of the pair, both directions.

    The value squared is the largest, over enumerated cubes I and dyadic
    subpartitions of I at most `depth` levels deep (None for unlimited),
    of the normalized sum of squared Poisson-to-sidelength quotients
    weighted by the second omega-moments of the pieces.
    """
    if depth is not None and depth < 1:
        raise ValueError("depth must be at least 1 (or None)")
    cubes = list(enumerate_cubes(grids, sigma, omega, include_augmented))
    s, w, p = _strong_one_direction(sigma, omega, cubes, alpha, depth)
    s2, w2, _ = _strong_one_direction(omega, sigma, cubes, alpha, depth)
    return EnergyReport(strong=s, strong_star=s2, depth=depth,
                        strong_witness=w, strong_partition=p,
                        strong_star_witness=w2)


# ---------------------------------------------------------------------------
# Whitney energies


def whitney_energy(sigma: Measure, omega: Measure, grids, alpha: float,
                   gamma: float, variant: str = "hole",
                   depth: int | None = None) -> tuple:
    """Whitney-decomposed energy with a hole, partial hole, or plug.

    For each enumerated cube I and each subpartition piece, the Whitney
    cubes M of the piece contribute Poisson quotients of sigma on I with
    gamma*M removed (hole), M removed (partial), or nothing removed
    (plug), weighted by the omega-moments of M.  Returns (value,
    witness cube).
    """
    if not 1.0 < gamma <= 5.0:
        raise ValueError("gamma must lie in (1, 5]")
    if variant not in ("hole", "partial", "plug"):
        raise ValueError(f"unknown Whitney variant {variant!r}")
    wh_cache: dict = {}

    def whitney_of(q: Cube):
        if q not in wh_cache:
            chosen, residual = whitney(q)
            wh_cache[q] = chosen + residual
        return wh_cache[q]

    best, witness = 0.0, None
    for i in enumerate_cubes(grids, sigma, omega, True):
        sel_i = _atoms_in(sigma, i)
        qs = float(sigma.masses[sel_i].sum())
        if qs <= 0.0:
            continue

        def term(j: Cube) -> float:
            out = 0.0
            for m in whitney_of(j):
                if variant == "hole":
                    sel = sel_i & ~_atoms_in_scaled(sigma, m, gamma)
                elif variant == "partial":
                    sel = sel_i & ~_atoms_in(sigma, m)
                else:
                    sel = sel_i
                p = poisson("standard", m, sigma.subset(sel), alpha)
                out += (p / m.sidelength) ** 2 * _norm_moment(m, omega)
            return out

        val, _ = _best_partition(i, depth, term)
        if val / qs > best:
            best, witness = val / qs, i
    return math.sqrt(best), witness


# ---------------------------------------------------------------------------
# pseudoprojection energies


@dataclass
class PseudoEnergy:
    sharp: float
    star: float
    percube_c: float
    percube_witness: Cube | None = None


def pseudo_energy(h_cubes, family, g=None) -> PseudoEnergy:
    """Nonstandard norms of the pseudoprojection onto a cube collection.

    sharp is the coordinate-energy norm squared over h_cubes; star is
    the corresponding function norm squared of g (0 when g is omitted).
    percube_c records the largest quotient of the sharp norm localized
    below K against the plain second moment of K, over K in h_cubes.
    """
    h_cubes = list(h_cubes)
    sharp = sharp_norm_sq(family, h_cubes) if h_cubes else 0.0
    star = star_norm_sq(family, h_cubes, g) if g is not None and h_cubes \
        else 0.0
    best, wit = 0.0, None
    fam_cubes = list(family.values)
    for k in h_cubes:
        denom = _norm_moment(k, family.mu)
        if denom <= 0.0:
            continue
        local = [j for j in fam_cubes if _contains(k, j)]
        val = sharp_norm_sq(family, local) / denom
        if val > best:
            best, wit = val, k
    return PseudoEnergy(sharp=sharp, star=star, percube_c=best,
                        percube_witness=wit)


# ---------------------------------------------------------------------------
# monotonicity and pivotal checks


def monotonicity_check(kernel, i_cube: Cube, j_cube: Cube,
                       mu_meas: Measure, mu_density, psi, family,
                       delta: float = 1.0, gamma: float = 2.0) -> dict:
    """Evaluates both sides of the one-sided monotonicity estimate.

    The left side pairs the operator applied to the signed measure with
    the dual martingale difference of psi on J; the right side is the
    compact Poisson-energy functional of |mu| on J times the star norm.
    Requires gamma*J inside I and mu supported outside I.
    """
    omega = family.mu
    lo4, hi4 = scaled_box4(j_cube, gamma)
    f = 2 ** max(0, i_cube.resolution - j_cube.resolution)
    fi = 2 ** max(0, j_cube.resolution - i_cube.resolution)
    if not all(i_cube.lo4[a] * fi <= lo4[a] * f
               and hi4[a] * f <= i_cube.hi4[a] * fi
               for a in range(j_cube.dim)):
        raise ValueError("gamma*J must sit inside I")
    if bool(_atoms_in(mu_meas, i_cube).any()):
        raise ValueError("mu must be supported outside I")
    psi = np.asarray(psi, dtype=np.float64)
    dens = np.asarray(mu_density, dtype=np.float64)

    box_psi = mart_apply(family, "Box", j_cube, psi)
    t_mu = kernel_apply(kernel, mu_meas, dens, omega)
    lhs = abs(float(np.dot(omega.masses, t_mu * box_psi)))

    mu_abs = _weighted(mu_meas, dens)
    ell = j_cube.sidelength
    p_std = poisson("standard", j_cube, mu_abs, kernel.alpha) / ell
    p_small = poisson("small", j_cube, mu_abs, kernel.alpha,
                      delta=delta) / ell
    sharp_j = math.sqrt(sharp_norm_sq(family, [j_cube]))
    mom_j = math.sqrt(_norm_moment(j_cube, omega))
    phi = p_std * sharp_j + p_small * mom_j
    star = math.sqrt(star_norm_sq(family, [j_cube], psi))

    rhs = phi * star
    if rhs > 0.0:
        ratio = lhs / rhs
    else:
        ratio = 0.0 if lhs == 0.0 else math.inf

    piv_denom = poisson("standard", j_cube, mu_abs, kernel.alpha) \
        * math.sqrt(mass(j_cube, omega)) \
        * math.sqrt(float(np.dot(omega.masses, box_psi * box_psi)))
    pivotal = lhs / piv_denom if piv_denom > 0.0 else \
        (0.0 if lhs == 0.0 else math.inf)
    return {"lhs": lhs, "phi": phi, "star": star, "ratio": ratio,
            "pivotal": pivotal}


# ---------------------------------------------------------------------------
# functional energy


def functional_energy_context(corona: Corona, grid_g, fam_omega, eps: float,
                              alpha: float) -> list:
    """Whitney cubes of the corona tops with their shifted-corona energies.

    Returns a list of (M, q) where M runs over the Whitney cubes of each
    stopping cube F and q is the sharp-norm square of the coordinate
    pseudoprojection onto the shifted-corona cubes inside M.
    """
    body_cache: dict = {}
    contrib = {j: sharp_norm_sq(fam_omega, [j]) for j in fam_omega.values}
    out = []
    for f_cube in corona.stopping:
        shift = shifted_corona(corona, f_cube, grid_g, eps, body_cache)
        chosen, residual = whitney(f_cube)
        for m in chosen + residual:
            q = sum(contrib.get(j, 0.0) for j in shift
                    if _contains(m, j))
            out.append((m, q))
    return out


def functional_energy_lhs(h, context, sigma: Measure, alpha: float) -> float:
    """Whitney-Poisson pairing of |h| dsigma against the context energies."""
    h = np.asarray(h, dtype=np.float64)
    hs = _weighted(sigma, h)
    total = 0.0
    for m, q in context:
        if q <= 0.0:
            continue
        p = poisson("standard", m, hs, alpha)
        total += (p / m.sidelength) ** 2 * q
    return total


def functional_energy_estimate(context, sigma: Measure, alpha: float,
                               root: Cube, seed: int = 0,
                               n_sign: int = 8) -> dict:
    """Lower estimate of the functional energy constant over a dictionary.

    The dictionary holds normalized cube indicators plus random sign
    vectors; the estimate is the largest square root of the pairing per
    unit L2(sigma) norm of h.
    """
    rng = np.random.default_rng(seed)
    dictionary = []
    for q in _subtree(root):
        sel = _atoms_in(sigma, q)
        qm = float(sigma.masses[sel].sum())
        if qm > 0.0:
            dictionary.append(("indicator", sel.astype(np.float64)
                               / math.sqrt(qm)))
    for _ in range(n_sign):
        signs = rng.choice([-1.0, 1.0], size=sigma.natoms)
        nrm = math.sqrt(float(sigma.masses.sum()))
        dictionary.append(("signs", signs / nrm))
    best, kind = 0.0, None
    for name, h in dictionary:
        val = functional_energy_lhs(h, context, sigma, alpha)
        if val > best:
            best, kind = val, name
    return {"value": math.sqrt(best), "best_kind": kind,
            "dictionary_size": len(dictionary)}


# ---------------------------------------------------------------------------
# half-space testing


def mu_bar_from_corona(context) -> tuple:
    """Half-space measures (mu, mu/t^2) from a functional-energy context."""
    cubes = [m for m, _ in context]
    masses = np.array([q for _, q in context], dtype=np.float64)
    mu = HalfSpaceMeasure.from_cubes(cubes, masses)
    sides = np.array([m.sidelength for m in cubes], dtype=np.float64)
    scaled = np.divide(masses, sides * sides, out=np.zeros_like(masses),
                       where=sides > 0)
    mu_bar = HalfSpaceMeasure.from_cubes(cubes, scaled)
    return mu, mu_bar


def halfspace_testing(i_cube: Cube, mu_bar: HalfSpaceMeasure,
                      sigma: Measure, alpha: float, consts: dict) -> dict:
    """Forward and backward half-space Poisson testing on one cube.

    consts needs e2, calA2, calA2_star, punct.  Both sides of each
    inequality are returned along with their quotients (None when the
    right side vanishes).
    """
    n = sigma.dim
    sel_i = _atoms_in(sigma, i_cube)
    sigma_i = sigma.subset(sel_i)
    qs = float(sigma.masses[sel_i].sum())

    centers = mu_bar.centers4.astype(np.float64) / 2.0 ** (mu_bar.resolution
                                                           + 2)
    ts = mu_bar.sides.astype(np.float64) / 2.0 ** mu_bar.resolution
    fwd_lhs = 0.0
    for c, t, w in zip(centers, ts, mu_bar.masses):
        if w <= 0.0 or t <= 0.0:
            continue
        val = halfspace_poisson("forward", alpha=alpha, n=n, x=c, t=t,
                                rho=sigma_i)
        fwd_lhs += w * val * val
    fwd_rhs = (consts["e2"] ** 2 + consts["calA2"] + consts["calA2_star"]
               + consts["punct"]) * qs

    tent = mu_bar.tent_mask(i_cube)
    bwd_lhs = 0.0
    if tent.any():
        ys = centers[tent]
        tt = ts[tent]
        ws = mu_bar.masses[tent]
        for x, w in zip(sigma.coords_float(), sigma.masses):
            val = halfspace_poisson("dual", alpha=alpha, n=n, x=x,
                                    upper_atoms=(ys, tt, ws))
            bwd_lhs += w * val * val
    bwd_rhs = (consts["e2"] ** 2 + consts["calA2"] + consts["punct"]) \
        * mu_bar.second_coordinate_sq_integral(i_cube)

    return {
        "forward_lhs": fwd_lhs,
        "forward_rhs": fwd_rhs,
        "forward_ratio": fwd_lhs / fwd_rhs if fwd_rhs > 0.0 else None,
        "backward_lhs": bwd_lhs,
        "backward_rhs": bwd_rhs,
        "backward_ratio": bwd_lhs / bwd_rhs if bwd_rhs > 0.0 else None,
    }
