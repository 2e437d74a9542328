"""Fractional singular kernels, truncation, and testing constants.

Everything acts on atomic measures, so the truncated operator is a finite
sum and the two-weight norm is the largest singular value of an explicit
mass-weighted kernel matrix.  Truncation is a hard cutoff: atom pairs at
distance outside the open interval (delta, R) contribute nothing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .grid import Cube
from .measure import Measure
from .poisson_a2 import A2Report

__all__ = [
    "KernelSpec",
    "TestingReport",
    "make_kernel",
    "apply",
    "operator_norm",
    "testing_constants",
    "local_test_integrals",
    "ntv",
]

_SVD_CUTOFF = 2000
_POWER_MAX_ITER = 10_000
_POWER_TOL = 1e-8


@dataclass(frozen=True)
class KernelSpec:
    """A validated alpha-fractional kernel with hard truncation."""

    dim: int
    alpha: float
    kind: str                      # "riesz", "riesz_vector", or "custom"
    delta_trunc: float
    radius: float
    c_cz: float                    # smallest admissible size/gradient constant
    component: int | None = None   # for kind == "riesz"
    func: object = None            # for kind == "custom": K(x, y) -> float
    smooth_order: float = 1.0      # extra smoothness exponent beyond Lipschitz

    @property
    def vector_valued(self) -> bool:
        return self.kind == "riesz_vector"


@dataclass
class TestingReport:
    forward: float = 0.0
    dual: float = 0.0
    norm: float = 0.0
    forward_witness: Cube | None = None
    dual_witness: Cube | None = None
    table: list = field(default_factory=list)  # per-cube quotients

    def as_dict(self) -> dict:
        def _cube(q):
            if q is None:
                return None
            return {"lo": list(q.lo), "side": q.side,
                    "resolution": q.resolution}
        return {
            "forward": self.forward,
            "dual": self.dual,
            "norm": self.norm,
            "forward_witness": _cube(self.forward_witness),
            "dual_witness": _cube(self.dual_witness),
        }


# ---------------------------------------------------------------------------
# kernel construction and evaluation


def _riesz_rows(xs, ys, alpha, component):
    """Kernel values K(x, y) for every x in xs against every y in ys.

    Returns shape (len(xs), len(ys)) for a single component, or
    (len(xs), len(ys), n) when component is None (full vector).
    """
    n = xs.shape[1]
    diff = xs[:, None, :] - ys[None, :, :]
    r = np.sqrt((diff * diff).sum(axis=2))
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = r ** (-(n - alpha + 1))
    scale[r == 0.0] = 0.0
    if component is not None:
        return diff[:, :, component] * scale
    return diff * scale[:, :, None]


def _pair_distances(xs, ys):
    diff = xs[:, None, :] - ys[None, :, :]
    return np.sqrt((diff * diff).sum(axis=2))


def _truncation_mask(r, spec):
    return (r > spec.delta_trunc) & (r < spec.radius)


def _eval_matrix(spec: KernelSpec, xs: np.ndarray, ys: np.ndarray):
    """Truncated kernel values; zero outside (delta, R).

    Shape (len(xs), len(ys)), with a trailing dim axis for vector kernels.
    """
    xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
    ys = np.atleast_2d(np.asarray(ys, dtype=np.float64))
    r = _pair_distances(xs, ys)
    keep = _truncation_mask(r, spec)
    if spec.kind == "riesz":
        k = _riesz_rows(xs, ys, spec.alpha, spec.component)
        return np.where(keep, k, 0.0)
    if spec.kind == "riesz_vector":
        k = _riesz_rows(xs, ys, spec.alpha, None)
        return np.where(keep[:, :, None], k, 0.0)
    out = np.zeros(r.shape)
    fn = spec.func
    for i in range(r.shape[0]):
        for j in range(r.shape[1]):
            if keep[i, j]:
                out[i, j] = fn(xs[i], ys[j])
    return out


def _sample_pairs(dim, delta, radius, count, rng):
    """Point pairs with separation strictly inside (delta, radius)."""
    got = []
    while len(got) < count:
        xs = rng.uniform(-radius, radius, size=(4 * count, dim))
        ys = rng.uniform(-radius, radius, size=(4 * count, dim))
        r = np.sqrt(((xs - ys) ** 2).sum(axis=1))
        ok = (r > delta * 1.0001) & (r < radius * 0.9999)
        got.extend(zip(xs[ok], ys[ok]))
    return got[:count]


def _point_value(spec, x, y):
    v = _eval_matrix(spec, x[None, :], y[None, :])[0, 0]
    if spec.vector_valued:
        return float(np.sqrt((v * v).sum()))
    return float(abs(v))


def _validation_sweep(spec: KernelSpec, samples: int, rng):
    """Largest size and gradient quotients over sampled point pairs."""
    n = spec.dim
    worst_size = 0.0
    worst_grad = 0.0
    worst_pair = None
    for x, y in _sample_pairs(n, spec.delta_trunc, spec.radius, samples, rng):
        r = float(np.sqrt(((x - y) ** 2).sum()))
        val = _point_value(spec, x, y)
        q = val * r ** (n - spec.alpha)
        if q > worst_size:
            worst_size, worst_pair = q, (x.copy(), y.copy())
        h = 1e-6 * r
        grad2 = 0.0
        for axis in range(n):
            xp = x.copy()
            xp[axis] += h
            xm = x.copy()
            xm[axis] -= h
            rp = np.sqrt(((xp - y) ** 2).sum())
            rm = np.sqrt(((xm - y) ** 2).sum())
            if not (spec.delta_trunc < rp < spec.radius
                    and spec.delta_trunc < rm < spec.radius):
                grad2 = -1.0
                break
            vp = _eval_matrix(spec, xp[None, :], y[None, :])[0, 0]
            vm = _eval_matrix(spec, xm[None, :], y[None, :])[0, 0]
            d = (np.asarray(vp) - np.asarray(vm)) / (2 * h)
            grad2 += float((d * d).sum())
        if grad2 >= 0.0:
            worst_grad = max(worst_grad,
                             math.sqrt(grad2) * r ** (n - spec.alpha + 1))
    return worst_size, worst_grad, worst_pair


def make_kernel(dim: int, alpha: float, kind: str = "riesz", *,
                component: int = 0, func=None, c_cz: float | None = None,
                delta_trunc: float = 1e-3, radius: float = 1e3,
                samples: int = 1000, seed: int = 0) -> KernelSpec:
    """Build and validate a truncated kernel.

    Riesz kinds get their admissible constant measured by the sweep.  A
    custom kernel must come with a claimed c_cz; the sweep rejects it,
    naming the worst pair, if the size bound fails anywhere sampled.
    """
    if not 0 <= alpha < dim:
        raise ValueError("alpha must lie in [0, dim)")
    if not 0 < delta_trunc < radius:
        raise ValueError("truncation needs 0 < delta_trunc < radius")
    if kind in ("riesz", "riesz_vector"):
        comp = component if kind == "riesz" else None
        if comp is not None and not 0 <= comp < dim:
            raise ValueError(f"component {comp} out of range for dim {dim}")
        spec = KernelSpec(dim, alpha, kind, delta_trunc, radius, 0.0,
                          component=comp)
    elif kind == "custom":
        if func is None or c_cz is None:
            raise ValueError("custom kernel needs func and a claimed c_cz")
        spec = KernelSpec(dim, alpha, kind, delta_trunc, radius, float(c_cz),
                          func=func, smooth_order=0.0)
    else:
        raise ValueError(f"unknown kernel kind {kind!r}")
    rng = np.random.default_rng(seed)
    size, grad, pair = _validation_sweep(spec, samples, rng)
    if kind == "custom":
        if size > spec.c_cz * (1 + 1e-9):
            x, y = pair
            raise ValueError(
                f"size bound fails: |K| * r^(n-alpha) = {size} > {spec.c_cz} "
                f"at x={x.tolist()} y={y.tolist()}")
        return spec
    measured = max(size, grad)
    return KernelSpec(dim, alpha, kind, delta_trunc, radius, measured,
                      component=spec.component)


# ---------------------------------------------------------------------------
# operator application and norm


def apply(kernel: KernelSpec, sigma: Measure, f, omega: Measure,
          transpose: bool = False) -> np.ndarray:
    """Values of the truncated operator (against sigma) at the omega atoms.

    f is an array over the sigma atoms.  With transpose=True the kernel
    arguments are swapped, giving the dual operator.  Vector kernels
    return shape (omega.natoms, dim).
    """
    f = np.asarray(f, dtype=np.float64)
    if f.shape != (sigma.natoms,):
        raise ValueError("f must be an array over the sigma atoms")
    if omega.natoms == 0 or sigma.natoms == 0:
        shape = (omega.natoms, kernel.dim) if kernel.vector_valued \
            else (omega.natoms,)
        return np.zeros(shape)
    k = _eval_matrix(kernel, omega.coords_float(), sigma.coords_float())
    if transpose:
        kt = _eval_matrix(kernel, sigma.coords_float(), omega.coords_float())
        k = np.swapaxes(kt, 0, 1)
    wf = sigma.masses * f
    if kernel.vector_valued:
        return np.einsum("ijd,j->id", k, wf)
    return k @ wf


def _weighted_matrix(kernel: KernelSpec, sigma: Measure, omega: Measure):
    k = _eval_matrix(kernel, omega.coords_float(), sigma.coords_float())
    if kernel.vector_valued:
        k = np.concatenate([k[:, :, d] for d in range(kernel.dim)], axis=0)
        wl = np.tile(np.sqrt(omega.masses), kernel.dim)
    else:
        wl = np.sqrt(omega.masses)
    return wl[:, None] * k * np.sqrt(sigma.masses)[None, :]


def operator_norm(kernel: KernelSpec, sigma: Measure, omega: Measure) -> float:
    """Two-weight L2(sigma) -> L2(omega) norm of the truncated operator."""
    if sigma.natoms > 10_000 or omega.natoms > 10_000:
        raise ValueError("atom counts must stay at or below 10^4")
    if sigma.natoms == 0 or omega.natoms == 0:
        return 0.0
    a = _weighted_matrix(kernel, sigma, omega)
    if max(a.shape) <= _SVD_CUTOFF:
        return float(np.linalg.svd(a, compute_uv=False)[0])
    # power iteration on the Gram matrix, relative tolerance on the value
    g = a.T @ a if a.shape[0] >= a.shape[1] else a @ a.T
    rng = np.random.default_rng(0)
    v = rng.standard_normal(g.shape[0])
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(_POWER_MAX_ITER):
        w = g @ v
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        v_new = w / nw
        lam_new = float(v_new @ (g @ v_new))
        if abs(lam_new - lam) <= _POWER_TOL * max(lam_new, 1e-300):
            return math.sqrt(lam_new)
        v, lam = v_new, lam_new
    resid = float(np.linalg.norm(g @ v - lam * v))
    raise RuntimeError(f"power iteration did not converge, residual {resid}")


# ---------------------------------------------------------------------------
# testing constants


def _atoms_in_cube(mu: Measure, q: Cube) -> np.ndarray:
    f = 2 ** (mu.resolution - q.resolution)
    lo = np.array(q.lo, dtype=np.int64) * f
    return mu.in_box(lo, lo + q.side * f)


def local_test_integrals(kernel: KernelSpec, sigma: Measure, omega: Measure,
                         b, transpose: bool = False):
    """Callable q -> integral over q of |T(b)|^2 against omega.

    With transpose=True the roles swap: b lives on the omega atoms and
    the result integrates against sigma.
    """
    if transpose:
        vals = apply(kernel, omega, b, sigma, transpose=True)
        target = sigma
    else:
        vals = apply(kernel, sigma, b, omega)
        target = omega
    sq = vals * vals
    if sq.ndim == 2:
        sq = sq.sum(axis=1)

    def integral(q: Cube) -> float:
        sel = _atoms_in_cube(target, q)
        return float(np.dot(target.masses[sel], sq[sel]))

    return integral


def _one_direction(kernel, src: Measure, dst: Measure, fam,
                   transpose: bool) -> tuple:
    best, witness, rows = 0.0, None, []
    for q in fam.cubes():
        qs = fam.mass(q)
        if qs <= 0.0:
            continue
        local = local_test_integrals(kernel, src, dst, fam.b(q),
                                     transpose=transpose)
        quot = local(q) / qs
        rows.append((q, quot))
        if quot > best:
            best, witness = quot, q
    return math.sqrt(best), witness, rows


def testing_constants(kernel: KernelSpec, sigma: Measure, omega: Measure,
                      bfam, bstar_fam) -> TestingReport:
    """Forward and dual b-testing constants plus the operator norm.

    The forward constant squares to the largest value, over the cubes of
    the forward family, of int_Q |T(b_Q)|^2 domega / |Q|_sigma; the dual
    swaps every role.  Cubes of zero source mass are skipped.
    """
    fwd, fw, ft = _one_direction(kernel, sigma, omega, bfam, False)
    dual, dw, dt = _one_direction(kernel, sigma, omega, bstar_fam, True)
    nrm = operator_norm(kernel, sigma, omega)
    table = [{"direction": "forward", "cube": q, "quotient": v}
             for q, v in ft]
    table += [{"direction": "dual", "cube": q, "quotient": v}
              for q, v in dt]
    return TestingReport(forward=fwd, dual=dual, norm=nrm,
                         forward_witness=fw, dual_witness=dw, table=table)


def ntv(testing: TestingReport, a2: A2Report, e2: float) -> dict:
    """Aggregate constant: forward + dual + sqrt(A2 aggregate) + energy.

    The ratio norm / aggregate is None (flagged indeterminate) when the
    aggregate vanishes; the classical-A2 divergence flag is passed through.
    """
    total = testing.forward + testing.dual + math.sqrt(a2.aggregate) + e2
    if total > 0.0:
        ratio, indet = testing.norm / total, False
    else:
        ratio, indet = None, True
    return {
        "ntv": total,
        "norm": testing.norm,
        "ratio": ratio,
        "indeterminate": indet,
        "classicalA2_diverges": a2.classicalA2_diverges,
        "components": {
            "forward": testing.forward,
            "dual": testing.dual,
            "sqrt_a2": math.sqrt(a2.aggregate),
            "energy": e2,
        },
    }
