"""
Ray transform of symmetric 2-tensors along p-wave rays with both endpoints
on S, its sparse discretization, regularized inversion and the
solenoidal/potential splitting.

The transform integrates ``N . B N`` in Euclidean arclength. Over the
g-unit-speed parameterization of the same curve (``dt = ds / c_p``,
``gamma' = c_p N``) this is ``int f(gamma', gamma') dt`` with ``f = B / c_p``.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.integrate import simpson, trapezoid

from .medium import Grid3, LensRegion, MediumModel
from .raytrace import (CHUNK, EXIT_CAP, EXIT_S, Bicharacteristic, trace_rays, worker_count)
from .stencils import erode, trilinear
from .tensorfield import PAIRS, OneFormField, SymTensor2Field, apply_dg, apply_dg_adjoint, pair_weights

GOLDEN_ANGLE = np.pi * (3.0 - np.sqrt(5.0))


class EmptyFanError(RuntimeError):
    """No candidate ray exits through S."""


class ConvergenceError(RuntimeError):
    """An iterative solve stopped at its iteration cap."""


@dataclass
class FanSpec:
    seeds: int = 32
    dirs: int = 64
    h_ray: float = 5e-3
    max_length: float = 4.0
    max_elevation: float = 1.2
    seed_radius: float = 0.95
    jitter_seed: int | None = None

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class RayFan:
    rays: list[Bicharacteristic]
    spec: FanSpec
    x0: np.ndarray
    xi0: np.ndarray
    counts: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.rays)


@dataclass
class TransformSample:
    ray_id: int
    value: float
    length: float


# -- fan generation -----------------------------------------------------------

def _project_to_surface(region: LensRegion, pts: np.ndarray, iters: int = 50) -> np.ndarray:
    """Newton steps along grad theta onto ``theta = 0``."""
    pts = pts.copy()
    for _ in range(iters):
        th, _ = region.levels(pts)
        gth, _ = region.gradients(pts)
        step = (th / np.sum(gth * gth, axis=-1))[:, None] * gth
        pts -= step
        if np.max(np.abs(th)) < 1e-14:
            break
    return pts


def surface_pole(region: LensRegion, grid: Grid3) -> tuple[np.ndarray, np.ndarray, float]:
    """A central point of S, the inward unit normal there and the patch radius.

    The pole is the projection onto S of the centroid of the region's grid
    nodes; the radius is the largest tangential distance from the pole of
    a grid node lying on or near S.
    """
    pts = grid.points().reshape(-1, 3)
    inside = region.inside(pts)
    if not inside.any():
        raise EmptyFanError("the region contains no grid nodes")
    centre = pts[inside].mean(axis=0)
    pole = _project_to_surface(region, centre[None])[0]
    n = region.gradients(pole[None])[0][0]
    n /= np.linalg.norm(n)
    th, q = region.levels(pts)
    near = (q >= 0) & (np.abs(th) <= 2 * grid.h * np.linalg.norm(region.gradients(pts)[0], axis=-1))
    rel = pts[near] - pole
    tang = rel - np.outer(rel @ n, n)
    radius = float(np.max(np.linalg.norm(tang, axis=1))) if near.any() else grid.h
    return pole, n, radius


def fan_launches(region: LensRegion, grid: Grid3, spec: FanSpec) -> tuple[np.ndarray, np.ndarray]:
    """Seed points on S (Vogel spiral in the tangent plane, projected) and launch directions.

    Directions at each seed form an inward cone: ``az`` azimuths about the
    local normal times ``el`` elevations above the tangent plane, with
    ``az * el = dirs`` and ``az`` about four times ``el``.
    """
    pole, n, radius = surface_pole(region, grid)
    e1 = np.cross(n, np.eye(3)[np.argmin(np.abs(n))])
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(n, e1)
    k = np.arange(spec.seeds)
    r = spec.seed_radius * radius * np.sqrt((k + 0.5) / spec.seeds)
    ang = k * GOLDEN_ANGLE
    flat = pole + r[:, None] * (np.cos(ang)[:, None] * e1 + np.sin(ang)[:, None] * e2)
    seeds = _project_to_surface(region, flat)
    _, q = region.levels(seeds)
    seeds = seeds[q > 0]
    if seeds.shape[0] == 0:
        raise EmptyFanError("no seed point lies on S")

    n_el = max(1, int(round(np.sqrt(spec.dirs / 4.0))))
    while spec.dirs % n_el:
        n_el -= 1
    n_az = spec.dirs // n_el
    rng = np.random.default_rng(spec.jitter_seed) if spec.jitter_seed is not None else None
    x0, xi0 = [], []
    for p in seeds:
        nn = region.gradients(p[None])[0][0]
        nn /= np.linalg.norm(nn)
        t1 = np.cross(nn, np.eye(3)[np.argmin(np.abs(nn))])
        t1 /= np.linalg.norm(t1)
        t2 = np.cross(nn, t1)
        shift = rng.uniform(0, 2 * np.pi / n_az) if rng is not None else 0.0
        for i in range(n_el):
            el = spec.max_elevation * (i + 0.5) / n_el
            for j in range(n_az):
                az = shift + 2 * np.pi * j / n_az
                d = np.cos(el) * (np.cos(az) * t1 + np.sin(az) * t2) + np.sin(el) * nn
                x0.append(p)
                xi0.append(d)
    return np.array(x0), np.array(xi0)


def generate_fan(model: MediumModel, region: LensRegion, grid: Grid3, spec: FanSpec | None = None,
                 workers: int | None = None) -> RayFan:
    """Trace the candidate rays of ``spec`` and keep those exiting through S.

    ``counts`` reports ``candidates``, ``kept``, ``cap_exit`` and ``trapped``.

    Raises:
        EmptyFanError: if no candidate exits through S.
    """
    spec = spec or FanSpec()
    x0, xi0 = fan_launches(region, grid, spec)
    rays = trace_rays(model, region, x0, xi0, "+", "p", spec.h_ray, spec.max_length, workers)
    keep = np.array([r.exit == EXIT_S and len(r) > 2 for r in rays])
    counts = {
        "candidates": len(rays),
        "kept": int(keep.sum()),
        "cap_exit": sum(r.exit == EXIT_CAP for r in rays),
        "trapped": sum(r.exit not in (EXIT_S, EXIT_CAP) for r in rays),
        "short": sum(r.exit == EXIT_S and len(r) <= 2 for r in rays),
    }
    if counts["kept"] == 0:
        raise EmptyFanError(f"all {len(rays)} candidate rays were discarded: {counts}")
    return RayFan([r for r, k in zip(rays, keep) if k], spec, x0[keep], xi0[keep], counts)


def straight_chord_exit(region: LensRegion, x0, d, step: float = 1e-4, max_length: float = 10.0,
                        min_length: float = 0.0) -> str:
    """Exit label of the straight line ``x0 + s d`` by dense sampling.

    Used as an independent geometric oracle for constant media. Rays that
    leave within ``min_length`` are labelled ``"short"``.
    """
    d = np.asarray(d, float) / np.linalg.norm(d)
    s = np.arange(1, int(max_length / step) + 1) * step
    pts = np.asarray(x0, float) + s[:, None] * d
    th, q = region.levels(pts)
    out = np.flatnonzero((th < 0) | (q < 0))
    if out.size == 0:
        return "trapped"
    k = out[0]
    if s[k] <= min_length:
        return "short"
    return EXIT_S if th[k] < 0 and (q[k] >= 0 or th[k] < q[k]) else EXIT_CAP


# -- forward transform --------------------------------------------------------

def _integrate(values: np.ndarray, x: np.ndarray, rule: str) -> float:
    if rule == "trapezoid":
        return float(trapezoid(values, x))
    if rule == "simpson":
        return float(simpson(values, x=x))
    raise ValueError(f"unknown quadrature rule {rule!r}")


def _tensor_along(B, pts: np.ndarray) -> np.ndarray:
    if isinstance(B, SymTensor2Field):
        g = B.grid
        corners, w, inside = trilinear(g.origin, g.h, g.shape, pts)
        ok = inside & np.all(B.mask[corners[..., 0], corners[..., 1], corners[..., 2]], axis=1)
        if not np.all(ok):
            raise ValueError(f"ray leaves the valid mask of B at {int((~ok).sum())} samples")
        vals = B.comps[corners[..., 0], corners[..., 1], corners[..., 2]]
        return np.einsum("nk,nkc->nc", w, vals)
    vals = np.asarray(B(pts), dtype=float)
    if vals.shape != pts.shape[:-1] + (6,):
        raise ValueError("callable B must return (..., 6) components")
    return vals


def quadratic_form(comps: np.ndarray, N: np.ndarray) -> np.ndarray:
    """``N . B N`` from stored components."""
    out = np.zeros(N.shape[:-1])
    for k, (i, j) in enumerate(PAIRS):
        out += (1.0 if i == j else 2.0) * comps[..., k] * N[..., i] * N[..., j]
    return out


def forward_transform(B, ray: Bicharacteristic, ray_id: int = 0, rule: str = "trapezoid") -> TransformSample:
    """``int N . B N ds`` along ``ray``.

    Args:
        B: a :class:`SymTensor2Field` (trilinearly interpolated) or a callable
            mapping points ``(..., 3)`` to components ``(..., 6)``.
        rule: ``"trapezoid"`` or ``"simpson"`` in arclength.

    Raises:
        ValueError: if the ray leaves the valid mask of a gridded B.
    """
    vals = _tensor_along(B, ray.x)
    return TransformSample(ray_id, _integrate(quadratic_form(vals, ray.N), ray.s, rule), ray.length)


def transform_g_form(B, model: MediumModel, ray: Bicharacteristic, ray_id: int = 0,
                     rule: str = "trapezoid") -> TransformSample:
    """``int f(gamma', gamma') dt`` with ``f = B / c_p`` and ``gamma' = c_p N`` in travel time ``t``."""
    vals = _tensor_along(B, ray.x)
    c, _ = model.speed(ray.x, ray.mode)
    gdot = c[:, None] * ray.N
    f = vals / c[:, None]
    return TransformSample(ray_id, _integrate(quadratic_form(f, gdot), ray.t, rule), ray.length)


def transform_fan(B, fan: RayFan, rule: str = "trapezoid") -> list[TransformSample]:
    return [forward_transform(B, r, i, rule) for i, r in enumerate(fan.rays)]


# -- discretization -------------------------------------------------------------

def trapezoid_weights(s: np.ndarray) -> np.ndarray:
    ds = np.diff(s)
    w = np.zeros_like(s)
    w[:-1] += 0.5 * ds
    w[1:] += 0.5 * ds
    return w


def _projector_block(rays: Sequence[Bicharacteristic], row0: int, grid: Grid3) -> sp.csr_matrix:
    rows, cols, vals = [], [], []
    nx, ny, nz = grid.shape
    for r_local, ray in enumerate(rays):
        N = ray.N
        w = trapezoid_weights(ray.s)
        corners, tw, inside = trilinear(grid.origin, grid.h, grid.shape, ray.x)
        if not np.all(inside):
            raise ValueError(f"ray {row0 + r_local} leaves the grid")
        node = (corners[..., 0] * ny + corners[..., 1]) * nz + corners[..., 2]
        for k, (i, j) in enumerate(PAIRS):
            coef = (1.0 if i == j else 2.0) * N[:, i] * N[:, j] * w
            rows.append(np.full(node.size, r_local))
            cols.append((node * 6 + k).ravel())
            vals.append((coef[:, None] * tw).ravel())
    shape = (len(rays), grid.size * 6)
    return sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                         shape=shape).tocsr()


def ray_projector(rays: Sequence[Bicharacteristic], grid: Grid3, workers: int | None = None) -> sp.csr_matrix:
    """Sparse matrix of the trapezoid/trilinear transform, unknowns node-major then component.

    Row ``r`` applied to ``B.comps.ravel()`` equals
    ``forward_transform(B, rays[r])`` for a fully valid gridded ``B``.
    Blocks of rays are assembled independently and stacked in order.
    """
    chunks = [(a, min(a + CHUNK, len(rays))) for a in range(0, len(rays), CHUNK)]
    job = lambda ab: _projector_block(rays[ab[0]:ab[1]], ab[0], grid)
    workers = worker_count() if workers is None else workers
    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            blocks = list(pool.map(job, chunks))
    else:
        blocks = [job(ab) for ab in chunks]
    return sp.vstack(blocks, format="csr")


# -- inversion --------------------------------------------------------------------

@dataclass
class CGResult:
    x: np.ndarray
    residuals: list[float]
    iterations: int
    converged: bool


def cgls(A, b: np.ndarray, damp: float = 0.0, tol: float = 1e-8, maxiter: int = 500,
         x0: np.ndarray | None = None) -> CGResult:
    """Conjugate gradients on ``(A^T A + damp I) x = A^T b``.

    ``A`` may be a matrix or a :class:`scipy.sparse.linalg.LinearOperator`.
    ``residuals`` holds the augmented residual
    ``sqrt(|b - A x|^2 + damp |x|^2)`` per iteration, which CGLS decreases
    monotonically. The stopping test is on the normal-equation residual
    relative to ``|A^T b|``, with a round-off floor of
    ``100 eps |A| |b|`` (``|A|`` estimated from the iterates) so that data
    already orthogonal to the range of ``A`` stops instead of iterating on
    noise.
    """
    n = A.shape[1]
    x = np.zeros(n) if x0 is None else x0.astype(float).copy()
    r = b - A @ x
    s = A.T @ r - damp * x
    p = s.copy()
    gamma = float(s @ s)
    norm0 = np.sqrt(float((A.T @ b) @ (A.T @ b)))
    nb = float(np.sqrt(b @ b))
    residuals = [float(np.sqrt(r @ r + damp * (x @ x)))]
    if norm0 == 0.0:
        return CGResult(np.zeros(n), [0.0], 0, True)
    eps = np.finfo(float).eps
    anorm = 0.0

    def done(g):
        return np.sqrt(g) <= max(tol * norm0, 100 * eps * anorm * nb)

    converged = done(gamma)
    it = 0
    while not converged and it < maxiter:
        q = A @ p
        pp = float(p @ p)
        delta = float(q @ q + damp * pp)
        if not delta > 0:
            break
        anorm = max(anorm, np.sqrt(delta / pp))
        if done(gamma):
            converged = True
            break
        a = gamma / delta
        x += a * p
        r -= a * q
        s = A.T @ r - damp * x
        gamma_new = float(s @ s)
        p = s + (gamma_new / gamma) * p
        gamma = gamma_new
        it += 1
        residuals.append(float(np.sqrt(r @ r + damp * (x @ x))))
        converged = done(gamma)
    return CGResult(x, residuals, it, bool(converged))


def regularization_weight(A: sp.spmatrix, reg: float) -> float:
    """Absolute Tikhonov weight ``reg * mean(diag(A^T A))`` over touched unknowns."""
    col = np.asarray(A.multiply(A).sum(axis=0)).ravel()
    touched = col[col > 0]
    return float(reg * touched.mean()) if touched.size else float(reg)


def invert_transform(fan: RayFan, samples: Sequence[TransformSample] | np.ndarray, grid: Grid3,
                     reg: float = 1e-4, tol: float = 1e-8, maxiter: int = 2000,
                     projector: sp.spmatrix | None = None) -> tuple[SymTensor2Field, dict]:
    """Tikhonov-regularized least-squares inversion of the transform.

    Minimizes ``|A f - d|^2 + lam |f|^2`` over six-component nodal fields,
    where ``lam = reg * mean(diag(A^T A))`` depends only on the fan and
    grid, so the estimate is linear in the data.

    Returns:
        ``(estimate, diagnostics)``; diagnostics carry ``residuals`` (one
        per iteration), ``iterations``, ``converged``, ``lambda``,
        ``data_misfit``.
    """
    if len(fan) == 0:
        raise EmptyFanError("cannot invert with an empty fan")
    if not reg > 0:
        raise ValueError("reg must be positive")
    d = np.array([s.value for s in samples], dtype=float) if not isinstance(samples, np.ndarray) else samples
    if d.size != len(fan):
        raise ValueError(f"{d.size} samples for {len(fan)} rays")
    A = ray_projector(fan.rays, grid) if projector is None else projector
    lam = regularization_weight(A, reg)
    res = cgls(A, d, damp=lam, tol=tol, maxiter=maxiter)
    est = SymTensor2Field(grid, res.x.reshape(grid.shape + (6,)))
    diag = {
        "residuals": res.residuals,
        "iterations": res.iterations,
        "converged": res.converged,
        "lambda": lam,
        "data_misfit": float(np.linalg.norm(A @ res.x - d)),
    }
    return est, diag


# -- solenoidal projection --------------------------------------------------------

def solenoidal_project(model: MediumModel, f: SymTensor2Field, grid: Grid3 | None = None,
                       region: LensRegion | None = None, tol: float = 1e-11, maxiter: int = 5000,
                       boundary: str = "all") -> tuple[SymTensor2Field, OneFormField, dict]:
    """Split ``f = f_s + d_g v`` with ``v = 0`` on the boundary of the domain.

    ``v`` is the least-squares fit ``min |f - d_g v|`` in the inner product
    of ``g`` (pointwise Frobenius weighted by ``c_p``) over the region nodes
    where ``f`` is valid, with ``v`` supported on nodes one layer inside.
    The normal equations are the discrete ``delta_g d_g v = delta_g f``;
    they are solved by conjugate gradients.

    Returns:
        ``(f_s, v, info)`` with ``info`` holding iterations and convergence.
    """
    grid = f.grid if grid is None else grid
    pts = grid.points()
    fld = model.fields(pts)
    gpsi = -fld["grad_log_cp"]
    dom = f.mask.copy()
    if region is not None:
        dom &= region.inside(pts)
    if boundary == "all" or region is None:
        support = erode(dom, 1)
    elif boundary == "S":
        th, _ = region.levels(pts)
        support = erode(th >= -region.s_tolerance, 1)
    else:
        raise ValueError("boundary must be 'all' or 'S'")
    weight = (fld["cp"] * dom)[..., None] * pair_weights()
    sw = np.sqrt(weight)
    idx = np.flatnonzero(np.repeat(support[..., None], 3, axis=-1).ravel())
    n_full = grid.size * 3
    h = grid.h

    def expand(u):
        v = np.zeros(n_full)
        v[idx] = u
        return v.reshape(grid.shape + (3,))

    from scipy.sparse.linalg import LinearOperator

    def mv(u):
        return (sw * apply_dg(expand(u), gpsi, h)).ravel()

    def rmv(y):
        return apply_dg_adjoint(sw * y.reshape(grid.shape + (6,)), gpsi, h).reshape(-1)[idx]

    op = LinearOperator((grid.size * 6, idx.size), matvec=mv, rmatvec=rmv, dtype=float)
    rhs = (sw * np.where(dom[..., None], f.comps, 0.0)).ravel()
    res = cgls(op, rhs, tol=tol, maxiter=maxiter)
    v = expand(res.x)
    fs = f.comps - apply_dg(v, gpsi, h)
    info = {"iterations": res.iterations, "converged": res.converged, "support_nodes": int(support.sum())}
    return SymTensor2Field(grid, fs, f.mask.copy()), OneFormField(grid, v), info


def region_norm(f: SymTensor2Field, model: MediumModel | None = None, region: LensRegion | None = None) -> float:
    """L2 norm over valid nodes of the region (c_p-weighted when ``model`` is given)."""
    pts = f.grid.points()
    mask = f.mask & (region.inside(pts) if region is not None else True)
    w = model.fields(pts)["cp"] if model is not None else None
    return SymTensor2Field(f.grid, f.comps, mask).norm(w)


# -- manufactured fields ------------------------------------------------------------

_EPS = np.zeros((3, 3, 3))
_EPS[0, 1, 2] = _EPS[1, 2, 0] = _EPS[2, 0, 1] = 1.0
_EPS[0, 2, 1] = _EPS[2, 1, 0] = _EPS[1, 0, 2] = -1.0


def solenoidal_bump(centre, radius: float, E, power: int = 6) -> Callable[[np.ndarray], np.ndarray]:
    """Divergence-free symmetric field ``curl curl^T (phi E)`` as a callable ``pts -> (..., 6)``.

    ``phi = (1 - |x - centre|^2 / radius^2)_+^power`` and ``E`` is a constant
    symmetric matrix. ``f_ij = eps_ikl eps_jmn d_k d_m phi E_ln``, so
    ``d_j f_ij = 0`` identically and ``f`` vanishes outside the ball.
    """
    centre = np.asarray(centre, float)
    E = np.asarray(E, float)
    k = power

    def evaluate(pts):
        pts = np.asarray(pts, float)
        d = pts - centre
        u = 1.0 - np.sum(d * d, axis=-1) / radius**2
        on = u > 0
        u = np.where(on, u, 0.0)
        H = (k * (k - 1) * u[..., None, None] ** (k - 2) * 4 * d[..., :, None] * d[..., None, :] / radius**4
             - k * u[..., None, None] ** (k - 1) * 2 * np.eye(3) / radius**2)
        H = np.where(on[..., None, None], H, 0.0)
        f = np.einsum("ikl,jmn,...km,ln->...ij", _EPS, _EPS, H, E)
        return np.stack([f[..., i, j] for i, j in PAIRS], axis=-1)

    return evaluate
