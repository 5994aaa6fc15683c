"""
Null-bicharacteristics of the isotropic elastodynamics operator.

With Euclidean arclength ``s`` along the spatial projection the Hamiltonian
``H = tau -/+ c |xi|`` generates::

    dt/ds = 1/c,  dx/ds = +/- xi/|xi|,  dtau/ds = 0,  dxi/ds = -/+ |xi| grad(log c)

which is integrated with fixed-step classical RK4. The leading amplitude is
transported in closed form from the divergence of the ray direction field,
estimated with a four-ray fan.
"""

from __future__ import annotations

import heapq
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import cumulative_trapezoid

from .medium import DomainError, Grid3, LensRegion, MediumModel, normalize_mode
from .stencils import interpolate

EXIT_S = "boundary-S"
EXIT_CAP = "boundary-cap"
EXIT_TRAPPED = "trapped"
EXIT_MAX = "max-length"

_BISECT_ITERS = 60
CHUNK = 256


def parse_sign(sign) -> int:
    if sign in (1, "+", "plus", "+1"):
        return 1
    if sign in (-1, "-", "minus", "-1"):
        return -1
    raise ValueError(f"sign must be + or -, got {sign!r}")


def worker_count() -> int:
    env = os.environ.get("ELASTORAY_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


@dataclass
class Bicharacteristic:
    """A traced ray; ``x``/``xi`` are ``(m, 3)``, the rest per sample."""

    mode: str
    sign: int
    s: np.ndarray
    t: np.ndarray
    x: np.ndarray
    tau: np.ndarray
    xi: np.ndarray
    exit: str
    h_ray: float

    @property
    def N(self) -> np.ndarray:
        """Unit tangent ``dx/ds``."""
        return self.sign * self.xi / np.linalg.norm(self.xi, axis=1, keepdims=True)

    @property
    def length(self) -> float:
        return float(self.s[-1] - self.s[0])

    def __len__(self) -> int:
        return self.s.size


@dataclass
class AmplitudeTrace:
    s: np.ndarray
    b0: np.ndarray
    divN: np.ndarray
    a_minus1: np.ndarray | None = None
    truncated: bool = False


@dataclass
class TravelTimeField:
    grid: Grid3
    T: np.ndarray
    status: np.ndarray  # 2 accepted, 0 far, -1 outside


# -- integration core --------------------------------------------------------

def _deriv(model: MediumModel, mode: str, sign: int, y: np.ndarray) -> np.ndarray:
    c, glc = model.speed(y[:, 1:4], mode)
    nxi = np.linalg.norm(y[:, 4:7], axis=1)
    dy = np.empty_like(y)
    dy[:, 0] = 1.0 / c
    dy[:, 1:4] = sign * y[:, 4:7] / nxi[:, None]
    dy[:, 4:7] = -sign * glc * nxi[:, None]
    return dy


def _rk4(model, mode, sign, y, h):
    h = np.broadcast_to(np.asarray(h, dtype=float), (y.shape[0],))[:, None]
    k1 = _deriv(model, mode, sign, y)
    k2 = _deriv(model, mode, sign, y + 0.5 * h * k1)
    k3 = _deriv(model, mode, sign, y + 0.5 * h * k2)
    k4 = _deriv(model, mode, sign, y + h * k3)
    return y + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


def _exit_bisect(model, mode, sign, region, y, h):
    """Fraction of a step at which each ray crosses the region boundary."""
    lo = np.zeros(y.shape[0])
    hi = np.ones(y.shape[0])
    for _ in range(_BISECT_ITERS):
        mid = 0.5 * (lo + hi)
        th, q = region.levels(_rk4(model, mode, sign, y, mid * h)[:, 1:4])
        ok = np.minimum(th, q) >= 0
        lo = np.where(ok, mid, lo)
        hi = np.where(ok, hi, mid)
    y_lo = _rk4(model, mode, sign, y, lo * h)
    y_hi = _rk4(model, mode, sign, y, hi * h)
    f_lo = np.minimum(*region.levels(y_lo[:, 1:4]))
    f_hi = np.minimum(*region.levels(y_hi[:, 1:4]))
    take_hi = np.abs(f_hi) < np.abs(f_lo)
    alpha = np.where(take_hi, hi, lo)
    y_end = np.where(take_hi[:, None], y_hi, y_lo)
    return alpha, y_end


def _trace_chunk(model, region, x0, xi0, sign, mode, h, max_length):
    n = x0.shape[0]
    nsteps = max(1, int(np.ceil(max_length / h - 1e-9)))
    c0, _ = model.speed(x0, mode)
    tau = sign * c0 * np.linalg.norm(xi0, axis=1)
    Y = np.full((nsteps + 1, n, 7), np.nan)
    S = np.full((nsteps + 1, n), np.nan)
    Y[0, :, 0] = 0.0
    Y[0, :, 1:4] = x0
    Y[0, :, 4:7] = xi0
    S[0] = 0.0
    count = np.ones(n, dtype=np.int64)
    exits = np.array([EXIT_TRAPPED if region is not None else EXIT_MAX] * n, dtype=object)
    active = np.ones(n, dtype=bool)
    pending = []
    for k in range(nsteps):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        y = Y[k, idx]
        ynew = _rk4(model, mode, sign, y, h)
        if not np.all(np.isfinite(ynew)):
            bad = idx[~np.all(np.isfinite(ynew), axis=1)]
            raise DomainError(f"non-finite ray state (admissibility violation) for rays {bad.tolist()}")
        if region is not None:
            th, q = region.levels(ynew[:, 1:4])
            out = (th < 0) | (q < 0)
        else:
            out = np.zeros(idx.size, bool)
        inn = ~out
        Y[k + 1, idx[inn]] = ynew[inn]
        S[k + 1, idx[inn]] = (k + 1) * h
        count[idx[inn]] = k + 2
        if out.any():
            io = idx[out]
            # the crossing is located after the loop, in one batch
            pending.append((k, io, y[out]))
            active[io] = False
    if pending:
        ks = np.concatenate([np.full(io.size, k) for k, io, _ in pending])
        io = np.concatenate([io for _, io, _ in pending])
        yprev = np.concatenate([yp for _, _, yp in pending])
        alpha, yend = _exit_bisect(model, mode, sign, region, yprev, h)
        Y[ks + 1, io] = yend
        S[ks + 1, io] = (ks + alpha) * h
        count[io] = ks + 2
        th, q = region.levels(yend[:, 1:4])
        exits[io] = np.where(th <= q, EXIT_S, EXIT_CAP)
    rays = []
    for r in range(n):
        m = count[r]
        yr = Y[:m, r]
        rays.append(Bicharacteristic(
            mode=mode, sign=sign, s=S[:m, r].copy(), t=yr[:, 0].copy(), x=yr[:, 1:4].copy(),
            tau=np.full(m, tau[r]), xi=yr[:, 4:7].copy(), exit=str(exits[r]), h_ray=h,
        ))
    return rays


def trace_rays(model: MediumModel, region: LensRegion | None, x0, xi0, sign="+", mode: str = "p",
               h_ray: float = 1e-3, max_length: float = 10.0, workers: int | None = None
               ) -> list[Bicharacteristic]:
    """Trace many rays; chunks of fixed size are mapped over a thread pool.

    Results do not depend on the number of workers: each chunk is integrated
    independently and chunks are concatenated in order.
    """
    sign = parse_sign(sign)
    mode = normalize_mode(mode)
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    xi0 = np.atleast_2d(np.asarray(xi0, dtype=float))
    if x0.shape != xi0.shape or x0.shape[1] != 3:
        raise ValueError("x0 and xi0 must both be (n, 3)")
    if np.any(np.linalg.norm(xi0, axis=1) == 0):
        raise ValueError("xi0 must be nonzero")
    if not h_ray > 0:
        raise ValueError("h_ray must be positive")
    if region is not None:
        bad = region.classify(x0) == 0
        if bad.any():
            raise ValueError(f"launch points outside the region: {np.flatnonzero(bad).tolist()}")
    c, _ = model.speed(x0, mode)
    if not np.all(np.isfinite(c) & (c > 0)):
        raise DomainError("medium is not admissible at a launch point")
    chunks = [(i, min(i + CHUNK, x0.shape[0])) for i in range(0, x0.shape[0], CHUNK)]
    job = lambda ab: _trace_chunk(model, region, x0[ab[0]:ab[1]], xi0[ab[0]:ab[1]], sign, mode, h_ray, max_length)
    workers = worker_count() if workers is None else workers
    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(job, chunks))
    else:
        parts = [job(ab) for ab in chunks]
    return [r for part in parts for r in part]


def integrate_bicharacteristic(model: MediumModel, region: LensRegion | None, x0, xi0, sign="+",
                               mode: str = "p", h_ray: float = 1e-3, max_length: float = 10.0
                               ) -> Bicharacteristic:
    """Trace one bicharacteristic from ``x0`` with initial covector ``xi0``.

    The ray runs until it leaves the region (the last sample is then placed
    on the crossed surface by bisection) or reaches ``max_length``; in that
    case ``exit`` is ``"trapped"`` (``"max-length"`` without a region).
    """
    return trace_rays(model, region, x0, xi0, sign, mode, h_ray, max_length, workers=1)[0]


def hamiltonian_drift(model: MediumModel, ray: Bicharacteristic) -> float:
    """Max relative defect of ``tau = sign * c |xi|`` over the samples."""
    c, _ = model.speed(ray.x, ray.mode)
    H = ray.tau - ray.sign * c * np.linalg.norm(ray.xi, axis=1)
    return float(np.max(np.abs(H) / np.abs(ray.tau)))


def geodesic_residual(model: MediumModel, ray: Bicharacteristic) -> float:
    """Max defect of the geodesic equation of ``g = c^-2 dx^2`` along the sampled path.

    In Euclidean arclength the geodesics satisfy
    ``x'' = -(grad log c - (x'. grad log c) x')``; both derivatives are
    central differences over the uniformly spaced samples.
    """
    ds = np.diff(ray.s)
    uniform = np.isclose(ds, ray.h_ray, rtol=1e-9, atol=0)
    m = ray.s.size if np.all(uniform) else int(np.argmin(uniform)) + 1
    if m < 5:
        raise ValueError(f"geodesic residual needs at least 5 uniform samples, got {m}")
    x = ray.x[:m]
    h = ray.h_ray
    xp = (x[2:] - x[:-2]) / (2 * h)
    xpp = (x[2:] - 2 * x[1:-1] + x[:-2]) / h**2
    N = xp / np.linalg.norm(xp, axis=1, keepdims=True)
    _, glc = model.speed(x[1:-1], ray.mode)
    perp = glc - np.sum(N * glc, axis=1, keepdims=True) * N
    return float(np.max(np.linalg.norm(xpp + perp, axis=1)))


# -- amplitudes --------------------------------------------------------------

def _transverse_basis(n: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n = n / np.linalg.norm(n)
    a = np.eye(3)[np.argmin(np.abs(n))]
    e1 = np.cross(n, a)
    e1 /= np.linalg.norm(e1)
    return e1, np.cross(n, e1)


def _trace_along(model, mode, sign, y0, s):
    """Integrate states ``y0`` (k, 7) over the arclength samples ``s``."""
    Y = np.empty((s.size,) + y0.shape)
    Y[0] = y0
    for j, hj in enumerate(np.diff(s)):
        Y[j + 1] = _rk4(model, mode, sign, Y[j], hj)
    return Y


def divergence_from_fan(ray: Bicharacteristic, model: MediumModel, Xn: np.ndarray, Nn: np.ndarray,
                        skip_first: bool = False) -> np.ndarray:
    """``div N`` from neighbour positions/directions ``(m, 4, 3)`` ordered (+e1, -e1, +e2, -e2).

    Solves ``J [D1 D2 N] = [dN1 dN2 dN/ds]`` for the direction-field Jacobian
    at every sample and returns its trace.
    """
    N = ray.N
    _, glc = model.speed(ray.x, ray.mode)
    K = -(glc - np.sum(glc * N, axis=1, keepdims=True) * N)
    A = np.stack([Xn[:, 0] - Xn[:, 1], Xn[:, 2] - Xn[:, 3], N], axis=-1)
    B = np.stack([Nn[:, 0] - Nn[:, 1], Nn[:, 2] - Nn[:, 3], K], axis=-1)
    out = np.full(ray.s.size, np.nan)
    start = 1 if skip_first else 0
    # tr(B A^-1) = tr(A^-1 B)
    sol = np.linalg.solve(A[start:], B[start:])
    out[start:] = np.trace(sol, axis1=1, axis2=2)
    return out


def amplitude_transport(model: MediumModel, ray: Bicharacteristic, fan_offsets: float = 1e-4,
                        b0_init: float = 1.0, fan: str = "parallel", ref_index: int = 0,
                        region: LensRegion | None = None) -> AmplitudeTrace:
    """Leading-order p-wave amplitude along ``ray``.

    ``div N`` comes from four neighbour rays, offset by ``fan_offsets`` in two
    transverse directions (``fan="parallel"``: shifted launch points, common
    covector, i.e. a plane-wave phase) or rotated by ``fan_offsets`` radians
    about the launch point (``fan="point"``). Then

        b0(s) = b0(s_ref) sqrt(rho c(s_ref) / rho c(s)) exp(-1/2 int_{s_ref}^s div N)

    with the integral by cumulative trapezoid. For a point fan ``div N`` is
    undefined at the source sample, so ``ref_index`` must be positive.
    """
    if ray.mode != "p":
        raise ValueError("amplitude transport is implemented for p-waves only")
    if fan not in ("parallel", "point"):
        raise ValueError("fan must be 'parallel' or 'point'")
    if fan == "point" and ref_index < 1:
        raise ValueError("a point-source fan needs ref_index >= 1")
    N0 = ray.N[0]
    e1, e2 = _transverse_basis(N0)
    nxi = np.linalg.norm(ray.xi[0])
    y0 = np.zeros((4, 7))
    for k, (e, sgn) in enumerate(((e1, 1), (e1, -1), (e2, 1), (e2, -1))):
        if fan == "parallel":
            y0[k, 1:4] = ray.x[0] + sgn * fan_offsets * e
            y0[k, 4:7] = ray.xi[0]
        else:
            d = N0 + sgn * fan_offsets * e
            y0[k, 1:4] = ray.x[0]
            y0[k, 4:7] = ray.sign * nxi * d / np.linalg.norm(d)
    Y = _trace_along(model, ray.mode, ray.sign, y0, ray.s)
    Xn = Y[..., 1:4]
    Nn = ray.sign * Y[..., 4:7] / np.linalg.norm(Y[..., 4:7], axis=-1, keepdims=True)

    m = ray.s.size
    truncated = False
    bad = ~np.all(np.isfinite(Y), axis=(1, 2))
    if region is not None:
        th, q = region.levels(Xn)
        slack = max(region.s_tolerance, 10 * fan_offsets)
        bad |= np.any(np.minimum(th, q) < -slack, axis=1)
    if bad.any():
        m = int(np.argmax(bad))
        truncated = True
    if m <= ref_index:
        raise ValueError("neighbour rays leave the region before the reference sample")

    sub = Bicharacteristic(ray.mode, ray.sign, ray.s[:m], ray.t[:m], ray.x[:m], ray.tau[:m],
                           ray.xi[:m], ray.exit, ray.h_ray)
    divN = divergence_from_fan(sub, model, Xn[:m], Nn[:m], skip_first=(fan == "point"))
    f = model.fields(sub.x)
    rc = f["rho"] * f["cp"]
    b0 = np.full(m, np.nan)
    lo = 1 if fan == "point" else 0
    integral = cumulative_trapezoid(divN[lo:], sub.s[lo:], initial=0.0)
    integral -= integral[ref_index - lo]
    b0[lo:] = b0_init * np.sqrt(rc[ref_index] / rc[lo:]) * np.exp(-0.5 * integral)
    return AmplitudeTrace(s=sub.s, b0=b0, divN=divN, truncated=truncated)


def integrating_factor(model: MediumModel, ray: Bicharacteristic, amp: AmplitudeTrace,
                       ref_index: int = 0) -> np.ndarray:
    """``g(s) = sqrt(rho c_p(s)) exp(1/2 int_{s_ref}^s div N)``, up to a constant factor."""
    m = amp.s.size
    f = model.fields(ray.x[:m])
    ok = np.isfinite(amp.divN)
    lo = int(np.argmax(ok))
    integral = np.full(m, np.nan)
    integral[lo:] = cumulative_trapezoid(amp.divN[lo:], amp.s[lo:], initial=0.0)
    integral -= integral[ref_index]
    return np.sqrt(f["rho"] * f["cp"]) * np.exp(0.5 * integral)


def amplitude_next_order(model: MediumModel, ray: Bicharacteristic, G_samples, a_init: float,
                         amp: AmplitudeTrace, ref_index: int = 0) -> np.ndarray:
    """Solve ``a' + 1/2 [(log rho c_p)' + div N] a = G`` along ``ray``.

    With the integrating factor ``g`` the solution is
    ``g a = g(s_ref) a_init + int_{s_ref}^s g G``; the source ``G`` is
    supplied per ray sample.
    """
    G = np.asarray(G_samples, dtype=float)
    if G.shape != ray.s.shape:
        raise ValueError(f"G_samples has {G.size} entries, ray has {ray.s.size} samples")
    m = amp.s.size
    g = integrating_factor(model, ray, amp, ref_index)
    G = G[:m]
    lo = int(np.argmax(np.isfinite(g)))
    acc = np.full(m, np.nan)
    acc[lo:] = cumulative_trapezoid(g[lo:] * G[lo:], amp.s[lo:], initial=0.0)
    acc -= acc[ref_index]
    a = (g[ref_index] * a_init + acc) / g
    amp.a_minus1 = a
    return a


# -- grid eikonal ------------------------------------------------------------

def _solve_update(a: list[float], hs: float) -> float:
    a = sorted(a)
    T = a[0] + hs
    if len(a) > 1 and T > a[1]:
        disc = 2 * hs * hs - (a[0] - a[1]) ** 2
        T = 0.5 * (a[0] + a[1] + np.sqrt(max(disc, 0.0)))
        if len(a) > 2 and T > a[2]:
            s1 = a[0] + a[1] + a[2]
            s2 = a[0] ** 2 + a[1] ** 2 + a[2] ** 2
            disc = s1 * s1 - 3 * (s2 - hs * hs)
            T = (s1 + np.sqrt(max(disc, 0.0))) / 3
    return T


def eikonal_grid(model: MediumModel, source, grid: Grid3, region: LensRegion | None = None,
                 mode: str = "p", init_radius: float | None = None) -> TravelTimeField:
    """First-arrival travel times ``|grad T| = 1/c`` by first-order fast marching.

    Args:
        source: a point ``(3,)`` or a plane ``{"point": p, "normal": n}``;
            for a plane the wave travels along ``n`` from ``p``.
        init_radius: nodes within this distance of a point source are
            initialised with the straight-ray time using the mean of the end
            slownesses. The default, a tenth of the grid diagonal (at least
            ``h``), is fixed in physical units so that refinement studies
            see the first-order rate of the marching scheme rather than the
            source singularity.
    """
    mode = normalize_mode(mode)
    pts = grid.points()
    c, _ = model.speed(pts, mode)
    slow = 1.0 / c
    h = grid.h
    T = np.full(grid.shape, np.inf)
    status = np.zeros(grid.shape, dtype=np.int8)
    if region is not None:
        status[~region.inside(pts)] = -1
    lo, hi = np.asarray(grid.origin), grid.upper()

    if isinstance(source, dict):
        p = np.asarray(source["point"], dtype=float)
        n = np.asarray(source["normal"], dtype=float)
        n = n / np.linalg.norm(n)
        dist = (pts - p) @ n
        status[dist < -1e-12] = -1
        seed = (dist >= -1e-12) & (dist < h) & (status >= 0)
        T[seed] = dist[seed] * slow[seed]
    else:
        x0 = np.asarray(source, dtype=float).reshape(3)
        if np.any(x0 < lo - 1e-12) or np.any(x0 > hi + 1e-12):
            raise ValueError(f"source {x0.tolist()} outside grid bounds")
        if init_radius is None:
            diag = float(np.linalg.norm(hi - lo))
            r0 = max(h, 0.1 * diag)
        else:
            r0 = init_radius
        c0, _ = model.speed(x0, mode)
        r = np.linalg.norm(pts - x0, axis=-1)
        seed = (r <= max(r0, 1e-12)) & (status >= 0)
        if not seed.any():
            idx = np.unravel_index(np.argmin(r), grid.shape)
            seed[idx] = True
        T[seed] = r[seed] * 0.5 * (1.0 / c0 + slow[seed])
    if not seed.any():
        raise ValueError("source does not touch any grid node inside the region")
    status[seed] = 2

    nx, ny, nz = grid.shape
    heap: list[tuple[float, int, int, int]] = []
    offsets = ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1))

    def update(i, j, k):
        a = []
        for ax in range(3):
            best = np.inf
            for sgn in (1, -1):
                q = [i, j, k]
                q[ax] += sgn
                if 0 <= q[ax] < grid.shape[ax] and status[q[0], q[1], q[2]] == 2:
                    best = min(best, T[q[0], q[1], q[2]])
            if best < np.inf:
                a.append(best)
        return _solve_update(a, h * slow[i, j, k])

    for i, j, k in zip(*np.nonzero(seed)):
        for di, dj, dk in offsets:
            a, b, cc = i + di, j + dj, k + dk
            if 0 <= a < nx and 0 <= b < ny and 0 <= cc < nz and status[a, b, cc] == 0:
                t = update(a, b, cc)
                if t < T[a, b, cc]:
                    T[a, b, cc] = t
                    heapq.heappush(heap, (t, a, b, cc))
    while heap:
        t, i, j, k = heapq.heappop(heap)
        if status[i, j, k] == 2 or t > T[i, j, k]:
            continue
        status[i, j, k] = 2
        for di, dj, dk in offsets:
            a, b, cc = i + di, j + dj, k + dk
            if 0 <= a < nx and 0 <= b < ny and 0 <= cc < nz and status[a, b, cc] == 0:
                tn = update(a, b, cc)
                if tn < T[a, b, cc]:
                    T[a, b, cc] = tn
                    heapq.heappush(heap, (tn, a, b, cc))
    T[status != 2] = np.nan
    return TravelTimeField(grid=grid, T=T, status=status)


def travel_time_at(field: TravelTimeField, pts: np.ndarray) -> np.ndarray:
    return interpolate(field.T, field.grid.origin, field.grid.h, pts)
