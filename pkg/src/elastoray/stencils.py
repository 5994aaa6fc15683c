"""
Fourth-order finite-difference operators on :class:`~elastoray.medium.Grid3`.

First derivatives use the 5-point central stencil in the interior and
5-point biased stencils on the two outermost nodes; second derivatives use
the 5-point central stencil and 6-point biased stencils. Every stencil is
exact for polynomials of degree four along its axis. Operators are kept as
1-D sparse matrices and applied axis by axis, so transposes are exact.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np
import scipy.sparse as sp
from scipy import ndimage


def fd_weights(offsets, deriv: int) -> np.ndarray:
    """Weights ``w`` with ``sum w_k f(x + o_k h) = h^deriv f^(deriv)(x) + O(h^p)``."""
    offsets = np.asarray(offsets, dtype=float)
    n = offsets.size
    A = np.vander(offsets, n, increasing=True).T
    b = np.zeros(n)
    b[deriv] = float(np.prod(np.arange(1, deriv + 1)))
    return np.linalg.solve(A, b)


@lru_cache(maxsize=64)
def diff_matrix(n: int, h: float, deriv: int) -> sp.csr_matrix:
    """Sparse ``(n, n)`` matrix of the 4th-order derivative of order ``deriv``."""
    if deriv not in (1, 2):
        raise ValueError("deriv must be 1 or 2")
    width = 5 if deriv == 1 else 6
    if n < width:
        raise ValueError(f"grid too small: need at least {width} nodes per axis, got {n}")
    rows, cols, vals = [], [], []
    central = fd_weights(np.arange(-2, 3), deriv)
    for i in range(n):
        if 2 <= i <= n - 3:
            offs = np.arange(-2, 3)
            w = central
        else:
            start = 0 if i < 2 else n - width
            offs = np.arange(start, start + width) - i
            w = fd_weights(offs, deriv)
        rows.extend([i] * len(offs))
        cols.extend(i + offs)
        vals.extend(w / h**deriv)
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


def apply_along(D: sp.spmatrix, f: np.ndarray, axis: int) -> np.ndarray:
    """Apply a 1-D operator along ``axis`` of ``f`` (extra trailing axes allowed)."""
    g = np.moveaxis(f, axis, 0)
    shape = g.shape
    out = D @ g.reshape(shape[0], -1)
    return np.moveaxis(np.asarray(out).reshape(shape), 0, axis)


def d1(f: np.ndarray, axis: int, h: float) -> np.ndarray:
    return apply_along(diff_matrix(f.shape[axis], h, 1), f, axis)


def d2(f: np.ndarray, axis: int, h: float) -> np.ndarray:
    return apply_along(diff_matrix(f.shape[axis], h, 2), f, axis)


def d1T(f: np.ndarray, axis: int, h: float) -> np.ndarray:
    return apply_along(diff_matrix(f.shape[axis], h, 1).T.tocsr(), f, axis)


def d2T(f: np.ndarray, axis: int, h: float) -> np.ndarray:
    return apply_along(diff_matrix(f.shape[axis], h, 2).T.tocsr(), f, axis)


def dd(f: np.ndarray, a: int, b: int, h: float) -> np.ndarray:
    """Second derivative along axes ``a`` and ``b`` (pure or mixed)."""
    if a == b:
        return d2(f, a, h)
    return d1(d1(f, a, h), b, h)


def gradient(f: np.ndarray, h: float) -> np.ndarray:
    return np.stack([d1(f, k, h) for k in range(3)], axis=-1)


def laplacian(f: np.ndarray, h: float) -> np.ndarray:
    return d2(f, 0, h) + d2(f, 1, h) + d2(f, 2, h)


def laplacian_T(f: np.ndarray, h: float) -> np.ndarray:
    return d2T(f, 0, h) + d2T(f, 1, h) + d2T(f, 2, h)


def erode(mask: np.ndarray, ring: int) -> np.ndarray:
    """Remove ``ring`` layers of nodes from ``mask`` (grid faces count as outside)."""
    if ring <= 0:
        return mask.copy()
    return ndimage.binary_erosion(mask, structure=np.ones((3, 3, 3), bool),
                                  iterations=ring, border_value=0)


def interior_mask(shape, ring: int) -> np.ndarray:
    m = np.zeros(shape, bool)
    if all(n > 2 * ring for n in shape):
        m[ring:shape[0] - ring, ring:shape[1] - ring, ring:shape[2] - ring] = True
    return m


def trilinear(origin, h: float, dims, pts: np.ndarray):
    """Trilinear interpolation stencils at points ``(n, 3)``.

    Returns:
        ``(corners, weights, inside)`` where ``corners`` is ``(n, 8, 3)``
        integer node indices, ``weights`` is ``(n, 8)`` and ``inside`` flags
        points whose cell lies within the grid.
    """
    pts = np.asarray(pts, dtype=float).reshape(-1, 3)
    dims = np.asarray(dims)
    u = (pts - np.asarray(origin)) / h
    base = np.floor(u).astype(np.int64)
    inside = np.all((u >= -1e-12) & (u <= dims - 1 + 1e-12), axis=1)
    base = np.clip(base, 0, dims - 2)
    frac = u - base
    corners = np.empty((pts.shape[0], 8, 3), dtype=np.int64)
    weights = np.empty((pts.shape[0], 8))
    k = 0
    for i in (0, 1):
        for j in (0, 1):
            for l in (0, 1):
                corners[:, k] = base + (i, j, l)
                weights[:, k] = (
                    (frac[:, 0] if i else 1 - frac[:, 0])
                    * (frac[:, 1] if j else 1 - frac[:, 1])
                    * (frac[:, 2] if l else 1 - frac[:, 2])
                )
                k += 1
    return corners, weights, inside


def interpolate(field: np.ndarray, origin, h: float, pts: np.ndarray) -> np.ndarray:
    """Trilinear interpolation of a node field ``(nx, ny, nz, ...)`` at points."""
    corners, w, inside = trilinear(origin, h, field.shape[:3], pts)
    vals = field[corners[..., 0], corners[..., 1], corners[..., 2]]
    out = np.einsum("nk,nk...->n...", w, vals)
    out[~inside] = np.nan
    return out
