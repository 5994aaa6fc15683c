"""
Gridded tensor calculus: the model-difference tensor B, the symmetric
covariant derivative of 1-forms for the conformal metric ``g = c_p^-2 dx^2``,
the Saint-Venant operator and its (i, i, j, j) contraction.

Symmetric 2-tensors store six components per node in the order
``11, 22, 33, 12, 13, 23`` (see :data:`PAIRS`).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import sympy

from .expr import COORDS, compile_fields, gradient as sym_gradient, parse_expression
from .medium import DomainError, Grid3, MediumModel
from .stencils import d1, dd, erode, gradient, interior_mask, laplacian

PAIRS = ((0, 0), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2))
PAIR_INDEX = {}
for _k, (_i, _j) in enumerate(PAIRS):
    PAIR_INDEX[(_i, _j)] = PAIR_INDEX[(_j, _i)] = _k

# Saint-Venant storage: unordered pairs of index pairs, p <= q
SV_PAIRS = tuple((p, q) for p in range(6) for q in range(p, 6))
SV_INDEX = {}
for _k, (_p, _q) in enumerate(SV_PAIRS):
    SV_INDEX[(_p, _q)] = SV_INDEX[(_q, _p)] = _k

SPEED_MATCH_TOL = 1e-10


def to_matrix(comps: np.ndarray) -> np.ndarray:
    """``(..., 6)`` components to ``(..., 3, 3)`` symmetric matrices."""
    out = np.empty(comps.shape[:-1] + (3, 3))
    for k, (i, j) in enumerate(PAIRS):
        out[..., i, j] = out[..., j, i] = comps[..., k]
    return out


def from_matrix(mat: np.ndarray) -> np.ndarray:
    """Symmetric part of ``(..., 3, 3)`` matrices as ``(..., 6)`` components."""
    return np.stack([0.5 * (mat[..., i, j] + mat[..., j, i]) for i, j in PAIRS], axis=-1)


def pair_weights() -> np.ndarray:
    """Multiplicity of each stored component in a full Frobenius sum."""
    return np.array([1.0, 1.0, 1.0, 2.0, 2.0, 2.0])


@dataclass
class SymTensor2Field:
    grid: Grid3
    comps: np.ndarray
    mask: np.ndarray = None

    def __post_init__(self):
        self.comps = np.asarray(self.comps, dtype=float)
        if self.comps.shape != self.grid.shape + (6,):
            raise ValueError(f"expected components of shape {self.grid.shape + (6,)}, got {self.comps.shape}")
        if self.mask is None:
            self.mask = np.ones(self.grid.shape, bool)

    def component(self, i: int, j: int) -> np.ndarray:
        return self.comps[..., PAIR_INDEX[(i, j)]]

    def matrix(self) -> np.ndarray:
        return to_matrix(self.comps)

    def norm(self, weight: np.ndarray | None = None) -> float:
        """Discrete L2 norm over unmasked nodes with the Frobenius pointwise norm."""
        sq = np.sum(self.comps**2 * pair_weights(), axis=-1)
        if weight is not None:
            sq = sq * weight
        return float(np.sqrt(np.sum(sq[self.mask]) * self.grid.h**3))

    def __add__(self, other: "SymTensor2Field") -> "SymTensor2Field":
        return SymTensor2Field(self.grid, self.comps + other.comps, self.mask & other.mask)

    def __sub__(self, other: "SymTensor2Field") -> "SymTensor2Field":
        return SymTensor2Field(self.grid, self.comps - other.comps, self.mask & other.mask)

    def scaled(self, a: float) -> "SymTensor2Field":
        return SymTensor2Field(self.grid, a * self.comps, self.mask.copy())


@dataclass
class OneFormField:
    grid: Grid3
    comps: np.ndarray

    def __post_init__(self):
        self.comps = np.asarray(self.comps, dtype=float)
        if self.comps.shape != self.grid.shape + (3,):
            raise ValueError(f"expected components of shape {self.grid.shape + (3,)}, got {self.comps.shape}")


@dataclass
class SymTensor4Field:
    """Saint-Venant image; component ``k`` is ``W[PAIRS[p], PAIRS[q]]`` for ``SV_PAIRS[k] = (p, q)``."""

    grid: Grid3
    comps: np.ndarray
    mask: np.ndarray

    def get(self, a: int, b: int, c: int, d: int) -> np.ndarray:
        return self.comps[..., SV_INDEX[(PAIR_INDEX[(a, b)], PAIR_INDEX[(c, d)])]]

    def full(self) -> np.ndarray:
        """Expand to ``(..., 3, 3, 3, 3)``."""
        out = np.empty(self.comps.shape[:-1] + (3, 3, 3, 3))
        for a in range(3):
            for b in range(3):
                for c in range(3):
                    for d in range(3):
                        out[..., a, b, c, d] = self.get(a, b, c, d)
        return out

    def max_norm(self) -> float:
        return float(np.max(np.abs(self.comps[self.mask]))) if self.mask.any() else 0.0


@dataclass
class BCoefficients:
    kappa: np.ndarray
    omega: np.ndarray
    alpha: np.ndarray
    V: np.ndarray
    beta1: np.ndarray
    beta2: np.ndarray


# -- the difference tensor ---------------------------------------------------

def laplace_beltrami_conformal(f: sympy.Expr, c: sympy.Expr) -> sympy.Expr:
    """Laplace-Beltrami operator of ``g = c^-2 dx^2`` in three dimensions.

    From ``|g|^{-1/2} d_i (|g|^{1/2} g^ij d_j f)`` with ``|g|^{1/2} = c^-3``
    this is ``c^2 lap f - c grad c . grad f``.
    """
    gf, gc = sym_gradient(f), sym_gradient(c)
    lap = sum(sympy.diff(f, v, 2) for v in COORDS)
    return c**2 * lap - c * sum(a * b for a, b in zip(gc, gf))


def omega_coefficient(cp2, cs2, cp, form: str = "consistent"):
    """The coefficient of the quadratic gradient term of ``alpha``.

    ``form="consistent"`` uses ``(cp^2-4cs^2)/cp + 4cs^4/(cp(cp^2-cs^2))``,
    which equals ``(cp^4 - 5cp^2cs^2 + 8cs^4)/(cp(cp^2-cs^2))`` as the
    contraction identity requires. ``form="displayed"`` uses ``4cs^2`` in
    place of ``4cs^4`` in the second term.
    """
    if form == "consistent":
        return (cp2 - 4 * cs2) / cp + 4 * cs2**2 / (cp * (cp2 - cs2))
    if form == "displayed":
        return (cp2 - 4 * cs2) / cp + (4 * cs2 / cp) / (cp2 - cs2)
    raise ValueError("omega form must be 'consistent' or 'displayed'")


def _difference_symbols(model1: MediumModel, model2: MediumModel, omega_form: str):
    s1, s2 = model1.symbols, model2.symbols
    cp, cp2, cs2 = s1["cp"], s1["cp2"], s1["cs2"]
    b1 = sympy.log(s1["rho"]) / 2
    b2 = sympy.log(s2["rho"]) / 2
    g1, g2 = sym_gradient(b1), sym_gradient(b2)
    w = b1 - b2
    gw = sym_gradient(w)
    kappa = 4 * cs2 * (cp2 - 2 * cs2) / (cp * (cp2 - cs2))
    omega = omega_coefficient(cp2, cs2, cp, omega_form)
    gcp = sym_gradient(cp)
    gcs2 = sym_gradient(cs2)
    V = [2 * a - 8 * cs2 / (cp * (cp2 - cs2)) * b for a, b in zip(gcp, gcs2)]
    log_ratio = 2 * w
    grad_sq = sum(4 * a * a for a in g1) - sum(4 * a * a for a in g2)
    alpha = (cp2 - 4 * cs2) / (2 * cp) * laplace_beltrami_conformal(log_ratio, cp) - omega / 4 * grad_sq
    U = [a + 2 * b for a, b in zip(V, gcp)]
    gwV = sum(a * b for a, b in zip(gw, V))
    comps = []
    for i, j in PAIRS:
        e = kappa * (g1[i] * g1[j] - g2[i] * g2[j])
        if i == j:
            e -= alpha - gwV
        e += (gw[i] * U[j] + gw[j] * U[i]) / 2
        e += 2 * (cp2 - cs2) * sympy.diff(w, COORDS[i], COORDS[j])
        comps.append(e)
    return comps, [kappa, omega, alpha] + V + [b1, b2]


def check_speeds_match(model1: MediumModel, model2: MediumModel, pts: np.ndarray,
                       tol: float = SPEED_MATCH_TOL) -> None:
    """Raise unless both models share ``c_p`` and ``c_s`` at ``pts``.

    Raises:
        ValueError: on a mismatch larger than ``tol`` relative to the speed.
    """
    f1, f2 = model1.fields(pts), model2.fields(pts)
    for key in ("cp", "cs"):
        diff = np.abs(f1[key] - f2[key]) / np.maximum(1.0, np.abs(f1[key]))
        if np.nanmax(diff) > tol or not np.all(np.isfinite(diff)):
            raise ValueError(f"speed mismatch between models: max |{key}1 - {key}2| = {np.nanmax(diff):.3e}")


def _check_admissible(model: MediumModel, pts: np.ndarray, label: str) -> None:
    f = model.fields(pts)
    if not (np.all(f["rho"] > 0) and np.all(f["mu"] > 0) and np.all(f["lambda"] + f["mu"] > 0)):
        raise DomainError(f"{label} is not admissible on the grid")


def difference_tensor_function(model1: MediumModel, model2: MediumModel,
                               omega_form: str = "consistent") -> Callable[[np.ndarray], np.ndarray]:
    """Pointwise closed form of B as a callable ``pts (..., 3) -> (..., 6)``."""
    comps, _ = _difference_symbols(model1, model2, omega_form)
    fn = compile_fields(comps)

    def evaluate(pts):
        pts = np.asarray(pts, dtype=float)
        return np.stack(fn(pts[..., 0], pts[..., 1], pts[..., 2]), axis=-1)

    return evaluate


def build_difference_tensor(model1: MediumModel, model2: MediumModel, grid: Grid3,
                            omega_form: str = "consistent", check: bool = True
                            ) -> tuple[SymTensor2Field, BCoefficients]:
    """Assemble B and its coefficients on the grid from exact symbolic derivatives.

    Every term of B is odd under exchanging the two densities, so equal
    densities give B = 0 and swapping the models negates B.

    Raises:
        ValueError: if the two models have different speeds on the grid.
        DomainError: if either model is not admissible on the grid.
    """
    pts = grid.points()
    if check:
        _check_admissible(model1, pts, "model1")
        _check_admissible(model2, pts, "model2")
        check_speeds_match(model1, model2, pts)
    comps, coef = _difference_symbols(model1, model2, omega_form)
    vals = compile_fields(comps + coef)(pts[..., 0], pts[..., 1], pts[..., 2])
    B = np.stack(vals[:6], axis=-1)
    kappa, omega, alpha = vals[6:9]
    V = np.stack(vals[9:12], axis=-1)
    coeffs = BCoefficients(kappa, omega, alpha, V, vals[12], vals[13])
    mask = np.all(np.isfinite(B), axis=-1)
    return SymTensor2Field(grid, np.where(mask[..., None], B, 0.0), mask), coeffs


# -- covariant derivative ----------------------------------------------------

def _dg_from_parts(dv: np.ndarray, v: np.ndarray, gpsi: np.ndarray) -> np.ndarray:
    """``(d_g v)_ij = sym(dv)_ij - (v_i psi_j + v_j psi_i - delta_ij v.grad psi)``.

    ``dv[..., i, j]`` is ``d_i v_j``.
    """
    vpsi = np.sum(v * gpsi, axis=-1)
    out = []
    for i, j in PAIRS:
        e = 0.5 * (dv[..., i, j] + dv[..., j, i]) - (v[..., i] * gpsi[..., j] + v[..., j] * gpsi[..., i])
        if i == j:
            e = e + vpsi
        out.append(e)
    return np.stack(out, axis=-1)


def sym_derivative_g(model: MediumModel, v: OneFormField, ring: int = 1) -> SymTensor2Field:
    """Symmetrized covariant derivative of ``v`` for ``g = c_p^-2 dx^2`` on the grid.

    The conformal Christoffel symbols
    ``Gamma^k_ij = delta_ki d_j psi + delta_kj d_i psi - delta_ij d_k psi``
    with ``psi = -log c_p`` come from exact medium gradients; ``d_i v_j``
    uses the fourth-order stencils. ``ring`` boundary layers are masked.
    """
    grid = v.grid
    if min(grid.shape) < 5:
        raise ValueError(f"grid too small: need at least 5 nodes per axis, got {grid.shape}")
    h = grid.h
    dv = np.empty(grid.shape + (3, 3))
    for i in range(3):
        for j in range(3):
            dv[..., i, j] = d1(v.comps[..., j], i, h)
    gpsi = -model.fields(grid.points())["grad_log_cp"]
    return SymTensor2Field(grid, _dg_from_parts(dv, v.comps, gpsi), interior_mask(grid.shape, ring))


def apply_dg(v: np.ndarray, gpsi: np.ndarray, h: float) -> np.ndarray:
    """Array form of :func:`sym_derivative_g`: ``v (..., 3) -> (..., 6)``."""
    dv = np.empty(v.shape[:-1] + (3, 3))
    for i in range(3):
        for j in range(3):
            dv[..., i, j] = d1(v[..., j], i, h)
    return _dg_from_parts(dv, v, gpsi)


def apply_dg_adjoint(f: np.ndarray, gpsi: np.ndarray, h: float) -> np.ndarray:
    """Exact transpose of :func:`apply_dg` for the plain Euclidean dot product of components."""
    from .stencils import d1T

    out = np.zeros(f.shape[:-1] + (3,))
    for k, (i, j) in enumerate(PAIRS):
        fk = f[..., k]
        if i == j:
            out[..., j] += d1T(fk, i, h)
            out[..., i] -= 2 * fk * gpsi[..., i]
            out += fk[..., None] * gpsi
        else:
            out[..., j] += 0.5 * d1T(fk, i, h)
            out[..., i] += 0.5 * d1T(fk, j, h)
            out[..., i] -= fk * gpsi[..., j]
            out[..., j] -= fk * gpsi[..., i]
    return out


def sym_derivative_g_function(model: MediumModel, v_exprs: Sequence) -> Callable[[np.ndarray], np.ndarray]:
    """Exact ``d_g v`` for a closed-form 1-form as a callable ``pts -> (..., 6)``."""
    v = [parse_expression(e) if isinstance(e, str) else sympy.sympify(e) for e in v_exprs]
    psi = -sympy.log(model.symbols["cp"])
    gpsi = sym_gradient(psi)
    vpsi = sum(a * b for a, b in zip(v, gpsi))
    comps = []
    for i, j in PAIRS:
        e = (sympy.diff(v[j], COORDS[i]) + sympy.diff(v[i], COORDS[j])) / 2
        e -= v[i] * gpsi[j] + v[j] * gpsi[i]
        if i == j:
            e += vpsi
        comps.append(e)
    fn = compile_fields(comps)

    def evaluate(pts):
        pts = np.asarray(pts, dtype=float)
        return np.stack(fn(pts[..., 0], pts[..., 1], pts[..., 2]), axis=-1)

    return evaluate


# -- Saint-Venant ------------------------------------------------------------

def saint_venant(B: SymTensor2Field, ring: int = 2) -> SymTensor4Field:
    """Saint-Venant operator with fourth-order second differences.

    ``W_abcd = d_c d_d B_ab + d_a d_b B_cd
    - 1/2 (d_b d_d B_ac + d_a d_d B_bc + d_b d_c B_ad + d_a d_c B_bd)``,
    which is the definition with both symmetrizations expanded. The output
    mask removes ``ring`` layers beyond the input mask.
    """
    grid = B.grid
    if min(grid.shape) < 6:
        raise ValueError(f"grid too small: need at least 6 nodes per axis, got {grid.shape}")
    h = grid.h
    # D[(m, n)][k] = d_m d_n B_k, cached by unordered derivative pair
    D = {}
    for m, n in PAIRS:
        D[(m, n)] = D[(n, m)] = np.stack([dd(B.comps[..., k], m, n, h) for k in range(6)], axis=-1)

    def d2B(m, n, i, j):
        return D[(m, n)][..., PAIR_INDEX[(i, j)]]

    out = np.empty(grid.shape + (len(SV_PAIRS),))
    for k, (p, q) in enumerate(SV_PAIRS):
        a, b = PAIRS[p]
        c, d = PAIRS[q]
        out[..., k] = (
            d2B(c, d, a, b) + d2B(a, b, c, d)
            - 0.5 * (d2B(b, d, a, c) + d2B(a, d, b, c) + d2B(b, c, a, d) + d2B(a, c, b, d))
        )
    mask = erode(B.mask, ring) & interior_mask(grid.shape, ring)
    return SymTensor4Field(grid, out, mask)


def t4_contraction(W: SymTensor4Field) -> np.ndarray:
    """``sum_ij W_iijj`` at every node."""
    total = np.zeros(W.grid.shape)
    for i in range(3):
        for j in range(3):
            total += W.get(i, i, j, j)
    return total


def fourth_order_part(coeffs: BCoefficients, grid: Grid3, mask: np.ndarray | None = None) -> SymTensor2Field:
    """The term ``-alpha I`` of B.

    W annihilates the Hessian term and the kappa terms carry at most
    second derivatives of the densities, so the fourth-order derivatives of
    the contraction of ``W B`` all come from this field.
    """
    comps = np.zeros(grid.shape + (6,))
    for k in range(3):
        comps[..., k] = -coeffs.alpha
    return SymTensor2Field(grid, comps, mask)


def t4_functional(model: MediumModel, rho1: np.ndarray, rho2: np.ndarray, grid: Grid3,
                  ring: int = 4) -> tuple[np.ndarray, np.ndarray]:
    """Two-term density formula for the contracted fourth-order part.

    Evaluates ``-2 (cp^2-4cs^2)/cp lap^2(log rho1 - log rho2)
    + (cp^4-5cp^2cs^2+8cs^4)/(cp(cp^2-cs^2)) lap[grad(log rho1 + log rho2) . grad(log rho1 - log rho2)]``
    with composed fourth-order stencils.

    Returns:
        ``(value, mask)`` where ``mask`` drops ``ring`` boundary layers.

    Raises:
        DomainError: on a non-positive density.
        ValueError: if the grid cannot hold the interior margin.
    """
    rho1 = np.asarray(rho1, dtype=float)
    rho2 = np.asarray(rho2, dtype=float)
    if np.any(rho1 <= 0) or np.any(rho2 <= 0):
        raise DomainError("densities must be positive")
    if min(grid.shape) <= 2 * ring:
        raise ValueError(f"grid {grid.shape} leaves no nodes inside a {ring}-node margin")
    h = grid.h
    f = model.fields(grid.points())
    cp, cs = f["cp"], f["cs"]
    cp2, cs2 = cp**2, cs**2
    bm = np.log(rho1) - np.log(rho2)
    bp = np.log(rho1) + np.log(rho2)
    K = (cp2**2 - 5 * cp2 * cs2 + 8 * cs2**2) / (cp * (cp2 - cs2))
    bih = laplacian(laplacian(bm, h), h)
    cross = np.sum(gradient(bp, h) * gradient(bm, h), axis=-1)
    value = -2 * (cp2 - 4 * cs2) / cp * bih + K * laplacian(cross, h)
    return value, interior_mask(grid.shape, ring)
