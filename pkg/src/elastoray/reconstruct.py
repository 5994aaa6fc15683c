"""
The fourth-order density operator ``L u = gamma lap^2 u - lap(grad beta_plus . grad u)``
and the uniqueness certificate built on it.

Unknowns live on the masked interior; every node outside the mask is
clamped to zero, so with a two-layer ring both the value and the normal
derivative vanish at the boundary of the unknown set.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .medium import Grid3, LensRegion, MediumModel, admissibility_report
from .stencils import diff_matrix, erode, laplacian
from .tensorfield import saint_venant, t4_contraction
from .xray import RayFan, cgls, invert_transform, solenoidal_project


class EmptyMaskError(ValueError):
    """No node survives masking."""


def gamma_coefficient(cp: np.ndarray, cs: np.ndarray) -> np.ndarray:
    """``(cp^2-cs^2)(cp^2-4cs^2) / (cp^4 - 5cp^2cs^2 + 8cs^4)``."""
    cp2, cs2 = cp**2, cs**2
    return (cp2 - cs2) * (cp2 - 4 * cs2) / (cp2**2 - 5 * cp2 * cs2 + 8 * cs2**2)


def contraction_coefficient(cp: np.ndarray, cs: np.ndarray) -> np.ndarray:
    """``(cp^4 - 5cp^2cs^2 + 8cs^4) / (cp (cp^2 - cs^2))``, positive when ``cp > cs``."""
    cp2, cs2 = cp**2, cs**2
    return (cp2**2 - 5 * cp2 * cs2 + 8 * cs2**2) / (cp * (cp2 - cs2))


def _axis_op(D: sp.spmatrix, axis: int, shape) -> sp.csr_matrix:
    eyes = [sp.identity(n, format="csr") for n in shape]
    eyes[axis] = D
    return sp.kron(sp.kron(eyes[0], eyes[1]), eyes[2], format="csr")


def grid_operators(grid: Grid3) -> tuple[sp.csr_matrix, list[sp.csr_matrix]]:
    """Sparse Laplacian and gradient components on the flattened grid."""
    h = grid.h
    lap = sum(_axis_op(diff_matrix(grid.shape[k], h, 2), k, grid.shape) for k in range(3))
    grad = [_axis_op(diff_matrix(grid.shape[k], h, 1), k, grid.shape) for k in range(3)]
    return lap.tocsr(), grad


@dataclass
class T4Operator:
    grid: Grid3
    gamma_c: np.ndarray
    beta_plus: np.ndarray
    mask: np.ndarray

    @cached_property
    def matrix(self) -> sp.csr_matrix:
        """Full-grid sparse matrix of ``L`` (no clamping)."""
        lap, grad = grid_operators(self.grid)
        gb = [G @ self.beta_plus.ravel() for G in grad]
        transport = sum(sp.diags(g) @ G for g, G in zip(gb, grad))
        return (sp.diags(self.gamma_c.ravel()) @ (lap @ lap) - lap @ transport).tocsr()

    @cached_property
    def index(self) -> np.ndarray:
        return np.flatnonzero(self.mask.ravel())

    @cached_property
    def restricted(self) -> sp.csr_matrix:
        """Rows and columns on the mask: the clamped operator."""
        M = self.matrix[self.index]
        return M[:, self.index].tocsr()

    def apply(self, u: np.ndarray) -> np.ndarray:
        """``L u`` for a full-grid field, no clamping."""
        return (self.matrix @ np.asarray(u, float).ravel()).reshape(self.grid.shape)

    def apply_clamped(self, u: np.ndarray) -> np.ndarray:
        """``L`` applied to ``u`` zeroed outside the mask, evaluated on the mask (zero elsewhere)."""
        out = np.zeros(self.grid.size)
        out[self.index] = self.restricted @ np.asarray(u, float).ravel()[self.index]
        return out.reshape(self.grid.shape)


def assemble_t4_operator(model: MediumModel, beta_plus: np.ndarray, grid: Grid3,
                         mask: np.ndarray) -> T4Operator:
    """Coefficient fields of ``L`` from the model speeds.

    Raises:
        EmptyMaskError: if ``mask`` is empty.
    """
    mask = np.asarray(mask, bool)
    if mask.shape != grid.shape:
        raise ValueError(f"mask shape {mask.shape} does not match grid {grid.shape}")
    if not mask.any():
        raise EmptyMaskError("operator mask is empty")
    f = model.fields(grid.points())
    gam = gamma_coefficient(f["cp"], f["cs"])
    gam = np.where(mask, gam, 0.0)
    return T4Operator(grid, gam, np.asarray(beta_plus, float).reshape(grid.shape), mask)


def operator_mask(model: MediumModel, region: LensRegion | None, grid: Grid3,
                  eps_deg: float | None = None, ring: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """Unknown mask (region minus degenerate band, eroded by ``ring``) and the degenerate mask."""
    rep = admissibility_report(model, region, grid, eps_deg)
    base = rep.in_region & ~rep.degenerate
    return erode(base, ring), rep.degenerate & rep.in_region


@dataclass
class SolveResult:
    u: np.ndarray
    residuals: list[float]
    iterations: int
    converged: bool
    relative_residual: float


def solve_beta_minus(op: T4Operator, rhs: np.ndarray, tol: float = 1e-8, maxiter: int = 20000) -> SolveResult:
    """Least-squares ``min |L u - rhs|`` over clamped ``u`` by CGLS.

    Non-convergence is reported in the result, not raised.
    """
    rhs = np.asarray(rhs, float).reshape(op.grid.shape)
    b = rhs.ravel()[op.index]
    res = cgls(op.restricted, b, tol=tol, maxiter=maxiter)
    u = np.zeros(op.grid.size)
    u[op.index] = res.x
    nb = np.linalg.norm(b)
    rr = np.linalg.norm(op.restricted @ res.x - b) / nb if nb > 0 else 0.0
    return SolveResult(u.reshape(op.grid.shape), res.residuals, res.iterations, res.converged, float(rr))


# -- certificate -------------------------------------------------------------

@dataclass
class Certificate:
    beta_minus: np.ndarray
    l2_norm: float
    linf_norm: float
    pde_residual: float
    degenerate_fraction: float
    verdict: str
    eta_zero: float
    converged: bool
    iterations: int
    quadratic_remainder: float
    masked_nodes: int
    stages: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "l2_norm": self.l2_norm,
            "linf_norm": self.linf_norm,
            "pde_residual": self.pde_residual,
            "degenerate_fraction": self.degenerate_fraction,
            "verdict": self.verdict,
            "eta_zero": self.eta_zero,
            "converged": self.converged,
            "iterations": self.iterations,
            "quadratic_remainder": self.quadratic_remainder,
            "masked_nodes": self.masked_nodes,
            "stages": self.stages,
        }


class PipelineError(RuntimeError):
    """An upstream stage failed; the message carries the stage label."""


def masked_l2(u: np.ndarray, mask: np.ndarray, h: float) -> float:
    return float(np.sqrt(np.sum(u[mask] ** 2) * h**3))


def certify_uniqueness(model: MediumModel, rho2: np.ndarray, fan: RayFan, samples, grid: Grid3,
                       region: LensRegion | None = None, reg: float = 1e-4, eta_zero: float = 1e-6,
                       eps_deg: float | None = None, projector=None, tol: float = 1e-8) -> Certificate:
    """Run inversion, gauge removal, contraction and the clamped fourth-order solve.

    The unknown is ``u = beta_1 - beta_2 = 1/2 log(rho_1 / rho_2)``. The
    source is ``-C / (4 K c_p^2)`` where ``C`` is the (i, i, j, j)
    contraction of the Saint-Venant image of the gauge-fixed estimate and
    ``K`` the contraction coefficient; this matches ``gamma lap^2 u`` at
    leading order. ``beta_plus`` is linearized at ``2 log rho_2``.

    Verdict is ``"pass"`` when ``|u|_L2 <= eta_zero`` and the solve
    converged.
    """
    rho2 = np.asarray(rho2, float).reshape(grid.shape)
    stages = {}

    def stage(name, fn):
        try:
            return fn()
        except Exception as exc:  # relabel and propagate
            raise PipelineError(f"[{name}] {exc}") from exc

    if np.any(rho2 <= 0):
        raise PipelineError("[input] rho2 must be positive")
    est, diag = stage("invert", lambda: invert_transform(fan, samples, grid, reg=reg, projector=projector))
    stages["invert"] = {"iterations": diag["iterations"], "converged": diag["converged"]}
    fs, _, info = stage("project", lambda: solenoidal_project(model, est, grid, region))
    stages["project"] = {"iterations": info["iterations"], "converged": info["converged"]}
    W = stage("saint-venant", lambda: saint_venant(fs))
    C = t4_contraction(W)
    f = model.fields(grid.points())
    K = contraction_coefficient(f["cp"], f["cs"])
    rhs = -C / (4 * K * f["cp"] ** 2)
    mask, degenerate = operator_mask(model, region, grid, eps_deg)
    mask &= W.mask
    beta_plus = 2 * np.log(rho2)
    op = stage("assemble", lambda: assemble_t4_operator(model, beta_plus, grid, mask))
    sol = stage("solve", lambda: solve_beta_minus(op, np.where(mask, rhs, 0.0), tol=tol))
    stages["solve"] = {"iterations": sol.iterations, "converged": sol.converged}
    u = sol.u
    h = grid.h
    l2 = masked_l2(u, mask, h)
    linf = float(np.max(np.abs(u[mask])))
    # term dropped by the linearization: lap(grad beta_minus . grad u) with beta_minus = 2u
    from .stencils import gradient as grad_fd
    remainder = laplacian(np.sum(grad_fd(2 * u, h) * grad_fd(u, h), axis=-1), h)
    quad = masked_l2(remainder, mask, h)
    in_region = region.inside(grid.points()) if region is not None else np.ones(grid.shape, bool)
    deg_frac = float(degenerate.sum() / max(in_region.sum(), 1))
    verdict = "pass" if (l2 <= eta_zero and sol.converged) else "fail"
    return Certificate(u, l2, linf, sol.relative_residual, deg_frac, verdict, eta_zero,
                       sol.converged, sol.iterations, quad, int(mask.sum()), stages)
