"""
Isotropic elastic media, the lens-shaped boundary region and the grid.

Speeds follow the principal symbol of the elasticity operator,
``c_p^2 = (lambda + 2 mu) / rho`` and ``c_s^2 = mu / rho``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any

import numpy as np
import sympy

from .expr import ExpressionError, compile_fields, gradient, hessian, parse_expression

EXTERIOR = "exterior"
INTERIOR = "interior"
BOUNDARY_S = "boundary-S"
BOUNDARY_CAP = "boundary-cap"
_CODES = (EXTERIOR, INTERIOR, BOUNDARY_S, BOUNDARY_CAP)


class ConfigError(ValueError):
    """Malformed configuration document."""


class DomainError(ValueError):
    """Medium evaluated where it is not physical (non-positive rho, mu, ...)."""


@dataclass(frozen=True)
class Grid3:
    """Isotropic cartesian grid; arrays are indexed ``[ix, iy, iz]``."""

    origin: tuple[float, float, float]
    spacing: float
    dims: tuple[int, int, int]

    def __post_init__(self):
        object.__setattr__(self, "origin", tuple(float(v) for v in self.origin))
        object.__setattr__(self, "dims", tuple(int(v) for v in self.dims))
        if len(self.origin) != 3 or len(self.dims) != 3:
            raise ValueError("origin and dims must have three entries")
        if not self.spacing > 0:
            raise ValueError("grid spacing must be positive")
        if min(self.dims) < 1:
            raise ValueError(f"grid dims must be positive, got {self.dims}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.dims

    @property
    def h(self) -> float:
        return float(self.spacing)

    @property
    def size(self) -> int:
        return int(np.prod(self.dims))

    def axis(self, k: int) -> np.ndarray:
        return self.origin[k] + self.spacing * np.arange(self.dims[k])

    def coords(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return tuple(np.meshgrid(self.axis(0), self.axis(1), self.axis(2), indexing="ij"))

    def points(self) -> np.ndarray:
        """Node coordinates as an ``(nx, ny, nz, 3)`` array."""
        return np.stack(self.coords(), axis=-1)

    def upper(self) -> np.ndarray:
        return np.asarray(self.origin) + self.spacing * (np.asarray(self.dims) - 1)

    def refined(self, factor: int = 2) -> "Grid3":
        """Same extent, spacing divided by ``factor``."""
        dims = tuple((n - 1) * factor + 1 for n in self.dims)
        return Grid3(self.origin, self.spacing / factor, dims)

    def to_dict(self) -> dict:
        return {"origin": list(self.origin), "spacing": self.spacing, "dims": list(self.dims)}


@dataclass(frozen=True)
class MediumPoint:
    lam: float
    mu: float
    rho: float
    cp: float
    cs: float
    grad_log_cp: np.ndarray
    grad_log_cs: np.ndarray
    grad_log_rho: np.ndarray
    grad_cp: np.ndarray
    grad_cs2: np.ndarray


@dataclass(frozen=True)
class MediumModel:
    """Closed-form Lamé parameters and density."""

    lambda_expr: str
    mu_expr: str
    rho_expr: str
    name: str = "medium"

    def __post_init__(self):
        # parse eagerly so that bad expressions fail at construction
        _ = self.symbols

    @classmethod
    def from_speeds(cls, cp: str, cs: str, rho: str, name: str = "medium") -> "MediumModel":
        """Build the model whose speeds are ``cp``, ``cs`` for the density ``rho``."""
        lam = f"({rho})*(({cp})^2 - 2*({cs})^2)"
        mu = f"({rho})*({cs})^2"
        return cls(lam, mu, rho, name)

    @cached_property
    def symbols(self) -> dict[str, sympy.Expr]:
        out = {}
        for key, text in (("lambda", self.lambda_expr), ("mu", self.mu_expr), ("rho", self.rho_expr)):
            try:
                out[key] = parse_expression(text)
            except ExpressionError as exc:
                raise ExpressionError(f"{key}: {exc.args[0].split(' at column')[0]}", exc.text, exc.column) from None
        lam, mu, rho = out["lambda"], out["mu"], out["rho"]
        out["cp2"] = (lam + 2 * mu) / rho
        out["cs2"] = mu / rho
        out["cp"] = sympy.sqrt(out["cp2"])
        out["cs"] = sympy.sqrt(out["cs2"])
        return out

    def speed_expr(self, mode: str = "p") -> sympy.Expr:
        return self.symbols[_mode_key(mode)]

    @cached_property
    def _point_fn(self):
        s = self.symbols
        lam, mu, rho, cp2, cs2 = s["lambda"], s["mu"], s["rho"], s["cp2"], s["cs2"]
        g_cp2, g_cs2, g_rho = gradient(cp2), gradient(cs2), gradient(rho)
        exprs = [lam, mu, rho, s["cp"], s["cs"]]
        exprs += [g / (2 * cp2) for g in g_cp2]
        exprs += [g / (2 * cs2) for g in g_cs2]
        exprs += [g / rho for g in g_rho]
        exprs += [g / (2 * s["cp"]) for g in g_cp2]
        exprs += list(g_cs2)
        return compile_fields(exprs)

    @cached_property
    def _speed_fns(self):
        fns = {}
        for mode in ("p", "s"):
            c2 = self.symbols["cp2" if mode == "p" else "cs2"]
            fns[mode] = compile_fields([sympy.sqrt(c2)] + [g / (2 * c2) for g in gradient(c2)])
        return fns

    @cached_property
    def _log_rho_fn(self):
        rho = self.symbols["rho"]
        lr = sympy.log(rho)
        h = hessian(lr)
        return compile_fields([lr] + gradient(lr) + [h[i][j] for i, j in _PAIRS])

    def fields(self, pts: np.ndarray) -> dict[str, np.ndarray]:
        """Vectorized evaluation at points of shape ``(..., 3)``."""
        pts = np.asarray(pts, dtype=float)
        v = self._point_fn(pts[..., 0], pts[..., 1], pts[..., 2])
        vec = lambda k: np.stack(v[k:k + 3], axis=-1)
        return {
            "lambda": v[0], "mu": v[1], "rho": v[2], "cp": v[3], "cs": v[4],
            "grad_log_cp": vec(5), "grad_log_cs": vec(8), "grad_log_rho": vec(11),
            "grad_cp": vec(14), "grad_cs2": vec(17),
        }

    def speed(self, pts: np.ndarray, mode: str = "p") -> tuple[np.ndarray, np.ndarray]:
        """Speed and its log-gradient at points ``(..., 3)``."""
        pts = np.asarray(pts, dtype=float)
        v = self._speed_fns[normalize_mode(mode)](pts[..., 0], pts[..., 1], pts[..., 2])
        return v[0], np.stack(v[1:], axis=-1)

    def log_rho_derivatives(self, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``log rho``, its gradient ``(...,3)`` and Hessian in pair order ``(...,6)``."""
        pts = np.asarray(pts, dtype=float)
        v = self._log_rho_fn(pts[..., 0], pts[..., 1], pts[..., 2])
        return v[0], np.stack(v[1:4], axis=-1), np.stack(v[4:], axis=-1)

    def to_dict(self) -> dict:
        return {"name": self.name, "lambda": self.lambda_expr, "mu": self.mu_expr, "rho": self.rho_expr}


_PAIRS = ((0, 0), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2))


def normalize_mode(mode: str) -> str:
    if mode in ("p", "P"):
        return "p"
    if mode in ("s", "S"):
        return "s"
    raise ValueError(f"mode must be 'p' or 's', got {mode!r}")


def _mode_key(mode: str) -> str:
    return "c" + normalize_mode(mode)


def eval_medium(model: MediumModel, x) -> MediumPoint:
    """Point values and gradients of the medium at ``x``.

    Raises:
        DomainError: if rho, mu or lambda + 2 mu is not positive at ``x`` or
            any value is not finite.
    """
    x = np.asarray(x, dtype=float).reshape(3)
    f = model.fields(x)
    if not f["rho"] > 0:
        raise DomainError(f"density must be positive, rho={float(f['rho'])} at {x.tolist()}")
    if not f["mu"] > 0:
        raise DomainError(f"mu must be positive, mu={float(f['mu'])} at {x.tolist()}")
    if not f["lambda"] + 2 * f["mu"] > 0:
        raise DomainError(f"lambda + 2 mu must be positive at {x.tolist()}")
    if not all(np.all(np.isfinite(v)) for v in f.values()):
        raise DomainError(f"medium evaluation is not finite at {x.tolist()}")
    return MediumPoint(
        lam=float(f["lambda"]), mu=float(f["mu"]), rho=float(f["rho"]),
        cp=float(f["cp"]), cs=float(f["cs"]),
        grad_log_cp=f["grad_log_cp"], grad_log_cs=f["grad_log_cs"],
        grad_log_rho=f["grad_log_rho"], grad_cp=f["grad_cp"], grad_cs2=f["grad_cs2"],
    )


@dataclass(frozen=True)
class LensRegion:
    """The region ``{xtilde >= -c, theta >= 0}`` near a boundary point.

    ``theta`` defines the boundary (positive inside the body); its zero set
    inside the region is the accessible surface S. The level set
    ``xtilde = -c`` is the inner cap.
    """

    theta_expr: str
    xtilde_expr: str
    cap_level: float
    s_tolerance: float = 1e-9

    def __post_init__(self):
        if not self.cap_level > 0:
            raise ConfigError(f"cap_level must be positive, got {self.cap_level}")
        if not self.s_tolerance >= 0:
            raise ConfigError("s_tolerance must be non-negative")
        _ = self._fn

    @cached_property
    def _fn(self):
        theta = parse_expression(self.theta_expr)
        xt = parse_expression(self.xtilde_expr)
        return compile_fields([theta, xt + self.cap_level])

    @cached_property
    def _grad_fn(self):
        theta = parse_expression(self.theta_expr)
        xt = parse_expression(self.xtilde_expr)
        return compile_fields(gradient(theta) + gradient(xt))

    def levels(self, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """``theta`` and ``xtilde + c`` at points ``(..., 3)``; both >= 0 on the region."""
        pts = np.asarray(pts, dtype=float)
        th, q = self._fn(pts[..., 0], pts[..., 1], pts[..., 2])
        return th, q

    def gradients(self, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        pts = np.asarray(pts, dtype=float)
        v = self._grad_fn(pts[..., 0], pts[..., 1], pts[..., 2])
        return np.stack(v[:3], axis=-1), np.stack(v[3:], axis=-1)

    def classify(self, pts: np.ndarray, tol: float | None = None) -> np.ndarray:
        """Integer codes indexing ``(exterior, interior, boundary-S, boundary-cap)``."""
        tol = self.s_tolerance if tol is None else tol
        th, q = self.levels(pts)
        code = np.full(th.shape, 1, dtype=np.int8)
        code[np.abs(q) <= tol] = 3
        code[np.abs(th) <= tol] = 2
        code[(th < -tol) | (q < -tol) | ~np.isfinite(th) | ~np.isfinite(q)] = 0
        return code

    def inside(self, pts: np.ndarray) -> np.ndarray:
        """Closed-region membership (interior or on either boundary piece)."""
        return self.classify(pts) > 0

    def to_dict(self) -> dict:
        return {"theta": self.theta_expr, "xtilde": self.xtilde_expr,
                "cap_level": self.cap_level, "s_tolerance": self.s_tolerance}


def region_membership(region: LensRegion, x, tol: float | None = None) -> str:
    """One of ``exterior``, ``interior``, ``boundary-S``, ``boundary-cap``."""
    return _CODES[int(region.classify(np.asarray(x, dtype=float).reshape(3), tol))]


# -- configuration -----------------------------------------------------------

def _require(doc: dict, path: str) -> Any:
    cur: Any = doc
    for part in path.split("."):
        if not isinstance(cur, dict) or part not in cur:
            raise ConfigError(f"missing required key {path!r}")
        cur = cur[part]
    return cur


def _expr_field(doc: dict, path: str) -> str:
    text = _require(doc, path)
    if not isinstance(text, str):
        raise ConfigError(f"{path}: expression must be a string")
    try:
        parse_expression(text)
    except ExpressionError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return text


def config_from_dict(doc: dict) -> tuple[MediumModel, LensRegion, Grid3]:
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a JSON object")
    model = MediumModel(
        lambda_expr=_expr_field(doc, "model.lambda"),
        mu_expr=_expr_field(doc, "model.mu"),
        rho_expr=_expr_field(doc, "model.rho"),
        name=str(_require(doc, "model.name")),
    )
    cap = _require(doc, "region.cap_level")
    if not isinstance(cap, (int, float)) or not cap > 0:
        raise ConfigError(f"region.cap_level must be a positive number, got {cap!r}")
    region = LensRegion(
        theta_expr=_expr_field(doc, "region.theta"),
        xtilde_expr=_expr_field(doc, "region.xtilde"),
        cap_level=float(cap),
        s_tolerance=float(doc["region"].get("s_tolerance", 1e-9)),
    )
    try:
        grid = Grid3(
            origin=tuple(_require(doc, "grid.origin")),
            spacing=float(_require(doc, "grid.spacing")),
            dims=tuple(_require(doc, "grid.dims")),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"grid: {exc}") from None
    return model, region, grid


def parse_model_config(text: str) -> tuple[MediumModel, LensRegion, Grid3]:
    """Parse a JSON configuration document.

    Raises:
        ConfigError: with line and column for JSON syntax errors, the key
            path for missing keys and expression errors.
    """
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"syntax error at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    return config_from_dict(doc)


def load_config(path: str | Path) -> tuple[MediumModel, LensRegion, Grid3]:
    return parse_model_config(Path(path).read_text(encoding="utf-8"))


def config_to_dict(model: MediumModel, region: LensRegion, grid: Grid3) -> dict:
    return {"model": model.to_dict(), "region": region.to_dict(), "grid": grid.to_dict()}


def canonical_config_path() -> Path:
    return Path(__file__).parent / "data" / "canonical.json"


def canonical_config() -> tuple[MediumModel, LensRegion, Grid3]:
    return load_config(canonical_config_path())


# -- admissibility -----------------------------------------------------------

@dataclass
class AdmissibilityReport:
    rho_pos: np.ndarray
    mu_pos: np.ndarray
    lam_mu_pos: np.ndarray
    strong_convexity: np.ndarray
    degenerate: np.ndarray
    in_region: np.ndarray
    eps_deg: float
    passed: bool
    counts: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "eps_deg": self.eps_deg,
            "counts": self.counts,
            "degenerate_fraction": self.counts.get("degenerate", 0) / max(self.counts.get("nodes", 1), 1),
        }


def admissibility_report(model: MediumModel, region: LensRegion | None, grid: Grid3,
                         eps_deg: float | None = None) -> AdmissibilityReport:
    """Per-node admissibility flags and the degenerate mask ``|c_p - 2 c_s| < eps_deg``.

    Aggregates run over nodes of the closed region (all nodes if ``region``
    is None). ``eps_deg`` defaults to ``1e-3 * max c_s`` over those nodes.
    """
    pts = grid.points()
    f = model.fields(pts)
    lam, mu, rho = f["lambda"], f["mu"], f["rho"]
    in_region = region.inside(pts) if region is not None else np.ones(grid.shape, bool)
    if not in_region.any():
        in_region = np.ones(grid.shape, bool)
    rho_pos = rho > 0
    mu_pos = mu > 0
    lam_mu_pos = lam + mu > 0
    strong = 3 * lam + 2 * mu > 0
    ok = rho_pos & mu_pos & lam_mu_pos
    cs = np.where(ok, f["cs"], np.nan)
    cp = np.where(ok, f["cp"], np.nan)
    if eps_deg is None:
        vals = cs[in_region & ok]
        eps_deg = 1e-3 * float(np.max(vals)) if vals.size else 0.0
    degenerate = ok & (np.abs(cp - 2 * cs) < eps_deg)
    flags = rho_pos & mu_pos & lam_mu_pos & strong
    passed = bool(np.all(flags[in_region]))
    counts = {
        "nodes": int(in_region.sum()),
        "rho_pos_fail": int((~rho_pos & in_region).sum()),
        "mu_pos_fail": int((~mu_pos & in_region).sum()),
        "lam_mu_pos_fail": int((~lam_mu_pos & in_region).sum()),
        "strong_convexity_fail": int((~strong & in_region).sum()),
        "degenerate": int((degenerate & in_region).sum()),
    }
    return AdmissibilityReport(rho_pos, mu_pos, lam_mu_pos, strong, degenerate, in_region,
                               float(eps_deg), passed, counts)
