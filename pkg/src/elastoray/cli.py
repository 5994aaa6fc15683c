"""
Command-line entry point: ``elastoray <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 computation or I/O error. Every
run writes ``<first output>.manifest.json`` next to its main output.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .medium import (ConfigError, Grid3, admissibility_report, config_from_dict, config_to_dict,
                     load_config)
from .raytrace import amplitude_transport, eikonal_grid, integrate_bicharacteristic, trace_rays
from .reconstruct import certify_uniqueness
from .sgf import SGFField, read_sgf, write_sgf
from .tensorfield import SymTensor2Field, SymTensor4Field, build_difference_tensor, saint_venant, t4_functional
from .xray import FanSpec, RayFan, forward_transform, generate_fan, invert_transform

RAY_COLUMNS = ["s", "t", "x", "y", "z", "tau", "xi1", "xi2", "xi3", "divN", "b0"]


class UsageError(Exception):
    pass


class StageError(Exception):
    def __init__(self, stage: str, message: str):
        self.stage = stage
        super().__init__(message)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- helpers -------------------------------------------------------------------

def _vec3(text: str) -> np.ndarray:
    try:
        vals = [float(t) for t in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected three comma-separated numbers, got {text!r}") from None
    if len(vals) != 3:
        raise argparse.ArgumentTypeError(f"expected three comma-separated numbers, got {text!r}")
    return np.array(vals)


def _num(v) -> str:
    return repr(float(v))


def write_csv(path: Path, header: list[str], rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_num(v) if isinstance(v, (float, np.floating)) else v for v in row])
    path.write_text(buf.getvalue(), encoding="utf-8", newline="")


def read_csv(path: Path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty CSV")
    return rows[0], rows[1:]


def write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _load(stage: str, path: str):
    p = Path(path)
    if not p.exists():
        raise StageError(stage, f"file not found: {p}")
    try:
        return load_config(p)
    except ConfigError as exc:
        raise StageError(stage, f"{p}: {exc}") from None


def _read_field(stage: str, path: str, ncomp: int | None = None) -> SGFField:
    p = Path(path)
    if not p.exists():
        raise StageError(stage, f"file not found: {p}")
    return read_sgf(p, ncomp)


def _hash_files(paths) -> str:
    h = hashlib.sha256()
    for p in paths:
        if p and Path(p).exists():
            h.update(Path(p).read_bytes())
    return h.hexdigest()


def _manifest(out: Path, args: argparse.Namespace, inputs: list, outputs: list, t0: float) -> None:
    doc = {
        "command": args.command,
        "argv": sys.argv[1:] if args._argv is None else args._argv,
        "config_hash": _hash_files([p for p in inputs if str(p).endswith(".json")]),
        "inputs": [str(p) for p in inputs if p],
        "outputs": [str(p) for p in outputs],
        "wall_time_s": time.perf_counter() - t0,
        "version": __version__,
    }
    write_json(out.with_name(out.name + ".manifest.json"), doc)


# -- subcommands -----------------------------------------------------------------

def cmd_admissible(args) -> list:
    model, region, grid = _load("config", args.config)
    rep = admissibility_report(model, region, grid, args.eps_deg)
    doc = rep.to_dict()
    print(f"admissible: {'pass' if rep.passed else 'fail'} ({rep.counts['nodes']} region nodes, "
          f"{rep.counts['degenerate']} degenerate)")
    if args.out:
        write_json(Path(args.out), doc)
        return [args.out]
    return []


def cmd_trace(args) -> list:
    model, region, grid = _load("config", args.config)
    try:
        ray = integrate_bicharacteristic(model, region, args.x0, args.xi0, args.sign, args.mode,
                                         args.step, args.max_length)
    except ValueError as exc:
        raise StageError("trace", str(exc)) from None
    divN = np.full(len(ray), np.nan)
    b0 = np.full(len(ray), np.nan)
    if ray.mode == "p" and len(ray) > 2:
        amp = amplitude_transport(model, ray, args.fan_offset, 1.0, region=region)
        divN[:amp.s.size] = amp.divN
        b0[:amp.s.size] = amp.b0
    rows = (list(map(float, [ray.s[k], ray.t[k], *ray.x[k], ray.tau[k], *ray.xi[k], divN[k], b0[k]]))
            for k in range(len(ray)))
    write_csv(Path(args.out), RAY_COLUMNS, rows)
    print(f"trace: {len(ray)} samples, exit {ray.exit}, length {ray.length:.6g}")
    return [args.out]


def cmd_eikonal(args) -> list:
    model, region, grid = _load("config", args.config)
    source = args.source if args.plane_normal is None else {"point": args.source, "normal": args.plane_normal}
    try:
        T = eikonal_grid(model, source, grid, region, args.mode, args.init_radius)
    except ValueError as exc:
        raise StageError("eikonal", str(exc)) from None
    write_sgf(SGFField(grid, np.nan_to_num(T.T, nan=0.0)[..., None], T.status == 2), args.out)
    print(f"eikonal: {int((T.status == 2).sum())} accepted nodes")
    return [args.out]


def _fan_doc(config: dict, fan: RayFan) -> dict:
    return {
        "config": config,
        "spec": fan.spec.to_dict(),
        "counts": fan.counts,
        "rays": [
            {"id": i, "x0": [float(v) for v in fan.x0[i]], "xi0": [float(v) for v in fan.xi0[i]],
             "length": r.length, "samples": len(r)}
            for i, r in enumerate(fan.rays)
        ],
    }


def load_fan(path: str) -> tuple[RayFan, dict]:
    """Re-trace the rays recorded in a fan document."""
    p = Path(path)
    if not p.exists():
        raise StageError("fan", f"file not found: {p}")
    doc = json.loads(p.read_text(encoding="utf-8"))
    model, region, grid = config_from_dict(doc["config"])
    spec = FanSpec(**doc["spec"])
    x0 = np.array([r["x0"] for r in doc["rays"]], float)
    xi0 = np.array([r["xi0"] for r in doc["rays"]], float)
    rays = trace_rays(model, region, x0, xi0, "+", "p", spec.h_ray, spec.max_length)
    return RayFan(rays, spec, x0, xi0, doc["counts"]), doc


def cmd_fan(args) -> list:
    model, region, grid = _load("config", args.config)
    spec = FanSpec(seeds=args.seeds, dirs=args.dirs, h_ray=args.step, max_elevation=args.max_elevation,
                   jitter_seed=args.seed)
    try:
        fan = generate_fan(model, region, grid, spec)
    except RuntimeError as exc:
        raise StageError("fan", str(exc)) from None
    write_json(Path(args.out), _fan_doc(config_to_dict(model, region, grid), fan))
    print(f"fan: kept {fan.counts['kept']} of {fan.counts['candidates']} "
          f"(cap exits {fan.counts['cap_exit']}, trapped {fan.counts['trapped']})")
    return [args.out]


def cmd_build_b(args) -> list:
    m1, region, grid = _load("config1", args.config1)
    m2, _, _ = _load("config2", args.config2)
    try:
        B, _ = build_difference_tensor(m1, m2, grid, args.omega_form)
    except ValueError as exc:
        raise StageError("build-b", str(exc)) from None
    write_sgf(SGFField(grid, B.comps, B.mask), args.out)
    print(f"build-b: max |B| = {np.max(np.abs(B.comps)):.6g}")
    return [args.out]


def cmd_sv(args) -> list:
    f = _read_field("sv", args.inp, 6)
    B = SymTensor2Field(f.grid, f.data, f.mask)
    try:
        W = saint_venant(B)
    except ValueError as exc:
        raise StageError("sv", str(exc)) from None
    write_sgf(SGFField(f.grid, np.where(W.mask[..., None], W.comps, 0.0), W.mask), args.out)
    print(f"sv: max |WB| = {W.max_norm():.6g} over {int(W.mask.sum())} nodes")
    return [args.out]


def cmd_t4(args) -> list:
    m1, region, grid = _load("config1", args.config1)
    m2, _, _ = _load("config2", args.config2)
    pts = grid.points()
    try:
        val, mask = t4_functional(m1, m1.fields(pts)["rho"], m2.fields(pts)["rho"], grid)
    except ValueError as exc:
        raise StageError("t4", str(exc)) from None
    write_sgf(SGFField(grid, np.where(mask, val, 0.0)[..., None], mask), args.out)
    print(f"t4: max |value| = {np.max(np.abs(val[mask])):.6g}")
    return [args.out]


def cmd_transform(args) -> list:
    f = _read_field("transform", args.inp, 6)
    B = SymTensor2Field(f.grid, f.data, f.mask)
    fan, _ = load_fan(args.fan)
    rows = []
    try:
        for i, ray in enumerate(fan.rays):
            s = forward_transform(B, ray, i, args.rule)
            rows.append([i, float(s.value), float(s.length)])
    except ValueError as exc:
        raise StageError("transform", str(exc)) from None
    write_csv(Path(args.out), ["ray_id", "value", "length"], rows)
    print(f"transform: {len(rows)} samples")
    return [args.out]


def read_samples(path: str, nrays: int) -> np.ndarray:
    p = Path(path)
    if not p.exists():
        raise StageError("samples", f"file not found: {p}")
    header, rows = read_csv(p)
    if header[:3] != ["ray_id", "value", "length"]:
        raise StageError("samples", f"{p}: expected columns ray_id,value,length")
    vals = np.zeros(nrays)
    seen = np.zeros(nrays, bool)
    for row in rows:
        i = int(row[0])
        if not 0 <= i < nrays:
            raise StageError("samples", f"{p}: ray id {i} outside fan of {nrays} rays")
        vals[i] = float(row[1])
        seen[i] = True
    if not seen.all():
        raise StageError("samples", f"{p}: {int((~seen).sum())} rays have no sample")
    return vals


def cmd_invert(args) -> list:
    fan, doc = load_fan(args.fan)
    _, _, grid = config_from_dict(doc["config"])
    d = read_samples(args.samples, len(fan))
    est, diag = invert_transform(fan, d, grid, reg=args.reg, maxiter=args.maxiter)
    write_sgf(SGFField(grid, est.comps, None), args.out)
    outs = [args.out]
    if args.diag:
        write_csv(Path(args.diag), ["iteration", "residual"],
                  [[k, float(r)] for k, r in enumerate(diag["residuals"])])
        outs.append(args.diag)
    print(f"invert: {diag['iterations']} iterations, converged={diag['converged']}, "
          f"misfit {diag['data_misfit']:.6g}")
    return outs


def cmd_certify(args) -> list:
    model, region, grid = _load("config", args.config)
    fan, doc = load_fan(args.fan)
    _, _, fgrid = config_from_dict(doc["config"])
    if fgrid != grid:
        raise StageError("certify", "fan grid differs from the config grid")
    if args.rho2:
        rho2 = _read_field("rho2", args.rho2, 1)
        if rho2.grid.dims != grid.dims:
            raise StageError("rho2", f"rho2 dims {rho2.grid.dims} differ from grid {grid.dims}")
        rho2 = rho2.data[..., 0]
    else:
        rho2 = model.fields(grid.points())["rho"]
    d = read_samples(args.samples, len(fan))
    cert = certify_uniqueness(model, rho2, fan, d, grid, region, reg=args.reg, eta_zero=args.eta_zero,
                              eps_deg=args.eps_deg)
    out = Path(args.out)
    beta_path = out.with_name(out.stem + ".beta_minus.sgf")
    write_sgf(SGFField(grid, cert.beta_minus[..., None], None), beta_path)
    doc = cert.to_dict()
    doc["beta_minus"] = beta_path.name
    write_json(out, doc)
    print(f"certify: verdict {cert.verdict}, |beta_minus|_L2 = {cert.l2_norm:.6g}")
    return [args.out, str(beta_path)]


PLOT_README = """# plot data

- `ray_xz.csv`: x,z polyline of the traced ray (one row per ray sample).
- `b0_decay.csv`: s,b0 along the traced ray.
- `samples_hist.csv`: bin_lo,bin_hi,count histogram of transform values.
- `cg_residuals.csv`: iteration,residual,monotone (1 if not above the previous residual).
- `certificate.csv`: one row with the scalar certificate fields.
- `beta_slice.csv`: x,z,value on the y-midplane of the beta_minus field.
"""


def cmd_plot_data(args) -> list:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if args.ray:
        header, rows = read_csv(Path(args.ray))
        ix, iz, is_, ib = (header.index(k) for k in ("x", "z", "s", "b0"))
        write_csv(out / "ray_xz.csv", ["x", "z"], [[float(r[ix]), float(r[iz])] for r in rows])
        write_csv(out / "b0_decay.csv", ["s", "b0"], [[float(r[is_]), float(r[ib])] for r in rows])
        written += [out / "ray_xz.csv", out / "b0_decay.csv"]
    if args.samples:
        _, rows = read_csv(Path(args.samples))
        vals = np.array([float(r[1]) for r in rows])
        counts, edges = np.histogram(vals, bins=args.bins)
        write_csv(out / "samples_hist.csv", ["bin_lo", "bin_hi", "count"],
                  [[float(edges[k]), float(edges[k + 1]), int(counts[k])] for k in range(counts.size)])
        written.append(out / "samples_hist.csv")
    if args.diag:
        _, rows = read_csv(Path(args.diag))
        res = [float(r[1]) for r in rows]
        mono = [1] + [int(res[k] <= res[k - 1] * (1 + 1e-12)) for k in range(1, len(res))]
        write_csv(out / "cg_residuals.csv", ["iteration", "residual", "monotone"],
                  [[int(rows[k][0]), res[k], mono[k]] for k in range(len(res))])
        written.append(out / "cg_residuals.csv")
    if args.cert:
        doc = json.loads(Path(args.cert).read_text(encoding="utf-8"))
        keys = [k for k in sorted(doc) if not isinstance(doc[k], (dict, list))]
        write_csv(out / "certificate.csv", keys, [[doc[k] for k in keys]])
        written.append(out / "certificate.csv")
    if args.beta:
        f = _read_field("plot-data", args.beta, 1)
        j = f.grid.dims[1] // 2
        xs, zs = f.grid.axis(0), f.grid.axis(2)
        write_csv(out / "beta_slice.csv", ["x", "z", "value"],
                  [[float(xs[i]), float(zs[k]), float(f.data[i, j, k, 0])]
                   for i in range(xs.size) for k in range(zs.size)])
        written.append(out / "beta_slice.csv")
    (out / "README.md").write_text(PLOT_README, encoding="utf-8")
    written.append(out / "README.md")
    print(f"plot-data: wrote {len(written)} files to {out}")
    return [str(p) for p in written]


# -- dispatch ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="elastoray", description="Ray, tensor-tomography and density-uniqueness tools.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    a = sub.add_parser("admissible", help="admissibility report of a medium on its grid")
    a.add_argument("--config", required=True)
    a.add_argument("--out")
    a.add_argument("--eps-deg", type=float)

    a = sub.add_parser("trace", help="trace one bicharacteristic to a CSV")
    a.add_argument("--config", required=True)
    a.add_argument("--x0", type=_vec3, required=True)
    a.add_argument("--xi0", type=_vec3, required=True)
    a.add_argument("--mode", choices=["p", "s"], default="p")
    a.add_argument("--sign", choices=["plus", "minus", "+", "-"], default="plus")
    a.add_argument("--step", type=float, default=1e-3)
    a.add_argument("--max-length", type=float, default=10.0)
    a.add_argument("--fan-offset", type=float, default=1e-4)
    a.add_argument("--out", required=True)

    a = sub.add_parser("eikonal", help="first-arrival travel times to an SGF file")
    a.add_argument("--config", required=True)
    a.add_argument("--source", type=_vec3, required=True)
    a.add_argument("--plane-normal", type=_vec3)
    a.add_argument("--mode", choices=["p", "s"], default="p")
    a.add_argument("--init-radius", type=float)
    a.add_argument("--out", required=True)

    a = sub.add_parser("fan", help="generate a ray fan with endpoints on S")
    a.add_argument("--config", required=True)
    a.add_argument("--seeds", type=int, default=32)
    a.add_argument("--dirs", type=int, default=64)
    a.add_argument("--step", type=float, default=5e-3)
    a.add_argument("--max-elevation", type=float, default=1.2)
    a.add_argument("--seed", type=int)
    a.add_argument("--out", required=True)

    a = sub.add_parser("build-b", help="model-difference tensor B of two media")
    a.add_argument("--config1", required=True)
    a.add_argument("--config2", required=True)
    a.add_argument("--omega-form", choices=["consistent", "displayed"], default="consistent")
    a.add_argument("--out", required=True)

    a = sub.add_parser("sv", help="Saint-Venant operator of a 6-component field")
    a.add_argument("--in", dest="inp", required=True)
    a.add_argument("--out", required=True)

    a = sub.add_parser("t4", help="two-term contraction formula from two densities")
    a.add_argument("--config1", required=True)
    a.add_argument("--config2", required=True)
    a.add_argument("--out", required=True)

    a = sub.add_parser("transform", help="ray transform of a tensor field over a fan")
    a.add_argument("--in", dest="inp", required=True)
    a.add_argument("--fan", required=True)
    a.add_argument("--rule", choices=["trapezoid", "simpson"], default="trapezoid")
    a.add_argument("--out", required=True)

    a = sub.add_parser("invert", help="regularized inversion of transform samples")
    a.add_argument("--fan", required=True)
    a.add_argument("--samples", required=True)
    a.add_argument("--reg", type=float, default=1e-4)
    a.add_argument("--maxiter", type=int, default=2000)
    a.add_argument("--out", required=True)
    a.add_argument("--diag")

    a = sub.add_parser("certify", help="density uniqueness certificate")
    a.add_argument("--config", required=True)
    a.add_argument("--rho2")
    a.add_argument("--fan", required=True)
    a.add_argument("--samples", required=True)
    a.add_argument("--reg", type=float, default=1e-4)
    a.add_argument("--eta-zero", type=float, default=1e-6)
    a.add_argument("--eps-deg", type=float)
    a.add_argument("--out", required=True)

    a = sub.add_parser("plot-data", help="CSV bundles for plotting")
    a.add_argument("--ray")
    a.add_argument("--samples")
    a.add_argument("--diag")
    a.add_argument("--cert")
    a.add_argument("--beta")
    a.add_argument("--bins", type=int, default=32)
    a.add_argument("--out-dir", required=True)
    return p


COMMANDS = {
    "admissible": cmd_admissible, "trace": cmd_trace, "eikonal": cmd_eikonal, "fan": cmd_fan,
    "build-b": cmd_build_b, "sv": cmd_sv, "t4": cmd_t4, "transform": cmd_transform,
    "invert": cmd_invert, "certify": cmd_certify, "plot-data": cmd_plot_data,
}

INPUT_KEYS = ("config", "config1", "config2", "inp", "fan", "samples", "rho2", "ray", "diag", "cert", "beta")


def dispatch(argv: list[str]) -> int:
    parser = build_parser()
    if not argv:
        parser.print_usage(sys.stderr)
        return 1
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 1
    args._argv = list(argv)
    t0 = time.perf_counter()
    try:
        outputs = COMMANDS[args.command](args)
    except StageError as exc:
        print(f"error [{exc.stage}]: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # computation errors carry the subcommand as stage
        print(f"error [{args.command}]: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    if outputs:
        inputs = [getattr(args, k) for k in INPUT_KEYS if getattr(args, k, None)]
        _manifest(Path(outputs[0]), args, inputs, outputs, t0)
    return 0


def main(argv: list[str] | None = None) -> int:
    return dispatch(sys.argv[1:] if argv is None else argv)


if __name__ == "__main__":
    sys.exit(main())
