"""Fast-marching convergence on the linear-gradient medium c = 1 + z.

Prints max errors against the closed-form travel time and the observed
orders for a sequence of halved spacings, for several source radii.
"""

from __future__ import annotations

import argparse

import numpy as np

from elastoray.medium import Grid3, MediumModel
from elastoray.raytrace import eikonal_grid


def exact_time(p: np.ndarray) -> np.ndarray:
    return np.arccosh(1 + np.sum(p**2, axis=-1) / (2 * (1 + p[..., 2])))


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--dims", type=int, nargs="+", default=[11, 21, 41])
    ap.add_argument("--radii", type=float, nargs="+", default=[-1.0, 0.1, 0.2],
                    help="source initialization radii; negative selects the default")
    args = ap.parse_args()
    model = MediumModel.from_speeds("1 + z", "0.5*(1 + z)", "1")
    for rad in args.radii:
        errs = []
        for n in args.dims:
            g = Grid3((-0.5, -0.5, 0.0), 1.0 / (n - 1), (n, n, n))
            F = eikonal_grid(model, (0, 0, 0), g, init_radius=None if rad < 0 else rad)
            errs.append(float(np.nanmax(np.abs(F.T - exact_time(g.points())))))
        orders = np.log2(np.array(errs[:-1]) / errs[1:])
        label = "default" if rad < 0 else f"{rad:g}"
        print(f"radius {label:>8}: errors {' '.join(f'{e:.5f}' for e in errs)}  orders "
              f"{' '.join(f'{o:.2f}' for o in orders)}")


if __name__ == "__main__":
    main()
