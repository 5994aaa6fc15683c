from __future__ import annotations

from elastoray.medium import Grid3


def cube(n: int = 17, lo: float = -0.5, length: float = 1.0) -> Grid3:
    return Grid3((lo, lo, lo), length / (n - 1), (n, n, n))
