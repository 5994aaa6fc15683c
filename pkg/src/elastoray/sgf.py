"""
SGF: a minimal structured-grid field file.

Layout::

    SGF1
    dims nx ny nz
    origin ox oy oz
    spacing h
    ncomp k
    mask 0|1
    <blank line>
    payload: little-endian float64, x fastest then y then z, components
             fastest within a node
    mask:    nx*ny*nz bytes (0/1) in the same node order, if flagged

Floats in the header are written with ``repr`` so that they round-trip.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .medium import Grid3

MAGIC = "SGF1"
MAX_NODES = 2**31


class SGFError(ValueError):
    """Malformed SGF file."""


@dataclass
class SGFField:
    """Node data ``(nx, ny, nz, k)`` indexed ``[ix, iy, iz, c]``."""

    grid: Grid3
    data: np.ndarray
    mask: np.ndarray | None = None

    @property
    def ncomp(self) -> int:
        return self.data.shape[-1]


def _fmt(v: float) -> str:
    return repr(float(v))


def encode_sgf(field: SGFField) -> bytes:
    g = field.grid
    data = np.asarray(field.data, dtype=float)
    if data.ndim == 3:
        data = data[..., None]
    if data.shape[:3] != g.shape:
        raise SGFError(f"data shape {data.shape} does not match grid dims {g.shape}")
    k = data.shape[-1]
    has_mask = field.mask is not None
    header = "\n".join([
        MAGIC,
        "dims {} {} {}".format(*g.dims),
        "origin {} {} {}".format(*(_fmt(v) for v in g.origin)),
        f"spacing {_fmt(g.spacing)}",
        f"ncomp {k}",
        f"mask {int(has_mask)}",
        "",
        "",
    ])
    payload = np.ascontiguousarray(data.transpose(2, 1, 0, 3)).astype("<f8").tobytes()
    out = header.encode("ascii") + payload
    if has_mask:
        m = np.asarray(field.mask, dtype=bool)
        out += np.ascontiguousarray(m.transpose(2, 1, 0)).astype(np.uint8).tobytes()
    return out


def decode_sgf(raw: bytes, expect_ncomp: int | None = None) -> SGFField:
    """Parse SGF bytes.

    Raises:
        SGFError: on a bad magic line, malformed or degenerate header,
            node-count overflow, truncated or oversized payload, or an
            unexpected component count.
    """
    lines = []
    pos = 0
    for _ in range(7):
        nl = raw.find(b"\n", pos)
        if nl < 0:
            raise SGFError("truncated header")
        lines.append(raw[pos:nl].decode("ascii", errors="replace"))
        pos = nl + 1
    if lines[0] != MAGIC:
        raise SGFError(f"bad magic {lines[0]!r}, expected {MAGIC!r}")
    try:
        keys = [ln.split()[0] if ln.split() else "" for ln in lines[1:6]]
        if keys != ["dims", "origin", "spacing", "ncomp", "mask"]:
            raise SGFError(f"unexpected header keys {keys}")
        dims = tuple(int(t) for t in lines[1].split()[1:])
        origin = tuple(float(t) for t in lines[2].split()[1:])
        spacing = float(lines[3].split()[1])
        k = int(lines[4].split()[1])
        mflag = int(lines[5].split()[1])
    except (IndexError, ValueError) as exc:
        raise SGFError(f"malformed header: {exc}") from None
    if lines[6] != "":
        raise SGFError("header must end with a blank line")
    if len(dims) != 3 or len(origin) != 3:
        raise SGFError("dims and origin need three entries")
    if min(dims) < 1:
        raise SGFError(f"degenerate dims {dims}")
    if k < 1:
        raise SGFError(f"ncomp must be positive, got {k}")
    if mflag not in (0, 1):
        raise SGFError(f"mask flag must be 0 or 1, got {mflag}")
    if not spacing > 0:
        raise SGFError(f"spacing must be positive, got {spacing}")
    nodes = dims[0] * dims[1] * dims[2]
    if nodes > MAX_NODES:
        raise SGFError(f"dims overflow: {nodes} nodes exceeds {MAX_NODES}")
    if expect_ncomp is not None and k != expect_ncomp:
        raise SGFError(f"expected {expect_ncomp} components, file has {k}")
    expected = nodes * k * 8 + (nodes if mflag else 0)
    actual = len(raw) - pos
    if actual < expected:
        raise SGFError(f"truncated payload: expected {expected} bytes, got {actual}")
    if actual > expected:
        raise SGFError(f"trailing data: expected {expected} bytes, got {actual}")
    nx, ny, nz = dims
    data = np.frombuffer(raw, dtype="<f8", count=nodes * k, offset=pos)
    data = data.reshape(nz, ny, nx, k).transpose(2, 1, 0, 3).astype(float)
    mask = None
    if mflag:
        mb = np.frombuffer(raw, dtype=np.uint8, count=nodes, offset=pos + nodes * k * 8)
        mask = mb.reshape(nz, ny, nx).transpose(2, 1, 0).astype(bool)
    return SGFField(Grid3(origin, spacing, dims), data, mask)


def write_sgf(field: SGFField, path: str | Path) -> None:
    Path(path).write_bytes(encode_sgf(field))


def read_sgf(path: str | Path, expect_ncomp: int | None = None) -> SGFField:
    return decode_sgf(Path(path).read_bytes(), expect_ncomp)
