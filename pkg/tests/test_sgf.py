from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from elastoray.medium import Grid3
from elastoray.sgf import SGFError, SGFField, decode_sgf, encode_sgf, read_sgf, write_sgf


def ramp_field(mask=False):
    g = Grid3((0.1, -0.2, 0.3), 0.25, (3, 3, 3))
    data = np.arange(27 * 6, dtype=float).reshape(3, 3, 3, 6) / 7
    m = (np.arange(27).reshape(3, 3, 3) % 2).astype(bool) if mask else None
    return SGFField(g, data, m)


@pytest.mark.parametrize("mask", [False, True])
def test_roundtrip_bitwise(tmp_path, mask):
    f = ramp_field(mask)
    write_sgf(f, tmp_path / "a.sgf")
    g = read_sgf(tmp_path / "a.sgf", 6)
    assert g.grid == f.grid
    assert g.data.tobytes() == f.data.tobytes()
    if mask:
        assert np.array_equal(g.mask, f.mask)
    write_sgf(g, tmp_path / "b.sgf")
    assert (tmp_path / "a.sgf").read_bytes() == (tmp_path / "b.sgf").read_bytes()


def test_payload_order_x_fastest():
    g = Grid3((0, 0, 0), 1.0, (2, 1, 1))
    raw = encode_sgf(SGFField(g, np.array([1.0, 2.0]).reshape(2, 1, 1, 1)))
    assert raw.endswith(np.array([1.0, 2.0], "<f8").tobytes())


def test_degenerate_dims():
    raw = encode_sgf(ramp_field()).replace(b"dims 3 3 3", b"dims 0 1 1")
    with pytest.raises(SGFError, match="degenerate"):
        decode_sgf(raw)


def test_truncated_payload_message():
    raw = encode_sgf(ramp_field())
    with pytest.raises(SGFError, match=f"expected {27 * 6 * 8} bytes, got {27 * 6 * 8 - 8}"):
        decode_sgf(raw[:-8])


def test_trailing_bytes():
    with pytest.raises(SGFError, match="trailing"):
        decode_sgf(encode_sgf(ramp_field()) + b"\0")


def test_bad_magic():
    with pytest.raises(SGFError, match="magic"):
        decode_sgf(b"SGF2" + encode_sgf(ramp_field())[4:])


def test_overflow():
    raw = encode_sgf(ramp_field()).replace(b"dims 3 3 3", b"dims 100000 100000 100000")
    with pytest.raises(SGFError, match="overflow"):
        decode_sgf(raw)


def test_ncomp_expectation():
    with pytest.raises(SGFError, match="expected 21 components"):
        decode_sgf(encode_sgf(ramp_field()), 21)


@settings(max_examples=25, deadline=None)
@given(dims=st.tuples(*[st.integers(1, 4)] * 3), k=st.integers(1, 3), seed=st.integers(0, 10**6),
       spacing=st.floats(1e-3, 10), with_mask=st.booleans())
def test_roundtrip_property(dims, k, seed, spacing, with_mask):
    r = np.random.default_rng(seed)
    g = Grid3(tuple(r.normal(size=3)), spacing, dims)
    f = SGFField(g, r.normal(size=dims + (k,)), r.random(dims) > 0.5 if with_mask else None)
    raw = encode_sgf(f)
    assert encode_sgf(decode_sgf(raw, k)) == raw
