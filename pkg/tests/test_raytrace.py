from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from elastoray.medium import Grid3, LensRegion, MediumModel
from elastoray.raytrace import (EXIT_CAP, EXIT_MAX, EXIT_S, amplitude_next_order, amplitude_transport,
                                eikonal_grid, geodesic_residual, hamiltonian_drift, integrate_bicharacteristic,
                                parse_sign, trace_rays, travel_time_at)

LINEAR = MediumModel.from_speeds("1 + z", "0.5*(1 + z)", "1", name="linear")
SMOOTH = MediumModel("1 + 0.3*sin(x)*cos(2*y) + 0.2*z", "1 + 0.1*z^2", "1 + 0.05*x*y")


def linear_time(p, x0=np.zeros(3)):
    """First-arrival time for c = 1 + z from a source at x0 with c(x0) = 1 + z0."""
    d2 = np.sum((p - x0) ** 2, axis=-1)
    return np.arccosh(1 + d2 / (2 * (1 + x0[2]) * (1 + p[..., 2])))


def test_straight_ray():
    m = MediumModel.from_speeds("2", "1", "1")
    ray = integrate_bicharacteristic(m, None, (0, 0, 0.1), (1, 0, 0), "+", "p", 1e-3, 1.0)
    np.testing.assert_allclose(ray.x[:, 0], ray.s, atol=1e-14)
    np.testing.assert_allclose(ray.x[:, 1:], np.broadcast_to([0, 0.1], (len(ray), 2)), atol=1e-14)
    np.testing.assert_allclose(ray.t, ray.s / 2, atol=1e-14)
    np.testing.assert_allclose(ray.xi, np.broadcast_to([1, 0, 0], ray.xi.shape), atol=1e-14)
    assert ray.exit == EXIT_MAX
    assert geodesic_residual(m, ray) <= 1e-9


def test_circular_ray():
    ray = integrate_bicharacteristic(LINEAR, None, (0, 0, 0), (1, 0, 0), "+", "p", 1e-3, 1.5)
    x, z = ray.x[:, 0], ray.x[:, 2]
    assert np.max(np.abs(x**2 + (z + 1) ** 2 - 1)) <= 1e-6
    assert np.max(np.abs(ray.x[:, 1])) == 0.0
    # arclength on the unit circle: x = sin s, t = int ds / (1 + z) = int ds / cos s
    np.testing.assert_allclose(x, np.sin(ray.s), atol=1e-9)
    np.testing.assert_allclose(ray.t, np.arctanh(np.sin(ray.s)), atol=1e-8)
    assert geodesic_residual(LINEAR, ray) <= 1e-4


@pytest.mark.parametrize("sign", ["+", "-"])
def test_hamiltonian_conserved(sign):
    ray = integrate_bicharacteristic(SMOOTH, None, (0.1, 0.2, 0.3), (0.3, -0.5, 0.8), sign, "p", 1e-3, 2.0)
    assert hamiltonian_drift(SMOOTH, ray) <= 1e-8
    np.testing.assert_allclose(ray.tau, ray.tau[0], rtol=0, atol=0)
    speed = np.linalg.norm(np.diff(ray.x, axis=0), axis=1) / np.diff(ray.s)
    np.testing.assert_allclose(speed, 1, atol=1e-6)


def test_minus_sign_reverses_direction():
    a = integrate_bicharacteristic(SMOOTH, None, (0, 0, 0), (0, 0, 1), "+", "p", 1e-2, 0.5)
    b = integrate_bicharacteristic(SMOOTH, None, (0, 0, 0), (0, 0, -1), "-", "p", 1e-2, 0.5)
    np.testing.assert_allclose(a.x, b.x, atol=1e-13)
    assert np.all(b.tau < 0)


def test_s_mode_uses_shear_speed():
    m = MediumModel.from_speeds("2", "0.5", "1")
    ray = integrate_bicharacteristic(m, None, (0, 0, 0), (0, 1, 0), "+", "s", 1e-2, 1.0)
    np.testing.assert_allclose(ray.t, ray.s / 0.5, atol=1e-13)


def test_geodesic_residual_second_order():
    res = []
    for h in (4e-3, 2e-3, 1e-3):
        ray = integrate_bicharacteristic(SMOOTH, None, (0, 0, 0), (1, 0.2, 0.4), "+", "p", h, 1.0)
        res.append(geodesic_residual(SMOOTH, ray))
    order = np.log2(np.array(res[:-1]) / res[1:])
    assert np.all(order > 1.8)


def test_region_exit_on_surface():
    region = LensRegion("z", "-z - 0.5*(x^2 + y^2)", 0.3)
    m = MediumModel.from_speeds("1", "0.5", "1")
    ray = integrate_bicharacteristic(m, region, (0, 0, 0.1), (1, 0, -1), "+", "p", 1e-2, 5.0)
    assert ray.exit == EXIT_S
    assert abs(ray.x[-1, 2]) <= 1e-9
    up = integrate_bicharacteristic(m, region, (0, 0, 0.1), (0, 0, 1), "+", "p", 1e-2, 5.0)
    assert up.exit == EXIT_CAP
    np.testing.assert_allclose(up.x[-1], [0, 0, 0.3], atol=1e-9)


def test_launch_validation():
    with pytest.raises(ValueError):
        integrate_bicharacteristic(SMOOTH, None, (0, 0, 0), (0, 0, 0))
    with pytest.raises(ValueError):
        parse_sign("up")


def test_trace_rays_worker_independent():
    r = np.random.default_rng(3)
    x0 = r.normal(scale=0.2, size=(300, 3))
    xi0 = r.normal(size=(300, 3))
    a = trace_rays(SMOOTH, None, x0, xi0, "+", "p", 1e-2, 0.3, workers=1)
    b = trace_rays(SMOOTH, None, x0, xi0, "+", "p", 1e-2, 0.3, workers=4)
    for ra, rb in zip(a, b):
        assert ra.x.tobytes() == rb.x.tobytes()


# -- amplitudes ----------------------------------------------------------------

def test_amplitude_constant_parallel():
    m = MediumModel.from_speeds("1.5", "0.5", "2")
    ray = integrate_bicharacteristic(m, None, (0, 0, 0), (0.3, 0.4, 1), "+", "p", 1e-2, 1.0)
    amp = amplitude_transport(m, ray, 1e-4, 1.0)
    np.testing.assert_allclose(amp.divN, 0, atol=1e-9)
    np.testing.assert_allclose(amp.b0, 1.0, atol=1e-9)


def test_amplitude_point_source_spreading():
    m = MediumModel.from_speeds("1", "0.5", "1")
    ray = integrate_bicharacteristic(m, None, (0, 0, 0), (0, 0, 1), "+", "p", 1e-3, 1.0)
    ref = 100
    amp = amplitude_transport(m, ray, 1e-4, 1.0, fan="point", ref_index=ref)
    s = amp.s[ref:]
    np.testing.assert_allclose(amp.b0[ref:], s[0] / s, atol=1e-4)


def test_amplitude_density_law():
    m = MediumModel("exp(z)", "exp(z)", "exp(z)")  # speeds constant, rho c_p = sqrt(3) e^z
    ray = integrate_bicharacteristic(m, None, (0, 0, 0), (0, 0, 1), "+", "p", 1e-2, 1.0)
    amp = amplitude_transport(m, ray, 1e-4, 2.0)
    np.testing.assert_allclose(amp.b0, 2.0 * np.exp(-ray.x[:, 2] / 2), atol=1e-6)


def test_next_order_constant_medium():
    m = MediumModel.from_speeds("1", "0.5", "1")
    ray = integrate_bicharacteristic(m, None, (0, 0, 0), (1, 0, 0), "+", "p", 1e-2, 1.0)
    amp = amplitude_transport(m, ray)
    np.testing.assert_allclose(amplitude_next_order(m, ray, np.zeros(len(ray)), 0.7, amp), 0.7, atol=1e-12)
    np.testing.assert_allclose(amplitude_next_order(m, ray, np.ones(len(ray)), 0.7, amp), 0.7 + ray.s, atol=1e-9)
    with pytest.raises(ValueError, match="G_samples"):
        amplitude_next_order(m, ray, np.ones(3), 0.7, amp)


def test_next_order_homogeneous_integrating_factor():
    m = MediumModel("exp(z)", "exp(z)", "exp(z)")
    ray = integrate_bicharacteristic(m, None, (0, 0, 0), (0, 0, 1), "+", "p", 1e-2, 1.0)
    amp = amplitude_transport(m, ray)
    a = amplitude_next_order(m, ray, np.zeros(len(ray)), 1.0, amp)
    # g = sqrt(rho c_p) with zero divergence, so a = g(0) / g(s) = exp(-z / 2)
    np.testing.assert_allclose(a, np.exp(-ray.x[:, 2] / 2), atol=1e-9)


# -- eikonal ---------------------------------------------------------------------

def test_eikonal_constant_speed():
    m = MediumModel.from_speeds("2", "1", "1")
    g = Grid3((-0.5, -0.5, -0.5), 0.05, (21, 21, 21))
    F = eikonal_grid(m, (0, 0, 0), g)
    exact = np.linalg.norm(g.points(), axis=-1) / 2
    assert np.nanmax(np.abs(F.T - exact)) <= 2 * g.h
    assert (F.status == 2).all()


def test_eikonal_linear_gradient_converges():
    errs = []
    for n in (11, 21):
        g = Grid3((-0.5, -0.5, 0.0), 1.0 / (n - 1), (n, n, n))
        F = eikonal_grid(LINEAR, (0, 0, 0), g)
        errs.append(np.nanmax(np.abs(F.T - linear_time(g.points()))))
        assert errs[-1] <= g.h
    assert np.log2(errs[0] / errs[1]) >= 0.9


def test_eikonal_plane_source():
    m = MediumModel.from_speeds("1 + z", "0.5", "1")
    g = Grid3((0, 0, 0), 0.05, (5, 5, 21))
    F = eikonal_grid(m, {"point": (0, 0, 0), "normal": (0, 0, 1)}, g)
    exact = np.log(1 + g.points()[..., 2])
    assert np.nanmax(np.abs(F.T - exact)) <= g.h


def test_eikonal_source_outside():
    g = Grid3((0, 0, 0), 0.1, (5, 5, 5))
    with pytest.raises(ValueError, match="outside"):
        eikonal_grid(LINEAR, (2, 0, 0), g)


def test_ray_vs_grid_consistency():
    g = Grid3((-0.5, -0.5, 0.0), 0.05, (21, 21, 21))
    F = eikonal_grid(LINEAR, (0, 0, 0), g)
    ray = integrate_bicharacteristic(LINEAR, None, (0, 0, 0), (0.6, 0.2, 1), "+", "p", 1e-2, 0.8)
    inside = np.all((ray.x >= g.origin) & (ray.x <= g.upper()), axis=1)
    Tg = travel_time_at(F, ray.x[inside])
    assert np.max(np.abs(Tg - ray.t[inside])) <= 3 * g.h / 1.0


@settings(max_examples=15, deadline=None)
@given(d=st.tuples(*[st.floats(-1, 1)] * 3).filter(lambda v: np.linalg.norm(v) > 0.1),
       sign=st.sampled_from(["+", "-"]))
def test_hamiltonian_property(d, sign):
    ray = integrate_bicharacteristic(SMOOTH, None, (0, 0, 0), d, sign, "p", 1e-2, 1.0)
    assert hamiltonian_drift(SMOOTH, ray) <= 1e-8
