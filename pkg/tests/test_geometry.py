import math

import numpy as np
import pytest

from perelman_lab import geometry as geo
from perelman_lab.geometry import ConformalTorus, Euclidean, RoundSphere

from conftest import bumpy_torus, order


def sin_torus(N):
    return ConformalTorus.from_function(lambda x, y: 0.1 * np.sin(x), N)


def fourth_order_laplacian(a, h):
    out = np.zeros_like(a)
    for ax in (0, 1):
        out += (-np.roll(a, 2, ax) + 16 * np.roll(a, 1, ax) - 30 * a + 16 * np.roll(a, -1, ax) - np.roll(a, -2, ax)) / (12 * h * h)
    return out


# -- scalar curvature -----------------------------------------------------


def test_scalar_curvature_flat_space_is_zero():
    assert np.all(geo.scalar_curvature(Euclidean(3, resolution=9)) == 0.0)


def test_scalar_curvature_unit_two_sphere():
    assert geo.scalar_curvature(RoundSphere(2, 1.0))[0] == 2.0
    assert geo.scalar_curvature(RoundSphere(3, 2.0))[0] == pytest.approx(6.0 / 4.0)


def test_scalar_curvature_torus_matches_high_order_oracle_at_second_order():
    errs = []
    for N in (32, 64):
        m = sin_torus(N)
        fine = sin_torus(2 * N)
        oracle = -2.0 * np.exp(-2.0 * fine.u) * fourth_order_laplacian(fine.u, fine.hx)
        errs.append(np.max(np.abs(geo.scalar_curvature(m) - oracle[::2, ::2])))
    assert errs[1] < 1e-3
    assert order(*errs) > 1.9


# -- Laplacian, gradient, Hessian -----------------------------------------


def test_laplacian_of_constant_vanishes(torus32):
    assert np.max(np.abs(geo.laplace_beltrami(torus32, np.full(torus32.shape, 3.0)))) < 1e-12


def test_laplacian_euclidean_quadratic():
    m = Euclidean(2, resolution=9)
    phi = geo.quadratic_field(1.0)
    assert np.allclose(geo.laplace_beltrami(m, phi), 4.0)


def test_laplacian_flat_fourier_eigenfunction():
    m = ConformalTorus.flat(64)
    phi = np.sin(geo.coordinates(m)[..., 0])
    lap = geo.laplace_beltrami(m, phi)
    assert np.max(np.abs(lap + phi)) / np.max(np.abs(phi)) < 1e-3


def test_laplacian_self_adjoint_and_divergence_free(rng):
    m = bumpy_torus(24)
    a, b = rng.normal(size=(2,) + m.shape)
    lhs = geo.integrate(m, a * geo.laplace_beltrami(m, b))
    rhs = geo.integrate(m, b * geo.laplace_beltrami(m, a))
    assert abs(lhs - rhs) <= 1e-10 * np.linalg.norm(a) * np.linalg.norm(b)
    assert abs(geo.integrate(m, geo.laplace_beltrami(m, a))) < 1e-10


def test_grad_norm_sq_euclidean_gaussian():
    m = Euclidean(2, resolution=11)
    tau = 0.7
    x = m.nodes
    val = geo.grad_norm_sq(m, geo.quadratic_field(1.0 / (4 * tau)))
    assert np.allclose(val, np.sum(x * x, axis=-1) / (4 * tau * tau))


def test_grad_norm_sq_torus_matches_conformal_oracle():
    errs = []
    for N in (32, 64):
        m = sin_torus(N)
        y = geo.coordinates(m)[..., 1]
        phi = np.cos(y)
        exact = np.exp(-2 * m.u) * np.sin(y) ** 2
        errs.append(np.max(np.abs(geo.grad_norm_sq(m, phi) - exact)))
        assert np.all(geo.grad_norm_sq(m, phi) >= 0)
    assert order(*errs) > 1.9


def test_hessian_constant_and_quadratic():
    m = Euclidean(3, resolution=9)
    assert np.all(geo.hessian(m, 2.0) == 0.0)
    tau = 0.4
    H = geo.hessian(m, geo.quadratic_field(1.0 / (4 * tau)))
    assert np.allclose(H, np.eye(3) / (2 * tau))


def test_hessian_trace_equals_laplacian_and_is_symmetric(rng):
    m = bumpy_torus(32)
    phi = np.cos(geo.coordinates(m)[..., 0] + 2 * geo.coordinates(m)[..., 1])
    H = geo.hessian(m, phi)
    assert np.array_equal(H[..., 0, 1], H[..., 1, 0])
    assert np.max(np.abs(geo.sym_trace(m, H) - geo.laplace_beltrami(m, phi))) < 1e-12


# -- integration and scaling ----------------------------------------------


def test_integrate_flat_torus_area():
    m = ConformalTorus.flat(16, lx=2.0, ly=3.0)
    assert geo.integrate(m, 1.0) == pytest.approx(6.0, abs=1e-14)


@pytest.mark.parametrize("n", [1, 2, 3])
def test_integrate_heat_kernel_unit_mass(n):
    tau = 0.3
    m = Euclidean.for_scale(n, tau, resolution=97 if n < 3 else 61)
    f = geo.gaussian_potential(n, tau)
    assert geo.integrate(m, np.exp(-geo.sample(m, f))) == pytest.approx(1.0, abs=1e-10)


def test_integrate_rejects_non_decaying_integrand():
    with pytest.raises(ValueError):
        geo.integrate(Euclidean(1, resolution=9), 1.0)


def test_torus_area_converges_to_bessel_value():
    # int exp(0.2 sin x) dx dy = 4 pi^2 I_0(0.2); the periodic rule is spectrally accurate
    from scipy.special import i0

    m = sin_torus(32)
    assert geo.volume(m) == pytest.approx(4 * math.pi**2 * i0(0.2), rel=1e-13)


def test_rescale_rules():
    m = bumpy_torus(16)
    assert geo.rescale(m, 1.0) is m
    assert geo.rescale(RoundSphere(2, 1.0), 4.0).radius == pytest.approx(2.0)
    with pytest.raises(ValueError):
        geo.rescale(m, 0.0)


@pytest.mark.parametrize("alpha", [0.3, 2.0, 5.5])
def test_curvature_scales_inversely(alpha):
    for m in (bumpy_torus(16), RoundSphere(3, 1.3), Euclidean(2, resolution=9)):
        R, Ra = geo.scalar_curvature(m), geo.scalar_curvature(geo.rescale(m, alpha))
        assert np.max(np.abs(Ra - R / alpha)) <= 1e-12 * max(1.0, np.max(np.abs(R)))


def test_backend_validation():
    with pytest.raises(ValueError):
        RoundSphere(2, -1.0)
    with pytest.raises(ValueError):
        ConformalTorus(np.zeros((4, 4)))
    with pytest.raises(ValueError):
        Euclidean(0)
