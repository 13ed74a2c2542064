import math

import numpy as np
import pytest

from perelman_lab import flow
from perelman_lab import functionals as fn
from perelman_lab import geometry as geo
from perelman_lab.geometry import ConformalTorus, Euclidean, RoundSphere

from conftest import bumpy_torus


def gaussian_cfg(n, tau, center=None):
    # compatible for W: int (4 pi tau)^{-n/2} e^{-f} dV = 1
    return fn.PotentialConfig(geo.quadratic_field(1.0 / (4.0 * tau), center), tau, True)


def rand_var(m, rng, sigma=True):
    return fn.conformal_variation(m, fn.random_potential(m, rng), fn.random_potential(m, rng), float(rng.normal()) if sigma else 0.0)


# -- F --------------------------------------------------------------------


@pytest.mark.parametrize("n", [1, 2, 3])
def test_F_gaussian_law(n):
    tau = 0.8
    m = Euclidean.for_scale(n, tau, resolution=97 if n < 3 else 61)
    assert fn.eval_F(m, geo.gaussian_potential(n, tau)) == pytest.approx(n / (2 * tau), abs=1e-10)


def test_F_constant_potentials():
    flat = ConformalTorus.flat(16)
    assert fn.eval_F(flat, math.log(geo.volume(flat))) == pytest.approx(0.0, abs=1e-15)
    s = RoundSphere(2, 1.0)
    for k in (1.0, 2.5):
        assert fn.eval_F(s, math.log(4 * math.pi), k) == pytest.approx(2 * k, rel=1e-14)


def test_F_scaling_law(rng):
    m = bumpy_torus(32)
    f = fn.random_potential(m, rng)
    c, b = 1.7, 0.3
    lhs = fn.eval_F(geo.rescale(m, c * c), f + b)
    assert lhs == pytest.approx(math.exp(-b) * fn.eval_F(m, f), rel=1e-12)


def test_delta_F_zero_variation(torus32, rng):
    f = fn.random_potential(torus32, rng)
    assert fn.delta_F(torus32, f, fn.VariationData()) == 0.0


def test_delta_F_euclidean_constant_shift():
    tau = 0.6
    m = Euclidean.for_scale(2, tau)
    f = geo.gaussian_potential(2, tau)
    var = fn.VariationData(h=0.1)
    assert fn.delta_F(m, f, var) == pytest.approx(fn.fd_delta_F(m, f, var), rel=1e-6)


def test_delta_F_and_W_torus_random(rng):
    m = bumpy_torus(32)
    for _ in range(5):
        f = fn.random_potential(m, rng)
        var = rand_var(m, rng)
        assert fn.delta_F(m, f, var) == pytest.approx(fn.fd_delta_F(m, f, var), rel=1e-4)
        cfg = fn.normalize_potential(m, f, float(rng.uniform(0.2, 1.0)))
        assert fn.delta_W(m, cfg, var) == pytest.approx(fn.fd_delta_W(m, cfg, var), rel=1e-4)


def test_delta_F_sphere_matches_difference():
    s = RoundSphere(3, 1.2)
    var = fn.conformal_variation(s, 0.3, 0.2)
    f = math.log(geo.volume(s))
    assert fn.delta_F(s, f, var) == pytest.approx(fn.fd_delta_F(s, f, var), rel=1e-6)


def test_production_F_gaussian_and_flat():
    tau = 0.5
    n = 2
    m = Euclidean.for_scale(n, tau)
    assert fn.production_F(m, geo.gaussian_potential(n, tau)) == pytest.approx(n / (2 * tau * tau), rel=1e-10)
    flat = ConformalTorus.flat(16)
    assert fn.production_F(flat, math.log(geo.volume(flat))) == 0.0


def test_production_F_matches_rate_on_torus():
    h = flow.run_history(bumpy_torus(64), 0.1)
    last = h.snapshot(len(h) - 1)
    X = geo.coordinates(last)
    f = 0.1 * np.cos(X[..., 0]) + 0.1 * np.sin(X[..., 1])
    tr = flow.evolve_potential(h, f + math.log(geo.integrate(last, np.exp(-f))))
    k = len(h) // 2
    F = [fn.eval_F(h.snapshot(j), tr.values[j]) for j in (k - 1, k + 1)]
    rate = (F[1] - F[0]) / (h.times[k + 1] - h.times[k - 1])
    assert rate == pytest.approx(fn.production_F(h.snapshot(k), tr.values[k]), rel=1e-4)


def test_production_F_k_nonnegative(rng):
    m = bumpy_torus(32)
    for k in (1.0, 2.0):
        assert fn.production_F(m, fn.random_potential(m, rng), k) >= 0.0


# -- W --------------------------------------------------------------------


@pytest.mark.parametrize("center", [None, (0.7, -0.4)])
def test_W_gaussian_soliton_zero(center):
    m = Euclidean.for_scale(2, 0.9, widths=16)
    cfg = gaussian_cfg(2, 0.9, center)
    assert abs(fn.eval_W(m, cfg)) < 1e-9
    assert abs(fn.production_W(m, cfg)) < 1e-10


def test_W_rejects_incompatible():
    m = ConformalTorus.flat(16)
    with pytest.raises(ValueError):
        fn.eval_W(m, fn.PotentialConfig(np.zeros(m.shape), 1.0, False))


def test_W_constant_potential_on_flat_torus():
    m = ConformalTorus.flat(16, lx=3.0)
    tau = 0.4
    cfg = fn.normalize_potential(m, 0.0, tau)
    expected = math.log(9.0 / (4 * math.pi * tau)) - 2
    assert fn.eval_W(m, cfg) == pytest.approx(expected, abs=1e-13)
    assert float(np.ravel(cfg.f)[0]) == pytest.approx(math.log(9.0 / (4 * math.pi * tau)), abs=1e-13)
    assert fn.production_W(m, cfg) == pytest.approx(2 * tau * 2 / (4 * tau * tau), rel=1e-12)


def test_normalize_potential_idempotent(rng, torus32):
    cfg = fn.normalize_potential(torus32, fn.random_potential(torus32, rng), 0.5)
    again = fn.normalize_potential(torus32, cfg.f, 0.5)
    assert np.max(np.abs(again.f - cfg.f)) < 1e-14
    assert fn.mass(torus32, cfg.f, 0.5) == pytest.approx(1.0, abs=1e-14)


def test_delta_W_sigma_only_gaussian():
    tau = 0.7
    m = Euclidean.for_scale(2, tau, widths=16)
    cfg = gaussian_cfg(2, tau)
    var = fn.VariationData(sigma=1.0)
    assert fn.delta_W(m, cfg, var) == pytest.approx(fn.fd_delta_W(m, cfg, var), abs=1e-6)


def test_flat_space_W_nonnegative(rng):
    for _ in range(10):
        tau = float(rng.uniform(0.5, 2.0))
        m = Euclidean.for_scale(2, tau, widths=16)
        cfg = fn.normalize_potential(m, fn.random_potential(m, rng), tau)
        assert fn.eval_W(m, cfg) >= -1e-9


def test_W_scaling_invariance(rng, torus32):
    f = fn.random_potential(torus32, rng)
    for a in (0.25, 3.0):
        assert fn.w_integral(geo.rescale(torus32, a), f, a * 0.6) == pytest.approx(fn.w_integral(torus32, f, 0.6), abs=1e-12)


# -- spectral -------------------------------------------------------------


def test_lambda_flat_torus_zero_and_constant_eigenfunction():
    r = fn.lambda_k(ConformalTorus.flat(16))
    assert abs(r.eigenvalue) < 1e-12
    assert np.ptp(r.u0) < 1e-10 and np.all(r.u0 > 0)


def test_lambda_sphere():
    for k in (1.0, 2.0):
        assert fn.lambda_k(RoundSphere(2, 1.0), k).eigenvalue == pytest.approx(2 * k)


def test_lambda_matches_dense_oracle_and_properties():
    m = ConformalTorus.from_function(lambda x, y: 0.1 * np.sin(x), 32)
    r = fn.lambda_k(m)
    assert abs(r.eigenvalue - fn.dense_lowest_eigenvalue(m, 4.0, geo.scalar_curvature(m))) < 1e-8
    assert r.residual <= 1e-8 and np.all(r.u0 > 0)
    assert geo.integrate(m, r.u0**2) == pytest.approx(1.0, abs=1e-12)
    assert fn.mass(m, r.f0) == pytest.approx(1.0, abs=1e-12)


def test_lambda_rejects_flat_space():
    with pytest.raises((TypeError, ValueError)):
        fn.lambda_k(Euclidean(2))


def test_lambda_monotone_along_flow():
    h = flow.run_history(bumpy_torus(32), 0.3)
    lam = [fn.lambda_k(h.snapshot(k)).eigenvalue for k in range(0, len(h), 10)]
    assert np.min(np.diff(lam)) >= -1e-5


def test_lambda_ode_bound_on_sphere():
    h = flow.run_history(RoundSphere(2, 1.0), 0.3)
    lam = np.array([fn.lambda_k(h.snapshot(k)).eigenvalue for k in range(len(h))])
    rate = np.diff(lam) / np.diff(h.times)
    # secant slope of a convex increasing lambda dominates the left-end value of (2/n) lambda^2
    assert np.all(rate >= (2 / 2) * lam[:-1] ** 2 - 1e-9)


def test_mu_negative_and_increasing_on_flat_torus():
    m = ConformalTorus.flat(64, lx=0.5)
    vals = [fn.mu(m, t).value for t in (0.2, 0.05, 0.01)]
    assert vals[-1] < 0 and vals[0] < vals[1] < vals[2]


def test_mu_is_below_random_compatible_W(rng):
    m = bumpy_torus(32)
    tau = 0.5
    r = fn.mu(m, tau)
    assert r.converged and abs(fn.eval_W(m, r.cfg) - r.value) < 1e-7
    for _ in range(20):
        assert r.value <= fn.eval_W(m, fn.normalize_potential(m, fn.random_potential(m, rng), tau)) + 1e-10


# -- diffusion entropy ----------------------------------------------------


def _uniform(w):
    return np.full(w.backend.shape, 1.0 / float(np.sum(w.measure())))


def test_diffusion_entropy_uniform_density():
    m = ConformalTorus.flat(16)
    w = fn.WeightedOperator(m, 0.0, 4.0)
    H, _ = fn.diffusion_entropy(w, _uniform(w), 0.3)
    V = geo.volume(m)
    assert H == pytest.approx(math.log(V) - 2 * math.log(4 * math.pi * 0.3) - 2, abs=1e-12)


def test_diffusion_entropy_rejects_bad_density():
    w = fn.WeightedOperator(ConformalTorus.flat(16), 0.0, 4.0)
    with pytest.raises(ValueError):
        fn.diffusion_entropy(w, 2 * _uniform(w), 0.3)
    with pytest.raises(ValueError):
        fn.WeightedOperator(ConformalTorus.flat(16), 0.0, 2.0)


def _heat_setup(phi_amp=0.1):
    m = ConformalTorus.flat(32)
    X = geo.coordinates(m)
    w = fn.WeightedOperator(m, phi_amp * np.cos(X[..., 1]), 4.0)
    u = np.exp(0.3 * np.sin(X[..., 0]) + 0.2 * np.cos(X[..., 0] + X[..., 1]))
    return w, u / float(np.sum(u * w.measure()))


def test_W_is_time_derivative_of_tH():
    w, u0 = _heat_setup()
    t0 = 0.5
    ts, us = fn.heat_trajectory(w, u0, t0, 0.05)
    k = len(ts) // 2
    tH = [t * fn.diffusion_entropy(w, u, t)[0] for t, u in zip(ts, us)]
    rate = (tH[k + 1] - tH[k - 1]) / (ts[k + 1] - ts[k - 1])
    assert rate == pytest.approx(fn.diffusion_entropy(w, us[k], ts[k])[1], rel=1e-4)


def test_diffusion_W_nonincreasing_flat_zero_potential():
    w, u0 = _heat_setup(0.0)
    ts, us = fn.heat_trajectory(w, u0, 0.5, 0.1)
    W = [fn.diffusion_entropy(w, u, t)[1] for t, u in zip(ts[::10], us[::10])]
    assert np.max(np.diff(W)) <= 1e-12


def test_entropy_dissipation_formula_matches_rate():
    w, u0 = _heat_setup(0.0)
    ts, us = fn.heat_trajectory(w, u0, 0.5, 0.05)
    k = len(ts) // 2
    W = [fn.diffusion_entropy(w, us[j], ts[j])[1] for j in (k - 1, k + 1)]
    rate = (W[1] - W[0]) / (ts[k + 1] - ts[k - 1])
    assert rate == pytest.approx(fn.entropy_dissipation(w, us[k], ts[k]), rel=1e-3)


def test_bakry_emery_trivial_cases():
    T, ev = fn.bakry_emery(fn.WeightedOperator(ConformalTorus.flat(16), 0.0, 3.0))
    assert np.all(T == 0.0)
    T, ev = fn.bakry_emery(fn.WeightedOperator(RoundSphere(2, 2.0), 0.0, 3.0))
    assert ev.min() == pytest.approx(0.25)


def test_bakry_emery_componentwise():
    m = ConformalTorus.flat(32)
    X = geo.coordinates(m)
    phi = 0.1 * np.cos(X[..., 1])
    T, _ = fn.bakry_emery(fn.WeightedOperator(m, phi, 4.0))
    exact_yy = -0.1 * np.cos(X[..., 1]) - (0.1 * np.sin(X[..., 1])) ** 2 / 2.0
    assert np.max(np.abs(T[..., 1, 1] - exact_yy)) < 1e-3
    assert np.max(np.abs(T[..., 0, 0])) < 1e-14
