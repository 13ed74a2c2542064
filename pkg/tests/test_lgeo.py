import math

import numpy as np
import pytest

from perelman_lab import flow, lgeo
from perelman_lab import geometry as geo
from perelman_lab.geometry import ConformalTorus, Euclidean, RoundSphere

from conftest import bumpy_torus

P_T, Q_T = np.array([1.0, 2.0]), np.array([1.6, 2.5])
NORTH = np.array([0.0, 0.0, 1.0])


def sphere_point(theta):
    return np.array([math.sin(theta), 0.0, math.cos(theta)])


@pytest.fixture(scope="module")
def flat2():
    return lgeo.Spacetime(flow.run_history(Euclidean(2), 1.0, flow.FlowConfig(dt=0.125)))


@pytest.fixture(scope="module")
def sphere():
    return lgeo.Spacetime(flow.run_history(RoundSphere(2, 1.0), 0.3))


@pytest.fixture(scope="module")
def torus():
    return lgeo.Spacetime(flow.run_history(bumpy_torus(32), 0.5))


# -- length and energy ----------------------------------------------------


def test_straight_path_length_flat(flat2):
    w = np.array([0.6, -0.2])
    s = np.linspace(0.0, 1.0, 65)
    path = lgeo.LPath(s, s[:, None] * w[None, :], np.broadcast_to(w, (65, 2)).copy(), 1.0)
    assert lgeo.l_length(flat2, path) == pytest.approx(0.5 * (w @ w), abs=1e-14)


def test_l_length_simpson_richardson_on_torus(torus):
    coarse = lgeo.test_path(torus, P_T, Q_T, 0.2, coeffs=[[0.1, -0.05]], steps=64)
    fine = lgeo.test_path(torus, P_T, Q_T, 0.2, coeffs=[[0.1, -0.05]], steps=128)
    finer = lgeo.test_path(torus, P_T, Q_T, 0.2, coeffs=[[0.1, -0.05]], steps=256)
    a, b, c = (lgeo.l_length(torus, p) for p in (coarse, fine, finer))
    assert abs(b - c) < abs(a - b) / 8


def test_dirichlet_energy():
    flat = ConformalTorus.flat(16)
    t = np.linspace(0.0, 1.0, 33)
    d = np.array([0.3, 0.4])
    x = np.array([1.0, 1.0]) + t[:, None] * d
    assert lgeo.dirichlet_energy(flat, t, x, np.broadcast_to(d, x.shape)) == pytest.approx(0.125, abs=1e-14)
    assert lgeo.dirichlet_energy(flat, t, np.ones((33, 2)), np.zeros((33, 2))) == 0.0


def test_dirichlet_energy_great_circle_minimises(rng):
    s = RoundSphere(2, 1.0)
    t = np.linspace(0.0, 1.0, 129)
    ang = 1.0 * t
    x = np.stack([np.sin(ang), 0 * ang, np.cos(ang)], -1)
    E0 = lgeo.dirichlet_energy(s, t, x, np.stack([np.cos(ang), 0 * ang, -np.sin(ang)], -1))
    for _ in range(10):
        a = rng.normal(size=3) * 0.1
        bump = np.sin(math.pi * t)
        y = x + bump[:, None] * a
        dy = np.gradient(y, t, axis=0, edge_order=2)
        ny = np.linalg.norm(y, axis=-1, keepdims=True)
        z = y / ny
        dz = (dy - np.sum(z * dy, -1, keepdims=True) * z) / ny
        assert lgeo.dirichlet_energy(s, t, z, dz) > E0


# -- shooting and boundary value problems ---------------------------------


def test_zero_shot_is_constant_without_curvature(flat2):
    path = lgeo.shoot(flat2, np.array([0.3, 0.1]), np.zeros(2), 0.5)
    assert np.max(np.abs(path.x - [0.3, 0.1])) < 1e-14


def test_zero_shot_drifts_down_curvature_gradient(torus):
    path = lgeo.shoot(torus, P_T, np.zeros(2), 0.2)
    assert np.max(np.abs(path.x - P_T)) > 1e-6


def test_flat_shot_closed_form(flat2):
    path = lgeo.shoot(flat2, np.zeros(2), np.array([1.0, 0.0]), 1.0)
    assert np.allclose(path.endpoint, [2.0, 0.0], atol=1e-13)
    assert np.allclose(path.x, 2 * path.s[:, None] * np.array([1.0, 0.0]), atol=1e-13)


def test_flat_bvp_values(flat2):
    path = lgeo.solve_bvp(flat2, np.zeros(2), np.array([2.0, 0.0]), 1.0)
    assert lgeo.l_length(flat2, path) == pytest.approx(2.0, abs=1e-10)
    rf = lgeo.reduced_field(flat2, np.zeros(2), 1.0, [[2.0, 0.0], [0.0, 0.0]], workers=1)
    assert rf.l[0] == pytest.approx(1.0, abs=1e-10) and abs(rf.L[1]) < 1e-12


def test_flat_reduced_field_grid(flat2):
    rng = np.random.default_rng(3)
    q = rng.normal(size=(12, 2))
    rf = lgeo.reduced_field(flat2, np.zeros(2), 0.5, q, workers=1)
    assert np.max(np.abs(rf.l - np.sum(q * q, -1) / 2.0)) < 1e-8


def test_sphere_radial_shot_matches_closed_form(sphere):
    tb = 0.2
    rf = lgeo.reduced_field(sphere, NORTH, tb, [sphere_point(0.7)], workers=1)
    assert rf.L[0] == pytest.approx(float(lgeo.sphere_reduced_length(sphere, 0.7, tb)), abs=1e-8)


def test_bvp_beats_random_paths_on_torus(torus, rng):
    tb = 0.2
    path = lgeo.solve_bvp(torus, P_T, Q_T, tb)
    L = lgeo.l_length(torus, path)
    assert np.linalg.norm(path.endpoint - Q_T) <= 1e-8
    for _ in range(25):
        tp = lgeo.test_path(torus, P_T, Q_T, tb, coeffs=rng.normal(size=(2, 2)) * 0.2)
        assert L <= lgeo.l_length(torus, tp) + 1e-8


def test_shooting_round_trip(torus, rng):
    tb = 0.2
    for _ in range(5):
        v = rng.normal(size=2) * 0.5
        shot = lgeo.shoot(torus, P_T, v, tb)
        path = lgeo.solve_bvp(torus, P_T, torus.wrap(shot.endpoint), tb)
        assert lgeo.l_length(torus, path) <= lgeo.l_length(torus, shot) + 1e-8


def test_geodesic_residual_small(torus, sphere):
    assert lgeo.geodesic_residual(torus, lgeo.solve_bvp(torus, P_T, Q_T, 0.2)) < 1e-6
    assert lgeo.geodesic_residual(sphere, lgeo.solve_bvp(sphere, NORTH, sphere_point(0.7), 0.2)) < 1e-6


def test_minimum_reduced_distance_bounds(torus):
    tb = 0.2
    X = np.arange(0, 32, 4) * (2 * math.pi / 32)
    q = np.stack(np.meshgrid(X, X, indexing="ij"), -1).reshape(-1, 2)
    rf = lgeo.reduced_field(torus, P_T, tb, q)
    assert np.nanmin(rf.l) <= 1.0 + 0.05
    assert np.nanmin(rf.L) <= 2 * math.sqrt(tb) + 0.05


def test_worker_count_does_not_change_results(torus, monkeypatch):
    X = np.linspace(0.0, 6.0, 7)
    q = np.stack(np.meshgrid(X, X, indexing="ij"), -1).reshape(-1, 2)
    a = lgeo.reduced_field(torus, P_T, 0.2, q, workers=1)
    for w in (3, 7):
        b = lgeo.reduced_field(torus, P_T, 0.2, q, workers=w)
        assert np.array_equal(a.L, b.L) and np.array_equal(a.v, b.v)
    one = lgeo.reduced_field(torus, P_T, 0.2, q[5:6], workers=1)
    assert np.array_equal(one.L, a.L[5:6])
    monkeypatch.setenv("PERELMAN_LAB_THREADS", "1")
    assert lgeo.worker_count() == 1


# -- Harnack quantity, identities ----------------------------------------


def test_harnack_flat_is_zero(flat2):
    path = lgeo.solve_bvp(flat2, np.zeros(2), np.array([1.0, 0.5]), 0.5)
    hd = lgeo.harnack_data(flat2, path)
    assert hd.K == 0.0 and np.all(hd.H[1:] == 0.0)


def test_harnack_rejects_non_geodesic(torus):
    with pytest.raises(ValueError):
        lgeo.harnack_data(torus, lgeo.test_path(torus, P_T, Q_T, 0.2, coeffs=[[0.3, 0.3]]))


def test_harnack_sphere_step_halving(sphere):
    tb = 0.2
    v = lgeo.solve_bvp(sphere, NORTH, sphere_point(0.7), tb).v
    K = [lgeo.harnack_data(sphere, lgeo.shoot(sphere, NORTH, v, tb, steps=n), check=False).K for n in (64, 128, 256)]
    assert abs(K[1] - K[2]) < abs(K[0] - K[1]) / 8 + 1e-14


def test_flat_identities_exact(flat2):
    r = lgeo.identity_residuals(flat2, np.zeros(2), np.array([0.8, -0.3]), 0.5)
    assert abs(r["L_grad"]) < 1e-10 and abs(r["l_grad"]) < 1e-10
    # time derivatives are centred differences: error O(dtau^2)
    s = lgeo.identity_residuals(flat2, np.zeros(2), np.array([0.8, -0.3]), 0.5, delta=0.01)
    for key in ("L_time", "l_time"):
        assert abs(r[key]) < 1e-4 and 3.8 < r[key] / s[key] < 4.2


def test_sphere_identities(sphere):
    r = lgeo.identity_residuals(sphere, NORTH, sphere_point(0.7), 0.2)
    for key in ("L_grad", "L_time", "l_time", "l_grad"):
        assert abs(r[key]) < 1e-3
    assert r["l_lap_slack"] >= -1e-3 and r["L_lap_slack"] >= -1e-3


def test_torus_identity_converges_second_order(torus):
    a = lgeo.identity_residuals(torus, P_T, Q_T, 0.2, delta=0.04)
    b = lgeo.identity_residuals(torus, P_T, Q_T, 0.2, delta=0.02)
    for key in ("L_grad", "l_time"):
        assert abs(b[key]) < 1e-3
        assert math.log2(abs(a[key]) / abs(b[key])) > 1.9


# -- frames, Hessian bound, Jacobi fields ---------------------------------


def test_transport_frame_inner_products(sphere, torus):
    for st, p, q in ((sphere, NORTH, sphere_point(0.7)), (torus, P_T, Q_T)):
        fr = lgeo.transport_frame(st, lgeo.solve_bvp(st, p, q, 0.2, with_frame=True))
        assert fr.max_deviation < 1e-8
        assert np.max(np.abs(fr.Y[:, 0])) < 1e-12


def test_flat_frame_closed_form(flat2):
    path = lgeo.solve_bvp(flat2, np.zeros(2), np.array([0.5, 0.5]), 0.5, with_frame=True)
    fr = lgeo.transport_frame(flat2, path)
    scale = np.sqrt(path.tau / 0.5)
    for i in range(2):
        assert np.allclose(np.abs(fr.Y[i]) @ np.ones(2), scale, atol=1e-12) or np.allclose(np.linalg.norm(fr.Y[i], axis=-1), scale, atol=1e-12)


def test_hessian_bound(flat2, sphere):
    h = lgeo.hessian_bound_check(flat2, np.zeros(2), np.array([0.5, 0.2]), 0.5)
    assert abs(h["min_slack"]) < 1e-6 and abs(h["laplacian_slack"]) < 1e-6
    h = lgeo.hessian_bound_check(sphere, NORTH, sphere_point(0.7), 0.2)
    assert h["min_slack"] >= -1e-3 and h["laplacian_slack"] >= -1e-3


def test_flat_soliton_criterion(flat2):
    # Ric + Hess L / (2 sqrt(tb)) - g / (2 tb) vanishes for L = |q|^2 / (2 sqrt(tb))
    tb = 0.5
    h = lgeo.hessian_bound_check(flat2, np.zeros(2), np.array([0.3, -0.6]), tb)
    for d in h["directions"]:
        assert abs(d["hess"] / (2 * math.sqrt(tb)) - 1 / (2 * tb)) < 1e-6


def test_flat_jacobi_fields_linear_in_s(flat2):
    path = lgeo.shoot(flat2, np.zeros(2), np.array([0.3, 0.1]), 0.5)
    Y = lgeo.ljacobi(flat2, path, np.array([1.0, -2.0]))
    assert np.allclose(Y, 2 * path.s[:, None] * np.array([1.0, -2.0]), atol=1e-12)


def test_sphere_jacobi_matches_geodesic_family(sphere):
    tb = 0.2
    path = lgeo.solve_bvp(sphere, NORTH, sphere_point(0.7), tb)
    seed = np.array([0.0, 1.0])
    Y = lgeo.ljacobi(sphere, path, seed)
    eps = 1e-6
    a = lgeo.shoot(sphere, NORTH, path.v + eps * seed, tb).x
    b = lgeo.shoot(sphere, NORTH, path.v - eps * seed, tb).x
    assert np.max(np.abs((a - b) / (2 * eps) - Y)) < 1e-4


def test_jacobi_pairing_symmetric(torus):
    path = lgeo.solve_bvp(torus, P_T, Q_T, 0.2)
    s = path.s
    sb = s[-1]
    A = np.sin(math.pi * s / sb)[:, None] * np.array([1.0, 0.0])
    B = (s * (sb - s))[:, None] * np.array([0.3, 1.0])
    a, b = lgeo.jacobi_pairing(torus, path, A, B), lgeo.jacobi_pairing(torus, path, B, A)
    assert abs(a - b) <= 1e-4 * abs(a)


def test_first_variation_matches_difference(torus):
    tb = 0.2
    path = lgeo.test_path(torus, P_T, Q_T, tb, coeffs=[[0.2, 0.1]])
    bump = np.sin(math.pi * path.s / path.s[-1])
    Y = bump[:, None] * np.array([0.4, -0.7])
    dY = (math.pi / path.s[-1]) * np.cos(math.pi * path.s / path.s[-1])[:, None] * np.array([0.4, -0.7])
    eps = 1e-5

    def L(e):
        return lgeo.l_length(torus, lgeo.LPath(path.s, path.x + e * Y, path.w + e * dY, tb))

    fd = (L(eps) - L(-eps)) / (2 * eps)
    assert lgeo.first_variation(torus, path, Y) == pytest.approx(fd, rel=1e-4)


# -- speed bound and reduced volume ---------------------------------------


def test_speed_bounds(flat2, sphere, rng):
    path = lgeo.shoot(flat2, np.zeros(2), np.array([0.4, 0.2]), 0.5)
    r = lgeo.speed_bound_check(flat2, path)
    assert r["speed_ok"] and r["max_speed"] == pytest.approx(0.2, abs=1e-12)
    for _ in range(5):
        path = lgeo.shoot(sphere, NORTH, rng.normal(size=2) * 0.5, 0.2)
        r = lgeo.speed_bound_check(sphere, path)
        assert r["speed_ok"] and r["speed_at_some_time_ok"] and r["distance_slack"] >= 0


def test_flat_reduced_volume(flat2):
    res = lgeo.reduced_volume(flat2, np.zeros(2), [0.25, 0.5, 1.0])
    for row in res["rows"]:
        assert row["V"] == pytest.approx(4 * math.pi, abs=1e-6)


def test_sphere_reduced_volume_monotone_and_bounded(sphere):
    res = lgeo.reduced_volume(sphere, NORTH, [0.05, 0.1, 0.2])
    V = [r["V"] for r in res["rows"]]
    assert np.all(np.diff(V) <= 1e-4) and max(V) <= 4 * math.pi + 1e-4
    assert all(r["min_l"] <= 1.05 for r in res["rows"])


def test_export_csv(flat2):
    rf = lgeo.reduced_field(flat2, np.zeros(2), 0.5, [[0.1, 0.2]], workers=1)
    text = lgeo.export_reduced_field_csv(rf)
    assert text.splitlines()[0].startswith("qx,qy,L,l")
    vol = lgeo.export_volume_csv(lgeo.reduced_volume(flat2, np.zeros(2), [0.5]))
    assert vol.splitlines()[0] == "tau,V_tilde"
