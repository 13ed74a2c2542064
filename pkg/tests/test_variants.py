import math

import numpy as np
import pytest

from perelman_lab import flow
from perelman_lab import functionals as fn
from perelman_lab import geometry as geo
from perelman_lab import variants as var
from perelman_lab.geometry import ConformalTorus

from conftest import bumpy_torus


def xy(m):
    X = geo.coordinates(m)
    return X[..., 0], X[..., 1]


def sample_A(m):
    x, y = xy(m)
    return np.stack([0.3 * np.sin(y) + 0.1 * np.cos(x + y), 0.2 * np.cos(x)])


# -- List flow --------------------------------------------------------------


def test_list_constant_scalar_reduces_to_ricci(rng):
    m = bumpy_torus(16)
    st = var.ListState(m, np.full(m.shape, -1.3))
    pc = fn.normalize_potential(m, fn.random_potential(m, rng), 0.4)
    assert var.eval_W_list(st, pc) == pytest.approx(fn.eval_W(m, pc), abs=1e-13)
    assert var.production_W_list(st, pc) == pytest.approx(fn.production_W(m, pc), abs=1e-12)
    assert st.defect_rate() == 0.0
    dt = 0.5 * flow.cfl_limit(m)
    assert np.max(np.abs(var.step_list(st, dt).metric.u - flow.step_forward(m, dt).u)) < 1e-14


def test_list_S_definition():
    m = bumpy_torus(16)
    x, y = xy(m)
    st = var.ListState(m, 0.2 * np.sin(x))
    assert np.allclose(st.S, geo.sym_trace(m, st.S_tensor), atol=1e-12)


def test_list_production_nonnegative(rng):
    m = bumpy_torus(16)
    for _ in range(5):
        st = var.ListState(m.with_u(m.u + fn.random_potential(m, rng, amplitude=0.1)), fn.random_potential(m, rng, amplitude=0.2))
        pc = fn.normalize_potential(st.metric, fn.random_potential(m, rng), float(rng.uniform(0.2, 1.0)))
        for mode in var.LIST_MODES:
            assert var.production_W_list(st, pc, mode) >= 0.0
    with pytest.raises(ValueError):
        var.production_W_list(st, pc, "other")


def test_list_defect_guard():
    m = ConformalTorus.flat(16)
    x, _ = xy(m)
    st = var.ListState(m, 0.5 * np.sin(x))
    with pytest.raises(var.DefectError) as e:
        var.run_list(st, 0.5, defect_tol=1e-4)
    assert e.value.defect > 1e-4


def test_list_scalar_maximum_principle():
    m = bumpy_torus(16)
    x, y = xy(m)
    run = var.run_list(var.ListState(m, 0.03 * np.sin(x + y) + 0.02 * np.cos(y)), 0.1)
    peaks = [np.max(np.abs(s.u)) for s in run.states]
    assert np.all(np.diff(peaks) <= 0.0)


def test_list_trajectory_rate_matches_production():
    m = bumpy_torus(32)
    x, y = xy(m)
    run = var.run_list(var.ListState(m, 0.03 * np.sin(x + y) + 0.02 * np.cos(y)), 0.1)
    tr = var.list_trajectory(run, 1.0, np.zeros(m.shape))
    P = tr["production"][1:-1]
    assert np.all(tr["production"] >= 0.0)
    assert np.max(np.abs(tr["rate_corrected"] - P) / P) < 1e-3
    assert np.max(np.abs(tr["mass"] - 1.0)) < 1e-6


def test_mu_list_reduces(rng):
    m = bumpy_torus(16)
    st = var.ListState(m, np.zeros(m.shape))
    assert var.mu_list(st, 0.5).value == pytest.approx(fn.mu(m, 0.5).value, abs=1e-10)


# -- Ricci Yang-Mills -------------------------------------------------------


def test_rym_zero_connection_reduces(rng):
    m = bumpy_torus(16)
    st = var.RymState.trivial(m)
    f = fn.random_potential(m, rng)
    pc = fn.normalize_potential(m, f, 0.5)
    assert var.eval_F_rym(st, f) == pytest.approx(fn.eval_F(m, f), abs=1e-13)
    assert var.eval_W_rym(st, pc) == pytest.approx(fn.eval_W(m, pc), abs=1e-13)
    assert var.production_F_rym(st, f) == pytest.approx(fn.production_F(m, f), abs=1e-12)
    assert var.lambda_rym(st).eigenvalue == pytest.approx(fn.lambda_k(m).eigenvalue, abs=1e-10)


def test_rym_uniform_curvature_closed_form():
    c = 0.8
    m = ConformalTorus.flat(16)
    st = var.RymState.trivial(m, flux=c / math.sqrt(2.0))
    f0 = np.full(m.shape, math.log(geo.volume(m)))
    assert np.allclose(st.F_norm_sq, c * c)
    assert var.eval_F_rym(st, f0) == pytest.approx(-c * c / 4, abs=1e-12)
    assert var.lambda_rym(st).eigenvalue == pytest.approx(-c * c / 4, abs=1e-9)


def test_gauge_invariance(rng):
    m = bumpy_torus(16)
    a = var.RymState(m, sample_A(m))
    b = a.gauge(fn.random_potential(m, rng))
    assert np.max(np.abs(a.F12 - b.F12)) < 1e-13
    dt = flow.cfl_limit(m)
    for _ in range(20):
        a, b = var.step_rym(a, dt), var.step_rym(b, dt)
    assert np.max(np.abs(a.F12 - b.F12)) < 1e-12
    assert np.max(np.abs(a.metric.u - b.metric.u)) < 1e-12


def test_yang_mills_energy_decreases():
    m = ConformalTorus.flat(16)
    s = var.RymState(m, sample_A(m))
    E = [var.ym_energy(s)]
    for _ in range(30):
        s = var.step_rym(s, flow.cfl_limit(m), freeze_metric=True)
        E.append(var.ym_energy(s))
    assert np.all(np.diff(E) <= 0.0)
    assert np.array_equal(s.metric.u, m.u)


@pytest.mark.parametrize("seed", range(4))
def test_rym_variations_match_differences(seed):
    rng = np.random.default_rng(seed)
    m = bumpy_torus(16)
    f = fn.random_potential(m, rng)
    v = fn.conformal_variation(m, fn.random_potential(m, rng), fn.random_potential(m, rng), float(rng.normal()))
    alpha = np.stack([fn.random_potential(m, rng), fn.random_potential(m, rng)])
    st = var.RymState(m, np.stack([fn.random_potential(m, rng), fn.random_potential(m, rng)]), 0.2)
    pc = fn.normalize_potential(m, f, float(rng.uniform(0.2, 1.0)))
    a, b = var.delta_F_rym(st, f, v, alpha), var.fd_delta_F_rym(st, f, v, alpha)
    assert abs(a - b) <= 1e-6 * max(1.0, abs(b))
    a, b = var.delta_W_rym(st, pc, v, alpha), var.fd_delta_W_rym(st, pc, v, alpha)
    assert abs(a - b) <= 1e-6 * max(1.0, abs(b))


def test_codifferential_flat_weight():
    m = bumpy_torus(16)
    st = var.RymState(m, sample_A(m))
    P = st.Phi
    expect = np.stack([geo.dy_c(P, m.hy), -geo.dx_c(P, m.hx)])
    assert np.allclose(st.codiff(0.0), expect, atol=1e-14)
    assert np.allclose(st.codiff(np.full(m.shape, 2.0)), expect, atol=1e-14)


def test_rym_F_trajectory():
    m = bumpy_torus(32)
    run = var.run_rym(var.RymState(m, sample_A(m)), 0.1)
    tr = var.rym_trajectory(run, np.zeros(m.shape))
    P = tr["production"][1:-1]
    assert np.all(tr["production"] >= 0.0)
    assert np.max(np.abs(tr["rate"] - P) / P) < 1e-3
    assert np.min(np.diff(tr["F"])) >= -1e-5


def test_rym_W_derived_rate():
    m = bumpy_torus(32)
    run = var.run_rym(var.RymState(m, sample_A(m)), 0.1)
    tw = var.rym_trajectory(run, np.zeros(m.shape), tau_bar=1.0)
    D = tw["derived"][1:-1]
    assert np.max(np.abs(tw["rate"] - D)) <= 1e-3 * np.max(np.abs(D))
    assert np.max(np.abs(tw["mass"] - 1.0)) < 1e-6


def test_low_energy_check():
    m = ConformalTorus.flat(16)
    s = var.RymState(m, sample_A(m))
    states = [s]
    for _ in range(10):
        states.append(var.step_rym(states[-1], flow.cfl_limit(m), freeze_metric=True))
    out = var.low_energy_check(states, 10.0, w_rates=[-1.0, 0.5, 0.2], w_times=[0.0, 0.1, 0.2])
    assert out["t0"] == 0.1 and out["decreasing_tail"]
    assert var.low_energy_check(states, 10.0, [-1.0], [0.0])["t0"] is None
    with pytest.raises(ValueError):
        var.low_energy_check(states, 0.0)
