"""Extended flows on the conformal torus: the List flow and the Ricci Yang-Mills flow.

Conventions
-----------
List flow (metric ``g = e^{2c} delta``, scalar ``u``):

* ``S_ij = Ric_ij - 2 du (x) du``, ``S = tr_g S_ij = R - 2 |du|^2``.
* ``dg/dt = -2 S_ij``, ``du/dt = Delta u``. The metric velocity has a
  trace-free part ``4 TF(du (x) du)`` the conformal torus cannot carry. Its
  trace is kept exactly (``dc/dt = -S/2``); the dropped part is accumulated
  as a relative defect ``int_0^t |4 TF(du (x) du)|_{L^2} / |g|_{L^2} dt``.
* ``W_list = int [tau (S + |df|^2) + f - n] (4 pi tau)^{-n/2} e^{-f} dV``.

Ricci Yang-Mills flow (U(1) connection ``A = (A_1, A_2)`` on nodes):

* ``F_12 = flux + D_x A_2 - D_y A_1`` with centred differences ``D``, so a
  discrete gauge change ``A + D chi`` leaves ``F`` unchanged to roundoff.
  ``flux`` is the constant curvature of a fixed reference connection.
* ``Phi = e^{-2c} F_12`` (the Hodge dual), ``|F|^2 = g^{ik} g^{jl} F_ij F_kl = 2 Phi^2``
  and ``eta_ij = g^{kl} F_ik F_jl = Phi^2 g_ij``.
* ``dg/dt = -2 Ric + eta`` is conformal in two dimensions, so the projection
  defect vanishes identically. ``dA/dt = -d*F = (-D_y Phi, D_x Phi)``.
* ``F_rym = int (R - |F|^2/4 + |df|^2) e^{-f} dV`` and
  ``W_rym = int (tau (|df|^2 + R + |F|^2/4) + f - n) (4 pi tau)^{-n/2} e^{-f} dV``.
* The weighted codifferential is ``d*_f F = e^{f} d*(e^{-f} F)
  = (D_y Phi - Phi D_y f, -D_x Phi + Phi D_x f)``.

The first variations are written in summation-by-parts form and are the
exact derivatives of the discrete functionals.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import functionals as fn
from . import geometry as geo
from .flow import CFLViolation, cfl_limit
from .geometry import ConformalTorus

__all__ = [
    "CoupledRun",
    "DefectError",
    "ListState",
    "RymState",
    "delta_F_rym",
    "delta_W_rym",
    "eval_F_rym",
    "eval_W_list",
    "eval_W_rym",
    "fd_delta_F_rym",
    "fd_delta_W_rym",
    "lambda_rym",
    "list_trajectory",
    "low_energy_check",
    "mu_list",
    "production_F_rym",
    "production_W_list",
    "rym_trajectory",
    "run_list",
    "run_rym",
    "step_list",
    "step_rym",
    "w_list_integral",
    "w_rym_integral",
    "w_rym_rate_derived",
    "w_rym_rate_bracket",
    "ym_energy",
]

DEFECT_TOL = 1e-3


class DefectError(RuntimeError):
    """The dropped trace-free metric velocity exceeded its threshold."""

    def __init__(self, message: str, defect: float):
        super().__init__(message)
        self.defect = defect


def _require_torus(m):
    if not isinstance(m, ConformalTorus):
        raise TypeError("the extended flows are implemented on the conformal torus")


def _rk4(rhs, y, dt):
    k1 = rhs(y)
    k2 = rhs(y + 0.5 * dt * k1)
    k3 = rhs(y + 0.5 * dt * k2)
    k4 = rhs(y + dt * k3)
    return y + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _check_dt(m, dt, safety):
    if not dt > 0:
        raise ValueError("dt must be positive")
    limit = cfl_limit(m, safety)
    if dt > limit * (1.0 + 1e-12):
        raise CFLViolation(f"dt = {dt!r} exceeds the stability bound {limit!r}")


# --------------------------------------------------------------------------
# List flow
# --------------------------------------------------------------------------


def _du_tensor(m: ConformalTorus, u) -> np.ndarray:
    """``du (x) du`` whose trace is exactly ``|du|^2_g`` of :func:`geometry.grad_norm_sq`."""
    hx, hy = m.hx, m.hy
    fx = np.roll(u, -1, 0) - u
    fy = np.roll(u, -1, 1) - u
    D = np.empty(m.shape + (2, 2))
    D[..., 0, 0] = (fx * fx + np.roll(fx, 1, 0) ** 2) / (2.0 * hx * hx)
    D[..., 1, 1] = (fy * fy + np.roll(fy, 1, 1) ** 2) / (2.0 * hy * hy)
    off = geo.dx_c(u, hx) * geo.dy_c(u, hy)
    D[..., 0, 1] = off
    D[..., 1, 0] = off
    return D


def _trace_free(m, T):
    return T - (0.5 * geo.sym_trace(m, T))[..., None, None] * geo.metric(m)


@dataclass(frozen=True)
class ListState:
    """Metric and scalar of the List flow.

    ``defect`` is the accumulated relative trace-free defect and ``t`` the
    flow time.
    """

    metric: ConformalTorus
    u: np.ndarray
    defect: float = 0.0
    t: float = 0.0

    def __post_init__(self):
        _require_torus(self.metric)
        u = np.asarray(self.u, dtype=float)
        if u.shape != self.metric.shape:
            raise ValueError("u must live on the metric grid")
        object.__setattr__(self, "u", u)

    @property
    def du_du(self) -> np.ndarray:
        return _du_tensor(self.metric, self.u)

    @property
    def S_tensor(self) -> np.ndarray:
        return geo.ricci(self.metric) - 2.0 * self.du_du

    @property
    def S(self) -> np.ndarray:
        return geo.scalar_curvature(self.metric) - 2.0 * geo.grad_norm_sq(self.metric, self.u)

    def defect_rate(self) -> float:
        """``|4 TF(du (x) du)|_{L^2} / |g|_{L^2}``: dropped velocity per unit time."""
        m = self.metric
        tf = _trace_free(m, 4.0 * self.du_du)
        num = geo.integrate(m, geo.sym_norm_sq(m, tf))
        return math.sqrt(num / (m.n * geo.volume(m)))


def _list_rhs(hx, hy):
    def rhs(y):
        c, u = y
        e = np.exp(-2.0 * c)
        dc = e * (geo.flat_laplacian(c, hx, hy) + geo.flat_grad_sq(u, hx, hy))
        du = e * geo.flat_laplacian(u, hx, hy)
        return np.stack([dc, du])

    return rhs


def step_list(st: ListState, dt: float, defect_tol: float = DEFECT_TOL, cfl_safety: float = 0.2) -> ListState:
    """One RK4 step of the conformally projected List flow.

    Raises
    ------
    CFLViolation
        ``dt`` above the explicit diffusion bound.
    DefectError
        The accumulated trace-free defect exceeds ``defect_tol``.
    """
    m = st.metric
    _check_dt(m, dt, cfl_safety)
    defect = st.defect + dt * st.defect_rate()
    if defect > defect_tol:
        raise DefectError(f"trace-free defect {defect!r} exceeds {defect_tol!r} at t = {st.t!r}", defect)
    y = _rk4(_list_rhs(m.hx, m.hy), np.stack([m.u, st.u]), dt)
    return ListState(m.with_u(y[0]), y[1], defect, st.t + dt)


def w_list_integral(st: ListState, f, tau: float) -> float:
    """``W_list`` without the compatibility requirement."""
    m = st.metric
    c = (4.0 * math.pi * tau) ** (-0.5 * m.n)
    du2 = geo.grad_norm_sq(m, st.u)
    return fn.w_integral(m, f, tau) - 2.0 * tau * c * geo.integrate(m, du2 * np.exp(-geo.sample(m, f)))


def eval_W_list(st: ListState, cfg: fn.PotentialConfig) -> float:
    """``W(g, u, f, tau)`` for a compatible configuration."""
    fn._require_compatible(st.metric, cfg)
    return w_list_integral(st, cfg.f, cfg.tau)


LIST_MODES = ("plain", "modified")


def production_W_list(st: ListState, cfg: fn.PotentialConfig, mode: str = "plain") -> float:
    """``int (2 tau |S_ij + Hess f - g/2tau|^2 + 4 tau |Delta u - <du, df>|^2) dm``.

    ``mode`` selects the system the rate refers to: ``plain`` (unmodified
    metric, ``df/dt = -Delta f + |df|^2 - S + n/2tau``) or ``modified``
    (metric and ``u`` moved by ``grad f``). Both systems have the same
    integrand.
    """
    if mode not in LIST_MODES:
        raise ValueError(f"unknown mode {mode!r}")
    fn._require_compatible(st.metric, cfg)
    return _production_list(st, cfg.f, cfg.tau)


def _production_list(st: ListState, f, tau: float) -> float:
    m = st.metric
    c = (4.0 * math.pi * tau) ** (-0.5 * m.n)
    T = st.S_tensor + geo.hessian(m, f) - geo.metric(m) / (2.0 * tau)
    q = geo.laplace_beltrami(m, st.u) - geo.grad_dot(m, st.u, f)
    dens = 2.0 * tau * geo.sym_norm_sq(m, T) + 4.0 * tau * q * q
    return c * geo.integrate(m, dens * np.exp(-geo.sample(m, f)))


def _list_projection_correction(st: ListState, f, tau: float) -> float:
    """Rate of ``W_list`` along the dropped velocity ``4 TF(du (x) du)``, sign reversed.

    Adding this to the measured rate along the projected flow recovers the
    rate along the full tensor flow.
    """
    m = st.metric
    c = (4.0 * math.pi * tau) ** (-0.5 * m.n)
    v = _trace_free(m, 4.0 * st.du_du)
    pair = geo.sym_pair(m, v, st.S_tensor + geo.hessian(m, f))
    return tau * c * geo.integrate(m, pair * np.exp(-geo.sample(m, f)))


def mu_list(st: ListState, tau: float, **kw) -> fn.MuResult:
    """``inf W_list`` over compatible potentials (``S`` replaces ``R``)."""
    return fn.mu(st.metric, tau, potential=st.S, **kw)


# --------------------------------------------------------------------------
# Ricci Yang-Mills flow
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class RymState:
    """Metric and U(1) connection of the Ricci Yang-Mills flow.

    ``A`` has shape ``(2, nx, ny)``; ``flux`` is the constant curvature of the
    reference connection.
    """

    metric: ConformalTorus
    A: np.ndarray
    flux: float = 0.0
    t: float = 0.0

    def __post_init__(self):
        _require_torus(self.metric)
        A = np.asarray(self.A, dtype=float)
        if A.shape != (2,) + self.metric.shape:
            raise ValueError("A must have shape (2, nx, ny)")
        object.__setattr__(self, "A", A)

    @classmethod
    def trivial(cls, m: ConformalTorus, flux: float = 0.0) -> "RymState":
        return cls(m, np.zeros((2,) + m.shape), flux)

    def gauge(self, chi) -> "RymState":
        """``A + D chi``."""
        m = self.metric
        chi = np.asarray(chi, dtype=float)
        dA = np.stack([geo.dx_c(chi, m.hx), geo.dy_c(chi, m.hy)])
        return replace(self, A=self.A + dA)

    @property
    def F12(self) -> np.ndarray:
        return _curvature(self.A, self.flux, self.metric.hx, self.metric.hy)

    @property
    def Phi(self) -> np.ndarray:
        return np.exp(-2.0 * self.metric.u) * self.F12

    @property
    def F_norm_sq(self) -> np.ndarray:
        return 2.0 * self.Phi**2

    @property
    def eta(self) -> np.ndarray:
        return (self.Phi**2)[..., None, None] * geo.metric(self.metric)

    def codiff(self, f=0.0) -> np.ndarray:
        """Weighted codifferential ``d*_f F`` as covector components ``(2, nx, ny)``."""
        m = self.metric
        P = self.Phi
        fv = np.broadcast_to(geo.sample(m, f), m.shape)
        return np.stack(
            [
                geo.dy_c(P, m.hy) - P * geo.dy_c(fv, m.hy),
                -geo.dx_c(P, m.hx) + P * geo.dx_c(fv, m.hx),
            ]
        )


def _curvature(A, flux, hx, hy):
    return flux + geo.dx_c(A[1], hx) - geo.dy_c(A[0], hy)


def _covector_norm_sq(m, w) -> np.ndarray:
    return np.exp(-2.0 * m.u) * (w[0] ** 2 + w[1] ** 2)


def ym_energy(st: RymState) -> float:
    """``int |F|^2 dV``."""
    return geo.integrate(st.metric, st.F_norm_sq)


def _rym_rhs(hx, hy, flux, freeze_metric):
    def rhs(y):
        c, A1, A2 = y
        e = np.exp(-2.0 * c)
        P = e * _curvature((A1, A2), flux, hx, hy)
        if freeze_metric:
            dc = np.zeros_like(c)
        else:
            dc = e * geo.flat_laplacian(c, hx, hy) + 0.5 * P * P
        return np.stack([dc, -geo.dy_c(P, hy), geo.dx_c(P, hx)])

    return rhs


def step_rym(st: RymState, dt: float, freeze_metric: bool = False, cfl_safety: float = 0.2) -> RymState:
    """One RK4 step of ``dg/dt = -2 Ric + eta``, ``dA/dt = -d*F``.

    ``freeze_metric`` holds ``g`` fixed, giving the Yang-Mills heat flow.
    The metric velocity is pure trace, so no projection defect arises.
    """
    m = st.metric
    _check_dt(m, dt, cfl_safety)
    y = _rk4(_rym_rhs(m.hx, m.hy, st.flux, freeze_metric), np.stack([m.u, st.A[0], st.A[1]]), dt)
    return RymState(m.with_u(y[0]), y[1:], st.flux, st.t + dt)


def eval_F_rym(st: RymState, f) -> float:
    """``int (R - |F|^2/4 + |df|^2) e^{-f} dV``."""
    m = st.metric
    extra = geo.integrate(m, 0.25 * st.F_norm_sq * np.exp(-geo.sample(m, f)))
    return fn.eval_F(m, f) - extra


def w_rym_integral(st: RymState, f, tau: float) -> float:
    """``W_rym`` without the compatibility requirement."""
    m = st.metric
    c = (4.0 * math.pi * tau) ** (-0.5 * m.n)
    extra = geo.integrate(m, 0.25 * st.F_norm_sq * np.exp(-geo.sample(m, f)))
    return fn.w_integral(m, f, tau) + tau * c * extra


def eval_W_rym(st: RymState, cfg: fn.PotentialConfig) -> float:
    """``W(g, A, f, tau)`` for a compatible configuration."""
    fn._require_compatible(st.metric, cfg)
    return w_rym_integral(st, cfg.f, cfg.tau)


def _alpha_array(st: RymState, alpha) -> np.ndarray:
    if alpha is None:
        return np.zeros((2,) + st.metric.shape)
    alpha = np.asarray(alpha, dtype=float)
    if alpha.shape != (2,) + st.metric.shape:
        raise ValueError("alpha must have shape (2, nx, ny)")
    return alpha


def _rym_extra_variation(st: RymState, f, var: fn.VariationData, alpha) -> float:
    """Derivative of ``-int |F|^2/4 e^{-f} dV`` along ``(v, alpha, h)``."""
    m = st.metric
    alpha = _alpha_array(st, alpha)
    fv = geo.sample(m, f)
    e = np.exp(-fv)
    P = st.Phi
    psi = 0.25 * var.trace(m)
    h = np.broadcast_to(geo.sample(m, var.h), m.shape)
    dV = geo.volume_weights(m)
    metric_part = float(np.sum(P * P * e * (psi + 0.5 * h) * dV))
    Pe = P * e
    a_part = float(np.sum(alpha[1] * geo.dx_c(Pe, m.hx) - alpha[0] * geo.dy_c(Pe, m.hy))) * m.hx * m.hy
    return metric_part + a_part


def delta_F_rym(st: RymState, f, var: fn.VariationData, alpha=None) -> float:
    """First variation of ``F_rym`` along ``(v, alpha, h)``.

    ``int e^{-f} [-v_ij (Ric_ij - eta_ij/2 + f_ij) - alpha_j (d*_f F)_j
    + (v/2 - h)(2 Delta f - |df|^2 + R - |F|^2/4)] dV``.
    """
    return fn.delta_F(st.metric, f, var) + _rym_extra_variation(st, f, var, alpha)


def delta_W_rym(st: RymState, cfg: fn.PotentialConfig, var: fn.VariationData, alpha=None) -> float:
    """First variation of ``W_rym`` along ``(v, alpha, h, sigma)``.

    ``int [sigma (|df|^2 + R + |F|^2/4) - tau v_ij (Ric_ij + eta_ij/2 + f_ij)
    + tau alpha_j (d*_f F)_j + h + B (v/2 - h - n sigma/2tau)] dm`` with
    ``B = tau (2 Delta f - |df|^2 + R + |F|^2/4) + f - n``.
    """
    m = st.metric
    tau = cfg.tau
    c = (4.0 * math.pi * tau) ** (-0.5 * m.n)
    extra = _rym_extra_variation(st, cfg.f, var, alpha)
    out = fn.delta_W(m, cfg, var) - tau * c * extra
    s = float(var.sigma)
    if s != 0.0 and m.n != 2:
        # d/dtau of tau (4 pi tau)^{-n/2} = (1 - n/2) tau^{-n/2} (4 pi)^{-n/2}
        F4 = geo.integrate(m, 0.25 * st.F_norm_sq * np.exp(-geo.sample(m, cfg.f)))
        out += s * (1.0 - 0.5 * m.n) * c * F4
    return out


def _apply_rym(st, f, var, alpha, eps, tau=None):
    m2, f2, t2 = fn.apply_variation(st.metric, f, var, eps, tau)
    return RymState(m2, st.A + eps * _alpha_array(st, alpha), st.flux, st.t), f2, t2


def fd_delta_F_rym(st: RymState, f, var: fn.VariationData, alpha=None, eps: float = 1e-5) -> float:
    """Central difference of ``F_rym``."""
    sp, fp, _ = _apply_rym(st, f, var, alpha, eps)
    sm, fm, _ = _apply_rym(st, f, var, alpha, -eps)
    return (eval_F_rym(sp, fp) - eval_F_rym(sm, fm)) / (2.0 * eps)


def fd_delta_W_rym(st: RymState, cfg: fn.PotentialConfig, var: fn.VariationData, alpha=None, eps: float = 1e-5) -> float:
    """Central difference of the ``W_rym`` integral."""
    sp, fp, tp = _apply_rym(st, cfg.f, var, alpha, eps, cfg.tau)
    sm, fm, tm = _apply_rym(st, cfg.f, var, alpha, -eps, cfg.tau)
    return (w_rym_integral(sp, fp, tp) - w_rym_integral(sm, fm, tm)) / (2.0 * eps)


def _T_rym(st: RymState, f) -> np.ndarray:
    m = st.metric
    return geo.ricci(m) - 0.5 * st.eta + geo.hessian(m, f)


def production_F_rym(st: RymState, f) -> float:
    """``int (2 |Ric - eta/2 + Hess f|^2 + |d*_f F|^2) e^{-f} dV``."""
    m = st.metric
    dens = 2.0 * geo.sym_norm_sq(m, _T_rym(st, f)) + _covector_norm_sq(m, st.codiff(f))
    return geo.integrate(m, dens * np.exp(-geo.sample(m, f)))


def lambda_rym(st: RymState, **kw) -> fn.SpectralResult:
    """Lowest eigenpair of ``-4 Delta + R - |F|^2/4``."""
    m = st.metric
    return fn.lowest_eigenpair(m, 4.0, geo.scalar_curvature(m) - 0.25 * st.F_norm_sq, **kw)


def w_rym_rate_bracket(st: RymState, f, tau: float) -> float:
    """Bracket expression ``int [2 tau |T|^2 + tau |d*_f F|^2 + |F|^2/4 - tau |eta|^2/2] dm``.

    ``T = Ric - eta/2 + Hess f``. This closed form does not equal the rate of
    :func:`w_rym_integral` (see :func:`w_rym_rate_derived`); it is kept as a
    reported comparison only.
    """
    m = st.metric
    c = (4.0 * math.pi * tau) ** (-0.5 * m.n)
    dens = (
        2.0 * tau * geo.sym_norm_sq(m, _T_rym(st, f))
        + tau * _covector_norm_sq(m, st.codiff(f))
        + 0.25 * st.F_norm_sq
        - 0.5 * tau * geo.sym_norm_sq(m, st.eta)
    )
    return c * geo.integrate(m, dens * np.exp(-geo.sample(m, f)))


def w_rym_rate_derived(st: RymState, f, tau: float) -> float:
    """Rate of ``W_rym`` along the coupled system, obtained from :func:`delta_W_rym`.

    ``int [2 tau |T - g/2tau|^2 - tau |d*_f F|^2 + 2 tau <Ric + Hess f, eta>
    - tau |eta|^2 - 3|F|^2/4] dm``.
    """
    m = st.metric
    c = (4.0 * math.pi * tau) ** (-0.5 * m.n)
    H = geo.ricci(m) + geo.hessian(m, f)
    T = H - 0.5 * st.eta - geo.metric(m) / (2.0 * tau)
    dens = (
        2.0 * tau * geo.sym_norm_sq(m, T)
        - tau * _covector_norm_sq(m, st.codiff(f))
        + 2.0 * tau * geo.sym_pair(m, H, st.eta)
        - tau * geo.sym_norm_sq(m, st.eta)
        - 0.75 * st.F_norm_sq
    )
    return c * geo.integrate(m, dens * np.exp(-geo.sample(m, f)))


# --------------------------------------------------------------------------
# Coupled trajectories
# --------------------------------------------------------------------------


@dataclass
class CoupledRun:
    """Stored states of an extended flow at uniform spacing ``dt``."""

    states: list
    dt: float
    times: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.times is None:
            self.times = np.array([s.t for s in self.states])


def _steps_for(m, T, dt, safety):
    limit = cfl_limit(m, safety)
    dt = limit if dt is None else min(dt, limit)
    steps = max(2, int(math.ceil(T / dt - 1e-9)))
    steps += steps % 2
    return steps, T / steps


def run_list(st0: ListState, T: float, dt: float | None = None, defect_tol: float = DEFECT_TOL,
             cfl_safety: float = 0.2) -> CoupledRun:
    """Integrate the List flow over ``[t, t + T]`` with an even number of steps."""
    if not T > 0:
        raise ValueError("T must be positive")
    steps, dt = _steps_for(st0.metric, T, dt, cfl_safety)
    states = [st0]
    for _ in range(steps):
        states.append(step_list(states[-1], dt, defect_tol, cfl_safety))
    return CoupledRun(states, dt)


def run_rym(st0: RymState, T: float, dt: float | None = None, freeze_metric: bool = False,
            cfl_safety: float = 0.2) -> CoupledRun:
    """Integrate the Ricci Yang-Mills flow over ``[t, t + T]`` with an even number of steps."""
    if not T > 0:
        raise ValueError("T must be positive")
    steps, dt = _steps_for(st0.metric, T, dt, cfl_safety)
    states = [st0]
    for _ in range(steps):
        states.append(step_rym(states[-1], dt, freeze_metric, cfl_safety))
    return CoupledRun(states, dt)


def _backward_potential(run: CoupledRun, f_end, rate):
    """Integrate ``df/dt = rate(state, f, t)`` from the last state towards the first.

    RK4 with step ``2 dt`` whose midpoint stage uses the stored odd-index
    state; returns the potentials at the even indices.
    """
    S = run.states
    K = len(S) - 1
    if K % 2:
        raise ValueError("run needs an even number of steps")
    h = 2.0 * run.dt
    f = np.array(f_end, dtype=float)
    out = {K: f.copy()}
    for k in range(K, 0, -2):
        t = run.times[k]

        def g(i, ff, tt):
            return -rate(S[i], ff, tt)

        k1 = g(k, f, t)
        k2 = g(k - 1, f + 0.5 * h * k1, t - 0.5 * h)
        k3 = g(k - 1, f + 0.5 * h * k2, t - 0.5 * h)
        k4 = g(k - 2, f + h * k3, t - h)
        f = f + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        out[k - 2] = f.copy()
    return [out[i] for i in range(0, K + 1, 2)]


def _potential_rate(m, f, potential, tau_bar, t):
    """``-Delta f + |df|^2 - potential (+ n/2tau)``."""
    e = np.exp(-2.0 * m.u)
    r = -e * geo.flat_laplacian(f, m.hx, m.hy) + e * geo.flat_grad_sq(f, m.hx, m.hy) - potential
    if tau_bar is not None:
        r = r + m.n / (2.0 * (tau_bar - t))
    return r


def _central_rates(times, values):
    t = np.asarray(times)
    v = np.asarray(values)
    return (v[2:] - v[:-2]) / (t[2:] - t[:-2])


def list_trajectory(run: CoupledRun, tau_bar: float, f_end) -> dict:
    """``W_list`` along a List run with the coupled normalized potential.

    The potential solves ``df/dt = -Delta f + |df|^2 - S + n/2tau``,
    ``tau = tau_bar - t``, backward from ``f_end`` (made compatible first).
    Returns the even-index times with ``W``, the production, the
    projection correction and the centred rate of ``W`` at interior points.
    """
    last = run.states[-1]
    tau_end = tau_bar - last.t
    f_end = fn.normalize_potential(last.metric, f_end, tau_end).f
    fs = _backward_potential(run, f_end, lambda s, f, t: _potential_rate(s.metric, f, s.S, tau_bar, t))
    idx = list(range(0, len(run.states), 2))
    W, P, C, mass = [], [], [], []
    for i, f in zip(idx, fs):
        s = run.states[i]
        tau = tau_bar - s.t
        W.append(w_list_integral(s, f, tau))
        P.append(_production_list(s, f, tau))
        C.append(_list_projection_correction(s, f, tau))
        mass.append(fn.mass(s.metric, f, tau))
    times = run.times[idx]
    rate = _central_rates(times, W)
    corrected = rate - np.asarray(C[1:-1])
    return {
        "t": times,
        "W": np.array(W),
        "production": np.array(P),
        "correction": np.array(C),
        "rate": rate,
        "rate_corrected": corrected,
        "mass": np.array(mass),
        "defect": run.states[-1].defect,
        "potentials": fs,
    }


def rym_trajectory(run: CoupledRun, f_end, tau_bar: float | None = None) -> dict:
    """``F_rym`` (or ``W_rym`` when ``tau_bar`` is given) along an RYM run.

    The potential solves ``df/dt = -Delta f + |df|^2 - R + |F|^2/2`` (plus
    ``n/2tau`` for ``W``) backward from ``f_end``, normalized to unit
    (weighted) mass at the final time. For ``F`` the production is reported;
    for ``W`` both rate expressions (bracket and derived) are reported.
    """
    last = run.states[-1]
    if tau_bar is None:
        f_end = f_end + math.log(fn.mass(last.metric, f_end))
    else:
        f_end = fn.normalize_potential(last.metric, f_end, tau_bar - last.t).f

    def rate(s, f, t):
        # |F|^2 / 2 = Phi^2
        return _potential_rate(s.metric, f, geo.scalar_curvature(s.metric) - s.Phi**2, tau_bar, t)

    fs = _backward_potential(run, f_end, rate)
    idx = list(range(0, len(run.states), 2))
    times = run.times[idx]
    out = {"t": times, "potentials": fs}
    if tau_bar is None:
        vals = [eval_F_rym(run.states[i], f) for i, f in zip(idx, fs)]
        out["F"] = np.array(vals)
        out["production"] = np.array([production_F_rym(run.states[i], f) for i, f in zip(idx, fs)])
        out["mass"] = np.array([fn.mass(run.states[i].metric, f) for i, f in zip(idx, fs)])
    else:
        taus = [tau_bar - run.states[i].t for i in idx]
        vals = [w_rym_integral(run.states[i], f, tau) for i, f, tau in zip(idx, fs, taus)]
        out["W"] = np.array(vals)
        out["bracket"] = np.array([w_rym_rate_bracket(run.states[i], f, tau) for i, f, tau in zip(idx, fs, taus)])
        out["derived"] = np.array([w_rym_rate_derived(run.states[i], f, tau) for i, f, tau in zip(idx, fs, taus)])
        out["mass"] = np.array([fn.mass(run.states[i].metric, f, tau) for i, f, tau in zip(idx, fs, taus)])
    out["rate"] = _central_rates(times, vals)
    return out


def low_energy_check(states, T: float, w_rates=None, w_times=None) -> dict:
    """``(T - t) sup |F|^2`` along a history and the time past which ``dW/dt >= 0``.

    ``w_rates`` sampled at ``w_times`` gives ``t0``: the earliest sampled time
    after which every sampled rate is non-negative (``None`` if the last one
    is negative).
    """
    if not states:
        raise ValueError("empty history")
    t = np.array([s.t for s in states])
    if np.any(t >= T):
        raise ValueError("T must exceed every history time")
    sup = np.array([float(np.max(s.F_norm_sq)) for s in states])
    q = (T - t) * sup
    out = {"t": t, "scaled_energy": q, "decreasing_tail": bool(np.all(np.diff(q[len(q) // 2:]) <= 0.0))}
    t0 = None
    if w_rates is not None:
        r = np.asarray(w_rates)
        tw = np.asarray(w_times)
        neg = np.nonzero(r < 0.0)[0]
        if neg.size == 0:
            t0 = float(tw[0])
        elif neg[-1] < r.size - 1:
            t0 = float(tw[neg[-1] + 1])
    out["t0"] = t0
    return out
