"""Space-time curves against the backward Ricci flow.

Everything is integrated in ``s = sqrt(tau)``, where the geodesic equation
is regular at ``tau = 0``:

    grad_{X^} X^ - 2 s^2 grad R + 4 s Ric(X^, .) = 0,   X^ = d gamma / ds.

All backends write the metric as ``exp(2U) <.,.>`` in an ambient chart: the
plane for the torus (universal cover), ``R^n`` for flat space and the unit
sphere embedded in ``R^{n+1}`` for the round sphere. ``Ric`` is taken to be
``U_tau g``, half the tau-derivative of the metric, so the geodesic, frame and
Harnack computations refer to one consistent space-time. On the torus
``U``, ``R`` and their tau-derivatives come from periodic cubic splines in
space and cubic Hermite interpolation in tau.
"""

from __future__ import annotations

import csv
import io
import math
import os
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import geometry as geo
from .flow import MetricHistory
from .geometry import ConformalTorus, Euclidean, RoundSphere

__all__ = [
    "FrameBundle",
    "HarnackData",
    "LPath",
    "ReducedField",
    "Spacetime",
    "dirichlet_energy",
    "export_reduced_field_csv",
    "export_volume_csv",
    "first_variation",
    "geodesic_residual",
    "harnack_data",
    "hessian_bound_check",
    "identity_residuals",
    "jacobi_pairing",
    "l_length",
    "ljacobi",
    "parallel_map",
    "reduced_field",
    "reduced_volume",
    "shoot",
    "solve_bvp",
    "speed_bound_check",
    "test_path",
    "transport_frame",
    "worker_count",
]

DEFAULT_STEPS = 256
HIT_TOL = 1e-8
CUT_TOL = 1e-6
SPEED_CONSTANT_PER_DIM = 20.0


# --------------------------------------------------------------------------
# Parallel map
# --------------------------------------------------------------------------


def worker_count() -> int:
    """Workers for parallel maps; ``PERELMAN_LAB_THREADS`` caps the CPU count."""
    n = os.cpu_count() or 1
    env = os.environ.get("PERELMAN_LAB_THREADS")
    if env:
        try:
            n = max(1, min(n, int(env)))
        except ValueError:
            raise ValueError("PERELMAN_LAB_THREADS must be an integer") from None
    return n


def parallel_map(fn, items, workers: int | None = None) -> list:
    """Ordered map; results do not depend on the worker count."""
    items = list(items)
    workers = worker_count() if workers is None else max(1, workers)
    if workers == 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


# --------------------------------------------------------------------------
# Periodic cubic B-splines
# --------------------------------------------------------------------------


def _spline_prefilter(a: np.ndarray) -> np.ndarray:
    """Coefficients of the periodic cubic B-spline interpolating ``a`` (last two axes)."""
    nx, ny = a.shape[-2:]
    sx = (4.0 + 2.0 * np.cos(2.0 * math.pi * np.arange(nx) / nx)) / 6.0
    sy = (4.0 + 2.0 * np.cos(2.0 * math.pi * np.arange(ny) / ny)) / 6.0
    return np.real(np.fft.ifft2(np.fft.fft2(a) / (sx[:, None] * sy[None, :])))


def _bspline_weights(t):
    t2 = t * t
    t3 = t2 * t
    u = 1.0 - t
    w = [u * u * u / 6.0, (3.0 * t3 - 6.0 * t2 + 4.0) / 6.0, (-3.0 * t3 + 3.0 * t2 + 3.0 * t + 1.0) / 6.0, t3 / 6.0]
    d = [-0.5 * u * u, 1.5 * t2 - 2.0 * t, -1.5 * t2 + t + 0.5, 0.5 * t2]
    dd = [u, 3.0 * t - 2.0, 1.0 - 3.0 * t, t]
    return w, d, dd


def _spline_eval(C: np.ndarray, pts: np.ndarray, hx: float, hy: float, order: int = 1):
    """Evaluate stacked coefficient grids ``C`` (F, nx, ny) at points (P, 2).

    Returns value (F, P), gradient (F, P, 2) and, for ``order == 2``, the
    Hessian (F, P, 2, 2). Points may be complex (complex-step derivatives);
    cells are located from the real part. Sums run in a fixed order, so each
    point's result does not depend on the batch it belongs to.
    """
    F, nx, ny = C.shape
    gx = pts[:, 0] / hx
    gy = pts[:, 1] / hy
    ix = np.floor(np.real(gx)).astype(np.int64)
    iy = np.floor(np.real(gy)).astype(np.int64)
    tx = gx - ix
    ty = gy - iy
    wx, dx, ddx = _bspline_weights(tx)
    wy, dy, ddy = _bspline_weights(ty)
    flat = C.reshape(F, nx * ny)
    rows = [((ix + a - 1) % nx) * ny for a in range(4)]
    cols = [(iy + b - 1) % ny for b in range(4)]
    dtype = np.result_type(C.dtype, pts.dtype)
    P = pts.shape[0]
    val = np.zeros((F, P), dtype=dtype)
    gxv = np.zeros((F, P), dtype=dtype)
    gyv = np.zeros((F, P), dtype=dtype)
    if order >= 2:
        hxx = np.zeros((F, P), dtype=dtype)
        hxy = np.zeros((F, P), dtype=dtype)
        hyy = np.zeros((F, P), dtype=dtype)
    for a in range(4):
        # partial sums over b first, in a fixed order
        sv = np.zeros((F, P), dtype=dtype)
        sd = np.zeros((F, P), dtype=dtype)
        sdd = np.zeros((F, P), dtype=dtype) if order >= 2 else None
        for b in range(4):
            g = flat[:, rows[a] + cols[b]]
            sv = sv + wy[b] * g
            sd = sd + dy[b] * g
            if order >= 2:
                sdd = sdd + ddy[b] * g
        val = val + wx[a] * sv
        gxv = gxv + dx[a] * sv
        gyv = gyv + wx[a] * sd
        if order >= 2:
            hxx = hxx + ddx[a] * sv
            hxy = hxy + dx[a] * sd
            hyy = hyy + wx[a] * sdd
    grad = np.stack([gxv / hx, gyv / hy], axis=-1)
    if order < 2:
        return val, grad, None
    H = np.empty((F, P, 2, 2), dtype=dtype)
    H[..., 0, 0] = hxx / (hx * hx)
    H[..., 0, 1] = hxy / (hx * hy)
    H[..., 1, 0] = H[..., 0, 1]
    H[..., 1, 1] = hyy / (hy * hy)
    return val, grad, H


# --------------------------------------------------------------------------
# Space-time field evaluators
# --------------------------------------------------------------------------

# field order in evaluator outputs
_U, _UT, _UTT, _R, _RT = range(5)


@dataclass
class Fields:
    """Space-time quantities at a batch of points and one ``tau``."""

    U: np.ndarray
    dU: np.ndarray
    Ut: np.ndarray
    dUt: np.ndarray
    Utt: np.ndarray
    R: np.ndarray
    dR: np.ndarray
    Rt: np.ndarray
    HU: np.ndarray | None = None
    HR: np.ndarray | None = None


class Spacetime:
    """Backward Ricci flow as seen by space-time curves.

    Parameters
    ----------
    history : MetricHistory
        Any direction; queries are made in ``tau = t0 - t``.
    """

    def __init__(self, history: MetricHistory):
        if history.direction != "backward":
            history = history.backward_view()
        self.history = history
        tpl = history.template
        self.kind = tpl.kind
        self.n = tpl.n
        self.horizon = history.horizon
        if isinstance(tpl, ConformalTorus):
            self.dim = 2
            self.lx, self.ly = tpl.lx, tpl.ly
            self.hx, self.hy = tpl.hx, tpl.hy
            self.shape = tpl.shape
            # snapshots in increasing tau
            u = np.array(history.states[::-1])
            R = np.stack([geo.scalar_curvature(tpl.with_u(x)) for x in u])
            self.dtau = history.dt
            self.Cu = _spline_prefilter(u)
            self.CR = _spline_prefilter(R)
            if len(u) >= 3:
                self.CRt = np.gradient(self.CR, self.dtau, axis=0, edge_order=2)
            else:
                self.CRt = np.zeros_like(self.CR) + (self.CR[-1] - self.CR[0]) / max(self.dtau, 1e-300)
            # d u / d tau = R / 2 at every stored snapshot
            self.Cut = 0.5 * self.CR
            self._cache = {}
        elif isinstance(tpl, RoundSphere):
            self.dim = self.n + 1
            self.r2_base = float(history.states[-1])
        else:
            self.dim = self.n
            self.scale = float(tpl.scale)

    # -- coefficient grids at one tau (torus) ------------------------------
    def _coeffs(self, tau: float) -> np.ndarray:
        K = self.Cu.shape[0]
        if K == 1:
            z = np.zeros_like(self.Cu[0])
            return np.stack([self.Cu[0], z, z, self.CR[0], z])
        x = tau / self.dtau
        k = min(max(int(math.floor(x)), 0), K - 2)
        w = x - k
        d = self.dtau
        h00 = (1 + 2 * w) * (1 - w) ** 2
        h10 = w * (1 - w) ** 2
        h01 = w * w * (3 - 2 * w)
        h11 = w * w * (w - 1)
        d00, d10, d01, d11 = 6 * w * w - 6 * w, 3 * w * w - 4 * w + 1, -6 * w * w + 6 * w, 3 * w * w - 2 * w
        e00, e10, e01, e11 = 12 * w - 6, 6 * w - 4, -12 * w + 6, 6 * w - 2
        U0, U1, S0, S1 = self.Cu[k], self.Cu[k + 1], self.Cut[k], self.Cut[k + 1]
        R0, R1, T0, T1 = self.CR[k], self.CR[k + 1], self.CRt[k], self.CRt[k + 1]
        U = h00 * U0 + h10 * d * S0 + h01 * U1 + h11 * d * S1
        Ut = (d00 * U0 + d10 * d * S0 + d01 * U1 + d11 * d * S1) / d
        Utt = (e00 * U0 + e10 * d * S0 + e01 * U1 + e11 * d * S1) / (d * d)
        R = h00 * R0 + h10 * d * T0 + h01 * R1 + h11 * d * T1
        Rt = (d00 * R0 + d10 * d * T0 + d01 * R1 + d11 * d * T1) / d
        return np.stack([U, Ut, Utt, R, Rt])

    def _geo_coeffs(self, tau: float) -> np.ndarray:
        """``[U, U_tau, R]`` grids at ``tau``, cached (the s-grid repeats across Newton steps)."""
        hit = self._cache.get(tau)
        if hit is None:
            c = self._coeffs(tau)
            hit = np.ascontiguousarray(c[[_U, _UT, _R]])
            if len(self._cache) >= 2048:
                self._cache.clear()
            self._cache[tau] = hit
        return hit

    def geodesic_rhs(self, s: float, x, w, jac: bool = False):
        """Acceleration and, if ``jac``, its derivatives with respect to ``x`` and ``w``."""
        if self.kind != "conformal_torus":
            fl = self.fields(s * s, x)
            acc = self.acceleration(s, x, w, fl)
            if not jac:
                return acc, None, None
            P, d = w.shape
            I = np.eye(d)
            Aw = -4.0 * s * fl.Ut[:, None, None] * I
            if self.kind == "sphere":
                ww = np.sum(w * w, axis=-1)
                Ax = -ww[:, None, None] * I
                Aw = Aw - 2.0 * x[:, :, None] * w[:, None, :]
            else:
                Ax = np.zeros((P, d, d))
            return acc, Ax, Aw
        val, grad, H = _spline_eval(self._geo_coeffs(s * s), x, self.hx, self.hy, 2 if jac else 1)
        U, Ut = val[0], val[1]
        dU, dUt, dR = grad[0], grad[1], grad[2]
        wdu = np.sum(w * dU, axis=-1)
        ww = np.sum(w * w, axis=-1)
        e = np.exp(-2.0 * U)
        acc = -2.0 * wdu[:, None] * w + ww[:, None] * dU + (2.0 * s * s) * e[:, None] * dR - 4.0 * s * Ut[:, None] * w
        if not jac:
            return acc, None, None
        HU, HR = H[0], H[2]
        I = np.eye(2)
        Aw = (
            -2.0 * wdu[:, None, None] * I
            - 2.0 * w[:, :, None] * dU[:, None, :]
            + 2.0 * dU[:, :, None] * w[:, None, :]
            - 4.0 * s * Ut[:, None, None] * I
        )
        wHU = np.einsum("pi,pij->pj", w, HU)
        Ax = (
            -2.0 * w[:, :, None] * wHU[:, None, :]
            + ww[:, None, None] * HU
            + (2.0 * s * s) * e[:, None, None] * (HR - 2.0 * dR[:, :, None] * dU[:, None, :])
            - 4.0 * s * w[:, :, None] * dUt[:, None, :]
        )
        return acc, Ax, Aw

    # -- evaluation -----------------------------------------------------------
    def fields(self, tau: float, x: np.ndarray, order: int = 1) -> Fields:
        """Fields at points ``x`` (P, dim) and backward time ``tau``."""
        P = x.shape[0]
        dt = x.dtype
        if self.kind == "conformal_torus":
            val, grad, H = _spline_eval(self._coeffs(tau), x, self.hx, self.hy, order)
            return Fields(
                val[_U], grad[_U], val[_UT], grad[_UT], val[_UTT], val[_R], grad[_R], val[_RT],
                None if H is None else H[_U], None if H is None else H[_R],
            )
        zero = np.zeros(P, dtype=dt)
        zvec = np.zeros((P, self.dim), dtype=dt)
        zmat = np.zeros((P, self.dim, self.dim), dtype=dt) if order >= 2 else None
        if self.kind == "sphere":
            n = self.n
            r2 = self.r2_base + 2.0 * (n - 1) * tau
            U = zero + 0.5 * math.log(r2)
            Ut = zero + (n - 1) / r2
            Utt = zero - 2.0 * (n - 1) ** 2 / r2**2
            R = zero + n * (n - 1) / r2
            Rt = zero - 2.0 * n * (n - 1) ** 2 / r2**2
            return Fields(U, zvec, Ut, zvec, Utt, R, zvec, Rt, zmat, zmat)
        U = zero + 0.5 * math.log(self.scale)
        return Fields(U, zvec, zero, zvec, zero, zero, zvec, zero, zmat, zmat)

    def radius_sq(self, tau: float) -> float:
        return self.r2_base + 2.0 * (self.n - 1) * tau

    # -- connection and curvature in the ambient chart ---------------------
    def gamma(self, x, fl: Fields, a, b):
        """Connection term ``Gamma(a, b)``: ``grad_a b = db + Gamma(a, b)``."""
        if self.kind == "conformal_torus":
            du = fl.dU
            return (
                a * np.sum(b * du, axis=-1, keepdims=True)
                + b * np.sum(a * du, axis=-1, keepdims=True)
                - np.sum(a * b, axis=-1, keepdims=True) * du
            )
        if self.kind == "sphere":
            return np.sum(a * b, axis=-1, keepdims=True) * x
        return np.zeros_like(a)

    def sectional(self, fl: Fields):
        if self.kind == "conformal_torus":
            return -np.exp(-2.0 * fl.U) * (fl.HU[:, 0, 0] + fl.HU[:, 1, 1])
        if self.kind == "sphere":
            return np.exp(-2.0 * fl.U)
        return np.zeros_like(fl.U)

    def hess_R(self, fl: Fields):
        """Covariant Hessian of the potential in chart components."""
        if self.kind != "conformal_torus":
            return np.zeros((fl.U.shape[0], self.dim, self.dim), dtype=fl.U.dtype)
        du, dr = fl.dU, fl.dR
        cross = du[:, :, None] * dr[:, None, :] + dr[:, :, None] * du[:, None, :]
        return fl.HR - cross + np.sum(du * dr, axis=-1)[:, None, None] * np.eye(2)

    # -- geodesic equation ---------------------------------------------------
    def acceleration(self, s: float, x, w, fl: Fields | None = None):
        fl = self.fields(s * s, x) if fl is None else fl
        acc = -self.gamma(x, fl, w, w) - 4.0 * s * fl.Ut[:, None] * w
        if self.kind == "conformal_torus":
            acc = acc + 2.0 * s * s * np.exp(-2.0 * fl.U)[:, None] * fl.dR
        return acc

    def lagrangian(self, s: float, x, w):
        fl = self.fields(s * s, x)
        return 0.5 * np.exp(2.0 * fl.U) * np.sum(w * w, axis=-1) + 2.0 * s * s * fl.R

    def harnack_integrand(self, s: float, x, w):
        """``2 s^4 H(X)``: the ``ds`` integrand of ``K = int tau^{3/2} H dtau``."""
        fl = self.fields(s * s, x)
        s2 = s * s
        ww = np.exp(2.0 * fl.U) * np.sum(w * w, axis=-1)
        return -2.0 * s2 * s2 * fl.Rt - 2.0 * s2 * fl.R - 2.0 * s2 * s * np.sum(fl.dR * w, axis=-1) + s2 * fl.Ut * ww

    def inner(self, tau: float, x, a, b):
        fl = self.fields(tau, x)
        return np.exp(2.0 * fl.U) * np.sum(a * b, axis=-1)

    # -- charts ---------------------------------------------------------------
    def tangent_basis(self, x: np.ndarray) -> np.ndarray:
        """Chart-orthonormal tangent basis (P, n, dim) at points ``x``."""
        P = x.shape[0]
        if self.kind != "sphere":
            return np.broadcast_to(np.eye(self.dim), (P, self.dim, self.dim)).copy()
        out = np.empty((P, self.n, self.dim))
        for i in range(P):
            q = np.real(x[i])
            # complete q to an orthonormal basis; the trailing vectors span T_q
            M = np.eye(self.dim)
            M[:, 0] = q
            Q, _ = np.linalg.qr(M)
            Q[:, 0] *= np.sign(Q[:, 0] @ q)
            out[i] = Q[:, 1:].T
        return out

    def normalize_point(self, x: np.ndarray) -> np.ndarray:
        if self.kind == "sphere":
            return x / np.linalg.norm(x, axis=-1, keepdims=True)
        return x

    def wrap(self, x: np.ndarray) -> np.ndarray:
        if self.kind == "conformal_torus":
            return np.stack([np.mod(x[..., 0], self.lx), np.mod(x[..., 1], self.ly)], axis=-1)
        return x


# --------------------------------------------------------------------------
# Paths and shooting
# --------------------------------------------------------------------------


@dataclass
class LPath:
    """Space-time curve sampled on a uniform ``s``-grid over ``[0, sqrt(taubar)]``.

    ``x`` are chart positions (unwrapped on the torus), ``w = d gamma/ds``.
    ``v`` is the initial datum ``lim sqrt(tau) X``; ``frame`` optionally holds
    the fundamental matrix of the transport equation.
    """

    s: np.ndarray
    x: np.ndarray
    w: np.ndarray
    tau_bar: float
    v: np.ndarray | None = None
    frame: np.ndarray | None = None

    @property
    def p(self) -> np.ndarray:
        return self.x[0]

    @property
    def endpoint(self) -> np.ndarray:
        return self.x[-1]

    @property
    def tau(self) -> np.ndarray:
        return self.s * self.s


def _simpson(y: np.ndarray, h: float, axis: int = -1) -> np.ndarray:
    n = y.shape[axis] - 1
    if n % 2:
        raise ValueError("Simpson's rule needs an even number of intervals")
    w = np.ones(n + 1)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    # contiguous last-axis sums: every row is reduced in the same order
    # whatever the batch width, so results are bitwise batch-independent
    z = np.ascontiguousarray(np.moveaxis(y, axis, -1)) * w
    return (h / 3.0) * np.sum(z, axis=-1)


def _rk4_paths(st: Spacetime, x0, w0, s_bar: float, steps: int, with_frame: bool = False, keep: bool = True):
    """RK4 for the geodesic equation (and optionally the transport matrix).

    ``x0, w0`` are (P, dim); returns node arrays (steps+1, P, dim) or just the
    endpoints when ``keep`` is false.
    """
    h = s_bar / steps
    dim = st.dim
    P = x0.shape[0]
    dtype = np.result_type(x0.dtype, w0.dtype)

    def rhs(s, x, w, Phi):
        if Phi is None:
            return w, st.geodesic_rhs(s, x, w)[0], None
        fl = st.fields(s * s, x)
        acc = st.acceleration(s, x, w, fl)
        # dZ/ds = -Gamma(w, Z) - 2 s U_tau Z, applied column by column
        cols = []
        for j in range(dim):
            Z = Phi[:, :, j]
            cols.append(-st.gamma(x, fl, w, Z) - 2.0 * s * fl.Ut[:, None] * Z)
        return w, acc, np.stack(cols, axis=-1)

    x = x0.astype(dtype)
    w = w0.astype(dtype)
    Phi = np.broadcast_to(np.eye(dim), (P, dim, dim)).astype(dtype) if with_frame else None
    xs, ws, phis = ([x], [w], [Phi]) if keep else (None, None, None)
    for i in range(steps):
        s = i * h
        k1 = rhs(s, x, w, Phi)
        k2 = rhs(s + 0.5 * h, x + 0.5 * h * k1[0], w + 0.5 * h * k1[1], None if Phi is None else Phi + 0.5 * h * k1[2])
        k3 = rhs(s + 0.5 * h, x + 0.5 * h * k2[0], w + 0.5 * h * k2[1], None if Phi is None else Phi + 0.5 * h * k2[2])
        k4 = rhs(s + h, x + h * k3[0], w + h * k3[1], None if Phi is None else Phi + h * k3[2])
        x = x + (h / 6.0) * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        w = w + (h / 6.0) * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
        if Phi is not None:
            Phi = Phi + (h / 6.0) * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2])
        if st.kind == "sphere":
            # keep the state on the sphere and the velocity tangent
            nx_ = np.sqrt(np.sum(x * x, axis=-1, keepdims=True))
            x = x / nx_
            w = w - np.sum(w * x, axis=-1, keepdims=True) * x
        if keep:
            xs.append(x)
            ws.append(w)
            phis.append(Phi)
    if not keep:
        return x, w, Phi
    return np.stack(xs), np.stack(ws), (np.stack(phis) if with_frame else None)


def _rk4_endpoint_jacobian(st: Spacetime, x0, w0, dw0, s_bar: float, steps: int):
    """Endpoints and their derivative with respect to the initial data.

    Integrates the geodesic equation with its variational equation;
    ``dw0`` (P, dim, k) is the derivative of ``w0`` with respect to the
    ``k`` unknowns. Returns ``x(sbar)`` and ``dx(sbar)`` (P, dim, k).
    """
    h = s_bar / steps
    x = x0.astype(float)
    w = w0.astype(float)
    Jx = np.zeros(dw0.shape)
    Jw = dw0.astype(float)

    def rhs(s, x, w, Jx, Jw):
        acc, Ax, Aw = st.geodesic_rhs(s, x, w, jac=True)
        return w, acc, Jw, np.einsum("pij,pjk->pik", Ax, Jx) + np.einsum("pij,pjk->pik", Aw, Jw)

    for i in range(steps):
        s = i * h
        k1 = rhs(s, x, w, Jx, Jw)
        k2 = rhs(s + 0.5 * h, *(a + 0.5 * h * b for a, b in zip((x, w, Jx, Jw), k1)))
        k3 = rhs(s + 0.5 * h, *(a + 0.5 * h * b for a, b in zip((x, w, Jx, Jw), k2)))
        k4 = rhs(s + h, *(a + h * b for a, b in zip((x, w, Jx, Jw), k3)))
        x, w, Jx, Jw = (a + (h / 6.0) * (b1 + 2 * b2 + 2 * b3 + b4) for a, b1, b2, b3, b4 in zip((x, w, Jx, Jw), k1, k2, k3, k4))
    return x, Jx


def _initial_velocity(st: Spacetime, p: np.ndarray, v: np.ndarray) -> np.ndarray:
    """``X^(0) = 2 v`` with ``v`` given in a chart-orthonormal basis at ``p``."""
    E = st.tangent_basis(np.atleast_2d(p))
    v = np.atleast_2d(v)
    return 2.0 * np.einsum("pi,pid->pd", v, np.broadcast_to(E, (v.shape[0],) + E.shape[1:]))


def _speed_limit(st: Spacetime, v_norm_sq: np.ndarray, tau_bar: float) -> np.ndarray:
    C0 = curvature_bound(st)
    T = st.horizon
    e = math.exp(6.0 * C0 * T)
    denom = min(T - tau_bar, 1.0 / C0) if C0 > 0 else math.inf
    extra = 0.0 if C0 == 0 else (SPEED_CONSTANT_PER_DIM * st.n * T / denom * (e - 1.0) if denom > 0 else math.inf)
    return e * v_norm_sq + extra


def shoot(st: Spacetime, p, v, tau_bar: float, steps: int = DEFAULT_STEPS, with_frame: bool = False) -> LPath:
    """L-geodesic from ``p`` with initial datum ``v``; RK4 in ``s``.

    ``v`` is given in a chart-orthonormal tangent basis at ``p`` (on the
    torus and flat space the chart components themselves).
    """
    if not 0 < tau_bar <= st.horizon + 1e-12:
        raise ValueError(f"tau_bar = {tau_bar!r} outside the history (0, {st.horizon!r}]")
    if steps % 2:
        raise ValueError("steps must be even")
    p = np.asarray(p, dtype=float)
    v = np.asarray(v, dtype=float)
    s_bar = math.sqrt(tau_bar)
    w0 = _initial_velocity(st, p, v)
    xs, ws, phis = _rk4_paths(st, p[None, :], w0, s_bar, steps, with_frame)
    s = np.linspace(0.0, s_bar, steps + 1)
    path = LPath(s, xs[:, 0], ws[:, 0], tau_bar, v, None if phis is None else phis[:, 0])
    # blow-up guard: ten times the speed bound
    v2 = float(st.inner(0.0, p[None, :], w0 / 2.0, w0 / 2.0)[0])
    limit = _speed_limit(st, np.array(v2), tau_bar)
    speed = 0.25 * np.array([float(st.inner(si * si, path.x[j : j + 1], path.w[j : j + 1], path.w[j : j + 1])[0]) for j, si in enumerate(s)])
    if not np.all(np.isfinite(speed)) or np.max(speed) > 10.0 * float(limit):
        raise ArithmeticError(f"geodesic speed {np.max(speed)!r} exceeds ten times the bound {float(limit)!r}")
    return path


def test_path(st: Spacetime, p, q, tau_bar: float, coeffs=None, steps: int = DEFAULT_STEPS) -> LPath:
    """Non-geodesic comparison path ``p -> q``: ``p + (q - p) s/sbar + sum c_k sin(k pi s/sbar)``.

    On the sphere the curve is built in the ambient space and projected.
    ``coeffs`` has shape (K, dim).
    """
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    s_bar = math.sqrt(tau_bar)
    s = np.linspace(0.0, s_bar, steps + 1)
    r = s / s_bar
    y = p[None, :] + r[:, None] * (q - p)[None, :]
    dy = np.broadcast_to((q - p)[None, :] / s_bar, y.shape).copy()
    if coeffs is not None:
        for k, c in enumerate(np.atleast_2d(coeffs), start=1):
            y = y + np.sin(k * math.pi * r)[:, None] * c[None, :]
            dy = dy + (k * math.pi / s_bar) * np.cos(k * math.pi * r)[:, None] * c[None, :]
    if st.kind == "sphere":
        ny = np.linalg.norm(y, axis=-1, keepdims=True)
        x = y / ny
        w = (dy - np.sum(x * dy, axis=-1, keepdims=True) * x) / ny
        return LPath(s, x, w, tau_bar)
    return LPath(s, y, dy, tau_bar)


def l_length(st: Spacetime, path: LPath) -> float:
    """``int (1/2 |dgamma/ds|^2 + 2 s^2 R) ds`` by composite Simpson."""
    if path.tau_bar > st.horizon + 1e-12:
        raise ValueError("path extends past the stored history")
    vals = np.array([float(st.lagrangian(si, path.x[j : j + 1], path.w[j : j + 1])[0]) for j, si in enumerate(path.s)])
    return float(_simpson(vals, path.s[1] - path.s[0]))


def _l_lengths(st: Spacetime, xs, ws, s) -> np.ndarray:
    vals = np.stack([st.lagrangian(si, xs[j], ws[j]) for j, si in enumerate(s)])
    return _simpson(np.real(vals), s[1] - s[0], axis=0)


def geodesic_residual(st: Spacetime, path: LPath) -> float:
    """Sup-norm of ``dw/ds - acceleration`` with fourth-order differences in ``s``."""
    h = path.s[1] - path.s[0]
    w = path.w
    dw = (w[:-4] - 8 * w[1:-3] + 8 * w[3:-1] - w[4:]) / (12.0 * h)
    acc = np.stack([st.acceleration(si, path.x[j : j + 1], path.w[j : j + 1])[0] for j, si in enumerate(path.s)])
    return float(np.max(np.abs(dw - acc[2:-2])))


def dirichlet_energy(m, t, x, xdot) -> float:
    """``E = 1/2 int |X|_g^2 dt`` on a fixed metric, Simpson on the samples."""
    t = np.asarray(t, dtype=float)
    x = np.asarray(x, dtype=float)
    xdot = np.asarray(xdot, dtype=float)
    if isinstance(m, ConformalTorus):
        C = _spline_prefilter(m.u)[None]
        U, _, _ = _spline_eval(C, x, m.hx, m.hy, 0)
        g = np.exp(2.0 * U[0])
    elif isinstance(m, RoundSphere):
        g = np.full(t.shape, m.radius**2)
    else:
        g = np.full(t.shape, m.scale)
    return float(_simpson(0.5 * g * np.sum(xdot * xdot, axis=-1), t[1] - t[0]))


# --------------------------------------------------------------------------
# Boundary value problem
# --------------------------------------------------------------------------


def curvature_bound(st: Spacetime) -> float:
    """``C0 = sup max(|Rm|, |Ric|)`` over the stored history."""
    if st.kind == "euclidean":
        return 0.0
    if st.kind == "sphere":
        n = st.n
        r2 = st.r2_base
        return max(math.sqrt(2.0 * n * (n - 1)), math.sqrt(n) * (n - 1)) / r2
    h = st.history
    best = 0.0
    for k in range(len(h)):
        R = geo.scalar_curvature(h.snapshot(k))
        # in two dimensions |Rm| = |R| and |Ric| = |R| / sqrt(2)
        best = max(best, float(np.max(np.abs(R))))
    return best


def _residual(st: Spacetime, end, target, basis):
    if st.kind == "sphere":
        return np.einsum("pid,pd->pi", basis, end)
    return end - target


def _newton(st: Spacetime, p, targets, basis, v0, tau_bar, steps, tol=1e-12, max_iter=40):
    """Damped Newton on the endpoint map.

    Jacobians come from the variational equations on the torus and from
    complex-step shots on the analytic backends.

    Each row is an independent problem: rows stop updating once converged,
    so results do not depend on which rows share a batch.
    """
    M, n = v0.shape
    s_bar = math.sqrt(tau_bar)
    eps = 1e-30
    E_p = st.tangent_basis(np.atleast_2d(p))[0]
    v = v0.astype(float).copy()
    best_v = v.copy()
    best_r = np.full(M, np.inf)
    step = np.zeros_like(v)
    scale = np.ones(M)
    active = np.ones(M, dtype=bool)
    for _ in range(max_iter):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        va = v[idx]
        m = idx.size
        if st.kind == "conformal_torus":
            # variational equations in real arithmetic
            W0 = 2.0 * va @ E_p
            X0 = np.broadcast_to(p, W0.shape)
            dW0 = np.broadcast_to(2.0 * E_p.T, (m,) + E_p.T.shape)
            xe, J = _rk4_endpoint_jacobian(st, X0, W0, dW0, s_bar, steps)
            F0 = _residual(st, xe, targets[idx], None)
        else:
            # real shot plus n complex-perturbed shots
            V = np.concatenate([va.astype(complex)] + [va + 1j * eps * np.eye(n)[j] for j in range(n)])
            W0 = 2.0 * V @ E_p
            X0 = np.broadcast_to(p.astype(complex), W0.shape)
            xe, _, _ = _rk4_paths(st, X0, W0, s_bar, steps, keep=False)
            tgt = np.concatenate([targets[idx]] * (n + 1))
            bas = None if basis is None else np.concatenate([basis[idx]] * (n + 1))
            F = _residual(st, xe, tgt, bas)
            F0 = np.real(F[:m])
            J = np.stack([np.imag(F[(j + 1) * m : (j + 2) * m]) / eps for j in range(n)], axis=-1)
        if st.kind == "sphere":
            # reject endpoints on the wrong hemisphere of the target
            wrong = np.einsum("pd,pd->p", np.real(xe[:m]), targets[idx]) <= 0
        else:
            wrong = np.zeros(m, dtype=bool)
        r = np.sqrt(np.sum(F0 * F0, axis=-1))
        r[wrong | ~np.isfinite(r)] = np.inf
        improved = r < best_r[idx]
        for jj, i in enumerate(idx):
            if improved[jj]:
                best_r[i] = r[jj]
                best_v[i] = v[i]
                if r[jj] <= tol:
                    active[i] = False
                    continue
                try:
                    d = np.linalg.solve(J[jj], -F0[jj])
                except np.linalg.LinAlgError:
                    active[i] = False
                    continue
                lim = 0.5 * (1.0 + np.linalg.norm(v[i]))
                nd = np.linalg.norm(d)
                if nd > lim:
                    d = d * (lim / nd)
                step[i] = d
                scale[i] = 1.0
                v[i] = best_v[i] + d
            else:
                scale[i] *= 0.5
                if scale[i] < 1e-6:
                    active[i] = False
                    continue
                v[i] = best_v[i] + scale[i] * step[i]
    return best_v, best_r


@dataclass
class ReducedField:
    """Reduced length and distance at a set of targets.

    Per target: ``L``, ``l = L / (2 sqrt(taubar))``, the minimising initial
    datum ``v``, the number of distinct local minima found, a cut-locus flag
    and the endpoint hit error. Failed targets carry ``NaN``.
    """

    targets: np.ndarray
    tau_bar: float
    L: np.ndarray
    l: np.ndarray
    v: np.ndarray
    n_minima: np.ndarray
    cut: np.ndarray
    hit_error: np.ndarray
    lift: np.ndarray
    failed: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))


def _torus_lifts(st: Spacetime, p, q, ratio: float):
    """Lifts of ``q`` worth trying: flat distance within ``ratio`` of the nearest."""
    lx, ly = st.lx, st.ly
    d = q - p
    base = d - np.array([lx * np.round(d[0] / lx), ly * np.round(d[1] / ly)])
    cands = [p + base + np.array([a * lx, b * ly]) for a in (-1, 0, 1) for b in (-1, 0, 1)]
    dist = np.array([np.linalg.norm(c - p) for c in cands])
    keep = dist <= ratio * dist.min() + 1e-9 + 0.05 * min(lx, ly)
    return [c for c, k in zip(cands, keep) if k]


def _metric_spread(st: Spacetime) -> float:
    if st.kind != "conformal_torus":
        return 1.0
    u = st.history.states
    return math.exp(float(np.max(u) - np.min(u)))


def _start_radius(st: Spacetime, p, lifts_all, tau_bar):
    """Ball radius for the start lattice from the L upper bound by distance."""
    C0 = curvature_bound(st)
    n = st.n
    if st.kind == "conformal_torus":
        umax = float(np.max(st.history.states))
        d = max(np.linalg.norm(q - p) for q in lifts_all) * math.exp(umax)
    elif st.kind == "sphere":
        d = math.pi * math.sqrt(st.radius_sq(tau_bar))
    else:
        d = max(np.linalg.norm(q - p) for q in lifts_all) * math.sqrt(st.scale)
    L_up = math.exp(2 * C0 * tau_bar) * d * d / (2 * math.sqrt(tau_bar)) + (2 * n * C0 / 3) * tau_bar**1.5
    v2 = math.exp(6 * C0 * tau_bar) * (L_up / (2 * math.sqrt(tau_bar)) + n * C0 * tau_bar / 3)
    g0 = float(np.exp(2.0 * st.fields(0.0, np.atleast_2d(p)).U[0]))
    return math.sqrt(v2 / g0)


def _flat_guess(st: Spacetime, p, q_lift, tau_bar):
    """Initial datum of the flat-space (or round closed-form) geodesic to ``q``."""
    if st.kind == "sphere":
        n = st.n
        c = float(np.clip(p @ q_lift, -1.0, 1.0))
        theta = math.acos(c)
        dirv = q_lift - c * p
        nd = np.linalg.norm(dirv)
        if nd < 1e-14:
            return np.zeros(n)
        dirv = dirv / nd
        I = _sphere_I(st, tau_bar)
        rate = theta / I / st.r2_base
        E = st.tangent_basis(p[None])[0]
        return 0.5 * rate * (E @ dirv)
    return (q_lift - p) / (2.0 * math.sqrt(tau_bar))


def _sphere_I(st: Spacetime, tau_bar: float) -> float:
    """``int_0^sbar ds / r^2(s^2)`` for ``r^2 = rb^2 + 2(n-1)s^2``."""
    a = st.r2_base
    b = 2.0 * (st.n - 1)
    sb = math.sqrt(tau_bar)
    return math.atan(sb * math.sqrt(b / a)) / math.sqrt(a * b)


def sphere_reduced_length(st: Spacetime, theta, tau_bar: float):
    """Closed-form reduced length on the shrinking round sphere at angle ``theta`` from ``p``."""
    n = st.n
    a = st.r2_base
    b = 2.0 * (n - 1)
    sb = math.sqrt(tau_bar)
    I = _sphere_I(st, tau_bar)
    # int_0^sb 2 s^2 n(n-1) / (a + b s^2) ds
    J = 2.0 * n * (n - 1) * (sb / b - a / b * I)
    return np.asarray(theta) ** 2 / (2.0 * I) + J


def _solve_targets(st: Spacetime, p, targets, tau_bar, steps, fan):
    """Multi-start BVP for a batch of targets; returns per-target records.

    First round: the flat-space guess for every admissible lift (and, on the
    sphere, the guess going the other way round). Targets left without a
    converged geodesic get a second round started from the nearest member
    of the initial-data lattice.
    """
    ratio = _metric_spread(st)
    rows_t, rows_lift, rows_v0 = [], [], []
    for ti, q in enumerate(targets):
        lifts = _torus_lifts(st, p, q, ratio) if st.kind == "conformal_torus" else [q]
        for lf in lifts:
            g = _flat_guess(st, p, lf, tau_bar)
            starts = [g]
            if st.kind == "sphere":
                theta = math.acos(float(np.clip(p @ lf, -1.0, 1.0)))
                if theta > 0:
                    starts.append(-g * (2 * math.pi - theta) / theta)
            for v0 in starts:
                rows_t.append(ti)
                rows_lift.append(lf)
                rows_v0.append(v0)
    v, r, rows_t, rows_lift = _newton_rows(st, p, tau_bar, steps, rows_t, rows_lift, rows_v0)
    ok = r <= HIT_TOL
    missing = [ti for ti in range(len(targets)) if not np.any(ok[rows_t == ti])]
    if missing and st.kind != "euclidean":
        fan_v, fan_end = fan.get()
        t2, l2, v2 = [], [], []
        for ti in missing:
            q = targets[ti]
            lifts = _torus_lifts(st, p, q, ratio) if st.kind == "conformal_torus" else [q]
            for lf in lifts:
                d = -fan_end @ lf if st.kind == "sphere" else np.sum((fan_end - lf) ** 2, axis=-1)
                t2.append(ti)
                l2.append(lf)
                v2.append(fan_v[int(np.argmin(d))])
        vb, rb, tb_, lb = _newton_rows(st, p, tau_bar, steps, t2, l2, v2)
        v = np.concatenate([v, vb])
        r = np.concatenate([r, rb])
        rows_t = np.concatenate([rows_t, tb_])
        rows_lift = np.concatenate([rows_lift, lb])
        ok = r <= HIT_TOL
    # lengths of converged rows
    Ls = np.full(len(rows_t), np.inf)
    if np.any(ok):
        idx = np.flatnonzero(ok)
        W0 = 2.0 * v[idx] @ st.tangent_basis(np.atleast_2d(p))[0]
        X0 = np.broadcast_to(p, W0.shape).astype(float)
        xs, ws, _ = _rk4_paths(st, X0, W0, math.sqrt(tau_bar), steps)
        s = np.linspace(0.0, math.sqrt(tau_bar), steps + 1)
        Ls[idx] = _l_lengths(st, xs, ws, s)
    out = []
    for ti in range(len(targets)):
        sel = np.flatnonzero((rows_t == ti) & ok)
        if sel.size == 0:
            out.append(None)
            continue
        order = sel[np.argsort(Ls[sel], kind="stable")]
        distinct = []
        for i in order:
            if not any(np.linalg.norm(v[i] - v[j]) <= 1e-6 * (1 + np.linalg.norm(v[j])) for j in distinct):
                distinct.append(i)
        best = distinct[0]
        cut = any(abs(Ls[j] - Ls[best]) <= CUT_TOL for j in distinct[1:])
        out.append((float(Ls[best]), v[best].copy(), len(distinct), cut, float(r[best]), rows_lift[best].copy()))
    return out


class _LazyFan:
    """Start lattice shot on first use and shared between worker threads."""

    def __init__(self, st, p, tau_bar, steps, radius):
        self.args = (st, p, tau_bar, steps, radius)
        self.value = None
        self.lock = threading.Lock()

    def get(self):
        with self.lock:
            if self.value is None:
                self.value = _fan(*self.args)
            return self.value


def _newton_rows(st, p, tau_bar, steps, rows_t, rows_lift, rows_v0):
    rows_lift = np.array(rows_lift, dtype=float)
    rows_v0 = np.array(rows_v0, dtype=float)
    basis = st.tangent_basis(rows_lift) if st.kind == "sphere" else None
    v, r = _newton(st, p, rows_lift, basis, rows_v0, tau_bar, steps)
    return v, r, np.array(rows_t, dtype=int), rows_lift


def _fan(st: Spacetime, p, tau_bar, steps, radius):
    """Endpoints of a ``5^n`` lattice of initial data over ``[-radius, radius]^n``."""
    n = st.n
    ax = np.linspace(-radius, radius, 5)
    grid = np.stack(np.meshgrid(*([ax] * n), indexing="ij"), axis=-1).reshape(-1, n)
    W0 = 2.0 * grid @ st.tangent_basis(np.atleast_2d(p))[0]
    X0 = np.broadcast_to(p, W0.shape).astype(float)
    xe, _, _ = _rk4_paths(st, X0, W0, math.sqrt(tau_bar), steps, keep=False)
    good = np.all(np.isfinite(xe), axis=-1)
    return grid[good], np.real(xe[good])


def reduced_field(
    st: Spacetime, p, tau_bar: float, targets, steps: int = DEFAULT_STEPS, workers: int | None = None
) -> ReducedField:
    """``L`` and ``l`` at every target by multi-start shooting.

    Targets are split into one contiguous chunk per worker and solved through
    :func:`parallel_map`. Every per-target computation, reductions included,
    is independent of the batch it sits in, so the result does not depend on
    the worker count, bit for bit.
    """
    if not 0 < tau_bar <= st.horizon + 1e-12:
        raise ValueError("tau_bar outside the stored history")
    p = np.asarray(p, dtype=float)
    targets = np.atleast_2d(np.asarray(targets, dtype=float))
    if st.kind == "conformal_torus":
        lifts_all = [lf for q in targets for lf in _torus_lifts(st, p, q, _metric_spread(st) ** 2)]
    else:
        lifts_all = list(targets)
    radius = _start_radius(st, p, lifts_all, tau_bar)
    fan = _LazyFan(st, p, tau_bar, steps, radius)
    workers = worker_count() if workers is None else max(1, workers)
    chunks = [c for c in np.array_split(targets, workers) if len(c)]
    results = parallel_map(lambda c: _solve_targets(st, p, c, tau_bar, steps, fan), chunks, workers)
    recs = [r for part in results for r in part]
    P = len(targets)
    L = np.full(P, np.nan)
    v = np.full((P, st.n), np.nan)
    nmin = np.zeros(P, dtype=int)
    cut = np.zeros(P, dtype=bool)
    hit = np.full(P, np.nan)
    lift = np.full((P, st.dim), np.nan)
    failed = np.zeros(P, dtype=bool)
    for i, rec in enumerate(recs):
        if rec is None:
            failed[i] = True
            continue
        L[i], v[i], nmin[i], cut[i], hit[i], lift[i] = rec
    return ReducedField(targets, tau_bar, L, L / (2.0 * math.sqrt(tau_bar)), v, nmin, cut, hit, lift, failed)


def solve_bvp(st: Spacetime, p, q, tau_bar: float, steps: int = DEFAULT_STEPS, with_frame: bool = False) -> LPath:
    """Minimising L-geodesic from ``p`` (``tau = 0``) to ``q`` (``tau = taubar``)."""
    rf = reduced_field(st, p, tau_bar, np.atleast_2d(q), steps, workers=1)
    if rf.failed[0]:
        raise ArithmeticError("no shooting start reached the target within tolerance")
    path = shoot(st, p, rf.v[0], tau_bar, steps, with_frame)
    path_hit = np.linalg.norm(path.endpoint - rf.lift[0])
    if not path_hit <= HIT_TOL:
        raise ArithmeticError(f"geodesic misses the target by {path_hit!r}")
    return path


# --------------------------------------------------------------------------
# Harnack quantities, frames, identities
# --------------------------------------------------------------------------


@dataclass
class HarnackData:
    """``H(X)`` along a path (at ``s > 0`` nodes) and ``K = int tau^{3/2} H dtau``."""

    s: np.ndarray
    H: np.ndarray
    K: float
    tau_bar: float


def harnack_data(st: Spacetime, path: LPath, check: bool = True) -> HarnackData:
    if check:
        res = geodesic_residual(st, path)
        if res > 1e-6:
            raise ValueError(f"path is not a geodesic (residual {res:.3g})")
    vals = np.array([float(st.harnack_integrand(si, path.x[j : j + 1], path.w[j : j + 1])[0]) for j, si in enumerate(path.s)])
    K = float(_simpson(vals, path.s[1] - path.s[0]))
    s = path.s
    H = np.full(s.shape, np.nan)
    H[1:] = vals[1:] / (2.0 * s[1:] ** 4)
    return HarnackData(s, H, K, path.tau_bar)


@dataclass
class FrameBundle:
    """Transported frame ``Y_i`` on the ``s``-grid; ``gram`` holds ``<Y_i, Y_j>``."""

    s: np.ndarray
    Y: np.ndarray
    gram: np.ndarray
    max_deviation: float


def _frame_at_end(st: Spacetime, q, tau_bar):
    E = st.tangent_basis(np.atleast_2d(q))[0]
    g = float(np.exp(2.0 * st.fields(tau_bar, np.atleast_2d(q)).U[0]))
    return E / math.sqrt(g)


def transport_frame(st: Spacetime, path: LPath, seed=None) -> FrameBundle:
    """Solve ``grad_X Y = -Ric(Y, .) + Y/(2 tau)`` from an orthonormal frame at ``taubar``.

    The transport matrix integrated with the geodesic is inverted at
    ``taubar``; ``Y = s Z`` removes the singularity at ``s = 0``.
    """
    if path.frame is None:
        if path.v is None:
            raise ValueError("frame transport needs a geodesic path")
        path = shoot(st, path.p, path.v, path.tau_bar, len(path.s) - 1, with_frame=True)
    s = path.s
    s_bar = s[-1]
    Yend = _frame_at_end(st, path.endpoint, path.tau_bar) if seed is None else np.atleast_2d(seed)
    Zend = Yend / s_bar
    Phi = path.frame
    Pinv = np.linalg.inv(Phi[-1])
    Z = np.einsum("kab,bc,ic->kia", Phi, Pinv, Zend)
    Y = s[:, None, None] * Z
    k = Y.shape[1]
    gram = np.empty((len(s), k, k))
    for j, sj in enumerate(s):
        g = float(np.exp(2.0 * st.fields(sj * sj, path.x[j : j + 1]).U[0]))
        gram[j] = g * Y[j] @ Y[j].T
    expect = (s * s / path.tau_bar)[:, None, None] * np.eye(k)
    dev = float(np.max(np.abs(gram - expect))) if seed is None else math.nan
    return FrameBundle(s, np.transpose(Y, (1, 0, 2)), gram, dev)


def _q_integrand(st: Spacetime, path: LPath, Ys: np.ndarray) -> np.ndarray:
    """``2 s^2 Q(X, Y)`` along the path for one transported field ``Ys`` (K+1, dim)."""
    out = np.zeros(len(path.s))
    for j, sj in enumerate(path.s):
        if sj == 0.0:
            continue
        x = path.x[j : j + 1]
        fl = st.fields(sj * sj, x, order=2)
        g = float(np.exp(2.0 * fl.U[0]))
        X = path.w[j] / (2.0 * sj)
        Y = Ys[j]
        YY = g * (Y @ Y)
        XX = g * (X @ X)
        XY = g * (X @ Y)
        kappa = float(st.sectional(fl)[0])
        HR = st.hess_R(fl)[0]
        dUt = fl.dUt[0]
        Ut, Utt = float(fl.Ut[0]), float(fl.Utt[0])
        Q = (
            -(Y @ HR @ Y)
            + 2.0 * kappa * (XX * YY - XY * XY)
            - 4.0 * (X @ dUt) * YY
            + 4.0 * (Y @ dUt) * XY
            - 2.0 * (Utt + 2.0 * Ut * Ut) * YY
            + 2.0 * Ut * Ut * YY
            - Ut * YY / (sj * sj)
        )
        out[j] = 2.0 * sj * sj * Q
    return out


def _fd_reduced(st, p, q, tau_bar, delta, steps, dtau=None):
    """Reduced length at ``q`` and at stencil points around it.

    Returns a dict with the centre value, chart-direction samples (torus,
    flat space) or geodesic-direction samples (sphere) and tau-shifted values.
    """
    q = np.asarray(q, dtype=float)
    n = st.n
    pts = [q]
    if st.kind == "sphere":
        E = st.tangent_basis(q[None])[0]
        for i in range(n):
            for sgn in (1, -1):
                pts.append(math.cos(delta) * q + math.sin(sgn * delta) * E[i])
    else:
        for i in range(n):
            for sgn in (1, -1):
                e = np.zeros(st.dim)
                e[i] = sgn * delta
                pts.append(q + e)
        for i in range(n):
            for j in range(i + 1, n):
                for a, b in ((1, 1), (1, -1), (-1, 1), (-1, -1)):
                    e = np.zeros(st.dim)
                    e[i] = a * delta
                    e[j] = b * delta
                    pts.append(q + e)
    rf = reduced_field(st, p, tau_bar, np.array(pts), steps, workers=1)
    out = {"rf": rf, "pts": pts}
    if dtau is not None:
        rp = reduced_field(st, p, tau_bar + dtau, q[None], steps, workers=1)
        rm = reduced_field(st, p, tau_bar - dtau, q[None], steps, workers=1)
        out["L_tp"] = float(rp.L[0])
        out["L_tm"] = float(rm.L[0])
    return out


def _derivatives(st, q, tau_bar, fd, delta):
    """Gradient norm squared, Laplacian and chart Hessian of ``L`` from stencil values."""
    L = fd["rf"].L
    n = st.n
    L0 = L[0]
    fl = st.fields(tau_bar, np.atleast_2d(q), order=1)
    g = float(np.exp(2.0 * fl.U[0]))
    if st.kind == "sphere":
        r = math.sqrt(g)
        h = r * delta
        grad = np.array([(L[1 + 2 * i] - L[2 + 2 * i]) / (2 * h) for i in range(n)])
        diag = np.array([(L[1 + 2 * i] - 2 * L0 + L[2 + 2 * i]) / (h * h) for i in range(n)])
        # geodesic second differences give the Hessian along orthonormal directions
        return float(grad @ grad), float(np.sum(diag)), None, grad
    grad = np.array([(L[1 + 2 * i] - L[2 + 2 * i]) / (2 * delta) for i in range(n)])
    H = np.zeros((n, n))
    for i in range(n):
        H[i, i] = (L[1 + 2 * i] - 2 * L0 + L[2 + 2 * i]) / (delta * delta)
    k = 1 + 2 * n
    for i in range(n):
        for j in range(i + 1, n):
            pp, pm, mp, mm = L[k : k + 4]
            H[i, j] = H[j, i] = (pp - pm - mp + mm) / (4 * delta * delta)
            k += 4
    grad_sq = float(grad @ grad) / g
    # covariant Hessian: subtract Christoffel terms of exp(2U) delta
    if st.kind == "conformal_torus":
        du = np.real(fl.dU[0])
        corr = np.outer(du, grad) + np.outer(grad, du) - (du @ grad) * np.eye(n)
        Hc = H - corr
    else:
        Hc = H
    lap = float(np.trace(Hc)) / g
    return grad_sq, lap, Hc, grad


def identity_residuals(
    st: Spacetime, p, q, tau_bar: float, delta: float = 0.02, dtau: float | None = None, steps: int = DEFAULT_STEPS
) -> dict:
    """Residuals of the gradient and time identities for ``L`` and ``l`` at ``q``.

    Derivatives of the reduced length come from centred differences of
    :func:`reduced_field` (space step ``delta``, time step ``dtau``). The
    ``l`` identities are reported twice: with the coefficients obtained by
    dividing the ``L`` identities by ``2 sqrt(taubar)`` (``K / (2 taubar^{3/2})``
    and ``K / taubar^{3/2}``) and with the ``K / (2 taubar^2)`` coefficients
    of the alternative statement.
    """
    dtau = delta * min(tau_bar, st.horizon - tau_bar) * 0.5 if dtau is None else dtau
    if not (0 < tau_bar - dtau and tau_bar + dtau <= st.horizon + 1e-12):
        raise ValueError("time stencil leaves the stored history")
    fd = _fd_reduced(st, p, q, tau_bar, delta, steps, dtau)
    rf = fd["rf"]
    if np.any(rf.failed):
        raise ArithmeticError("shooting failed on the difference stencil")
    smooth = not np.any(rf.cut)
    path = shoot(st, p, rf.v[0], tau_bar, steps)
    K = harnack_data(st, path).K
    L = float(rf.L[0])
    tb = tau_bar
    sq = math.sqrt(tb)
    R = float(np.real(st.fields(tb, np.atleast_2d(rf.lift[0])).R[0]))
    grad_sq, lap, _, _ = _derivatives(st, rf.lift[0], tb, fd, delta)
    dL_dt = (fd["L_tp"] - fd["L_tm"]) / (2 * dtau)
    l = L / (2 * sq)
    dl_dt = (fd["L_tp"] / (2 * math.sqrt(tb + dtau)) - fd["L_tm"] / (2 * math.sqrt(tb - dtau))) / (2 * dtau)
    grad_l_sq = grad_sq / (4 * tb)
    lap_l = lap / (2 * sq)
    n = st.n
    return {
        "q": np.asarray(q, dtype=float),
        "tau_bar": tb,
        "L": L,
        "l": l,
        "K": K,
        "R": R,
        "smooth": smooth,
        "L_grad": grad_sq - (-4 * tb * R + 2 * L / sq - 4 * K / sq),
        "L_time": dL_dt - (2 * sq * R - L / (2 * tb) + K / tb),
        "l_time": dl_dt - (-l / tb + R + K / (2 * tb**1.5)),
        "l_grad": grad_l_sq - (-R + l / tb - K / tb**1.5),
        "l_lap_slack": (-R + n / (2 * tb) - K / (2 * tb**1.5)) - lap_l,
        "l_time_alt": dl_dt - (-l / tb + R + K / (2 * tb * tb)),
        "l_grad_alt": grad_l_sq - (-R + l / tb - K / (2 * tb * tb)),
        "l_lap_slack_alt": (-R + n / (2 * tb) - K / (2 * tb * tb)) - lap_l,
        "L_lap_slack": (n / sq - 2 * sq * R - K / tb) - lap,
    }


def hessian_bound_check(
    st: Spacetime, p, q, tau_bar: float, delta: float = 0.02, steps: int = DEFAULT_STEPS
) -> dict:
    """Slack of ``Hess_L(Y, Y) <= 1/sqrt(taubar) - 2 sqrt(taubar) Ric(Y, Y) - int sqrt(tau) Q(X, Y) dtau``.

    ``Y`` runs over an orthonormal frame at ``(q, taubar)`` transported by the
    frame equation. Also returns the traced (Laplacian) version.
    """
    fd = _fd_reduced(st, p, q, tau_bar, delta, steps)
    rf = fd["rf"]
    if np.any(rf.failed):
        raise ArithmeticError("shooting failed on the difference stencil")
    q_end = rf.lift[0]
    _, lap, Hc, _ = _derivatives(st, q_end, tau_bar, fd, delta)
    path = shoot(st, p, rf.v[0], tau_bar, steps, with_frame=True)
    frame = transport_frame(st, path)
    fl = st.fields(tau_bar, np.atleast_2d(q_end))
    Ut = float(np.real(fl.Ut[0]))
    sq = math.sqrt(tau_bar)
    h = path.s[1] - path.s[0]
    rows = []
    L = fd["rf"].L
    for i in range(st.n):
        Ys = frame.Y[i]
        integral = float(_simpson(_q_integrand(st, path, Ys), h))
        Yend = Ys[-1]
        if st.kind == "sphere":
            r2 = float(np.exp(2.0 * fl.U[0]))
            hess = (L[1 + 2 * i] - 2 * L[0] + L[2 + 2 * i]) / (r2 * delta * delta)
        else:
            hess = float(Yend @ Hc @ Yend)
        rhs = 1.0 / sq - 2.0 * sq * Ut - integral
        rows.append({"hess": hess, "rhs": rhs, "slack": rhs - hess, "q_integral": integral})
    K = harnack_data(st, path).K
    R = float(np.real(fl.R[0]))
    lap_rhs = st.n / sq - 2 * sq * R - K / tau_bar
    return {
        "directions": rows,
        "min_slack": min(r["slack"] for r in rows),
        "laplacian": lap,
        "laplacian_rhs": lap_rhs,
        "laplacian_slack": lap_rhs - lap,
        "frame_deviation": frame.max_deviation,
        "smooth": not np.any(rf.cut),
    }


def ljacobi(st: Spacetime, path: LPath, seed) -> np.ndarray:
    """L-Jacobi field with ``lim sqrt(tau) grad_X Y = seed`` (chart-orthonormal basis at ``p``).

    Obtained as the complex-step derivative of the shooting map in the
    direction ``seed``: ``Y(s) = d gamma_{v + eps seed}(s) / d eps``.
    """
    if path.v is None:
        raise ValueError("Jacobi fields need a geodesic path")
    eps = 1e-30
    v = np.asarray(path.v, dtype=float) + 1j * eps * np.asarray(seed, dtype=float)
    W0 = 2.0 * v[None, :] @ st.tangent_basis(np.atleast_2d(path.p))[0]
    xs, _, _ = _rk4_paths(st, path.p[None, :].astype(complex), W0, path.s[-1], len(path.s) - 1)
    return np.imag(xs[:, 0]) / eps


def _covariant_ds(st: Spacetime, path: LPath, Z: np.ndarray) -> np.ndarray:
    """``grad_{X^} Z`` along the path, ``d/ds`` by fourth-order differences."""
    h = path.s[1] - path.s[0]
    dZ = np.gradient(Z, h, axis=0, edge_order=2)
    dZ[2:-2] = (Z[:-4] - 8 * Z[1:-3] + 8 * Z[3:-1] - Z[4:]) / (12.0 * h)
    out = np.empty_like(Z)
    for j, sj in enumerate(path.s):
        fl = st.fields(sj * sj, path.x[j : j + 1])
        out[j] = dZ[j] + st.gamma(path.x[j : j + 1], fl, path.w[j : j + 1], Z[j : j + 1])[0]
    return out


def jacobi_operator(st: Spacetime, path: LPath, Y: np.ndarray, connection_rate: bool = True) -> np.ndarray:
    """``Jac(Y)`` of the L-Jacobi equation, written in ``s``.

    With ``X = X^/(2s)`` and ``grad_X = grad_{X^}/(2s)``:
    ``Jac(Y) = grad_X grad_X Y + R(Y, X)X - 1/2 grad_Y grad R + grad_X Y/(2 tau)
    + 2 (grad_Y Ric)(X, .) + 2 Ric(grad_X Y, .) - (d Gamma/d tau)(X, Y)``.

    The last term comes from commuting ``grad_Y`` with ``grad_X`` when the
    connection depends on ``tau``; it vanishes on the sphere and in flat
    space. ``connection_rate=False`` drops it.
    """
    s = path.s
    s_safe = np.where(s > 0, s, np.nan)
    DY = _covariant_ds(st, path, Y) / (2.0 * s_safe[:, None])
    DDY = _covariant_ds(st, path, np.nan_to_num(DY)) / (2.0 * s_safe[:, None])
    out = np.full_like(Y, np.nan)
    for j, sj in enumerate(s):
        if sj == 0.0:
            continue
        x = path.x[j : j + 1]
        fl = st.fields(sj * sj, x, order=2)
        g = float(np.exp(2.0 * fl.U[0]))
        X = path.w[j] / (2.0 * sj)
        kappa = float(st.sectional(fl)[0])
        XX = g * (X @ X)
        XY = g * (X @ Y[j])
        riem = kappa * (XX * Y[j] - XY * X)
        HR = st.hess_R(fl)[0]
        hess_term = (HR @ Y[j]) / g
        dUt = fl.dUt[0]
        Ut = float(fl.Ut[0])
        out[j] = DDY[j] + riem - 0.5 * hess_term + DY[j] / (2.0 * sj * sj) + 2.0 * (Y[j] @ dUt) * X + 2.0 * Ut * DY[j]
        if connection_rate and st.kind == "conformal_torus":
            a = Y[j]
            out[j] -= a * (X @ dUt) + X * (a @ dUt) - (a @ X) * dUt
    return out


def jacobi_pairing(st: Spacetime, path: LPath, Y1: np.ndarray, Y2: np.ndarray, connection_rate: bool = True) -> float:
    """``-int 2 sqrt(tau) <Jac(Y1), Y2> dtau`` (``= -int 4 s^2 <Jac Y1, Y2> ds``)."""
    J = jacobi_operator(st, path, Y1, connection_rate)
    vals = np.zeros(len(path.s))
    for j, sj in enumerate(path.s):
        if sj == 0.0 or not np.all(np.isfinite(J[j])):
            continue
        g = float(np.exp(2.0 * st.fields(sj * sj, path.x[j : j + 1]).U[0]))
        vals[j] = -4.0 * sj * sj * g * (J[j] @ Y2[j])
    # the two end nodes use one-sided differences; drop them from the rule
    return float(_simpson(vals, path.s[1] - path.s[0]))


def first_variation(st: Spacetime, path: LPath, Y: np.ndarray) -> float:
    """First variation of the L-length along ``Y`` (values on the ``s``-grid).

    ``<X^, Y>|_0^sbar + int <Y, 2 s^2 grad R - grad_{X^} X^ - 4 s Ric(X^, .)> ds``.
    """
    acc_cov = _covariant_ds(st, path, path.w)
    vals = np.zeros(len(path.s))
    for j, sj in enumerate(path.s):
        x = path.x[j : j + 1]
        fl = st.fields(sj * sj, x)
        g = float(np.exp(2.0 * fl.U[0]))
        gradR = np.exp(-2.0 * fl.U[0]) * fl.dR[0]
        vec = 2.0 * sj * sj * gradR - acc_cov[j] - 4.0 * sj * float(fl.Ut[0]) * path.w[j]
        vals[j] = g * (Y[j] @ vec)
    interior = float(_simpson(vals, path.s[1] - path.s[0]))
    end = float(st.inner(path.tau_bar, path.x[-1:], path.w[-1:], Y[-1:])[0])
    start = float(st.inner(0.0, path.x[:1], path.w[:1], Y[:1])[0])
    return end - start + interior


# --------------------------------------------------------------------------
# Speed and distance bounds
# --------------------------------------------------------------------------


def speed_bound_check(st: Spacetime, path: LPath) -> dict:
    """Pointwise speed bound and the distance/speed consequences of the L bound.

    Uses ``C(n) = 20 n``; distances at ``g(0)`` are bounded above by the
    length of the chart straight segment (torus) or computed exactly.
    """
    C0 = curvature_bound(st)
    T = st.horizon
    n = st.n
    speed = np.array([0.25 * float(st.inner(si * si, path.x[j : j + 1], path.w[j : j + 1], path.w[j : j + 1])[0]) for j, si in enumerate(path.s)])
    v2 = float(speed[0])
    limit = float(_speed_limit(st, np.array(v2), path.tau_bar))
    Lg = l_length(st, path)
    tb = path.tau_bar
    # distance bound at g(0)
    d2 = np.array([_distance_sq_upper(st, path.p, path.x[j]) for j in range(len(path.s))])
    tau = path.s**2
    dist_rhs = 2.0 * np.sqrt(tau) * np.exp(2.0 * C0 * tau) * (Lg + 2.0 * n * C0 / 3.0 * tb**1.5)
    # exists s* with tau |X|^2 below the averaged bound
    mean_bound = Lg / (2.0 * math.sqrt(tb)) + n * C0 * tb / 3.0
    return {
        "C0": C0,
        "C_n": SPEED_CONSTANT_PER_DIM * n,
        "max_speed": float(np.max(speed)),
        "speed_limit": limit,
        "speed_ok": bool(np.all(speed <= limit * (1 + 1e-12) + 1e-14)),
        "distance_slack": float(np.min(dist_rhs - d2)),
        "speed_at_some_time_ok": bool(np.min(speed[1:]) <= mean_bound * (1 + 1e-9) + 1e-14),
    }


def _distance_sq_upper(st: Spacetime, a, b) -> float:
    if st.kind == "sphere":
        c = float(np.clip(np.real(a) @ np.real(b), -1.0, 1.0))
        return st.radius_sq(0.0) * math.acos(c) ** 2
    if st.kind == "euclidean":
        return float(st.scale * np.sum((b - a) ** 2))
    # length of the chart segment at tau = 0 (an upper bound for the distance)
    t = np.linspace(0.0, 1.0, 65)
    pts = np.real(a)[None, :] + t[:, None] * (np.real(b) - np.real(a))[None, :]
    U = st.fields(0.0, pts).U
    length = float(_simpson(np.exp(U) * np.linalg.norm(np.real(b) - np.real(a)), t[1] - t[0]))
    return length * length


# --------------------------------------------------------------------------
# Reduced volume
# --------------------------------------------------------------------------


def _sphere_latitudes(st: Spacetime, p, count: int):
    """Gauss-Legendre latitudes (in the angle from ``p``) and their weights for ``sin^{n-1}``."""
    x, w = np.polynomial.legendre.leggauss(count)
    theta = 0.5 * math.pi * (x + 1.0)
    wt = 0.5 * math.pi * w
    E = st.tangent_basis(p[None])[0]
    q = np.cos(theta)[:, None] * p[None, :] + np.sin(theta)[:, None] * E[0][None, :]
    n = st.n
    shell = 2.0 * math.pi ** (n / 2.0) / math.gamma(n / 2.0)  # area of the unit (n-1)-sphere
    return theta, q, wt * shell * np.sin(theta) ** (n - 1)


def reduced_volume(
    st: Spacetime, p, taus, targets=None, steps: int = DEFAULT_STEPS, latitudes: int = 24, workers: int | None = None
) -> dict:
    """``V(tau) = int tau^{-n/2} exp(-l(q, tau)) dV_{g(tau)}(q)`` for each ``tau``.

    Torus: ``targets`` is a regular sub-grid of the torus (default 16 x 16),
    weighted by the cell area times ``exp(2U)``. Sphere: Gauss-Legendre
    latitudes. Flat space: the closed-form ``l`` on a trapezoid box.
    """
    p = np.asarray(p, dtype=float)
    n = st.n
    rows = []
    for tau in taus:
        if st.kind == "euclidean":
            half = 12.0 * math.sqrt(tau / st.scale)
            ax = np.linspace(-half, half, 161)
            pts = np.stack(np.meshgrid(*([ax] * n), indexing="ij"), axis=-1).reshape(-1, n) + p
            l = st.scale * np.sum((pts - p) ** 2, axis=-1) / (4.0 * tau)
            wgt = (ax[1] - ax[0]) ** n * st.scale ** (n / 2.0) * np.ones(len(pts))
            ends = np.any(np.abs(pts - p) >= half - 1e-12, axis=-1)
            wgt = wgt * np.prod([np.where(np.isclose(np.abs(pts[:, i] - p[i]), half), 0.5, 1.0) for i in range(n)], axis=0)
            V = float(np.sum(tau ** (-n / 2.0) * np.exp(-l) * wgt))
            rows.append({"tau": tau, "V": V, "failed": 0, "min_l": float(np.min(l)), "min_L": float(np.min(l) * 2 * math.sqrt(tau)), "ends": int(ends.sum())})
            continue
        if st.kind == "sphere":
            theta, q, wq = _sphere_latitudes(st, p, latitudes)
            rf = reduced_field(st, p, tau, q, steps, workers=workers)
            r2 = st.radius_sq(tau)
            wgt = wq * r2 ** (n / 2.0)
        else:
            if targets is None:
                nx, ny = st.shape
                sx, sy = max(1, nx // 16), max(1, ny // 16)
                X = np.arange(0, nx, sx) * st.hx
                Y = np.arange(0, ny, sy) * st.hy
                q = np.stack(np.meshgrid(X, Y, indexing="ij"), axis=-1).reshape(-1, 2)
                cell = (sx * st.hx) * (sy * st.hy)
            else:
                q = np.asarray(targets, dtype=float)
                cell = st.lx * st.ly / len(q)
            rf = reduced_field(st, p, tau, q, steps, workers=workers)
            U = np.real(st.fields(tau, q).U)
            wgt = cell * np.exp(2.0 * U)
        frac_failed = float(np.mean(rf.failed))
        if frac_failed > 0.01:
            rows.append({"tau": tau, "V": math.nan, "failed": int(rf.failed.sum()), "min_l": math.nan, "min_L": math.nan, "field": rf})
            continue
        ok = ~rf.failed
        V = float(np.sum(tau ** (-n / 2.0) * np.exp(-rf.l[ok]) * wgt[ok]))
        rows.append(
            {"tau": tau, "V": V, "failed": int(rf.failed.sum()), "min_l": float(np.nanmin(rf.l)), "min_L": float(np.nanmin(rf.L)), "field": rf}
        )
    return {"rows": rows, "bound": (4.0 * math.pi) ** (n / 2.0)}


# --------------------------------------------------------------------------
# Export
# --------------------------------------------------------------------------


def export_reduced_field_csv(rf: ReducedField) -> str:
    """CSV with columns ``qx, qy, L, l, v_x, v_y, n_minima`` (extra coordinates appended)."""
    out = io.StringIO()
    wr = csv.writer(out, lineterminator="\n")
    dim = rf.targets.shape[1]
    names = ["qx", "qy", "qz", "qw"][:dim] if dim <= 4 else [f"q{i}" for i in range(dim)]
    vn = ["v_x", "v_y", "v_z", "v_w"][: rf.v.shape[1]]
    wr.writerow(names + ["L", "l"] + vn + ["n_minima"])
    for i in range(len(rf.L)):
        wr.writerow(
            [f"{c:.17g}" for c in rf.targets[i]]
            + [f"{rf.L[i]:.17g}", f"{rf.l[i]:.17g}"]
            + [f"{c:.17g}" for c in rf.v[i]]
            + [str(int(rf.n_minima[i]))]
        )
    return out.getvalue()


def export_volume_csv(result: dict) -> str:
    out = io.StringIO()
    wr = csv.writer(out, lineterminator="\n")
    wr.writerow(["tau", "V_tilde"])
    for r in result["rows"]:
        wr.writerow([f"{r['tau']:.17g}", f"{r['V']:.17g}"])
    return out.getvalue()
