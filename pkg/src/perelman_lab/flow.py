"""Ricci flow on the backends, metric histories and coupled potentials.

The torus flow is the conformal reduction ``du/dt = exp(-2u) Delta_flat u``
of ``dg/dt = -2 Ric`` (in two dimensions ``Ric = (R/2) g``), stepped with
the classical four-stage Runge-Kutta scheme. The round sphere and flat space
are evolved in closed form.

Potentials coupled to the flow solve backward heat equations in ``t``. They
are therefore integrated from terminal data at the final time ``t0`` forward
in ``tau = t0 - t``, where the equations are parabolic.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage

from . import geometry as geo
from .geometry import ConformalTorus, Euclidean, QuadraticField, RoundSphere

__all__ = [
    "CFLViolation",
    "ExtinctionError",
    "FlowConfig",
    "MetricHistory",
    "PotentialTrajectory",
    "backward_view",
    "cfl_limit",
    "evolve_potential",
    "gauge_pullback_F",
    "modified_flow_euclidean",
    "run_history",
    "sample",
    "scalar_floor",
    "step_forward",
]

EXTINCTION_FRACTION = 1e-6


class CFLViolation(ValueError):
    """Time step exceeds the explicit diffusion stability bound."""


class ExtinctionError(RuntimeError):
    """The round sphere shrinks to a point before the requested time."""

    def __init__(self, message: str, extinction_time: float):
        super().__init__(message)
        self.extinction_time = extinction_time


@dataclass(frozen=True)
class FlowConfig:
    """Time stepping parameters.

    ``dt`` of ``None`` selects the largest stable step on the torus and 64
    steps on the analytic backends.
    """

    dt: float | None = None
    scheme: str = "rk4"
    cfl_safety: float = 0.2
    max_steps: int = 1_000_000

    def __post_init__(self):
        if self.dt is not None and not self.dt > 0:
            raise ValueError("dt must be positive")
        if not 0.0 < self.cfl_safety <= 1.0:
            raise ValueError("CFL safety factor must lie in (0, 1]")
        if self.scheme not in ("rk4", "euler"):
            raise ValueError(f"unknown scheme {self.scheme!r}")


# --------------------------------------------------------------------------
# Single steps
# --------------------------------------------------------------------------


def cfl_limit(m, safety: float = 0.2) -> float:
    """Largest admissible step; infinite on the analytic backends."""
    if isinstance(m, ConformalTorus):
        h = min(m.hx, m.hy)
        return safety * h * h * float(np.exp(2.0 * m.u.min())) / 4.0
    return math.inf


def torus_rhs(u: np.ndarray, hx: float, hy: float) -> np.ndarray:
    """Conformal Ricci-flow velocity ``exp(-2u) Delta_flat u`` (equals ``-R/2``)."""
    return np.exp(-2.0 * u) * geo.flat_laplacian(u, hx, hy)


def _rk4(f, y, dt):
    k1 = f(y)
    k2 = f(y + 0.5 * dt * k1)
    k3 = f(y + 0.5 * dt * k2)
    k4 = f(y + dt * k3)
    return y + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def step_forward(m, dt: float, scheme: str = "rk4", cfl_safety: float = 0.2):
    """One Ricci-flow step of size ``dt``."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    if isinstance(m, Euclidean):
        return m
    if isinstance(m, RoundSphere):
        r2 = m.radius**2 - 2.0 * (m.n - 1) * dt
        if r2 <= 0.0:
            t_ext = m.radius**2 / (2.0 * (m.n - 1))
            raise ExtinctionError(f"sphere becomes extinct after t = {t_ext!r}", t_ext)
        return RoundSphere(m.n, math.sqrt(r2))
    limit = cfl_limit(m, cfl_safety)
    if dt > limit * (1.0 + 1e-12):
        raise CFLViolation(f"dt = {dt!r} exceeds the stability bound {limit!r}")
    hx, hy = m.hx, m.hy

    def rhs(u):
        return torus_rhs(u, hx, hy)

    if scheme == "euler":
        u = m.u + dt * rhs(m.u)
    else:
        u = _rk4(rhs, m.u, dt)
    return m.with_u(u)


# --------------------------------------------------------------------------
# Histories
# --------------------------------------------------------------------------


def _state_of(m) -> np.ndarray:
    if isinstance(m, ConformalTorus):
        return np.array(m.u)
    if isinstance(m, RoundSphere):
        return np.array(m.radius**2)
    return np.array(m.scale)


class MetricHistory:
    """Stored Ricci-flow snapshots, queryable in ``t`` or in ``tau = t0 - t``.

    Parameters
    ----------
    template : backend
        Any snapshot; supplies the variant, dimension and grid metadata.
    times : sequence of float
        Strictly increasing forward times; ``t0`` is the last one.
    states : ndarray
        Per-snapshot state: ``u`` grids (torus), ``r^2`` (sphere) or the
        metric scale (Euclidean).
    dt : float
        Step size that produced the history.
    interpolation : {"cubic", "linear"}
        Cubic uses Hermite interpolation with the flow velocity as slope.
    direction : {"forward", "backward"}
        Whether queries are in ``t`` or ``tau``.
    """

    def __init__(self, template, times, states, dt, interpolation="cubic", direction="forward"):
        times = np.array(times, dtype=float)
        states = np.array(states, dtype=float)
        if times.ndim != 1 or times.size < 1:
            raise ValueError("history needs at least one snapshot")
        if times.size > 1 and not np.all(np.diff(times) > 0):
            raise ValueError("snapshot times must be strictly increasing")
        if states.shape[0] != times.size:
            raise ValueError("one state per snapshot required")
        if interpolation not in ("cubic", "linear"):
            raise ValueError("interpolation must be 'cubic' or 'linear'")
        if direction not in ("forward", "backward"):
            raise ValueError("direction must be 'forward' or 'backward'")
        times.flags.writeable = False
        states.flags.writeable = False
        self.template = template
        self.times = times
        self.states = states
        self.dt = float(dt)
        self.interpolation = interpolation
        self.direction = direction
        self._slopes = None

    # -- basic properties -------------------------------------------------
    @property
    def kind(self) -> str:
        return self.template.kind

    @property
    def t0(self) -> float:
        return float(self.times[-1])

    @property
    def t_first(self) -> float:
        return float(self.times[0])

    @property
    def horizon(self) -> float:
        """Length of the stored interval, i.e. the largest admissible ``tau``."""
        return self.t0 - self.t_first

    def __len__(self) -> int:
        return self.times.size

    def param_range(self) -> tuple:
        if self.direction == "forward":
            return (self.t_first, self.t0)
        return (0.0, self.horizon)

    def to_forward_time(self, x: float) -> float:
        return float(x) if self.direction == "forward" else self.t0 - float(x)

    def backend_from_state(self, state: np.ndarray):
        tpl = self.template
        if isinstance(tpl, ConformalTorus):
            return tpl.with_u(state)
        if isinstance(tpl, RoundSphere):
            return RoundSphere(tpl.n, math.sqrt(float(state)))
        return Euclidean(tpl.n, tpl.half_width, tpl.resolution, float(state))

    def snapshot(self, k: int):
        return self.backend_from_state(self.states[k])

    def velocity(self, state: np.ndarray) -> np.ndarray:
        """Time derivative of the stored state under the flow."""
        tpl = self.template
        if isinstance(tpl, ConformalTorus):
            return torus_rhs(state, tpl.hx, tpl.hy)
        if isinstance(tpl, RoundSphere):
            return np.array(-2.0 * (tpl.n - 1))
        return np.array(0.0)

    @property
    def slopes(self) -> np.ndarray:
        if self._slopes is None:
            s = np.stack([self.velocity(x) for x in self.states])
            s.flags.writeable = False
            self._slopes = s
        return self._slopes

    # -- interpolation ----------------------------------------------------
    def locate(self, t: float) -> tuple:
        """Interval index ``k`` and fraction ``w`` with ``t = t_k + w (t_{k+1} - t_k)``."""
        lo, hi = self.t_first, self.t0
        tol = 1e-12 * max(1.0, abs(hi))
        if t < lo - tol or t > hi + tol:
            raise ValueError(f"time {t!r} outside stored range [{lo!r}, {hi!r}]")
        if len(self) == 1:
            return 0, 0.0
        t = min(max(t, lo), hi)
        k = int(np.searchsorted(self.times, t, side="right")) - 1
        k = min(max(k, 0), len(self) - 2)
        span = self.times[k + 1] - self.times[k]
        return k, (t - self.times[k]) / span

    def state_at_time(self, t: float) -> np.ndarray:
        """Interpolated state at forward time ``t``."""
        k, w = self.locate(t)
        if w == 0.0:
            return np.array(self.states[k])
        if w == 1.0:
            return np.array(self.states[k + 1])
        a, b = self.states[k], self.states[k + 1]
        if self.interpolation == "linear" or self.kind != "conformal_torus":
            # the sphere flow is linear in r^2 and flat space is static
            return (1.0 - w) * a + w * b
        span = self.times[k + 1] - self.times[k]
        da, db = self.slopes[k], self.slopes[k + 1]
        h00 = (1 + 2 * w) * (1 - w) ** 2
        h10 = w * (1 - w) ** 2
        h01 = w * w * (3 - 2 * w)
        h11 = w * w * (w - 1)
        return h00 * a + h10 * span * da + h01 * b + h11 * span * db

    def sample(self, x: float):
        """Backend at query parameter ``x`` (``t`` or ``tau`` per direction)."""
        return self.backend_from_state(self.state_at_time(self.to_forward_time(x)))

    def backward_view(self) -> "MetricHistory":
        flipped = "backward" if self.direction == "forward" else "forward"
        h = MetricHistory(self.template, self.times, self.states, self.dt, self.interpolation, flipped)
        h._slopes = self._slopes
        return h

    # -- text export ------------------------------------------------------
    def export_text(self) -> str:
        """Versioned text serialisation; reals at 17 significant digits."""
        tpl = self.template
        head = [
            "perelman-lab-history 1",
            f"variant={tpl.kind}",
            f"n={tpl.n}",
        ]
        if isinstance(tpl, ConformalTorus):
            head += [f"nx={tpl.shape[0]}", f"ny={tpl.shape[1]}", f"lx={tpl.lx:.17g}", f"ly={tpl.ly:.17g}"]
        elif isinstance(tpl, Euclidean):
            head += [f"half_width={tpl.half_width:.17g}", f"resolution={tpl.resolution}"]
        head += [
            f"dt={self.dt:.17g}",
            f"t0={self.t0:.17g}",
            f"count={len(self)}",
            f"interp={self.interpolation}",
            f"direction={self.direction}",
        ]
        out = io.StringIO()
        out.write(" ".join(head) + "\n")
        for t, s in zip(self.times, self.states):
            out.write(f"t {t:.17g}\n")
            rows = np.atleast_2d(s) if s.ndim <= 2 else s
            for row in np.atleast_2d(rows):
                out.write(" ".join(f"{v:.17g}" for v in np.atleast_1d(row)) + "\n")
        return out.getvalue()

    @classmethod
    def import_text(cls, text: str) -> "MetricHistory":
        lines = text.splitlines()
        head = lines[0].split()
        if head[:2] != ["perelman-lab-history", "1"]:
            raise ValueError("not a perelman-lab history (version 1)")
        meta = dict(item.split("=", 1) for item in head[2:])
        kind = meta["variant"]
        count = int(meta["count"])
        if kind == "conformal_torus":
            nx, ny = int(meta["nx"]), int(meta["ny"])
            rows_per = nx
        else:
            rows_per = 1
        times, states = [], []
        pos = 1
        for _ in range(count):
            tag, val = lines[pos].split()
            if tag != "t":
                raise ValueError(f"malformed snapshot header at line {pos + 1}")
            times.append(float(val))
            block = [[float(v) for v in lines[pos + 1 + r].split()] for r in range(rows_per)]
            pos += 1 + rows_per
            arr = np.array(block)
            states.append(arr if kind == "conformal_torus" else arr[0, 0])
        if kind == "conformal_torus":
            template = ConformalTorus(states[0], float(meta["lx"]), float(meta["ly"]))
        elif kind == "sphere":
            template = RoundSphere(int(meta["n"]), math.sqrt(states[0]))
        else:
            template = Euclidean(int(meta["n"]), float(meta["half_width"]), int(meta["resolution"]), states[0])
        return cls(template, times, states, float(meta["dt"]), meta["interp"], meta["direction"])


def backward_view(h: MetricHistory) -> MetricHistory:
    return h.backward_view()


def sample(h: MetricHistory, x: float):
    return h.sample(x)


def run_history(m0, T: float, cfg: FlowConfig = FlowConfig(), t_start: float = 0.0) -> MetricHistory:
    """Integrate the Ricci flow on ``[t_start, t_start + T]`` storing every step."""
    if not T > 0:
        raise ValueError("T must be positive")
    if isinstance(m0, RoundSphere):
        r2_end = m0.radius**2 - 2.0 * (m0.n - 1) * T
        if r2_end <= EXTINCTION_FRACTION * m0.radius**2:
            t_ext = (1.0 - EXTINCTION_FRACTION) * m0.radius**2 / (2.0 * (m0.n - 1))
            raise ExtinctionError(f"sphere becomes extinct at t = {t_ext!r} < T", t_ext)
    limit = cfl_limit(m0, cfg.cfl_safety)
    dt = cfg.dt if cfg.dt is not None else (limit if math.isfinite(limit) else T / 64.0)
    dt = min(dt, limit)
    steps = max(1, int(math.ceil(T / dt - 1e-9)))
    if steps > cfg.max_steps:
        raise ValueError(f"{steps} steps exceed max_steps = {cfg.max_steps}")
    dt = T / steps
    states = [_state_of(m0)]
    m = m0
    for _ in range(steps):
        if isinstance(m, RoundSphere):
            # closed form avoids drift in r^2
            m = RoundSphere(m0.n, math.sqrt(m0.radius**2 - 2.0 * (m0.n - 1) * dt * len(states)))
        else:
            m = step_forward(m, dt, cfg.scheme, cfg.cfl_safety)
        states.append(_state_of(m))
    times = t_start + dt * np.arange(steps + 1)
    return MetricHistory(m0, times, np.stack(states), dt)


def scalar_floor(h: MetricHistory) -> dict:
    """Slack of ``min R(., tau) >= -n / (2 (taubar - tau))`` along the backward flow.

    ``taubar`` is the stored horizon; returns the minimum slack over stored
    ``tau < taubar`` together with the per-snapshot values.
    """
    taubar = h.horizon
    n = h.template.n
    taus, slacks = [], []
    for k in range(len(h) - 1, 0, -1):
        tau = h.t0 - h.times[k]
        R = geo.scalar_curvature(h.snapshot(k))
        slacks.append(float(R.min()) + n / (2.0 * (taubar - tau)))
        taus.append(float(tau))
    return {"taubar": taubar, "tau": taus, "slack": slacks, "min_slack": min(slacks) if slacks else math.inf}


# --------------------------------------------------------------------------
# Potentials
# --------------------------------------------------------------------------

MODES = ("plain", "normalized", "gauge")


@dataclass
class PotentialTrajectory:
    """Potential ``f`` at each snapshot time of a history.

    ``values[k]`` is the potential at ``history.times[k]``: a node array on the
    torus and sphere, a :class:`QuadraticField` on the Euclidean backend.
    """

    history: MetricHistory
    times: np.ndarray
    values: list
    mode: str
    tau0: float | None = None
    extra: dict = field(default_factory=dict)

    def tau_at(self, k: int) -> float:
        if self.tau0 is None:
            raise ValueError("trajectory has no scale parameter")
        return self.tau0 - float(self.times[k])


def _tau_of(mode, tau0, t):
    if mode != "normalized":
        return None
    tau = tau0 - t
    if not tau > 0:
        raise ValueError("tau reaches zero inside the run")
    return tau


def _torus_potential_rhs(u, f, hx, hy, mode, n, tau_w):
    """``df/dtau`` for the backward-integrated potential equations."""
    e = np.exp(-2.0 * u)
    lap_f = e * geo.flat_laplacian(f, hx, hy)
    R = -2.0 * e * geo.flat_laplacian(u, hx, hy)
    if mode == "gauge":
        return lap_f + R
    rhs = lap_f - e * geo.flat_grad_sq(f, hx, hy) + R
    if mode == "normalized":
        rhs = rhs - n / (2.0 * tau_w)
    return rhs


def evolve_potential(
    h: MetricHistory, f_data, mode: str = "plain", tau0: float | None = None, anchor: str = "final"
) -> PotentialTrajectory:
    """Potential coupled to a stored flow.

    Modes (in forward time ``t``):

    * ``plain``: ``df/dt = -Delta f + |grad f|^2 - R``
    * ``normalized``: the plain equation plus ``n / (2 tau)``, ``tau = tau0 - t``
    * ``gauge``: ``df/dt = -Delta f - R``

    ``f_data`` is the potential at the last snapshot (``anchor="final"``) or
    the first (``anchor="initial"``). Grid potentials must be anchored at the
    final time and are integrated towards earlier times with the history's
    step, the metric interpolated between snapshots. The analytic backends use
    closed forms and accept either anchor.
    """
    if anchor not in ("final", "initial"):
        raise ValueError("anchor must be 'final' or 'initial'")
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "normalized" and tau0 is None:
        raise ValueError("normalized mode needs tau0")
    if h.direction != "forward":
        h = h.backward_view()
    tpl = h.template
    n = tpl.n
    K = len(h)
    times = np.array(h.times)
    if mode == "normalized":
        _tau_of(mode, tau0, times[-1])

    ka = K - 1 if anchor == "final" else 0
    t_a = float(times[ka])

    def log_tau_ratio(t):
        return math.log((tau0 - t) / (tau0 - t_a)) if mode == "normalized" else 0.0

    if isinstance(tpl, Euclidean):
        if not isinstance(f_data, QuadraticField):
            raise TypeError("Euclidean potentials must be QuadraticField instances")
        s = tpl.scale
        a_a, b_a = f_data.a, f_data.b
        vals = []
        for t in times:
            if mode == "gauge":
                a, b = a_a, b_a + 2.0 * n * a_a * (t_a - t) / s
            elif a_a == 0.0:
                a, b = 0.0, b_a
            else:
                inv = 1.0 / a_a + 4.0 * (t_a - t) / s
                if not inv > 0:
                    raise ValueError("quadratic potential blows up inside the run")
                a = 1.0 / inv
                b = b_a + 0.5 * n * math.log(a_a / a)
            if mode == "normalized":
                b -= 0.5 * n * log_tau_ratio(t)
            vals.append(QuadraticField.make(a, b, f_data.center))
        return PotentialTrajectory(h, times, vals, mode, tau0)

    if isinstance(tpl, RoundSphere):
        f_a = float(geo.sample(tpl, f_data)[0])
        r2_a = float(h.states[ka])
        vals = []
        for k, t in enumerate(times):
            f = f_a + 0.5 * n * math.log(float(h.states[k]) / r2_a)
            if mode == "normalized":
                f -= 0.5 * n * log_tau_ratio(t)
            vals.append(np.array([f]))
        return PotentialTrajectory(h, times, vals, mode, tau0)

    if anchor != "final":
        raise ValueError("grid potentials solve a backward heat equation; anchor them at the final time")
    hx, hy = tpl.hx, tpl.hy
    f = np.array(geo.sample(tpl, f_data), dtype=float)
    out = [None] * K
    out[-1] = f.copy()
    for k in range(K - 1, 0, -1):
        t_hi, t_lo = times[k], times[k - 1]
        d = t_hi - t_lo
        u_hi = h.states[k]
        u_mid = h.state_at_time(0.5 * (t_hi + t_lo))
        u_lo = h.states[k - 1]
        tw = [_tau_of(mode, tau0, t) for t in (t_hi, 0.5 * (t_hi + t_lo), t_lo)]
        k1 = _torus_potential_rhs(u_hi, f, hx, hy, mode, n, tw[0])
        k2 = _torus_potential_rhs(u_mid, f + 0.5 * d * k1, hx, hy, mode, n, tw[1])
        k3 = _torus_potential_rhs(u_mid, f + 0.5 * d * k2, hx, hy, mode, n, tw[1])
        k4 = _torus_potential_rhs(u_lo, f + d * k3, hx, hy, mode, n, tw[2])
        f = f + (d / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        out[k - 1] = f.copy()
    return PotentialTrajectory(h, times, out, mode, tau0)


# --------------------------------------------------------------------------
# Gauge equivalence
# --------------------------------------------------------------------------


def modified_flow_euclidean(n: int, scale0: float, f0: QuadraticField, T: float, steps: int = 256) -> list:
    """Modified flow ``dg/dt = -2(Ric + Hess f)``, ``df/dt = -Delta f - R`` on R^n.

    For ``g = s delta`` and ``f = a |x - c|^2 + b`` the pair reduces to
    ``ds/dt = -4a``, ``da/dt = 0``, ``db/dt = -2 n a / s``, stepped with RK4.
    Returns ``(t, scale, QuadraticField)`` triples.
    """
    a = f0.a
    dt = T / steps

    def rhs(y):
        s, b = y
        return np.array([-4.0 * a, -2.0 * n * a / s])

    y = np.array([scale0, f0.b])
    out = [(0.0, float(y[0]), QuadraticField.make(a, float(y[1]), f0.center))]
    for i in range(steps):
        y = _rk4(rhs, y, dt)
        if y[0] <= 0:
            raise ExtinctionError("modified flow metric degenerates", (i + 1) * dt)
        out.append(((i + 1) * dt, float(y[0]), QuadraticField.make(a, float(y[1]), f0.center)))
    return out


def _spectral_derivative(a: np.ndarray, length: float, axis: int) -> np.ndarray:
    n = a.shape[axis]
    k = 2.0 * math.pi * np.fft.fftfreq(n, d=length / n)
    if n % 2 == 0:
        k[n // 2] = 0.0
    shape = [1, 1]
    shape[axis] = n
    return np.real(np.fft.ifft(1j * k.reshape(shape) * np.fft.fft(a, axis=axis), axis=axis))


def gauge_pullback_F(traj: PotentialTrajectory, stride: int = 2) -> dict:
    """Torus gauge check: the energy of the pulled-back pair.

    The diffeomorphisms ``psi_t`` solve ``d psi/dt = -grad_g f (psi, t)`` from
    the identity; they carry Ricci flow with the plain potential to the
    modified flow ``dg/dt = -2(Ric + Hess f)`` with the gauge potential. The
    energy of the pulled-back pair is evaluated by change of variables,
    ``sum Q(psi(x)) exp(2u(psi(x))) det D psi(x) dx dy`` with
    ``Q = (R + |grad f|^2) e^{-f}``, and compared with the direct value.
    """
    from .functionals import eval_F

    h = traj.history
    tpl = h.template
    if not isinstance(tpl, ConformalTorus):
        raise TypeError("pull-back check is defined on the torus")
    if traj.mode != "plain":
        raise ValueError("pull-back check needs a plain-mode trajectory")
    nx, ny = tpl.shape
    hx, hy = tpl.hx, tpl.hy
    X = geo.coordinates(tpl)
    pos = X.reshape(-1, 2).copy()

    def coeffs(k):
        u = h.states[k]
        f = traj.values[k]
        e = np.exp(-2.0 * u)
        vx = -e * geo.dx_c(f, hx)
        vy = -e * geo.dy_c(f, hy)
        return [ndimage.spline_filter(a, order=3, mode="grid-wrap") for a in (vx, vy)]

    def velocity(cs, p):
        idx = np.stack([p[:, 0] / hx, p[:, 1] / hy])
        return np.stack(
            [ndimage.map_coordinates(c, idx, order=3, mode="grid-wrap", prefilter=False) for c in cs],
            axis=-1,
        )

    def pulled_energy(k, p):
        m = h.snapshot(k)
        f = traj.values[k]
        R = geo.scalar_curvature(m)
        q = (R + geo.grad_norm_sq(m, f)) * np.exp(-f) * np.exp(2.0 * m.u)
        qc = ndimage.spline_filter(q, order=3, mode="grid-wrap")
        idx = np.stack([p[:, 0] / hx, p[:, 1] / hy])
        qv = ndimage.map_coordinates(qc, idx, order=3, mode="grid-wrap", prefilter=False).reshape(nx, ny)
        disp = p.reshape(nx, ny, 2) - X
        j11 = 1.0 + _spectral_derivative(disp[..., 0], tpl.lx, 0)
        j12 = _spectral_derivative(disp[..., 0], tpl.ly, 1)
        j21 = _spectral_derivative(disp[..., 1], tpl.lx, 0)
        j22 = 1.0 + _spectral_derivative(disp[..., 1], tpl.ly, 1)
        return float(np.sum(qv * (j11 * j22 - j12 * j21)) * hx * hy)

    ks = list(range(0, len(h) - stride, stride))
    times, direct, pulled = [], [], []
    cache = {}

    def cs(k):
        if k not in cache:
            cache[k] = coeffs(k)
        return cache[k]

    for k in ks:
        times.append(float(h.times[k]))
        direct.append(eval_F(h.snapshot(k), traj.values[k]))
        pulled.append(pulled_energy(k, pos))
        d = h.times[k + stride] - h.times[k]
        c0, c1, c2 = cs(k), cs(k + stride // 2) if stride % 2 == 0 else None, cs(k + stride)
        if c1 is None:
            raise ValueError("stride must be even")
        k1 = velocity(c0, pos)
        k2 = velocity(c1, pos + 0.5 * d * k1)
        k3 = velocity(c1, pos + 0.5 * d * k2)
        k4 = velocity(c2, pos + d * k3)
        pos = pos + (d / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        cache.pop(k, None)
    err = [abs(a - b) / max(abs(a), 1e-300) for a, b in zip(direct, pulled)]
    return {"t": times, "F_direct": direct, "F_pulled": pulled, "max_rel_diff": max(err) if err else 0.0}
