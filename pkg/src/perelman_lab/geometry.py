"""Manifold backends, curvature and metric-weighted calculus.

Three backends are provided.

``Euclidean``
    Flat R^n with the constant metric ``scale * delta``. Fields are
    :class:`AnalyticField` objects carrying closed-form value, gradient and
    Hessian callables; they are sampled on a truncated box of quadrature nodes.
``RoundSphere``
    The round n-sphere of radius ``radius``. Only constant fields are
    representable; the sphere is a single "node" carrying the whole volume and
    tensors are written in an orthonormal frame.
``ConformalTorus``
    The 2-torus with metric ``exp(2u) (dx^2 + dy^2)``, ``u`` stored on a
    uniform periodic grid. Derivatives are second-order centered differences
    and the Laplacian is the compact five-point stencil, so the discrete
    Laplace-Beltrami operator is symmetric in the ``dV`` inner product.

Every operation returns node arrays. Scalars have shape ``nodes_shape(m)``;
symmetric 2-tensors carry two trailing axes of length ``n`` (lower indices,
coordinate basis).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Union

import numpy as np

__all__ = [
    "AnalyticField",
    "ConformalTorus",
    "Euclidean",
    "RoundSphere",
    "constant_field",
    "coordinates",
    "fourier_field",
    "gaussian_potential",
    "gradient",
    "grad_norm_sq",
    "hessian",
    "integrate",
    "inverse_metric",
    "laplace_beltrami",
    "metric",
    "nodes_shape",
    "quadratic_field",
    "QuadraticField",
    "rescale",
    "ricci",
    "sample",
    "scalar_curvature",
    "sym_norm_sq",
    "sym_trace",
    "volume",
]


# --------------------------------------------------------------------------
# Analytic fields for the Euclidean backend
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class AnalyticField:
    """Closed-form scalar field on R^n.

    Parameters
    ----------
    value, grad, hess : callable
        Functions of coordinates ``x`` with shape ``(..., n)`` returning arrays
        of shape ``(...)``, ``(..., n)`` and ``(..., n, n)``.
    """

    value: Callable[[np.ndarray], np.ndarray]
    grad: Callable[[np.ndarray], np.ndarray]
    hess: Callable[[np.ndarray], np.ndarray]

    def shift(self, c: float) -> "AnalyticField":
        """Return ``self + c`` for a constant ``c``."""
        v = self.value
        return AnalyticField(lambda x: v(x) + c, self.grad, self.hess)

    def scaled(self, a: float) -> "AnalyticField":
        v, g, h = self.value, self.grad, self.hess
        return AnalyticField(lambda x: a * v(x), lambda x: a * g(x), lambda x: a * h(x))

    def __add__(self, other: "AnalyticField") -> "AnalyticField":
        if not isinstance(other, AnalyticField):
            return self.shift(float(other))
        a, b = self, other
        return AnalyticField(
            lambda x: a.value(x) + b.value(x),
            lambda x: a.grad(x) + b.grad(x),
            lambda x: a.hess(x) + b.hess(x),
        )


def constant_field(c: float) -> AnalyticField:
    def grad(x):
        return np.zeros(x.shape)

    def hess(x):
        return np.zeros(x.shape + (x.shape[-1],))

    return AnalyticField(lambda x: np.full(x.shape[:-1], float(c)), grad, hess)


@dataclass(frozen=True)
class QuadraticField(AnalyticField):
    """``a |x - center|^2 + b``; closed under the potential flows on R^n."""

    a: float = 0.0
    b: float = 0.0
    center: tuple | None = None

    @classmethod
    def make(cls, a: float, b: float = 0.0, center=None) -> "QuadraticField":
        c = None if center is None else tuple(float(t) for t in center)
        cvec = None if c is None else np.asarray(c)

        def shifted(x):
            return x if cvec is None else x - cvec

        def value(x):
            y = shifted(x)
            return a * np.sum(y * y, axis=-1) + b

        def grad(x):
            return 2.0 * a * shifted(x)

        def hess(x):
            n = x.shape[-1]
            return np.broadcast_to(2.0 * a * np.eye(n), x.shape[:-1] + (n, n)).copy()

        return cls(value, grad, hess, float(a), float(b), c)

    def shift(self, c: float) -> "QuadraticField":
        return QuadraticField.make(self.a, self.b + c, self.center)


def quadratic_field(a: float, center=None, c: float = 0.0) -> QuadraticField:
    """``a |x - center|^2 + c``."""
    return QuadraticField.make(a, c, center)


def gaussian_potential(n: int, tau: float, center=None) -> AnalyticField:
    """Heat-kernel potential ``|x - c|^2 / (4 tau) + (n/2) ln(4 pi tau)``."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    return quadratic_field(1.0 / (4.0 * tau), center, 0.5 * n * math.log(4.0 * math.pi * tau))


def fourier_field(wavevectors, amplitudes, phases) -> AnalyticField:
    """Finite sum ``sum_j a_j sin(k_j . x + p_j)``."""
    k = np.atleast_2d(np.asarray(wavevectors, dtype=float))
    a = np.asarray(amplitudes, dtype=float)
    p = np.asarray(phases, dtype=float)

    def arg(x):
        return x @ k.T + p

    def value(x):
        return np.sin(arg(x)) @ a

    def grad(x):
        return (np.cos(arg(x)) * a) @ k

    def hess(x):
        w = -np.sin(arg(x)) * a
        return np.einsum("...j,ja,jb->...ab", w, k, k)

    return AnalyticField(value, grad, hess)


# --------------------------------------------------------------------------
# Backends
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Euclidean:
    """Flat R^n, metric ``scale * delta``, box ``[-half_width, half_width]^n``."""

    n: int
    half_width: float = 12.0
    resolution: int = 97
    scale: float = 1.0

    kind = "euclidean"

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("dimension must be >= 1")
        if self.half_width <= 0 or self.resolution < 8 or self.scale <= 0:
            raise ValueError("invalid Euclidean quadrature parameters")

    @classmethod
    def for_scale(cls, n: int, tau: float, resolution: int = 97, widths: float = 12.0):
        """Box wide enough for Gaussian integrands of scale ``tau``."""
        return cls(n, widths * math.sqrt(tau), resolution)

    @cached_property
    def axis(self) -> np.ndarray:
        return np.linspace(-self.half_width, self.half_width, self.resolution)

    @cached_property
    def nodes(self) -> np.ndarray:
        grids = np.meshgrid(*([self.axis] * self.n), indexing="ij")
        x = np.stack(grids, axis=-1)
        x.flags.writeable = False
        return x

    @property
    def spacing(self) -> float:
        return 2.0 * self.half_width / (self.resolution - 1)


@dataclass(frozen=True)
class RoundSphere:
    """Round n-sphere of radius ``radius``."""

    n: int
    radius: float

    kind = "sphere"

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("dimension must be >= 1")
        if not self.radius > 0:
            raise ValueError("sphere radius must be positive")


@dataclass(frozen=True, eq=False)
class ConformalTorus:
    """Flat torus ``[0,lx) x [0,ly)`` with metric ``exp(2u)(dx^2 + dy^2)``."""

    u: np.ndarray
    lx: float = 2.0 * math.pi
    ly: float = 2.0 * math.pi

    kind = "conformal_torus"
    n = 2

    def __post_init__(self):
        u = np.array(self.u, dtype=float)
        if u.ndim != 2 or min(u.shape) < 8:
            raise ValueError("torus grid must be 2-D with at least 8 nodes per axis")
        if not (self.lx > 0 and self.ly > 0):
            raise ValueError("torus periods must be positive")
        if not np.all(np.isfinite(u)):
            raise ValueError("conformal factor must be finite")
        u.flags.writeable = False
        object.__setattr__(self, "u", u)

    @property
    def shape(self) -> tuple:
        return self.u.shape

    @property
    def hx(self) -> float:
        return self.lx / self.u.shape[0]

    @property
    def hy(self) -> float:
        return self.ly / self.u.shape[1]

    @classmethod
    def flat(cls, nx: int, ny: int | None = None, lx: float = 2 * math.pi, ly: float | None = None):
        ny = nx if ny is None else ny
        ly = lx if ly is None else ly
        return cls(np.zeros((nx, ny)), lx, ly)

    @classmethod
    def from_function(cls, fn, nx: int, ny: int | None = None, lx=2 * math.pi, ly=None):
        """Sample ``u = fn(x, y)`` on the grid."""
        ny = nx if ny is None else ny
        ly = lx if ly is None else ly
        x = np.arange(nx) * (lx / nx)
        y = np.arange(ny) * (ly / ny)
        X, Y = np.meshgrid(x, y, indexing="ij")
        return cls(np.asarray(fn(X, Y), dtype=float), lx, ly)

    def with_u(self, u: np.ndarray) -> "ConformalTorus":
        return ConformalTorus(u, self.lx, self.ly)


Backend = Union[Euclidean, RoundSphere, ConformalTorus]
Field = Union[np.ndarray, AnalyticField, float]


# --------------------------------------------------------------------------
# Periodic finite differences
# --------------------------------------------------------------------------


def dx_c(a: np.ndarray, h: float) -> np.ndarray:
    return (np.roll(a, -1, 0) - np.roll(a, 1, 0)) / (2.0 * h)


def dy_c(a: np.ndarray, h: float) -> np.ndarray:
    return (np.roll(a, -1, 1) - np.roll(a, 1, 1)) / (2.0 * h)


def dxx(a: np.ndarray, h: float) -> np.ndarray:
    return (np.roll(a, -1, 0) - 2.0 * a + np.roll(a, 1, 0)) / (h * h)


def dyy(a: np.ndarray, h: float) -> np.ndarray:
    return (np.roll(a, -1, 1) - 2.0 * a + np.roll(a, 1, 1)) / (h * h)


def flat_laplacian(a: np.ndarray, hx: float, hy: float) -> np.ndarray:
    return dxx(a, hx) + dyy(a, hy)


def flat_grad_sq(a: np.ndarray, hx: float, hy: float) -> np.ndarray:
    """Average of squared one-sided differences.

    Second-order accurate, free of checkerboard null modes, and
    ``sum(flat_grad_sq(a)) == -sum(a * flat_laplacian(a))`` exactly.
    """
    fx = np.roll(a, -1, 0) - a
    fy = np.roll(a, -1, 1) - a
    return (fx * fx + np.roll(fx, 1, 0) ** 2) / (2.0 * hx * hx) + (
        fy * fy + np.roll(fy, 1, 1) ** 2
    ) / (2.0 * hy * hy)


def flat_grad_dot(a: np.ndarray, b: np.ndarray, hx: float, hy: float) -> np.ndarray:
    """Polarisation of :func:`flat_grad_sq`."""
    ax = np.roll(a, -1, 0) - a
    bx = np.roll(b, -1, 0) - b
    ay = np.roll(a, -1, 1) - a
    by = np.roll(b, -1, 1) - b
    px = ax * bx
    py = ay * by
    return (px + np.roll(px, 1, 0)) / (2.0 * hx * hx) + (py + np.roll(py, 1, 1)) / (2.0 * hy * hy)


def flat_weighted_div(a: np.ndarray, w: np.ndarray, hx: float, hy: float) -> np.ndarray:
    """Conservative ``div(w grad a)`` with edge-averaged weights.

    Minus the adjoint of the edge form ``sum_e wbar_e (da)_e (db)_e / h^2``:
    ``sum b * flat_weighted_div(a, w) = -flat_edge_form(a, b, w)`` exactly.
    """
    wx = 0.5 * (w + np.roll(w, -1, 0))
    wy = 0.5 * (w + np.roll(w, -1, 1))
    fx = wx * (np.roll(a, -1, 0) - a) / (hx * hx)
    fy = wy * (np.roll(a, -1, 1) - a) / (hy * hy)
    return fx - np.roll(fx, 1, 0) + fy - np.roll(fy, 1, 1)


def flat_edge_form(a: np.ndarray, b: np.ndarray, w: np.ndarray, hx: float, hy: float) -> float:
    """``sum_e wbar_e (a_j - a_i)(b_j - b_i) / h_e^2`` over grid edges."""
    wx = 0.5 * (w + np.roll(w, -1, 0))
    wy = 0.5 * (w + np.roll(w, -1, 1))
    sx = wx * (np.roll(a, -1, 0) - a) * (np.roll(b, -1, 0) - b) / (hx * hx)
    sy = wy * (np.roll(a, -1, 1) - a) * (np.roll(b, -1, 1) - b) / (hy * hy)
    return float(np.sum(sx) + np.sum(sy))


# --------------------------------------------------------------------------
# Sampling and node geometry
# --------------------------------------------------------------------------


def nodes_shape(m: Backend) -> tuple:
    if isinstance(m, ConformalTorus):
        return m.shape
    if isinstance(m, Euclidean):
        return (m.resolution,) * m.n
    return (1,)


def coordinates(m: Backend) -> np.ndarray:
    """Node coordinates with a trailing axis of length n."""
    if isinstance(m, Euclidean):
        return m.nodes
    if isinstance(m, ConformalTorus):
        nx, ny = m.shape
        X, Y = np.meshgrid(np.arange(nx) * m.hx, np.arange(ny) * m.hy, indexing="ij")
        return np.stack([X, Y], axis=-1)
    raise TypeError("the sphere backend has no coordinate chart")


def sample(m: Backend, phi: Field) -> np.ndarray:
    """Node values of a field."""
    shape = nodes_shape(m)
    if isinstance(phi, AnalyticField):
        if not isinstance(m, Euclidean):
            raise TypeError("analytic fields live on the Euclidean backend")
        return np.asarray(phi.value(m.nodes), dtype=float)
    arr = np.asarray(phi, dtype=float)
    if arr.ndim == 0:
        return np.full(shape, float(arr))
    if arr.shape != shape:
        raise ValueError(f"field shape {arr.shape} does not match backend nodes {shape}")
    return arr


def _sphere_constant(m: RoundSphere, phi: Field) -> float:
    arr = sample(m, phi)
    return float(arr[0])


def metric(m: Backend) -> np.ndarray:
    if isinstance(m, ConformalTorus):
        e = np.exp(2.0 * m.u)
        g = np.zeros(m.shape + (2, 2))
        g[..., 0, 0] = e
        g[..., 1, 1] = e
        return g
    if isinstance(m, Euclidean):
        return m.scale * np.eye(m.n)
    return np.eye(m.n)[None]


def inverse_metric(m: Backend) -> np.ndarray:
    if isinstance(m, ConformalTorus):
        e = np.exp(-2.0 * m.u)
        g = np.zeros(m.shape + (2, 2))
        g[..., 0, 0] = e
        g[..., 1, 1] = e
        return g
    if isinstance(m, Euclidean):
        return np.eye(m.n) / m.scale
    return np.eye(m.n)[None]


def volume_weights(m: Backend) -> np.ndarray:
    """Quadrature weights ``dV`` per node."""
    if isinstance(m, ConformalTorus):
        return np.exp(2.0 * m.u) * (m.hx * m.hy)
    if isinstance(m, Euclidean):
        return np.full(nodes_shape(m), m.spacing**m.n * m.scale ** (0.5 * m.n))
    n = m.n
    area = 2.0 * math.pi ** (0.5 * (n + 1)) / math.gamma(0.5 * (n + 1))
    return np.array([area * m.radius**n])


# --------------------------------------------------------------------------
# Curvature
# --------------------------------------------------------------------------


def scalar_curvature(m: Backend) -> np.ndarray:
    """Scalar curvature R at the nodes."""
    if isinstance(m, ConformalTorus):
        return -2.0 * np.exp(-2.0 * m.u) * flat_laplacian(m.u, m.hx, m.hy)
    if isinstance(m, Euclidean):
        return np.zeros(nodes_shape(m))
    return np.array([m.n * (m.n - 1) / m.radius**2])


def ricci(m: Backend) -> np.ndarray:
    """Ricci tensor; ``(R/2) g`` on the torus, ``(n-1)/r^2`` on the sphere."""
    if isinstance(m, ConformalTorus):
        return 0.5 * scalar_curvature(m)[..., None, None] * metric(m)
    if isinstance(m, Euclidean):
        return np.zeros(nodes_shape(m) + (m.n, m.n))
    return ((m.n - 1) / m.radius**2) * np.eye(m.n)[None]


# --------------------------------------------------------------------------
# Differential operators
# --------------------------------------------------------------------------


def gradient(m: Backend, phi: Field) -> np.ndarray:
    """Coordinate components of the differential ``d phi``."""
    if isinstance(m, ConformalTorus):
        a = sample(m, phi)
        return np.stack([dx_c(a, m.hx), dy_c(a, m.hy)], axis=-1)
    if isinstance(m, Euclidean):
        if not isinstance(phi, AnalyticField):
            return np.zeros(nodes_shape(m) + (m.n,)) if np.ndim(phi) == 0 else _no_fd()
        return np.asarray(phi.grad(m.nodes), dtype=float)
    _sphere_constant(m, phi)
    return np.zeros((1, m.n))


def _no_fd():
    raise TypeError("Euclidean fields must be AnalyticField instances or constants")


def grad_norm_sq(m: Backend, phi: Field) -> np.ndarray:
    """``|grad phi|_g^2`` at the nodes (non-negative)."""
    if isinstance(m, ConformalTorus):
        a = sample(m, phi)
        return np.exp(-2.0 * m.u) * flat_grad_sq(a, m.hx, m.hy)
    if isinstance(m, Euclidean):
        d = gradient(m, phi)
        return np.sum(d * d, axis=-1) / m.scale
    _sphere_constant(m, phi)
    return np.zeros(1)


def grad_dot(m: Backend, a: Field, b: Field) -> np.ndarray:
    """``<grad a, grad b>_g``; polarisation of :func:`grad_norm_sq`."""
    if isinstance(m, ConformalTorus):
        return np.exp(-2.0 * m.u) * flat_grad_dot(sample(m, a), sample(m, b), m.hx, m.hy)
    if isinstance(m, Euclidean):
        return np.sum(gradient(m, a) * gradient(m, b), axis=-1) / m.scale
    return np.zeros(1)


def laplace_beltrami(m: Backend, phi: Field) -> np.ndarray:
    """``Delta^g phi``; on the torus ``exp(-2u)`` times the flat five-point Laplacian."""
    if isinstance(m, ConformalTorus):
        return np.exp(-2.0 * m.u) * flat_laplacian(sample(m, phi), m.hx, m.hy)
    if isinstance(m, Euclidean):
        if not isinstance(phi, AnalyticField):
            return np.zeros(nodes_shape(m)) if np.ndim(phi) == 0 else _no_fd()
        return np.trace(phi.hess(m.nodes), axis1=-2, axis2=-1) / m.scale
    _sphere_constant(m, phi)
    return np.zeros(1)


def hessian(m: Backend, phi: Field) -> np.ndarray:
    """Covariant Hessian ``nabla_i nabla_j phi``.

    On the torus the Christoffel symbols of ``exp(2u) delta`` give
    ``H_ij = d_ij phi - u_i phi_j - u_j phi_i + delta_ij <du, dphi>``; the
    diagonal uses the compact stencil so that ``tr_g H`` equals
    :func:`laplace_beltrami` exactly.
    """
    if isinstance(m, ConformalTorus):
        a = sample(m, phi)
        hx, hy = m.hx, m.hy
        ux, uy = dx_c(m.u, hx), dy_c(m.u, hy)
        px, py = dx_c(a, hx), dy_c(a, hy)
        H = np.empty(m.shape + (2, 2))
        H[..., 0, 0] = dxx(a, hx) - ux * px + uy * py
        H[..., 1, 1] = dyy(a, hy) - uy * py + ux * px
        off = dx_c(dy_c(a, hy), hx) - (ux * py + uy * px)
        H[..., 0, 1] = off
        H[..., 1, 0] = off
        return H
    if isinstance(m, Euclidean):
        if not isinstance(phi, AnalyticField):
            return np.zeros(nodes_shape(m) + (m.n, m.n)) if np.ndim(phi) == 0 else _no_fd()
        return np.asarray(phi.hess(m.nodes), dtype=float)
    _sphere_constant(m, phi)
    return np.zeros((1, m.n, m.n))


# --------------------------------------------------------------------------
# Tensor algebra
# --------------------------------------------------------------------------


def sym_trace(m: Backend, T: np.ndarray) -> np.ndarray:
    """``g^{ij} T_ij``."""
    return np.einsum("...ij,...ij->...", inverse_metric(m), T)


def sym_norm_sq(m: Backend, T: np.ndarray) -> np.ndarray:
    """``g^{ik} g^{jl} T_ij T_kl``."""
    gi = inverse_metric(m)
    return np.einsum("...ik,...jl,...ij,...kl->...", gi, gi, T, T)


def sym_pair(m: Backend, S: np.ndarray, T: np.ndarray) -> np.ndarray:
    """``g^{ik} g^{jl} S_ij T_kl``."""
    gi = inverse_metric(m)
    return np.einsum("...ik,...jl,...ij,...kl->...", gi, gi, S, T)


# --------------------------------------------------------------------------
# Integration and scaling
# --------------------------------------------------------------------------


def integrate(m: Backend, phi: Field, check_decay: bool = True) -> float:
    """``int_M phi dV`` by nodal quadrature.

    On the Euclidean box the integrand must be negligible on the boundary
    faces (relative size 1e-12); otherwise a ``ValueError`` is raised.
    """
    values = sample(m, phi)
    if isinstance(m, Euclidean) and check_decay:
        peak = float(np.max(np.abs(values))) if values.size else 0.0
        if peak > 0.0:
            edge = 0.0
            for ax in range(m.n):
                edge = max(
                    edge,
                    float(np.max(np.abs(np.take(values, 0, axis=ax)))),
                    float(np.max(np.abs(np.take(values, -1, axis=ax)))),
                )
            if edge > 1e-12 * peak:
                raise ValueError("integrand does not decay inside the Euclidean box")
    return float(np.sum(values * volume_weights(m)))


def volume(m: Backend) -> float:
    if isinstance(m, Euclidean):
        raise ValueError("Euclidean space has infinite volume")
    return float(np.sum(volume_weights(m)))


def rescale(m: Backend, alpha: float) -> Backend:
    """Backend with metric ``alpha * g``."""
    if not alpha > 0:
        raise ValueError("scale factor must be positive")
    if isinstance(m, ConformalTorus):
        if alpha == 1.0:
            return m
        return m.with_u(m.u + 0.5 * math.log(alpha))
    if isinstance(m, Euclidean):
        return Euclidean(m.n, m.half_width, m.resolution, m.scale * alpha)
    return RoundSphere(m.n, m.radius * math.sqrt(alpha))
