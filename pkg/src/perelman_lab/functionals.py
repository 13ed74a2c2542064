"""Energy and entropy functionals, their variations and spectral invariants.

Conventions
-----------
* ``F_k(g, f) = int (k R + |grad f|^2) e^{-f} dV``; ``F = F_1``.
* ``W(g, f, tau) = int [tau (|grad f|^2 + R) + f - n] (4 pi tau)^{-n/2} e^{-f} dV``
  for compatible ``(g, f, tau)``, i.e. unit weighted mass.
* ``lambda_k`` is the lowest eigenvalue of ``-4 Delta + k R`` and ``mu`` the
  infimum of ``W`` over compatible potentials.

On the torus the first-variation integrands are assembled in
summation-by-parts form, so they are the exact derivatives of the discrete
functionals rather than merely consistent approximations of them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import geometry as geo
from .geometry import AnalyticField, ConformalTorus, Euclidean, RoundSphere

__all__ = [
    "MuResult",
    "PotentialConfig",
    "SpectralResult",
    "VariationData",
    "WeightedOperator",
    "apply_variation",
    "bakry_emery",
    "conformal_variation",
    "delta_F",
    "delta_W",
    "dense_lowest_eigenvalue",
    "diffusion_entropy",
    "entropy_dissipation",
    "eval_F",
    "eval_W",
    "fd_delta_F",
    "fd_delta_W",
    "heat_trajectory",
    "lambda_k",
    "lowest_eigenpair",
    "mass",
    "mu",
    "normalize_potential",
    "production_F",
    "production_W",
    "random_potential",
    "shifted_laplacian_eigenvalue",
    "w_integral",
]

COMPATIBILITY_TOL = 1e-8


# --------------------------------------------------------------------------
# Data types
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class PotentialConfig:
    """Potential ``f`` with scale ``tau``; ``compatible`` records unit weighted mass."""

    f: object
    tau: float
    compatible: bool = False

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")


@dataclass(frozen=True)
class VariationData:
    """A tangent vector ``(v, h, sigma)`` to the space of ``(g, f, tau)``.

    ``v`` holds covariant components with the backend's tensor layout (a
    ``(..., n, n)`` array, or ``None`` for zero); ``h`` is a field and
    ``sigma`` a real.
    """

    v: object = None
    h: object = 0.0
    sigma: float = 0.0

    def v_array(self, m) -> np.ndarray:
        shape = geo.nodes_shape(m) + (m.n, m.n)
        if self.v is None:
            return np.zeros(shape)
        v = np.broadcast_to(np.asarray(self.v, dtype=float), shape)
        if not np.array_equal(v, np.swapaxes(v, -1, -2)):
            raise ValueError("metric variation must be symmetric")
        return v

    def trace(self, m) -> np.ndarray:
        return geo.sym_trace(m, self.v_array(m))


def conformal_variation(m, psi, h=0.0, sigma: float = 0.0) -> VariationData:
    """Variation with ``v = 2 psi g``; on the torus this is ``u -> u + eps psi``."""
    psi = np.asarray(psi, dtype=float)
    g = geo.metric(m)
    if psi.ndim == 0:
        v = 2.0 * float(psi) * g
    else:
        v = 2.0 * psi[..., None, None] * g
    return VariationData(v, h, sigma)


def _exp_neg(m, f) -> np.ndarray:
    return np.exp(-geo.sample(m, f))


def _shift(f, c: float):
    if isinstance(f, AnalyticField):
        return f.shift(c)
    return np.asarray(f, dtype=float) + c


def _add(f, h, eps: float):
    if isinstance(f, AnalyticField) or isinstance(h, AnalyticField):
        if not isinstance(h, AnalyticField):
            return f.shift(eps * float(h))
        if not isinstance(f, AnalyticField):
            return h.scaled(eps).shift(float(f))
        return f + h.scaled(eps)
    return np.asarray(f, dtype=float) + eps * np.asarray(h, dtype=float)


# --------------------------------------------------------------------------
# F functional
# --------------------------------------------------------------------------


def mass(m, f, tau: float | None = None) -> float:
    """``int e^{-f} dV``, with the ``(4 pi tau)^{-n/2}`` factor when ``tau`` is given."""
    c = 1.0 if tau is None else (4.0 * math.pi * tau) ** (-0.5 * m.n)
    return c * geo.integrate(m, _exp_neg(m, f))


def eval_F(m, f, k: float = 1.0) -> float:
    """``F_k(g, f) = int (k R + |grad f|^2) e^{-f} dV``."""
    if k < 1:
        raise ValueError("k must be at least 1")
    R = geo.scalar_curvature(m)
    return geo.integrate(m, (k * R + geo.grad_norm_sq(m, f)) * _exp_neg(m, f))


def _split_trace(m, var: VariationData):
    """Conformal factor ``psi`` (``v = 2 psi g / (n/2) ...``) and trace-free part."""
    v = var.v_array(m)
    tr = geo.sym_trace(m, v)
    vo = v - (tr / m.n)[..., None, None] * geo.metric(m)
    return tr, vo


def delta_F(m, f, var: VariationData, k: float = 1.0) -> float:
    """First variation of ``F`` along ``(v, h)``.

    ``int e^{-f} [ -v_ij (R_ij + f_ij) + (v/2 - h)(2 Delta f - |grad f|^2 + R) ] dV``.
    ``k != 1`` has no closed form here and falls back to :func:`fd_delta_F`.
    """
    if k != 1.0:
        return fd_delta_F(m, f, var, k=k)
    if isinstance(m, ConformalTorus):
        return _delta_F_torus(m, f, var)
    v = var.v_array(m)
    tr = geo.sym_trace(m, v)
    e = _exp_neg(m, f)
    R = geo.scalar_curvature(m)
    h = geo.sample(m, var.h)
    lap = geo.laplace_beltrami(m, f)
    g2 = geo.grad_norm_sq(m, f)
    pair = geo.sym_pair(m, v, geo.ricci(m) + geo.hessian(m, f))
    return geo.integrate(m, (-pair + (0.5 * tr - h) * (2.0 * lap - g2 + R)) * e)


def _torus_pieces(m: ConformalTorus, f):
    """Discrete densities (per unit ``dx dy``) shared by the torus variations."""
    f = geo.sample(m, f)
    hx, hy = m.hx, m.hy
    e = np.exp(-f)
    lap0_u = geo.flat_laplacian(m.u, hx, hy)
    G0 = geo.flat_grad_sq(f, hx, hy)
    return {
        "f": f,
        "e": e,
        "J": np.exp(2.0 * m.u),
        # R dV and |grad f|^2 e^{-f} dV
        "R_dv": -2.0 * lap0_u,
        "G_e": G0 * e,
        # div(e^{-f} grad f) dV = (Delta f - |grad f|^2) e^{-f} dV
        "div": geo.flat_weighted_div(f, e, hx, hy),
        # -Delta(e^{-f}) dV, the same density in its metric-variation form
        "neg_lap_e": -geo.flat_laplacian(e, hx, hy),
        "cell": hx * hy,
    }


def _torus_trace_free_term(m: ConformalTorus, f, vo) -> float:
    if not np.any(vo):
        return 0.0
    pair = geo.sym_pair(m, vo, geo.hessian(m, f))
    return -geo.integrate(m, pair * _exp_neg(m, f))


def _delta_F_torus(m: ConformalTorus, f, var: VariationData) -> float:
    tr, vo = _split_trace(m, var)
    psi = 0.25 * tr  # v = 2 psi g + trace-free
    p = _torus_pieces(m, f)
    h = geo.sample(m, var.h)
    # psi part: 2 psi (Delta f - |grad f|^2) e^{-f} dV
    dens = 2.0 * psi * p["neg_lap_e"]
    # h part: -h (2 Delta f - |grad f|^2 + R) e^{-f} dV
    dens = dens - h * (2.0 * p["div"] + p["G_e"] + p["R_dv"] * p["e"])
    return float(np.sum(dens) * p["cell"]) + _torus_trace_free_term(m, p["f"], vo)


def production_F(m, f, k: float = 1.0) -> float:
    """``2 (k-1) int |Ric|^2 e^{-f} dV + 2 int |Ric + Hess f|^2 e^{-f} dV``."""
    if k < 1:
        raise ValueError("k must be at least 1")
    ric = geo.ricci(m)
    e = _exp_neg(m, f)
    out = 2.0 * geo.integrate(m, geo.sym_norm_sq(m, ric + geo.hessian(m, f)) * e)
    if k != 1.0:
        out += 2.0 * (k - 1.0) * geo.integrate(m, geo.sym_norm_sq(m, ric) * e)
    return out


# --------------------------------------------------------------------------
# W functional
# --------------------------------------------------------------------------


def w_integral(m, f, tau: float) -> float:
    """The ``W`` integral without the compatibility requirement."""
    if not tau > 0:
        raise ValueError("tau must be positive")
    n = m.n
    fv = geo.sample(m, f)
    R = geo.scalar_curvature(m)
    dens = (tau * (geo.grad_norm_sq(m, f) + R) + fv - n) * np.exp(-fv)
    return (4.0 * math.pi * tau) ** (-0.5 * n) * geo.integrate(m, dens)


def _require_compatible(m, cfg: PotentialConfig):
    if not cfg.compatible:
        raise ValueError("potential is not marked compatible; use normalize_potential")
    err = abs(mass(m, cfg.f, cfg.tau) - 1.0)
    if err > COMPATIBILITY_TOL:
        raise ValueError(f"potential violates compatibility by {err:.3g}")


def eval_W(m, cfg: PotentialConfig) -> float:
    """``W(g, f, tau)`` for a compatible configuration."""
    _require_compatible(m, cfg)
    return w_integral(m, cfg.f, cfg.tau)


def normalize_potential(m, f, tau: float) -> PotentialConfig:
    """Shift ``f`` by ``ln int (4 pi tau)^{-n/2} e^{-f} dV`` to make it compatible."""
    if not tau > 0:
        raise ValueError("tau must be positive")
    z = mass(m, f, tau)
    if not (math.isfinite(z) and z > 0):
        raise ValueError("weighted mass is not finite and positive")
    c = math.log(z)
    return PotentialConfig(_shift(f, c) if c != 0.0 else f, tau, True)


def delta_W(m, cfg: PotentialConfig, var: VariationData) -> float:
    """First variation of the ``W`` integral along ``(v, h, sigma)``.

    ``int [ sigma (R + |grad f|^2) - tau v_ij (R_ij + f_ij) + h
    + (tau (2 Delta f - |grad f|^2 + R) + f - n)(v/2 - h - n sigma / (2 tau)) ]
    (4 pi tau)^{-n/2} e^{-f} dV``.
    """
    tau, n = cfg.tau, m.n
    c = (4.0 * math.pi * tau) ** (-0.5 * n)
    s = float(var.sigma)
    if isinstance(m, ConformalTorus):
        tr, vo = _split_trace(m, var)
        psi = 0.25 * tr
        p = _torus_pieces(m, cfg.f)
        h = geo.sample(m, var.h)
        f, e, J = p["f"], p["e"], p["J"]
        lin = (f - n) * e * J  # (f - n) e^{-f} dV
        # tau (2 Delta f - |grad f|^2 + R) e^{-f} dV + (f - n) e^{-f} dV
        phi_full = tau * (2.0 * p["div"] + p["G_e"] + p["R_dv"] * e) + lin
        dens = 2.0 * psi * (tau * p["neg_lap_e"] + lin)
        dens = dens + h * (e * J - phi_full)
        dens = dens + s * ((p["R_dv"] * e + p["G_e"]) - (0.5 * n / tau) * phi_full)
        out = float(np.sum(dens) * p["cell"])
        return c * (out + tau * _torus_trace_free_term(m, f, vo))
    v = var.v_array(m)
    tr = geo.sym_trace(m, v)
    fv = geo.sample(m, cfg.f)
    e = np.exp(-fv)
    R = geo.scalar_curvature(m)
    h = geo.sample(m, var.h)
    g2 = geo.grad_norm_sq(m, cfg.f)
    lap = geo.laplace_beltrami(m, cfg.f)
    pair = geo.sym_pair(m, v, geo.ricci(m) + geo.hessian(m, cfg.f))
    big = tau * (2.0 * lap - g2 + R) + fv - n
    dens = s * (R + g2) - tau * pair + h + big * (0.5 * tr - h - 0.5 * n * s / tau)
    return c * geo.integrate(m, dens * e)


def production_W(m, cfg: PotentialConfig) -> float:
    """``int 2 tau |Ric + Hess f - g/(2 tau)|^2 (4 pi tau)^{-n/2} e^{-f} dV``."""
    _require_compatible(m, cfg)
    tau = cfg.tau
    T = geo.ricci(m) + geo.hessian(m, cfg.f) - geo.metric(m) / (2.0 * tau)
    c = (4.0 * math.pi * tau) ** (-0.5 * m.n)
    return 2.0 * tau * c * geo.integrate(m, geo.sym_norm_sq(m, T) * _exp_neg(m, cfg.f))


# --------------------------------------------------------------------------
# Finite-difference variations
# --------------------------------------------------------------------------


def apply_variation(m, f, var: VariationData, eps: float, tau: float | None = None):
    """``(g + eps v, f + eps h, tau + eps sigma)`` for metric variations the backends can carry.

    The torus carries conformal ``v = 2 psi g``; the Euclidean and sphere
    backends carry constant multiples of the metric.
    """
    v = var.v_array(m)
    tr, vo = _split_trace(m, var)
    if np.max(np.abs(vo), initial=0.0) > 1e-14 * max(1.0, np.max(np.abs(v), initial=0.0)):
        raise ValueError("finite differences need a pure-trace metric variation")
    if isinstance(m, ConformalTorus):
        # e^{2(u + eps psi)} = e^{2u} (1 + 2 eps psi + ...)
        m2 = m.with_u(m.u + eps * 0.25 * tr)
    else:
        c = np.unique(np.round(tr / m.n, 15))
        if c.size != 1:
            raise ValueError("analytic backends need a constant metric variation")
        rate = float(tr.flat[0]) / m.n  # v = rate * g
        if isinstance(m, Euclidean):
            m2 = Euclidean(m.n, m.half_width, m.resolution, m.scale + eps * rate * m.scale)
        else:
            m2 = RoundSphere(m.n, m.radius * math.sqrt(1.0 + eps * rate))
    f2 = _add(f, var.h, eps)
    t2 = None if tau is None else tau + eps * float(var.sigma)
    return m2, f2, t2


def fd_delta_F(m, f, var: VariationData, k: float = 1.0, eps: float = 1e-5) -> float:
    """Central difference of ``F_k`` along ``var``."""
    mp, fp, _ = apply_variation(m, f, var, eps)
    mm, fm, _ = apply_variation(m, f, var, -eps)
    return (eval_F(mp, fp, k) - eval_F(mm, fm, k)) / (2.0 * eps)


def fd_delta_W(m, cfg: PotentialConfig, var: VariationData, eps: float = 1e-5) -> float:
    """Central difference of the ``W`` integral along ``var``."""
    mp, fp, tp = apply_variation(m, cfg.f, var, eps, cfg.tau)
    mm, fm, tm = apply_variation(m, cfg.f, var, -eps, cfg.tau)
    return (w_integral(mp, fp, tp) - w_integral(mm, fm, tm)) / (2.0 * eps)


def random_potential(m, rng: np.random.Generator, modes: int = 3, amplitude: float = 0.3):
    """Truncated random Fourier series, the generator used by the property suites.

    Torus: a grid field with wavenumbers up to ``modes``. Euclidean: a
    bounded trigonometric perturbation of a random quadratic well so that
    ``e^{-f}`` stays integrable. Sphere: a random constant.
    """
    if isinstance(m, ConformalTorus):
        X = geo.coordinates(m)
        x = 2.0 * math.pi * X[..., 0] / m.lx
        y = 2.0 * math.pi * X[..., 1] / m.ly
        out = np.zeros(m.shape)
        for i in range(-modes, modes + 1):
            for j in range(0, modes + 1):
                if (j == 0 and i <= 0) or i * i + j * j > modes * modes:
                    continue
                a, b = rng.normal(size=2) * amplitude / (1.0 + i * i + j * j)
                out += a * np.cos(i * x + j * y) + b * np.sin(i * x + j * y)
        return out
    if isinstance(m, Euclidean):
        n = m.n
        a = float(rng.uniform(0.25, 0.5))
        center = rng.normal(size=n) * 0.3
        base = geo.quadratic_field(a, center)
        k = rng.normal(size=(modes, n)) * 0.6
        amp = rng.normal(size=modes) * amplitude / np.arange(1, modes + 1)
        ph = rng.uniform(0.0, 2.0 * math.pi, size=modes)
        return base + geo.fourier_field(k, amp, ph)
    return float(rng.normal() * amplitude)


# --------------------------------------------------------------------------
# Spectral invariants
# --------------------------------------------------------------------------


@dataclass
class SpectralResult:
    """Lowest eigenpair of ``-a Delta + V``.

    ``u0`` is positive with ``int u0^2 dV = 1``; ``f0 = -2 ln u0`` is the
    corresponding unit-mass potential.
    """

    eigenvalue: float
    u0: np.ndarray
    f0: np.ndarray
    iterations: int
    residual: float
    converged: bool = True


def _periodic_second_difference(n: int, h: float) -> sp.csr_matrix:
    main = np.full(n, -2.0)
    off = np.ones(n - 1)
    D = sp.diags([main, off, off], [0, 1, -1], shape=(n, n), format="lil")
    D[0, n - 1] += 1.0
    D[n - 1, 0] += 1.0
    return sp.csr_matrix(D) / (h * h)


def _flat_laplacian_matrix(m: ConformalTorus) -> sp.csr_matrix:
    nx, ny = m.shape
    Dx = _periodic_second_difference(nx, m.hx)
    Dy = _periodic_second_difference(ny, m.hy)
    return (sp.kron(Dx, sp.identity(ny)) + sp.kron(sp.identity(nx), Dy)).tocsr()


def symmetric_operator(m: ConformalTorus, a: float, V) -> sp.csr_matrix:
    """``-a e^{-u} Delta_flat e^{-u} + V``: ``-a Delta^g + V`` in the ``dV`` inner product."""
    E = sp.diags(np.exp(-m.u).ravel())
    Vd = sp.diags(np.broadcast_to(np.asarray(V, dtype=float), m.shape).ravel())
    return (-a * (E @ _flat_laplacian_matrix(m) @ E) + Vd).tocsr()


def _gershgorin_lower(S: sp.csr_matrix) -> float:
    d = S.diagonal()
    off = np.asarray(abs(S).sum(axis=1)).ravel() - np.abs(d)
    return float(np.min(d - off))


def lowest_eigenpair(m, a: float, V, tol: float = 1e-8, max_iter: int = 500) -> SpectralResult:
    """Lowest eigenpair of ``-a Delta^g + V`` by shifted inverse iteration.

    The first shift lies below the Gershgorin lower bound. Later shifts sit
    below the Collatz-Wielandt bound ``min_i (S x)_i / x_i``, which is a
    certified lower bound for the lowest eigenvalue while ``x > 0``.
    """
    if isinstance(m, Euclidean):
        raise ValueError("spectral invariants need a compact backend")
    if isinstance(m, RoundSphere):
        lam = float(np.asarray(V, dtype=float).ravel()[0])
        u0 = np.array([1.0 / math.sqrt(geo.volume(m))])
        return SpectralResult(lam, u0, -2.0 * np.log(u0), 0, 0.0)
    S = symmetric_operator(m, a, V)
    N = S.shape[0]
    cell = m.hx * m.hy
    I = sp.identity(N, format="csr")
    gl = _gershgorin_lower(S)
    scale = 1.0 + abs(gl)
    shift = gl - 1e-3 * scale
    x = np.ones(N) / math.sqrt(N * cell)
    lu = spla.splu((S - shift * I).tocsc())
    residual = math.inf
    rho = float(x @ (S @ x)) * cell
    it = 0
    for it in range(1, max_iter + 1):
        y = lu.solve(x)
        x = y / math.sqrt(float(y @ y) * cell)
        Sx = S @ x
        rho = float(x @ Sx) * cell
        r = Sx - rho * x
        residual = math.sqrt(float(r @ r) * cell)
        if residual <= tol:
            break
        if np.all(x > 0):
            cw = float(np.min(Sx / x))
            new_shift = cw - max(0.1 * (rho - cw), 1e-9 * scale)
            if new_shift > shift + 1e-3 * (rho - shift):
                shift = new_shift
                lu = spla.splu((S - shift * I).tocsc())
    if np.sum(x) < 0:
        x = -x
    u0 = (np.exp(-m.u).ravel() * x).reshape(m.shape)
    if not np.all(u0 > 0):
        raise ArithmeticError("ground state lost positivity")
    return SpectralResult(rho, u0, -2.0 * np.log(u0), it, residual, residual <= tol)


def dense_lowest_eigenvalue(m: ConformalTorus, a: float, V) -> float:
    """Oracle: lowest eigenvalue of the same discrete operator by dense diagonalisation."""
    S = symmetric_operator(m, a, V).toarray()
    return float(scipy.linalg.eigh(S, eigvals_only=True, subset_by_index=[0, 0])[0])


def lambda_k(m, k: float = 1.0, tol: float = 1e-8) -> SpectralResult:
    """Lowest eigenvalue of ``-4 Delta + k R``; ``k = 1`` gives ``lambda(M, g)``."""
    if k < 1:
        raise ValueError("k must be at least 1")
    return lowest_eigenpair(m, 4.0, k * geo.scalar_curvature(m), tol)


def shifted_laplacian_eigenvalue(m, tol: float = 1e-8) -> SpectralResult:
    """Lowest eigenvalue of ``-Delta + R/2``, computed directly."""
    return lowest_eigenpair(m, 1.0, 0.5 * geo.scalar_curvature(m), tol)


# --------------------------------------------------------------------------
# mu(g, tau)
# --------------------------------------------------------------------------


@dataclass
class MuResult:
    """Infimum of ``W`` over compatible potentials at scale ``tau``.

    ``phi`` is the minimiser in the form ``(4 pi tau)^{-n/4} e^{-f/2}`` and
    ``cfg`` the corresponding compatible potential. ``converged`` is false
    when the iteration cap was hit; ``value`` is then only an upper bound.
    """

    value: float
    phi: np.ndarray
    cfg: PotentialConfig
    iterations: int
    grad_norm: float
    converged: bool
    start_values: dict = field(default_factory=dict)


class _WObjective:
    """Discrete ``W`` as a function of ``phi`` with its exact gradient.

    ``J(phi) = w_integral(f(phi))`` where ``f = -ln(phi^2) - (n/2) ln(4 pi tau)``;
    the gradient term is written edgewise so that ``phi`` enters through
    ``phi^2`` and ``ln phi`` only.
    """

    def __init__(self, m: ConformalTorus, tau: float, potential=None):
        self.m = m
        self.tau = tau
        self.n = m.n
        self.cell = m.hx * m.hy
        self.w = np.exp(2.0 * m.u) * self.cell
        self.R = geo.scalar_curvature(m) if potential is None else np.asarray(potential, dtype=float)
        self.log_c = -0.5 * self.n * math.log(4.0 * math.pi * tau)
        self.Kx = 2.0 * tau * self.cell / m.hx**2
        self.Ky = 2.0 * tau * self.cell / m.hy**2

    def value_grad(self, phi, need_grad=True):
        a = phi * phi
        ell = np.log(phi)
        tau, n = self.tau, self.n
        dx = np.roll(ell, -1, 0) - ell
        dy = np.roll(ell, -1, 1) - ell
        sx = a + np.roll(a, -1, 0)
        sy = a + np.roll(a, -1, 1)
        pot = tau * self.R + self.log_c - 2.0 * ell - n
        J = self.Kx * float(np.sum(sx * dx * dx)) + self.Ky * float(np.sum(sy * dy * dy))
        J += float(np.sum(a * pot * self.w))
        if not need_grad:
            return J, None
        gx = self.Kx * (2.0 * phi * (dx * dx + np.roll(dx * dx, 1, 0)) - (2.0 / phi) * (sx * dx - np.roll(sx * dx, 1, 0)))
        gy = self.Ky * (2.0 * phi * (dy * dy + np.roll(dy * dy, 1, 1)) - (2.0 / phi) * (sy * dy - np.roll(sy * dy, 1, 1)))
        g = gx + gy + self.w * 2.0 * phi * (pot - 1.0)
        return J, g

    def normalize(self, phi):
        return phi / math.sqrt(float(np.sum(self.w * phi * phi)))

    def potential_of(self, phi):
        return self.log_c - np.log(phi * phi)


def _fft_preconditioner(m: ConformalTorus, tau: float, wbar: float):
    nx, ny = m.shape
    kx = 4.0 / m.hx**2 * np.sin(math.pi * np.arange(nx) / nx) ** 2
    ky = 4.0 / m.hy**2 * np.sin(math.pi * np.arange(ny) / ny) ** 2
    denom = 8.0 * tau * m.hx * m.hy * (kx[:, None] + ky[None, :]) + 2.0 * wbar

    def apply(g):
        return np.real(np.fft.ifft2(np.fft.fft2(g) / denom))

    return apply


def _descend(obj: _WObjective, phi, tol, max_iter, precond):
    phi = obj.normalize(phi)
    J, g = obj.value_grad(phi)
    gnorm = math.inf
    it = 0
    for it in range(1, max_iter + 1):
        G = g / obj.w
        G = G - float(np.sum(obj.w * G * phi)) * phi
        gnorm = math.sqrt(float(np.sum(obj.w * G * G)))
        if gnorm <= tol:
            return phi, J, it - 1, gnorm, True
        nrm = obj.w * phi
        Pg, Pn = precond(g), precond(nrm)
        beta = float(np.sum(nrm * Pg)) / float(np.sum(nrm * Pn))
        d = Pg - beta * Pn
        slope = float(np.sum(g * d))
        alpha = 1.0
        accepted = False
        for _ in range(60):
            trial = phi - alpha * d
            if np.all(trial > 0):
                trial = obj.normalize(trial)
                Jt, _ = obj.value_grad(trial, need_grad=False)
                if Jt <= J - 1e-4 * alpha * slope or (Jt - J) <= 1e-14 * max(1.0, abs(J)):
                    accepted = True
                    break
            alpha *= 0.5
        if not accepted:
            break
        phi = trial
        J, g = obj.value_grad(phi)
    return phi, J, it, gnorm, False


def _bump_start(m: ConformalTorus, tau: float, center_index) -> np.ndarray:
    X = geo.coordinates(m)
    c = X[center_index]
    dx = (X[..., 0] - c[0] + 0.5 * m.lx) % m.lx - 0.5 * m.lx
    dy = (X[..., 1] - c[1] + 0.5 * m.ly) % m.ly - 0.5 * m.ly
    r2 = (dx * dx + dy * dy) * np.exp(2.0 * m.u[center_index])
    bump = np.exp(-r2 / (8.0 * tau))
    return bump + 1e-6


def mu(m, tau: float, tol: float = 1e-7, max_iter: int = 100_000, potential=None) -> MuResult:
    """``mu(g, tau)``: infimum of ``W`` over compatible potentials.

    Preconditioned projected gradient descent on ``phi`` under
    ``int phi^2 dV = 1`` from three starts (constant, ground state of
    ``-4 Delta + R``, and a heat-kernel bump at the curvature maximum); the
    best local minimum is returned. ``potential`` replaces ``R`` (used by
    the extended flows).
    """
    if not tau > 0:
        raise ValueError("tau must be positive")
    if isinstance(m, Euclidean):
        raise ValueError("mu needs a compact backend")
    n = m.n
    if isinstance(m, RoundSphere):
        V = geo.volume(m)
        R = float(geo.scalar_curvature(m)[0]) if potential is None else float(np.ravel(potential)[0])
        f = math.log(V) - 0.5 * n * math.log(4.0 * math.pi * tau)
        cfg = PotentialConfig(np.array([f]), tau, True)
        val = tau * R + f - n
        return MuResult(val, np.array([1.0 / math.sqrt(V)]), cfg, 0, 0.0, True, {"constant": val})
    obj = _WObjective(m, tau, potential)
    precond = _fft_preconditioner(m, tau, float(np.mean(obj.w)))
    Vpot = obj.R
    starts = {
        "constant": np.ones(m.shape),
        "ground_state": lowest_eigenpair(m, 4.0, Vpot).u0,
        "bump": _bump_start(m, tau, np.unravel_index(int(np.argmax(Vpot)), m.shape)),
    }
    best = None
    values = {}
    for name, phi0 in starts.items():
        phi, J, it, gn, ok = _descend(obj, phi0, tol, max_iter, precond)
        values[name] = J
        if best is None or J < best[1]:
            best = (phi, J, it, gn, ok)
    phi, J, it, gn, ok = best
    cfg = PotentialConfig(obj.potential_of(phi), tau, True)
    return MuResult(J, phi, cfg, it, gn, ok, values)


# --------------------------------------------------------------------------
# Weighted diffusion entropy
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class WeightedOperator:
    """``L = Delta - <grad phi, grad .>`` with measure ``e^{-phi} dV``; ``m_dim > n``."""

    backend: object
    phi: object
    m_dim: float

    def __post_init__(self):
        if not self.m_dim > self.backend.n:
            raise ValueError("the dimension parameter must exceed n")

    def weight(self) -> np.ndarray:
        return np.exp(-geo.sample(self.backend, self.phi))

    def apply(self, u: np.ndarray) -> np.ndarray:
        """``L u``, symmetric in ``L^2(e^{-phi} dV)``."""
        m = self.backend
        if not isinstance(m, ConformalTorus):
            return np.zeros_like(np.asarray(u, dtype=float))
        w = self.weight()
        return geo.flat_weighted_div(u, w, m.hx, m.hy) * np.exp(-2.0 * m.u) / w

    def measure(self) -> np.ndarray:
        return self.weight() * geo.volume_weights(self.backend)


def _check_density(w: WeightedOperator, u) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    if not np.all(u > 0):
        raise ValueError("u must be positive")
    total = float(np.sum(u * w.measure()))
    if abs(total - 1.0) > 1e-8:
        raise ValueError(f"u must have unit mass, got {total!r}")
    return u


def diffusion_entropy(w: WeightedOperator, u, t: float) -> tuple:
    """``(H_m, W)`` for a unit-mass density ``u`` at time ``t``.

    ``H_m = -int u log u dmu - (m/2)(1 + log 4 pi t)`` and
    ``W = int (t |grad f|^2 + f - m) u dmu`` with
    ``u = e^{-f} / (4 pi t)^{m/2}``; these satisfy ``W = d/dt (t H_m)``
    along ``du/dt = L u``.
    """
    if not t > 0:
        raise ValueError("t must be positive")
    u = _check_density(w, u)
    mdim = w.m_dim
    dmu = w.measure()
    logu = np.log(u)
    H = -float(np.sum(u * logu * dmu)) - 0.5 * mdim * (1.0 + math.log(4.0 * math.pi * t))
    f = -logu - 0.5 * mdim * math.log(4.0 * math.pi * t)
    m = w.backend
    if isinstance(m, ConformalTorus):
        # int |grad log u|^2 u dmu in the edge form matching L
        grad_term = geo.flat_edge_form(logu, u, w.weight(), m.hx, m.hy) * m.hx * m.hy
    else:
        grad_term = 0.0
    W = t * grad_term + float(np.sum((f - mdim) * u * dmu))
    return H, W


def heat_trajectory(w: WeightedOperator, u0, t0: float, T: float, safety: float = 0.2):
    """RK4 solution of ``du/dt = L u`` on ``[t0, t0 + T]``; returns ``(times, states)``."""
    m = w.backend
    u = np.asarray(u0, dtype=float)
    if not isinstance(m, ConformalTorus):
        return np.array([t0, t0 + T]), np.stack([u, u])
    wt = w.weight()
    h = min(m.hx, m.hy)
    dt_max = safety * h * h * float(np.min(np.exp(2.0 * m.u))) / 4.0 * float(np.min(wt) / np.max(wt))
    steps = max(1, int(math.ceil(T / dt_max)))
    dt = T / steps
    out = [u]
    for _ in range(steps):
        k1 = w.apply(u)
        k2 = w.apply(u + 0.5 * dt * k1)
        k3 = w.apply(u + 0.5 * dt * k2)
        k4 = w.apply(u + dt * k3)
        u = u + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        out.append(u)
    return t0 + dt * np.arange(steps + 1), np.stack(out)


def bakry_emery(w: WeightedOperator) -> tuple:
    """``Ric + Hess phi - dphi (x) dphi / (m - n)`` and its pointwise least eigenvalue.

    The eigenvalue is taken relative to ``g``.
    """
    m = w.backend
    d = geo.gradient(m, w.phi)
    T = geo.ricci(m) + geo.hessian(m, w.phi) - np.einsum("...i,...j->...ij", d, d) / (w.m_dim - m.n)
    gi = geo.inverse_metric(m)
    A = np.einsum("...ik,...kj->...ij", gi, T)
    ev = np.linalg.eigvals(A).real
    return T, ev.min(axis=-1)


def entropy_dissipation(w: WeightedOperator, u, t: float) -> float:
    """Right-hand side of the weighted entropy formula for ``dW/dt``.

    ``-2 int t (|Hess f - g/(2t)|^2 + Ric_{m,n}(grad f, grad f)) u dmu
    - 2/(m-n) int t (<grad phi, grad f> + (m-n)/(2t))^2 u dmu``.
    """
    m = w.backend
    u = _check_density(w, u)
    mdim, n = w.m_dim, m.n
    f = -np.log(u) - 0.5 * mdim * math.log(4.0 * math.pi * t)
    T, _ = bakry_emery(w)
    gi = geo.inverse_metric(m)
    df = geo.gradient(m, f)
    up = np.einsum("...ij,...j->...i", gi, df)
    ric_ff = np.einsum("...ij,...i,...j->...", T, up, up)
    H = geo.hessian(m, f) - geo.metric(m) / (2.0 * t)
    dot = geo.grad_dot(m, w.phi, f)
    dmu = w.measure()
    a = -2.0 * t * float(np.sum((geo.sym_norm_sq(m, H) + ric_ff) * u * dmu))
    b = -2.0 / (mdim - n) * t * float(np.sum((dot + (mdim - n) / (2.0 * t)) ** 2 * u * dmu))
    return a + b
