"""Linearised geometry on round-link radial metrics.

A diagonal 2-tensor h has orthonormal components P = h(e_0, e_0) and
Q = h(e_a, e_a).  With nu = ds (s the arclength) and H = b_s / b,

    h = Q g + (P - Q) nu (x) nu,        grad nu = H (g - nu (x) nu),

which gives closed forms for div, the rough Laplacian and Rm(h) on the
radial ansatz.  Scalar Laplacians use a conservative three-point stencil so
the L^2 pairings are exactly symmetric on the grid.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np
from scipy.linalg import solve_banded

from .manifold_core import (
    GeometryError,
    MetricProfile,
    RadialTwoTensor,
    WarpedFrame,
    radial_metric_factor,
    ricci_tensor,
    scalar_curvature,
    volume_density,
    warped_frame,
    warped_profile,
)
from .potential_lambda import (
    PotentialSolution,
    extrapolate_limit,
    lambda_ale,
    outer_indices,
    round_warped_jet,
    solve_potential,
)


# ------------------------------------------------------------ primitives

def fv_laplacian(g: MetricProfile, f: np.ndarray, weight: Optional[np.ndarray] = None) -> np.ndarray:
    """(1/(m omega)) d/dr(m omega f'/a^2) with zero flux through the grid ends."""
    grid = g.grid
    omega = volume_density(g)
    if weight is not None:
        omega = omega * weight
    a = radial_metric_factor(g)
    kap = omega / a**2 / grid.r
    kmid = 0.5 * (kap[1:] + kap[:-1]) / grid.h
    V = grid.quad_weights() * omega
    flux = kmid * np.diff(f)
    out = np.zeros_like(f)
    out[:-1] += flux
    out[1:] -= flux
    return out / V


def face_energy(g: MetricProfile, f: np.ndarray, weight: Optional[np.ndarray] = None) -> float:
    """int |df|^2 dmu using the same face differences as fv_laplacian."""
    grid = g.grid
    omega = volume_density(g) if weight is None else volume_density(g) * weight
    a = radial_metric_factor(g)
    kap = omega / a**2 / grid.r
    kmid = 0.5 * (kap[1:] + kap[:-1]) / grid.h
    return float(np.sum(kmid * np.diff(f) ** 2))


def integrate(g: MetricProfile, F: np.ndarray, weight: Optional[np.ndarray] = None) -> float:
    dens = F * volume_density(g)
    if weight is not None:
        dens = dens * weight
    return float(np.sum(dens * g.grid.quad_weights()))


def pair(g: MetricProfile, h1: RadialTwoTensor, h2: RadialTwoTensor, weight=None) -> float:
    return integrate(g, h1.inner(h2, g.n), weight)


def tensor(P, Q, mode="diagonal", decay=0.0) -> RadialTwoTensor:
    return RadialTwoTensor(mode, np.asarray(P, float), np.asarray(Q, float), decay)


def _frame(g: MetricProfile) -> WarpedFrame:
    if g.family == "eguchi_hanson":
        raise GeometryError("unsupported mode: radial tensor algebra needs a round link")
    return warped_frame(g)


def lie_derivative(g: MetricProfile, xi: np.ndarray) -> RadialTwoTensor:
    """L_X g for X = xi e_0."""
    fr = _frame(g)
    return tensor(2 * fr.ds(xi), 2 * fr.H * xi)


def vector_divergence(g: MetricProfile, xi: np.ndarray) -> np.ndarray:
    fr = _frame(g)
    return fr.ds(xi) + (g.n - 1) * fr.H * xi


def divergence(g: MetricProfile, h: RadialTwoTensor) -> np.ndarray:
    """Radial component of div h (the other components vanish on the ansatz)."""
    fr = _frame(g)
    return fr.ds(h.radial) + (g.n - 1) * fr.H * (h.radial - h.tangential)


def weighted_divergence(g: MetricProfile, h: RadialTwoTensor, f: np.ndarray) -> np.ndarray:
    """div_f h = div h - h(grad f)."""
    fr = _frame(g)
    return divergence(g, h) - h.radial * fr.ds(f)


def bianchi_gauge(g: MetricProfile, h: RadialTwoTensor) -> np.ndarray:
    """B(h) = div h - 1/2 grad tr h, radial component."""
    fr = _frame(g)
    return divergence(g, h) - 0.5 * fr.ds(h.trace(g.n))


def hessian(g: MetricProfile, f: np.ndarray) -> RadialTwoTensor:
    fr = _frame(g)
    fs = fr.ds(f)
    return tensor(fr.ds(fs), fr.H * fs)


def rough_laplacian(g: MetricProfile, h: RadialTwoTensor, weight: Optional[np.ndarray] = None) -> RadialTwoTensor:
    fr = _frame(g)
    n = g.n
    P, Q = h.radial, h.tangential
    S = P - Q
    H2 = fr.H**2
    lapP = fv_laplacian(g, P, weight)
    lapQ = fv_laplacian(g, Q, weight)
    return tensor(lapP - 2 * (n - 1) * H2 * S, lapQ + 2 * H2 * S)


def gradient_norm_sq(g: MetricProfile, h: RadialTwoTensor, weight: Optional[np.ndarray] = None) -> float:
    """||grad h||^2 = int P_s^2 + (n-1) Q_s^2 + 2(n-1) H^2 (P-Q)^2."""
    fr = _frame(g)
    n = g.n
    S = h.radial - h.tangential
    return (face_energy(g, h.radial, weight) + (n - 1) * face_energy(g, h.tangential, weight)
            + 2 * (n - 1) * integrate(g, fr.H**2 * S**2, weight))


def pointwise_gradient_sq(g: MetricProfile, h: RadialTwoTensor) -> np.ndarray:
    fr = _frame(g)
    n = g.n
    S = h.radial - h.tangential
    return fr.ds(h.radial) ** 2 + (n - 1) * fr.ds(h.tangential) ** 2 + 2 * (n - 1) * fr.H**2 * S**2


def curvature_action(g: MetricProfile, h: RadialTwoTensor) -> RadialTwoTensor:
    """Rm(g)(h) on the diagonal ansatz."""
    fr = _frame(g)
    n = g.n
    P, Q = h.radial, h.tangential
    return tensor((n - 1) * fr.Krad * Q, fr.Krad * P + (n - 2) * fr.Ktan * Q)


def lichnerowicz_apply(g_b: MetricProfile, h: RadialTwoTensor, weight: Optional[np.ndarray] = None) -> RadialTwoTensor:
    """L h = Lap h + 2 Rm(h) - Ric o h - h o Ric."""
    if g_b.family == "eguchi_hanson":
        if h.mode != "conformal":
            raise GeometryError("unsupported mode on the biaxial background")
        # Ricci-flat: L(phi g) = (Lap phi) g
        lap = fv_laplacian(g_b, h.radial, weight)
        return RadialTwoTensor("conformal", lap, lap.copy(), h.decay_order, fiber=lap.copy())
    rl = rough_laplacian(g_b, h, weight)
    rm = curvature_action(g_b, h)
    ric = ricci_tensor(g_b)
    P = rl.radial + 2 * rm.radial - 2 * ric.radial * h.radial
    Q = rl.tangential + 2 * rm.tangential - 2 * ric.tangential * h.tangential
    return tensor(P, Q, h.mode if h.mode == "conformal" and g_b.family == "flat" else "diagonal")


# -------------------------------------------------------- linearisations

def scalar_curvature_variation(g: MetricProfile, h: RadialTwoTensor) -> np.ndarray:
    """delta R(h) = div div h - Lap tr h - <h, Ric>."""
    fr = _frame(g)
    n = g.n
    div_h = divergence(g, h)
    divdiv = fr.ds(div_h) + (n - 1) * fr.H * div_h
    lap_tr = fr.laplacian(h.trace(n))
    ric = ricci_tensor(g)
    return divdiv - lap_tr - h.inner(ric, n)


def perturb(g: MetricProfile, h: RadialTwoTensor, t: float) -> MetricProfile:
    """The warped profile g + t h (h given in g's orthonormal frame)."""
    jet = round_warped_jet(g)
    grid = g.grid
    P, Q = h.radial, h.tangential
    fa = 1.0 + t * P
    fb = 1.0 + t * Q
    if np.any(fa <= 0) or np.any(fb <= 0):
        raise GeometryError("non-metric profile")
    sa, sb = np.sqrt(fa), np.sqrt(fb)
    dsa = grid.dr(sa)
    dsb = grid.dr(sb)
    d2sb = grid.d2r(sb)
    a = jet["a"] * sa
    b = jet["b"] * sb
    derivs = {"da": jet["da"] * sa + jet["a"] * dsa,
              "db": jet["db"] * sb + jet["b"] * dsb,
              "d2b": jet["d2b"] * sb + 2 * jet["db"] * dsb + jet["b"] * d2sb}
    a1, b1 = jet["am1"], jet["bm1"]
    derivs["am1"] = a1 * sa + np.expm1(0.5 * np.log1p(t * P))
    derivs["bm1"] = b1 * sb + np.expm1(0.5 * np.log1p(t * Q))
    derivs["dbm1"] = jet["dbm1"] * sb + (1.0 + b1) * dsb
    return warped_profile(g.link, grid, a, b, g.decay_order, derivs=derivs)


TensorLike = Union[RadialTwoTensor, Callable[[MetricProfile], RadialTwoTensor]]


def _tensor_on(h: TensorLike, g: MetricProfile) -> RadialTwoTensor:
    return h(g) if callable(h) else h


# ----------------------------------------------------------- gradient field

@dataclass
class GradientField:
    tensor: RadialTwoTensor
    norms: dict
    divergence_residual: float = math.nan
    ricci_norm_weighted: float = math.nan
    hessian_norm_weighted: float = math.nan


def _divergence_residual_field(g: MetricProfile, sol: PotentialSolution) -> np.ndarray:
    T = ricci_tensor(g) + hessian(g, sol.f)
    return weighted_divergence(g, T, sol.f)


def gradient_field(g: MetricProfile, sol: Optional[PotentialSolution] = None, refine: bool = False) -> GradientField:
    """Bakry-Emery tensor Ric + Hess f and its norms.

    With ``refine`` (and a profile generator) the pointwise residual of
    div_f(Ric + Hess f) is Richardson-extrapolated from a 2x refined grid.
    """
    if sol is None:
        sol = solve_potential(g)
    n = g.n
    rho = g.grid.rho
    ef = sol.w**2
    ric = ricci_tensor(g)
    if g.family == "eguchi_hanson":
        # Ricci-flat: f vanishes up to the solver tolerance, Hess f is dropped
        sq = ric.norm_sq(n)
        nrm = {"l2": math.sqrt(integrate(g, sq)), "l2w": math.sqrt(integrate(g, sq * rho**2)),
               "l2_fw": math.sqrt(integrate(g, sq, ef)), "l2w_fw": math.sqrt(integrate(g, sq * rho**2, ef))}
        return GradientField(ric, nrm, 0.0, nrm["l2_fw"], 0.0)
    hs = hessian(g, sol.f)
    T = ric + hs
    sq = T.norm_sq(n)
    norms = {
        "l2": math.sqrt(integrate(g, sq)),
        "l2w": math.sqrt(integrate(g, sq * rho**2)),
        "l2_fw": math.sqrt(integrate(g, sq, ef)),
        "l2w_fw": math.sqrt(integrate(g, sq * rho**2, ef)),
    }
    res = weighted_divergence(g, T, sol.f)
    if refine and g.generator is not None:
        gf = g.on_grid(g.grid.refined(2))
        res = (4 * _divergence_residual_field(gf, solve_potential(gf))[::2] - res) / 3
    # the one-sided closures at the grid ends are not part of the identity
    r = g.r
    inner = (r >= 2 * r[0]) & (r <= 0.5 * r[-1])
    h1 = math.sqrt(integrate(g, sq + pointwise_gradient_sq(g, T), ef))
    div_res = math.sqrt(integrate(g, np.where(inner, res, 0.0) ** 2, ef)) / h1 if h1 > 0 else 0.0
    return GradientField(T, norms, div_res,
                         math.sqrt(integrate(g, ric.norm_sq(n), ef)),
                         math.sqrt(integrate(g, hs.norm_sq(n), ef)))


# ---------------------------------------------------------- first variation

def linear_mass(g: MetricProfile, h: RadialTwoTensor) -> float:
    """m_ADM(g_b + h) for the linear perturbation h (flat coordinates at infinity)."""
    n, r, grid = g.n, g.r, g.grid
    a, b = g.warped()
    p = h.radial * a**2
    q = h.tangential * b**2 / r**2
    dq = grid.dr(q)
    integrand = g.link.link_volume * r ** (n - 1) * (n - 1) * ((p - q) / r - dq)
    idx = outer_indices(grid)
    if np.max(np.abs(integrand[idx])) == 0:
        return 0.0
    return extrapolate_limit(r[idx], integrand[idx]).limit


def first_variation_analytic(g: MetricProfile, h: RadialTwoTensor, sol: Optional[PotentialSolution] = None,
                             include_mass: bool = True) -> float:
    """-int <h, Ric + Hess f> e^{-f} dmu + m_ADM(g_b + h)."""
    if sol is None:
        sol = solve_potential(g)
    gf = gradient_field(g, sol)
    val = -integrate(g, h.inner(gf.tensor, g.n), sol.w**2)
    if include_mass:
        val += linear_mass(g, h)
    return val


def _fd_first(fun: Callable[[float], float], t: float) -> float:
    d1 = (fun(t) - fun(-t)) / (2 * t)
    d2 = (fun(t / 2) - fun(-t / 2)) / t
    return (4 * d2 - d1) / 3


def first_variation_check(g: MetricProfile, g_b: Optional[MetricProfile], h: TensorLike,
                          t: float = 1e-3, functional: str = "lambda0", refine: bool = False) -> tuple[float, float]:
    """(analytic, fd) for the first variation of lambda^0 (or lambda_ALE) along h."""
    def on(gg):
        hh = _tensor_on(h, gg)
        include_mass = functional == "lambda0"
        analytic = first_variation_analytic(gg, hh, include_mass=include_mass)

        def F(tt):
            rep = lambda_ale(perturb(gg, hh, tt), g_b)
            return rep.lambda0 if functional == "lambda0" else rep.lambda_ale
        return analytic, _fd_first(F, t)

    a1, f1 = on(g)
    if not refine or g.generator is None:
        return a1, f1
    a2, f2 = on(g.on_grid(g.grid.refined(2)))
    return (4 * a2 - a1) / 3, (4 * f2 - f1) / 3


# ------------------------------------------------------- volume variation

def volume_variation_rhs(g: MetricProfile, h: RadialTwoTensor, sol: PotentialSolution) -> np.ndarray:
    """1/2 (div_f div_f h - <h, Ric_f>)."""
    fr = _frame(g)
    n = g.n
    f = sol.f
    fs = fr.ds(f)
    Y = weighted_divergence(g, h, f)
    divf_Y = fr.ds(Y) + (n - 1) * fr.H * Y - Y * fs
    ric_f = ricci_tensor(g) + hessian(g, f)
    return 0.5 * (divf_Y - h.inner(ric_f, n))


def solve_weighted_poisson(g: MetricProfile, rhs: np.ndarray, weight: np.ndarray) -> np.ndarray:
    """Lap_f Z = rhs with Z'(r0) = 0 and Z' + (n-2) Z / r = 0 at r_max."""
    grid = g.grid
    n = g.n
    omega = volume_density(g) * weight
    a = radial_metric_factor(g)
    kap = omega / a**2 / grid.r
    kmid = 0.5 * (kap[1:] + kap[:-1]) / grid.h
    V = grid.quad_weights() * omega
    M = grid.size
    diag = np.zeros(M)
    diag[:-1] += kmid
    diag[1:] += kmid
    diag[-1] += (n - 2) * omega[-1] / a[-1] ** 2 / grid.r[-1]
    ab = np.zeros((3, M))
    ab[0, 1:] = -kmid
    ab[1] = diag
    ab[2, :-1] = -kmid
    try:
        return solve_banded((1, 1), ab, -rhs * V)
    except np.linalg.LinAlgError as exc:
        raise GeometryError("singular weighted operator") from exc


def volume_variation_solve(g: MetricProfile, h: RadialTwoTensor, sol: Optional[PotentialSolution] = None) -> np.ndarray:
    """delta f(h), from Lap_f(tr h / 2 - delta f) = 1/2 (div_f div_f h - <h, Ric_f>)."""
    if sol is None:
        sol = solve_potential(g)
    Z = solve_weighted_poisson(g, volume_variation_rhs(g, h, sol), sol.w**2)
    return 0.5 * h.trace(g.n) - Z


def potential_variation_fd(g: MetricProfile, h: RadialTwoTensor, t: float = 1e-3) -> np.ndarray:
    fp = solve_potential(perturb(g, h, t)).f
    fm = solve_potential(perturb(g, h, -t)).f
    fp2 = solve_potential(perturb(g, h, t / 2)).f
    fm2 = solve_potential(perturb(g, h, -t / 2)).f
    return (4 * (fp2 - fm2) / t - (fp - fm) / (2 * t)) / 3


# --------------------------------------------------------- second variation

def divergence_free_tensor(g_b: MetricProfile, P: np.ndarray) -> RadialTwoTensor:
    """Diagonal h with div h = 0 built from its radial component P (flat-type backgrounds)."""
    fr = _frame(g_b)
    Q = P + fr.ds(P) / ((g_b.n - 1) * fr.H)
    return tensor(P, Q)


def second_variation_general(g: MetricProfile, h: RadialTwoTensor, sol: Optional[PotentialSolution] = None) -> float:
    """delta^2 lambda_ALE(h, h) at a general radial metric g."""
    if sol is None:
        sol = solve_potential(g)
    n = g.n
    fr = _frame(g)
    f = sol.f
    ef = sol.w**2
    fs = fr.ds(f)
    Z = solve_weighted_poisson(g, volume_variation_rhs(g, h, sol), ef)
    lap_f = rough_laplacian(g, h, ef)
    rm = curvature_action(g, h)
    Bf = weighted_divergence(g, h, f) - fr.ds(Z)
    lie = lie_derivative(g, Bf)
    first = lap_f + 2.0 * rm - lie
    ric_f = ricci_tensor(g) + hessian(g, f)
    comp = tensor(2 * h.radial * ric_f.radial - 2 * Z * ric_f.radial,
                  2 * h.tangential * ric_f.tangential - 2 * Z * ric_f.tangential)
    return 0.5 * pair(g, first, h, ef) + 0.5 * pair(g, comp, h, ef)


def _fd_second(fun: Callable[[float], float], t: float) -> float:
    f0 = fun(0.0)
    d1 = (fun(t) - 2 * f0 + fun(-t)) / t**2
    d2 = (fun(t / 2) - 2 * f0 + fun(-t / 2)) / (t / 2) ** 2
    return (4 * d2 - d1) / 3


def second_variation_quadform(g_b: MetricProfile, h: TensorLike, t: float = 1e-2, require_div_free: bool = True,
                              refine: bool = False) -> tuple[float, float]:
    """(1/2 <L h, h>, second difference of lambda_ALE(g_b + t h)) at a Ricci-flat g_b."""
    def on(gg):
        hh = _tensor_on(h, gg)
        if require_div_free:
            dv = divergence(gg, hh)
            scale = max(float(np.max(np.abs(hh.radial))), 1e-300)
            if np.max(np.abs(dv[2:-2])) > 1e-6 * scale * max(1.0, 1.0 / gg.r[0]):
                raise ValueError("h is not divergence-free at g_b")
        analytic = 0.5 * pair(gg, lichnerowicz_apply(gg, hh), hh)
        fd = _fd_second(lambda tt: lambda_ale(perturb(gg, hh, tt)).lambda_ale, t)
        return analytic, fd

    a1, f1 = on(g_b)
    if not refine or g_b.generator is None:
        return a1, f1
    a2, f2 = on(g_b.on_grid(g_b.grid.refined(2)))
    return (4 * a2 - a1) / 3, (4 * f2 - f1) / 3


def second_variation_fd_general(g: MetricProfile, h: RadialTwoTensor, t: float = 1e-2) -> float:
    # t = 0 goes through perturb too, so all samples share one representation
    return _fd_second(lambda tt: lambda_ale(perturb(g, h, tt)).lambda_ale, t)


def hessian_sobolev_control(g_b: MetricProfile, h: RadialTwoTensor) -> tuple[float, float]:
    """(||h||_{H^2_{n/2-1}}, ||L h||_{L^2_{n/2+1}}) on a flat background."""
    from .weighted_analysis import WeightedNormSpec, weighted_sobolev_norm

    n = g_b.n
    if not np.any(h.radial) and not np.any(h.tangential):
        return 0.0, 0.0
    lhs = weighted_sobolev_norm(h, g_b, WeightedNormSpec("sobolev", 2, n / 2.0 - 1.0))
    Lh = lichnerowicz_apply(g_b, h)
    rhs = weighted_sobolev_norm(Lh, g_b, WeightedNormSpec("sobolev", 0, n / 2.0 + 1.0))
    return lhs, rhs
