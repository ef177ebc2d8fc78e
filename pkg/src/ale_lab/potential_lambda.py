"""Minimiser w_g, potential f_g = -2 ln w_g, and the functionals lambda^0, mass, lambda.

The Euler-Lagrange equation -4 Lap_g w + R_g w = 0 is discretised as a
conservative (finite-volume) three-point scheme in x = log r, so the discrete
analogues of the integration-by-parts identities between the volume, flux
and Dirichlet forms of lambda^0 hold to rounding.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Union

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.linalg import solve_banded
from scipy.optimize import minimize_scalar

from .manifold_core import (
    GeometryError,
    MetricProfile,
    RadialGrid,
    cutoff,
    deviation_components,
    deviation_q_derivative,
    radial_metric_factor,
    scalar_curvature,
    volume_density,
    warped_profile,
)

log = logging.getLogger(__name__)

ROUNDOFF_FLOOR = 1e-14  # |R| r^2 below this is cancellation error


class SolvabilityError(RuntimeError):
    """The metric lies outside the neighbourhood where w_g exists (w <= 0, singular system)."""


class DivergenceError(RuntimeError):
    """A limit or iteration failed to converge numerically."""


@dataclass
class Extrapolation:
    limit: float
    residual: float
    kappa: float
    radii: np.ndarray
    values: np.ndarray


def outer_indices(grid: RadialGrid, fraction: float = 0.25) -> np.ndarray:
    """Node indices in the outer ``fraction`` of the grid (in log r)."""
    x = grid.x
    cut = x[-1] - fraction * (x[-1] - x[0])
    return np.nonzero(x >= cut)[0]


def extrapolate_limit(R: np.ndarray, vals: np.ndarray) -> Extrapolation:
    """Fit vals ~ a + b R^{-kappa} (kappa free) and return the limit a."""
    R = np.asarray(R, float)
    vals = np.asarray(vals, float)
    scale = max(np.max(np.abs(vals)), 1e-300)
    if np.ptp(vals) <= 1e-14 * scale:
        return Extrapolation(float(vals[-1]), 0.0, float("nan"), R, vals)
    lr = np.log(R / R[-1])

    def fit(kappa):
        X = np.column_stack([np.ones_like(R), np.exp(-kappa * lr)])
        coef, *_ = np.linalg.lstsq(X, vals, rcond=None)
        res = vals - X @ coef
        return coef, float(np.sqrt(np.mean(res**2)))

    opt = minimize_scalar(lambda k: fit(k)[1], bounds=(0.05, 12.0), method="bounded",
                          options={"xatol": 1e-10})
    coef, res = fit(opt.x)
    return Extrapolation(float(coef[0]), res, float(opt.x), R, vals)


@dataclass
class PotentialSolution:
    w: np.ndarray
    f: np.ndarray
    v: np.ndarray
    mass_coefficient: float
    residual: float
    lambda0_volume: float
    lambda0_flux: float
    lambda0_dirichlet: float
    R: np.ndarray
    fluxes: np.ndarray  # 4 * boundary flux through r_{i+1/2}, last entry = outer boundary
    grid: RadialGrid
    diagnostics: dict = field(default_factory=dict)

    @property
    def lambda0(self) -> float:
        return self.lambda0_volume


def _operator_parts(g: MetricProfile):
    grid = g.grid
    h = grid.h
    r = grid.r
    omega = volume_density(g)
    a = radial_metric_factor(g)
    kappa = omega / a**2 / r  # K / r with K = omega / a^2
    kmid = 0.5 * (kappa[1:] + kappa[:-1]) / h
    V = grid.quad_weights() * omega
    return omega, a, kmid, V


def solve_potential(g: MetricProfile, R: Optional[np.ndarray] = None) -> PotentialSolution:
    """Solve -4 Lap v + R v = -R with v'(r0) = 0 and v' + (n-2) v / r = 0 at r_max."""
    n, grid, r = g.n, g.grid, g.r
    if R is None:
        R = scalar_curvature(g)
    if not np.all(np.isfinite(R)):
        raise SolvabilityError("scalar curvature is not finite")
    # samples at the cancellation level of the O(r^-2) curvature terms are noise;
    # integrated against r^{n-1} they would otherwise grow like r_max^{n-2}
    R = np.where(np.abs(R) * r**2 <= ROUNDOFF_FLOOR, 0.0, R)
    omega, a, kmid, V = _operator_parts(g)
    M = r.size
    K_M = omega[-1] / a[-1] ** 2
    robin = 4.0 * (n - 2) * K_M / r[-1]
    diag = np.zeros(M)
    diag[:-1] += 4 * kmid
    diag[1:] += 4 * kmid
    diag += R * V
    diag[-1] += robin
    ab = np.zeros((3, M))
    ab[0, 1:] = -4 * kmid
    ab[1] = diag
    ab[2, :-1] = -4 * kmid
    rhs = -R * V
    try:
        v = solve_banded((1, 1), ab, rhs)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise SolvabilityError("outside lambda_ALE^0 neighborhood: singular system") from exc
    if not np.all(np.isfinite(v)):
        raise SolvabilityError("outside lambda_ALE^0 neighborhood: singular system")
    w = 1.0 + v
    if np.any(w <= 0):
        raise SolvabilityError("outside lambda_ALE^0 neighborhood: w <= 0")
    # discrete residual of -4 Lap w + R w, per unit volume
    Av = diag * v
    Av[1:] += ab[0, 1:] * v[:-1]
    Av[:-1] += ab[2, :-1] * v[1:]
    scale = max(1.0, float(np.max(np.abs(R))))
    residual = float(np.max(np.abs((Av - rhs) / V)) / scale)

    # 4 * flux through the dual faces; outer boundary flux from the Robin condition
    face = 4 * kmid * np.diff(v)
    F_out = -4.0 * (n - 2) * K_M * v[-1] / r[-1]
    fluxes = np.append(face, F_out)

    vol = float(np.sum(R * w * V))
    vol_tail = _curvature_tail(g, R * w * omega, R)
    dir_in = float(np.sum(face * np.diff(v)) + np.sum(R * w**2 * V))
    # gradient energy beyond r_max of the exterior profile v = c r^{2-n}
    dir_tail = 4.0 * (n - 2) * K_M * v[-1] ** 2 / r[-1] + vol_tail

    idx = outer_indices(grid)
    rf = np.sqrt(r[idx[:-1]] * r[idx[:-1] + 1])
    fx = extrapolate_limit(np.append(rf, r[-1]), np.append(face[idx[:-1]], F_out))

    c_fit = extrapolate_limit(r[idx], v[idx] * r[idx] ** (n - 2))
    c_w = -c_fit.limit
    diags = {"flux_extrapolation": fx, "mass_coefficient_fit": c_fit,
             "volume_tail": vol_tail, "dirichlet_tail": dir_tail}
    tail_rate = _decay_rate(r[idx], R[idx], 1e-12 * float(np.max(np.abs(R))))
    if _roundoff_curvature(r[idx], R[idx]):
        tail_rate = -math.inf
    if np.isfinite(tail_rate) and tail_rate > -n:
        log.warning("mass coefficient unreliable: R decays like r^%.3g", tail_rate)
        diags["warning"] = "mass coefficient unreliable"
    return PotentialSolution(w=w, f=-2.0 * np.log(w), v=v, mass_coefficient=c_w, residual=residual,
                             lambda0_volume=vol + vol_tail, lambda0_flux=fx.limit,
                             lambda0_dirichlet=dir_in + dir_tail, R=R, fluxes=fluxes, grid=grid,
                             diagnostics=diags)


def _decay_rate(r, T, floor: float = 0.0):
    T = np.abs(T)
    if np.all(T <= floor):
        return -math.inf
    mask = T > 0
    if mask.sum() < 3:
        return -math.inf
    return float(np.polyfit(np.log(r[mask]), np.log(T[mask]), 1)[0])


def _curvature_tail(g: MetricProfile, dens: np.ndarray, R: Optional[np.ndarray] = None) -> float:
    """int_{r_max}^infty of a power-law density extrapolated from the outer nodes."""
    r = g.r
    idx = outer_indices(g.grid)
    if R is not None and _roundoff_curvature(r[idx], R[idx]):
        return 0.0
    rate = _decay_rate(r[idx], dens[idx], 1e-12 * float(np.max(np.abs(dens))))
    if not np.isfinite(rate) or abs(dens[-1]) == 0:
        return 0.0
    if rate >= -1:
        return math.nan
    return float(-dens[-1] * r[-1] / (rate + 1))


def _roundoff_curvature(r: np.ndarray, R: np.ndarray) -> bool:
    """Curvature samples at the level of cancellation error in O(r^-2) terms."""
    return bool(np.all(np.abs(R) * r**2 <= ROUNDOFF_FLOOR))


def lambda0_volume_integral(sol: PotentialSolution, g: MetricProfile) -> float:
    return sol.lambda0_volume


def lambda0_flux(sol: PotentialSolution, g: MetricProfile) -> float:
    ex = sol.diagnostics["flux_extrapolation"]
    if not np.isfinite(ex.limit):
        raise DivergenceError("non-convergent flux extrapolation")
    return ex.limit


def lambda0_dirichlet(sol: PotentialSolution, g: MetricProfile) -> float:
    return sol.lambda0_dirichlet


# ------------------------------------------------------------------- mass

def mass_integrand(g: MetricProfile) -> np.ndarray:
    """int_{rho=r} <div_e h - grad tr_e h, nu> d sigma_e at every node, h = g - g_e."""
    n, r, grid = g.n, g.r, g.grid
    p, q = deviation_components(g)
    dq = deviation_q_derivative(g)
    return g.link.link_volume * r ** (n - 1) * (n - 1) * ((p - q) / r - dq)


def adm_mass_extrapolation(g: MetricProfile, g_b: Optional[MetricProfile] = None) -> Extrapolation:
    m = mass_integrand(g)
    if g_b is not None and g_b.family not in ("flat",):
        if g_b.grid.size != g.grid.size or not np.allclose(g_b.r, g.r):
            g_b = g_b.on_grid(g.grid)
        m = m - mass_integrand(g_b)
    idx = outer_indices(g.grid)
    return extrapolate_limit(g.r[idx], m[idx])


def adm_mass(g: MetricProfile, g_b: Optional[MetricProfile] = None) -> float:
    ex = adm_mass_extrapolation(g, g_b)
    scale = max(np.max(np.abs(ex.values)), 1e-12)
    # cancellation level of the boundary integrand, ~ eps V r^{n-2}
    noise = 10.0 * ROUNDOFF_FLOOR * g.link.link_volume * g.r[-1] ** (g.n - 2)
    if not np.isfinite(ex.limit) or ex.residual > max(1e-3 * scale, noise):
        raise DivergenceError("mass undefined at this decay")
    return ex.limit


# --------------------------------------------------------------- lambda_ALE

@dataclass
class FunctionalReport:
    lambda0: float
    adm_mass: float
    lambda_ale: float
    lambda_ale_renormalized: float
    cutoff_radii: np.ndarray
    extrapolation_diagnostics: dict
    lambda0_volume: float = math.nan
    lambda0_flux: float = math.nan
    lambda0_dirichlet: float = math.nan
    difference_form_defined: bool = True

    @property
    def agreement_gap(self) -> float:
        return abs(self.lambda_ale - self.lambda_ale_renormalized)

    def to_dict(self) -> dict:
        return {
            "lambda0": self.lambda0,
            "lambda0_volume": self.lambda0_volume,
            "lambda0_flux": self.lambda0_flux,
            "lambda0_dirichlet": self.lambda0_dirichlet,
            "adm_mass": self.adm_mass,
            "lambda_ale": self.lambda_ale,
            "lambda_ale_renormalized": self.lambda_ale_renormalized,
            "agreement_gap": self.agreement_gap,
            "difference_form_defined": self.difference_form_defined,
            "cutoff_radii": [float(x) for x in self.cutoff_radii],
            "extrapolation": {k: float(v) for k, v in self.extrapolation_diagnostics.items()},
        }


def conformal_renormalized(sol: PotentialSolution, g: MetricProfile) -> np.ndarray:
    """D(r_k) - mass(r_k) for g = u^{4/(n-2)} g_e, with the linear parts cancelled analytically.

    Uses R dmu = -c u Lap_e u dmu_e (c = 4(n-1)/(n-2)), so that
    int_B R dmu - mass = c int_B |u'|^2 dmu_e - c V r^{n-1} u' (u - u^{(6-n)/(n-2)}) + inner term,
    and every remaining integrand is absolutely integrable for 2 tau > n - 2.
    """
    n, r = g.n, g.r
    c = 4.0 * (n - 1) / (n - 2)
    V = g.link.link_volume
    u, du = g.profiles["u"], g.derivs["du"]
    _, _, _, Vc = _operator_parts(g)
    cell = sol.R * Vc
    half = cell.copy()
    half[1:-1] *= 0.5
    half[0] = 0.0
    excess = partial_dirichlet(sol, g) - (np.cumsum(cell) - half)
    dens = c * V * du**2 * r**n  # |u'|^2 r^{n-1} dr in x = log r
    grad = np.concatenate([[0.0], np.cumsum(0.5 * (dens[1:] + dens[:-1]) * np.diff(g.grid.x))])
    bdry = -c * V * r ** (n - 1) * du * (u - u ** ((6.0 - n) / (n - 2)))
    inner = c * V * r[0] ** (n - 1) * u[0] * du[0]
    return excess + grad + bdry + inner


def partial_dirichlet(sol: PotentialSolution, g: MetricProfile) -> np.ndarray:
    """int_{rho <= r_k} (|grad f|^2 + R) e^{-f} dmu for every node k."""
    omega, a, kmid, V = _operator_parts(g)
    w = sol.w
    face = 4 * kmid * np.diff(sol.v) ** 2
    cell = sol.R * w**2 * V
    grad_part = np.concatenate([[0.0], np.cumsum(face)])
    cell_part = np.cumsum(cell)
    # trapezoid convention: only half of the cell at r_k lies inside
    half = cell.copy()
    half[1:-1] *= 0.5
    half[0] = 0.0
    return grad_part + cell_part - half


def lambda_ale(g: MetricProfile, g_b: Optional[MetricProfile] = None,
               sol: Optional[PotentialSolution] = None) -> FunctionalReport:
    if sol is None:
        sol = solve_potential(g)
    r = g.r
    idx = outer_indices(g.grid)
    m_ex = adm_mass_extrapolation(g, g_b)
    mass_vals = mass_integrand(g)
    if g_b is not None and g_b.family != "flat":
        mass_vals = mass_vals - mass_integrand(g_b.on_grid(g.grid) if g_b.grid.size != g.grid.size else g_b)
    D = partial_dirichlet(sol, g)
    ren = extrapolate_limit(r[idx], D[idx] - mass_vals[idx])
    lam0 = sol.lambda0_volume
    defined = np.isfinite(lam0)
    diff = lam0 - m_ex.limit if defined else math.nan
    if not defined and g.family == "conformal" and "du" in g.derivs and (g_b is None or g_b.family == "flat"):
        # slow decay: the O(t) parts of D and the mass only cancel in the limit,
        # so cancel them exactly through the divergence form of R
        ren = extrapolate_limit(r[idx], conformal_renormalized(sol, g)[idx])
    return FunctionalReport(
        lambda0=lam0, adm_mass=m_ex.limit, lambda_ale=diff if defined else ren.limit,
        lambda_ale_renormalized=ren.limit, cutoff_radii=r[idx],
        extrapolation_diagnostics={"mass_residual": m_ex.residual, "mass_kappa": m_ex.kappa,
                                   "renormalized_residual": ren.residual,
                                   "flux_residual": sol.diagnostics["flux_extrapolation"].residual},
        lambda0_volume=sol.lambda0_volume, lambda0_flux=sol.lambda0_flux,
        lambda0_dirichlet=sol.lambda0_dirichlet, difference_form_defined=bool(defined))


def richardson_lambda(g: MetricProfile, g_b: Optional[MetricProfile] = None) -> FunctionalReport:
    """lambda report extrapolated from the grid and its 2x refinement (needs a generator)."""
    if g.generator is None:
        return lambda_ale(g, g_b)
    coarse = lambda_ale(g, g_b)
    fine = lambda_ale(g.on_grid(g.grid.refined(2)), g_b)

    def rx(a, b):
        return (4 * b - a) / 3

    return replace(fine,
                   lambda0=rx(coarse.lambda0, fine.lambda0),
                   adm_mass=rx(coarse.adm_mass, fine.adm_mass),
                   lambda_ale=rx(coarse.lambda_ale, fine.lambda_ale),
                   lambda_ale_renormalized=rx(coarse.lambda_ale_renormalized, fine.lambda_ale_renormalized),
                   lambda0_volume=rx(coarse.lambda0_volume, fine.lambda0_volume),
                   lambda0_flux=rx(coarse.lambda0_flux, fine.lambda0_flux),
                   lambda0_dirichlet=rx(coarse.lambda0_dirichlet, fine.lambda0_dirichlet))


# ------------------------------------------------------ diffeos and blending

def round_warped_jet(g: MetricProfile) -> dict:
    """a, a', b, b', b'' of a round-link profile (analytic where available).

    Also am1 = a - 1, bm1 = b/r - 1 and dbm1 = (b/r)', formed without cancellation
    when the profile carries its deviations.
    """
    n, r, grid = g.n, g.r, g.grid
    if g.family in ("flat", "conformal"):
        u = g.profiles["u"]
        du = g.derivs.get("du", grid.dr(u))
        d2u = g.derivs.get("d2u", grid.d2r(u))
        k = 2.0 / (n - 2)
        e = u**k
        de = k * u ** (k - 1) * du
        d2e = k * (k - 1) * u ** (k - 2) * du**2 + k * u ** (k - 1) * d2u
        em1 = np.expm1(k * np.log1p(g.derivs.get("um1", u - 1.0)))
        return {"a": e, "da": de, "b": r * e, "db": e + r * de, "d2b": 2 * de + r * d2e,
                "am1": em1, "bm1": em1.copy(), "dbm1": de}
    if g.family == "warped":
        a, b = g.profiles["a"], g.profiles["b"]
        db = g.derivs.get("db", grid.dr(b))
        return {"a": a, "da": g.derivs.get("da", grid.dr(a)), "b": b,
                "db": db, "d2b": g.derivs.get("d2b", grid.d2r(b)),
                "am1": g.derivs.get("am1", a - 1.0), "bm1": g.derivs.get("bm1", b / r - 1.0),
                "dbm1": g.derivs.get("dbm1", (db - b / r) / r)}
    raise GeometryError("radial diffeomorphisms are implemented for round-link profiles")


PsiLike = Union[np.ndarray, Callable[[np.ndarray], tuple]]


def pullback_radial_diffeo(g: MetricProfile, psi: PsiLike) -> MetricProfile:
    """phi^* g for phi(r) = r + psi(r).

    ``psi`` is either samples on the grid or a callable returning
    (psi, psi', psi'') at given radii.
    """
    r, grid = g.r, g.grid
    if callable(psi):
        p, dp, d2p = psi(r)
    else:
        p = np.asarray(psi, float)
        dp, d2p = grid.dr(p), grid.d2r(p)
    phi = r + p
    dphi = 1.0 + dp
    if np.any(dphi <= 0) or np.any(np.diff(phi) <= 0) or phi[0] <= 0:
        raise GeometryError("non-monotone diffeomorphism")
    if np.all(p == 0):
        return g
    jet = _jet_at(g, phi)
    a_new = jet["a"] * dphi
    b_new = jet["b"]
    da_new = jet["da"] * dphi**2 + jet["a"] * d2p
    db_new = jet["db"] * dphi
    d2b_new = jet["d2b"] * dphi**2 + jet["db"] * d2p
    # far-field deviations: a = a(phi) phi', b / r = (phi / r) (b / r)(phi)
    pr = p / r
    dpr = (dp - pr) / r
    am1_new = jet["am1"] * dphi + dp
    bm1_new = pr + jet["bm1"] * (1.0 + pr)
    dbm1_new = dpr * (1.0 + jet["bm1"]) + jet["dbm1"] * dphi * (1.0 + pr)
    gen = None
    if callable(psi) and g.generator is not None:
        base = g.generator
        gen = lambda gr: pullback_radial_diffeo(base(gr), psi)
    return warped_profile(g.link, grid, a_new, b_new, g.decay_order,
                          derivs={"da": da_new, "db": db_new, "d2b": d2b_new,
                                  "am1": am1_new, "bm1": bm1_new, "dbm1": dbm1_new}, generator=gen)


def _jet_at(g: MetricProfile, pts: np.ndarray) -> dict:
    if g.generator is not None:
        try:
            return round_warped_jet(g.generator(RadialGrid(pts, g.grid.cap_radius)))
        except GeometryError:
            pass
    jet = round_warped_jet(g)
    x = np.log(pts)
    out = {}
    for k, vals in jet.items():
        out[k] = CubicSpline(g.grid.x, vals)(x)
    return out


def blend_with_background(g: MetricProfile, g_b: MetricProfile, s: float) -> MetricProfile:
    """chi_s g + (1 - chi_s) g_b with chi_s = 1 - cutoff(r, s): equal to g_b on r > 2s."""
    if s <= g.r[0]:
        raise GeometryError("blend radius must exceed r_0")
    if 2 * s >= g.r[-1] and s >= g.r[-1]:
        return g
    jet = round_warped_jet(g)
    jb = round_warped_jet(g_b if g_b.grid is g.grid else g_b.on_grid(g.grid))
    c, dc, d2c = cutoff(g.r, s)
    chi, dchi, d2chi = 1.0 - c, -dc, -d2c
    # blend the coefficients of dr^2 and g_S
    A2 = chi * jet["a"] ** 2 + (1 - chi) * jb["a"] ** 2
    dA2 = dchi * (jet["a"] ** 2 - jb["a"] ** 2) + 2 * chi * jet["a"] * jet["da"] + 2 * (1 - chi) * jb["a"] * jb["da"]
    B2 = chi * jet["b"] ** 2 + (1 - chi) * jb["b"] ** 2
    dB2 = dchi * (jet["b"] ** 2 - jb["b"] ** 2) + 2 * chi * jet["b"] * jet["db"] + 2 * (1 - chi) * jb["b"] * jb["db"]
    d2B2 = (d2chi * (jet["b"] ** 2 - jb["b"] ** 2)
            + 2 * dchi * (2 * jet["b"] * jet["db"] - 2 * jb["b"] * jb["db"])
            + chi * 2 * (jet["db"] ** 2 + jet["b"] * jet["d2b"])
            + (1 - chi) * 2 * (jb["db"] ** 2 + jb["b"] * jb["d2b"]))
    a = np.sqrt(A2)
    b = np.sqrt(B2)
    da = dA2 / (2 * a)
    db = dB2 / (2 * b)
    d2b = (d2B2 - 2 * db**2) / (2 * b)
    gen = None
    if g.generator is not None and g_b.generator is not None:
        gg, gbg = g.generator, g_b.generator
        gen = lambda gr: blend_with_background(gg(gr), gbg(gr), s)
    return warped_profile(g.link, g.grid, a, b, g.decay_order,
                          derivs={"da": da, "db": db, "d2b": d2b}, generator=gen)
