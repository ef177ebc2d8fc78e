"""Lojasiewicz experiments: linear-level bounds, u_{A,tau} rates, perturbation sweeps and exponent fits."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .manifold_core import (
    GeometryError,
    LinkGeometry,
    MetricProfile,
    RadialGrid,
    RadialTwoTensor,
    conformal_from_function,
    cutoff,
    flat_profile,
    volume_density,
)
from .potential_lambda import DivergenceError, SolvabilityError, lambda_ale, solve_potential
from .variations import gradient_field, integrate, lichnerowicz_apply, pair, perturb, tensor
from .weighted_analysis import weighted_l2_sq

log = logging.getLogger(__name__)


@dataclass
class LojaSample:
    label: str
    t: float
    tau: float
    A: float
    lambda_abs: float
    grad_l2: float
    grad_l2_weighted: float
    quad: float = math.nan
    lambda_signed: float = math.nan
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.error is None


CSV_COLUMNS = ["label", "t", "tau", "A", "lambda_abs", "grad_l2", "grad_l2w", "quad"]


# ------------------------------------------------------------- u_{A,tau}

def u_A_tau(r: np.ndarray, A: float, tau: float):
    """chi_A rho^-tau with its first two r-derivatives (rho = r on the support, A >= 1)."""
    chi, dchi, d2chi = cutoff(r, A)
    p = r**-tau
    dp = -tau * r ** (-tau - 1)
    d2p = tau * (tau + 1) * r ** (-tau - 2)
    return chi * p, dchi * p + chi * dp, d2chi * p + 2 * dchi * dp + chi * d2p


def _octave_grid(A: float, rmax_factor: float = 2.0**14, per_octave: int = 120) -> RadialGrid:
    octs = int(round(math.log2(rmax_factor)))
    return RadialGrid.octaves(A / 2.0, octs, per_octave)


def linear_loja_check(g_b: MetricProfile, h: RadialTwoTensor) -> tuple[float, float, float]:
    """(<-L h, h>, ||L h||^2_{L^2_{n/2+1}}, ratio) on a flat background."""
    n = g_b.n
    if not np.any(h.radial) and not np.any(h.tangential):
        return 0.0, 0.0, 0.0
    Lh = lichnerowicz_apply(g_b, h)
    lhs = -pair(g_b, Lh, h)
    rhs, _ = weighted_l2_sq(Lh, g_b, n / 2.0 + 1.0, check_tail=False)
    return lhs, rhs, (lhs / rhs if rhs > 0 else 0.0)


@dataclass
class SlopeFit:
    slope: float
    stderr: float
    expected: float
    values: list = field(default_factory=list)

    @property
    def ci95(self) -> tuple[float, float]:
        return self.slope - 1.96 * self.stderr, self.slope + 1.96 * self.stderr


def _loglog_fit(x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    lx, ly = np.log(x), np.log(y)
    if lx.size < 3:
        coef = np.polyfit(lx, ly, 1)
        return float(coef[0]), 0.0
    coef, cov = np.polyfit(lx, ly, 1, cov=True)
    return float(coef[0]), float(math.sqrt(max(cov[0, 0], 0.0)))


def u_A_tau_energies(n: int, tau: float, A: float, per_octave: int = 120,
                     rmax_factor: float = 2.0**14) -> dict:
    """int |grad u|^2, ||Lap u||^2_{L^2}, ||Lap u||^2_{L^2_{n/2+1}} on flat R^n (tails added analytically)."""
    grid = _octave_grid(A, rmax_factor, per_octave)
    r = grid.r
    link = LinkGeometry(n)
    u, du, d2u = u_A_tau(r, A, tau)
    lap = d2u + (n - 1) * du / r
    V = link.link_volume
    wq = grid.quad_weights() * V * r ** (n - 1)
    rho2 = np.maximum(1.0, r) ** 2
    R = r[-1]
    # beyond r_max: u = r^-tau exactly; at tau = (n-2)/2 the tail diverges
    # logarithmically and the energy is kept on the truncated domain
    c = tau * (tau + 2 - n)
    border = math.isclose(2 * tau, n - 2)
    e_tail = 0.0 if border else V * tau**2 * R ** (n - 2 - 2 * tau) / (2 * tau - (n - 2))
    lap_tail = V * c**2 * R ** (n - 4 - 2 * tau) / (2 * tau - (n - 4))
    lapw_tail = 0.0 if border else V * c**2 * R ** (n - 2 - 2 * tau) / (2 * tau - (n - 2))
    return {"dirichlet": float(np.sum(du**2 * wq)) + e_tail,
            "lap_l2": float(np.sum(lap**2 * wq)) + lap_tail,
            "lap_l2w": float(np.sum(lap**2 * rho2 * wq)) + lapw_tail}


def rate_experiment_u_A_tau(n: int, tau: float, A_list: Sequence[float], per_octave: int = 120,
                            rmax_factor: float = 2.0**14) -> dict:
    """Log-log slopes of the three u_{A,tau} energies against A."""
    A = np.asarray(sorted(A_list), float)
    if A.size < 2:
        raise ValueError("need at least two values of A")
    if A[-1] / A[0] < 10.0:
        raise ValueError("A_list must span at least one decade")
    if A[0] < 1.0:
        raise ValueError("A must be >= 1 so that rho = r on the support")
    if rmax_factor < 64.0:
        raise GeometryError("A range too close to R_max")
    if 2 * tau <= n - 2:
        log.warning("tau <= (n-2)/2: the Dirichlet energy is borderline or divergent")
    rows = [u_A_tau_energies(n, tau, a, per_octave, rmax_factor) for a in A]
    expected = {"dirichlet": (n - 2) - 2 * tau, "lap_l2": (n - 4) - 2 * tau, "lap_l2w": (n - 2) - 2 * tau}
    out = {}
    for key in ("dirichlet", "lap_l2", "lap_l2w"):
        y = np.array([row[key] for row in rows])
        s, se = _loglog_fit(A, y)
        out[key] = SlopeFit(s, se, expected[key], [float(v) for v in y])
    out["A"] = [float(a) for a in A]
    return out


# ------------------------------------------------------------ sweeps

def bump(r: np.ndarray, centre: float = 2.0, width: float = 0.5):
    """exp(-(log(r/c)/w)^2) and its r-derivatives."""
    s = np.log(r / centre) / width
    e = np.exp(-s * s)
    ds = 1.0 / (width * r)
    de = -2 * s * e * ds
    d2e = (-2 * ds**2 * e + 4 * s * s * e * ds**2) + (-2 * s * e) * (-1.0 / (width * r * r))
    return e, de, d2e


def conformal_family_member(link: LinkGeometry, grid: RadialGrid, t: float, mode: str = "bump",
                            tau: float = 0.0, A: float = 1.0, centre: float = 2.0, width: float = 0.5) -> MetricProfile:
    """g = u^{4/(n-2)} g_e with u = 1 + t phi, phi a log-gaussian bump or u_{A,tau}."""
    def u_fn(r):
        if mode == "bump":
            p, dp, d2p = bump(r, centre, width)
        elif mode == "u_A_tau":
            p, dp, d2p = u_A_tau(r, A, tau)
        else:
            raise ValueError(f"unknown family mode {mode!r}")
        return 1.0 + t * p, t * dp, t * d2p
    decay = tau if mode == "u_A_tau" else float(link.n)
    return conformal_from_function(link, grid, u_fn, decay, params={"t": t, "mode": mode, "tau": tau, "A": A})


def evaluate_sample(g: MetricProfile, label: str, t: float, tau: float, A: float,
                    h: Optional[RadialTwoTensor] = None, g_b: Optional[MetricProfile] = None) -> LojaSample:
    try:
        sol = solve_potential(g)
        rep = lambda_ale(g, sol=sol)
        gf = gradient_field(g, sol)
        quad = math.nan
        if h is not None and g_b is not None:
            quad = -pair(g_b, lichnerowicz_apply(g_b, h), h)
        return LojaSample(label, t, tau, A, abs(rep.lambda_ale), gf.norms["l2"], gf.norms["l2w"], quad,
                          rep.lambda_ale)
    except (SolvabilityError, DivergenceError, GeometryError) as exc:
        log.warning("sample %s failed: %s", label, exc)
        return LojaSample(label, t, tau, A, math.nan, math.nan, math.nan, error=str(exc))


def sweep_perturbations(g_b: MetricProfile, family: dict) -> list[LojaSample]:
    """Evaluate lambda_ALE and the gradient norms along a family of perturbations of flat g_b.

    family keys: mode ('bump' | 'u_A_tau' | 'diagonal'), t_values, A_values, tau,
    centre, width, per_octave.  Failed samples are recorded and the sweep continues.
    """
    if g_b.family != "flat":
        raise GeometryError("sweeps are implemented around the flat background")
    link = g_b.link
    n = link.n
    mode = family.get("mode", "bump")
    ts = list(family.get("t_values", [0.1 * 2.0**-k for k in range(8)]))
    As = list(family.get("A_values", [family.get("A", 1.0)]))
    tau = float(family.get("tau", n - 2))
    out = []
    for A in As:
        grid = g_b.grid
        if mode == "u_A_tau":
            grid = _octave_grid(A, family.get("rmax_factor", 2.0**12), family.get("per_octave", 100))
        gb = flat_profile(link, grid) if grid is not g_b.grid else g_b
        for t in ts:
            label = f"{mode}:A={A:g}:t={t:g}"
            if mode == "diagonal":
                from .variations import divergence_free_tensor
                e, _, _ = bump(gb.r, family.get("centre", 4.0), family.get("width", 0.4))
                hdir = divergence_free_tensor(gb, e)
                try:
                    g = perturb(gb, hdir, t)
                except GeometryError as exc:
                    out.append(LojaSample(label, t, tau, A, math.nan, math.nan, math.nan, error=str(exc)))
                    continue
                out.append(evaluate_sample(g, label, t, tau, A, t * hdir, gb))
                continue
            try:
                g = conformal_family_member(link, grid, t, mode, tau, A,
                                            family.get("centre", 4.0), family.get("width", 0.4))
            except GeometryError as exc:
                out.append(LojaSample(label, t, tau, A, math.nan, math.nan, math.nan, error=str(exc)))
                continue
            k = 4.0 / (n - 2)
            phi = g.profiles["u"] ** k - 1.0
            out.append(evaluate_sample(g, label, t, tau, A, RadialTwoTensor.conformal(phi), gb))
    return out


# --------------------------------------------------------------- fitting

@dataclass
class ExponentFit:
    theta: float
    C: float
    residual: float
    r_squared: float
    slope: float
    flagged: bool
    admissible_bound: Optional[float] = None
    admissible: Optional[bool] = None
    note: str = ""
    max_ratio: float = math.nan
    bound_raw: Optional[float] = None  # 2 - 1/delta_max, also when not positive

    def to_dict(self) -> dict:
        return asdict(self)


def theta_l2_limit(n: int, tau: float) -> Optional[float]:
    """2 - 1/delta_max with delta_max = (2 tau - (n-2)) / (2 tau - (n-4)); None if delta_max <= 0."""
    dmax = (2 * tau - (n - 2)) / (2 * tau - (n - 4))
    if dmax <= 0:
        return None
    return 2.0 - 1.0 / dmax


def admissible_theta_l2(n: int, tau: float) -> Optional[float]:
    """The L^2 exponent bound when it is positive, else None."""
    theta = theta_l2_limit(n, tau)
    return theta if theta is not None and theta > 0 else None


def fit_lojasiewicz_exponent(samples: Iterable[LojaSample], norm: str = "l2w", n: Optional[int] = None,
                             tau: Optional[float] = None, tol: float = 0.05) -> ExponentFit:
    """Fit log|lambda| = (1/(2-theta)) (log C + log ||grad||^2)."""
    ss = [s for s in samples if s.ok and s.lambda_abs > 0]
    if norm not in ("l2", "l2w"):
        raise ValueError("norm must be 'l2' or 'l2w'")
    grad = np.array([(s.grad_l2 if norm == "l2" else s.grad_l2_weighted) ** 2 for s in ss])
    lam = np.array([s.lambda_abs for s in ss])
    keep = grad > 0
    grad, lam = grad[keep], lam[keep]
    if lam.size == 0:
        raise ValueError("degenerate samples: all zero")
    if lam.size < 8:
        raise ValueError("need at least 8 positive samples")
    x, y = np.log(grad), np.log(lam)
    slope, icpt = np.polyfit(x, y, 1)
    pred = slope * x + icpt
    ss_res = float(np.sum((y - pred) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    theta = 2.0 - 1.0 / slope
    C = float(np.exp(icpt / slope))
    res = float(np.sqrt(ss_res / lam.size))
    fit = ExponentFit(theta, C, res, r2, float(slope), r2 < 0.98, max_ratio=float(np.max(lam / grad)))
    if fit.flagged:
        log.warning("Lojasiewicz fit flagged: R^2 = %.4f < 0.98", r2)
    if norm == "l2" and n is not None and tau is not None:
        fit.admissible_bound = admissible_theta_l2(n, tau)
        fit.bound_raw = theta_l2_limit(n, tau)
        if fit.admissible_bound is None:
            fit.note = "no positive theta available"
        if fit.bound_raw is not None:
            fit.admissible = bool(theta <= fit.bound_raw + tol)
    return fit


def samples_to_csv(samples: Sequence[LojaSample], path: str) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        fh.write("# lambda_abs in length^(n-2); grad norms of Ric + Hess f; quad = <-Lh,h>\n")
        w.writerow(CSV_COLUMNS)
        for s in samples:
            w.writerow([s.label] + [f"{v:.17g}" for v in (s.t, s.tau, s.A, s.lambda_abs, s.grad_l2,
                                                          s.grad_l2_weighted, s.quad)])


def samples_from_csv(path: str) -> list[LojaSample]:
    out = []
    with open(path) as fh:
        rows = [row for row in csv.reader(fh) if row and not row[0].startswith("#")]
    header = rows[0]
    for row in rows[1:]:
        d = dict(zip(header, row))
        out.append(LojaSample(d["label"], float(d["t"]), float(d["tau"]), float(d["A"]), float(d["lambda_abs"]),
                              float(d["grad_l2"]), float(d["grad_l2w"]), float(d["quad"])))
    return out
