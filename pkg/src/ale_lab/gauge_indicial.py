"""The operator box = div o L_X g_b, divergence-free gauges and indicial roots on cones."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional, Union

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

from .manifold_core import (
    GeometryError,
    LinkGeometry,
    MetricProfile,
    RadialGrid,
    RadialTwoTensor,
    warped_frame,
)
from .potential_lambda import DivergenceError, pullback_radial_diffeo, round_warped_jet
from .variations import divergence, integrate, lie_derivative, tensor


class WeightWindowError(ValueError):
    pass


Number = Union[int, float, Fraction]


# ------------------------------------------------------------ indicial roots

def _exact_sqrt(q: Fraction) -> Optional[Fraction]:
    if q < 0:
        return None
    num, den = q.numerator, q.denominator
    rn, rd = math.isqrt(num), math.isqrt(den)
    if rn * rn == num and rd * rd == den:
        return Fraction(rn, rd)
    return None


def _roots(c: Fraction, disc_extra: Number) -> tuple[Number, Number]:
    """c +- sqrt(c^2 + extra), exact when the discriminant is a rational square."""
    extra = Fraction(disc_extra) if not isinstance(disc_extra, float) or float(disc_extra).is_integer() else None
    if extra is not None:
        s = _exact_sqrt(c * c + extra)
        if s is not None:
            return _simplify(c + s), _simplify(c - s)
    d = math.sqrt(float(c) ** 2 + float(disc_extra))
    return float(c) + d, float(c) - d


def _simplify(q: Fraction) -> Number:
    return int(q) if q.denominator == 1 else q


def indicial_roots_vector(n: int, mu: Number) -> tuple[Number, Number]:
    """(a_plus, a_minus) = (4-n)/2 +- sqrt((4-n)^2/4 + mu)."""
    if mu < 0:
        raise ValueError("mu must be >= 0")
    return _roots(Fraction(4 - n, 2), mu)


def indicial_roots_scalar(n: int, lam: Number) -> tuple[Number, Number]:
    """(b_plus, b_minus) = (2-n)/2 +- sqrt((2-n)^2/4 + lambda)."""
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    return _roots(Fraction(2 - n, 2), lam)


@dataclass
class IndicialEntry:
    value: Number
    source: str
    j: int
    vanishing: bool = False


@dataclass
class IndicialTable:
    n: int
    gamma_order: int
    entries: list
    window: tuple

    def values(self, source: Optional[str] = None, include_vanishing: bool = True) -> list:
        return [e.value for e in self.entries
                if (source is None or e.source == source) and (include_vanishing or not e.vanishing)]

    def to_rows(self) -> list[tuple]:
        return [(e.value, e.source, e.j) for e in self.entries]


SOURCES = ("a_plus", "a_minus", "b_plus_minus_1", "b_plus_plus_1", "b_minus_minus_1", "b_minus_plus_1")


def exceptional_table(link: LinkGeometry, j_max: Optional[int] = None) -> IndicialTable:
    """Exceptional values of box on the cone over the link, up to index j_max.

    Coexact 1-form modes give a^+ - 1 and a^- - 1; scalar modes give
    b^+ +- 1 and b^- +- 1.  The j = 0 rates b^+ - 1 and b^- + 1 belong to the
    combinations that vanish identically, so they are kept in the table but
    flagged and ignored when the window is computed.
    """
    n = link.n
    jm = link.j_max if j_max is None else j_max
    entries = []
    for j in link.coexact_modes():
        if j > jm:
            continue
        mu = (j + 1) * (j + n - 3)
        ap, am = indicial_roots_vector(n, mu)
        entries.append(IndicialEntry(ap - 1, "a_plus", j))
        entries.append(IndicialEntry(am - 1, "a_minus", j))
    for j in link.scalar_modes():
        if j > jm:
            continue
        lam = j * (j + n - 2)
        bp, bm = indicial_roots_scalar(n, lam)
        entries.append(IndicialEntry(bp - 1, "b_plus_minus_1", j, vanishing=(j == 0)))
        entries.append(IndicialEntry(bp + 1, "b_plus_plus_1", j))
        entries.append(IndicialEntry(bm - 1, "b_minus_minus_1", j))
        entries.append(IndicialEntry(bm + 1, "b_minus_plus_1", j, vanishing=(j == 0)))
    entries.sort(key=lambda e: (float(e.value), SOURCES.index(e.source), e.j))
    centre = (2 - n) / 2
    live = [float(e.value) for e in entries if not e.vanishing]
    lo = max([v for v in live if v <= centre], default=-math.inf)
    hi = min([v for v in live if v > centre], default=math.inf)
    window = (_simplify(Fraction(lo)) if math.isfinite(lo) else lo,
              _simplify(Fraction(hi)) if math.isfinite(hi) else hi)
    return IndicialTable(n, link.gamma_order, entries, window)


def box_power_rate(n: int, q: float) -> float:
    """box(r^q d_r) = c(q) r^(q-2) d_r on flat space; returns c(q) = 2(q-1)(q+n-1)."""
    return 2.0 * (q - 1.0) * (q + n - 1.0)


# --------------------------------------------------------------- box operator

def _check_round(g_b: MetricProfile) -> None:
    if g_b.family == "eguchi_hanson":
        raise GeometryError("unsupported mode: box is implemented for round-link backgrounds")


def box_apply(g_b: MetricProfile, xi: np.ndarray) -> np.ndarray:
    """box X = div(L_X g_b) for X = xi e_0 (= grad div X + Lap X on flat backgrounds)."""
    _check_round(g_b)
    return divergence(g_b, lie_derivative(g_b, np.asarray(xi, float)))


def _d1_matrix(grid: RadialGrid) -> sp.csr_matrix:
    """Sparse d/dr with the stencils of RadialGrid.dr."""
    N = grid.size
    h2 = 2.0 * grid.h
    rows, cols, vals = [], [], []
    i = np.arange(1, N - 1)
    rows += [i, i]
    cols += [i + 1, i - 1]
    vals += [np.ones(N - 2), -np.ones(N - 2)]
    rows += [np.zeros(3, int), np.full(3, N - 1)]
    cols += [np.array([0, 1, 2]), np.array([N - 1, N - 2, N - 3])]
    vals += [np.array([-3.0, 4.0, -1.0]), np.array([3.0, -4.0, 1.0])]
    D = sp.csr_matrix((np.concatenate(vals) / h2, (np.concatenate(rows), np.concatenate(cols))), shape=(N, N))
    return sp.diags(1.0 / grid.r) @ D


def _frame_ops(g_b: MetricProfile):
    _check_round(g_b)
    fr = warped_frame(g_b)
    Ds = sp.diags(1.0 / fr.a) @ _d1_matrix(g_b.grid)
    return fr, Ds


def box_matrix(g_b: MetricProfile) -> sp.csr_matrix:
    fr, Ds = _frame_ops(g_b)
    n = g_b.n
    Hd = sp.diags(fr.H)
    return (Ds @ (2 * Ds) + (n - 1) * Hd @ (2 * Ds - 2 * Hd)).tocsr()


def _with_boundary_rows(M: sp.spmatrix, g_b: MetricProfile) -> sp.csr_matrix:
    """Replace the end rows by xi' - xi/r = 0 (regular at the tip) and xi' + (n-1) xi / r = 0 (decay)."""
    n, r = g_b.n, g_b.r
    D = _d1_matrix(g_b.grid)
    M = M.tolil()
    M[0, :] = D[0, :] - sp.csr_matrix(([1.0 / r[0]], ([0], [0])), shape=(1, r.size))
    M[-1, :] = D[-1, :] + sp.csr_matrix(([(n - 1) / r[-1]], ([0], [r.size - 1])), shape=(1, r.size))
    return M.tocsr()


def _check_window(n: int, beta: Optional[float]) -> None:
    if beta is None:
        return
    if not 1.0 < beta < n - 1:
        raise WeightWindowError(f"weight {beta} outside the window (1, {n - 1})")


def solve_linear_gauge(g_b: MetricProfile, h: RadialTwoTensor, beta: Optional[float] = None) -> np.ndarray:
    """xi with div(h + L_X g_b) = 0 at every interior node, X = xi e_0 decaying."""
    _check_window(g_b.n, beta)
    rhs = -divergence(g_b, h)
    if not np.any(rhs):
        return np.zeros_like(rhs)
    M = _with_boundary_rows(box_matrix(g_b), g_b)
    rhs[0] = rhs[-1] = 0.0
    xi = spsolve(M.tocsc(), rhs)
    if not np.all(np.isfinite(xi)):
        raise GeometryError("singular gauge operator")
    return xi


def gauge_residual(g_b: MetricProfile, h: RadialTwoTensor, xi: np.ndarray) -> float:
    """max over interior nodes of |div(h + L_X g_b)|, relative to max |div h|."""
    res = divergence(g_b, h + lie_derivative(g_b, xi))[1:-1]
    scale = max(float(np.max(np.abs(divergence(g_b, h)))), 1e-300)
    return float(np.max(np.abs(res))) / scale


@dataclass
class DecompositionResult:
    h_divfree: RadialTwoTensor
    X: np.ndarray
    orthogonality_gap: float = math.nan
    residual: float = 0.0


def decompose_two_tensor(g_b: MetricProfile, h: RadialTwoTensor, beta: Optional[float] = None) -> DecompositionResult:
    """h = h' + L_X g_b with div h' = 0 (interior nodes)."""
    xi = solve_linear_gauge(g_b, h, beta)
    X = -xi
    lie = lie_derivative(g_b, X)
    h_df = h - lie
    res = gauge_residual(g_b, h, xi) if np.any(xi) else 0.0
    gap = math.nan
    if beta is None or beta > g_b.n / 2.0:
        gap = integrate(g_b, h_df.inner(lie, g_b.n))
    return DecompositionResult(h_df, X, gap, res)


# ----------------------------------------------------------- nonlinear gauge

def metric_divergence(g_b: MetricProfile, g: MetricProfile) -> np.ndarray:
    """div_{g_b} g for a round-link g on g_b's grid (flat g_b)."""
    a_b, b_b = g_b.warped()
    a, b = g.warped()
    P = (a / a_b) ** 2
    Q = (b / b_b) ** 2
    return divergence(g_b, tensor(P, Q))


@dataclass
class GaugeResult:
    X: np.ndarray
    g_gauged: MetricProfile
    residuals: list
    iterations: int
    quadratic: bool
    converged: bool = True

    def convergence_orders(self) -> list[float]:
        e = [x for x in self.residuals if x > 0]
        return [math.log(e[i + 1]) / math.log(e[i]) for i in range(len(e) - 1) if 0 < e[i] < 1]


def _pullback_jacobian(g_b: MetricProfile, g: MetricProfile, psi: np.ndarray) -> sp.csr_matrix:
    """d/d psi of div_{g_b}((id + psi)^* g)."""
    grid = g_b.grid
    r = grid.r
    n = g_b.n
    a_b, b_b = g_b.warped()
    phi = r + psi
    dphi = 1.0 + grid.dr(psi)
    from .potential_lambda import _jet_at

    jet = _jet_at(g, phi)
    a_phi, da_phi = jet["a"], jet["da"]
    b_phi, db_phi = jet["b"], jet["db"]
    a_new = a_phi * dphi
    D = _d1_matrix(grid)
    # dP = 2 a_new (a'(phi) phi' dpsi + a(phi) dpsi') / a_b^2, dQ = 2 b(phi) b'(phi) dpsi / b_b^2
    dP = sp.diags(2 * a_new * da_phi * dphi / a_b**2) + sp.diags(2 * a_new * a_phi / a_b**2) @ D
    dQ = sp.diags(2 * b_phi * db_phi / b_b**2)
    fr, Ds = _frame_ops(g_b)
    Hd = sp.diags(fr.H)
    return (Ds @ dP + (n - 1) * Hd @ (dP - dQ)).tocsr()


def solve_divergence_free_gauge(g_b: MetricProfile, g: MetricProfile, tol: float = 1e-8,
                                max_iter: int = 12) -> GaugeResult:
    """Newton iteration for psi with div_{g_b}((id + psi)^* g) = 0, exp_X(r) = r + psi(r)."""
    _check_round(g_b)
    if g.grid.size != g_b.grid.size or not np.allclose(g.r, g_b.r, rtol=1e-14):
        g = g.on_grid(g_b.grid)
    psi = np.zeros_like(g_b.r)
    residuals = []
    current = g
    for it in range(max_iter + 1):
        F = metric_divergence(g_b, current)
        F[0] = F[-1] = 0.0
        # boundary rows enforce the regularity / decay conditions on psi
        D = _d1_matrix(g_b.grid)
        r = g_b.r
        F[0] = (D[0] @ psi)[0] - psi[0] / r[0]
        F[-1] = (D[-1] @ psi)[0] + (g_b.n - 1) * psi[-1] / r[-1]
        res = float(np.max(np.abs(F)))
        residuals.append(res)
        if res < tol:
            break
        if it == max_iter or not np.isfinite(res) or (it > 2 and res > 10 * residuals[0]):
            raise DivergenceError("outside epsilon-neighborhood: Newton iteration diverged")
        J = _with_boundary_rows(_pullback_jacobian(g_b, g, psi), g_b)
        step = spsolve(J.tocsc(), -F)
        psi = psi + step
        try:
            current = pullback_radial_diffeo(g, psi)
        except GeometryError as exc:
            raise DivergenceError("outside epsilon-neighborhood: step left the diffeomorphism group") from exc
    quad = _is_quadratic(residuals, tol)
    return GaugeResult(psi, current, residuals, len(residuals) - 1, quad)


def _is_quadratic(residuals: list, tol: float) -> bool:
    """True when successive residuals above solver precision roughly square."""
    e = [x for x in residuals if x > 1e-13]
    if len(e) < 3:
        return True
    orders = [math.log(e[i + 1]) / math.log(e[i]) for i in range(len(e) - 1) if e[i] < 0.5]
    return bool(orders) and max(orders) >= 1.6


def vector_norm(g_b: MetricProfile, xi: np.ndarray, beta: float) -> float:
    """sup rho^beta |X|."""
    return float(np.max(g_b.grid.rho**beta * np.abs(xi)))


def divergence_norm(g_b: MetricProfile, g: MetricProfile, beta: float) -> float:
    """sup rho^(beta+1) |div_{g_b} g| over interior nodes."""
    d = metric_divergence(g_b, g)
    return float(np.max((g_b.grid.rho ** (beta + 1) * np.abs(d))[1:-1]))
