"""Weighted Hoelder/Sobolev norms, Hardy quotients, decay fits and interpolation."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np

from .manifold_core import MetricProfile, RadialTwoTensor, radial_metric_factor, volume_density
from .potential_lambda import outer_indices


class NormDivergenceError(ValueError):
    pass


@dataclass(frozen=True)
class WeightedNormSpec:
    kind: str = "sobolev"
    k: int = 0
    beta: float = 0.0
    alpha: float = 0.5

    def __post_init__(self):
        if self.kind not in ("holder", "sobolev"):
            raise ValueError("kind must be 'holder' or 'sobolev'")
        if self.k < 0:
            raise ValueError("k must be >= 0")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")


Field = Union[np.ndarray, RadialTwoTensor]


def _pointwise_sq(T: Field, n: int) -> np.ndarray:
    if isinstance(T, RadialTwoTensor):
        return T.norm_sq(n)
    return np.asarray(T, float) ** 2


def _derivative(T: Field, g: MetricProfile, times: int) -> np.ndarray:
    """|nabla^i T| for radial data.

    Exact for functions (|df| = |f'|/a) and, on round links, for the first
    covariant derivative of a diagonal 2-tensor.  Higher tensor derivatives
    use component derivatives; the dropped frame-rotation terms are
    lower order in rho.
    """
    a = radial_metric_factor(g)
    grid = g.grid
    if isinstance(T, RadialTwoTensor):
        if times == 1 and g.family != "eguchi_hanson":
            from .variations import pointwise_gradient_sq
            return np.sqrt(pointwise_gradient_sq(g, T))
        comps = [(c, k) for c, k in T.components(g.n)]
        for _ in range(times):
            comps = [(grid.dr(c) / a, k) for c, k in comps]
        return np.sqrt(sum(c**2 * k for c, k in comps))
    f = np.asarray(T, float)
    for _ in range(times):
        f = grid.dr(f) / a
    return np.abs(f)


def weighted_l2_sq(T: Field, g: MetricProfile, beta: float, check_tail: bool = True) -> tuple[float, float]:
    """(int |T|^2 rho^{2 beta - n} dmu, tail bound)."""
    n = g.n
    rho = g.grid.rho
    dens = _pointwise_sq(T, n) * rho ** (2 * beta - n) * volume_density(g)
    wq = g.grid.quad_weights()
    val = float(np.sum(dens * wq))
    tail = _tail_bound(g, dens) if check_tail else 0.0
    return val, tail


def _tail_bound(g: MetricProfile, dens: np.ndarray) -> float:
    r = g.r
    idx = outer_indices(g.grid)
    d = np.abs(dens[idx])
    if np.all(d <= 1e-300) or d[-1] <= 1e-300 * max(1.0, d.max()):
        return 0.0
    mask = d > 0
    slope = np.polyfit(np.log(r[idx][mask]), np.log(d[mask]), 1)[0]
    if slope >= -1.0:
        raise NormDivergenceError("non-integrable at given weight")
    return float(d[-1] * r[-1] / (-(slope + 1.0)))


def weighted_sobolev_norm(T: Field, g: MetricProfile, spec: WeightedNormSpec,
                          return_tail: bool = False):
    if spec.kind != "sobolev":
        raise ValueError("spec.kind must be 'sobolev'")
    total = 0.0
    tails = 0.0
    for i in range(spec.k + 1):
        D = T if i == 0 else _derivative(T, g, i)
        val, tail = weighted_l2_sq(D, g, spec.beta + i)
        total += math.sqrt(val)
        tails += math.sqrt(val + tail) - math.sqrt(val)
    return (total, tails) if return_tail else total


def l2_norm(T: Field, g: MetricProfile) -> float:
    return weighted_sobolev_norm(T, g, WeightedNormSpec("sobolev", 0, g.n / 2.0))


def weighted_holder_norm(T: Field, g: MetricProfile, spec: WeightedNormSpec) -> float:
    if spec.kind != "holder":
        raise ValueError("spec.kind must be 'holder'")
    if spec.k > 2:
        raise ValueError("Hoelder norms are implemented for k <= 2")
    rho = g.grid.rho
    a = radial_metric_factor(g)
    s_nodes = np.concatenate([[0.0], np.cumsum(0.5 * (a[1:] + a[:-1]) * np.diff(g.r))])
    acc = np.zeros_like(rho)
    for i in range(spec.k + 1):
        D = np.sqrt(_pointwise_sq(T, g.n)) if i == 0 else _derivative(T, g, i)
        acc += rho**i * D
    Dk = np.sqrt(_pointwise_sq(T, g.n)) if spec.k == 0 else _derivative(T, g, spec.k)
    dist = np.diff(s_nodes)
    semi = np.abs(np.diff(Dk)) / dist**spec.alpha
    rho_mid = np.maximum(rho[1:], rho[:-1])
    semi_w = np.concatenate([[0.0], rho_mid ** (spec.k + spec.alpha) * semi])
    return float(np.max(rho**spec.beta * (acc + semi_w)))


def hardy_quotient(phi: np.ndarray, g: MetricProfile) -> float:
    """(int phi^2 / r^2 dmu) / (int |grad phi|^2 dmu)."""
    phi = np.asarray(phi, float)
    omega = volume_density(g)
    a = radial_metric_factor(g)
    wq = g.grid.quad_weights()
    dphi = g.grid.dr(phi) / a
    den = float(np.sum(dphi**2 * omega * wq))
    if den <= 0:
        raise ValueError("zero gradient")
    num = float(np.sum(phi**2 / g.r**2 * omega * wq))
    return num / den


def hardy_constant_flat(n: int) -> float:
    return (2.0 / (n - 2)) ** 2


def interpolation_check(T: Field, g: MetricProfile, delta: float) -> tuple[float, float]:
    """(||T||_{L^2_{n/2+1}}, ||T||_{L^2}^delta ||T||_{L^2_beta}^{1-delta}), beta = n/2 + 1/(1-delta)."""
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must lie in (0, 1)")
    n = g.n
    beta = n / 2.0 + 1.0 / (1.0 - delta)
    lhs = math.sqrt(weighted_l2_sq(T, g, n / 2.0 + 1.0, check_tail=False)[0])
    l2 = math.sqrt(weighted_l2_sq(T, g, n / 2.0, check_tail=False)[0])
    _, tail = weighted_l2_sq(T, g, beta, check_tail=True)
    lb = math.sqrt(weighted_l2_sq(T, g, beta, check_tail=False)[0])
    return lhs, l2**delta * lb ** (1.0 - delta)


@dataclass
class DecayFit:
    rate: float
    residual: float
    sign_changing: bool = False


def estimate_decay_rate(T: Field, g: MetricProfile, fraction: float = 0.25) -> DecayFit:
    """Least-squares slope of log|T| against log r on the outer ``fraction`` of nodes."""
    r = g.r
    vals = np.sqrt(_pointwise_sq(T, g.n))
    idx = outer_indices(g.grid, fraction)
    tv = vals[idx]
    scale = max(float(np.max(vals)), 1e-300)
    if np.all(tv <= 1e-13 * scale) or np.all(tv == 0):
        return DecayFit(-math.inf, 0.0)
    raw = T.radial if isinstance(T, RadialTwoTensor) else np.asarray(T, float)
    sign_changing = bool(np.any(np.sign(raw[idx][1:]) * np.sign(raw[idx][:-1]) < 0))
    mask = tv > 0
    x, y = np.log(r[idx][mask]), np.log(tv[mask])
    coef = np.polyfit(x, y, 1)
    res = float(np.sqrt(np.mean((y - np.polyval(coef, x)) ** 2)))
    return DecayFit(float(coef[0]), res, sign_changing)
