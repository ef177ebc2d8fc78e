"""End-to-end acceptance checks.

Each test stores (ok, detail) in conftest.ACCEPTANCE, which the terminal summary prints
as one PASS/FAIL line per criterion, and then asserts ok.
"""
import math
import time

import numpy as np
import pytest
import sympy as sp

from conftest import ACCEPTANCE
from ale_lab.flow import monotone, run_flow_with_monitor
from ale_lab.gauge_indicial import (
    SOURCES,
    divergence_norm,
    exceptional_table,
    solve_divergence_free_gauge,
    vector_norm,
)
from ale_lab.loja_lab import (
    bump,
    fit_lojasiewicz_exponent,
    linear_loja_check,
    rate_experiment_u_A_tau,
    sweep_perturbations,
    u_A_tau,
)
from ale_lab.manifold_core import (
    LinkGeometry,
    RadialGrid,
    RadialTwoTensor,
    build_conformal_family,
    build_eguchi_hanson,
    conformal_from_function,
    default_eh_grid,
    family_grid,
    flat_profile,
    scale_metric,
)
from ale_lab.potential_lambda import (
    adm_mass,
    lambda_ale,
    pullback_radial_diffeo,
    richardson_lambda,
    solve_potential,
)
from ale_lab.variations import (
    divergence_free_tensor,
    first_variation_check,
    gradient_field,
    second_variation_quadform,
)
from ale_lab.weighted_analysis import (
    WeightedNormSpec,
    hardy_constant_flat,
    hardy_quotient,
    interpolation_check,
    weighted_holder_norm,
)

_x = sp.Symbol("x", positive=True)


def record(k, ok, detail):
    ACCEPTANCE[k] = (bool(ok), detail)
    assert ok, detail


def lambdify_jet(expr, order=2, extra=()):
    """(f, f', ..., f^(order), *extra) as numpy callables of r."""
    f = sp.lambdify(_x, [sp.diff(expr, _x, k) for k in range(order + 1)] + list(extra))
    return lambda r: tuple(np.asarray(v, float) * np.ones_like(r) for v in f(r))


def family(n, m=0.1, A=10.0, per_octave=100, octaves=11, gamma=1):
    return build_conformal_family(LinkGeometry(n, gamma), family_grid(A, octaves, per_octave), m, A)


def smooth_background(n, m=0.5, s=1.0):
    """Conformally flat u = 1 + m (s^2 + r^2)^((2-n)/2): smooth at the origin, mass ~ m."""
    dev = m * (s**2 + _x**2) ** sp.Rational(2 - n, 2)
    u = lambdify_jet(1 + dev, extra=[dev])
    return conformal_from_function(LinkGeometry(n), RadialGrid.octaves(1e-4, 30, 80), u, float(n - 2))


def radial_psi(eps, Lc, k):
    """psi = eps r (1 + (r/Lc)^2)^(-k/2)."""
    return lambdify_jet(eps * _x * (1 + (_x / Lc) ** 2) ** sp.Rational(-k, 2))


# ------------------------------------------------------------ 1

def test_criterion_01_fixed_points():
    worst, slowest = 0.0, 0.0
    builders = {"flat": lambda: flat_profile(LinkGeometry(4), family_grid(1.0, 11, 100)),
                "flat_Z2": lambda: flat_profile(LinkGeometry(4, 2), family_grid(1.0, 11, 100)),
                "eguchi_hanson": lambda: build_eguchi_hanson(default_eh_grid(), 1.0)}
    for make in builders.values():
        t0 = time.perf_counter()
        g = make()
        sol = solve_potential(g)
        rep = lambda_ale(g, sol=sol)
        slowest = max(slowest, time.perf_counter() - t0)
        worst = max(worst, float(np.max(np.abs(sol.w - 1.0))), abs(rep.lambda0), abs(rep.lambda_ale))
    record(1, worst < 1e-8 and slowest < 1.0, f"max |w-1|, |lambda0|, |lambda| = {worst:.2e}; slowest {slowest:.3f}s")


# ------------------------------------------------------------ 2

def test_criterion_02_three_routes():
    worst, slowest = 0.0, 0.0
    for n in (4, 5, 6):
        for m in (0.1, -0.2):
            t0 = time.perf_counter()
            sol = solve_potential(family(n, m))
            slowest = max(slowest, time.perf_counter() - t0)
            ref = sol.lambda0_volume
            for v in (sol.lambda0_flux, sol.lambda0_dirichlet):
                worst = max(worst, abs(v - ref) / abs(ref))
    record(2, worst < 1e-6 and slowest < 5.0, f"max relative spread {worst:.2e}; slowest {slowest:.3f}s")


# ------------------------------------------------------------ 3

def test_criterion_03_mass_coefficient():
    n, worst = 4, 0.0
    for gamma in (1, 2):
        link = LinkGeometry(n, gamma)
        for po in (100, 200):
            sol = solve_potential(build_conformal_family(link, family_grid(1.0, 13, po), 0.1, 1.0))
            # Vol(S^{n-1}/Gamma) = Vol S^{n-1} / |Gamma|
            expected = sol.lambda0_volume / (4 * (n - 2) * link.link_volume)
            worst = max(worst, abs(sol.mass_coefficient - expected) / abs(expected))
    record(3, worst < 1e-2, f"max relative error of c_w over |Gamma| in (1,2), two grids: {worst:.2e}")


# ------------------------------------------------------------ 4

def test_criterion_04_scaling():
    worst = 0.0
    for n in (4, 5):
        g = family(n)
        base = richardson_lambda(g).lambda_ale
        for s in (0.5, 2.0, 4.0):
            scaled = richardson_lambda(scale_metric(g, s)).lambda_ale
            worst = max(worst, abs(scaled - s ** ((n - 2) / 2) * base) / abs(s ** ((n - 2) / 2) * base))
    record(4, worst < 1e-6, f"max relative error {worst:.2e}")


# ------------------------------------------------------------ 5

def test_criterion_05_diffeo_invariance():
    rng = np.random.default_rng(2024)
    worst, count = 0.0, 0
    for n in (4, 5, 6):
        g = smooth_background(n)
        base = richardson_lambda(g).lambda_ale
        for _ in range(10):
            eps, Lc = rng.uniform(-0.4, 0.4), rng.uniform(0.5, 4.0)
            gp = pullback_radial_diffeo(g, radial_psi(eps, Lc, n))
            worst = max(worst, abs(richardson_lambda(gp).lambda_ale - base) / abs(base))
            count += 1
    record(5, worst <= 1e-5, f"{count} random diffeos on 3 backgrounds; max relative change {worst:.2e}")


# ------------------------------------------------------------ 6

def c_n_symbolic(n, gamma=1):
    r, m = sp.symbols("r m", positive=True)
    phi = (1 + m * r ** (2 - n)) ** sp.Rational(4, n - 2) - 1
    V = 2 * sp.pi ** sp.Rational(n, 2) / sp.gamma(sp.Rational(n, 2)) / gamma
    return float(sp.limit((1 - n) * V * r ** (n - 1) * sp.diff(phi, r) / m, r, sp.oo))


def test_criterion_06_mass_and_weighted_bound():
    worst = 0.0
    for n in (4, 5):
        c_n = c_n_symbolic(n)
        for A in (1.0, 10.0):
            for m in (0.05, 0.1, -0.1):
                worst = max(worst, abs(adm_mass(family(n, m, A)) / m - c_n) / c_n)
    n, tau = 4, 1.5
    ratios = []
    for A in (10.0, 20.0, 40.0):
        for m in (0.05, 0.1):
            g = family(n, m, A)
            dev = g.profiles["u"] ** (4.0 / (n - 2)) - 1.0
            ratios.append(weighted_holder_norm(dev, g, WeightedNormSpec("holder", 2, tau, 0.5))
                          / (abs(m) * A ** (tau - (n - 2))))
    spread = max(ratios) / min(ratios)
    record(6, worst < 1e-6 and spread < 1.2,
           f"m/c_n relative error {worst:.2e}; Holder constant in [{min(ratios):.3g}, {max(ratios):.3g}]")


# ------------------------------------------------------------ 7

def test_criterion_07_variational_identities(gam4, flat4, link4):
    hb = lambda gg: RadialTwoTensor.conformal(bump(gg.r, 4.0, 0.4)[0])
    a1, f1 = first_variation_check(gam4, None, hb, refine=True)
    fv = abs(a1 - f1) / abs(f1)
    hd = lambda gg: divergence_free_tensor(gg, bump(gg.r, 4.0, 0.4)[0])
    a2, f2 = second_variation_quadform(flat4, hd, refine=True)
    sv = abs(a2 - f2) / abs(a2)

    def u_fn(c, s):
        def f(r):
            q = 1 + (r / s) ** 2
            return 1 + c / q, -2 * c * r / (s**2 * q**2), 2 * c * (3 * r**2 - s**2) / (s**4 * q**3), c / q
        return f
    be_res = gradient_field(conformal_from_function(link4, family_grid(1.0, 11, 100), u_fn(0.3, 1.0), 2.0),
                            refine=True).divergence_residual
    rng = np.random.default_rng(11)
    be_fail = 0
    for _ in range(50):
        g = conformal_from_function(link4, family_grid(1.0, 10, 60),
                                    u_fn(rng.uniform(-0.3, 0.6), rng.uniform(0.5, 3.0)), 2.0)
        gf = gradient_field(g)
        be_fail += not gf.norms["l2_fw"] <= gf.ricci_norm_weighted * (1 + 1e-10) + 1e-9
    ok = fv <= 1e-4 and sv <= 1e-3 and be_res < 1e-5 and be_fail == 0
    record(7, ok, f"first {fv:.2e}, second {sv:.2e}, weighted div residual {be_res:.2e}, "
                  f"inequality failures {be_fail}/50")


# ------------------------------------------------------------ 8

def test_criterion_08_flow():
    g = build_conformal_family(LinkGeometry(4), family_grid(1.0, 10, 40), 0.05, 1.0)
    t0 = time.perf_counter()
    st = run_flow_with_monitor(g, T=1.0, max_steps=500, monitor_every=10)
    elapsed = time.perf_counter() - t0
    mass = np.array([x for _, x in st.mass_history])
    drift = float(np.max(np.abs(mass - mass[0])) / abs(mass[0]))
    ident = max(st.identity_errors)
    ok = (st.error is None and st.steps == 500 and monotone(st) and ident < 0.05
          and drift < 1e-4 and elapsed < 120)
    record(8, ok, f"{st.steps} steps, monotone={monotone(st)}, identity error {ident:.2%}, "
                  f"mass drift {drift:.1e}, {elapsed:.1f}s")


# ------------------------------------------------------------ 9

def test_criterion_09_indicial_tables():
    mismatches = 0
    for n in range(3, 8):
        expected = {"a_plus": lambda j: j, "a_minus": lambda j: -(n - 2) - j,
                    "b_plus_plus_1": lambda j: 1 + j, "b_minus_minus_1": lambda j: -(n - 1) - j,
                    "b_plus_minus_1": lambda j: j - 1, "b_minus_plus_1": lambda j: -(n - 3) - j}
        table = exceptional_table(LinkGeometry(n), j_max=5)
        for source in SOURCES:
            rows = [(e.j, e.value) for e in table.entries if e.source == source]
            js = set(range(6)) if source.startswith("b") else set(range(1, 6))
            mismatches += {j for j, _ in rows} != js
            mismatches += sum(v != expected[source](j) for j, v in rows)
    windows = [exceptional_table(LinkGeometry(n, 2)).window == (-(n - 1), 1) for n in (4, 5, 6)]
    record(9, mismatches == 0 and all(windows),
           f"{mismatches} mismatches over n=3..7, j<=5; quotient windows ok={all(windows)}")


# ------------------------------------------------------------ 10

def test_criterion_10_gauge_fixing(flat4):
    small = flat_profile(LinkGeometry(4), RadialGrid.octaves(1e-2, 17, 200))
    res = solve_divergence_free_gauge(small, pullback_radial_diffeo(small, radial_psi(0.03, 2.0, 4)))
    orders = res.convergence_orders()
    rng = np.random.default_rng(7)
    ratios = []
    for _ in range(20):
        g = pullback_radial_diffeo(flat4, radial_psi(rng.uniform(-0.05, 0.05), rng.uniform(0.8, 6.0), 4))
        r2 = solve_divergence_free_gauge(flat4, g)
        ratios.append(vector_norm(flat4, r2.X, 2.0) / divergence_norm(flat4, g, 2.0) if r2.residuals[-1] < 1e-8
                      else math.inf)
    ratios = np.array(ratios)
    ok = res.residuals[-1] < 1e-8 and res.quadratic and min(orders[:2]) > 1.6 and ratios.max() < 10 * np.median(ratios)
    record(10, ok, f"final residual {res.residuals[-1]:.1e}, orders {', '.join(f'{o:.2f}' for o in orders[:2])}; "
                   f"|X|/|div g| in [{ratios.min():.3g}, {ratios.max():.3g}]")


# ------------------------------------------------------------ 11

def test_criterion_11_rates():
    A_list = [10 * 10 ** (k / 4) for k in range(7)]
    worst = 0.0
    for n, tau in ((4, 1.5), (5, 1.8)):
        res = rate_experiment_u_A_tau(n, tau, A_list)
        for key, e in (("dirichlet", (n - 2) - 2 * tau), ("lap_l2", (n - 4) - 2 * tau),
                       ("lap_l2w", (n - 2) - 2 * tau)):
            worst = max(worst, abs(res[key].slope - e))
    record(11, worst <= 0.05, f"max slope deviation {worst:.4f} over 1.5 decades of A")


# ------------------------------------------------------------ 12

def test_criterion_12_lojasiewicz(flat4):
    t_values = [0.2 * 2.0**-k for k in range(10)]
    slopes, spreads = [], []
    for g in (flat4, flat_profile(LinkGeometry(5), family_grid(1.0, 11, 100))):
        S = sweep_perturbations(g, {"mode": "bump", "t_values": t_values})
        fit = fit_lojasiewicz_exponent(S, "l2w")
        slopes.append(fit.slope)
        ratios = [s.lambda_abs / s.grad_l2_weighted**2 for s in S]
        spreads.append(max(ratios) / min(ratios))
    lin = []
    for A in (10, 20, 40, 80):
        g = flat_profile(LinkGeometry(5), RadialGrid.octaves(A / 2, 12, 100))
        lin.append(linear_loja_check(g, RadialTwoTensor.conformal(u_A_tau(g.r, A, 1.8)[0]))[2])
    lin_spread = max(lin) / min(lin)
    ok = all(0.9 <= s <= 1.1 for s in slopes) and max(spreads) < 2 and lin_spread < 1.01
    record(12, ok, f"slopes {', '.join(f'{s:.3f}' for s in slopes)}; ratio spread {max(spreads):.3f}; "
                   f"linear ratio spread over A {lin_spread:.4f}")


# ------------------------------------------------------------ 13

def test_criterion_13_interpolation_and_hardy():
    rng = np.random.default_rng(13)
    g = flat_profile(LinkGeometry(4), RadialGrid.geometric(0.1, 1e3, 800))
    x = np.log(g.r)
    worst = 0.0
    for _ in range(100):
        k = rng.integers(2, 7)
        knots = np.linspace(x[0], rng.uniform(-2.0, 6.0), k)
        T = np.interp(x, knots, rng.uniform(-2, 2, k), right=0.0)
        lhs, rhs = interpolation_check(T, g, rng.uniform(0.05, 0.95))
        worst = max(worst, lhs / rhs)
    hardy_excess = -math.inf
    for n in range(3, 8):
        gh = flat_profile(LinkGeometry(n), RadialGrid.geometric(1e-3, 1e4, 1500))
        xh = np.log(gh.r)
        window = np.sin(math.pi * (xh - xh[0]) / (xh[-1] - xh[0]))
        for _ in range(20):
            env = window * np.exp(-(((xh - rng.uniform(-3, 3)) / rng.uniform(0.3, 3.0)) ** 2))
            phi = env * sum(c * np.cos(j * xh) for j, c in enumerate(rng.uniform(-1, 1, 5)))
            hardy_excess = max(hardy_excess, hardy_quotient(phi, gh) - hardy_constant_flat(n))
    record(13, worst <= 1 + 1e-8 and hardy_excess <= 1e-3,
           f"max lhs/rhs {worst:.6f} on 100 tensors; max Hardy excess {hardy_excess:.2e} on 100 profiles")
