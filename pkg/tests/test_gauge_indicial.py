from fractions import Fraction

import numpy as np
import pytest
import sympy as sp
from hypothesis import given, settings, strategies as st
from scipy.optimize import brentq

from ale_lab.gauge_indicial import (
    SOURCES,
    WeightWindowError,
    box_apply,
    box_power_rate,
    decompose_two_tensor,
    divergence_norm,
    exceptional_table,
    gauge_residual,
    indicial_roots_scalar,
    indicial_roots_vector,
    solve_divergence_free_gauge,
    solve_linear_gauge,
    vector_norm,
)
from ale_lab.loja_lab import bump
from ale_lab.manifold_core import (
    GeometryError,
    LinkGeometry,
    RadialGrid,
    build_eguchi_hanson,
    default_eh_grid,
    family_grid,
    flat_profile,
)
from ale_lab.potential_lambda import DivergenceError, pullback_radial_diffeo
from ale_lab.variations import divergence, divergence_free_tensor, integrate, lie_derivative, pair, tensor


def gauss(r, centre=4.0, k=4.0):
    return np.exp(-k * np.log(r / centre) ** 2)


def sphere_closed_form(n, j):
    """The six exceptional families on the round sphere at index j."""
    return {"a_plus": j, "a_minus": -(n - 2) - j, "b_plus_plus_1": 1 + j,
            "b_minus_minus_1": -(n - 1) - j, "b_plus_minus_1": -1 + j, "b_minus_plus_1": -(n - 3) - j}


@pytest.fixture(scope="module")
def flat_small():
    """Flat R^4 with a tiny inner radius, so the inner boundary flux is negligible."""
    return flat_profile(LinkGeometry(4), RadialGrid.octaves(1e-2, 17, 200))


def radial_psi(eps, Lc, n=4):
    """psi = eps r (1 + (r/Lc)^2)^(-n/2): regular at 0, decays like r^(1-n)."""
    x = sp.Symbol("x", positive=True)
    e = eps * x * (1 + (x / Lc) ** 2) ** sp.Rational(-n, 2)
    f = sp.lambdify(x, [e, sp.diff(e, x), sp.diff(e, x, 2)])
    return lambda r: tuple(np.asarray(v, float) * np.ones_like(r) for v in f(r))


# ------------------------------------------------------------ indicial roots

def test_vector_roots_examples():
    assert indicial_roots_vector(4, 4) == (2, -2)
    for n in (3, 4, 5, 7):
        assert set(indicial_roots_vector(n, 0)) == {0, 4 - n}
    # n = 5, j = 1 coexact eigenvalue recovered by inverting a^+ - 1 = j
    mu = sp.solve(sp.Eq(sp.Rational(-1, 2) + sp.sqrt(sp.Rational(1, 4) + sp.Symbol("mu")) - 1, 1))[0]
    ap, _ = indicial_roots_vector(5, int(mu))
    assert ap - 1 == 1
    assert LinkGeometry(5).coexact_one_form_eigenvalues[0] == int(mu)


def test_scalar_roots_examples():
    assert indicial_roots_scalar(4, 3) == (1, -3)
    for n in (3, 4, 5, 7):
        assert set(indicial_roots_scalar(n, 0)) == {0, 2 - n}
        bp, _ = indicial_roots_scalar(n, n - 1)
        assert bp == 1 and bp - 1 == 0


def test_roots_negative_input():
    with pytest.raises(ValueError):
        indicial_roots_vector(4, -1)
    with pytest.raises(ValueError):
        indicial_roots_scalar(4, -0.5)


def test_roots_irrational_fall_back_to_float():
    ap, am = indicial_roots_scalar(4, 2)
    assert isinstance(ap, float)
    assert ap == pytest.approx(-1 + np.sqrt(3), abs=1e-15) and am == pytest.approx(-1 - np.sqrt(3), abs=1e-15)


@settings(max_examples=50, deadline=None)
@given(n=st.integers(3, 9), lam=st.floats(0, 1e3))
def test_roots_solve_indicial_equations(n, lam):
    bp, bm = indicial_roots_scalar(n, lam)
    for b in (bp, bm):
        assert float(b) * (float(b) + n - 2) == pytest.approx(lam, abs=1e-9 * (1 + lam))
    ap, am = indicial_roots_vector(n, lam)
    for a in (ap, am):
        assert float(a) * (float(a) + n - 4) == pytest.approx(lam, abs=1e-9 * (1 + lam))


# ------------------------------------------------------------ exceptional tables

@pytest.mark.parametrize("n", [3, 4, 5, 6, 7])
def test_sphere_table_exact(n):
    table = exceptional_table(LinkGeometry(n), j_max=5)
    for source in SOURCES:
        rows = sorted((e.j, e.value) for e in table.entries if e.source == source)
        assert rows, source
        for j, v in rows:
            assert isinstance(v, (int, Fraction)), (source, j, v)
            assert v == sphere_closed_form(n, j)[source], (source, j)
        js = {j for j, _ in rows}
        assert js == (set(range(0, 6)) if source.startswith("b") else set(range(1, 6)))


@pytest.mark.parametrize("n", [3, 4, 5, 6])
def test_sphere_window(n):
    table = exceptional_table(LinkGeometry(n))
    assert table.window == (-(n - 2), 0)
    live = table.values(include_vanishing=False)
    assert not any(-(n - 2) < float(v) < 0 for v in live)


@pytest.mark.parametrize("n", [4, 5, 6])
def test_quotient_window(n):
    table = exceptional_table(LinkGeometry(n, 2))
    assert table.window == (-(n - 1), 1)
    assert not any(-(n - 1) < float(v) < 1 for v in table.values(include_vanishing=False))
    # linear modes are gone from the quotient
    assert all(e.j != 1 for e in table.entries if e.source.startswith("b"))


def test_table_sorted_and_rows():
    table = exceptional_table(LinkGeometry(4))
    vals = [float(v) for v in table.values()]
    assert vals == sorted(vals)
    assert table.to_rows()[0] == (table.entries[0].value, table.entries[0].source, table.entries[0].j)


# ------------------------------------------------------------ box

def test_box_ibp_identity(link4):
    res = {}
    for po in (200, 400):
        fl = flat_profile(link4, family_grid(1.0, 11, po))
        r = fl.r
        xi = gauss(r, 4.0, 2.0) * r
        res[po] = (integrate(fl, box_apply(fl, xi) * xi),
                   -0.5 * integrate(fl, lie_derivative(fl, xi).norm_sq(4)))
    lhs = (4 * res[400][0] - res[200][0]) / 3
    rhs = (4 * res[400][1] - res[200][1]) / 3
    assert abs(lhs - rhs) < 1e-6 * abs(rhs)


@pytest.mark.parametrize("q", [-3.0, -2.5, 0.5, 2.0, 1.5])
def test_box_power_rate(link4, q):
    errs = []
    for po in (200, 400):
        fl = flat_profile(link4, family_grid(1.0, 11, po))
        r = fl.r
        ref = box_power_rate(4, q) * r ** (q - 2)
        s = slice(3, -3)
        errs.append(np.max(np.abs(box_apply(fl, r**q) - ref)[s] / r[s] ** (q - 2)))
    assert errs[1] < 1e-3 * max(1.0, abs(box_power_rate(4, q)))
    assert errs[0] / errs[1] > 3.5


@pytest.mark.parametrize("n", [4, 5, 6])
def test_box_zero_rates_are_exceptional(n):
    # box(r^q d_r) = 0 exactly at q = 1 (r d_r, L_X g = 2g parallel) and q = 1 - n
    zeros = [1.0, 1.0 - n]
    for q in zeros:
        assert box_power_rate(n, q) == 0.0
    j0 = [float(e.value) for e in exceptional_table(LinkGeometry(n)).entries if e.j == 0 and not e.vanishing]
    assert sorted(j0) == sorted(zeros)
    for q in np.linspace(-n - 1, 3, 37):
        if min(abs(q - z) for z in zeros) > 1e-9:
            assert box_power_rate(n, q) != 0.0


def test_box_scaling_field_is_kernel(flat4):
    r = flat4.r
    # zero up to the O(h^2) stencil error; the one-sided end stencils are excluded
    b = box_apply(flat4, r)[3:-3] * r[3:-3]
    assert np.max(np.abs(b)) < 1e-5 * box_power_rate(4, 2.0)


def test_box_unsupported_on_eh():
    eh = build_eguchi_hanson(default_eh_grid(), 1.0)
    with pytest.raises(GeometryError):
        box_apply(eh, eh.r)


# ------------------------------------------------------------ linear gauge and decomposition

def test_linear_gauge_div_free_is_zero(flat4):
    r = flat4.r
    z = np.zeros_like(r)
    assert not np.any(solve_linear_gauge(flat4, tensor(z, z)))
    h = divergence_free_tensor(flat4, gauss(r))
    xi = solve_linear_gauge(flat4, h)
    assert np.max(np.abs(xi)) < 1e-10 * np.max(np.abs(gauss(r) * r))


def test_linear_gauge_exact_lie(flat4):
    r = flat4.r
    Y = bump(r, 4.0, 0.4)[0] * r
    xi = solve_linear_gauge(flat4, lie_derivative(flat4, Y))
    assert np.max(np.abs(xi + Y)) < 1e-9 * np.max(np.abs(Y))


@settings(max_examples=25, deadline=None)
@given(p=st.floats(-1, 1), q=st.floats(-1, 1), c1=st.floats(1.5, 30), c2=st.floats(1.5, 30))
def test_linear_gauge_residual(flat4, p, q, c1, c2):
    r = flat4.r
    h = tensor(p * gauss(r, c1, 2.0), q * gauss(r, c2, 3.0))
    if not np.any(divergence(flat4, h)):
        return
    xi = solve_linear_gauge(flat4, h, beta=2.0)
    assert gauge_residual(flat4, h, xi) < 1e-8


def test_weight_window(flat4):
    h = tensor(gauss(flat4.r), gauss(flat4.r))
    for beta in (0.5, 1.0, 3.0, 3.5):
        with pytest.raises(WeightWindowError):
            solve_linear_gauge(flat4, h, beta=beta)
        with pytest.raises(WeightWindowError):
            decompose_two_tensor(flat4, h, beta=beta)


def test_decompose_trivial_cases(flat4):
    r = flat4.r
    z = np.zeros_like(r)
    d = decompose_two_tensor(flat4, tensor(z, z))
    assert not np.any(d.X)
    Y = bump(r, 4.0, 0.4)[0] * r
    d = decompose_two_tensor(flat4, lie_derivative(flat4, Y))
    assert np.max(np.abs(d.X - Y)) < 1e-9 * np.max(np.abs(Y))
    assert np.max(np.abs(d.h_divfree.radial)) < 1e-9 * np.max(np.abs(Y / r))


def test_decompose_idempotent_and_div_free(flat4):
    r = flat4.r
    h = tensor(gauss(r, 3.0, 1.0), 0.5 * gauss(r, 6.0, 2.0))
    d = decompose_two_tensor(flat4, h, beta=2.0)
    assert d.residual < 1e-8
    d2 = decompose_two_tensor(flat4, d.h_divfree)
    assert np.max(np.abs(d2.X)) < 1e-9 * np.max(np.abs(d.X))


def test_decompose_orthogonal_above_half_dimension(flat_small):
    r = flat_small.r
    h = tensor(gauss(r, 3.0, 1.0), 0.5 * gauss(r, 6.0, 2.0))
    d = decompose_two_tensor(flat_small, h, beta=0.6 * 4)
    assert abs(d.orthogonality_gap) < 1e-6 * pair(flat_small, h, h)
    assert np.isnan(decompose_two_tensor(flat_small, h, beta=1.5).orthogonality_gap)


# ------------------------------------------------------------ nonlinear gauge

def test_newton_already_div_free(flat4):
    res = solve_divergence_free_gauge(flat4, flat4)
    assert res.iterations == 0 and not np.any(res.X)


@pytest.mark.parametrize("eps,Lc", [(0.03, 2.0), (-0.05, 1.0)])
def test_newton_recovers_inverse_diffeo(flat_small, eps, Lc):
    psi = radial_psi(eps, Lc)
    g = pullback_radial_diffeo(flat_small, psi)
    res = solve_divergence_free_gauge(flat_small, g)
    assert res.residuals[-1] < 1e-8
    assert res.quadratic and len(res.residuals) >= 4
    orders = res.convergence_orders()
    assert min(orders[:2]) > 1.6
    r = flat_small.r
    p = lambda y: psi(y)[0]
    inv = np.array([brentq(lambda y: y + p(y) - t, t / 2, 2 * t) for t in r])
    assert np.max(np.abs(res.X - (inv - r))) < 1e-4 * np.max(np.abs(inv - r))


def test_newton_outside_neighbourhood(flat4):
    g = pullback_radial_diffeo(flat4, radial_psi(-0.9, 1.0))
    with pytest.raises(DivergenceError):
        solve_divergence_free_gauge(flat4, g, max_iter=3)


def test_gauge_vector_bounded_by_divergence(flat4):
    rng = np.random.default_rng(7)
    beta = 2.0
    ratios = []
    for _ in range(20):
        g = pullback_radial_diffeo(flat4, radial_psi(rng.uniform(-0.05, 0.05), rng.uniform(0.8, 6.0)))
        res = solve_divergence_free_gauge(flat4, g)
        assert res.residuals[-1] < 1e-8
        ratios.append(vector_norm(flat4, res.X, beta) / divergence_norm(flat4, g, beta))
    ratios = np.array(ratios)
    assert np.all(np.isfinite(ratios))
    assert ratios.max() < 10 * np.median(ratios)
