"""DeTurck-Ricci flow of radial ALE metrics, with the lambda_ALE monitor.

Round links evolve g = a^2 dr^2 + b^2 g_S through the deviations
am1 = a - 1 and bm1 = b / r - 1; the DeTurck field is taken relative to
the flat cone, which cancels the b'' terms of the a-equation and makes the
system strictly parabolic.  Biaxial (Eguchi-Hanson type) metrics use the
Eguchi-Hanson metric itself as reference, so it is an exact fixed point.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .manifold_core import (
    GeometryError,
    MetricProfile,
    RadialGrid,
    deviation_norm,
    eh_functions,
    warped_profile,
)
from .potential_lambda import DivergenceError, SolvabilityError, lambda_ale, solve_potential
from .variations import gradient_field

log = logging.getLogger(__name__)


class CFLError(ValueError):
    pass


# ------------------------------------------------------------ derivatives

def _dx(f, h):
    out = np.empty_like(f)
    out[1:-1] = f[2:] - f[:-2]
    out[0] = -3 * f[0] + 4 * f[1] - f[2]
    out[-1] = 3 * f[-1] - 4 * f[-2] + f[-3]
    return out / (2 * h)


def _dxx(f, h):
    """Compact three-point second derivative (one-sided second order at the ends)."""
    out = np.empty_like(f)
    out[1:-1] = f[2:] - 2 * f[1:-1] + f[:-2]
    out[0] = 2 * f[0] - 5 * f[1] + 4 * f[2] - f[3]
    out[-1] = 2 * f[-1] - 5 * f[-2] + 4 * f[-3] - f[-4]
    return out / h**2


def _radial_derivs(f, grid: RadialGrid):
    r, h = grid.r, grid.h
    fx = _dx(f, h)
    return fx / r, (_dxx(f, h) - fx) / r**2


# ----------------------------------------------------------------- state

@dataclass
class FlowState:
    time: float
    metric: MetricProfile
    lambda_history: list = field(default_factory=list)
    gradient_norm_history: list = field(default_factory=list)
    mass_history: list = field(default_factory=list)
    step_diagnostics: dict = field(default_factory=dict)
    fields: dict = field(default_factory=dict)
    steps: int = 0
    identity_errors: list = field(default_factory=list)
    left_neighborhood: bool = False
    error: Optional[str] = None

    def rows(self) -> list[tuple]:
        return [(t, lam, gn, m) for (t, lam), (_, gn), (_, m)
                in zip(self.lambda_history, self.gradient_norm_history, self.mass_history)]


def _initial_fields(g: MetricProfile) -> dict:
    r = g.r
    if g.family == "eguchi_hanson":
        # deviations from the closed-form reference, so the reference stays exact
        ref = _reference(g)
        return {k: np.array(g.profiles[k], float) - ref[k] for k in ("A", "B", "C")}
    if g.family in ("flat", "conformal"):
        n = g.n
        if g.family == "flat":
            z = np.zeros_like(r)
            return {"am1": z, "bm1": z.copy()}
        um1 = g.derivs.get("um1", g.profiles["u"] - 1.0)
        e1 = np.expm1(2.0 / (n - 2) * np.log1p(um1))
        return {"am1": e1, "bm1": e1.copy()}
    a, b = g.profiles["a"], g.profiles["b"]
    return {"am1": np.array(g.derivs.get("am1", a - 1.0)), "bm1": np.array(g.derivs.get("bm1", b / r - 1.0))}


def _profile_from_fields(g0: MetricProfile, fields: dict) -> MetricProfile:
    grid = g0.grid
    r = grid.r
    if g0.family == "eguchi_hanson":
        q = _biaxial_jet(grid, _reference(g0), fields)
        if np.any(q["A"] <= 0) or np.any(q["B"] <= 0) or np.any(q["C"] <= 0):
            raise GeometryError("non-metric profile")
        derivs = {k: q[k] for k in ("dA", "d2A", "dB", "d2B", "dC", "d2C")}
        ref, r4 = _reference(g0), 4.0 / r**2
        derivs["devA"] = ref["devA"] + fields["A"] * (2 * ref["A"] + fields["A"])
        derivs["devB"] = ref["devB"] + r4 * fields["B"] * (2 * ref["B"] + fields["B"])
        derivs["devC"] = ref["devC"] + r4 * fields["C"] * (2 * ref["C"] + fields["C"])
        return MetricProfile("eguchi_hanson", g0.link, grid, {k: q[k] for k in "ABC"}, g0.decay_order,
                             derivs=derivs, params=dict(g0.params), generator=None)
    am1, bm1 = fields["am1"], fields["bm1"]
    a = 1.0 + am1
    b = r * (1.0 + bm1)
    if np.any(a <= 0) or np.any(b <= 0):
        raise GeometryError("non-metric profile")
    da, _ = _radial_derivs(am1, grid)
    dbm, d2bm = _radial_derivs(bm1, grid)
    derivs = {"da": da, "db": 1.0 + bm1 + r * dbm, "d2b": 2 * dbm + r * d2bm, "am1": am1, "bm1": bm1,
              "dbm1": dbm}
    return warped_profile(g0.link, grid, a, b, g0.decay_order, derivs=derivs)


# ------------------------------------------------------------------- RHS

def _rhs_round(grid: RadialGrid, n: int, f: dict) -> dict:
    r = grid.r
    am1, bm1 = f["am1"], f["bm1"]
    a = 1.0 + am1
    b = r * (1.0 + bm1)
    da, d2a = _radial_derivs(am1, grid)
    dbm, d2bm = _radial_derivs(bm1, grid)
    db = 1.0 + bm1 + r * dbm
    d2b = 2 * dbm + r * d2bm
    bs = db / a
    bss = d2b / a**2 - da * db / a**3
    Krad = -bss / b
    Ktan = (1.0 - bs**2) / b**2
    ric0 = (n - 1) * Krad
    rica = Krad + (n - 2) * Ktan
    # DeTurck field relative to the flat cone and its r-derivative
    psi = da / a**3 - (n - 1) * db / (a**2 * b) + (n - 1) * r / b**2
    dpsi = (d2a / a**3 - 3 * da**2 / a**4
            - (n - 1) * (d2b / (a**2 * b) - 2 * da * db / (a**3 * b) - db**2 / (a**2 * b**2))
            + (n - 1) * (1.0 / b**2 - 2 * r * db / b**3))
    dta = -a * ric0 + da * psi + a * dpsi
    dtb = -b * rica + db * psi
    out = {"am1": dta, "bm1": dtb / r}
    for v in out.values():
        v[0] = v[-1] = 0.0
    return out


def _biaxial_jet(grid: RadialGrid, ref: dict, f: dict) -> dict:
    """Values and r-derivatives: analytic reference plus differenced deviations."""
    q = {}
    for k in ("A", "B", "C"):
        d1, d2 = _radial_derivs(f[k], grid)
        q[k] = ref[k] + f[k]
        q["d" + k] = ref["d" + k] + d1
        q["d2" + k] = ref["d2" + k] + d2
    return q


def _rhs_biaxial(grid: RadialGrid, ref: dict, f: dict) -> dict:
    q = _biaxial_jet(grid, ref, f)
    A, B, C = q["A"], q["B"], q["C"]
    dA, d2A, dB, d2B, dC, d2C = q["dA"], q["d2A"], q["dB"], q["d2B"], q["dC"], q["d2C"]
    r0 = (-d2C / C - 2 * d2B / B + dA * dC / (A * C) + 2 * dA * dB / (A * B)) / A**2
    r1 = (1 - C**2 / (2 * B**2) - B * d2B / A**2 - B * dB * dC / (A**2 * C)
          - dB**2 / A**2 + B * dA * dB / A**3) / B**2
    r3 = (C**4 / (2 * B**4) - C * d2C / A**2 - 2 * C * dB * dC / (A**2 * B) + C * dA * dC / A**3) / C**2
    At, Bt, Ct = ref["A"], ref["B"], ref["C"]
    dAt, dBt, dCt = ref["dA"], ref["dB"], ref["dC"]
    psi_g = dA / A**3 - 2 * dB / (A**2 * B) - dC / (A**2 * C)
    dpsi_g = (d2A / A**3 - 3 * dA**2 / A**4
              - 2 * (d2B / (A**2 * B) - 2 * dA * dB / (A**3 * B) - dB**2 / (A**2 * B**2))
              - (d2C / (A**2 * C) - 2 * dA * dC / (A**3 * C) - dC**2 / (A**2 * C**2)))
    # reference Christoffel symbols contracted with the evolving inverse metric
    psi_ref = dAt / (A**2 * At) - 2 * Bt * dBt / (At**2 * B**2) - Ct * dCt / (At**2 * C**2)
    dpsi_ref = (ref["d2A"] / (A**2 * At) - dAt * (2 * dA / (A**3 * At) + dAt / (A**2 * At**2))
                - 2 * ((dBt**2 + Bt * ref["d2B"]) / (At**2 * B**2)
                       - Bt * dBt * (2 * dAt / (At**3 * B**2) + 2 * dB / (At**2 * B**3)))
                - ((dCt**2 + Ct * ref["d2C"]) / (At**2 * C**2)
                   - Ct * dCt * (2 * dAt / (At**3 * C**2) + 2 * dC / (At**2 * C**3))))
    psi = psi_g - psi_ref
    dpsi = dpsi_g - dpsi_ref
    out = {"A": -A * r0 + dA * psi + A * dpsi, "B": -B * r1 + dB * psi, "C": -C * r3 + dC * psi}
    for v in out.values():
        v[0] = v[-1] = 0.0
    return out


def _min_arclength_step(g: MetricProfile, fields: dict) -> float:
    r = g.r
    if g.family == "eguchi_hanson":
        a = g.profiles["A"]
    else:
        a = 1.0 + fields["am1"]
    return float(np.min(0.5 * (a[1:] + a[:-1]) * np.diff(r)))


def cfl_limit(g: MetricProfile, fields: Optional[dict] = None) -> float:
    """Largest stable explicit step, 0.5 * min(ds)^2."""
    fields = fields if fields is not None else _initial_fields(g)
    return 0.5 * _min_arclength_step(g, fields) ** 2


def default_dt(g: MetricProfile) -> float:
    return 0.2 * _min_arclength_step(g, _initial_fields(g)) ** 2


def _reference(g: MetricProfile) -> Optional[dict]:
    if g.family != "eguchi_hanson":
        return None
    return eh_functions(g.r, float(g.params.get("a", 1.0)))


def ricci_flow_step(state: FlowState, dt: float) -> FlowState:
    """One RK2 (Heun) step of the DeTurck-Ricci flow; the ends are held fixed."""
    g = state.metric
    fields = state.fields or _initial_fields(g)
    lim = cfl_limit(g, fields)
    if dt > lim:
        raise CFLError(f"CFL violation: dt={dt:.3g} exceeds {lim:.3g}")
    grid = g.grid
    if g.family == "eguchi_hanson":
        ref = state.step_diagnostics.get("_ref") or _reference(g)
        rhs = lambda f: _rhs_biaxial(grid, ref, f)
    else:
        ref = None
        rhs = lambda f: _rhs_round(grid, g.n, f)
    k1 = rhs(fields)
    mid = {k: fields[k] + dt * k1[k] for k in fields}
    k2 = rhs(mid)
    new = {k: fields[k] + 0.5 * dt * (k1[k] + k2[k]) for k in fields}
    if not all(np.all(np.isfinite(v)) for v in new.values()):
        raise GeometryError("non-finite profile after flow step")
    metric = _profile_from_fields(g, new)
    speed = max(float(np.max(np.abs(v))) for v in k1.values())
    diag = {"cfl": dt / lim, "max_rate": speed}
    if ref is not None:
        diag["_ref"] = ref
    return FlowState(state.time + dt, metric, state.lambda_history, state.gradient_norm_history,
                     state.mass_history, diag, new, state.steps + 1, state.identity_errors,
                     state.left_neighborhood)


def _monitor(state: FlowState) -> None:
    g = state.metric
    sol = solve_potential(g)
    rep = lambda_ale(g, sol=sol)
    gf = gradient_field(g, sol)
    state.lambda_history.append((state.time, rep.lambda_ale))
    state.gradient_norm_history.append((state.time, 2.0 * gf.norms["l2_fw"] ** 2))
    state.mass_history.append((state.time, rep.adm_mass))


def run_flow_with_monitor(g0: MetricProfile, T: float, dt: Optional[float] = None, monitor_every: int = 5,
                          max_steps: Optional[int] = None, neighborhood_eps: float = math.inf) -> FlowState:
    """Flow to time T (or max_steps), sampling lambda_ALE, 2||Ric + Hess f||^2 and the mass."""
    if dt is None:
        dt = default_dt(g0)
    state = FlowState(0.0, g0, fields=_initial_fields(g0))
    if g0.family != "eguchi_hanson":
        state.metric = _profile_from_fields(g0, state.fields)
    _monitor(state)
    nsteps = int(round(T / dt)) if max_steps is None else max_steps
    tau = g0.decay_order
    for i in range(nsteps):
        try:
            state = ricci_flow_step(state, dt)
            if (i + 1) % monitor_every == 0 or i + 1 == nsteps:
                _monitor(state)
                _check_identity(state)
                dist = float(np.max(deviation_norm(state.metric) * state.metric.grid.rho**tau))
                if dist > neighborhood_eps:
                    state.left_neighborhood = True
                    log.warning("flow left the C^0_tau neighbourhood (%.3g > %.3g)", dist, neighborhood_eps)
        except (SolvabilityError, GeometryError, DivergenceError) as exc:
            state.error = f"{type(exc).__name__}: {exc}"
            log.error("flow stopped at t=%.6g: %s", state.time, exc)
            break
    state.step_diagnostics.pop("_ref", None)
    return state


def _check_identity(state: FlowState) -> None:
    (t0, l0), (t1, l1) = state.lambda_history[-2:]
    (_, q0), (_, q1) = state.gradient_norm_history[-2:]
    rate = (l1 - l0) / (t1 - t0)
    target = 0.5 * (q0 + q1)
    scale = max(abs(target), 1e-300)
    state.identity_errors.append(abs(rate - target) / scale if target > 1e-14 else abs(rate - target))


def monotone(state: FlowState, tol: float = 1e-6) -> bool:
    lam = np.array([x for _, x in state.lambda_history])
    if lam.size < 2:
        return True
    scale = max(1.0, float(np.max(np.abs(lam))))
    return bool(np.all(np.diff(lam) >= -tol * scale))


def write_flow_csv(state: FlowState, path: str) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        fh.write("# t: flow time, lambda_ale and mass in units of length^(n-2), grad_norm_sq in length^(n-4)\n")
        w.writerow(["t", "lambda_ale", "grad_norm_sq", "mass"])
        for row in state.rows():
            w.writerow([f"{x:.17g}" for x in row])
