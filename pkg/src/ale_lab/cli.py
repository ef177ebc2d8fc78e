"""Command line entry point: ``ale-lab <command> [options]``.

Every report is JSON carrying the config hash and the grid descriptor; data
tables are CSV with a leading ``#`` row naming units.  Exit codes: 0 ok,
1 usage, 2 outside the solvable neighbourhood, 3 numerical divergence.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional

import numpy as np

from .flow import CFLError, monotone, run_flow_with_monitor, write_flow_csv
from .gauge_indicial import (
    WeightWindowError,
    divergence_norm,
    exceptional_table,
    solve_divergence_free_gauge,
    vector_norm,
)
from .loja_lab import (
    fit_lojasiewicz_exponent,
    rate_experiment_u_A_tau,
    samples_from_csv,
    samples_to_csv,
    sweep_perturbations,
)
from .manifold_core import (
    GeometryError,
    LinkGeometry,
    MetricProfile,
    RadialGrid,
    build_conformal_family,
    build_eguchi_hanson,
    deviation_components,
    flat_profile,
    profile_from_csv,
    profile_meta,
    profile_to_csv,
    ricci_tensor,
    scalar_curvature,
)
from .potential_lambda import (
    DivergenceError,
    SolvabilityError,
    adm_mass_extrapolation,
    lambda_ale,
    solve_potential,
)
from .weighted_analysis import (
    NormDivergenceError,
    WeightedNormSpec,
    weighted_holder_norm,
    weighted_sobolev_norm,
)

log = logging.getLogger("ale_lab")

EXIT_OK, EXIT_USAGE, EXIT_SOLVABILITY, EXIT_DIVERGENCE = 0, 1, 2, 3

LAMBDA_COMMANDS = ("potential", "lambda", "mass", "variation", "flow", "loja")


class UsageError(Exception):
    pass


# ------------------------------------------------------------- formatting

def fmt(x) -> str:
    """17 significant digits."""
    return f"{float(x):.17g}"


def to_json(obj, indent: int = 2, _level: int = 0) -> str:
    """JSON with every float written at 17 significant digits (non-finite -> null)."""
    pad = " " * (indent * (_level + 1))
    end = " " * (indent * _level)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {to_json(v, indent, _level + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        return "[" + ", ".join(to_json(v, indent, _level + 1) for v in obj) + "]"
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if obj is None:
        return "null"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, Fraction):
        return str(obj.numerator) if obj.denominator == 1 else fmt(obj)
    if isinstance(obj, (float, np.floating)):
        return fmt(obj) if math.isfinite(obj) else "null"
    if isinstance(obj, np.ndarray):
        return to_json(obj.tolist(), indent, _level)
    return json.dumps(str(obj))


def config_hash(cfg: dict) -> str:
    keep = {k: v for k, v in sorted(cfg.items()) if k not in ("out", "out_csv", "out_profile", "out_x", "config")}
    blob = json.dumps(keep, sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def emit(report: dict, cfg: dict, grid: Optional[RadialGrid], path: Optional[str]) -> None:
    full = {"command": cfg.get("command"), "config_hash": config_hash(cfg),
            "grid": grid.descriptor() if grid is not None else None}
    full.update(report)
    text = to_json(full) + "\n"
    if path:
        with open(path, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


# --------------------------------------------------------------- validation

@dataclass
class Diagnostic:
    level: str  # "error" | "warning"
    message: str


def validate_config(cfg: dict) -> list[Diagnostic]:
    """Pure report on a resolved configuration; an empty list means valid."""
    out: list[Diagnostic] = []
    cmd = cfg.get("command")
    n = cfg.get("n")
    tau = cfg.get("tau")
    if n is not None and n < 3:
        out.append(Diagnostic("error", "dimension n must be >= 3"))
        return out
    if cmd in LAMBDA_COMMANDS and tau is not None and n is not None:
        lo, hi = (n - 2) / 2.0, float(n - 2)
        if math.isclose(tau, hi):
            out.append(Diagnostic("error", "decay order at exceptional endpoint"))
        elif math.isclose(tau, lo):
            out.append(Diagnostic("error", "decay order at (n-2)/2: lambda_ALE undefined"))
        elif not lo < tau < hi:
            out.append(Diagnostic("error", f"decay order tau={tau:g} outside ((n-2)/2, n-2)"))
    if cmd == "gauge" and cfg.get("beta") is not None and n is not None:
        beta = cfg["beta"]
        if beta <= 1.0 or beta > n - 1:
            out.append(Diagnostic("error", f"gauge weight beta={beta:g} outside the window 1 < beta <= n-1"))
        elif math.isclose(beta, n - 1):
            out.append(Diagnostic("warning", "gauge weight at the endpoint n-1"))
    for name, val in (cfg.get("tolerances") or {}).items():
        if not val > 0:
            out.append(Diagnostic("error", f"tolerance {name} must be positive"))
    r0, rmax = cfg.get("r0"), cfg.get("rmax")
    if r0 is not None and rmax is not None:
        if not 0 < r0 < rmax:
            out.append(Diagnostic("error", "need 0 < r0 < rmax"))
        elif rmax / r0 < 100.0:
            out.append(Diagnostic("error", "grid spans less than two decades (rmax/r0 < 100)"))
        elif rmax / r0 < 1e3 and cmd in ("lambda", "mass", "potential", "norms"):
            out.append(Diagnostic("warning", "fewer than three decades: decay fits may be unreliable"))
    po = cfg.get("per_octave")
    if po is not None and r0 and rmax and rmax > r0:
        nodes = po * round(math.log2(rmax / r0)) + 1
        if nodes < 64:
            out.append(Diagnostic("error", f"grid has {nodes} < 64 nodes"))
    for key in ("input", "profile", "metric", "background"):
        p = cfg.get(key)
        if p and p != "flat" and not os.path.exists(p):
            out.append(Diagnostic("error", f"{key} file not found: {p}"))
    return out


# ------------------------------------------------------------- geometry

def _grid_from(cfg: dict, default_r0: float, default_rmax: float) -> RadialGrid:
    r0 = cfg.get("r0") or default_r0
    rmax = cfg.get("rmax") or default_rmax
    octs = max(1, int(round(math.log2(rmax / r0))))
    return RadialGrid.octaves(r0, octs, int(cfg.get("per_octave") or 100))


def _load_profile(path: str) -> MetricProfile:
    meta_path = os.path.splitext(path)[0] + ".json"
    if not os.path.exists(meta_path):
        raise UsageError(f"missing profile metadata {meta_path}")
    with open(meta_path) as fh:
        meta = json.load(fh)
    return profile_from_csv(path, meta)


def _save_profile(g: MetricProfile, path: str) -> None:
    profile_to_csv(g, path)
    with open(os.path.splitext(path)[0] + ".json", "w") as fh:
        fh.write(to_json(profile_meta(g)) + "\n")


def build_metric(cfg: dict) -> MetricProfile:
    if cfg.get("profile"):
        return _load_profile(cfg["profile"])
    family = cfg.get("family") or "flat"
    n = int(cfg.get("n") or 4)
    gamma = int(cfg.get("gamma") or 1)
    if family == "eguchi_hanson":
        a = float(cfg.get("a") or 1.0)
        grid = _grid_from(cfg, 1.05 * a, 1.05 * a * 2.0**12)
        return build_eguchi_hanson(grid, a)
    link = LinkGeometry(n, gamma)
    A = float(cfg.get("A") or 1.0)
    grid = _grid_from(cfg, A / 2.0, A / 2.0 * 2.0**11)
    if family == "flat":
        return flat_profile(link, grid)
    if family == "conformal":
        m = float(cfg.get("m") if cfg.get("m") is not None else 0.1)
        return build_conformal_family(link, grid, m, A, cfg.get("tau"))
    raise UsageError(f"unknown family {family!r}")


# ------------------------------------------------------------- commands

def cmd_profile(cfg):
    g = build_metric(cfg)
    if not cfg.get("out_profile"):
        raise UsageError("--out-profile is required")
    _save_profile(g, cfg["out_profile"])
    emit({"profile": profile_meta(g)}, cfg, g.grid, cfg.get("out"))


def cmd_potential(cfg):
    g = build_metric(cfg)
    sol = solve_potential(g)
    rep = {"lambda0_volume": sol.lambda0_volume, "lambda0_flux": sol.lambda0_flux,
           "lambda0_dirichlet": sol.lambda0_dirichlet, "mass_coefficient": sol.mass_coefficient,
           "residual": sol.residual, "min_w": float(np.min(sol.w)),
           "warning": sol.diagnostics.get("warning")}
    if cfg.get("out_csv"):
        with open(cfg["out_csv"], "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            fh.write("# r: radius (length); w: minimiser (dimensionless); f = -2 ln w\n")
            w.writerow(["r", "w", "f"])
            for row in zip(g.r, sol.w, sol.f):
                w.writerow([fmt(x) for x in row])
    emit(rep, cfg, g.grid, cfg.get("out"))


def cmd_lambda(cfg):
    g = build_metric(cfg)
    rep = lambda_ale(g)
    emit(rep.to_dict(), cfg, g.grid, cfg.get("out"))


def cmd_mass(cfg):
    g = build_metric(cfg)
    ex = adm_mass_extrapolation(g)
    scale = max(float(np.max(np.abs(ex.values))), 1e-12)
    if not math.isfinite(ex.limit) or ex.residual > 1e-3 * scale:
        raise DivergenceError("mass undefined at this decay")
    emit({"adm_mass": ex.limit, "residual": ex.residual, "kappa": ex.kappa}, cfg, g.grid, cfg.get("out"))


def _direction(mode: str, centre: float, width: float):
    from .loja_lab import bump
    from .manifold_core import RadialTwoTensor
    from .variations import divergence_free_tensor, lie_derivative

    def make(g):
        e = bump(g.r, centre, width)[0]
        if mode == "conformal":
            return RadialTwoTensor.conformal(e)
        if mode == "diagonal":
            return divergence_free_tensor(g, e)
        if mode == "lie":
            return lie_derivative(g, g.r * e)
        raise UsageError(f"unknown variation mode {mode!r}")
    return make


def cmd_variation(cfg):
    from .variations import (
        divergence,
        first_variation_check,
        second_variation_fd_general,
        second_variation_general,
        second_variation_quadform,
    )
    g = build_metric(cfg)
    mode = cfg.get("mode") or "conformal"
    make = _direction(mode, float(cfg.get("centre") or 4.0), float(cfg.get("width") or 0.4))
    order = int(cfg.get("order") or 1)
    if order == 1:
        functional = cfg.get("functional") or "lambda0"
        t = float(cfg.get("t") or 1e-3)
        analytic, fd = first_variation_check(g, None, make, t=t, functional=functional,
                                             refine=cfg.get("refine") is not False)
        formula = "first variation of " + functional
    elif order == 2:
        t = float(cfg.get("t") or 1e-2)
        h = make(g)
        dv = divergence(g, h)
        div_free = g.family in ("flat", "eguchi_hanson") and \
            float(np.max(np.abs(dv[2:-2]))) <= 1e-6 * max(float(np.max(np.abs(h.radial))), 1e-300)
        if div_free:
            analytic, fd = second_variation_quadform(g, make, t=t, refine=cfg.get("refine") is not False)
            formula = "1/2 <L h, h>"
        else:
            analytic = second_variation_general(g, h)
            fd = second_variation_fd_general(g, h, t)
            formula = "general second variation"
    else:
        raise UsageError("--order must be 1 or 2")
    gap = abs(analytic - fd)
    rep = {"order": order, "mode": mode, "formula": formula, "analytic": analytic, "fd": fd, "gap": gap,
           "relative_gap": gap / max(abs(fd), abs(analytic), 1e-300)}
    if order == 2:
        # diffeomorphism directions give 0 by both routes; compare against the h energy
        from .variations import gradient_norm_sq
        rep["energy_scale"] = 0.5 * gradient_norm_sq(g, h)
    emit(rep, cfg, g.grid, cfg.get("out"))


def cmd_gauge(cfg):
    if not cfg.get("metric"):
        raise UsageError("--metric profile is required")
    g = _load_profile(cfg["metric"])
    bg = cfg.get("background") or "flat"
    g_b = flat_profile(g.link, g.grid) if bg == "flat" else _load_profile(bg)
    beta = float(cfg.get("beta") or 0.6 * g_b.n)
    res = solve_divergence_free_gauge(g_b, g, tol=float(cfg.get("tol") or 1e-8),
                                      max_iter=int(cfg.get("max_iter") or 12))
    if cfg.get("out_profile"):
        _save_profile(res.g_gauged, cfg["out_profile"])
    if cfg.get("out_x"):
        with open(cfg["out_x"], "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            fh.write("# r: radius (length); X: radial component of the gauge field (length)\n")
            w.writerow(["r", "X"])
            for row in zip(g_b.r, res.X):
                w.writerow([fmt(x) for x in row])
    emit({"residuals": res.residuals, "iterations": res.iterations, "quadratic": res.quadratic,
          "converged": res.converged, "beta": beta, "X_norm": vector_norm(g_b, res.X, beta),
          "div_norm": divergence_norm(g_b, g, beta)}, cfg, g_b.grid, cfg.get("out"))


def write_indicial_csv(table, fh) -> None:
    w = csv.writer(fh, lineterminator="\n")
    lo, hi = table.window
    fh.write(f"# exceptional rates of box (dimensionless homogeneity); n={table.n} |Gamma|={table.gamma_order}"
                f"; window=({lo},{hi})\n")
    w.writerow(["value", "source", "j"])
    for v, src, j in table.to_rows():
        val = str(v) if isinstance(v, int) or (isinstance(v, Fraction) and v.denominator == 1) else fmt(v)
        w.writerow([val, src, j])


def cmd_indicial(cfg):
    link = LinkGeometry(int(cfg.get("n") or 4), int(cfg.get("gamma") or 1))
    table = exceptional_table(link, int(cfg.get("jmax") if cfg.get("jmax") is not None else 5))
    if cfg.get("out"):
        with open(cfg["out"], "w", newline="") as fh:
            write_indicial_csv(table, fh)
    else:
        write_indicial_csv(table, sys.stdout)


def _norm_field(g: MetricProfile, name: str):
    from .variations import tensor
    if name == "deviation":
        p, q = deviation_components(g)
        return tensor(p, q)
    if name == "scalar_curvature":
        return scalar_curvature(g)
    if name == "ricci":
        return ricci_tensor(g)
    if name == "potential":
        return solve_potential(g).v
    raise UsageError(f"unknown field {name!r}")


def cmd_norms(cfg):
    g = build_metric(cfg)
    kind = cfg.get("kind") or "sobolev"
    spec = WeightedNormSpec(kind, int(cfg.get("k") or 0), float(cfg.get("beta") if cfg.get("beta") is not None
                                                              else g.n / 2.0), float(cfg.get("alpha") or 0.5))
    T = _norm_field(g, cfg.get("field") or "deviation")
    if kind == "sobolev":
        value, tail = weighted_sobolev_norm(T, g, spec, return_tail=True)
    else:
        value, tail = weighted_holder_norm(T, g, spec), 0.0
    emit({"norm_kind": kind, "k": spec.k, "alpha": spec.alpha, "beta": spec.beta, "value": value,
          "tail_bound": tail, "field": cfg.get("field") or "deviation"}, cfg, g.grid, cfg.get("out"))


def cmd_flow(cfg):
    g = build_metric(cfg)
    T = float(cfg.get("t_final") or 0.0)
    dt = cfg.get("dt")
    state = run_flow_with_monitor(g, T, dt=float(dt) if dt else None,
                                  monitor_every=int(cfg.get("monitor_every") or 5),
                                  max_steps=cfg.get("steps"))
    if cfg.get("out_csv"):
        write_flow_csv(state, cfg["out_csv"])
    masses = [m for _, m in state.mass_history]
    emit({"steps": state.steps, "time": state.time, "monotone": monotone(state),
          "max_identity_error": max(state.identity_errors, default=0.0),
          "mass_drift": (max(masses) - min(masses)) if masses else 0.0,
          "lambda_initial": state.lambda_history[0][1], "lambda_final": state.lambda_history[-1][1],
          "error": state.error}, cfg, g.grid, cfg.get("out"))
    if state.error:
        raise SolvabilityError(state.error) if "Solvability" in state.error else DivergenceError(state.error)


def _float_list(s) -> Optional[list]:
    if s is None:
        return None
    if isinstance(s, (list, tuple)):
        return [float(x) for x in s]
    return [float(x) for x in str(s).split(",") if x.strip()]


def threads() -> int:
    try:
        return max(1, int(os.environ.get("ALE_LAB_THREADS", "1")))
    except ValueError:
        return 1


def cmd_loja(cfg):
    action = cfg.get("action")
    n = int(cfg.get("n") or 4)
    if action == "rates":
        tau = float(cfg.get("tau") or (n - 2) * 0.75)
        A_list = _float_list(cfg.get("A_values")) or list(np.geomspace(10.0, 10.0 * 10**1.5, 7))
        res = rate_experiment_u_A_tau(n, tau, A_list, per_octave=int(cfg.get("per_octave") or 120))
        out = cfg.get("out_csv") or cfg.get("out")
        fh = open(out, "w", newline="") if out else sys.stdout
        try:
            w = csv.writer(fh, lineterminator="\n")
            fh.write(f"# log-log slopes in A of the u_A_tau energies (dimensionless); n={n} tau={fmt(tau)}\n")
            w.writerow(["quantity", "slope", "expected", "stderr", "ci_low", "ci_high"])
            for key in ("dirichlet", "lap_l2", "lap_l2w"):
                s = res[key]
                lo, hi = s.ci95
                w.writerow([key, fmt(s.slope), fmt(s.expected), fmt(s.stderr), fmt(lo), fmt(hi)])
        finally:
            if out:
                fh.close()
        return
    if action == "sweep":
        link = LinkGeometry(n, int(cfg.get("gamma") or 1))
        g_b = flat_profile(link, _grid_from(cfg, 0.5, 0.5 * 2.0**11))
        mode = cfg.get("mode") or "bump"
        fam = {"mode": mode, "centre": float(cfg.get("centre") or 4.0), "width": float(cfg.get("width") or 0.4),
               "per_octave": int(cfg.get("per_octave") or 100), "rmax_factor": float(cfg.get("rmax_factor") or 2.0**14)}
        if cfg.get("tau") is not None:
            fam["tau"] = float(cfg["tau"])
        ts = _float_list(cfg.get("t_values")) or [0.05 * 2.0**-k for k in range(8)]
        As = _float_list(cfg.get("A_values")) or [1.0]
        jobs = [dict(fam, t_values=ts, A_values=[A]) for A in As]
        with ThreadPoolExecutor(max_workers=threads()) as pool:
            chunks = list(pool.map(lambda f: sweep_perturbations(g_b, f), jobs))
        samples = [s for chunk in chunks for s in chunk]
        if not cfg.get("out_csv"):
            raise UsageError("--out-csv is required for loja sweep")
        samples_to_csv(samples, cfg["out_csv"])
        failed = [s.label for s in samples if not s.ok]
        emit({"samples": len(samples), "failed": failed}, cfg, g_b.grid, cfg.get("out"))
        return
    if action == "fit":
        if not cfg.get("input"):
            raise UsageError("--input CSV is required for loja fit")
        samples = samples_from_csv(cfg["input"])
        fit = fit_lojasiewicz_exponent(samples, cfg.get("norm") or "l2w", n=cfg.get("n"), tau=cfg.get("tau"))
        emit({"theta": fit.theta, "C": fit.C, "residual": fit.residual, "admissible_bound": fit.admissible_bound,
              "theta_l2_limit": fit.bound_raw, "admissible": fit.admissible, "r_squared": fit.r_squared,
              "slope": fit.slope, "flagged": fit.flagged, "max_ratio": fit.max_ratio, "note": fit.note},
             cfg, None, cfg.get("out"))
        return
    raise UsageError("loja needs one of: sweep, fit, rates")


COMMANDS = {"profile": cmd_profile, "potential": cmd_potential, "lambda": cmd_lambda, "mass": cmd_mass,
            "variation": cmd_variation, "gauge": cmd_gauge, "indicial": cmd_indicial, "norms": cmd_norms,
            "flow": cmd_flow, "loja": cmd_loja}


# ---------------------------------------------------------------- parser

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(EXIT_USAGE)


def _geometry_args(p):
    p.add_argument("--n", type=int)
    p.add_argument("--gamma", type=int)
    p.add_argument("--family", choices=["flat", "conformal", "eguchi_hanson"])
    p.add_argument("--m", type=float)
    p.add_argument("--A", type=float)
    p.add_argument("--a", type=float, help="Eguchi-Hanson bolt parameter")
    p.add_argument("--tau", type=float)
    p.add_argument("--r0", type=float)
    p.add_argument("--rmax", type=float)
    p.add_argument("--per-octave", type=int)
    p.add_argument("--profile", help="profile CSV (metadata in the sibling .json)")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="ale-lab", description="lambda_ALE, mass and Lojasiewicz experiments on radial ALE metrics")
    ap.add_argument("--config", help="JSON config file; flags override it")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("profile", help="write a family profile to CSV + JSON")
    _geometry_args(p)
    p.add_argument("--out-profile")
    p.add_argument("--out")

    for name, helptext in (("potential", "solve for w_g"), ("lambda", "lambda_ALE report"),
                           ("mass", "ADM mass")):
        p = sub.add_parser(name, help=helptext)
        _geometry_args(p)
        p.add_argument("--out")
        if name == "potential":
            p.add_argument("--out-csv")

    p = sub.add_parser("variation", help="first/second variation against finite differences")
    _geometry_args(p)
    p.add_argument("--order", type=int, choices=[1, 2])
    p.add_argument("--mode", choices=["conformal", "diagonal", "lie"])
    p.add_argument("--functional", choices=["lambda0", "lambda_ale"])
    p.add_argument("--t", type=float)
    p.add_argument("--centre", type=float)
    p.add_argument("--width", type=float)
    p.add_argument("--refine", dest="refine", action="store_true", default=None,
                   help="Richardson over the grid and its 2x refinement (default)")
    p.add_argument("--no-refine", dest="refine", action="store_false")
    p.add_argument("--out")

    p = sub.add_parser("gauge", help="divergence-free gauge by Newton iteration")
    p.add_argument("--metric")
    p.add_argument("--background", help="profile CSV or 'flat'")
    p.add_argument("--beta", type=float)
    p.add_argument("--n", type=int)
    p.add_argument("--tol", type=float)
    p.add_argument("--max-iter", type=int)
    p.add_argument("--out-profile")
    p.add_argument("--out-x")
    p.add_argument("--out")

    p = sub.add_parser("indicial", help="exceptional values table (CSV)")
    p.add_argument("--n", type=int)
    p.add_argument("--gamma", type=int)
    p.add_argument("--jmax", type=int)
    p.add_argument("--out")

    p = sub.add_parser("norms", help="weighted norms of a profile field")
    _geometry_args(p)
    p.add_argument("--field", choices=["deviation", "scalar_curvature", "ricci", "potential"])
    p.add_argument("--kind", choices=["sobolev", "holder"])
    p.add_argument("--k", type=int)
    p.add_argument("--beta", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--out")

    p = sub.add_parser("flow", help="Ricci-DeTurck flow with lambda_ALE monitor")
    _geometry_args(p)
    p.add_argument("--t-final", type=float)
    p.add_argument("--dt", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--monitor-every", type=int)
    p.add_argument("--out-csv")
    p.add_argument("--out")

    p = sub.add_parser("loja", help="Lojasiewicz experiments")
    p.add_argument("action", choices=["sweep", "fit", "rates"])
    p.add_argument("--n", type=int)
    p.add_argument("--gamma", type=int)
    p.add_argument("--tau", type=float)
    p.add_argument("--mode", choices=["bump", "u_A_tau", "diagonal"])
    p.add_argument("--t-values")
    p.add_argument("--A-values")
    p.add_argument("--centre", type=float)
    p.add_argument("--width", type=float)
    p.add_argument("--r0", type=float)
    p.add_argument("--rmax", type=float)
    p.add_argument("--per-octave", type=int)
    p.add_argument("--rmax-factor", type=float)
    p.add_argument("--norm", choices=["l2", "l2w"])
    p.add_argument("--input")
    p.add_argument("--out-csv")
    p.add_argument("--out")
    return ap


def resolve_config(argv) -> dict:
    """Merge the optional JSON config file with command-line flags (flags win)."""
    ap = build_parser()
    args = ap.parse_args(argv)
    if args.command is None:
        ap.print_usage(sys.stderr)
        raise SystemExit(EXIT_USAGE)
    cfg = {}
    if args.config:
        try:
            with open(args.config) as fh:
                cfg = json.load(fh)
        except (OSError, ValueError) as exc:
            raise UsageError(f"cannot read config: {exc}") from exc
        if not isinstance(cfg, dict):
            raise UsageError("config file must hold a JSON object")
        cfg = {k.replace("-", "_"): v for k, v in cfg.items()}
    for k, v in vars(args).items():
        if v is not None or k not in cfg:
            cfg[k] = v
    return cfg


def main(argv=None) -> int:
    try:
        cfg = resolve_config(argv)
    except UsageError as exc:
        sys.stderr.write(f"ale-lab: {exc}\n")
        return EXIT_USAGE
    except SystemExit as exc:
        return int(exc.code or 0) and EXIT_USAGE
    logging.basicConfig(level=logging.INFO if cfg.get("verbose") else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    diags = validate_config(cfg)
    for d in diags:
        sys.stderr.write(f"{d.level}: {d.message}\n")
    if any(d.level == "error" for d in diags):
        return EXIT_USAGE
    try:
        COMMANDS[cfg["command"]](cfg)
    except SolvabilityError as exc:
        sys.stderr.write(f"outside solvable neighborhood: {exc}\n")
        return EXIT_SOLVABILITY
    except (DivergenceError, NormDivergenceError) as exc:
        sys.stderr.write(f"numerical divergence: {exc}\n")
        return EXIT_DIVERGENCE
    except (UsageError, GeometryError, WeightWindowError, CFLError, ValueError, OSError) as exc:
        sys.stderr.write(f"ale-lab: {exc}\n")
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
