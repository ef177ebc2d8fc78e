"""Cohomogeneity-one ALE geometries sampled on a radial grid.

Metrics are either conformally flat ``u^{4/(n-2)} g_e``, warped over a round
link ``a(r)^2 dr^2 + b(r)^2 g_S``, or biaxial over S^3/Z_2 (Eguchi-Hanson).
Tensors are stored by their components in the orthonormal frame
``(e_0 = a^{-1} d/dr, e_alpha)`` of the metric they live on.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
from scipy.special import gamma as gamma_fn

FAMILIES = ("flat", "conformal", "warped", "eguchi_hanson")


class GeometryError(ValueError):
    """Raised for invalid geometric input (non-metric profile, bad grid...)."""


def sphere_volume(n: int) -> float:
    """Volume of the unit round sphere S^{n-1} in R^n."""
    return 2.0 * math.pi ** (n / 2.0) / gamma_fn(n / 2.0)


@dataclass(frozen=True)
class LinkGeometry:
    n: int
    gamma_order: int = 1
    j_max: int = 12

    def __post_init__(self):
        if self.n < 3:
            raise GeometryError("dimension must be >= 3")
        if self.gamma_order < 1:
            raise GeometryError("|Gamma| must be >= 1")

    @property
    def link_volume(self) -> float:
        return sphere_volume(self.n) / self.gamma_order

    def scalar_modes(self) -> list[int]:
        js = list(range(self.j_max + 1))
        if self.gamma_order > 1:
            # linear functions are not Gamma-invariant
            js.remove(1)
        return js

    def coexact_modes(self) -> list[int]:
        return list(range(1, self.j_max + 1))

    @property
    def scalar_eigenvalues(self) -> np.ndarray:
        n = self.n
        return np.array([j * (j + n - 2) for j in self.scalar_modes()], dtype=float)

    @property
    def coexact_one_form_eigenvalues(self) -> np.ndarray:
        # normalised so that a^+_{mu_j} - 1 = j for the vector indicial roots
        n = self.n
        return np.array([(j + 1) * (j + n - 3) for j in self.coexact_modes()], dtype=float)

    def to_dict(self) -> dict:
        return {"n": self.n, "gamma_order": self.gamma_order, "link_volume": self.link_volume}


@dataclass(frozen=True)
class RadialGrid:
    """Geometric grid r_i = r0 * q^i, uniform in x = log r."""

    nodes: np.ndarray
    cap_radius: float = 0.0

    def __post_init__(self):
        r = np.asarray(self.nodes, dtype=float)
        if r.ndim != 1 or r.size < 64:
            raise GeometryError("grid needs at least 64 nodes")
        if np.any(np.diff(r) <= 0) or r[0] <= 0:
            raise GeometryError("grid nodes must be positive and strictly increasing")
        object.__setattr__(self, "nodes", r)

    @classmethod
    def geometric(cls, r0: float, rmax: float, nodes: int = 2000, cap_radius: float = 0.0) -> "RadialGrid":
        if rmax / r0 < 100.0:
            raise GeometryError("r_max / r_0 must be at least 1e2 for asymptotic extraction")
        return cls(np.geomspace(r0, rmax, nodes), cap_radius)

    @classmethod
    def octaves(cls, r0: float, octaves: int, per_octave: int, cap_radius: float = 0.0) -> "RadialGrid":
        """Geometric grid with a node at every r0 * 2^k (keeps cutoff knots on nodes)."""
        return cls(np.geomspace(r0, r0 * 2.0**octaves, octaves * per_octave + 1), cap_radius)

    @property
    def r(self) -> np.ndarray:
        return self.nodes

    @property
    def x(self) -> np.ndarray:
        return np.log(self.nodes)

    @property
    def h(self) -> float:
        """Log-spacing."""
        return float(np.log(self.nodes[-1] / self.nodes[0]) / (self.nodes.size - 1))

    @property
    def size(self) -> int:
        return self.nodes.size

    @property
    def rho(self) -> np.ndarray:
        return np.maximum(1.0, self.nodes)

    def refined(self, factor: int = 2) -> "RadialGrid":
        m = (self.size - 1) * factor + 1
        return RadialGrid(np.geomspace(self.nodes[0], self.nodes[-1], m), self.cap_radius)

    def scaled(self, c: float) -> "RadialGrid":
        return RadialGrid(self.nodes * c, self.cap_radius * c)

    def descriptor(self) -> dict:
        return {
            "spacing": "geometric",
            "r0": float(self.nodes[0]),
            "rmax": float(self.nodes[-1]),
            "nodes": int(self.size),
            "ratio": float(self.nodes[1] / self.nodes[0]),
            "cap_radius": float(self.cap_radius),
        }

    # derivatives: centred second order inside, one-sided second order at the ends
    def dx(self, f: np.ndarray) -> np.ndarray:
        # explicit stencils: np.gradient's edge weights do not cancel exactly on constants
        f = np.asarray(f, dtype=float)
        out = np.empty_like(f)
        out[1:-1] = f[2:] - f[:-2]
        out[0] = -3.0 * f[0] + 4.0 * f[1] - f[2]
        out[-1] = 3.0 * f[-1] - 4.0 * f[-2] + f[-3]
        return out / (2.0 * self.h)

    def dr(self, f: np.ndarray) -> np.ndarray:
        return self.dx(f) / self.nodes

    def d2r(self, f: np.ndarray) -> np.ndarray:
        fx = self.dx(f)
        return (self.dx(fx) - fx) / self.nodes**2

    def quad_weights(self) -> np.ndarray:
        """Trapezoid weights for int F dr on the grid (uniform in x)."""
        w = np.full(self.size, self.h)
        w[0] = w[-1] = 0.5 * self.h
        return w * self.nodes


def smoothstep5(t: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Degree-5 smoothstep on [0,1] with first and second derivatives."""
    t = np.clip(t, 0.0, 1.0)
    s = t**3 * (10 - 15 * t + 6 * t**2)
    ds = 30 * t**2 * (1 - t) ** 2
    d2s = 60 * t * (1 - t) * (1 - 2 * t)
    return s, ds, d2s


def cutoff(r: np.ndarray, A: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """chi_A: 0 on r < A, 1 on r > 2A, with r-derivatives."""
    s, ds, d2s = smoothstep5((np.asarray(r) - A) / A)
    return s, ds / A, d2s / A**2


@dataclass(frozen=True)
class MetricProfile:
    family: str
    link: LinkGeometry
    grid: RadialGrid
    profiles: dict
    decay_order: float
    derivs: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)
    generator: Optional[Callable[[RadialGrid], "MetricProfile"]] = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise GeometryError(f"unknown family {self.family!r}")
        for key, val in self.profiles.items():
            arr = np.asarray(val, dtype=float)
            if arr.shape != self.grid.nodes.shape:
                raise GeometryError(f"profile {key} does not match the grid")
            if not np.all(np.isfinite(arr)):
                raise GeometryError(f"profile {key} has non-finite samples")
            if key in ("u", "a", "b", "A", "B", "C") and np.any(arr <= 0):
                raise GeometryError("non-metric profile")

    @property
    def n(self) -> int:
        return self.link.n

    @property
    def r(self) -> np.ndarray:
        return self.grid.nodes

    def warped(self) -> tuple[np.ndarray, np.ndarray]:
        """(a, b) for round-link families."""
        n, r = self.n, self.r
        if self.family == "flat":
            return np.ones_like(r), r.copy()
        if self.family == "conformal":
            e = self.profiles["u"] ** (2.0 / (n - 2))
            return e, r * e
        if self.family == "warped":
            return self.profiles["a"], self.profiles["b"]
        raise GeometryError("biaxial profile has no round warped form")

    def on_grid(self, grid: RadialGrid) -> "MetricProfile":
        """Re-evaluate the profile on another grid (exact if a generator is known)."""
        if self.generator is not None:
            return self.generator(grid)
        x_new = grid.x
        prof = {k: np.interp(x_new, self.grid.x, v) for k, v in self.profiles.items()}
        return replace(self, grid=grid, profiles=prof, derivs={}, generator=None)


@dataclass(frozen=True)
class RadialTwoTensor:
    """Diagonal radial 2-tensor, orthonormal components.

    ``radial`` is h(e_0, e_0), ``tangential`` is h(e_alpha, e_alpha); for the
    biaxial link ``fiber`` is the h(e_3, e_3) component (else it equals tangential).
    """

    mode: str
    radial: np.ndarray
    tangential: np.ndarray
    decay_order: float = 0.0
    fiber: Optional[np.ndarray] = None
    j: int = 0

    def __post_init__(self):
        for arr in (self.radial, self.tangential):
            if not np.all(np.isfinite(arr)):
                raise GeometryError("tensor components must be finite")
        if self.mode not in ("conformal", "diagonal") and not self.mode.startswith("link_mode"):
            raise GeometryError(f"unknown tensor mode {self.mode!r}")

    @classmethod
    def conformal(cls, phi: np.ndarray, decay_order: float = 0.0) -> "RadialTwoTensor":
        phi = np.asarray(phi, dtype=float)
        return cls("conformal", phi, phi.copy(), decay_order)

    @classmethod
    def diagonal(cls, P: np.ndarray, Q: np.ndarray, decay_order: float = 0.0) -> "RadialTwoTensor":
        return cls("diagonal", np.asarray(P, float), np.asarray(Q, float), decay_order)

    @classmethod
    def from_coordinates(cls, g: MetricProfile, u1: np.ndarray, u2: np.ndarray, decay_order: float = 0.0):
        """h = u1 dr^2 + u2 b^2 g_S on a round-link profile."""
        a, _ = g.warped()
        return cls.diagonal(np.asarray(u1) / a**2, np.asarray(u2), decay_order)

    def components(self, n: int) -> list[tuple[np.ndarray, int]]:
        """(component, multiplicity) pairs in the orthonormal frame."""
        if self.fiber is None:
            return [(self.radial, 1), (self.tangential, n - 1)]
        return [(self.radial, 1), (self.tangential, n - 2), (self.fiber, 1)]

    def trace(self, n: int) -> np.ndarray:
        return sum(c * k for c, k in self.components(n))

    def norm_sq(self, n: int) -> np.ndarray:
        return sum(c**2 * k for c, k in self.components(n))

    def inner(self, other: "RadialTwoTensor", n: int) -> np.ndarray:
        if (self.fiber is None) != (other.fiber is None):
            # split both into (radial, tangential, fiber) so multiplicities line up
            a = (self.radial, self.tangential, _fib(self))
            b = (other.radial, other.tangential, _fib(other))
            return a[0] * b[0] + (n - 2) * a[1] * b[1] + a[2] * b[2]
        return sum(c1 * c2 * k for (c1, k), (c2, _) in zip(self.components(n), other.components(n)))

    def __add__(self, other: "RadialTwoTensor") -> "RadialTwoTensor":
        fib = None
        if self.fiber is not None or other.fiber is not None:
            fib = _fib(self) + _fib(other)
        mode = self.mode if self.mode == other.mode else "diagonal"
        return RadialTwoTensor(mode, self.radial + other.radial, self.tangential + other.tangential,
                               min(self.decay_order, other.decay_order), fib)

    def __mul__(self, c: float) -> "RadialTwoTensor":
        fib = None if self.fiber is None else c * self.fiber
        return RadialTwoTensor(self.mode, c * self.radial, c * self.tangential, self.decay_order, fib, self.j)

    __rmul__ = __mul__

    def __sub__(self, other: "RadialTwoTensor") -> "RadialTwoTensor":
        return self + (-1.0) * other


def _fib(t: RadialTwoTensor) -> np.ndarray:
    return t.tangential if t.fiber is None else t.fiber


# ---------------------------------------------------------------- builders

def flat_profile(link: LinkGeometry, grid: RadialGrid) -> MetricProfile:
    r = grid.nodes
    return MetricProfile("flat", link, grid, {"u": np.ones_like(r)}, decay_order=float(link.n),
                         derivs={"du": np.zeros_like(r), "d2u": np.zeros_like(r)},
                         generator=lambda gr: flat_profile(link, gr))


def family_grid(A: float = 1.0, octaves: int = 11, per_octave: int = 200) -> RadialGrid:
    """Grid for g_{A,m} with nodes on the cutoff knots A and 2A."""
    return RadialGrid.octaves(A / 2.0, octaves, per_octave)


def build_conformal_family(link: LinkGeometry, grid: RadialGrid, m: float, A: float,
                           tau: Optional[float] = None) -> MetricProfile:
    """g_{A,m} = (1 + chi_A m r^{2-n})^{4/(n-2)} g_e."""
    r, n = grid.nodes, link.n
    if not (A >= 2 * r[0] and 2 * A <= r[-1]):
        raise GeometryError("A outside grid range")
    chi, dchi, d2chi = cutoff(r, A)
    p = r ** (2.0 - n)
    dp = (2.0 - n) * r ** (1.0 - n)
    d2p = (2.0 - n) * (1.0 - n) * r ** (-float(n))
    u = 1.0 + m * chi * p
    if np.any(u <= 0):
        raise GeometryError("non-metric profile")
    du = m * (dchi * p + chi * dp)
    d2u = m * (d2chi * p + 2 * dchi * dp + chi * d2p)
    if tau is None:
        tau = float(n - 2)
    return MetricProfile("conformal", link, grid, {"u": u}, decay_order=tau,
                         derivs={"du": du, "d2u": d2u, "um1": m * chi * p}, params={"m": m, "A": A},
                         generator=lambda gr: build_conformal_family(link, gr, m, A, tau))


def conformal_from_function(link: LinkGeometry, grid: RadialGrid, u_fn: Callable, tau: float,
                            params: Optional[dict] = None) -> MetricProfile:
    """Conformal profile from a callable returning (u, u', u'') at r.

    A fourth returned array is taken as u - 1 evaluated without cancellation.
    """
    vals = u_fn(grid.nodes)
    u, du, d2u = vals[:3]
    if np.any(u <= 0):
        raise GeometryError("non-metric profile")
    derivs = {"du": du, "d2u": d2u}
    if len(vals) > 3:
        derivs["um1"] = vals[3]
    return MetricProfile("conformal", link, grid, {"u": u}, decay_order=tau,
                         derivs=derivs, params=params or {},
                         generator=lambda gr: conformal_from_function(link, gr, u_fn, tau, params))


def warped_profile(link: LinkGeometry, grid: RadialGrid, a: np.ndarray, b: np.ndarray,
                   tau: float, derivs: Optional[dict] = None, generator=None) -> MetricProfile:
    return MetricProfile("warped", link, grid, {"a": np.asarray(a, float), "b": np.asarray(b, float)},
                         decay_order=tau, derivs=derivs or {}, generator=generator)


def eh_functions(r: np.ndarray, a: float) -> dict:
    """Closed-form Eguchi-Hanson coefficients and analytic r-derivatives.

    g = A^2 dr^2 + B^2 (s1^2 + s2^2) + C^2 s3^2 with A = (1-(a/r)^4)^{-1/2},
    B = r/2, C = (r/2)(1-(a/r)^4)^{1/2}.
    """
    r = np.asarray(r, dtype=float)
    if a == 0:
        one = np.ones_like(r)
        zero = np.zeros_like(r)
        return {"A": one, "B": r / 2, "C": r / 2, "dA": zero, "dB": 0.5 * one, "dC": 0.5 * one,
                "d2A": zero, "d2B": zero, "d2C": zero, "devA": zero, "devB": zero, "devC": zero}
    e = (a / r) ** 4
    F = 1.0 - e
    dF = 4.0 * e / r
    d2F = -20.0 * e / r**2
    s = np.sqrt(F)
    A = 1.0 / s
    dA = -0.5 * F**-1.5 * dF
    d2A = 0.75 * F**-2.5 * dF**2 - 0.5 * F**-1.5 * d2F
    C = 0.5 * r * s
    dC = 0.5 * s + 0.25 * r * dF / s
    d2C = 0.5 * dF / s + 0.25 * r * (d2F / s - 0.5 * dF**2 * F**-1.5)
    # flat-coordinate deviations A^2 - 1, 4B^2/r^2 - 1, 4C^2/r^2 - 1 without cancellation
    return {"A": A, "B": 0.5 * r, "C": C, "dA": dA, "dB": 0.5 * np.ones_like(r), "dC": dC,
            "d2A": d2A, "d2B": np.zeros_like(r), "d2C": d2C,
            "devA": e / F, "devB": np.zeros_like(r), "devC": -e}


def build_eguchi_hanson(grid: RadialGrid, a: float) -> MetricProfile:
    if a < 0:
        raise GeometryError("bolt radius must be positive")
    if grid.nodes[0] <= a:
        raise GeometryError("grid must start outside the bolt")
    link = LinkGeometry(4, 2)
    d = eh_functions(grid.nodes, a)
    prof = {k: d[k] for k in ("A", "B", "C")}
    der = {k: d[k] for k in d if k.startswith("d")}
    return MetricProfile("eguchi_hanson", link, grid, prof, decay_order=4.0, derivs=der,
                         params={"a": a}, generator=lambda gr: build_eguchi_hanson(gr, a))


def default_eh_grid(a: float = 1.0, rmax: float = 200.0, nodes: int = 1200) -> RadialGrid:
    # the bolt is a coordinate singularity of the r chart; start just outside it
    return RadialGrid(np.geomspace(a * 1.05, rmax, nodes), cap_radius=a)


def scale_metric(g: MetricProfile, s: float) -> MetricProfile:
    """The metric s*g written in normalised ALE coordinates r' = sqrt(s) r."""
    if s <= 0:
        raise GeometryError("scale must be positive")
    c = math.sqrt(s)
    grid = g.grid.scaled(c)
    if g.family == "eguchi_hanson":
        # s * g_EH(a) is g_EH(sqrt(s) a) in the rescaled chart
        out = build_eguchi_hanson(grid, g.params["a"] * c)
        out.params["scale"] = g.params.get("scale", 1.0) * s
        return out
    prof = dict(g.profiles)
    derivs = {}
    if g.family in ("conformal", "flat"):
        if "du" in g.derivs:
            derivs = {"du": g.derivs["du"] / c, "d2u": g.derivs["d2u"] / c**2}
    elif g.family == "warped":
        prof = {"a": g.profiles["a"], "b": g.profiles["b"] * c}
    else:
        prof = {k: v * (c if k in ("B", "C") else 1.0) for k, v in g.profiles.items()}
    params = dict(g.params, scale=g.params.get("scale", 1.0) * s)
    gen = None
    if g.generator is not None:
        base_gen = g.generator
        gen = lambda gr: scale_metric(base_gen(gr.scaled(1.0 / c)), s)
    return MetricProfile(g.family, g.link, grid, prof, g.decay_order, derivs, params, gen)


# --------------------------------------------------------------- geometry

@dataclass
class WarpedFrame:
    """Pointwise geometric data of a round-link metric in its orthonormal frame."""

    n: int
    r: np.ndarray
    a: np.ndarray
    b: np.ndarray
    bs: np.ndarray   # db/ds
    bss: np.ndarray  # d^2b/ds^2
    grid: RadialGrid
    link_volume: float
    bs_m1: Optional[np.ndarray] = None  # db/ds - 1 without cancellation, when known

    @property
    def H(self) -> np.ndarray:
        return self.bs / self.b

    @property
    def Krad(self) -> np.ndarray:
        return -self.bss / self.b

    @property
    def Ktan(self) -> np.ndarray:
        if self.bs_m1 is not None:
            return -self.bs_m1 * (1.0 + self.bs) / self.b**2
        return (1.0 - self.bs**2) / self.b**2

    @property
    def omega(self) -> np.ndarray:
        return self.link_volume * self.a * self.b ** (self.n - 1)

    def ds(self, f: np.ndarray) -> np.ndarray:
        return self.grid.dr(f) / self.a

    def laplacian(self, f: np.ndarray) -> np.ndarray:
        fs = self.ds(f)
        return self.ds(fs) + (self.n - 1) * self.H * fs

    def ricci(self) -> tuple[np.ndarray, np.ndarray]:
        n = self.n
        return (n - 1) * self.Krad, self.Krad + (n - 2) * self.Ktan


def warped_frame(g: MetricProfile) -> WarpedFrame:
    n, grid, r = g.n, g.grid, g.r
    if g.family == "eguchi_hanson":
        raise GeometryError("biaxial profile has no round warped frame")
    if g.family in ("flat", "conformal"):
        u = g.profiles["u"]
        du = g.derivs.get("du")
        d2u = g.derivs.get("d2u")
        if du is None:
            du, d2u = grid.dr(u), grid.d2r(u)
        k = 2.0 / (n - 2)
        e = u**k
        ph1 = k * du / u
        ph2 = k * (d2u / u - (du / u) ** 2)
        bs = 1.0 + r * ph1
        bss = (ph1 + r * ph2) / e
        return WarpedFrame(n, r, e, r * e, bs, bss, grid, g.link.link_volume, r * ph1)
    a, b = g.profiles["a"], g.profiles["b"]
    da = g.derivs.get("da")
    db = g.derivs.get("db")
    d2b = g.derivs.get("d2b")
    if da is None:
        da = grid.dr(a)
    if db is None:
        db, d2b = grid.dr(b), grid.d2r(b)
    bs = db / a
    bss = d2b / a**2 - da * db / a**3
    bs_m1 = None
    if all(k in g.derivs for k in ("am1", "bm1", "dbm1")):
        # db = 1 + bm1 + r (b/r)', so db/a - 1 = (bm1 + r dbm1 - am1) / a
        bs_m1 = (g.derivs["bm1"] + r * g.derivs["dbm1"] - g.derivs["am1"]) / a
    return WarpedFrame(n, r, a, b, bs, bss, grid, g.link.link_volume, bs_m1)


def _eh_data(g: MetricProfile) -> dict:
    p, d, grid = g.profiles, g.derivs, g.grid
    out = dict(p)
    for k in ("A", "B", "C"):
        if "d" + k in d:
            out["d" + k], out["d2" + k] = d["d" + k], d["d2" + k]
        else:
            out["d" + k], out["d2" + k] = grid.dr(p[k]), grid.d2r(p[k])
    return out


def biaxial_ricci(g: MetricProfile) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Orthonormal Ricci components (e0, e1=e2, e3) of the biaxial metric."""
    q = _eh_data(g)
    A, B, C = q["A"], q["B"], q["C"]
    dA, dB, dC = q["dA"], q["dB"], q["dC"]
    d2B, d2C = q["d2B"], q["d2C"]
    r0 = (-d2C / C - 2 * d2B / B + dA * dC / (A * C) + 2 * dA * dB / (A * B)) / A**2
    r1 = (1 - C**2 / (2 * B**2) - B * d2B / A**2 - B * dB * dC / (A**2 * C)
          - dB**2 / A**2 + B * dA * dB / A**3) / B**2
    r3 = (C**4 / (2 * B**4) - C * d2C / A**2 - 2 * C * dB * dC / (A**2 * B)
          + C * dA * dC / A**3) / C**2
    return r0, r1, r3


def scalar_curvature(g: MetricProfile) -> np.ndarray:
    n = g.n
    if g.family == "flat":
        return np.zeros_like(g.r)
    if g.family == "eguchi_hanson":
        r0, r1, r3 = biaxial_ricci(g)
        return r0 + 2 * r1 + r3
    if g.family == "conformal":
        r, grid = g.r, g.grid
        u = g.profiles["u"]
        du = g.derivs.get("du")
        d2u = g.derivs.get("d2u")
        if du is None:
            du, d2u = grid.dr(u), grid.d2r(u)
        lap_u = d2u + (n - 1) * du / r
        return -4.0 * (n - 1) / (n - 2) * u ** (-(n + 2.0) / (n - 2)) * lap_u
    fr = warped_frame(g)
    rr, rt = fr.ricci()
    return rr + (n - 1) * rt


def ricci_tensor(g: MetricProfile) -> RadialTwoTensor:
    if g.family == "flat":
        z = np.zeros_like(g.r)
        return RadialTwoTensor.diagonal(z, z.copy(), float(g.n))
    if g.family == "eguchi_hanson":
        r0, r1, r3 = biaxial_ricci(g)
        return RadialTwoTensor("diagonal", r0, r1, g.decay_order + 2, fiber=r3)
    rr, rt = warped_frame(g).ricci()
    return RadialTwoTensor.diagonal(rr, rt, g.decay_order + 2)


def volume_density(g: MetricProfile) -> np.ndarray:
    """omega(r) with int_N F dmu = int F(r) omega(r) dr for radial F."""
    n, r, V = g.n, g.r, g.link.link_volume
    if g.family == "flat":
        return V * r ** (n - 1)
    if g.family == "conformal":
        return V * g.profiles["u"] ** (2.0 * n / (n - 2)) * r ** (n - 1)
    if g.family == "eguchi_hanson":
        p = g.profiles
        return V * 8.0 * p["A"] * p["B"] ** 2 * p["C"]
    a, b = g.profiles["a"], g.profiles["b"]
    return V * a * b ** (n - 1)


def radial_metric_factor(g: MetricProfile) -> np.ndarray:
    """a(r) = |dr|^{-1}, so that |df|^2 = f'(r)^2 / a^2."""
    if g.family == "eguchi_hanson":
        return g.profiles["A"]
    return warped_frame_a(g)


def warped_frame_a(g: MetricProfile) -> np.ndarray:
    if g.family == "flat":
        return np.ones_like(g.r)
    if g.family == "conformal":
        return g.profiles["u"] ** (2.0 / (g.n - 2))
    return g.profiles["a"]


def _eh_deviations(g: MetricProfile) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if "devA" in g.derivs:
        return g.derivs["devA"], g.derivs["devB"], g.derivs["devC"]
    p, r = g.profiles, g.r
    return p["A"] ** 2 - 1.0, 4 * p["B"] ** 2 / r**2 - 1.0, 4 * p["C"] ** 2 / r**2 - 1.0


def deviation_components(g: MetricProfile) -> tuple[np.ndarray, np.ndarray]:
    """(p, q) with g - g_e = p dr^2 + q r^2 g_S in flat coordinates.

    Deviations are formed without subtracting 1 from O(1) samples whenever the
    profile carries them (``um1`` or ``am1``/``bm1``), to keep far-field precision.
    """
    r = g.r
    if g.family == "eguchi_hanson":
        d0, d1, d3 = _eh_deviations(g)
        # average tangential deviation over the three link directions
        return d0, (2 * d1 + d3) / 3.0
    if g.family == "flat":
        z = np.zeros_like(r)
        return z, z.copy()
    if g.family == "conformal":
        um1 = g.derivs.get("um1", g.profiles["u"] - 1.0)
        dev = np.expm1(4.0 / (g.n - 2) * np.log1p(um1))
        return dev, dev.copy()
    am1 = g.derivs.get("am1", g.profiles["a"] - 1.0)
    bm1 = g.derivs.get("bm1", g.profiles["b"] / r - 1.0)
    return am1 * (am1 + 2.0), bm1 * (bm1 + 2.0)


def deviation_q_derivative(g: MetricProfile) -> np.ndarray:
    """d/dr of the tangential deviation q."""
    if g.family == "conformal" and "du" in g.derivs:
        n, u = g.n, g.profiles["u"]
        k = 4.0 / (n - 2)
        return k * u ** (k - 1) * g.derivs["du"]
    if g.family == "warped" and "dbm1" in g.derivs:
        bm1 = g.derivs.get("bm1", g.profiles["b"] / g.r - 1.0)
        return 2.0 * (1.0 + bm1) * g.derivs["dbm1"]
    if g.family == "warped" and "db" in g.derivs:
        # q = (b/r)^2 - 1, so q' = 2 (b/r) (b' - b/r) / r
        r, b = g.r, g.profiles["b"]
        return 2.0 * (b / r) * (g.derivs["db"] - b / r) / r
    if g.family == "eguchi_hanson" and "dB" in g.derivs and "dC" in g.derivs:
        # q = (2 (4B^2/r^2 - 1) + (4C^2/r^2 - 1)) / 3
        r, p = g.r, g.profiles
        dB2 = 8.0 * p["B"] * (g.derivs["dB"] * r - p["B"]) / r**3
        dC2 = 8.0 * p["C"] * (g.derivs["dC"] * r - p["C"]) / r**3
        return (2.0 * dB2 + dC2) / 3.0
    _, q = deviation_components(g)
    return g.grid.dr(q)


def deviation_norm(g: MetricProfile) -> np.ndarray:
    """Pointwise flat norm |g - g_e|_e."""
    r = g.r
    if g.family == "eguchi_hanson":
        d0, d1, d3 = _eh_deviations(g)
        return np.sqrt(d0**2 + 2 * d1**2 + d3**2)
    p, q = deviation_components(g)
    return np.sqrt(p**2 + (g.n - 1) * q**2)


# ------------------------------------------------------------------ I/O

PROFILE_KEYS = ("u", "a", "b", "A", "B", "C")


def profile_to_csv(g: MetricProfile, path: str) -> None:
    """Columns r, the profile functions, then any analytic derivative samples."""
    cols = {**g.profiles, **{k: v for k, v in g.derivs.items() if np.shape(v) == g.r.shape}}
    keys = list(cols)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        fh.write(f"# {g.family} profile; r: radius (length), profile columns dimensionless,"
                 " d*: r-derivatives (length^-k)\n")
        w.writerow(["r"] + keys)
        for i, r in enumerate(g.r):
            w.writerow([f"{r:.17g}"] + [f"{cols[k][i]:.17g}" for k in keys])


def profile_meta(g: MetricProfile) -> dict:
    return {"family": g.family, "link": g.link.to_dict(), "decay_order": g.decay_order,
            "params": {k: v for k, v in g.params.items()}, "grid": g.grid.descriptor()}


def profile_to_json(g: MetricProfile, path: str) -> None:
    with open(path, "w") as fh:
        json.dump(profile_meta(g), fh, indent=2)


def profile_from_csv(path: str, meta: dict) -> MetricProfile:
    with open(path) as fh:
        rows = [row for row in csv.reader(fh) if row and not row[0].startswith("#")]
    header, data = rows[0], np.array(rows[1:], dtype=float)
    grid = RadialGrid(data[:, 0], meta.get("grid", {}).get("cap_radius", 0.0))
    link = LinkGeometry(int(meta["link"]["n"]), int(meta["link"].get("gamma_order", 1)))
    cols = {k: data[:, i + 1] for i, k in enumerate(header[1:])}
    prof = {k: v for k, v in cols.items() if k in PROFILE_KEYS}
    derivs = {k: v for k, v in cols.items() if k not in PROFILE_KEYS}
    return MetricProfile(meta["family"], link, grid, prof, float(meta.get("decay_order", link.n - 2)),
                         derivs=derivs, params=meta.get("params", {}))
