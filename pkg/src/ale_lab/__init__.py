"""Numerical toolkit for the renormalised Perelman functional on radial ALE metrics."""
from .manifold_core import (
    GeometryError,
    LinkGeometry,
    MetricProfile,
    RadialGrid,
    RadialTwoTensor,
    build_conformal_family,
    build_eguchi_hanson,
    flat_profile,
    ricci_tensor,
    scalar_curvature,
    volume_density,
)
from .potential_lambda import (
    DivergenceError,
    FunctionalReport,
    PotentialSolution,
    SolvabilityError,
    adm_mass,
    lambda_ale,
    solve_potential,
)

__version__ = "0.1.0"
