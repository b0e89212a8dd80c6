"""Similarity-caching simulation and optimization toolkit."""

from simcache.costs import (
    CacheState,
    CostModel,
    approx_cost,
    best_approximator,
    delta_cost,
    excursion_cost,
    expected_cost,
    expected_cost_mc,
    movement_cost,
    service_cost,
)
from simcache.spaces import ContinuousSpace, FiniteSpace, PointCatalog, TorusGrid

__version__ = "0.1.0"

__all__ = [
    "CacheState",
    "CostModel",
    "ContinuousSpace",
    "FiniteSpace",
    "PointCatalog",
    "TorusGrid",
    "approx_cost",
    "best_approximator",
    "delta_cost",
    "excursion_cost",
    "expected_cost",
    "expected_cost_mc",
    "movement_cost",
    "service_cost",
]
