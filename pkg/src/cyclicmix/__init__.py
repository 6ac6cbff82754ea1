"""Exact and Monte Carlo tools for the three-color cyclic dynamics and its couplings."""
from .chain import (
    BasketCounts,
    BasketPartition,
    ChainParams,
    Configuration,
    CountVector,
    basket_counts,
    counts_of,
    proportion_kernel_row,
    step_configuration,
)
from .exact import (
    build_lumped_kernel,
    cutoff_curve,
    evolve,
    mixing_time,
    stationary_counts,
    tv_distance,
    tv_profile,
)

__version__ = "0.1.0"
