"""Minor-road capacity at unsignalized priority intersections.

Three gap-acceptance behaviours (fixed, resampled and per-driver critical
headways), driver impatience, Markov-modulated major-road traffic, and a
discrete-event simulator to check the analytic results against.
"""

from .distributions import (
    Deterministic,
    Discrete,
    DistributionError,
    Exponential,
    Gamma,
    HeadwayDistribution,
    Shifted,
    affine_push,
)
from .impatience import Explicit, Geometric, NoImpatience, attempt_law, capacity_impatient, service_impatient
from .mmpp import MmppSpec, average_rate, capacity_mmpp, naive_capacity, stationary
from .poisson_core import Behavior, UnstableQueueError, capacity, find_stationary_points, queue_metrics, service
from .simulator import SimConfig, simulate_capacity, simulate_queue

__version__ = "0.1.0"

__all__ = [
    "Behavior",
    "Deterministic",
    "Discrete",
    "DistributionError",
    "Explicit",
    "Exponential",
    "Gamma",
    "Geometric",
    "HeadwayDistribution",
    "MmppSpec",
    "NoImpatience",
    "Shifted",
    "SimConfig",
    "UnstableQueueError",
    "affine_push",
    "attempt_law",
    "average_rate",
    "capacity",
    "capacity_impatient",
    "capacity_mmpp",
    "find_stationary_points",
    "naive_capacity",
    "queue_metrics",
    "service",
    "service_impatient",
    "simulate_capacity",
    "simulate_queue",
    "stationary",
]
