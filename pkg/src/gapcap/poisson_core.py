"""Service times, capacities and M/G/1 queue metrics under Poisson major traffic.

The head-of-queue driver's service time Y is the sum of the rejected gaps
plus the accepted critical headway.  Three gap-acceptance behaviours:

* ``B1`` - one fixed critical headway T for every attempt (a non-degenerate
  law is replaced by its mean);
* ``B2`` - a fresh T is drawn for every attempt;
* ``B3`` - each driver draws T once and keeps it.

Capacity is 1/E[Y]; mean queue length follows from Pollaczek-Khinchine.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import optimize

from .distributions import Deterministic, HeadwayDistribution

INF = math.inf


class Behavior(str, enum.Enum):
    B1 = "B1"
    B2 = "B2"
    B3 = "B3"

    @classmethod
    def parse(cls, value) -> "Behavior":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).upper())
        except ValueError:
            raise ValueError(f"unknown behavior {value!r}; expected B1, B2 or B3") from None


class UnstableQueueError(ArithmeticError):
    """Offered load is at or above capacity; carries the load ``rho``."""

    def __init__(self, rho: float):
        self.rho = rho
        super().__init__(f"queue is unstable: rho = {rho:.6g} >= 1")


@dataclass
class ServiceCharacterization:
    """Moments and transform of the service (inter-departure) time Y."""

    mean: float
    second_moment: float
    lst: Callable[[float], float] = field(repr=False)

    @property
    def capacity(self) -> float:
        return 0.0 if self.mean == INF else 1.0 / self.mean


@dataclass(frozen=True)
class QueueMetrics:
    rho: float
    mean_queue_length: float  # vehicles in system (waiting + at the stop line)
    mean_delay: float  # seconds from arrival to departure
    infinite_mean: bool = False  # rho < 1 but E[Y^2] = inf

    @property
    def is_finite(self) -> bool:
        return not self.infinite_mean


def b1_reference(d: HeadwayDistribution) -> Deterministic:
    """The constant headway B1 uses when handed a law: its mean."""
    if isinstance(d, Deterministic):
        return d
    return Deterministic(d.mean())


# ---------------------------------------------------------------------------
# stable elementary pieces


def _exprel(x: float) -> float:
    """(e^x - 1)/x."""
    if abs(x) < 1e-8:
        return 1.0 + x / 2.0
    return math.expm1(x) / x


def _exprel2(x: float) -> float:
    """(e^x - 1 - x)/x^2."""
    if abs(x) < 1e-2:
        return 0.5 + x * (1 / 6 + x * (1 / 24 + x * (1 / 120 + x / 720)))
    return (math.expm1(x) - x) / (x * x)


def _g2(x: float) -> float:
    """(1 - e^-x (1 + x))/x^2, the B2 second-moment kernel."""
    if abs(x) < 1e-2:
        return 0.5 - x / 3 + x * x / 8 - x**3 / 30 + x**4 / 144
    return (-math.expm1(-x) - x * math.exp(-x)) / (x * x)


def _h3(x: float) -> float:
    """(e^2x - e^x - x e^x)/x^2, the B3 second-moment kernel."""
    if abs(x) < 1e-2:
        return 0.5 + x * (2 / 3 + x * (11 / 24 + x * (13 / 60 + x * 57 / 720)))
    return (math.expm1(2 * x) - math.expm1(x) - x * math.exp(x)) / (x * x)


def _series_expectation(d: HeadwayDistribution, q: float, coef: Callable[[int], float], nmax=30):
    """E[f(qT)] / q^2 for an entire f with f(x) = sum_{n>=2} coef(n) x^n.

    Used for continuous laws at small q, where the closed forms cancel.
    """
    total = 0.0
    for n in range(2, nmax + 2):
        term = coef(n) * q ** (n - 2) * d.raw_moment(n)
        total += term
        if abs(term) < 1e-17 * abs(total):
            break
    return total


def _small(d: HeadwayDistribution, q: float) -> bool:
    return q * math.sqrt(d.raw_moment(2)) < 1e-3


# ---------------------------------------------------------------------------
# service-time characterization


def _mean_b1(T: float, q: float) -> float:
    x = q * T
    if x >= 709.0:
        return INF
    return T * _exprel(x)


def _second_b1(T: float, q: float) -> float:
    x = q * T
    if x >= 354.0:
        return INF
    return 2.0 * math.exp(x) * T * T * _exprel2(x)


def _mean_b2(d: HeadwayDistribution, q: float) -> float:
    if q == 0:
        return d.mean()
    L = d.laplace(q)
    if L == 0.0:
        return INF
    return d.one_minus_laplace(q) / (q * L)


def _second_b2(d: HeadwayDistribution, q: float) -> float:
    if q == 0:
        return d.raw_moment(2)
    L = d.laplace(q)
    if L == 0.0:
        return INF
    if d.is_finite:
        num = math.fsum(p * t * t * _g2(q * t) for t, p in d.atoms())
    elif _small(d, q):
        num = _series_expectation(d, q, lambda n: (-1) ** n * (n - 1) / math.factorial(n))
    else:
        num = (d.one_minus_laplace(q) - q * d.tilted(q)) / (q * q)
    return 2.0 * num / (L * L)


def _mean_b3(d: HeadwayDistribution, q: float) -> float:
    if q == 0:
        return d.mean()
    if d.is_finite:
        return math.fsum(p * _mean_b1(t, q) for t, p in d.atoms())
    m1 = d.mgf_minus_one(q)
    return INF if m1 == INF else m1 / q


def _second_b3(d: HeadwayDistribution, q: float) -> float:
    if q == 0:
        return d.raw_moment(2)
    if d.is_finite:
        return math.fsum(p * _second_b1(t, q) for t, p in d.atoms())
    if d.mgf(2 * q) == INF:
        return INF
    if _small(d, q):
        num = _series_expectation(d, q, lambda n: (2**n - 1 - n) / math.factorial(n))
    else:
        # E[e^{2qT}] - E[e^{qT}] - q E[T e^{qT}]
        num = (d.mgf_minus_one(2 * q) - d.mgf_minus_one(q) - q * d.tilted(-q)) / (q * q)
    return 2.0 * num


def _lst_b1(T: float, q: float) -> Callable[[float], float]:
    def f(s: float) -> float:
        u = s + q
        e = math.exp(-u * T)
        if s == 0.0:
            return 1.0
        return u * e / (s + q * e)

    return f


def _lst_b2(d: HeadwayDistribution, q: float) -> Callable[[float], float]:
    def f(s: float) -> float:
        if s == 0.0:
            return 1.0
        u = s + q
        L = d.laplace(u)
        return u * L / (s + q * L)

    return f


def _lst_b3(d: HeadwayDistribution, q: float) -> Callable[[float], float]:
    if d.is_finite:
        parts = [(p, _lst_b1(t, q)) for t, p in d.atoms()]
        return lambda s: math.fsum(p * g(s) for p, g in parts)

    from scipy import integrate

    def f(s: float) -> float:
        if s == 0.0:
            return 1.0

        def integrand(t):
            u = s + q
            e = math.exp(-u * t)
            return float(d.pdf(t)) * u * e / (s + q * e)

        lo, hi = d.support()
        val, _ = integrate.quad(integrand, lo, hi, limit=200, epsabs=1e-13, epsrel=1e-11)
        return val

    return f


def service(behavior, d: HeadwayDistribution, q: float) -> ServiceCharacterization:
    """Moments and LST of the service time for one behaviour.

    ``q`` is the major-road rate in vehicles per second.  Divergent moments
    (B3 with an mgf that does not exist at q or 2q) come back as ``inf``.
    """
    behavior = Behavior.parse(behavior)
    if not q >= 0:
        raise ValueError(f"major-road rate must be non-negative, got {q}")
    if behavior is Behavior.B1:
        T = b1_reference(d).T
        return ServiceCharacterization(_mean_b1(T, q), _second_b1(T, q), _lst_b1(T, q))
    if behavior is Behavior.B2:
        return ServiceCharacterization(_mean_b2(d, q), _second_b2(d, q), _lst_b2(d, q))
    mean = _mean_b3(d, q)
    second = INF if mean == INF else _second_b3(d, q)
    return ServiceCharacterization(mean, second, _lst_b3(d, q))


def capacity(behavior, d: HeadwayDistribution, q: float) -> float:
    """Minor-road capacity 1/E[Y] in vehicles per second (0 if E[Y] = inf)."""
    return service(behavior, d, q).capacity


def pk_mean_queue_length(rho: float, lam: float, second_moment: float) -> float:
    """Pollaczek-Khinchine mean number in an M/G/1 system."""
    return rho + lam * lam * second_moment / (2.0 * (1.0 - rho))


def queue_metrics(behavior, d: HeadwayDistribution, q: float, lam: float) -> QueueMetrics:
    """Mean queue length and delay of the minor-road M/G/1 queue.

    Raises :class:`UnstableQueueError` when rho = lam E[Y] >= 1.  When rho < 1
    but E[Y^2] is infinite, the means are ``inf`` and ``infinite_mean`` is set.
    """
    if not lam >= 0:
        raise ValueError(f"minor-road rate must be non-negative, got {lam}")
    svc = service(behavior, d, q)
    if lam == 0:
        return QueueMetrics(0.0, 0.0, svc.mean, infinite_mean=svc.second_moment == INF)
    rho = lam * svc.mean
    if rho >= 1:
        raise UnstableQueueError(rho)
    if svc.second_moment == INF:
        return QueueMetrics(rho, INF, INF, infinite_mean=True)
    L = pk_mean_queue_length(rho, lam, svc.second_moment)
    return QueueMetrics(rho, L, L / lam)


# ---------------------------------------------------------------------------
# stationary points of capacity curves

def _refine(f, a: float, b: float, sign: float, rtol: float) -> float:
    """Extremum of f on [a, b]; sign=+1 for a max, -1 for a min."""
    res = optimize.minimize_scalar(
        lambda x: -sign * f(x), bounds=(a, b), method="bounded", options={"xatol": rtol * 0.25 * (a + b)}
    )
    return float(res.x)


def find_stationary_points(
    curve: Callable[[float], float],
    q_range: tuple[float, float],
    rtol: float = 1e-3,
    points: int = 512,
) -> list[tuple[float, str]]:
    """Interior local maxima/minima of ``curve`` over a log-spaced grid.

    Each sign change of the discrete slope is refined by bounded scalar
    minimisation to relative tolerance ``rtol`` in q.  Returns
    ``(q, "max"|"min")`` pairs ordered by q.
    """
    lo, hi = q_range
    if not (0 < lo < hi):
        raise ValueError(f"range must satisfy 0 < lo < hi, got {q_range}")
    grid = np.geomspace(lo, hi, points)
    vals = np.array([curve(x) for x in grid])
    slope = np.diff(vals)
    # flat stretches carry no extrema
    scale = np.max(np.abs(vals)) if vals.size else 1.0
    sgn = np.sign(np.where(np.abs(slope) <= 1e-12 * scale, 0.0, slope))
    out = []
    last = 0.0
    last_idx = -1
    for i, s in enumerate(sgn):
        if s == 0:
            continue
        if last != 0 and s != last:
            kind = "max" if last > 0 else "min"
            a, b = grid[max(last_idx, 0)], grid[min(i + 1, points - 1)]
            x = _refine(curve, a, b, 1.0 if kind == "max" else -1.0, rtol)
            out.append((float(x), kind))
        last, last_idx = s, i
    return out
