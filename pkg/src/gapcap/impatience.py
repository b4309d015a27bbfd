"""Attempt-indexed critical headways and service times under driver impatience.

A policy maps the first-attempt headway T_1 to the j-th attempt headway
through an affine map ``T_j = a_j * T_1 + b_j`` (``a_1 = 1, b_1 = 0``).
The service-time mean and transform are infinite series over the number of
failed attempts; they are summed until a rigorous bound on the remaining
tail drops below ``tol`` times the partial sum.
"""

from __future__ import annotations

import functools
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import integrate

from .distributions import Deterministic, HeadwayDistribution, affine_push
from .numerics import lst_moment
from .poisson_core import Behavior, b1_reference

INF = math.inf
MAX_TERMS = 100_000


# ---------------------------------------------------------------------------
# policies


class ImpatiencePolicy:
    def step(self, j: int) -> tuple[float, float]:
        """(a_j, b_j) such that T_j = a_j T_1 + b_j."""
        raise NotImplementedError

    def monotone_from(self) -> int | None:
        """First attempt index from which every T_j sequence is monotone
        towards its limit, or None if unknown."""
        return 1

    def limit(self) -> tuple[float, float]:
        """(a, b) of the limiting map as j -> infinity."""
        raise NotImplementedError

    def to_dict(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True)
class NoImpatience(ImpatiencePolicy):
    def step(self, j):
        return (1.0, 0.0)

    def limit(self):
        return (1.0, 0.0)

    def to_dict(self):
        return {"kind": "none"}


@dataclass(frozen=True)
class Geometric(ImpatiencePolicy):
    """T_{j+1} = alpha (T_j - delta) + delta: headways contract towards delta."""

    alpha: float
    delta: float = 0.0

    def __post_init__(self):
        if not (0 < self.alpha <= 1):
            raise ValueError(f"alpha must lie in (0, 1], got {self.alpha}")
        if not self.delta >= 0:
            raise ValueError(f"delta must be non-negative, got {self.delta}")

    def step(self, j):
        a = self.alpha ** (j - 1)
        return (a, (1.0 - a) * self.delta)

    def limit(self):
        if self.alpha == 1.0:
            return (1.0, 0.0)
        return (0.0, self.delta)

    def to_dict(self):
        return {"kind": "geometric", "alpha": self.alpha, "delta_s": self.delta}


@dataclass(frozen=True)
class Explicit(ImpatiencePolicy):
    """Per-attempt affine maps for attempts 2, 3, ...; the last one repeats."""

    steps: tuple[tuple[float, float], ...] = field(default=())

    def __post_init__(self):
        steps = tuple((float(a), float(b)) for a, b in self.steps)
        for i, (a, b) in enumerate(steps):
            if not a > 0:
                raise ValueError(f"steps[{i}]: scale must be positive, got {a}")
            if b < 0:
                raise ValueError(f"steps[{i}]: shift must be non-negative, got {b}")
        object.__setattr__(self, "steps", steps)

    def step(self, j):
        if j <= 1 or not self.steps:
            return (1.0, 0.0)
        return self.steps[min(j - 2, len(self.steps) - 1)]

    def monotone_from(self):
        # constant from the last listed attempt onwards
        return len(self.steps) + 1

    def limit(self):
        return self.steps[-1] if self.steps else (1.0, 0.0)

    def to_dict(self):
        return {"kind": "explicit", "steps": [list(s) for s in self.steps]}


def policy_from_dict(spec: dict | None) -> ImpatiencePolicy:
    if not spec or spec.get("kind", "none") == "none":
        return NoImpatience()
    kind = spec["kind"]
    if kind == "geometric":
        return Geometric(float(spec["alpha"]), float(spec.get("delta_s", 0.0)))
    if kind == "explicit":
        return Explicit(tuple(tuple(s) for s in spec["steps"]))
    raise ValueError(f"unknown impatience kind {kind!r}")


def is_trivial(policy: ImpatiencePolicy) -> bool:
    if isinstance(policy, NoImpatience):
        return True
    if isinstance(policy, Geometric):
        return policy.alpha == 1.0
    if isinstance(policy, Explicit):
        return all(s == (1.0, 0.0) for s in policy.steps)
    return False


def attempt_law(policy: ImpatiencePolicy, base: HeadwayDistribution, j: int) -> HeadwayDistribution:
    """Law of T_j, the critical headway used at attempt ``j``."""
    if j < 1:
        raise ValueError(f"attempt index must be >= 1, got {j}")
    a, b = policy.step(j)
    if a == 0.0:  # alpha**(j-1) underflowed: the sequence has reached delta
        return Deterministic(b)
    return affine_push(base, a, b)


# ---------------------------------------------------------------------------
# service time


@dataclass
class ImpatientService:
    """Service-time mean and transform from the impatience series."""

    mean: float
    lst: Callable[[float], float] = field(repr=False)
    terms: int
    tail_bound: float
    converged: bool = True

    @property
    def capacity(self) -> float:
        return 0.0 if self.mean == INF else 1.0 / self.mean

    @functools.cached_property
    def second_moment(self) -> float:
        if self.mean == INF:
            return INF
        return lst_moment(self.lst, 2, mean_guess=self.mean).value


def _tail(prod, r, k: int, q: float):
    """Bound on the not-yet-summed terms k, k+1, ... of the mean series.

    ``prod`` is the survival product over the first k attempts, ``r`` bounds
    every later failure probability, and each bracket is at most
    (k + m + 1/e)/q because T e^{-qT} <= 1/(eq).
    """
    r = np.asarray(r, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        g = 1.0 / (1.0 - r)
        out = np.asarray(prod) / q * ((k + 1.0 / math.e) * g + r * g * g)
    return np.where(r < 1.0, out, INF)


def _maps(policy: ImpatiencePolicy, n: int) -> tuple[np.ndarray, np.ndarray]:
    ab = np.array([policy.step(j) for j in range(1, n + 1)], dtype=float)
    return ab[:, 0], ab[:, 1]


class _MapCache:
    """Affine maps for attempts 1..n, grown on demand."""

    def __init__(self, policy):
        self.policy = policy
        self.a = np.empty(0)
        self.b = np.empty(0)

    def get(self, j: int) -> tuple[float, float]:
        if j > self.a.size:
            n = max(2 * self.a.size, j, 64)
            self.a, self.b = _maps(self.policy, n)
        return self.a[j - 1], self.b[j - 1]


def _b1_series_mean(T1: np.ndarray, policy: ImpatiencePolicy, q: float, tol: float, maps=None):
    """E[Y] for deterministic per-driver sequences T_j = a_j T1 + b_j.

    Vectorised over the entries of T1.  Returns (means, terms, tail bound,
    converged).
    """
    maps = maps or _MapCache(policy)
    T1 = np.asarray(T1, dtype=float)
    la, lb = policy.limit()
    T_lim = la * T1 + lb
    mono = policy.monotone_from()

    total = np.zeros_like(T1)
    prod = np.ones_like(T1)  # prod_{j<=k} (1 - e^{-q T_j})
    cond = np.zeros_like(T1)  # sum_{i<=k} E[tau | tau < T_i]
    tail = np.full_like(T1, INF)
    for k in range(MAX_TERMS):
        a, b = maps.get(k + 1)
        Tn = a * T1 + b
        e = np.exp(-q * Tn)
        total += e * (cond + Tn) * prod
        fail = -np.expm1(-q * Tn)
        prod = prod * fail
        cond = cond + (1.0 / q - Tn * e / fail)
        if mono is not None and k + 1 >= mono:
            a2, b2 = maps.get(k + 2)
            r = -np.expm1(-q * np.maximum(a2 * T1 + b2, T_lim))
            tail = _tail(prod, r, k + 1, q)
            if np.all(tail < tol * total):
                return total, k + 1, float(np.max(tail)), True
    return total, MAX_TERMS, float(np.max(tail)), False


def _b1_series_lst(T1: np.ndarray, policy: ImpatiencePolicy, q: float, s: float, n_terms: int, maps=None):
    maps = maps or _MapCache(policy)
    u = s + q
    w = q / u
    T1 = np.asarray(T1, dtype=float)
    total = np.zeros_like(T1)
    prod = np.ones_like(T1)
    for k in range(n_terms + 1):
        a, b = maps.get(k + 1)
        Tn = a * T1 + b
        total += prod * np.exp(-u * Tn)
        prod = prod * w * (-np.expm1(-u * Tn))
        if np.all(prod <= 1e-18 * total) or np.all(prod < 1e-300):
            break
    return total


def _b2_factors(base: HeadwayDistribution, a: float, b: float, q: float):
    """(E[e^{-qT}], E[T e^{-qT}], 1 - E[e^{-qT}]) for T = a X + b, X ~ base."""
    if a == 0.0:
        e = math.exp(-q * b)
        return e, b * e, -math.expm1(-q * b)
    L = base.laplace(a * q)
    eb = math.exp(-q * b)
    Lj = eb * L
    tm = eb * (a * base.tilted(a * q) + b * L)
    one_minus = -math.expm1(-q * b) + eb * base.one_minus_laplace(a * q)
    return Lj, tm, one_minus


def _b2_lower_laplace(base, policy, maps, k, q):
    """Lower bound on E[e^{-q T_j}] valid for every j > k (monotone regime)."""
    a, b = maps.get(k + 1)
    la, lb = policy.limit()
    if base.is_finite:
        vals = np.array([t for t, _ in base.atoms()])
        ps = np.array([p for _, p in base.atoms()])
        worst = np.maximum(a * vals + b, la * vals + lb)
        return float(np.sum(ps * np.exp(-q * worst)))
    Lk = _b2_factors(base, a, b, q)[0]
    if la == 0.0:
        return Lk * math.exp(-q * lb)
    # constant tail: the maps no longer change
    return min(Lk, _b2_factors(base, la, lb, q)[0])


def _b2_series_mean(base, policy, q, tol):
    maps = _MapCache(policy)
    mono = policy.monotone_from()
    total = 0.0
    prod = 1.0
    cond = 0.0
    tail = INF
    for k in range(MAX_TERMS):
        a, b = maps.get(k + 1)
        L, tm, fail = _b2_factors(base, a, b, q)
        total += (tm + L * cond) * prod
        prod *= fail
        cond += 1.0 / q - tm / fail
        if mono is not None and k + 1 >= mono:
            r = 1.0 - _b2_lower_laplace(base, policy, maps, k + 1, q)
            tail = float(_tail(prod, r, k + 1, q))
            if tail < tol * total:
                return total, k + 1, tail, True
    return total, MAX_TERMS, tail, False


def _b2_series_lst(base, policy, q, s, n_terms):
    maps = _MapCache(policy)
    u = s + q
    w = q / u
    total = 0.0
    prod = 1.0
    for k in range(n_terms + 1):
        a, b = maps.get(k + 1)
        L, _, fail = _b2_factors(base, a, b, u)
        total += prod * L
        prod *= w * fail
        if prod < 1e-18 * total:
            break
    return total


def _laplace_first(base: HeadwayDistribution, s: float) -> float:
    return 1.0 if s == 0 else base.laplace(s)


def service_impatient(
    behavior,
    base: HeadwayDistribution,
    policy: ImpatiencePolicy,
    q: float,
    tol: float = 1e-10,
) -> ImpatientService:
    """Service-time mean and LST with attempt-dependent critical headways.

    ``base`` is the law of T_1; B1 uses its mean.  At q = 0 every driver
    crosses at the first attempt, so E[Y] = E[T_1].  If the series has not
    met ``tol`` after 10^5 terms the result has ``converged=False`` and an
    infinite mean.
    """
    behavior = Behavior.parse(behavior)
    if not q >= 0:
        raise ValueError(f"major-road rate must be non-negative, got {q}")
    if not tol > 0:
        raise ValueError("tol must be positive")
    first = b1_reference(base) if behavior is Behavior.B1 else base
    if q == 0:
        return ImpatientService(first.mean(), lambda s: _laplace_first(first, s), 0, 0.0)

    if behavior is Behavior.B2:
        mean, n, tail, ok = _b2_series_mean(base, policy, q, tol)
        lst = lambda s: 1.0 if s == 0 else _b2_series_lst(base, policy, q, s, MAX_TERMS)
    elif first.is_finite:
        vals = np.array([t for t, _ in first.atoms()])
        ps = np.array([p for _, p in first.atoms()])
        m, n, tail, ok = _b1_series_mean(vals, policy, q, tol)
        mean = math.fsum(ps * m)

        def lst(s, _v=vals, _p=ps):
            if s == 0:
                return 1.0
            return math.fsum(_p * _b1_series_lst(_v, policy, q, s, MAX_TERMS))
    else:
        mean, n, tail, ok = _b3_continuous_mean(base, policy, q, tol)
        lst = functools.partial(_b3_continuous_lst, base, policy, q)
    if not ok:
        return ImpatientService(INF, lst, n, tail, converged=False)
    return ImpatientService(mean, lst, n, tail)


def _b3_continuous_mean(base, policy, q, tol):
    if is_trivial(policy):
        # constant sequence: E[expm1(qT)]/q in closed form
        m1 = base.mgf_minus_one(q)
        return (INF if m1 == INF else m1 / q), 0, 0.0, True
    maps = _MapCache(policy)
    stats = {"n": 0, "tail": 0.0, "ok": True}

    def integrand(t):
        m, n, tail, ok = _b1_series_mean(np.array([t]), policy, q, tol, maps)
        stats["n"] = max(stats["n"], n)
        stats["tail"] = max(stats["tail"], tail)
        stats["ok"] &= ok
        return float(base.pdf(t)) * float(m[0])

    lo, hi = base.support()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        val, err = integrate.quad(integrand, lo, hi, limit=400, epsrel=1e-8, epsabs=0.0)
    if not math.isfinite(val):
        return INF, stats["n"], INF, True
    return val, stats["n"], stats["tail"] + err, stats["ok"]


def _b3_continuous_lst(base, policy, q, s):
    if s == 0:
        return 1.0
    maps = _MapCache(policy)
    trivial = is_trivial(policy)
    u = s + q

    def integrand(t):
        w = float(base.pdf(t))
        if w == 0.0:
            return 0.0
        if trivial:
            e = math.exp(-u * t)
            return w * u * e / (s + q * e)
        return w * float(_b1_series_lst(np.array([t]), policy, q, s, MAX_TERMS, maps)[0])

    lo, hi = base.support()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        val, _ = integrate.quad(integrand, lo, hi, limit=400, epsrel=1e-10, epsabs=1e-14)
    return val


def capacity_impatient(behavior, base, policy, q, tol: float = 1e-10) -> float:
    """1/E[Y] under impatience, in vehicles per second; 0 on divergence."""
    return service_impatient(behavior, base, policy, q, tol).capacity
