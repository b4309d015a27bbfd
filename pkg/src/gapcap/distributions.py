"""Critical-headway laws and the transforms the capacity formulas consume.

All times are seconds and all rates are per second.  Divergent transforms
(an mgf beyond the abscissa of convergence) are returned as ``math.inf``;
that is a legitimate answer, not an error.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import special

INF = math.inf

# probabilities must sum to one within this tolerance
PROB_TOL = 1e-12


class DistributionError(ValueError):
    """Invalid headway law parameters."""


class HeadwayDistribution:
    """Base class for the four critical-headway kinds (plus shifted wrappers).

    Subclasses implement the raw transforms; the module-level functions
    (:func:`mean`, :func:`laplace`, ...) validate arguments and delegate.
    """

    kind: str = "abstract"

    # -- moments -------------------------------------------------------
    def mean(self) -> float:
        return self.raw_moment(1)

    def raw_moment(self, n: int) -> float:
        raise NotImplementedError

    # -- transforms ----------------------------------------------------
    def laplace(self, s: float) -> float:
        """E[exp(-sT)] for s >= 0."""
        raise NotImplementedError

    def one_minus_laplace(self, s: float) -> float:
        """1 - E[exp(-sT)], without cancellation for small s."""
        return 1.0 - self.laplace(s)

    def mgf(self, q: float) -> float:
        """E[exp(qT)] for q >= 0; ``inf`` when it diverges."""
        raise NotImplementedError

    def mgf_minus_one(self, q: float) -> float:
        """E[exp(qT)] - 1, without cancellation for small q."""
        m = self.mgf(q)
        return m - 1.0

    def tilted(self, s: float) -> float:
        """E[T exp(-sT)] for any real s (negative s probes the mgf side)."""
        raise NotImplementedError

    # -- misc ----------------------------------------------------------
    @property
    def is_finite(self) -> bool:
        """True when the law has finitely many atoms."""
        return False

    @property
    def is_degenerate(self) -> bool:
        return False

    def atoms(self) -> tuple[tuple[float, float], ...]:
        raise DistributionError(f"{self.kind} law has no atoms")

    def pdf(self, t):
        raise DistributionError(f"{self.kind} law has no density")

    def support(self) -> tuple[float, float]:
        raise NotImplementedError

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        raise NotImplementedError

    def to_dict(self) -> dict:
        raise NotImplementedError


def _exprel(x: float) -> float:
    """(exp(x) - 1) / x, with the x -> 0 limit."""
    if x == 0.0:
        return 1.0
    return math.expm1(x) / x


@dataclass(frozen=True)
class Deterministic(HeadwayDistribution):
    T: float
    kind = "deterministic"

    def __post_init__(self):
        if not (self.T > 0 and math.isfinite(self.T)):
            raise DistributionError(f"deterministic headway must be positive, got {self.T}")

    def raw_moment(self, n):
        return self.T**n

    def laplace(self, s):
        return math.exp(-s * self.T)

    def one_minus_laplace(self, s):
        return -math.expm1(-s * self.T)

    def mgf(self, q):
        x = q * self.T
        return math.exp(x) if x < 709.0 else INF

    def mgf_minus_one(self, q):
        x = q * self.T
        return math.expm1(x) if x < 709.0 else INF

    def tilted(self, s):
        x = -s * self.T
        return self.T * math.exp(x) if x < 709.0 else INF

    @property
    def is_finite(self):
        return True

    @property
    def is_degenerate(self):
        return True

    def atoms(self):
        return ((self.T, 1.0),)

    def support(self):
        return (self.T, self.T)

    def sample(self, rng, size):
        return np.full(size, self.T)

    def to_dict(self):
        return {"kind": "deterministic", "T_s": self.T}


@dataclass(frozen=True, init=False)
class Discrete(HeadwayDistribution):
    """Finitely many headway values T_n with probabilities p_n.

    Zero-probability atoms are dropped and repeated values merged, so the
    stored atoms are distinct, positive, and sorted by value.
    """

    values: tuple[float, ...]
    probs: tuple[float, ...]
    kind = "discrete"

    def __init__(self, atoms: Sequence[tuple[float, float]]):
        merged: dict[float, float] = {}
        for i, (t, p) in enumerate(atoms):
            t, p = float(t), float(p)
            if not math.isfinite(t) or t <= 0:
                raise DistributionError(f"atom {i}: headway must be positive, got {t}")
            if not math.isfinite(p) or p < 0:
                raise DistributionError(f"atom {i}: probability must be non-negative, got {p}")
            if p == 0.0:
                continue
            merged[t] = merged.get(t, 0.0) + p
        if not merged:
            raise DistributionError("discrete law needs at least one atom with positive mass")
        total = math.fsum(merged.values())
        if abs(total - 1.0) > PROB_TOL:
            raise DistributionError(f"atom probabilities sum to {total!r}, not 1")
        items = sorted(merged.items())
        object.__setattr__(self, "values", tuple(t for t, _ in items))
        object.__setattr__(self, "probs", tuple(p for _, p in items))

    def __repr__(self):
        return f"Discrete({list(zip(self.values, self.probs))})"

    def _sum(self, f) -> float:
        return math.fsum(p * f(t) for t, p in zip(self.values, self.probs))

    def raw_moment(self, n):
        return self._sum(lambda t: t**n)

    def laplace(self, s):
        return self._sum(lambda t: math.exp(-s * t))

    def one_minus_laplace(self, s):
        return self._sum(lambda t: -math.expm1(-s * t))

    def mgf(self, q):
        if q * self.values[-1] >= 709.0:
            return INF
        return self._sum(lambda t: math.exp(q * t))

    def mgf_minus_one(self, q):
        if q * self.values[-1] >= 709.0:
            return INF
        return self._sum(lambda t: math.expm1(q * t))

    def tilted(self, s):
        if -s * self.values[-1] >= 709.0:
            return INF
        return self._sum(lambda t: t * math.exp(-s * t))

    @property
    def is_finite(self):
        return True

    @property
    def is_degenerate(self):
        return len(self.values) == 1

    def atoms(self):
        return tuple(zip(self.values, self.probs))

    def support(self):
        return (self.values[0], self.values[-1])

    def sample(self, rng, size):
        idx = rng.choice(len(self.values), size=size, p=np.asarray(self.probs))
        return np.asarray(self.values)[idx]

    def to_dict(self):
        return {"kind": "discrete", "atoms": [[t, p] for t, p in self.atoms()]}


@dataclass(frozen=True)
class Gamma(HeadwayDistribution):
    """Gamma(shape, rate); density rate^k t^(k-1) e^(-rate t) / Gamma(k)."""

    shape: float
    rate: float
    kind = "gamma"

    def __post_init__(self):
        if not (self.shape > 0 and math.isfinite(self.shape)):
            raise DistributionError(f"gamma shape must be positive, got {self.shape}")
        if not (self.rate > 0 and math.isfinite(self.rate)):
            raise DistributionError(f"gamma rate must be positive, got {self.rate}")

    def raw_moment(self, n):
        # Gamma(k+n) / (Gamma(k) rate^n)
        return float(special.poch(self.shape, n)) / self.rate**n

    def laplace(self, s):
        return math.exp(-self.shape * math.log1p(s / self.rate))

    def one_minus_laplace(self, s):
        return -math.expm1(-self.shape * math.log1p(s / self.rate))

    def mgf(self, q):
        if q >= self.rate:
            return INF
        return math.exp(-self.shape * math.log1p(-q / self.rate))

    def mgf_minus_one(self, q):
        if q >= self.rate:
            return INF
        return math.expm1(-self.shape * math.log1p(-q / self.rate))

    def tilted(self, s):
        if s <= -self.rate:
            return INF
        k, r = self.shape, self.rate
        return (k / r) * math.exp(-(k + 1.0) * math.log1p(s / r))

    def pdf(self, t):
        t = np.asarray(t, dtype=float)
        k, r = self.shape, self.rate
        with np.errstate(divide="ignore"):
            logp = k * math.log(r) + (k - 1.0) * np.log(t) - r * t - special.gammaln(k)
        return np.where(t > 0, np.exp(logp), 0.0)

    def support(self):
        return (0.0, INF)

    def sample(self, rng, size):
        return rng.gamma(self.shape, 1.0 / self.rate, size=size)

    def to_dict(self):
        return {"kind": "gamma", "shape": self.shape, "rate_per_s": self.rate}


@dataclass(frozen=True)
class Exponential(Gamma):
    """Exponential critical headway with rate ``alpha`` (mean 1/alpha)."""

    kind = "exponential"

    def __init__(self, alpha: float):
        if not (alpha > 0 and math.isfinite(alpha)):
            raise DistributionError(f"exponential rate must be positive, got {alpha}")
        object.__setattr__(self, "shape", 1.0)
        object.__setattr__(self, "rate", float(alpha))

    @property
    def alpha(self) -> float:
        return self.rate

    def __repr__(self):
        return f"Exponential(alpha={self.rate!r})"

    def laplace(self, s):
        return self.rate / (self.rate + s)

    def one_minus_laplace(self, s):
        return s / (self.rate + s)

    def mgf(self, q):
        if q >= self.rate:
            return INF
        return self.rate / (self.rate - q)

    def mgf_minus_one(self, q):
        if q >= self.rate:
            return INF
        return q / (self.rate - q)

    def tilted(self, s):
        if s <= -self.rate:
            return INF
        return self.rate / (self.rate + s) ** 2

    def sample(self, rng, size):
        return rng.exponential(1.0 / self.rate, size=size)

    def to_dict(self):
        return {"kind": "exponential", "alpha_per_s": self.rate}


@dataclass(frozen=True)
class Shifted(HeadwayDistribution):
    """Law of ``scale * X + shift`` for a continuous base law X."""

    base: HeadwayDistribution
    scale: float
    shift: float
    kind = "shifted"

    def __post_init__(self):
        if not self.scale > 0:
            raise DistributionError(f"scale must be positive, got {self.scale}")
        if self.shift < 0:
            raise DistributionError(f"shifted law would put mass at or below 0 (shift={self.shift})")

    def raw_moment(self, n):
        a, b = self.scale, self.shift
        return math.fsum(
            math.comb(n, i) * a**i * self.base.raw_moment(i) * b ** (n - i) if i else b**n
            for i in range(n + 1)
        )

    def laplace(self, s):
        return math.exp(-s * self.shift) * self.base.laplace(self.scale * s)

    def one_minus_laplace(self, s):
        e = math.exp(-s * self.shift)
        return -math.expm1(-s * self.shift) + e * self.base.one_minus_laplace(self.scale * s)

    def mgf(self, q):
        m = self.base.mgf(self.scale * q)
        return INF if m == INF else math.exp(q * self.shift) * m

    def mgf_minus_one(self, q):
        m1 = self.base.mgf_minus_one(self.scale * q)
        if m1 == INF:
            return INF
        return math.expm1(q * self.shift) + math.exp(q * self.shift) * m1

    def tilted(self, s):
        a, b = self.scale, self.shift
        t = self.base.tilted(a * s)
        if t == INF:
            return INF
        return math.exp(-s * b) * (a * t + b * self.base.laplace(a * s))

    def pdf(self, t):
        t = np.asarray(t, dtype=float)
        return self.base.pdf((t - self.shift) / self.scale) / self.scale

    def support(self):
        lo, hi = self.base.support()
        return (self.scale * lo + self.shift, self.scale * hi + self.shift)

    def sample(self, rng, size):
        return self.scale * self.base.sample(rng, size) + self.shift

    def to_dict(self):
        return {"kind": "shifted", "base": self.base.to_dict(), "scale": self.scale, "shift_s": self.shift}


# ---------------------------------------------------------------------------
# functional interface


def _check_rate(x: float, name: str) -> None:
    if not x >= 0:
        raise ValueError(f"{name} must be non-negative, got {x}")


def mean(d: HeadwayDistribution) -> float:
    return d.mean()


def second_moment(d: HeadwayDistribution) -> float:
    return d.raw_moment(2)


def laplace(d: HeadwayDistribution, s: float) -> float:
    """E[exp(-sT)]; equals 1 at s = 0."""
    _check_rate(s, "s")
    if s == 0:
        return 1.0
    return d.laplace(s)


def mgf(d: HeadwayDistribution, q: float) -> float:
    """E[exp(qT)], or ``inf`` past the abscissa of convergence."""
    _check_rate(q, "q")
    if q == 0:
        return 1.0
    return d.mgf(q)


def tilted_mean(d: HeadwayDistribution, q: float) -> float:
    """E[T exp(-qT)], i.e. minus the derivative of the Laplace transform at q."""
    _check_rate(q, "q")
    return d.tilted(q)


def affine_push(d: HeadwayDistribution, a: float, b: float) -> HeadwayDistribution:
    """Law of ``a*T + b``.

    Finite laws are mapped atom by atom; continuous laws are wrapped in
    :class:`Shifted`.  Raises :class:`DistributionError` if the image would
    put mass at or below zero.
    """
    if not a > 0:
        raise DistributionError(f"scale factor must be positive, got {a}")
    if a == 1.0 and b == 0.0:
        return d
    if isinstance(d, Deterministic):
        return Deterministic(a * d.T + b)
    if isinstance(d, Discrete):
        return Discrete([(a * t + b, p) for t, p in d.atoms()])
    if isinstance(d, Shifted):
        return Shifted(d.base, a * d.scale, a * d.shift + b)
    return Shifted(d, a, b)


def from_dict(spec: dict) -> HeadwayDistribution:
    """Build a law from its scenario-file literal."""
    kind = spec.get("kind")
    if kind == "deterministic":
        return Deterministic(float(spec["T_s"]))
    if kind == "discrete":
        return Discrete([(float(t), float(p)) for t, p in spec["atoms"]])
    if kind == "exponential":
        if "alpha_per_s" in spec:
            return Exponential(float(spec["alpha_per_s"]))
        return Exponential(1.0 / float(spec["mean_s"]))
    if kind == "gamma":
        return Gamma(float(spec["shape"]), float(spec["rate_per_s"]))
    if kind == "shifted":
        return Shifted(from_dict(spec["base"]), float(spec["scale"]), float(spec["shift_s"]))
    raise DistributionError(f"unknown headway kind {kind!r}")
