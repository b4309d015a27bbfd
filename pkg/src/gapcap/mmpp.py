"""Minor-road capacity under Markov-modulated ("platooned") major traffic.

The saturated minor road is analysed over regenerative cycles that end when
a crossing completes while the background chain is in the reference state
(state index 0 here).  Critical headways T_n are replaced by Erlang(k_n)
phases, which turns the cycle into a Markov chain; the mean number of
crossings per cycle ``h`` and the mean cycle length ``tau`` solve linear
systems sharing one matrix, and capacity = h_10 / tau_10.
"""

from __future__ import annotations

import math
import warnings
from collections import deque
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import numerics
from .distributions import HeadwayDistribution
from .numerics import DenseSystem
from .poisson_core import Behavior, b1_reference, service

INF = math.inf
VEH_H = 3600.0

# systems up to this size go through the dense LU; larger ones use SuperLU
DENSE_LIMIT = 1200


class MmppError(ValueError):
    pass


class UnsupportedLawError(MmppError):
    """Continuous headway laws have no finite phase representation."""


class CapacityWarning(UserWarning):
    pass


@dataclass(frozen=True)
class MmppSpec:
    """Background generator ``M`` and per-state major-road rates ``q`` (per s)."""

    M: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        M = np.array(self.M, dtype=float)
        q = np.array(self.q, dtype=float).ravel()
        d = q.size
        if M.shape != (d, d) or d < 1:
            raise MmppError(f"generator must be {d}x{d}, got shape {M.shape}")
        if np.any(q < 0) or not np.all(np.isfinite(q)):
            raise MmppError("arrival rates must be finite and non-negative")
        off = M - np.diag(np.diag(M))
        if np.any(off < 0):
            raise MmppError("off-diagonal transition rates must be non-negative")
        scale = max(1.0, float(np.max(np.abs(M))))
        if np.any(np.abs(M.sum(axis=1)) > 1e-12 * scale):
            raise MmppError("generator rows must sum to zero")
        if not _irreducible(off > 0):
            raise MmppError("background chain is not irreducible")
        M.setflags(write=False)
        q.setflags(write=False)
        object.__setattr__(self, "M", M)
        object.__setattr__(self, "q", q)

    @property
    def d(self) -> int:
        return self.q.size

    @property
    def mu(self) -> np.ndarray:
        """Total leaving rate of each state."""
        return -np.diag(self.M)

    @classmethod
    def poisson(cls, q: float) -> "MmppSpec":
        return cls(np.zeros((1, 1)), [q])

    @classmethod
    def from_rates(cls, transitions, q) -> "MmppSpec":
        """Build from off-diagonal rates; the diagonal is filled in."""
        M = np.array(transitions, dtype=float)
        np.fill_diagonal(M, 0.0)
        np.fill_diagonal(M, -M.sum(axis=1))
        return cls(M, q)

    @classmethod
    def two_state(cls, q1: float, q2: float, mu1: float, mu2: float) -> "MmppSpec":
        """State 1 is left at rate mu1, state 2 at rate mu2."""
        return cls([[-mu1, mu1], [mu2, -mu2]], [q1, q2])

    def relabel(self, order) -> "MmppSpec":
        order = np.asarray(order)
        return MmppSpec(self.M[np.ix_(order, order)], self.q[order])

    def to_dict(self) -> dict:
        return {"rates_per_s": self.q.tolist(), "transitions_per_s": self.M.tolist()}


def _irreducible(adj: np.ndarray) -> bool:
    d = adj.shape[0]

    def reach(a):
        seen = {0}
        todo = deque([0])
        while todo:
            i = todo.popleft()
            for j in np.nonzero(a[i])[0]:
                if j not in seen:
                    seen.add(int(j))
                    todo.append(int(j))
        return len(seen) == d

    return reach(adj) and reach(adj.T)


def from_dict(spec: dict) -> MmppSpec:
    """Scenario literal: rates with ``_veh_h``/``_per_s`` suffix and a
    transition matrix (``transitions_per_s`` or ``transitions_per_h``).
    A zero diagonal is filled in from the off-diagonal entries."""
    if "rates_veh_h" in spec:
        q = np.asarray(spec["rates_veh_h"], dtype=float) / VEH_H
    else:
        q = np.asarray(spec["rates_per_s"], dtype=float)
    if "transitions_per_s" in spec:
        M = np.asarray(spec["transitions_per_s"], dtype=float)
    else:
        M = np.asarray(spec["transitions_per_h"], dtype=float) / VEH_H
    if M.shape != (q.size, q.size):
        raise MmppError(f"transition matrix must be {q.size}x{q.size}, got shape {M.shape}")
    if np.all(np.diag(M) == 0):
        return MmppSpec.from_rates(M, q)
    return MmppSpec(M, q)


def stationary(mmpp: MmppSpec) -> np.ndarray:
    """Stationary law pi of the background chain (pi M = 0, sum pi = 1)."""
    d = mmpp.d
    if d == 1:
        return np.ones(1)
    A = mmpp.M.T.copy()
    A[-1, :] = 1.0
    rhs = np.zeros(d)
    rhs[-1] = 1.0
    pi = numerics.solve(DenseSystem(A, rhs)).x[:, 0]
    return np.clip(pi, 0.0, None) / np.sum(np.clip(pi, 0.0, None))


def average_rate(mmpp: MmppSpec) -> float:
    """Long-run major-road rate sum_i pi_i q_i."""
    return float(stationary(mmpp) @ mmpp.q)


# ---------------------------------------------------------------------------
# phase plan and system assembly


@dataclass(frozen=True)
class PhasePlan:
    """Erlang phase counts per headway atom; kappa_n = k_n / T_n."""

    values: tuple[float, ...]
    probs: tuple[float, ...]
    phases: tuple[int, ...]

    def __post_init__(self):
        if len(self.values) != len(self.phases) or len(self.values) != len(self.probs):
            raise MmppError("one phase count per atom is required")
        if any(k < 1 for k in self.phases):
            raise MmppError("phase counts must be >= 1")

    @property
    def kappas(self) -> tuple[float, ...]:
        return tuple(k / t for k, t in zip(self.phases, self.values))

    @property
    def size(self) -> int:
        return sum(self.phases)


def phase_plan(behavior, d: HeadwayDistribution, k) -> PhasePlan:
    """Atoms used by ``behavior`` (B1 collapses the law to its mean)."""
    behavior = Behavior.parse(behavior)
    if not d.is_finite:
        raise UnsupportedLawError(f"{d.kind} headway law is not supported under MMPP traffic")
    atoms = b1_reference(d).atoms() if behavior is Behavior.B1 else d.atoms()
    ks = (k,) * len(atoms) if np.isscalar(k) else tuple(k)
    return PhasePlan(tuple(t for t, _ in atoms), tuple(p for _, p in atoms), tuple(int(x) for x in ks))


def assemble_b1(mmpp: MmppSpec, T: float, k: int) -> DenseSystem:
    """The B1 cycle system A [h, tau] = [b, c], entry by entry.

    Unknown m (1-based) is state i = ceil(m/k) with j = m - (i-1)k - 1
    completed phases.  Contributions are accumulated so that coinciding
    positions (k = 1) add up.
    """
    if k < 1 or not T > 0:
        raise MmppError("need k >= 1 and T > 0")
    d = mmpp.d
    kappa = k / T
    mu, q, Mx = mmpp.mu, mmpp.q, mmpp.M
    n_unk = d * k
    A = np.eye(n_unk)
    b = np.zeros(n_unk)
    c = np.zeros(n_unk)
    for m in range(1, n_unk + 1):
        i = math.ceil(m / k)
        rho = mu[i - 1] + q[i - 1] + kappa
        restart = (i - 1) * k + 1
        r = m - 1
        if m % k != 0:  # phase advance
            A[r, m] -= kappa / rho
        A[r, restart - 1] -= q[i - 1] / rho
        if m % k == 0 and i >= 2:  # completion outside the reference state
            A[r, restart - 1] -= kappa / rho
        for ell in range(d):
            if ell != i - 1:
                n = (ell - i + 1) * k + m
                A[r, n - 1] -= Mx[i - 1, ell] / rho
        if m % k == 0:
            b[r] = kappa / rho
        c[r] = 1.0 / rho
    return DenseSystem(A, np.column_stack([b, c]))


def assemble(behavior, mmpp: MmppSpec, plan: PhasePlan):
    """Sparse cycle system for any behaviour.

    Unknowns are ordered (atom n, state i, phase j).  The mixtures
    h_i0 = sum_n p_n h^(n)_i0 (and likewise for tau) are substituted into
    the rows, so the matrix stays square of size d * sum(k_n).
    Returns (A, b, c, offsets).
    """
    behavior = Behavior.parse(behavior)
    d = mmpp.d
    mu, q, Mx = mmpp.mu, mmpp.q, mmpp.M
    ks = np.array(plan.phases)
    offsets = np.concatenate([[0], np.cumsum(d * ks)])
    N = int(offsets[-1])
    probs = np.array(plan.probs)
    rows, cols, vals = [], [], []
    b = np.zeros(N)
    c = np.zeros(N)
    resample = behavior is Behavior.B2

    for n, (k, kappa) in enumerate(zip(plan.phases, plan.kappas)):
        j = np.arange(k)
        for i in range(d):
            rho = mu[i] + q[i] + kappa
            base = offsets[n] + i * k
            r = base + j
            c[r] = 1.0 / rho
            rows.append(r)
            cols.append(r)
            vals.append(np.ones(k))
            # phase advance
            rows.append(r[:-1])
            cols.append(r[1:])
            vals.append(np.full(k - 1, -kappa / rho))
            # background transitions keep the phase
            for ell in range(d):
                if ell != i and Mx[i, ell] > 0:
                    rows.append(r)
                    cols.append(offsets[n] + ell * k + j)
                    vals.append(np.full(k, -Mx[i, ell] / rho))
            # major-road arrival: the attempt fails and starts over
            if q[i] > 0:
                if resample:
                    for m in range(len(probs)):
                        rows.append(r)
                        cols.append(np.full(k, offsets[m] + i * plan.phases[m]))
                        vals.append(np.full(k, -q[i] * probs[m] / rho))
                else:
                    rows.append(r)
                    cols.append(np.full(k, base))
                    vals.append(np.full(k, -q[i] / rho))
            # last phase: the crossing completes
            last = base + k - 1
            b[last] = kappa / rho
            if i != 0:
                for m in range(len(probs)):
                    rows.append(np.array([last]))
                    cols.append(np.array([offsets[m] + i * plan.phases[m]]))
                    vals.append(np.array([-kappa * probs[m] / rho]))
    A = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(N, N)
    )
    return A, b, c, offsets


@dataclass(frozen=True)
class CycleQuantities:
    h: np.ndarray
    tau: np.ndarray
    h10: float
    tau10: float
    residual: float

    @property
    def capacity(self) -> float:
        return self.h10 / self.tau10


def cycle_quantities(behavior, mmpp: MmppSpec, plan: PhasePlan) -> CycleQuantities:
    A, b, c, offsets = assemble(behavior, mmpp, plan)
    rhs = np.column_stack([b, c])
    if A.shape[0] <= DENSE_LIMIT:
        sol = numerics.solve(DenseSystem(A.toarray(), rhs))
    else:
        sol = numerics.solve_sparse(A, rhs)
    h, tau = sol.x[:, 0], sol.x[:, 1]
    starts = offsets[:-1].astype(int)  # (atom n, state 0, phase 0)
    p = np.array(plan.probs)
    return CycleQuantities(h, tau, float(p @ h[starts]), float(p @ tau[starts]), sol.max_residual)


# ---------------------------------------------------------------------------
# capacity


@dataclass
class CapacityResult:
    """Capacity in vehicles per second plus numerical diagnostics."""

    value: float
    phases: tuple[int, ...] = ()
    gap: float = 0.0  # relative change at the last refinement
    residual: float = 0.0
    converged: bool = True
    history: list = field(default_factory=list)  # (k, raw, extrapolated, gap)
    warnings: list = field(default_factory=list)

    @property
    def veh_h(self) -> float:
        return self.value * VEH_H

    @property
    def flag(self) -> str:
        if self.value == 0.0:
            return "zero"
        return "ok" if self.converged else "unconverged"


def capacity_mmpp(
    behavior,
    mmpp: MmppSpec,
    law: HeadwayDistribution,
    k0: int = 64,
    tol: float = 1e-4,
    k_max: int = 4096,
    extrapolate: bool = True,
    impatience=None,
) -> CapacityResult:
    """h_10 / tau_10 with phase counts doubled from ``k0`` until converged.

    The Erlang error is first order in 1/k, so by default each new level is
    combined with the previous one (Richardson) and convergence is judged on
    the extrapolated sequence.  Stops once the relative gap is below ``tol``
    or when ``k_max`` is reached (then ``converged`` is False).
    """
    from .impatience import is_trivial

    if impatience is not None and not is_trivial(impatience):
        raise MmppError("impatience is not supported together with MMPP major traffic")
    behavior = Behavior.parse(behavior)
    if average_rate(mmpp) <= 0:
        raise MmppError("MMPP must have a positive average rate")
    if k0 < 1:
        raise MmppError("k0 must be >= 1")
    phase_plan(behavior, law, k0)  # rejects continuous laws up front

    history = []
    raw_prev = ext_prev = None
    k = k0
    gap = INF
    residual = 0.0
    value = INF
    while True:
        plan = phase_plan(behavior, law, k)
        cq = cycle_quantities(behavior, mmpp, plan)
        residual = max(residual, cq.residual)
        raw = cq.capacity
        ext = 2.0 * raw - raw_prev if (extrapolate and raw_prev is not None) else None
        if extrapolate:
            if ext is not None and ext_prev is not None:
                gap = abs(ext - ext_prev) / abs(ext)
            value = ext if ext is not None else raw
        else:
            if raw_prev is not None:
                gap = abs(raw - raw_prev) / abs(raw)
            value = raw
        history.append((k, raw, ext, gap))
        if gap < tol or 2 * k > k_max:
            break
        raw_prev, ext_prev = raw, ext
        k *= 2
    res = CapacityResult(value, plan.phases, gap, residual, gap < tol, history)
    if not res.converged:
        msg = f"phase refinement stopped at k={k} with relative gap {gap:.2e} > tol {tol:.1e}"
        res.warnings.append(msg)
        warnings.warn(msg, CapacityWarning, stacklevel=2)
    return res


def state_service_means(behavior, mmpp: MmppSpec, law: HeadwayDistribution) -> np.ndarray:
    """E[S_i]: mean service time under Poisson traffic at each state's rate."""
    return np.array([service(behavior, law, float(qi)).mean for qi in mmpp.q])


def naive_capacity(mmpp: MmppSpec, mean_service_times, variant: int) -> float:
    """The two state-averaging shortcuts, in vehicles per second.

    variant 1: sum_i pi_i / E[S_i];  variant 2: 1 / sum_i pi_i E[S_i].
    Both ignore that the head-of-queue driver does not see the background
    chain in equilibrium.
    """
    pi = stationary(mmpp)
    S = np.asarray(mean_service_times, dtype=float)
    if S.shape != pi.shape:
        raise MmppError(f"need {pi.size} mean service times, got {S.size}")
    infinite = ~np.isfinite(S)
    if variant == 1:
        if infinite.any():
            warnings.warn("infinite mean service time: state dropped from the sum", CapacityWarning, stacklevel=2)
        return float(np.sum(pi[~infinite] / S[~infinite]))
    if variant == 2:
        if infinite.any():
            warnings.warn("infinite mean service time: capacity is 0", CapacityWarning, stacklevel=2)
            return 0.0
        return float(1.0 / np.sum(pi * S))
    raise ValueError(f"variant must be 1 or 2, got {variant}")
