"""Discrete-event Monte Carlo oracle for the analytic capacities and queues.

Streams: replication r draws from ``Philox(SeedSequence(seed, spawn_key=(r, role)))``
with one role per source of randomness (major-road arrivals, critical
headways, minor-road arrivals).  A replication's numbers therefore do not
depend on how many replications run, in which order, or in which process.

Service semantics: the head-of-queue driver starts attempt 1 at the
previous departure epoch (or its own arrival, if later).  Attempt j accepts
iff the time to the next major-road arrival exceeds T_j; the crossing then
completes T_j later.  A rejected attempt ends at that major-road arrival
and the next attempt starts there.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .distributions import HeadwayDistribution
from .impatience import ImpatiencePolicy, NoImpatience, _MapCache
from .mmpp import MmppSpec, stationary
from .poisson_core import Behavior, b1_reference

WARMUP_FRACTION = 0.01
MIN_EVENTS = 100
CONFIDENCE = 0.99
ROLE_MAJOR, ROLE_HEADWAY, ROLE_MINOR = 0, 1, 2

# a driver still waiting after this many attempts makes the run divergent
MAX_ATTEMPTS = 1_000_000


class SimulationError(ValueError):
    pass


@dataclass(frozen=True)
class SimConfig:
    """One simulation scenario.

    ``arrivals`` is a major-road rate per second (Poisson), an MmppSpec, or
    a tuple of those for independent lanes merged into one stream.  Without
    ``lam`` the minor road is saturated.  ``horizon`` counts
    crossings (saturated) or minor-road arrivals (queue) per replication;
    ``horizon_s`` switches to a simulated-time horizon instead.
    """

    arrivals: float | MmppSpec | tuple
    behavior: Behavior | str
    law: HeadwayDistribution
    policy: ImpatiencePolicy = field(default_factory=NoImpatience)
    lam: float | None = None
    horizon: int = 100_000
    horizon_s: float | None = None
    replications: int = 10
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "behavior", Behavior.parse(self.behavior))
        if self.replications < 1:
            raise SimulationError("replications must be >= 1")
        if self.horizon_s is None:
            if self.horizon < MIN_EVENTS:
                raise SimulationError(
                    f"horizon of {self.horizon} events is too short to pass the warm-up (need >= {MIN_EVENTS})"
                )
        elif not self.horizon_s > 0:
            raise SimulationError("horizon_s must be positive")
        lanes = self.arrivals if isinstance(self.arrivals, (tuple, list)) else (self.arrivals,)
        if isinstance(self.arrivals, list):
            object.__setattr__(self, "arrivals", tuple(self.arrivals))
        if not lanes:
            raise SimulationError("at least one major-road lane is required")
        for lane in lanes:
            if not isinstance(lane, MmppSpec) and not lane >= 0:
                raise SimulationError("major-road rate must be non-negative")
        if self.lam is not None and not self.lam > 0:
            raise SimulationError("minor-road rate must be positive")

    @property
    def saturated(self) -> bool:
        return self.lam is None

    def streams(self, rep: int) -> tuple[np.random.Generator, ...]:
        return tuple(
            np.random.Generator(np.random.Philox(np.random.SeedSequence(self.seed, spawn_key=(rep, role))))
            for role in (ROLE_MAJOR, ROLE_HEADWAY, ROLE_MINOR)
        )

    def lane_stream(self, rep: int, lane: int) -> np.random.Generator:
        """Major-road stream of one lane when several are merged."""
        ss = np.random.SeedSequence(self.seed, spawn_key=(rep, ROLE_MAJOR, lane))
        return np.random.Generator(np.random.Philox(ss))

    @property
    def plain_poisson(self) -> bool:
        return not isinstance(self.arrivals, (MmppSpec, tuple))


@dataclass(frozen=True)
class SimEstimate:
    value: float
    stderr: float
    ci: tuple[float, float]
    events: int
    per_replication: tuple[float, ...]
    diverged: bool = False

    def contains(self, x: float) -> bool:
        return self.ci[0] <= x <= self.ci[1]

    def scaled(self, factor: float) -> "SimEstimate":
        return SimEstimate(
            self.value * factor,
            self.stderr * factor,
            (self.ci[0] * factor, self.ci[1] * factor),
            self.events,
            tuple(v * factor for v in self.per_replication),
            self.diverged,
        )


def pool(values, events: int = 0, diverged: bool = False) -> SimEstimate:
    """Mean and t-based 99% interval over replications.

    A single replication gives an unbounded interval.  Summation is exact
    (fsum), so the pooled value does not depend on replication order.
    """
    v = np.asarray(values, dtype=float)
    n = v.size
    mean = math.fsum(v) / n
    if n < 2 or not np.all(np.isfinite(v)):
        return SimEstimate(mean, math.inf, (-math.inf, math.inf), events, tuple(v.tolist()), diverged)
    sd = math.sqrt(math.fsum((v - mean) ** 2) / (n - 1))
    se = sd / math.sqrt(n)
    half = float(stats.t.ppf(0.5 + CONFIDENCE / 2, n - 1)) * se
    return SimEstimate(mean, se, (mean - half, mean + half), events, tuple(v.tolist()), diverged)


# ---------------------------------------------------------------------------
# critical-headway draws


class _Headways:
    """T_j for a batch of drivers under one behaviour and policy."""

    def __init__(self, behavior: Behavior, law: HeadwayDistribution, policy: ImpatiencePolicy, rng):
        self.behavior = behavior
        self.law = law
        self.rng = rng
        self.maps = _MapCache(policy)
        self.fixed = b1_reference(law).T if behavior is Behavior.B1 else None

    def first(self, n: int) -> np.ndarray:
        """Per-driver T_1 (B2 ignores it and redraws every attempt)."""
        if self.behavior is Behavior.B1:
            return np.full(n, self.fixed)
        if self.behavior is Behavior.B3:
            return self.law.sample(self.rng, n)
        return np.zeros(n)

    def attempt(self, j: int, T1: np.ndarray) -> np.ndarray:
        a, b = self.maps.get(j)
        if self.behavior is Behavior.B2:
            T1 = self.law.sample(self.rng, T1.size)
        if a == 1.0 and b == 0.0:
            return np.asarray(T1, dtype=float)
        return a * T1 + b


# ---------------------------------------------------------------------------
# Poisson major road: service times are i.i.d.


def _poisson_service_times(n: int, q: float, heads: _Headways, rng) -> tuple[np.ndarray, int, bool]:
    """n i.i.d. service times under Poisson(q) traffic, simulated attempt by attempt.

    Each round hands every still-waiting driver a fresh exponential gap
    (memoryless residual).  Returns (Y, attempts, diverged).
    """
    T1 = heads.first(n)
    Y = np.zeros(n)
    active = np.arange(n)
    attempts = 0
    j = 1
    while active.size:
        if j > MAX_ATTEMPTS:
            Y[active] = math.inf
            return Y, attempts, True
        Tj = heads.attempt(j, T1[active])
        attempts += active.size
        if q == 0:
            Y[active] += Tj
            break
        gap = rng.exponential(1.0 / q, active.size)
        ok = gap > Tj
        Y[active[ok]] += Tj[ok]
        Y[active[~ok]] += gap[~ok]
        active = active[~ok]
        j += 1
    return Y, attempts, False


# ---------------------------------------------------------------------------
# explicit major-road stream (any MMPP, including d = 1)


class MajorStream:
    """Arrival epochs of an MMPP, generated window by window.

    A window is cut at a fixed end time; the background state carries over
    and the interrupted sojourn restarts, which is exact for exponential
    sojourns.  ``occupancy`` accumulates time spent in each state.
    """

    def __init__(self, mmpp: MmppSpec, rng: np.random.Generator, target: int = 1 << 16):
        self.mmpp = mmpp
        self.rng = rng
        self.mu = mmpp.mu
        self.q = mmpp.q
        d = mmpp.d
        jump = np.where(self.mu[:, None] > 0, mmpp.M / np.where(self.mu > 0, self.mu, 1.0)[:, None], 0.0)
        np.fill_diagonal(jump, 0.0)
        self.cum = np.cumsum(jump, axis=1)
        rate = float(stationary(mmpp) @ self.q)
        self.window = target / rate if rate > 0 else 1e6
        self.state = int(rng.choice(d, p=stationary(mmpp))) if d > 1 else 0
        self.clock = 0.0
        self.occupancy = np.zeros(d)
        self.times: list[float] = []
        self.pos = 0
        self.base = 0  # arrivals dropped from the front of ``times``

    def _extend(self):
        rng = self.rng
        end = self.clock + self.window
        starts, lengths, states = [], [], []
        t, s = self.clock, self.state
        while t < end:
            if self.mu[s] > 0:
                stay = rng.exponential(1.0 / self.mu[s])
            else:
                stay = math.inf
            stop = min(t + stay, end)
            starts.append(t)
            lengths.append(stop - t)
            states.append(s)
            if stop < end:
                s = int(np.searchsorted(self.cum[s], rng.random() * self.cum[s, -1], side="right"))
            t = stop
        starts = np.array(starts)
        lengths = np.array(lengths)
        states = np.array(states)
        np.add.at(self.occupancy, states, lengths)
        counts = rng.poisson(self.q[states] * lengths)
        new = np.repeat(starts, counts) + rng.random(counts.sum()) * np.repeat(lengths, counts)
        new.sort()
        # keep only the unread tail to bound memory
        self.base += self.pos
        self.times = self.times[self.pos :] + new.tolist()
        self.pos = 0
        self.clock, self.state = end, s

    def next_after(self, t: float) -> float:
        """First arrival epoch strictly after t."""
        while True:
            times, p = self.times, self.pos
            n = len(times)
            while p < n and times[p] <= t:
                p += 1
            self.pos = p
            if p < n:
                return times[p]
            self._extend()

    def consume(self):
        self.pos += 1

    @property
    def count(self) -> int:
        return self.base + self.pos


class MergedStream:
    """Superposition of independent lanes, read as one arrival stream."""

    def __init__(self, streams: list[MajorStream]):
        self.streams = streams

    def next_after(self, t: float) -> float:
        return min(s.next_after(t) for s in self.streams)

    @property
    def count(self) -> int:
        return sum(s.count for s in self.streams)


class _Server:
    """Serves head-of-queue drivers one at a time against a MajorStream."""

    def __init__(self, stream: MajorStream, heads: _Headways, block: int = 4096):
        self.stream = stream
        self.heads = heads
        self.block = block
        self._t1: list[float] = []
        self._i = 0
        self.attempts = 0
        self.diverged = False
        b2 = heads.behavior is Behavior.B2
        self._fresh: list[float] = []
        self._k = 0
        self._b2 = b2

    def _next_t1(self) -> float:
        if self._i >= len(self._t1):
            self._t1 = self.heads.first(self.block).tolist()
            self._i = 0
        self._i += 1
        return self._t1[self._i - 1]

    def _next_fresh(self) -> float:
        if self._k >= len(self._fresh):
            self._fresh = self.heads.law.sample(self.heads.rng, self.block).tolist()
            self._k = 0
        self._k += 1
        return self._fresh[self._k - 1]

    def serve(self, t: float) -> float:
        """Departure epoch of a driver who reaches the stop line at t."""
        maps = self.heads.maps
        stream = self.stream
        T1 = self._next_t1()
        j = 1
        while True:
            a, b = maps.get(j)
            base = self._next_fresh() if self._b2 else T1
            T = a * base + b
            nxt = stream.next_after(t)
            self.attempts += 1
            if nxt - t > T:
                return t + T
            t = nxt
            j += 1
            if j > MAX_ATTEMPTS:
                self.diverged = True
                return math.inf


def _as_mmpp(arrivals) -> MmppSpec:
    return arrivals if isinstance(arrivals, MmppSpec) else MmppSpec.poisson(float(arrivals))


def _major_stream(cfg: SimConfig, rep: int, rng):
    if isinstance(cfg.arrivals, tuple):
        return MergedStream([MajorStream(_as_mmpp(a), cfg.lane_stream(rep, i)) for i, a in enumerate(cfg.arrivals)])
    return MajorStream(_as_mmpp(cfg.arrivals), rng)


# ---------------------------------------------------------------------------
# saturated capacity


@dataclass(frozen=True)
class _Rep:
    value: float
    events: int
    diverged: bool
    extra: dict


def _capacity_rep(cfg: SimConfig, rep: int) -> _Rep:
    r_major, r_head, _ = cfg.streams(rep)
    heads = _Headways(cfg.behavior, cfg.law, cfg.policy, r_head)
    if cfg.plain_poisson:
        return _poisson_capacity_rep(cfg, heads, r_major)
    stream = _major_stream(cfg, rep, r_major)
    server = _Server(stream, heads)
    t = 0.0
    deps = []
    if cfg.horizon_s is None:
        for _ in range(cfg.horizon):
            t = server.serve(t)
            if server.diverged:
                break
            deps.append(t)
    else:
        while t < cfg.horizon_s:
            t = server.serve(t)
            if server.diverged:
                break
            deps.append(t)
    # arrivals read so far all fall before the last departure
    extra = {"major_arrivals": stream.count, "elapsed_s": t}
    if isinstance(stream, MajorStream):
        extra["occupancy"] = (stream.occupancy / stream.clock).tolist()
    if server.diverged:
        return _Rep(0.0, server.attempts, True, extra)
    return _Rep(_rate_after_warmup(np.array(deps), cfg), server.attempts + len(deps), False, extra)


def _poisson_capacity_rep(cfg: SimConfig, heads: _Headways, rng) -> _Rep:
    q = float(cfg.arrivals)
    if cfg.horizon_s is None:
        Y, attempts, div = _poisson_service_times(cfg.horizon, q, heads, rng)
    else:
        parts, attempts, div, total = [], 0, False, 0.0
        while total < cfg.horizon_s and not div:
            y, a, div = _poisson_service_times(4096, q, heads, rng)
            parts.append(y)
            attempts += a
            total += math.fsum(y)
        Y = np.concatenate(parts)
    if div:
        return _Rep(0.0, attempts, True, {})
    return _Rep(_rate_after_warmup(np.cumsum(Y), cfg), attempts + Y.size, False, {})


def _rate_after_warmup(deps: np.ndarray, cfg: SimConfig) -> float:
    """Departures per second after discarding the first 1%."""
    if cfg.horizon_s is None:
        w = max(1, int(WARMUP_FRACTION * deps.size))
        return (deps.size - w) / (deps[-1] - deps[w - 1])
    t0 = WARMUP_FRACTION * cfg.horizon_s
    inside = np.count_nonzero((deps > t0) & (deps <= cfg.horizon_s))
    if inside == 0:
        raise SimulationError("no crossing completed after the warm-up; increase horizon_s")
    return inside / (cfg.horizon_s - t0)


def _run(fn, cfg: SimConfig, workers: int):
    reps = range(cfg.replications)
    if workers > 1 and cfg.replications > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            return list(ex.map(fn, [cfg] * cfg.replications, reps))
    return [fn(cfg, r) for r in reps]


def _write_jsonl(path, kind: str, cfg: SimConfig, reps):
    with open(path, "a", encoding="utf-8") as fh:
        for i, r in enumerate(reps):
            row = {"kind": kind, "replication": i, "seed": cfg.seed, "events": r.events, "diverged": r.diverged}
            row.update(r.extra)
            row["value"] = r.value if not isinstance(r.value, tuple) else list(r.value)
            fh.write(json.dumps(row) + "\n")


def simulate_capacity(cfg: SimConfig, workers: int = 1, jsonl=None) -> SimEstimate:
    """Saturated departure rate (vehicles per second) with a 99% interval.

    A replication in which some driver exceeds MAX_ATTEMPTS attempts counts
    as capacity 0 and marks the estimate as diverged.
    """
    if not cfg.saturated:
        raise SimulationError("simulate_capacity needs a saturated configuration (lam=None)")
    reps = _run(_capacity_rep, cfg, workers)
    if jsonl is not None:
        _write_jsonl(jsonl, "capacity", cfg, reps)
    return pool([r.value for r in reps], sum(r.events for r in reps), any(r.diverged for r in reps))


def capacity_diagnostics(cfg: SimConfig) -> list[dict]:
    """Per-replication extras (state occupancy and arrival counts for MMPP runs)."""
    return [_capacity_rep(cfg, r).extra for r in range(cfg.replications)]


# ---------------------------------------------------------------------------
# queue with Poisson minor-road arrivals


@dataclass(frozen=True)
class QueueEstimate:
    mean_queue_length: SimEstimate  # vehicles in system, time average
    mean_delay: SimEstimate  # seconds from arrival to departure
    unstable: bool
    backlog: int  # vehicles left in system at the horizon, summed over replications


def _departures(arr: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """FIFO departures D_n = max(A_n, D_{n-1}) + Y_n, vectorized."""
    C = np.cumsum(Y)
    Cprev = np.concatenate([[0.0], C[:-1]])
    return C + np.maximum.accumulate(arr - Cprev)


def _queue_rep(cfg: SimConfig, rep: int) -> _Rep:
    r_major, r_head, r_minor = cfg.streams(rep)
    heads = _Headways(cfg.behavior, cfg.law, cfg.policy, r_head)
    lam = cfg.lam
    n = cfg.horizon if cfg.horizon_s is None else max(MIN_EVENTS, int(lam * cfg.horizon_s * 1.2) + 16)
    arr = np.cumsum(r_minor.exponential(1.0 / lam, n))
    if cfg.horizon_s is not None:
        arr = arr[arr <= cfg.horizon_s]
        n = arr.size
        if n < MIN_EVENTS:
            raise SimulationError("horizon_s admits too few minor-road arrivals")
    if not cfg.plain_poisson:
        server = _Server(_major_stream(cfg, rep, r_major), heads)
        dep = np.empty(n)
        prev = 0.0
        for i in range(n):
            prev = server.serve(max(arr[i], prev))
            dep[i] = prev
        attempts, diverged = server.attempts, server.diverged
    else:
        Y, attempts, diverged = _poisson_service_times(n, float(cfg.arrivals), heads, r_major)
        dep = _departures(arr, Y)
    if diverged or not np.all(np.isfinite(dep)):
        return _Rep((math.inf, math.inf), attempts, True, {"unstable": True, "backlog": n})

    end = arr[-1]
    w = max(1, int(WARMUP_FRACTION * n))
    t0 = arr[w - 1]
    # time-average number in system on [t0, end] by sweeping arrival/departure epochs
    ev_t = np.concatenate([arr, dep])
    ev_d = np.concatenate([np.ones(n), -np.ones(n)])
    order = np.argsort(ev_t, kind="stable")
    ev_t, ev_d = ev_t[order], ev_d[order]
    N = np.cumsum(ev_d)
    seg_lo = np.clip(ev_t[:-1], t0, end)
    seg_hi = np.clip(ev_t[1:], t0, end)
    L = float(np.sum(N[:-1] * (seg_hi - seg_lo))) / (end - t0)
    done = dep[w:] <= end
    W = float(np.mean((dep[w:] - arr[w:])[done])) if done.any() else math.inf
    backlog = int(np.count_nonzero(dep > end))
    unstable = _grows_linearly(arr[w:], dep[w:] - arr[w:], backlog, n)
    return _Rep((L, W), attempts + n, False, {"unstable": unstable, "backlog": backlog})


def _grows_linearly(arr, sojourn, backlog: int, n: int) -> bool:
    """Backlog of more than 1% of arrivals and sojourns that keep rising
    between the second and last quarter of the run."""
    if backlog <= 0.01 * n or sojourn.size < 8:
        return False
    k = sojourn.size // 4
    return float(np.mean(sojourn[-k:])) > 1.5 * float(np.mean(sojourn[k : 2 * k]))


def simulate_queue(cfg: SimConfig, workers: int = 1, jsonl=None) -> QueueEstimate:
    """Mean number in system and mean sojourn of the minor-road queue.

    When any replication looks unstable (linear growth), the estimates are
    reported as infinite and ``unstable`` is set.
    """
    if cfg.saturated:
        raise SimulationError("simulate_queue needs a minor-road rate lam")
    reps = _run(_queue_rep, cfg, workers)
    if jsonl is not None:
        _write_jsonl(jsonl, "queue", cfg, reps)
    events = sum(r.events for r in reps)
    backlog = sum(r.extra["backlog"] for r in reps)
    diverged = any(r.diverged for r in reps)
    if diverged or any(r.extra["unstable"] for r in reps):
        inf = pool([math.inf], events, diverged)
        return QueueEstimate(inf, inf, True, backlog)
    return QueueEstimate(
        pool([r.value[0] for r in reps], events),
        pool([r.value[1] for r in reps], events),
        False,
        backlog,
    )
