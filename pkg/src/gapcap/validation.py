"""Anchored acceptance checks shared by the test-suite and ``gapcap preset validate``.

Every check returns a :class:`Check` with the observed numbers, so a failing
run says what was computed and not just that something was off.
"""

from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from . import poisson_core as pc
from .distributions import Deterministic, Discrete, Exponential, Gamma
from .impatience import Explicit, Geometric, NoImpatience, capacity_impatient
from .mmpp import CapacityWarning, MmppError, MmppSpec, capacity_mmpp, naive_capacity, state_service_means
from .simulator import SimConfig, simulate_capacity

VEH_H = 3600.0
BEHAVIORS = ("B1", "B2", "B3")

# High/Low law with E[T] = 7 exactly; the low atom prints as 6.22
HIGH_LOW = Discrete([(56 / 9, 0.9), (14.0, 0.1)])
QUEUE_LAW = Discrete([(4.0, 0.9), (34.0, 0.1)])

NAIVE_ANCHORS = {1: (229.91, 250.65, 194.89), 2: (96.28, 130.74, 11.63)}


@dataclass
class Check:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0
    data: dict = field(default_factory=dict)

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail} ({self.seconds:.2f} s)"


def _timed(name, budget=None):
    """Decorator: time the check and fail it when the budget is exceeded."""

    def wrap(fn):
        def run(*args, **kwargs):
            t0 = time.perf_counter()
            ok, detail, data = fn(*args, **kwargs)
            dt = time.perf_counter() - t0
            if budget is not None and dt >= budget:
                ok = False
                detail += f"; over time budget {budget:g} s"
            return Check(name, ok, detail, dt, data)

        run.__name__ = fn.__name__
        run.check_name = name
        return run

    return wrap


def platoon_mmpp(mean_platoon_s: float = 10.0) -> MmppSpec:
    """q = (600, 2400) veh/h; the platoon state is left at 1/mean_platoon_s, the other at a fifth of that."""
    mu2 = 1.0 / mean_platoon_s
    return MmppSpec.two_state(600 / VEH_H, 2400 / VEH_H, mu2 / 5.0, mu2)


def ratio_mmpp(qbar_veh_h: float) -> MmppSpec:
    """mu = (1/60, 1/240) per s, q1 = 3 q2, scaled to the requested average rate."""
    q2 = qbar_veh_h / 1.4 / VEH_H
    return MmppSpec.two_state(3 * q2, q2, 1 / 60, 1 / 240)


# ---------------------------------------------------------------------------


@_timed("1 state-averaging anchors", budget=1.0)
def check_naive_anchors():
    m = platoon_mmpp()
    got = {}
    ok = True
    for variant, want in NAIVE_ANCHORS.items():
        vals = []
        for b, w in zip(BEHAVIORS, want):
            v = naive_capacity(m, state_service_means(b, m, HIGH_LOW), variant) * VEH_H
            vals.append(round(v, 3))
            ok &= abs(v - w) <= 0.1
        got[variant] = vals
    return ok, f"variant 1 {got[1]}, variant 2 {got[2]} veh/h", {"values": got}


def random_laws(rng: np.random.Generator, n: int):
    """(law, q) pairs spanning discrete, gamma and exponential laws with E[e^{qT}] finite."""
    out = []
    for i in range(n):
        q = float(np.exp(rng.uniform(np.log(10), np.log(3000)))) / VEH_H
        kind = i % 4
        if kind == 0:
            k = int(rng.integers(2, 5))
            vals = rng.uniform(0.5, 30.0, k)
            probs = rng.dirichlet(np.ones(k))
            law = Discrete(list(zip(vals.tolist(), probs.tolist())))
        elif kind == 1:
            law = Deterministic(float(rng.uniform(1.0, 20.0)))
        elif kind == 2:
            # rate above q keeps the mgf finite
            law = Gamma(float(rng.uniform(0.3, 6.0)), q * float(rng.uniform(1.2, 20.0)))
        else:
            law = Exponential(q * float(rng.uniform(1.2, 20.0)))
        out.append((law, q))
    return out


@_timed("2 Jensen ordering B2 >= B1 >= B3", budget=5.0)
def check_jensen(n: int = 200, seed: int = 20240601):
    rng = np.random.default_rng(seed)
    bad = []
    for law, q in random_laws(rng, n):
        c1, c2, c3 = (pc.capacity(b, law, q) for b in BEHAVIORS)
        slack = 1e-12 * max(c1, c2, c3, 1e-300)
        if not (c2 >= c1 - slack and c1 >= c3 - slack):
            bad.append((law, q, c1, c2, c3))
    return not bad, f"{len(bad)} violations in {n} points", {"violations": bad}


@_timed("3 B2 exponential constancy")
def check_exponential_constancy():
    law = Exponential(1 / 7)
    qs = np.geomspace(10, 10_000, 50) / VEH_H
    caps = np.array([pc.capacity("B2", law, q) for q in qs]) * VEH_H
    target = VEH_H / 7
    dev = float(np.max(np.abs(caps - target)) / target)
    ok = dev < 1e-9 and abs(target - 514.286) < 5e-4
    return ok, f"capacity {caps.mean():.6f} veh/h, max relative deviation {dev:.1e}", {"deviation": dev}


@_timed("4 stationary points of high-low laws", budget=10.0)
def check_stationary_points():
    curve = lambda law: (lambda q: pc.capacity("B2", law, q))
    rng = (1 / VEH_H, 20_000 / VEH_H)
    a = pc.find_stationary_points(curve(Discrete([(3.11, 0.9), (42.0, 0.1)])), rng)
    b = pc.find_stationary_points(curve(Discrete([(7.71, 0.9), (0.57, 0.1)])), rng)
    a = [(round(x * VEH_H, 2), k) for x, k in a]
    b = [(round(x * VEH_H, 2), k) for x, k in b]
    ok = (
        len(a) == 1
        and a[0][1] == "max"
        and abs(a[0][0] - 437) <= 10
        and [k for _, k in b] == ["min", "max"]
        and abs(b[0][0] - 1965) <= 25
        and abs(b[1][0] - 6055) <= 60
    )
    return ok, f"law (3.11, 42): {a}; law (7.71, 0.57): {b}", {"a": a, "b": b}


@_timed("5 Gamma B2 monotone increase")
def check_gamma_monotone():
    law = Gamma(0.5, 1 / 14)
    qs = np.geomspace(1, 10_000, 100) / VEH_H
    caps = np.array([pc.capacity("B2", law, q) for q in qs])
    steps = np.diff(caps)
    ok = bool(np.all(steps > 0))
    return ok, f"{int(np.sum(steps <= 0))} non-increasing steps; {caps[0] * VEH_H:.2f} -> {caps[-1] * VEH_H:.2f} veh/h", {}


def queue_gap(q: float, lam: float) -> float:
    """PK mean queue length under B2 minus under B1."""
    l2 = pc.queue_metrics("B2", QUEUE_LAW, q, lam).mean_queue_length
    l1 = pc.queue_metrics("B1", Deterministic(7.0), q, lam).mean_queue_length
    return l2 - l1


def _lam_max(q: float) -> float:
    return 0.999 * min(pc.capacity("B1", Deterministic(7.0), q), pc.capacity("B2", QUEUE_LAW, q))


def queue_crossings(q: float, points: int = 400) -> list[float]:
    """Minor-road rates where the two PK curves cross, in increasing order."""
    lams = np.geomspace(1e-3 / VEH_H, _lam_max(q), points)
    g = np.array([queue_gap(q, x) for x in lams])
    roots = []
    for i in np.nonzero(np.sign(g[:-1]) * np.sign(g[1:]) < 0)[0]:
        roots.append(optimize.brentq(lambda x: queue_gap(q, x), lams[i], lams[i + 1], xtol=1e-12, rtol=1e-12))
    return roots


def has_paradox(q: float) -> bool:
    """True when B2 has the longer mean queue for some stable minor-road rate."""
    hi = _lam_max(q)
    res = optimize.minimize_scalar(
        lambda x: -queue_gap(q, x), bounds=(1e-6 * hi, hi), method="bounded", options={"xatol": 1e-10}
    )
    return -res.fun > 0


def paradox_threshold(lo_veh_h: float = 60.0, hi_veh_h: float = 300.0, tol: float = 1e-3) -> float:
    """Largest major-road rate (veh/h) at which the queue-length paradox occurs."""
    lo, hi = lo_veh_h / VEH_H, hi_veh_h / VEH_H
    if not has_paradox(lo) or has_paradox(hi):
        raise ValueError("paradox threshold not bracketed")
    while (hi - lo) * VEH_H > tol:
        mid = 0.5 * (lo + hi)
        lo, hi = (mid, hi) if has_paradox(mid) else (lo, mid)
    return 0.5 * (lo + hi) * VEH_H


@_timed("6 queue-length paradox")
def check_paradox():
    roots = [r * VEH_H for r in queue_crossings(60 / VEH_H)]
    thr = paradox_threshold()
    ok = (
        len(roots) == 2
        and abs(roots[0] - 71.2) <= 1
        and abs(roots[1] - 445.1) <= 1
        and abs(thr - 124.6) <= 1
    )
    return ok, f"crossings {[round(r, 2) for r in roots]} veh/h, threshold {thr:.2f} veh/h", {"roots": roots, "threshold": thr}


@_timed("7 impatience reduction to closed forms")
def check_impatience_reduction(n: int = 20, seed: int = 7):
    rng = np.random.default_rng(seed)
    # an explicit identity map keeps the series machinery in play
    identity = Explicit(((1.0, 0.0),))
    worst = 0.0
    for i in range(n):
        b = BEHAVIORS[i % 3]
        q = float(rng.uniform(50, 1500)) / VEH_H
        if b == "B2" and i % 2:
            law = Gamma(float(rng.uniform(0.5, 4)), float(rng.uniform(0.1, 1.0)))
        else:
            k = int(rng.integers(1, 4))
            law = Discrete(list(zip(rng.uniform(1.0, 12.0, k).tolist(), rng.dirichlet(np.ones(k)).tolist())))
        for pol in (identity, NoImpatience()):
            got = capacity_impatient(b, law, pol, q)
            want = pc.capacity(b, law, q)
            worst = max(worst, abs(got - want) / want)
    return worst < 1e-10, f"max relative error {worst:.1e} over {n} points", {"worst": worst}


@_timed("8 MMPP d=1 reduction", budget=60.0)
def check_mmpp_reduction():
    worst = 0.0
    monotone = True
    for qv in (100.0, 600.0, 1500.0):
        q = qv / VEH_H
        for b in BEHAVIORS:
            res = capacity_mmpp(b, MmppSpec.poisson(q), HIGH_LOW)
            want = pc.capacity(b, HIGH_LOW, q)
            worst = max(worst, abs(res.value - want) / want)
            raw = [h[1] for h in res.history]
            gaps = [abs(raw[i + 1] - raw[i]) / abs(raw[i + 1]) for i in range(len(raw) - 1)]
            monotone &= len(gaps) >= 2 and all(g2 < g1 for g1, g2 in zip(gaps, gaps[1:]))
            monotone &= res.converged
    ok = worst < 1e-3 and monotone
    return ok, f"max relative error {worst:.1e}; phase-doubling gaps shrink: {monotone}", {"worst": worst}


@_timed("9 MMPP slow-switching limit")
def check_mmpp_limit():
    m = platoon_mmpp(mean_platoon_s=10.0 * 1000)
    got = []
    ok = True
    for b, want in zip(BEHAVIORS, NAIVE_ANCHORS[1]):
        v = capacity_mmpp(b, m, HIGH_LOW).veh_h
        got.append(round(v, 3))
        ok &= abs(v - want) / want < 0.01
    return ok, f"capacities {got} veh/h vs {list(NAIVE_ANCHORS[1])}", {"values": got}


def oracle_cells():
    """The 12 (arrivals, behavior, policy) cells; MMPP with impatience is unsupported."""
    poisson = 600 / VEH_H
    mmpp = ratio_mmpp(600.0)
    cells = []
    for arrivals in (poisson, mmpp):
        for b in BEHAVIORS:
            for pol in (NoImpatience(), Geometric(0.9, 4.0)):
                cells.append((arrivals, b, pol))
    return cells


@_timed("10 simulator brackets analytic capacity", budget=600.0)
def check_oracle(crossings: int = 1_000_000, replications: int = 10, seed: int = 1):
    rows = []
    ok = True
    for arrivals, b, pol in oracle_cells():
        is_mmpp = isinstance(arrivals, MmppSpec)
        label = f"{'MMPP' if is_mmpp else 'Poisson'}/{b}/{type(pol).__name__}"
        if is_mmpp:
            try:
                capacity_mmpp(b, arrivals, HIGH_LOW, impatience=pol)
            except MmppError:
                rows.append((label, "unsupported"))
                continue
            exact = capacity_mmpp(b, arrivals, HIGH_LOW).value
        else:
            exact = capacity_impatient(b, HIGH_LOW, pol, arrivals)
        cfg = SimConfig(arrivals, b, HIGH_LOW, pol, horizon=crossings // replications, replications=replications, seed=seed)
        est = simulate_capacity(cfg)
        inside = est.contains(exact)
        ok &= inside
        rows.append((label, f"{exact * VEH_H:.3f} in [{est.ci[0] * VEH_H:.3f}, {est.ci[1] * VEH_H:.3f}]: {inside}"))
    n_sup = sum(1 for r in rows if r[1] != "unsupported")
    n_in = sum(1 for r in rows if r[1].endswith("True"))
    return ok and n_sup == 9, f"{n_in}/{n_sup} supported cells bracketed, {len(rows) - n_sup} unsupported", {"rows": rows}


@_timed("11 B3 exponential instability")
def check_instability():
    law = Exponential(1 / 7)
    zero = [pc.capacity("B3", law, q) == 0.0 for q in np.linspace(1 / 7, 1.0, 20)]
    flags = []
    for q in np.linspace(1 / 14, 1 / 7, 20, endpoint=False):
        svc = pc.service("B3", law, q)
        lam = 0.5 * svc.capacity
        flags.append(math.isfinite(svc.mean) and pc.queue_metrics("B3", law, q, lam).infinite_mean)
    below = pc.queue_metrics("B3", law, 0.99 / 14, 0.01).infinite_mean
    ok = all(zero) and all(flags) and not below
    return ok, f"zero capacity at {sum(zero)}/20 rates >= 1/7, flag set at {sum(flags)}/20 rates in [1/14, 1/7)", {}


CHECKS = (
    check_naive_anchors,
    check_jensen,
    check_exponential_constancy,
    check_stationary_points,
    check_gamma_monotone,
    check_paradox,
    check_impatience_reduction,
    check_mmpp_reduction,
    check_mmpp_limit,
    check_oracle,
    check_instability,
)


def run_all(quick: bool = False) -> list[Check]:
    """Every check; ``quick`` runs the simulator at a tenth of the horizon."""
    out = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", CapacityWarning)
        for fn in CHECKS:
            if fn is check_oracle and quick:
                out.append(fn(crossings=100_000))
            else:
                out.append(fn())
    return out
