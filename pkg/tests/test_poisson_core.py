import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from gapcap import poisson_core as pc
from gapcap.distributions import Deterministic, Discrete, Exponential, Gamma
from gapcap.numerics import lst_moment

H = 3600.0
HL = Discrete([(6.22, 0.9), (14.0, 0.1)])


def test_fixed_headway_mean():
    svc = pc.service("B1", Deterministic(7), 1 / 6)
    assert svc.mean == pytest.approx(6 * math.expm1(7 / 6), rel=1e-14)
    assert svc.mean == pytest.approx(13.2676, abs=1e-4)
    assert svc.capacity == pytest.approx(0.0753714, abs=1e-7)
    assert svc.capacity * H == pytest.approx(271.34, abs=0.005)


def test_b1_uses_mean_of_law():
    assert pc.capacity("B1", HL, 1 / 6) == pc.capacity("B1", Deterministic(HL.mean()), 1 / 6)


def test_resampled_exponential_mean_is_constant():
    for q in np.geomspace(1e-4, 3.0, 25):
        assert pc.service("B2", Exponential(1 / 7), q).mean == pytest.approx(7, rel=1e-12)


def test_reported_capacities_high_low():
    assert pc.capacity("B2", HL, 1 / 6) * H == pytest.approx(294.0, abs=0.05)
    assert pc.capacity("B3", HL, 1 / 6) * H == pytest.approx(233.5, abs=0.1)


def test_consistent_exponential_diverges():
    svc = pc.service("B3", Exponential(1 / 7), 1 / 6)
    assert svc.mean == math.inf
    assert svc.capacity == 0.0


@pytest.mark.parametrize("law", [Deterministic(7), HL, Exponential(1 / 7), Gamma(0.5, 1 / 14)])
@pytest.mark.parametrize("b", ["B1", "B2", "B3"])
def test_no_major_traffic(law, b):
    svc = pc.service(b, law, 0.0)
    assert svc.mean == pytest.approx(law.mean(), rel=1e-15)
    assert svc.capacity * H == pytest.approx(H / law.mean())
    # continuity into q = 0
    assert pc.service(b, law, 1e-9).mean == pytest.approx(law.mean(), rel=1e-6)


def test_capacity_limit_q_to_zero():
    for b in ("B1", "B2", "B3"):
        assert pc.capacity(b, Discrete([(4, 0.9), (34, 0.1)]), 0.0) * H == pytest.approx(514.2857, abs=1e-4)


# ---------------------------------------------------------------------------
# second moments: closed forms against differentiation of the transform


@pytest.mark.parametrize(
    "b,law,q",
    [
        ("B1", Deterministic(7), 1 / 6),
        ("B1", Deterministic(7), 1 / 60),
        ("B2", HL, 1 / 6),
        ("B2", Discrete([(4, 0.9), (34, 0.1)]), 1 / 60),
        ("B2", Gamma(0.5, 1 / 14), 0.3),
        ("B2", Exponential(1 / 7), 0.2),
        ("B3", HL, 1 / 6),
        ("B3", Gamma(3.0, 0.6), 0.1),
    ],
)
def test_second_moment_matches_transform(b, law, q):
    svc = pc.service(b, law, q)
    assert svc.lst(0.0) == 1.0
    m1 = lst_moment(svc.lst, 1, svc.mean)
    m2 = lst_moment(svc.lst, 2, svc.mean)
    assert m1.value == pytest.approx(svc.mean, rel=1e-6)
    assert m2.value == pytest.approx(svc.second_moment, rel=1e-5)


@pytest.mark.parametrize("law,q", [(Exponential(1 / 7), 0.04), (Gamma(0.5, 1 / 14), 0.02), (Gamma(3.0, 0.6), 0.1)])
def test_consistent_continuous_moments_by_quadrature(law, q):
    # E over T of the fixed-headway moments; the quadrature transform is
    # too noisy for a second-order stencil
    from scipy import integrate

    m1 = lambda t: math.expm1(q * t) / q
    m2 = lambda t: 2 * math.exp(q * t) * (math.expm1(q * t) - q * t) / q**2
    svc = pc.service("B3", law, q)
    for fn, got in ((m1, svc.mean), (m2, svc.second_moment)):
        want, _ = integrate.quad(lambda t: law.pdf(t) * fn(t), 0, 1500, epsrel=1e-12, limit=500)
        assert got == pytest.approx(want, rel=1e-9)


def test_second_moment_b1_hand_formula():
    q, T = 0.1, 7.0
    x = q * T
    want = 2 * math.exp(x) * (math.exp(x) - 1 - x) / q**2
    assert pc.service("B1", Deterministic(T), q).second_moment == pytest.approx(want, rel=1e-13)


@pytest.mark.parametrize("b", ["B2", "B3"])
def test_small_rate_series_branch_is_continuous(b):
    law = Gamma(2.0, 0.5)
    edge = 1e-3 / math.sqrt(law.raw_moment(2))
    lo = pc.service(b, law, edge * 0.999).second_moment
    hi = pc.service(b, law, edge * 1.001).second_moment
    assert lo == pytest.approx(hi, rel=1e-5)


def test_consistent_exponential_infinite_second_moment():
    svc = pc.service("B3", Exponential(1 / 7), 0.6 / 7)
    assert svc.mean == pytest.approx(17.5)
    assert svc.second_moment == math.inf


# ---------------------------------------------------------------------------
# queues


def test_idle_queue():
    m = pc.queue_metrics("B1", Deterministic(7), 1 / 6, 0.0)
    assert m.mean_queue_length == 0.0
    assert m.rho == 0.0


def test_md1_limit():
    lam = 0.1
    m = pc.queue_metrics("B1", Deterministic(7), 0.0, lam)
    rho = 0.7
    assert m.mean_queue_length == pytest.approx(rho + rho**2 / (2 * (1 - rho)), rel=1e-14)
    assert m.mean_delay == pytest.approx(m.mean_queue_length / lam)


def test_unstable_queue_carries_load():
    with pytest.raises(pc.UnstableQueueError) as exc:
        pc.queue_metrics("B1", Deterministic(7), 1 / 6, 0.08)
    assert exc.value.rho == pytest.approx(0.08 * 6 * math.expm1(7 / 6))


def test_infinite_mean_flag():
    m = pc.queue_metrics("B3", Exponential(1 / 7), 0.6 / 7, 0.01)
    assert m.rho < 1
    assert m.infinite_mean
    assert m.mean_queue_length == math.inf


def test_queue_paradox_interval():
    q = 60 / H
    b2 = Discrete([(4, 0.9), (34, 0.1)])
    diff = lambda lam: (
        pc.queue_metrics("B2", b2, q, lam / H).mean_queue_length
        - pc.queue_metrics("B1", Deterministic(7), q, lam / H).mean_queue_length
    )
    assert diff(60) < 0
    assert diff(72) > 0
    assert diff(300) > 0
    assert diff(444) > 0
    assert diff(446) < 0


# ---------------------------------------------------------------------------
# stationary points


def test_exponential_curve_is_flat():
    assert pc.find_stationary_points(lambda q: pc.capacity("B2", Exponential(1 / 7), q), (1 / H, 1e4 / H)) == []


def test_stationary_points_simple_parabola():
    pts = pc.find_stationary_points(lambda x: -((math.log(x) - 1.0) ** 2), (0.1, 100.0))
    assert len(pts) == 1
    assert pts[0][1] == "max"
    assert pts[0][0] == pytest.approx(math.e, rel=1e-3)
    with pytest.raises(ValueError):
        pc.find_stationary_points(lambda x: x, (0.0, 1.0))


def test_behavior_parsing():
    assert pc.Behavior.parse("b2") is pc.Behavior.B2
    with pytest.raises(ValueError):
        pc.Behavior.parse("B4")
    with pytest.raises(ValueError):
        pc.service("B1", Deterministic(7), -1.0)


# ---------------------------------------------------------------------------
# invariants

finite_laws = st.one_of(
    st.lists(st.tuples(st.floats(0.5, 30.0), st.floats(0.05, 1.0)), min_size=1, max_size=4).map(
        lambda xs: Discrete([(t, w / sum(w for _, w in xs)) for t, w in xs])
    ),
    st.floats(0.5, 30.0).map(Deterministic),
)


@settings(max_examples=150, deadline=None)
@given(finite_laws, st.floats(1 / H, 0.5))
def test_jensen_ordering_with_equality_for_point_masses(law, q):
    c1, c2, c3 = (pc.capacity(b, law, q) for b in ("B1", "B2", "B3"))
    assume(c3 > 1e-250)
    assert c2 >= c1 * (1 - 1e-12)
    assert c1 >= c3 * (1 - 1e-12)
    if law.is_degenerate:
        assert c1 == pytest.approx(c2, rel=1e-12)
        assert c1 == pytest.approx(c3, rel=1e-12)


@settings(max_examples=60, deadline=None)
@given(finite_laws, st.floats(1e-3, 0.3), st.sampled_from(["B1", "B2", "B3"]))
def test_transform_reproduces_mean(law, q, b):
    svc = pc.service(b, law, q)
    assume(svc.mean < 1e6)
    assert svc.lst(0.0) == pytest.approx(1.0, abs=1e-15)
    assert lst_moment(svc.lst, 1, svc.mean).value == pytest.approx(svc.mean, rel=1e-6)
