import math
import warnings

import numpy as np
import pytest

from gapcap import mmpp as mm
from gapcap import poisson_core as pc
from gapcap.distributions import Deterministic, Exponential
from gapcap.impatience import Geometric, NoImpatience
from gapcap.numerics import solve
from gapcap.validation import HIGH_LOW, ratio_mmpp, platoon_mmpp

H = 3600.0


def test_stationary_two_state():
    m = mm.MmppSpec.two_state(0.1, 0.2, 4.0, 1.0)
    assert mm.stationary(m) == pytest.approx([0.2, 0.8], rel=1e-14)
    assert mm.stationary(platoon_mmpp()) == pytest.approx([5 / 6, 1 / 6], rel=1e-14)
    assert mm.stationary(mm.MmppSpec.poisson(0.25)) == pytest.approx([1.0])


def test_average_rates():
    m = mm.MmppSpec.two_state(600 / H, 2400 / H, 0.02, 0.1)
    assert mm.average_rate(m) * H == pytest.approx(900.0, rel=1e-14)
    ex4 = ratio_mmpp(700.0)
    assert ex4.q[0] == pytest.approx(3 * ex4.q[1])
    assert mm.average_rate(ex4) == pytest.approx(1.4 * ex4.q[1], rel=1e-14)
    assert mm.average_rate(ex4) * H == pytest.approx(700.0)


def test_three_state_balance():
    rates = [[0, 1.0, 0.5], [0.2, 0, 0.3], [0.7, 0.1, 0]]
    m = mm.MmppSpec.from_rates(rates, [0.1, 0.2, 0.3])
    pi = mm.stationary(m)
    assert pi.sum() == pytest.approx(1.0)
    assert np.abs(pi @ m.M).max() < 1e-15


def test_generator_validation():
    with pytest.raises(mm.MmppError, match="sum to zero"):
        mm.MmppSpec([[-1.0, 0.5], [1.0, -1.0]], [0.1, 0.1])
    with pytest.raises(mm.MmppError, match="irreducible"):
        mm.MmppSpec.from_rates([[0, 1.0, 0], [0, 0, 0], [0, 0, 0]], [0.1, 0.1, 0.1])
    with pytest.raises(mm.MmppError, match="non-negative"):
        mm.MmppSpec([[0.0]], [-1.0])
    with pytest.raises(mm.MmppError):
        mm.MmppSpec(np.zeros((2, 2)), [0.1])


def test_literal_forms():
    m = mm.from_dict({"rates_veh_h": [600, 2400], "transitions_per_s": [[0, 0.02], [0.1, 0]]})
    assert m.M[0, 0] == pytest.approx(-0.02)
    assert m.q * H == pytest.approx([600, 2400])
    back = mm.from_dict(m.to_dict())
    assert np.array_equal(back.M, m.M) and np.array_equal(back.q, m.q)
    hr = mm.from_dict({"rates_per_s": [0.1, 0.2], "transitions_per_h": [[-72, 72], [360, -360]]})
    assert hr.mu == pytest.approx([0.02, 0.1])


# ---------------------------------------------------------------------------
# assembly


def test_one_state_one_phase_by_hand():
    q, T = 1 / 6, 7.0
    sys = mm.assemble_b1(mm.MmppSpec.poisson(q), T, 1)
    rho = q + 1 / T
    assert sys.A == pytest.approx(np.array([[1 - q / rho]]))
    assert sys.rhs[:, 0] == pytest.approx([1 / T / rho])
    assert sys.rhs[:, 1] == pytest.approx([1 / rho])
    h, tau = solve(sys).x[0]
    assert h == pytest.approx(1.0)
    assert tau == pytest.approx(T)


def test_two_state_two_phase_by_hand():
    q1, q2, mu1, mu2, T = 0.1, 0.3, 0.05, 0.2, 6.0
    m = mm.MmppSpec.two_state(q1, q2, mu1, mu2)
    k = 2
    kap = k / T
    r1, r2 = mu1 + q1 + kap, mu2 + q2 + kap
    # unknowns: (state 1, 0 phases), (state 1, 1), (state 2, 0), (state 2, 1)
    A = np.array(
        [
            [1 - q1 / r1, -kap / r1, -mu1 / r1, 0],
            [-q1 / r1, 1, 0, -mu1 / r1],
            [-mu2 / r2, 0, 1 - q2 / r2, -kap / r2],
            [0, -mu2 / r2, -(q2 + kap) / r2, 1],
        ]
    )
    b = [0, kap / r1, 0, kap / r2]
    c = [1 / r1, 1 / r1, 1 / r2, 1 / r2]
    sys = mm.assemble_b1(m, T, k)
    assert np.allclose(sys.A, A, rtol=1e-15, atol=0)
    assert np.allclose(sys.rhs, np.column_stack([b, c]), rtol=1e-15, atol=0)


@pytest.mark.parametrize("k", [1, 2, 3, 5])
def test_b1_assembly_matches_general(k):
    m = mm.MmppSpec.from_rates([[0, 0.02, 0.01], [0.1, 0, 0.05], [0.3, 0.2, 0]], [0.1, 0.4, 0.02])
    dense = mm.assemble_b1(m, 7.0, k)
    A, b, c, _ = mm.assemble("B1", m, mm.phase_plan("B1", Deterministic(7.0), k))
    assert np.array_equal(A.toarray(), dense.A)
    assert np.array_equal(np.column_stack([b, c]), dense.rhs)


def test_crossing_vector_pattern():
    m = platoon_mmpp()
    k = 4
    sys = mm.assemble_b1(m, 7.0, k)
    b = sys.rhs[:, 0]
    last = (np.arange(b.size) + 1) % k == 0
    assert np.all(b[~last] == 0)
    assert np.all(b[last] > 0)
    # each row of the transient part loses mass, the diagonal dominates
    A = sys.A
    assert np.all(np.abs(np.diag(A)) >= np.abs(A - np.diag(np.diag(A))).sum(axis=1))


def test_phase_plans():
    plan = mm.phase_plan("B2", HIGH_LOW, 8)
    assert plan.size == 16
    assert plan.kappas == pytest.approx((8 / (56 / 9), 8 / 14))
    b1 = mm.phase_plan("B1", HIGH_LOW, 8)
    assert b1.values == pytest.approx((7.0,))
    with pytest.raises(mm.UnsupportedLawError):
        mm.phase_plan("B2", Exponential(1 / 7), 8)
    with pytest.raises(mm.MmppError):
        mm.PhasePlan((7.0,), (1.0,), (0,))


# ---------------------------------------------------------------------------
# capacity


@pytest.mark.parametrize("b", ["B1", "B2", "B3"])
def test_single_state_reduces_to_poisson(b):
    q = 600 / H
    res = mm.capacity_mmpp(b, mm.MmppSpec.poisson(q), HIGH_LOW)
    assert res.converged and res.flag == "ok"
    assert res.value == pytest.approx(pc.capacity(b, HIGH_LOW, q), rel=1e-4)
    raw = mm.cycle_quantities(b, mm.MmppSpec.poisson(q), mm.phase_plan(b, HIGH_LOW, 512)).capacity
    assert raw == pytest.approx(pc.capacity(b, HIGH_LOW, q), rel=5e-3)


def test_residual_is_small():
    res = mm.capacity_mmpp("B3", platoon_mmpp(), HIGH_LOW)
    assert res.residual < 1e-9
    assert [h[0] for h in res.history] == [64 * 2**i for i in range(len(res.history))]


def test_reference_state_does_not_matter():
    m = platoon_mmpp()
    for b in ("B1", "B2", "B3"):
        plan = mm.phase_plan(b, HIGH_LOW, 64)
        a = mm.cycle_quantities(b, m, plan).capacity
        z = mm.cycle_quantities(b, m.relabel([1, 0]), plan).capacity
        assert a == pytest.approx(z, rel=1e-12)


def test_three_state_reference_invariance():
    m = mm.MmppSpec.from_rates([[0, 0.02, 0.01], [0.1, 0, 0.05], [0.3, 0.2, 0]], [0.1, 0.4, 0.02])
    plan = mm.phase_plan("B2", HIGH_LOW, 16)
    vals = [mm.cycle_quantities("B2", m.relabel(o), plan).capacity for o in ([0, 1, 2], [2, 0, 1], [1, 2, 0])]
    assert max(vals) - min(vals) < 1e-12 * vals[0]


def test_point_mass_behaviors_agree():
    m = platoon_mmpp()
    vals = [mm.capacity_mmpp(b, m, Deterministic(7.0), k0=32).value for b in ("B1", "B2", "B3")]
    assert vals[1] == pytest.approx(vals[0], rel=1e-12)
    assert vals[2] == pytest.approx(vals[0], rel=1e-12)


def test_ordering_reported():
    # the Poisson ordering need not survive; only check the numbers are sane
    m = platoon_mmpp()
    vals = [mm.capacity_mmpp(b, m, HIGH_LOW).veh_h for b in ("B1", "B2", "B3")]
    assert all(0 < v < H / 6 for v in vals)


def test_rejections():
    m = platoon_mmpp()
    with pytest.raises(mm.UnsupportedLawError):
        mm.capacity_mmpp("B3", m, Exponential(1 / 7))
    with pytest.raises(mm.MmppError, match="impatience"):
        mm.capacity_mmpp("B1", m, HIGH_LOW, impatience=Geometric(0.9, 4.0))
    assert mm.capacity_mmpp("B1", m, HIGH_LOW, k0=32, impatience=NoImpatience()).converged
    with pytest.raises(mm.MmppError, match="average rate"):
        mm.capacity_mmpp("B1", mm.MmppSpec.two_state(0, 0, 1, 1), HIGH_LOW)


def test_unconverged_warns():
    with pytest.warns(mm.CapacityWarning):
        res = mm.capacity_mmpp("B2", platoon_mmpp(), HIGH_LOW, k0=4, k_max=8, tol=1e-12)
    assert not res.converged
    assert res.flag == "unconverged"
    assert res.warnings


# ---------------------------------------------------------------------------
# state-averaging shortcuts


def test_naive_single_state_is_exact():
    m = mm.MmppSpec.poisson(600 / H)
    S = mm.state_service_means("B2", m, HIGH_LOW)
    exact = pc.capacity("B2", HIGH_LOW, 600 / H)
    assert mm.naive_capacity(m, S, 1) == pytest.approx(exact, rel=1e-15)
    assert mm.naive_capacity(m, S, 2) == pytest.approx(exact, rel=1e-15)


def test_naive_hand_values():
    m = mm.MmppSpec.two_state(0.1, 0.2, 4.0, 1.0)
    assert mm.naive_capacity(m, [10.0, 20.0], 1) == pytest.approx(0.2 / 10 + 0.8 / 20)
    assert mm.naive_capacity(m, [10.0, 20.0], 2) == pytest.approx(1 / (0.2 * 10 + 0.8 * 20))
    with pytest.raises(ValueError):
        mm.naive_capacity(m, [10.0, 20.0], 3)
    with pytest.raises(mm.MmppError):
        mm.naive_capacity(m, [10.0], 1)


def test_naive_infinite_state():
    m = mm.MmppSpec.two_state(0.1, 0.2, 4.0, 1.0)
    with pytest.warns(mm.CapacityWarning):
        assert mm.naive_capacity(m, [10.0, math.inf], 1) == pytest.approx(0.02)
    with pytest.warns(mm.CapacityWarning):
        assert mm.naive_capacity(m, [10.0, math.inf], 2) == 0.0
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        mm.naive_capacity(m, [10.0, 20.0], 1)


def test_state_averaging_anchors():
    m = platoon_mmpp()
    got = [mm.naive_capacity(m, mm.state_service_means(b, m, HIGH_LOW), 1) * H for b in ("B1", "B2", "B3")]
    assert got == pytest.approx([229.91, 250.65, 194.89], abs=0.1)
