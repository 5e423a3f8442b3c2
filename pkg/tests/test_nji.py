import dataclasses
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from phlab.coverings import ScheduleError, alpha_bound
from phlab.models import CAT, Composite, SkewProduct, default_instance, splitting_matrix, torus_delta
from phlab.nji import (GAP_FLOOR, SHOOT_LENGTH, break_joint_integrability,
                       joint_integrability_probe, leaf_separation, lipschitz_separation_check,
                       plan_schedule, robustness_recheck, row_candidates, sample_pairs,
                       search_context, shear_levels, stable_points, summarize, unstable_points,
                       verify_nji)


@pytest.fixture(scope="module")
def small_report(default_construction):
    return verify_nji(default_construction, n_pairs=4, seed=3)


# ---------------------------------------------------------------- shooting on linear maps

def test_linear_shooting_matches_straight_leaves():
    f = default_instance()
    B = splitting_matrix(f)
    x = np.array([0.1, 0.7, 0.3])
    sig = np.array([-0.3, 0.05, 0.27])
    S = stable_points(f, x, sig)
    U = unstable_points(f, x, sig)
    assert np.max(np.abs(torus_delta(S, (x + sig[:, None] * B[:, 0]) % 1))) < 1e-8
    assert np.max(np.abs(torus_delta(U, (x + sig[:, None] * B[:, 2]) % 1))) < 1e-8


def test_linear_crossing_has_zero_gap_at_the_product_point():
    f = default_instance()
    B = splitting_matrix(f)
    x = np.array([0.4, 0.2, 0.9])
    y = (x + 0.28 * B[:, 0]) % 1
    xp = (x + 0.1 * B[:, 2]) % 1
    dist, crs = leaf_separation(f, xp, y, 0.35)
    assert dist == 0.0
    inside = [c for c in crs if c.inside]
    assert any(abs(c.sigma - 0.28) < 1e-8 and abs(c.tau - 0.1) < 1e-8 for c in inside)


def test_stable_points_contract_under_the_perturbed_map(default_construction):
    g = default_construction.g
    x = np.array([0.31, 0.62, 0.17])
    y = stable_points(g, x, [0.27])[0]
    d = [np.linalg.norm(torus_delta(g.iterate(x, n), g.iterate(y, n))) for n in (0, 5, 10)]
    assert d[1] < 0.02 * d[0] and d[2] < 0.02 * d[1]


# ---------------------------------------------------------------- probe

def test_probe_product_map_closes():
    assert joint_integrability_probe(default_instance(), n_pairs=5)["sup"] <= 1e-6


def test_probe_fiber_rotation_closes():
    rot = SkewProduct(CAT, 0.0, 1, omega=0.1)
    assert joint_integrability_probe(rot, n_pairs=5)["sup"] <= 1e-6


def test_probe_perturbed_map_opens(default_construction):
    rep = joint_integrability_probe(default_construction.g, n_pairs=2, n_xprime=9)
    assert rep["sup"] > GAP_FLOOR and rep["positive"] >= 1


# ---------------------------------------------------------------- construction

def test_construction_report(default_construction):
    con = default_construction
    rep = con.report
    assert rep["patches"] == len(con.covering) > 0
    assert rep["c1"]["unit_deviation"] <= 10 * con.schedule.kappa
    assert rep["recertification"]["passed"]
    assert isinstance(con.g, Composite) and len(con.g.patches) == rep["patches"]


def test_kappa_zero_gives_base_map(default_plan):
    sched = dataclasses.replace(default_plan[3], kappa=0.0)
    con = break_joint_integrability(default_instance(), schedule=sched, plan=default_plan,
                                    verify_slices=False)
    assert con.g.patches == ()
    x = np.random.default_rng(0).random((50, 3))
    assert np.array_equal(con.g.eval(x), default_instance().eval(x))


def test_placement_json_is_deterministic(default_plan, default_construction):
    again = break_joint_integrability(default_instance(), plan=default_plan, verify_slices=False,
                                      recertify=False)
    a = json.dumps(default_construction.placement_doc(), sort_keys=True)
    assert a == json.dumps(again.placement_doc(), sort_keys=True)
    assert default_construction.g.digest() == again.g.digest()


def test_strict_mode_is_infeasible():
    with pytest.raises(ScheduleError, match="infeasible eta_hat"):
        plan_schedule(default_instance(), mode="strict")


# ---------------------------------------------------------------- witnesses

def test_shear_levels_are_inside_the_half_tile():
    lo, hi = shear_levels()
    assert 0.25 < lo < 0.5 < hi < 0.75
    assert abs(lo + hi - 1) < 1e-3


def test_row_candidates_match_explicit_tiles(default_construction):
    ctx = search_context(default_construction)
    rng = np.random.default_rng(1)
    top = 1 / ctx.eta - 1
    for _ in range(40):
        tP = rng.uniform(0, 1 / ctx.eta)
        tQ = tP + rng.uniform(4, 12) * rng.choice([-1, 1])
        got = {(b, who) for _, b, who in row_candidates(ctx, tP, tQ)}
        want = set()
        for b in range(ctx.L):
            tiles = [a for a in ctx.anchors[b] + ctx.period * np.arange(-1, top / ctx.period + 2)
                     if -1e-9 <= a <= top + 1e-9]
            hit = lambda t: any(a + 0.25 <= t <= a + 0.75 for a in tiles)
            meet = lambda t: any(a <= t <= a + 1 for a in tiles)
            if hit(tP) and not meet(tQ):
                want.add((b, "x"))
            if hit(tQ) and not meet(tP):
                want.add((b, "y"))
        assert got == want


def test_witness_invariants(default_construction, small_report):
    rep = small_report
    sched = default_construction.schedule
    assert rep.passed and rep.samples == 4
    for w in rep.witnesses:
        assert w.delta > 0
        assert sched.r <= w.d_s <= sched.r_prime
        assert w.d_u <= sched.t
        assert w.chain < w.chain_bound <= sched.rho / 4
        assert abs(w.recheck - w.delta) <= 0.1 * w.delta


def test_delta_on_the_shear_scale(small_report):
    # rho * kappa * eta / 20, within two orders of magnitude
    assert small_report.scale / 100 <= small_report.delta_min <= 100 * small_report.scale


def test_witness_recomputed_from_scratch(default_construction, small_report):
    g = default_construction.g
    w = small_report.witnesses[0]
    d, _ = leaf_separation(g, np.array(w.x_prime), np.array(w.y), default_construction.schedule.gamma,
                           length=SHOOT_LENGTH / 2)
    assert abs(d - w.delta) <= 0.1 * w.delta


def test_verification_is_deterministic(default_construction, small_report):
    again = verify_nji(default_construction, n_pairs=4, seed=3)
    doc = lambda r: json.dumps({k: v for k, v in r.to_doc().items() if k != "timings"}, sort_keys=True)
    assert doc(again) == doc(small_report)


def test_kappa_zero_fails_every_pair(default_plan):
    sched = dataclasses.replace(default_plan[3], kappa=0.0)
    con = break_joint_integrability(default_instance(), schedule=sched, plan=default_plan,
                                    verify_slices=False)
    rep = verify_nji(con, n_pairs=3, seed=0)
    assert len(rep.witnesses) == 0 and len(rep.failures) == 3
    assert all(f["delta"] == 0.0 for f in rep.failures)


def test_pairs_do_not_depend_on_batch_size():
    a = sample_pairs(3, 10, seed=7)
    b = sample_pairs(3, 4, seed=7)
    for (x1, s1), (x2, s2) in zip(a, b):
        assert np.array_equal(x1, x2) and s1 == s2
    assert all(0.252 <= abs(s) <= 0.298 for _, s in a)


def test_adding_pairs_only_lowers_the_minimum(small_report):
    ws = small_report.witnesses
    mins = [summarize(ws[:k], [], k, 1.0).delta_min for k in range(1, len(ws) + 1)]
    assert all(b <= a for a, b in zip(mins, mins[1:]))


def test_parallel_workers_match_serial(default_plan):
    sched = dataclasses.replace(default_plan[3], kappa=0.0)
    con = break_joint_integrability(default_instance(), schedule=sched, plan=default_plan,
                                    verify_slices=False)
    serial = verify_nji(con, n_pairs=2, seed=1)
    par = verify_nji(con, n_pairs=2, seed=1, workers=2)
    assert json.dumps(serial.failures, sort_keys=True) == json.dumps(par.failures, sort_keys=True)


# ---------------------------------------------------------------- Lipschitz separation

def test_flat_graphs_have_zero_gap():
    ok, worst = lipschitz_separation_check(0.0, 0.0, 0.05, 1e-3)
    assert ok and worst["max_gap"] == 0.0


def test_schedule_alpha_passes_with_slack(default_construction):
    s = default_construction.schedule
    ok, worst = lipschitz_separation_check(s.theta, s.alpha, s.kappa, s.eta)
    assert ok and worst["slack"] > 0
    # the adversarial oracle reaches theta eta / 2 + 2 alpha
    assert abs(worst["max_gap"] - (s.theta * s.eta / 2 + 2 * s.alpha)) < 1e-3 * worst["max_gap"]


def test_ten_times_alpha_is_caught(default_construction):
    s = default_construction.schedule
    ok, worst = lipschitz_separation_check(s.theta, 10 * s.alpha, s.kappa, s.eta)
    assert not ok and worst["slack"] < 0


@settings(max_examples=30, deadline=None)
@given(kappa=st.floats(0.01, 0.5), eta=st.floats(1e-6, 0.1), frac=st.floats(0.0, 0.99),
       afrac=st.floats(0.0, 0.99))
def test_alpha_below_bound_always_passes(kappa, eta, frac, afrac):
    theta = frac * min(kappa / 10, 1 / 20)
    alpha = afrac * alpha_bound(eta, kappa, theta)
    ok, _ = lipschitz_separation_check(theta, alpha, kappa, eta, samples=50)
    assert ok


# ---------------------------------------------------------------- robustness

def test_robustness_size_zero_persists(default_construction, small_report):
    rb = robustness_recheck(default_construction, small_report, size=0.0, rounds=0)
    assert rb["persist_at_size"] and rb["trials"][0]["size"] == 0.0


def test_robustness_at_the_default_size(default_construction, small_report):
    rb = robustness_recheck(default_construction, small_report, rounds=1)
    assert rb["persist_at_size"]
    assert rb["margin"] >= rb["size"] > 0


def test_large_perturbation_is_reported_not_raised(default_construction, small_report):
    rb = robustness_recheck(default_construction, small_report, size=0.04, rounds=0)
    assert isinstance(rb["persist_at_size"], bool)
    assert rb["trials"][0]["placement"]["kappa"] > 0
