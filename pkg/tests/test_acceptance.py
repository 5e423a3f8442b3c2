"""The nine acceptance criteria; each test prints one PASS/FAIL line."""

import dataclasses
import json
import math
import time

import numpy as np
import pytest

from phlab import census as cen
from phlab.cli import main
from phlab.cones import certify_model
from phlab.coverings import (alpha_bound, build_schedule, build_tile_family, check_dichotomy,
                             check_tile_property, eq4_lhs, strict_L, theta_bound, verify_wandering)
from phlab.laminations import local_stable_disk, local_unstable_disk, planar_cu_disk, product_projection, \
    trapping_factor
from phlab.models import CAT, LinearToral, SkewProduct, default_instance, make_chart, splitting_matrix, \
    torus_delta, wrap
from phlab.nji import break_joint_integrability, joint_integrability_probe, robustness_recheck, verify_nji
from phlab.perturbation import admissible_grid, build_elementary, displacement_gaps, estimate_c1_size

LAM = (3 + math.sqrt(5)) / 2


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'} ({detail})")
        assert ok, detail
    return emit


# ---------------------------------------------------------------- 1

def test_criterion_1_elementary_perturbation(report):
    t0 = time.perf_counter()
    h = build_elementary(0.05, 0.02)
    gaps = displacement_gaps(h, admissible_grid(h, 20))
    rng = np.random.default_rng(0)
    x = rng.random((2000, 3)) * h.scale()
    first = np.array_equal(h.apply(x)[:, 0], x[:, 0])
    collar = True
    for k in range(3):
        z = rng.random((500, 3))
        z[:, k] = rng.choice([0.0, 0.002, 0.004, 0.996, 0.998, 1.0], 500)
        xc = z * h.scale()
        collar &= np.array_equal(h.apply(xc), xc)
    elapsed = time.perf_counter() - t0
    ok = gaps.size == 400 and gaps.min() > 1e-4 and first and collar and elapsed < 10
    report(1, ok, f"min gap {gaps.min():.4e} > 1e-4 on 20x20, first coordinate bitwise {first}, "
                  f"collar exact {collar}, {elapsed:.1f} s")


# ---------------------------------------------------------------- 2

def test_criterion_2_c1_size(report):
    f = default_instance()
    units = {k: estimate_c1_size(build_elementary(k, 0.02)).unit_deviation for k in (0.01, 0.05, 0.1)}
    h = build_elementary(0.05, 0.02)
    devs = {r: estimate_c1_size(h, make_chart(f, [0.5, 0.5, 0.5], r)).deviation for r in (0.02, 0.05, 0.1)}
    spread = max(devs.values()) / min(devs.values()) - 1
    ok = all(v <= 10 * k for k, v in units.items()) and spread <= 0.2
    report(2, ok, "unit deviation / kappa " + ", ".join(f"{v / k:.2f}" for k, v in units.items())
                  + f" <= 10; chart deviation spread over rho {spread:.2%} <= 20%")


# ---------------------------------------------------------------- 3

def _hausdorff_to_line(disk, x, e, radius):
    """Hausdorff distance between sampled disk and the exact segment x + [-radius, radius] e."""
    d = disk.samples - x
    t = d @ e
    off = np.max(np.linalg.norm(d - t[:, None] * e, axis=1))
    ends = max(abs(t.min() + radius), abs(t.max() - radius))
    return max(off, ends)


def test_criterion_3_lamination_oracles(report):
    t0 = time.perf_counter()
    f = default_instance()
    B = splitting_matrix(f)
    Binv = np.linalg.inv(B)
    rng = np.random.default_rng(0)
    worst = 0.0
    for x in rng.random((10, 3)):
        for disk_fn, axis in ((local_unstable_disk, 2), (local_stable_disk, 0)):
            disk = disk_fn(f, x, 0.3)
            e = B[:, axis] / np.linalg.norm(B[:, axis])
            worst = max(worst, _hausdorff_to_line(disk, x, e, 0.3))
    trap = [trapping_factor(f, [0.6, 0.1, 0.9], 0.2, sigma=s) for s in ("s", "u")]
    trap_err = max(abs(v * LAM - 1) for v in trap)
    proj = 0.0
    for _ in range(50):
        c = rng.random(3)
        x = wrap(c + B @ rng.uniform(-0.03, 0.03, 3))
        z = product_projection(f, x, planar_cu_disk(f, c, 0.1))
        a = -(Binv @ torus_delta(c, x))[0]
        proj = max(proj, np.max(np.abs(torus_delta(wrap(x + a * B[:, 0]), z))))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-8 and trap_err <= 0.02 and proj <= 1e-8 and elapsed < 30
    report(3, ok, f"leaf Hausdorff {worst:.1e} <= 1e-8, trapping {trap[0]:.5f}/{trap[1]:.5f} vs "
                  f"{1 / LAM:.5f} (err {trap_err:.2%}), projection {proj:.1e} <= 1e-8, {elapsed:.1f} s")


# ---------------------------------------------------------------- 4

def test_criterion_4_combinatorics(report, default_plan):
    f = default_instance()
    cert, cov, slices, sched, _ = default_plan
    pair, count = cov.checks["pair"], cov.checks["count"]
    wand = verify_wandering(f, cov, slices, 2, n_probes=100_000, seed=0)
    strict = build_schedule(certify_model(f, narrowing_targets=(0.004,)), f.splitting_dims, mode="strict")
    arith = {
        "eta_hat": strict.checks["eta_hat_formula"],
        "I": strict.checks["I_formula"],
        "L": strict.L == strict_L(strict.Delta),
        "theta": strict.theta < theta_bound(strict.kappa),
        "alpha": strict.alpha < alpha_bound(strict.eta, strict.kappa, strict.theta) and strict.checks["alpha"],
        "eq4": eq4_lhs(1, 1, strict.eta, strict.Delta, strict.theta) < 0.25 and strict.checks["eq4"],
        "finite_logs": all(math.isfinite(v) for v in strict.logs.values()),
    }
    ok = (pair["probes"] == count["probes"] == 10_000 and pair["violations"] == count["violations"] == 0
          and slices.N == 2 and wand["probes"] == 100_000 and wand["violations"] == 0 and all(arith.values()))
    failed = [k for k, v in arith.items() if not v]
    report(4, ok, f"covering pair/count violations {pair['violations']}/{count['violations']} in 1e4 probes, "
                  f"wandering violations {wand['violations']} in 1e5 probes at N={slices.N}, "
                  f"strict log-domain assertions {'all hold' if not failed else 'fail: ' + ','.join(failed)}")


# ---------------------------------------------------------------- 5

def test_criterion_5_tile_dichotomy(report):
    tiles = build_tile_family(3, mode="tight")
    prop = check_tile_property(tiles, 1000, seed=0)
    dich = check_dichotomy(tiles, 1000, seed=1)
    ok = tiles.certified and prop["violations"] == 0 and dich["violations"] == 0
    report(5, ok, f"tight family L={tiles.L}: property (iii) violations {prop['violations']}/1000, "
                  f"dichotomy violations {dich['violations']}/1000")


# ---------------------------------------------------------------- 6

def test_criterion_6_end_to_end_nji(report, default_plan, default_construction):
    con = default_construction
    t0 = time.perf_counter()
    rep = verify_nji(con, n_pairs=100, seed=0)
    deltas = [w.delta for w in rep.witnesses]
    probe = joint_integrability_probe(default_instance(), n_pairs=10, seed=0)
    zero = break_joint_integrability(default_instance(), plan=default_plan, verify_slices=False,
                                     schedule=dataclasses.replace(default_plan[3], kappa=0.0))
    base = verify_nji(zero, n_pairs=10, seed=0)
    rb = robustness_recheck(con, rep, seed=0)
    elapsed = time.perf_counter() - t0 + sum(con.report["timings"].values())
    size = rep.delta_min / (10 * con.schedule.Delta ** rep.n_max)
    ok = (len(deltas) == 100 and min(deltas) > 0 and probe["sup"] <= 1e-6 and not base.witnesses
          and rb["persist_at_size"] and rb["size"] == pytest.approx(size, rel=1e-12) and elapsed < 600)
    report(6, ok, f"{len(deltas)}/100 witnesses, delta_min {rep.delta_min:.4e}, baseline sup "
                  f"{probe['sup']:.1e} with {len(base.witnesses)} witnesses, robustness persists at "
                  f"{rb['size']:.3e} = {rb['persist_at_size']} (margin {rb['margin']:.3e}), {elapsed:.0f} s")


# ---------------------------------------------------------------- 7

def _terminal_counts(model, fibers=(8, 16, 32), horizontal=16):
    out, t32 = [], 0.0
    for nf in fibers:
        t0 = time.perf_counter()
        out.append(len(cen.chain_classes(cen.build_box_graph(model, (horizontal, horizontal, nf))).terminal))
        if nf == 32:
            t32 += time.perf_counter() - t0
    return out, t32


def test_criterion_7_census(report, default_construction):
    prod, t_a = _terminal_counts(default_instance())
    pert, t_b = _terminal_counts(default_construction.g)
    t0 = time.perf_counter()
    skew = SkewProduct(CAT, 0.2, 3)
    g = cen.build_box_graph(skew, (16, 16, 32))
    cond = cen.chain_classes(g)
    minimal = cen.minimal_u_saturated(g, cond)
    disjoint = all(np.intersect1d(a, b).size == 0 for i, a in enumerate(minimal) for b in minimal[i + 1:])
    t_c = time.perf_counter() - t0
    elapsed = t_a + t_b + t_c
    ok = (prod == [8, 16, 32] and max(pert) <= 8 and all(b <= a for a, b in zip(pert, pert[1:]))
          and len(cond.terminal) == 3 and len(minimal) == 3 and disjoint and elapsed < 300)
    report(7, ok, f"A x id counts {prod}, perturbed counts {pert}, skew k=3 terminal {len(cond.terminal)} "
                  f"with {len(minimal)} disjoint minimal saturated sets, {elapsed:.1f} s at 2^5")


# ---------------------------------------------------------------- 8

def test_criterion_8_entropy(report):
    bound, info = cen.entropy_lower_bound(LinearToral(CAT), gamma=0.2, eta_sep=0.05, details=True)
    h_top = math.log(LAM)
    ok = info["k0"] == 2 and bound == math.log(2) / 2 and bound <= h_top
    report(8, ok, f"k0 = {info['k0']}, bound {bound:.4f} <= h_top {h_top:.4f}")


# ---------------------------------------------------------------- 9

def _reports(out):
    return {p.name: p.read_bytes() for p in sorted(out.iterdir()) if p.name != "manifest.json"}


def test_criterion_9_determinism(report, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"verify": {"pairs": 2, "probe_pairs": 2, "robustness_rounds": 1}}))
    runs = [["certify"], ["schedule"], ["schedule", "--mode", "strict"], ["perturb"],
            ["verify", "--config", str(cfg)], ["census"], ["leaf-dump"]]
    mismatched, codes = [], {}
    for i, args in enumerate(runs):
        outs = [tmp_path / f"{i}-{k}" for k in range(2)]
        got = [main(args + ["--seed", "0", "--out", str(o)]) for o in outs]
        codes[" ".join(args[:3 if "--mode" in args else 1])] = got[0]
        a, b = (_reports(o) for o in outs)
        if got[0] != got[1] or not a or a != b:
            mismatched.append(args[0])
    ok = not mismatched
    report(9, ok, f"{len(runs)} commands re-run with seed 0, byte-identical reports "
                  f"{'for all' if ok else 'except ' + ','.join(mismatched)}; exit codes {codes}")
