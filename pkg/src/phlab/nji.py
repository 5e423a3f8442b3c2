"""Construction of the perturbed map and verification that it breaks joint
integrability of E^s + E^u.

Leaves are located by shooting: a point of W^s(p) at leafwise offset sigma is
g^-K(g^K p + sigma lambda_s^K e_s) for K large enough that the initial
segment is shorter than `length`; unstable points are built the same way with
g^K and g^-K swapped. Errors of the start point along the leaf are amplified
by g^-K but only move the result along the leaf.
"""

import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import qmc

from .cones import CertificationError, certify_model
from .coverings import (ScheduleError, build_schedule, build_tile_family, build_xi_covering,
                        intersection_bound, pair_cube, select_wandering_slices, verify_wandering)
from .models import (ChartedCube, Composite, ModelError, TileLayout, eigen_rates,
                     splitting_matrix, torus_delta, torus_dist, wrap)
from .perturbation import (Placement, build_elementary, compose_global, estimate_c1_size,
                           rectangle_points, shear_template)

SHOOT_LENGTH = 1e-8
GAP_FLOOR = 1e-11
RESOLVABLE = 1e-12  # smallest rectangle side rho*eta that double precision resolves on T^d
CONE_WIDTH = 0.1


class PipelineError(RuntimeError):
    def __init__(self, stage, message):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


# ---------------------------------------------------------------- construction

@dataclass(eq=False)
class Construction:
    base: object
    g: object
    schedule: object
    covering: object
    slices: object
    tiles: object
    placements: list
    certificate: object
    report: dict = field(default_factory=dict)

    def placement_doc(self):
        return {"schedule": self.schedule.to_doc(), "covering": self.covering.to_doc(),
                "slices": self.slices.to_doc(), "tiles": self.tiles.to_doc()}


def plan_schedule(f, mode="tight", kappa=0.05, rho=0.24, pair_radius=None, n_probes=10_000,
                  seed=0, targets=None):
    """Certificate, covering, wandering slices and the constant schedule for f."""
    targets = dict(targets or {})
    timings = {}
    t0 = time.perf_counter()
    theta = targets.pop("theta", None)
    try:
        cert = certify_model(f, narrowing_targets=(0.8 * min(kappa / 10, 1 / 20) if theta is None
                                                   else theta,))
    except CertificationError as exc:
        raise PipelineError("certify", str(exc)) from exc
    timings["certify"] = time.perf_counter() - t0
    B = splitting_matrix(f)
    dims = f.splitting_dims
    N = next(iter(cert.narrowing.values()))
    Delta = float(math.ceil(cert.norm_max * (1 + 1e-9)))
    t0 = time.perf_counter()
    cov = build_xi_covering(rho, B, dims, pair_radius=rho / 24 if pair_radius is None else pair_radius,
                            n_probes=n_probes, seed=seed)
    timings["covering"] = time.perf_counter() - t0
    if mode == "strict":
        sched = build_schedule(cert, dims, mode="strict", kappa=kappa, rho=rho, theta=theta, **targets)
        if sched.rho * sched.eta < RESOLVABLE:
            raise ScheduleError(f"infeasible eta_hat: eta_hat = exp({sched.logs['eta_hat']:.2f}), "
                                f"rectangle side rho*eta = exp({math.log(sched.rho) + sched.logs['eta']:.2f})"
                                f" is below double-precision resolution")
        slices = select_wandering_slices(f, cov, N, sched.eta_hat, mode="strict")
        return cert, cov, slices, sched, timings
    t0 = time.perf_counter()
    I = intersection_bound(f, cov, N)
    timings["intersection"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    slices = select_wandering_slices(f, cov, N, 0.99 / (10 * Delta * 2 ** (dims[0] + dims[2])))
    timings["wandering"] = time.perf_counter() - t0
    sched = build_schedule(cert, dims, mode="tight", kappa=kappa, rho=rho, theta=theta, xi=cov.xi,
                           I=I, eta_hat=slices.eta_hat, **targets)
    return cert, cov, slices, sched, timings


def break_joint_integrability(f, schedule=None, seed=0, *, kappa=0.05, mode="tight", plan=None,
                              verify_slices=True, n_probes=100_000, recertify=True):
    """Covering -> wandering slices -> sub-slices -> tiles -> rectangles -> composite g."""
    timings = {}
    if plan is None:
        plan = plan_schedule(f, mode=mode, kappa=kappa, seed=seed)
    cert, cov, slices, sched, plan_timings = plan
    if schedule is not None:
        sched = schedule
    timings.update(plan_timings)
    tiles = build_tile_family(sched.Delta, sched.s, sched.u, sched.mode,
                              None if sched.mode == "strict" else sched.L)
    layout = tiles.layout()
    placements = [Placement(ChartedCube(cov.centers[i], cov.rho, cov.frame, cov.dims),
                            np.array([slices.offsets[i]]), layout)
                  for i in range(len(cov))]
    t0 = time.perf_counter()
    # disjointness of the slices is certified by the greedy and re-checked below
    g = compose_global(f, placements, sched.kappa, sched.eta, check=False)
    timings["compose"] = time.perf_counter() - t0
    report = {"patches": len(placements), "rows": tiles.L, "period": tiles.period,
              "kappa": sched.kappa, "eta": sched.eta, "eta_hat": sched.eta_hat,
              "maximal_invariant_set": "whole torus (hypothesis W^u_t(x) in Lambda_g is vacuous)"}
    if sched.kappa > 0:
        h = build_elementary(sched.kappa, sched.eta, dims=cov.dims)
        c1 = estimate_c1_size(h, placements[0].cube, seed=seed)
        report["c1"] = c1.to_doc()
        if c1.unit_deviation > 10 * sched.kappa:
            raise PipelineError("c1", f"C1 deviation {c1.unit_deviation} exceeds 10 kappa")
    if verify_slices:
        t0 = time.perf_counter()
        rep = verify_wandering(f, cov, slices, sched.N, n_probes=n_probes, seed=seed)
        timings["wandering_check"] = time.perf_counter() - t0
        report["wandering_check"] = rep
        if rep["violations"]:
            raise PipelineError("wandering", f"{rep['violations']} overlapping slice probes")
    if recertify and isinstance(g, Composite) and g.patches:
        t0 = time.perf_counter()
        rng = np.random.default_rng(seed)
        extra = g.inverse(rectangle_points(g, 400, rng)[0])
        try:
            gcert = certify_model(g, width=CONE_WIDTH, extra_samples=extra, seed=seed)
        except CertificationError as exc:
            raise PipelineError("recertify", str(exc)) from exc
        timings["recertify"] = time.perf_counter() - t0
        report["recertification"] = gcert.to_doc()
    report["timings"] = timings
    return Construction(f, g, sched, cov, slices, tiles, placements, cert, report)


# ---------------------------------------------------------------- leaf shooting

def _depth(offsets, rate, length):
    big = float(np.max(np.abs(offsets))) if np.size(offsets) else 0.0
    if big <= length:
        return 0
    return int(math.ceil(math.log(length / big) / math.log(rate)))


def stable_points(model, p, sigmas, length=SHOOT_LENGTH):
    """Points of W^s(p) at (approximately leafwise) offsets sigma along E^s."""
    sigmas = np.atleast_1d(np.asarray(sigmas, dtype=float))
    B = splitting_matrix(model)
    lam_s, _ = eigen_rates(model)
    K = _depth(sigmas, lam_s, length)
    q = model.iterate(p, K)
    pts = wrap(q[None, :] + (sigmas * lam_s ** K)[:, None] * B[:, 0][None, :])
    return model.iterate(pts, -K)


def unstable_points(model, p, taus, length=SHOOT_LENGTH):
    """Points of W^u(p) at (approximately leafwise) offsets tau along E^u."""
    taus = np.atleast_1d(np.asarray(taus, dtype=float))
    B = splitting_matrix(model)
    _, lam_u = eigen_rates(model)
    K = _depth(taus, 1 / lam_u, length)
    q = model.iterate(p, -K)
    pts = wrap(q[None, :] + (taus / lam_u ** K)[:, None] * B[:, -1][None, :])
    return model.iterate(pts, K)


def leaf_length(model, p, offset, sigma="s", n=65, length=SHOOT_LENGTH):
    """Arclength of the shooting polyline from p to offset along the sigma leaf."""
    shoot = stable_points if sigma == "s" else unstable_points
    pts = shoot(model, p, np.linspace(0.0, offset, n), length)
    return float(np.sum(np.linalg.norm(torus_delta(pts[:-1], pts[1:]), axis=1)))




# ---------------------------------------------------------------- leaf crossings

@dataclass
class Crossing:
    sigma: float
    tau: float
    gap: float
    residual: float
    inside: bool
    distance: float
    point_s: list
    point_u: list


def _require_su1(model):
    s, c, u = model.splitting_dims
    if s != 1 or u != 1:
        raise ModelError("leaf crossings are implemented for one-dimensional E^s and E^u")
    return s, c, u


def crossing(model, xs, yu, sigma0, tau0, radius, slope=CONE_WIDTH, length=SHOOT_LENGTH,
             tol=1e-11, max_iter=30):
    """Refine a crossing of W^s(xs) and W^u(yu) in the frame (s, u) plane.

    The perturbations move only center and unstable coordinates, so stable
    leaves keep their frame u and unstable leaves their frame s. The disks can
    only come close where their (s, u) projections cross; there the distance is
    bounded below by the center gap over the leaf slopes. Disks whose
    projections miss are at least the projected distance apart.
    """
    s, c, u = _require_su1(model)
    B = splitting_matrix(model)
    Binv = np.linalg.inv(B)
    smin = float(np.linalg.svd(B, compute_uv=False)[-1])
    sigma, tau = float(sigma0), float(tau0)
    best, stalled = None, 0
    for _ in range(max_iter):
        S = stable_points(model, xs, [sigma], length)[0]
        U = unstable_points(model, yu, [tau], length)[0]
        z = Binv @ torus_delta(U, S)
        res = float(np.hypot(z[0], z[-1]))
        if best is None or res < 0.5 * best[0]:
            stalled = 0
        else:
            # the shooting roundoff floor (about lambda^K machine epsilons along the leaf)
            stalled += 1
        if best is None or res < best[0]:
            best = (res, sigma, tau, z, S, U)
        if res < tol or stalled >= 2:
            break
        sigma -= z[0]
        tau += z[-1]
        if abs(sigma) > radius + 1 or abs(tau) > radius + 1:
            break
    res, sigma, tau, z, S, U = best
    gap = float(np.linalg.norm(z[s:s + c]))
    inside = abs(sigma) <= radius and abs(tau) <= radius
    if inside:
        dist = smin * gap / math.sqrt(1 + 2 * slope ** 2)
    else:
        dist = smin * math.hypot(max(abs(sigma) - radius, 0.0), max(abs(tau) - radius, 0.0))
    return Crossing(sigma, tau, gap, res, inside, float(dist), S.tolist(), U.tolist())


def leaf_separation(model, xs, yu, radius, slope=CONE_WIDTH, length=SHOOT_LENGTH, reach=2,
                    margin=0.05):
    """Lower bound on d(W^s_radius(xs), W^u_radius(yu)) and the crossings it used.

    Crossings of the straight frame lines through xs and yu are enumerated over
    torus translates; each one near both disks is refined on the true leaves.
    """
    _require_su1(model)
    B = splitting_matrix(model)
    Binv = np.linalg.inv(B)
    smin = float(np.linalg.svd(B, compute_uv=False)[-1])
    d = model.d
    base = torus_delta(xs, yu)
    ks = np.array(np.meshgrid(*([np.arange(-reach, reach + 1)] * d), indexing="ij")).reshape(d, -1).T
    z = (Binv @ (base[None, :] + ks).T).T
    sig0, tau0 = z[:, 0], -z[:, -1]
    projected = smin * np.hypot(np.maximum(np.abs(sig0) - radius, 0), np.maximum(np.abs(tau0) - radius, 0))
    seen, found = set(), []
    for k in np.argsort(projected, kind="stable"):
        if abs(sig0[k]) > radius + margin or abs(tau0[k]) > radius + margin:
            continue
        key = (round(float(sig0[k]), 7), round(float(tau0[k]), 7))
        if key in seen:
            continue
        seen.add(key)
        found.append(crossing(model, xs, yu, sig0[k], tau0[k], radius, slope, length))
    if not found:
        return float(projected.min()), []
    return min(cr.distance for cr in found), found


# ---------------------------------------------------------------- witnesses

@dataclass
class NJIWitness:
    pair: int
    x: list
    y: list
    sigma: float
    d_s: float
    x_prime: list
    tau: float
    d_u: float
    delta: float
    gap: float
    n: int
    cube: int
    row: int
    level: float
    hit: str
    chain: float
    chain_bound: float
    recheck: float
    crossings: int


@dataclass(eq=False)
class _SearchContext:
    g: object
    centers: np.ndarray
    offsets: np.ndarray
    cov: object
    anchors: np.ndarray
    period: float
    L: int
    eta: float
    rho: float
    theta: float
    Delta: float
    gamma: float
    t: float
    r: float
    r_prime: float
    slope: float
    levels: tuple
    Binv: np.ndarray = None
    lam_u: float = None

    def __post_init__(self):
        self.Binv = np.linalg.inv(splitting_matrix(self.g))
        self.lam_u = eigen_rates(self.g)[1]

    def chart(self, idx, p):
        return 0.5 + self.Binv @ torus_delta(self.centers[idx], p) / self.rho


def shear_levels(n=4001):
    """Unit u-levels in [1/4, 3/4] where the shear template's slope is extremal."""
    b = np.linspace(0.25, 0.75, n)
    g1 = shear_template(b)[1]
    return float(b[np.argmax(g1)]), float(b[np.argmin(g1)])


def search_context(con, slope=CONE_WIDTH):
    sched, tiles = con.schedule, con.tiles
    return _SearchContext(con.g, con.covering.centers, np.asarray(con.slices.offsets, dtype=float),
                          con.covering, np.asarray(tiles.anchors, dtype=float), float(tiles.period),
                          int(tiles.L), float(sched.eta), float(sched.rho), float(sched.theta),
                          float(sched.Delta), float(sched.gamma), float(sched.t), float(sched.r),
                          float(sched.r_prime), float(slope), shear_levels())


def sample_pairs(d, n_pairs, seed=0, r=0.25, r_prime=0.3, margin=0.002):
    """Base points from a scrambled Halton sequence and signed stable offsets in [r, r'].

    Every pair gets its own spawned stream, so results do not depend on how
    pairs are split across workers.
    """
    xs = qmc.Halton(d=d, scramble=True, seed=seed).random(n_pairs)
    out = []
    for x, ss in zip(xs, np.random.SeedSequence(seed).spawn(n_pairs)):
        rng = np.random.default_rng(ss)
        sigma = rng.uniform(r + margin, r_prime - margin) * rng.choice([-1.0, 1.0])
        out.append((x, float(sigma)))
    return out


def _window_iterates(ctx, x, y, n_max=80):
    """Iterates n at which the stable separation lies in [4, 4 Delta] tile widths."""
    lo, hi = 4.0, 4.0 * ctx.Delta
    P, Q = np.array(x, dtype=float), np.array(y, dtype=float)
    orbit, hits = [], []
    for n in range(n_max + 1):
        orbit.append((P, Q))
        ds = abs((ctx.Binv @ torus_delta(P, Q))[0]) / (ctx.rho * ctx.eta)
        if lo <= ds <= hi:
            hits.append(n)
        elif ds < lo:
            break
        P, Q = ctx.g.eval(P), ctx.g.eval(Q)
    return hits, orbit


def row_candidates(ctx, tP, tQ):
    """Rows where one unstable disk meets a 1/2-tile and the other misses the row.

    tP, tQ are chart s-coordinates in tile widths; unstable disks have constant
    frame s, so each row test reduces to the position of t modulo the period.
    """
    top = 1.0 / ctx.eta - 1.0
    out = []
    rP, rQ = np.mod(tP - ctx.anchors, ctx.period), np.mod(tQ - ctx.anchors, ctx.period)
    okP = (tP - rP >= -1e-9) & (tP - rP <= top + 1e-9)
    okQ = (tQ - rQ >= -1e-9) & (tQ - rQ <= top + 1e-9)
    hitP, hitQ = okP & (np.abs(rP - 0.5) <= 0.25), okQ & (np.abs(rQ - 0.5) <= 0.25)
    missP, missQ = ~(okP & (rP <= 1.0)), ~(okQ & (rQ <= 1.0))
    for b in np.flatnonzero(hitP & missQ):
        out.append((0.25 - abs(rP[b] - 0.5), int(b), "x"))
    for b in np.flatnonzero(hitQ & missP):
        out.append((0.25 - abs(rQ[b] - 0.5), int(b), "y"))
    out.sort(key=lambda c: (-c[0], c[1]))
    return out


def _aim(ctx, x, n, idx, level, tol=1e-10, max_iter=30):
    """Offset tau on W^u(x) whose n-th iterate sits at chart u-level `level` of cube idx."""
    gain = ctx.lam_u ** n / ctx.rho
    tau = 0.0
    xp, xn = np.array(x, dtype=float), ctx.g.iterate(x, n)
    for _ in range(max_iter):
        err = level - ctx.chart(idx, xn)[-1]
        if abs(err) < tol:
            break
        tau += err / gain
        xp = unstable_points(ctx.g, x, [tau])[0]
        xn = ctx.g.iterate(xp, n)
    return tau, xp, xn


def _measure(ctx, xp, y, length=SHOOT_LENGTH):
    return leaf_separation(ctx.g, xp, y, ctx.gamma, ctx.slope, length)


def find_witness(ctx, k, x, sigma, max_rows=3):
    """Search for x' in W^u_t(x) whose stable disk misses W^u_gamma(y); returns
    (NJIWitness or None, diagnostic dict)."""
    g = ctx.g
    x = np.asarray(x, dtype=float)
    y = stable_points(g, x, [sigma])[0]
    d_s = leaf_length(g, x, sigma, "s")
    diag = {"pair": k, "x": x.tolist(), "y": y.tolist(), "sigma": sigma, "d_s": d_s, "tried": []}
    if not ctx.r <= d_s <= ctx.r_prime:
        diag["reason"] = "stable distance outside [r, r']"
        return None, diag
    hits, orbit = _window_iterates(ctx, x, y)
    order = hits + [n for m in hits for n in (m - 1, m + 1) if n >= 0 and n not in hits]
    best = None
    for n in order:
        if n >= len(orbit):
            continue
        P, Q = orbit[n]
        idx, depth = pair_cube(ctx.cov, P, Q)
        idx = int(idx[0])
        if idx < 0:
            diag["tried"].append({"n": n, "cube": -1})
            continue
        qP, qQ = ctx.chart(idx, P), ctx.chart(idx, Q)
        rows = row_candidates(ctx, qP[0] / ctx.eta, qQ[0] / ctx.eta)
        diag["tried"].append({"n": n, "cube": idx, "chart_P": qP.tolist(), "chart_Q": qQ.tolist(),
                              "rows": [b for _, b, _ in rows[:max_rows]]})
        for _, b, who in rows[:max_rows]:
            for yu in ctx.levels:
                level = ctx.offsets[idx] + ctx.eta * (b + yu)
                tau, xp, xn = _aim(ctx, x, n, idx, level)
                delta, crs = _measure(ctx, xp, y)
                diag["tried"][-1].setdefault("deltas", []).append(delta)
                if best is None or delta > best[0]:
                    best = (delta, n, idx, b, level, who, tau, xp, xn, crs)
            if best[0] > GAP_FLOOR:
                break
        if best is not None and best[0] > GAP_FLOOR:
            break
    if best is None or not best[0] > GAP_FLOOR:
        diag["reason"] = "no candidate separated the leaves"
        diag["delta"] = None if best is None else best[0]
        return None, diag
    delta, n, idx, b, level, who, tau, xp, xn, crs = best
    d_u = leaf_length(g, x, tau, "u")
    # distance chain at the witness iterate through the product point y'
    inside = [cr for cr in crs if cr.inside] or crs
    chain = min(torus_dist(g.iterate(np.array(cr.point_s), n), xn) for cr in inside)
    chain_bound = 2 * ctx.theta + 4 * ctx.rho * ctx.eta * ctx.Delta
    recheck = _measure(ctx, xp, y, SHOOT_LENGTH / 2)[0]
    w = NJIWitness(k, x.tolist(), y.tolist(), float(sigma), d_s, xp.tolist(), float(tau), d_u,
                   float(delta), float(min(cr.gap for cr in crs)), int(n), idx, int(b), float(level),
                   who, float(chain), float(chain_bound), float(recheck), len(crs))
    problems = []
    if d_u > ctx.t:
        problems.append("unstable distance exceeds t")
    if not chain < chain_bound <= ctx.rho / 4:
        problems.append("distance chain violated")
    if abs(recheck - delta) > 0.1 * delta:
        problems.append("recheck disagrees by more than 10%")
    if problems:
        diag["reason"] = "; ".join(problems)
        diag["witness"] = asdict(w)
        return None, diag
    return w, diag


# ---------------------------------------------------------------- verification

@dataclass
class VerificationReport:
    samples: int
    witnesses: list
    failures: list
    delta_min: float
    delta_median: float
    n_max: int
    scale: float
    baseline: dict | None = None
    robustness: dict | None = None
    timings: dict = field(default_factory=dict)

    @property
    def passed(self):
        return not self.failures and len(self.witnesses) == self.samples

    def to_doc(self):
        doc = asdict(self)
        doc["passed"] = self.passed
        return doc


_WORKER_CTX = None


def _init_worker(ctx):
    global _WORKER_CTX
    _WORKER_CTX = ctx


def _run_chunk(task):
    fn, items = task
    return [fn(_WORKER_CTX, *item) for item in items]


def _parallel(fn, ctx, items, workers):
    if not workers or workers <= 1 or len(items) <= 1:
        return [fn(ctx, *item) for item in items]
    size = max(1, math.ceil(len(items) / (4 * workers)))
    chunks = [items[i:i + size] for i in range(0, len(items), size)]
    with ProcessPoolExecutor(workers, initializer=_init_worker, initargs=(ctx,)) as ex:
        parts = list(ex.map(_run_chunk, [(fn, c) for c in chunks]))
    return [r for part in parts for r in part]


def _pair_task(ctx, k, x, sigma):
    return find_witness(ctx, k, x, sigma)


def summarize(witnesses, failures, samples, scale):
    deltas = [w.delta for w in witnesses]
    return VerificationReport(samples, witnesses, failures,
                              float(min(deltas)) if deltas else 0.0,
                              float(np.median(deltas)) if deltas else 0.0,
                              max((w.n for w in witnesses), default=0), float(scale))


def verify_nji(con, n_pairs=100, seed=0, workers=None):
    """Witness search for sampled stable pairs of the constructed map."""
    t0 = time.perf_counter()
    ctx = search_context(con)
    pairs = sample_pairs(con.g.d, n_pairs, seed, ctx.r, ctx.r_prime)
    items = [(k, x, s) for k, (x, s) in enumerate(pairs)]
    results = _parallel(_pair_task, ctx, items, workers)
    witnesses = [w for w, _ in results if w is not None]
    failures = [diag for w, diag in results if w is None]
    sched = con.schedule
    rep = summarize(witnesses, failures, n_pairs, sched.rho * sched.kappa * sched.eta / 20)
    rep.timings["verify"] = time.perf_counter() - t0
    return rep


def joint_integrability_probe(model, n_pairs=10, seed=0, t=0.25, gamma=0.35, r=0.25, r_prime=0.3,
                              n_xprime=17):
    """sup over x' in W^u_t(x) of d(W^s_gamma(x'), W^u_gamma(y)) for sampled stable pairs."""
    _require_su1(model)
    sups = []
    for x, sigma in sample_pairs(model.d, n_pairs, seed, r, r_prime):
        y = stable_points(model, x, [sigma])[0]
        taus = np.linspace(-t, t, n_xprime)
        xps = unstable_points(model, x, taus)
        sups.append(max(leaf_separation(model, xp, y, gamma)[0] for xp in xps))
    return {"pairs": n_pairs, "x_prime_per_pair": n_xprime, "sup": float(max(sups)),
            "per_pair": [float(v) for v in sups],
            "positive": int(sum(v > GAP_FLOOR for v in sups))}


def lipschitz_separation_check(theta, alpha, kappa, eta, samples=1000, seed=0, n=33):
    """Adversarial search over a theta-Lipschitz graph over the unstable core and
    alpha-Lipschitz graphs over the stable coordinate meeting it; returns
    (passed, worst) where passed means no center gap exceeds kappa eta / 20."""
    rng = np.random.default_rng(seed)
    bound = kappa * eta / 20
    u = np.linspace(eta / 4, 3 * eta / 4, n)
    s = np.linspace(0.0, 1.0, n)
    worst = {"max_gap": 0.0, "bound": bound, "sample": None}
    for k in range(samples):
        adversarial = k % 2 == 0
        sl1 = theta * (np.full(n - 1, rng.choice([-1.0, 1.0])) if adversarial else rng.uniform(-1, 1, n - 1))
        c1 = rng.uniform(0, 1) + np.concatenate([[0.0], np.cumsum(sl1 * np.diff(u))])
        if adversarial:
            meets = [(int(np.argmax(c1)), 1.0), (int(np.argmin(c1)), -1.0)]
        else:
            meets = [(int(rng.integers(n)), None), (int(rng.integers(n)), None)]
        values = []
        for i, sign in meets:
            j = int(rng.integers(n)) if sign is None else 0
            sl = alpha * (np.full(n - 1, sign) if sign is not None else rng.uniform(-1, 1, n - 1))
            c = np.concatenate([[0.0], np.cumsum(sl * np.diff(s))])
            values.append(c - c[j] + c1[i])
        vals = np.concatenate(values)
        gap = float(vals.max() - vals.min())
        if gap > worst["max_gap"]:
            worst = {"max_gap": gap, "bound": bound, "sample": k}
    worst["slack"] = bound - worst["max_gap"]
    return worst["max_gap"] < bound or worst["max_gap"] == 0.0, worst


# ---------------------------------------------------------------- robustness

def _extra_patch(con, size, rng, witnesses, eta_extra=0.2, u_offset=0.05):
    """Single elementary rectangle of C1 size `size` in a cube far from the witness cubes."""
    from .models import LocalPatch
    cov = con.covering
    ref = build_elementary(0.05, eta_extra, dims=cov.dims)
    chart0 = ChartedCube(cov.centers[0], cov.rho, cov.frame, cov.dims)
    per_kappa = estimate_c1_size(ref, chart0).unit_deviation / 0.05
    kappa = size / per_kappa
    if kappa >= 1:
        raise ModelError("perturbation size too large for an elementary perturbation")
    used = np.array([cov.centers[w.cube] for w in witnesses]).reshape(-1, cov.d)
    if len(used):
        far = np.array([torus_dist(used, c).min() for c in cov.centers])
        pool = np.flatnonzero(far >= np.quantile(far, 0.9))
    else:
        pool = np.arange(len(cov))
    i = int(rng.choice(pool))
    cube = ChartedCube(cov.centers[i], cov.rho, cov.frame, cov.dims)
    a = rng.uniform(0.1, 0.9 - eta_extra) / eta_extra
    patch = LocalPatch(cube, np.array([u_offset]), TileLayout(1, np.array([[a]]), None),
                       build_elementary(kappa, eta_extra, dims=cov.dims))
    return patch, {"cube": i, "kappa": float(kappa), "eta": eta_extra, "anchor": float(a * eta_extra)}


def _recheck_task(ctx, k, x, sigma, tau):
    g = ctx.g
    y = stable_points(g, x, [sigma])[0]
    xp = unstable_points(g, x, [tau])[0]
    return leaf_separation(g, xp, y, ctx.gamma, ctx.slope)[0]


def witnesses_persist(con, witnesses, g2, workers=None):
    ctx = search_context(con)
    ctx.g = g2
    items = [(w.pair, np.array(w.x), w.sigma, w.tau) for w in witnesses]
    deltas = _parallel(_recheck_task, ctx, items, workers)
    lost = [w.pair for w, dl in zip(witnesses, deltas) if not dl > GAP_FLOOR]
    return lost, deltas


def robustness_recheck(con, report, size=None, rounds=4, seed=0, workers=None):
    """Persistence of the witnesses under an extra small perturbation.

    Tests `size` (default delta_min / (10 Delta^n_max)), then bisects
    geometrically for `rounds` rounds towards the construction's kappa when
    the witnesses persist, or towards 0 when they do not.
    """
    Delta = con.schedule.Delta
    if size is None:
        size = report.delta_min / (10 * Delta ** report.n_max)
    rng = np.random.default_rng(seed)
    trials = []

    def trial(sz):
        if sz <= 0:
            trials.append({"size": 0.0, "persist": True, "lost": []})
            return True
        patch, where = _extra_patch(con, sz, rng, report.witnesses)
        g2 = Composite(con.g, (patch,))
        lost, deltas = witnesses_persist(con, report.witnesses, g2, workers)
        trials.append({"size": float(sz), "persist": not lost, "lost": lost, "placement": where,
                       "delta_min": float(min(deltas)) if deltas else None})
        return not lost

    ok = trial(size)
    lo, hi = (size, con.schedule.kappa) if ok else (0.0, size)
    margin = size if ok else 0.0
    for _ in range(rounds):
        mid = math.sqrt(lo * hi) if lo > 0 else hi / 1e3
        if trial(mid):
            lo, margin = mid, mid
        else:
            hi = mid
    return {"size": float(size), "persist_at_size": ok, "margin": float(margin), "rounds": rounds,
            "trials": trials}
