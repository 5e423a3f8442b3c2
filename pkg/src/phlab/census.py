"""Box-graph census: chain classes, terminal classes (quasi-attractor candidates),
minimal unstable-saturated sets and an entropy lower bound.

Box graphs are outer approximations. Each box is sampled at its cell centers and
every sample image is inflated by a per-axis bloat covering the image of its
sample cell. For skew products (and composites of one) the fiber coordinate is
handled by an exact interval map of the fiber box, and the base cover is shared by
all boxes over the same base cell.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from .models import Composite, LinearToral, ModelError, SkewProduct, eigen_rates, splitting_matrix, torus_dist
from .perturbation import patch_displacement_bound


class SaturationError(RuntimeError):
    pass


class DisjointnessError(RuntimeError):
    pass


class EntropyError(RuntimeError):
    pass


# ---------------------------------------------------------------- box graph

@dataclass(eq=False)
class BoxGraph:
    resolution: tuple
    bloat: np.ndarray
    samples_per_box: int
    indptr: np.ndarray
    indices: np.ndarray
    fiber_axis: int | None = None
    model: object = field(default=None, repr=False)

    @property
    def n_boxes(self):
        return int(np.prod(self.resolution))

    @property
    def n_edges(self):
        return int(len(self.indices))

    @property
    def d(self):
        return len(self.resolution)

    def successors(self, i):
        return self.indices[self.indptr[i]:self.indptr[i + 1]]

    def matrix(self):
        n = self.n_boxes
        return csr_matrix((np.ones(len(self.indices), dtype=np.int8), self.indices, self.indptr), shape=(n, n))

    def box_of(self, points):
        pts = np.atleast_2d(points) % 1.0
        idx = np.minimum(np.floor(pts * np.array(self.resolution)).astype(np.int64),
                         np.array(self.resolution) - 1)
        return np.ravel_multi_index(idx.T, self.resolution)

    def box_lower(self, boxes):
        return np.stack(np.unravel_index(np.asarray(boxes), self.resolution), axis=1) / np.array(self.resolution)

    def box_samples(self, boxes, per_axis):
        """Cell-center samples (len(boxes) * per_axis^d, d) and the box of each."""
        boxes = np.asarray(boxes, dtype=np.int64)
        lo = self.box_lower(boxes)
        side = 1.0 / np.array(self.resolution)
        t = (np.arange(per_axis) + 0.5) / per_axis
        offs = np.stack(np.meshgrid(*([t] * self.d), indexing="ij"), axis=-1).reshape(-1, self.d)
        pts = lo[:, None, :] + offs[None, :, :] * side
        return pts.reshape(-1, self.d), np.repeat(boxes, len(offs))

    def to_doc(self):
        return {"resolution": list(self.resolution), "bloat": [float(b) for b in self.bloat],
                "samples_per_box": self.samples_per_box, "edges": self.n_edges,
                "fiber_axis": self.fiber_axis}


def _check_resolution(resolution, d):
    res = tuple(int(r) for r in (resolution if np.ndim(resolution) else [resolution] * d))
    if len(res) != d:
        raise ModelError(f"resolution needs {d} entries")
    for r in res:
        if r < 1 or r & (r - 1):
            raise ModelError("resolution must be a power of 2 on every axis")
    return res


def _skew_core(model):
    """(skew product, extra fiber displacement) if model is a skew product or a
    composite over one whose patches move only the fiber coordinate; else None."""
    extra = 0.0
    while isinstance(model, Composite):
        B = splitting_matrix(model)
        s, c, u = model.splitting_dims
        center = B[:, s:s + c]
        if np.any(center[:2] != 0):
            return None
        extra += patch_displacement_bound(model)
        model = model.base
    if isinstance(model, SkewProduct):
        return model, extra
    return None


def _lipschitz(model, pts):
    D = np.abs(model.derivative(pts))
    return D.max(axis=0)


def _axis_ranges(q, b, n, open_ends=False):
    """Box index ranges [lo, hi] on one axis covered by [q - b, q + b] (unwrapped)."""
    if open_ends:
        tol = 1e-12
        lo = np.floor((q - b) * n + tol).astype(np.int64)
        hi = np.ceil((q + b) * n - tol).astype(np.int64) - 1
        hi = np.maximum(hi, lo)
    else:
        lo = np.floor((q - b) * n).astype(np.int64)
        hi = np.floor((q + b) * n).astype(np.int64)
    return lo, hi


def _cover_pairs(src, los, his, res):
    """Edges src -> every box in the per-axis index ranges (indices taken mod res)."""
    spans = [np.minimum(h - l + 1, r) for l, h, r in zip(los, his, res)]
    width = max(int(s.max()) for s in spans) if len(src) else 1
    out_src, out_dst = [], []
    grids = np.stack(np.meshgrid(*([np.arange(width)] * len(res)), indexing="ij"), axis=-1).reshape(-1, len(res))
    for off in grids:
        ok = np.ones(len(src), dtype=bool)
        idx = []
        for a, (l, s, r) in enumerate(zip(los, spans, res)):
            ok &= off[a] < s
            idx.append((l + off[a]) % r)
        if not np.any(ok):
            continue
        flat = np.ravel_multi_index([i[ok] for i in idx], res)
        out_src.append(src[ok])
        out_dst.append(flat)
    return np.concatenate(out_src), np.concatenate(out_dst)


def _assemble(src, dst, n):
    key = np.unique(src.astype(np.int64) * n + dst.astype(np.int64))
    s, t = key // n, key % n
    indptr = np.searchsorted(s, np.arange(n + 1)).astype(np.int64)
    return indptr, t.astype(np.int64)


def default_fiber_bloat(model, n_fiber, samples_per_box):
    """Zero for a grid-aligned identity fiber, one sample half-cell otherwise."""
    core = _skew_core(model)
    if core is not None and core[1] == 0.0:
        sk = core[0]
        if sk.eps == 0 and abs(sk.omega * n_fiber - round(sk.omega * n_fiber)) < 1e-12:
            return 0.0
    return 0.5 / (samples_per_box * n_fiber)


def build_box_graph(model, resolution, bloat=None, samples_per_box=4, seed=0):
    """Outer approximation of `model` on a grid of boxes.

    bloat: per-axis inflation of sample images; default is the Lipschitz bound of
    one sample cell (sum_j max|Df_ij| * half cell_j) on every non-fiber axis and
    default_fiber_bloat on the fiber. Samples are deterministic cell centers, so
    `seed` is accepted for interface symmetry only.
    """
    d = model.d
    res = _check_resolution(resolution, d)
    core = _skew_core(model)
    s = int(samples_per_box)
    half = 0.5 / (s * np.array(res, dtype=float))
    if core is None:
        graph = BoxGraph(res, np.zeros(d), s, None, None, None, model)
        boxes = np.arange(graph.n_boxes)
        if bloat is None:
            probe, _ = graph.box_samples(boxes[:: max(1, len(boxes) // 512)], s)
            bloat = _lipschitz(model, probe) @ half
        bloat = np.broadcast_to(np.asarray(bloat, dtype=float), (d,)).copy()
        src_all, dst_all = [], []
        for chunk in np.array_split(boxes, max(1, len(boxes) * s ** d // 200_000)):
            pts, src = graph.box_samples(chunk, s)
            q = model.eval(pts)
            los, his = zip(*[_axis_ranges(q[:, a], bloat[a], res[a]) for a in range(d)])
            a_src, a_dst = _cover_pairs(src, los, his, res)
            src_all.append(a_src)
            dst_all.append(a_dst)
        indptr, indices = _assemble(np.concatenate(src_all), np.concatenate(dst_all), graph.n_boxes)
        graph.bloat, graph.indptr, graph.indices = bloat, indptr, indices
        return graph

    # product structure: base cover per base cell, exact fiber interval per fiber box
    skew, extra = core
    nb, nf = res[:2], res[2]
    if bloat is None:
        bloat = np.zeros(3)
        bloat[:2] = np.abs(skew.A) @ half[:2]
        bloat[2] = default_fiber_bloat(model, nf, s)
    bloat = np.broadcast_to(np.asarray(bloat, dtype=float), (3,)).copy()
    base = LinearToral(skew.A)
    cells = np.arange(nb[0] * nb[1])
    lo = np.stack(np.unravel_index(cells, nb), axis=1) / np.array(nb)
    t = (np.arange(s) + 0.5) / s
    offs = np.stack(np.meshgrid(t, t, indexing="ij"), axis=-1).reshape(-1, 2)
    pts = (lo[:, None, :] + offs[None] / np.array(nb)).reshape(-1, 2)
    q = base.eval(pts)
    csrc = np.repeat(cells, len(offs))
    los, his = zip(*[_axis_ranges(q[:, a], bloat[a], nb[a]) for a in range(2)])
    b_src, b_dst = _cover_pairs(csrc, los, his, nb)
    key = np.unique(b_src * (nb[0] * nb[1]) + b_dst)
    b_src, b_dst = key // (nb[0] * nb[1]), key % (nb[0] * nb[1])
    # fiber: monotone circle map, images of the box end points are exact
    fb = np.arange(nf)
    a0, a1 = fb / nf, (fb + 1) / nf
    lo_f = skew.fiber(a0) - extra - bloat[2]
    hi_f = skew.fiber(a1) + extra + bloat[2]
    flo, fhi = _axis_ranges((lo_f + hi_f) / 2, (hi_f - lo_f) / 2, nf, open_ends=True)
    f_src, f_dst = _cover_pairs(fb, [flo], [fhi], (nf,))
    # product edges (cell, fiber) -> (cell', fiber')
    src = (b_src[:, None] * nf + f_src[None, :]).ravel()
    dst = (b_dst[:, None] * nf + f_dst[None, :]).ravel()
    indptr, indices = _assemble(src, dst, nb[0] * nb[1] * nf)
    return BoxGraph(res, bloat, s, indptr, indices, 2, model)


def outer_soundness(graph, n=10_000, seed=0):
    """Random points whose true one-step transition is missing from the graph."""
    rng = np.random.default_rng(seed)
    p = rng.random((n, graph.d))
    src, dst = graph.box_of(p), graph.box_of(graph.model.eval(p))
    M = graph.matrix()
    missing = np.flatnonzero(np.asarray(M[src, dst]).ravel() == 0)
    return {"points": n, "missing": int(missing.size),
            "witness": None if missing.size == 0 else p[missing[0]].tolist()}


# ---------------------------------------------------------------- chain classes

@dataclass(eq=False)
class Condensation:
    labels: np.ndarray
    n_components: int
    recurrent: np.ndarray
    dag: dict
    classes: list

    @property
    def terminal(self):
        return [c for c in self.classes if not self.dag.get(c)]


def chain_classes(graph):
    """Strongly connected components restricted to boxes on cycles, plus the DAG."""
    M = graph.matrix()
    n_comp, labels = connected_components(M, directed=True, connection="strong")
    src = np.repeat(np.arange(graph.n_boxes), np.diff(graph.indptr))
    dst = graph.indices
    ls, ld = labels[src], labels[dst]
    size = np.bincount(labels, minlength=n_comp)
    recurrent = size > 1
    self_loop = src == dst
    recurrent[np.unique(ls[self_loop])] = True
    cross = ls != ld
    dag = {}
    for a, b in np.unique(np.stack([ls[cross], ld[cross]], axis=1), axis=0):
        dag.setdefault(int(a), set()).add(int(b))
    classes = [int(c) for c in np.flatnonzero(recurrent)]
    return Condensation(labels, int(n_comp), recurrent, dag, classes)


def _rle(boxes):
    boxes = np.unique(np.asarray(boxes, dtype=np.int64))
    if boxes.size == 0:
        return []
    breaks = np.flatnonzero(np.diff(boxes) != 1)
    starts = np.concatenate([[boxes[0]], boxes[breaks + 1]])
    ends = np.concatenate([boxes[breaks], [boxes[-1]]])
    return [[int(a), int(b - a + 1)] for a, b in zip(starts, ends)]


def _neighbors(graph, boxes):
    """Boxes sharing a face or corner with the set (torus wrap)."""
    idx = np.stack(np.unravel_index(np.asarray(boxes), graph.resolution), axis=1)
    out = []
    for off in np.stack(np.meshgrid(*([np.arange(-1, 2)] * graph.d), indexing="ij"), -1).reshape(-1, graph.d):
        out.append(np.ravel_multi_index(((idx + off) % np.array(graph.resolution)).T, graph.resolution))
    return np.unique(np.concatenate(out))


def trapping_flag(graph, boxes):
    """One-level check f(closure U) in U for U = the class plus its one-box ring."""
    U = _neighbors(graph, boxes)
    inside = np.zeros(graph.n_boxes, dtype=bool)
    inside[U] = True
    succ = np.concatenate([graph.successors(b) for b in U])
    return bool(np.all(inside[succ]))


@dataclass
class CensusReport:
    resolution: list
    chain_classes: int
    terminal_classes: int
    volumes: list
    trapping: list
    saturated: list
    minimal_u_saturated: int | None
    boxes: list

    def to_doc(self):
        return {"resolution": self.resolution, "chain_classes": self.chain_classes,
                "terminal_classes": self.terminal_classes, "volumes": self.volumes,
                "trapping": self.trapping, "saturated": self.saturated,
                "minimal_u_saturated": self.minimal_u_saturated, "boxes": self.boxes}


def class_boxes(cond, c):
    return np.flatnonzero(cond.labels == c)


def quasi_attractor_census(graph, cond, handle=None, minimal=True):
    """Terminal classes with volume, trapping flag and unstable saturation flag."""
    terms = cond.terminal
    n = graph.n_boxes
    vols, traps, sats, boxes = [], [], [], []
    for c in terms:
        b = class_boxes(cond, c)
        vols.append(len(b) / n)
        traps.append(trapping_flag(graph, b))
        sat = u_saturate(graph, b, handle)
        sats.append(bool(len(sat) == len(b)))
        boxes.append(_rle(b))
    n_min = len(minimal_u_saturated(graph, cond, handle)) if minimal else None
    return CensusReport(list(graph.resolution), len(cond.classes), len(terms), vols, traps, sats, n_min, boxes)


# ---------------------------------------------------------------- unstable saturation

def straight_unstable_handle(model):
    """Local unstable disks as straight segments along the base unstable direction.

    Exact for linear maps and skew products over them (the fiber map does not
    depend on the base point); for composites the leaves tilt by at most the
    patch displacement scale, far below any box size.
    """
    B = splitting_matrix(model)
    s, c, u = model.splitting_dims
    if u == 0:
        raise ModelError("model has no unstable direction")
    e = B[:, -1]

    def disks(points, taus):
        return (points[:, None, :] + np.asarray(taus)[None, :, None] * e[None, None, :]).reshape(-1, len(e)) % 1.0

    return disks


def u_saturate(graph, boxes, handle=None, per_axis=2, cap=100_000):
    """Closure of a box set under boxes met by local unstable disks (radius = box diameter)."""
    boxes = np.unique(np.asarray(boxes, dtype=np.int64))
    if boxes.size == 0:
        return boxes
    handle = straight_unstable_handle(graph.model) if handle is None else handle
    side = 1.0 / np.array(graph.resolution)
    diam = float(np.linalg.norm(side))
    m = 2 * math.ceil(diam / (0.5 * side.min())) + 1
    taus = np.linspace(-diam, diam, m)
    member = np.zeros(graph.n_boxes, dtype=bool)
    member[boxes] = True
    queue = boxes
    rounds = 0
    while queue.size:
        rounds += 1
        if rounds > cap:
            raise SaturationError("unstable saturation did not reach a fixpoint")
        pts, _ = graph.box_samples(queue, per_axis)
        hit = np.unique(graph.box_of(handle(pts, taus)))
        new = hit[~member[hit]]
        member[new] = True
        queue = new
    return np.flatnonzero(member)


def forward_closure(graph, boxes):
    member = np.zeros(graph.n_boxes, dtype=bool)
    queue = np.unique(np.asarray(boxes, dtype=np.int64))
    member[queue] = True
    while queue.size:
        succ = np.unique(np.concatenate([graph.successors(b) for b in queue]))
        new = succ[~member[succ]]
        member[new] = True
        queue = new
    return np.flatnonzero(member)


def invariant_saturated_closure(graph, boxes, handle=None):
    """Smallest box set containing `boxes`, closed under the graph and saturation."""
    cur = np.unique(np.asarray(boxes, dtype=np.int64))
    while True:
        nxt = u_saturate(graph, forward_closure(graph, cur), handle)
        if len(nxt) == len(cur):
            return nxt
        cur = nxt


def minimal_u_saturated(graph, cond, handle=None, seeds_per_class=3):
    """Inclusion-minimal closed saturated sets grown from single boxes of each
    terminal class; pairwise disjointness is asserted at box scale."""
    found = []
    for c in cond.terminal:
        b = class_boxes(cond, c)
        picks = b[np.linspace(0, len(b) - 1, min(seeds_per_class, len(b))).astype(int)]
        for p in picks:
            S = invariant_saturated_closure(graph, [p], handle)
            if not any(np.array_equal(S, T) for T in found):
                found.append(S)
    sets = [set(S.tolist()) for S in found]
    minimal = [S for i, S in enumerate(found)
               if not any(j != i and sets[j] < sets[i] for j in range(len(found)))]
    assert_disjoint(minimal)
    return minimal


def assert_disjoint(sets):
    """Distinct minimal closed sets cannot overlap; an overlap means a shared
    sub-closure was never seeded or the resolution is too coarse."""
    for i in range(len(sets)):
        for j in range(i + 1, len(sets)):
            if np.intersect1d(sets[i], sets[j]).size:
                raise DisjointnessError("two minimal saturated sets share a box; refine the resolution")


# ---------------------------------------------------------------- entropy

def _unstable_segment(model, points, lo, hi, m=33):
    B = splitting_matrix(model)
    e = B[:, -1]
    t = np.linspace(lo, hi, m)
    return (points[:, None, :] + t[None, :, None] * e[None, None, :]) % 1.0


def _diameter(curves):
    """Diameter lower bound per curve: largest torus distance to the first sample."""
    return np.max(torus_dist(curves[:, :1, :], curves), axis=1)


def _iterate_curves(model, curves, k):
    n, m, d = curves.shape
    return model.iterate(curves.reshape(-1, d), k).reshape(n, m, d)


def measure_k0(model, points, eta_sep, gamma, k_cap=64):
    """Iterations for unstable disks of diameter eta_sep at `points` to reach diameter gamma."""
    curves = _unstable_segment(model, points, -eta_sep / 2, eta_sep / 2)
    for k in range(k_cap + 1):
        if np.all(_diameter(curves) >= gamma * (1 - 1e-12)):
            return k
        curves = _iterate_curves(model, curves, 1)
    raise EntropyError("unstable disks do not reach diameter gamma: no expansion")


def entropy_lower_bound(model, boxes=None, graph=None, eta_sep=0.05, gamma=0.2, k0=None, n_disks=64,
                        seed=0, details=False):
    """log(2)/k0 after verifying that unstable gamma-disks in the class contain two
    eta_sep-separated sub-disks whose k0-images again have diameter >= gamma."""
    s, c, u = model.splitting_dims
    if u == 0 or eigen_rates(model)[1] <= 1:
        raise EntropyError("doubling fails: no unstable expansion")
    if gamma < 3 * eta_sep:
        raise EntropyError("gamma must allow two eta_sep-separated sub-disks")
    rng = np.random.default_rng(seed)
    if boxes is None or graph is None:
        pts = rng.random((n_disks, model.d))
    else:
        pick = rng.choice(np.asarray(boxes), n_disks)
        pts = graph.box_lower(pick) + rng.random((n_disks, model.d)) / np.array(graph.resolution)
    k_meas = measure_k0(model, pts, eta_sep, gamma)
    k0 = k_meas if k0 is None else int(k0)
    if k0 < 1:
        raise EntropyError("k0 must be positive")
    left = _unstable_segment(model, pts, -gamma / 2, -gamma / 2 + eta_sep)
    right = _unstable_segment(model, pts, gamma / 2 - eta_sep, gamma / 2)
    sep = np.min(torus_dist(left[:, :, None, :], right[:, None, :, :]), axis=(1, 2))
    grow_l = _diameter(_iterate_curves(model, left, k0))
    grow_r = _diameter(_iterate_curves(model, right, k0))
    ok = (sep >= eta_sep) & (grow_l >= gamma * (1 - 1e-12)) & (grow_r >= gamma * (1 - 1e-12))
    if not np.all(ok):
        raise EntropyError(f"doubling verification failed on {int(np.sum(~ok))} of {n_disks} disks")
    bound = math.log(2) / k0
    if details:
        return bound, {"k0": k0, "k0_measured": k_meas, "disks": n_disks, "min_separation": float(sep.min()),
                       "min_image_diameter": float(min(grow_l.min(), grow_r.min()))}
    return bound


def census_sweep(model, fibers=(8, 16, 32), horizontal=16, samples_per_box=4, minimal=False):
    """Terminal-class counts of a 3-d model over fiber resolutions."""
    rows = []
    for nf in fibers:
        g = build_box_graph(model, (horizontal, horizontal, nf), samples_per_box=samples_per_box)
        cond = chain_classes(g)
        rep = quasi_attractor_census(g, cond, minimal=minimal)
        rows.append({"fiber": nf, "chain_classes": rep.chain_classes, "terminal": rep.terminal_classes,
                     "trapping": rep.trapping, "saturated": rep.saturated,
                     "minimal_u_saturated": rep.minimal_u_saturated})
    return rows
