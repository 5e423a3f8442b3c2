"""Torus maps with exact derivatives and the cube charts that perturbations live in.

Points are numpy arrays of shape (n, d) (or (d,)) with coordinates in [0, 1).
All model objects are immutable after construction and safe to share between
worker processes.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np


class ModelError(ValueError):
    """Raised for malformed model documents or out-of-range parameters."""


# ---------------------------------------------------------------- torus helpers

def wrap(p):
    """Reduce coordinates mod 1 into [0, 1)."""
    p = np.asarray(p, dtype=float)
    r = p - np.floor(p)
    return np.where(r >= 1.0, 0.0, r)


def torus_delta(a, b):
    """Displacement b - a of the nearest lift, each component in [-1/2, 1/2)."""
    d = np.asarray(b, dtype=float) - np.asarray(a, dtype=float)
    return d - np.floor(d + 0.5)


def torus_dist(a, b):
    return np.linalg.norm(torus_delta(a, b), axis=-1)


def _as_points(p):
    p = np.asarray(p, dtype=float)
    return p[None, :] if p.ndim == 1 else p


def _like(result, p):
    return result[0] if np.asarray(p).ndim == 1 else result


# ---------------------------------------------------------------- base models

class MapModel:
    """Common interface: eval, inverse, derivative on batches of points."""

    d: int

    def eval(self, p):
        pts = _as_points(p)
        return _like(self._eval(pts), p)

    def inverse(self, p):
        pts = _as_points(p)
        return _like(self._inverse(pts), p)

    def derivative(self, p):
        pts = _as_points(p)
        return _like(self._derivative(pts), p)

    def iterate(self, p, n):
        """n-fold forward (n > 0) or backward (n < 0) iterate."""
        q = np.asarray(p, dtype=float)
        step = self.eval if n >= 0 else self.inverse
        for _ in range(abs(n)):
            q = step(q)
        return q

    def dims(self):
        return self.splitting_dims

    def digest(self):
        text = json.dumps(self.to_doc(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()


def _split_dims_from_eigenvalues(evals, tol=1e-9):
    mods = np.abs(evals)
    s = int(np.sum(mods < 1 - tol))
    u = int(np.sum(mods > 1 + tol))
    return s, len(evals) - s - u, u


@dataclass(frozen=True, eq=False)
class LinearToral(MapModel):
    """x -> A x mod 1 for an integer matrix A with determinant +-1."""

    A: np.ndarray

    def __post_init__(self):
        A = np.array(self.A, dtype=float)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ModelError("matrix must be square")
        if not np.all(A == np.round(A)):
            raise ModelError("matrix entries must be integers")
        if abs(abs(np.linalg.det(A)) - 1) > 1e-9:
            raise ModelError("matrix must have determinant +-1")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "Ainv", np.round(np.linalg.inv(A)))
        object.__setattr__(self, "d", A.shape[0])
        object.__setattr__(self, "splitting_dims",
                           _split_dims_from_eigenvalues(np.linalg.eigvals(A)))

    def _eval(self, p):
        return wrap(p @ self.A.T)

    def _inverse(self, p):
        return wrap(p @ self.Ainv.T)

    def _derivative(self, p):
        return np.broadcast_to(self.A, (len(p),) + self.A.shape).copy()

    def to_doc(self):
        return {"kind": "linear", "A": self.A.astype(int).tolist()}


@dataclass(frozen=True, eq=False)
class SkewProduct(MapModel):
    """(x, theta) -> (A x, theta + omega - eps sin(2 pi k theta) / (2 pi)) on T^2 x S^1."""

    A: np.ndarray
    eps: float = 0.0
    k: int = 1
    omega: float = 0.0

    def __post_init__(self):
        base = LinearToral(self.A)
        if base.d != 2:
            raise ModelError("skew product base must be a map of T^2")
        if abs(self.eps) * abs(self.k) >= 1:
            raise ModelError("fiber map is not a diffeomorphism (|eps k| >= 1)")
        object.__setattr__(self, "A", base.A)
        object.__setattr__(self, "base", base)
        object.__setattr__(self, "d", 3)
        s, c, u = base.splitting_dims
        object.__setattr__(self, "splitting_dims", (s, c + 1, u))

    def fiber(self, th):
        return th + self.omega - self.eps * np.sin(2 * np.pi * self.k * th) / (2 * np.pi)

    def fiber_derivative(self, th):
        return 1.0 - self.eps * self.k * np.cos(2 * np.pi * self.k * th)

    def _eval(self, p):
        out = np.empty_like(p)
        out[:, :2] = p[:, :2] @ self.A.T
        out[:, 2] = self.fiber(p[:, 2])
        return wrap(out)

    def _inverse(self, p):
        out = np.empty_like(p)
        out[:, :2] = p[:, :2] @ self.base.Ainv.T
        target = p[:, 2]
        th = target - self.omega
        for _ in range(60):
            step = (self.fiber(th) - target) / self.fiber_derivative(th)
            th = th - step
            if np.all(np.abs(step) < 1e-16):
                break
        out[:, 2] = th
        return wrap(out)

    def _derivative(self, p):
        D = np.zeros((len(p), 3, 3))
        D[:, :2, :2] = self.A
        D[:, 2, 2] = self.fiber_derivative(p[:, 2])
        return D

    def to_doc(self):
        doc = {"kind": "skew", "A": self.A.astype(int).tolist(), "eps": float(self.eps),
               "k": int(self.k)}
        if self.omega:
            doc["omega"] = float(self.omega)
        return doc


def linear_part(model):
    """Constant matrix governing the splitting of an analytic model."""
    if isinstance(model, LinearToral):
        return model.A
    if isinstance(model, SkewProduct):
        M = np.eye(3)
        M[:2, :2] = model.A
        return M
    if isinstance(model, Composite):
        return linear_part(model.base)
    raise ModelError(f"no analytic splitting for {type(model).__name__}")


def exact_splitting(model, p=None):
    """Unit frames (E^s, E^c, E^u) as column blocks, ordered by eigenvalue modulus.

    For a skew product the center block is the fiber direction; the horizontal
    eigendirections of the base are embedded with zero fiber component.
    """
    if isinstance(model, Composite):
        raise ModelError("splitting of a composite is only known through cones")
    M = linear_part(model)
    evals, evecs = np.linalg.eig(M)
    if np.max(np.abs(evals.imag)) > 1e-12:
        raise ModelError("complex eigenvalues: no real eigen-splitting")
    evals, evecs = evals.real, evecs.real
    order = np.argsort(np.abs(evals), kind="stable")
    evecs = evecs[:, order]
    if isinstance(model, SkewProduct):
        # the fiber eigenvalue 1 may tie with nothing else; force the exact fiber axis
        evecs = np.zeros((3, 3))
        base_evals, base_vecs = np.linalg.eig(model.A)
        o = np.argsort(np.abs(base_evals.real))
        evecs[:2, 0] = base_vecs[:, o[0]].real
        evecs[2, 1] = 1.0
        evecs[:2, 2] = base_vecs[:, o[1]].real
    evecs = evecs / np.linalg.norm(evecs, axis=0)
    # deterministic orientation: first nonzero entry positive
    for k in range(evecs.shape[1]):
        col = evecs[:, k]
        nz = np.flatnonzero(np.abs(col) > 1e-12)
        if nz.size and col[nz[0]] < 0:
            evecs[:, k] = -col
    s, c, u = model.splitting_dims
    return evecs[:, :s], evecs[:, s:s + c], evecs[:, s + c:]


def splitting_matrix(model):
    """Frame matrix B = [E^s | E^c | E^u] with unit columns."""
    while isinstance(model, Composite):
        model = model.base
    return np.hstack(exact_splitting(model))


def eigen_rates(model):
    """Moduli of the strong stable and strong unstable eigenvalues of the linear part."""
    ev = np.sort(np.abs(np.linalg.eigvals(linear_part(model))))
    return float(ev[0]), float(ev[-1])


# ---------------------------------------------------------------- charts

@dataclass(frozen=True, eq=False)
class ChartedCube:
    """The cube center + rho * B [-1/2, 1/2]^d with chart psi onto [0, 1]^d."""

    center: np.ndarray
    rho: float
    frames: np.ndarray
    dims: tuple

    def __post_init__(self):
        object.__setattr__(self, "center", wrap(np.asarray(self.center, dtype=float)))
        object.__setattr__(self, "frames", np.asarray(self.frames, dtype=float))
        object.__setattr__(self, "frames_inv", np.linalg.inv(self.frames))

    def psi(self, p):
        return 0.5 + torus_delta(self.center, p) @ self.frames_inv.T / self.rho

    def psi_inv(self, q):
        return wrap(self.center + self.rho * (np.asarray(q) - 0.5) @ self.frames.T)

    def contains(self, p, scale=1.0):
        """Membership in the concentric cube of relative size `scale` (C_{scale*rho})."""
        q = self.psi(p)
        return np.all(np.abs(q - 0.5) <= scale / 2, axis=-1)

    def to_doc(self):
        return {"center": self.center.tolist(), "rho": float(self.rho),
                "frames": self.frames.tolist()}


def make_chart(model, center, rho):
    if not 0 < rho < 0.25:
        raise ModelError("rho must lie in (0, 1/4)")
    return ChartedCube(np.asarray(center, dtype=float), float(rho),
                       splitting_matrix(model), tuple(model.splitting_dims))


# ---------------------------------------------------------------- patches

@dataclass(frozen=True, eq=False)
class TileLayout:
    """Rectangle anchors inside a slice, in units of the rectangle width.

    Row b (a multi-index in {0..L-1}^u, flattened) carries anchors
    anchors[b] + period * k; period None means one rectangle per row.
    """

    rows: int
    anchors: np.ndarray
    period: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "anchors", np.atleast_2d(np.asarray(self.anchors, dtype=float)))

    def to_doc(self):
        return {"rows": int(self.rows), "anchors": self.anchors.tolist(),
                "period": None if self.period is None else float(self.period)}

    @classmethod
    def from_doc(cls, doc):
        return cls(int(doc["rows"]), np.asarray(doc["anchors"], dtype=float), doc.get("period"))


@dataclass(frozen=True, eq=False)
class LocalPatch:
    """An elementary perturbation placed in the rectangles of one slice of a cube.

    `slice_offset` is the chart u-offset of the slice (length u); sub-slice b
    occupies u in slice_offset + eta * [b, b + 1]. A single rectangle is the
    special case rows=1, one anchor, no period.
    """

    cube: ChartedCube
    slice_offset: np.ndarray
    layout: TileLayout
    h: object  # perturbation.ElementaryPerturbation

    def __post_init__(self):
        object.__setattr__(self, "slice_offset", np.atleast_1d(np.asarray(self.slice_offset, dtype=float)))

    @property
    def eta(self):
        return self.h.eta

    def rectangle_offsets(self):
        """Explicit chart offsets (n, d) of every rectangle of the patch."""
        s, c, u = self.cube.dims
        eta, lay = self.eta, self.layout
        out = []
        for b in range(lay.rows ** u):
            bvec = np.array(np.unravel_index(b, (lay.rows,) * u), dtype=float)
            a = lay.anchors[b]
            if lay.period is None:
                ks = [np.zeros(s)]
            else:
                lo = np.ceil(-a / lay.period)
                hi = np.floor((1.0 / eta - 1.0 - a) / lay.period)
                grids = np.meshgrid(*[np.arange(l, h + 1) for l, h in zip(lo, hi)], indexing="ij")
                ks = np.stack([g.ravel() for g in grids], axis=1) if grids else [np.zeros(s)]
            for k in ks:
                off_s = eta * (a + (0.0 if lay.period is None else lay.period * np.asarray(k)))
                if np.any(off_s < -1e-12) or np.any(off_s > 1 - eta + 1e-12):
                    continue
                v = np.zeros(s + c + u)
                v[:s] = off_s
                v[s + c:] = self.slice_offset + eta * bvec
                out.append(v)
        return np.array(out).reshape(-1, s + c + u)

    def to_doc(self):
        return {"cube": self.cube.to_doc(), "slice_offset": self.slice_offset.tolist(),
                "h": self.h.to_doc()}


# ---------------------------------------------------------------- composite

class _PatchTable:
    """Vectorized patch parameters plus a uniform-grid hash over cube boxes."""

    def __init__(self, patches, dims):
        self.patches = patches
        self.dims = dims
        P = len(patches)
        d = sum(dims)
        self.d = d
        self.centers = np.array([pt.cube.center for pt in patches]).reshape(P, d)
        self.rho = np.array([pt.cube.rho for pt in patches])
        self.B = np.array([pt.cube.frames for pt in patches]).reshape(P, d, d)
        self.Binv = np.array([pt.cube.frames_inv for pt in patches]).reshape(P, d, d)
        self.eta = np.array([pt.h.eta for pt in patches])
        self.kappa = np.array([pt.h.kappa for pt in patches])
        self.cf = np.array([pt.h.c_f for pt in patches])
        self.axes = np.array([pt.h.axes for pt in patches], dtype=int).reshape(P, 2)
        self.w = np.array([pt.slice_offset for pt in patches]).reshape(P, dims[2])
        layouts, lay_index = [], []
        for pt in patches:
            for n, lay in enumerate(layouts):
                if lay is pt.layout:
                    lay_index.append(n)
                    break
            else:
                layouts.append(pt.layout)
                lay_index.append(len(layouts) - 1)
        self.layouts = layouts
        self.lay_index = np.array(lay_index, dtype=int)
        self.rows = np.array([layouts[i].rows for i in lay_index], dtype=int)
        self.period = np.array([np.inf if layouts[i].period is None else layouts[i].period
                                for i in lay_index])
        self._build_hash()

    def _build_hash(self):
        P, d = len(self.patches), self.d
        if P == 0:
            self.cells_per_axis = 1
            self.cell_start = np.zeros(2, dtype=np.int64)
            self.cell_items = np.zeros(0, dtype=np.int64)
            return
        # half-width of each cube's bounding box in torus coordinates
        half = 0.5 * self.rho[:, None] * np.abs(self.B).sum(axis=2)
        spacing = (1.0 / P) ** (1.0 / d)
        m = int(max(1, min(256, np.floor(1.0 / max(spacing, half.max() / 4)))))
        self.cells_per_axis = m
        items_cell, items_patch = [], []
        for k in range(P):
            lo = np.floor((self.centers[k] - half[k]) * m).astype(int)
            hi = np.floor((self.centers[k] + half[k]) * m).astype(int)
            ranges = [np.arange(a, b + 1) % m for a, b in zip(lo, hi)]
            ranges = [np.unique(r) for r in ranges]
            grids = np.meshgrid(*ranges, indexing="ij")
            flat = np.ravel_multi_index([g.ravel() for g in grids], (m,) * d)
            items_cell.append(flat)
            items_patch.append(np.full(flat.size, k))
        cells = np.concatenate(items_cell)
        pats = np.concatenate(items_patch)
        order = np.argsort(cells, kind="stable")
        cells, pats = cells[order], pats[order]
        self.cell_items = pats.astype(np.int64)
        self.cell_start = np.searchsorted(cells, np.arange(m ** d + 1)).astype(np.int64)

    def candidates(self, p):
        """Pairs (point index, patch index) whose cube box may contain p."""
        m = self.cells_per_axis
        idx = np.floor(p * m).astype(int) % m
        cell = np.ravel_multi_index(idx.T, (m,) * self.d)
        starts, ends = self.cell_start[cell], self.cell_start[cell + 1]
        counts = ends - starts
        pt = np.repeat(np.arange(len(p)), counts)
        offs = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
        return pt, self.cell_items[np.repeat(starts, counts) + offs]

    def locate(self, p):
        """For each point: (patch index or -1, unit rectangle coordinates y, chart q).

        A point belongs to a patch when it lies in one of the patch's
        rectangles (closed). Supports are disjoint, so at most one patch
        matches up to boundary points, where the perturbation is the identity.
        """
        n = len(p)
        s, c, u = self.dims
        which = np.full(n, -1)
        y_out = np.zeros((n, self.d))
        if len(self.patches) == 0 or n == 0:
            return which, y_out
        pt, pk = self.candidates(p)
        delta = torus_delta(self.centers[pk], p[pt])
        q = 0.5 + np.einsum("nij,nj->ni", self.Binv[pk], delta) / self.rho[pk, None]
        eta = self.eta[pk]
        inside = np.all((q >= 0) & (q <= 1), axis=1)
        r = (q[:, s + c:] - self.w[pk]) / eta[:, None]
        b = np.floor(r)
        L = self.rows[pk]
        inside &= np.all((b >= 0) & (b < L[:, None]), axis=1)
        yu = r - b
        bi = np.clip(b, 0, None).astype(int)
        flat = np.zeros(len(pk), dtype=int)
        for a in range(u):
            flat = flat * np.maximum(L, 1) + np.clip(bi[:, a], 0, np.maximum(L - 1, 0))
        anchors = np.zeros((len(pk), s))
        for li, lay in enumerate(self.layouts):
            sel = self.lay_index[pk] == li
            if np.any(sel):
                anchors[sel] = lay.anchors[np.minimum(flat[sel], len(lay.anchors) - 1)]
        t = q[:, :s] / eta[:, None] - anchors
        per = self.period[pk]
        finite = np.isfinite(per)
        kk = np.where(finite[:, None], np.floor(t / np.where(finite, per, 1.0)[:, None]), 0.0)
        ys = t - kk * np.where(finite, per, 0.0)[:, None]
        off = anchors + kk * np.where(finite, per, 0.0)[:, None]
        inside &= np.all((ys >= 0) & (ys <= 1), axis=1)
        inside &= np.all((off * eta[:, None] >= -1e-12) & (off * eta[:, None] <= 1 - eta[:, None] + 1e-12), axis=1)
        y = np.concatenate([ys, q[:, s:s + c], yu], axis=1)
        hit = np.flatnonzero(inside)
        # first hit per point (supports are disjoint)
        pts = pt[hit]
        first = np.unique(pts, return_index=True)[1]
        sel = hit[first]
        which[pt[sel]] = pk[sel]
        y_out[pt[sel]] = y[sel]
        return which, y_out


@dataclass(frozen=True, eq=False)
class Composite(MapModel):
    """g = f off the patch rectangles; inside, g = (patch flow in chart coordinates) o f."""

    base: MapModel
    patches: tuple = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "patches", tuple(self.patches))
        object.__setattr__(self, "d", self.base.d)
        object.__setattr__(self, "splitting_dims", tuple(self.base.splitting_dims))
        object.__setattr__(self, "_table", _PatchTable(self.patches, self.splitting_dims))

    def _scale(self, k):
        s, c, u = self.splitting_dims
        eta = self._table.eta[k]
        sc = np.ones((len(k), self.d))
        sc[:, :s] = eta[:, None]
        sc[:, s + c:] = eta[:, None]
        return sc

    def _flow(self, y, k, direction):
        from .perturbation import flow_unit
        t = self._table
        dy = np.zeros_like(y)
        for axes in np.unique(t.axes[k], axis=0):
            sel = np.all(t.axes[k] == axes, axis=1)
            eps = t.cf[k[sel]] * t.kappa[k[sel]] * t.eta[k[sel]] * direction
            dy[sel] = flow_unit(y[sel], eps, tuple(axes))[0]
        return dy

    def _displace(self, p, direction):
        t = self._table
        which, y = t.locate(p)
        hit = np.flatnonzero(which >= 0)
        if hit.size == 0:
            return p
        k = which[hit]
        dy = self._flow(y[hit], k, direction)
        moving = np.any(dy != 0, axis=1)
        if not np.any(moving):
            return p
        hit, k, dy = hit[moving], k[moving], dy[moving]
        dq = dy * self._scale(k)
        dp = t.rho[k, None] * np.einsum("nij,nj->ni", t.B[k], dq)
        out = p.copy()
        out[hit] = wrap(p[hit] + dp)
        return out

    def _eval(self, p):
        return self._displace(self.base._eval(p), +1.0)

    def _inverse(self, p):
        return self.base._inverse(self._displace(p, -1.0))

    def _derivative(self, p):
        from .perturbation import flow_unit
        fp = self.base._eval(p)
        D = self.base._derivative(p)
        t = self._table
        which, y = t.locate(fp)
        hit = np.flatnonzero(which >= 0)
        if hit.size == 0:
            return D
        k = which[hit]
        Dh = np.zeros((hit.size, self.d, self.d))
        for axes in np.unique(t.axes[k], axis=0):
            sel = np.all(t.axes[k] == axes, axis=1)
            eps = t.cf[k[sel]] * t.kappa[k[sel]] * t.eta[k[sel]]
            Dh[sel] = flow_unit(y[hit][sel], eps, tuple(axes), jacobian=True)[1]
        S = self._scale(k)
        Dq = S[:, :, None] * Dh / S[:, None, :]
        Dx = np.einsum("nij,njk,nkl->nil", t.B[k], Dq, t.Binv[k])
        out = D.copy()
        out[hit] = np.einsum("nij,njk->nik", Dx, D[hit])
        return out

    def patch_of(self, p):
        """Index of the patch whose rectangle contains p (-1 if none)."""
        return self._table.locate(_as_points(p))[0]

    def to_doc(self):
        layouts = self._table.layouts
        docs = []
        for k, pt in enumerate(self.patches):
            doc = pt.to_doc()
            doc["layout"] = int(self._table.lay_index[k])
            docs.append(doc)
        return {"kind": "composite", "base": self.base.to_doc(),
                "layouts": [lay.to_doc() for lay in layouts], "patches": docs}


# ---------------------------------------------------------------- documents

def model_from_doc(doc):
    kind = doc.get("kind")
    try:
        if kind == "linear":
            return LinearToral(np.array(doc["A"]))
        if kind == "skew":
            return SkewProduct(np.array(doc["A"]), float(doc.get("eps", 0.0)),
                               int(doc.get("k", 1)), float(doc.get("omega", 0.0)))
        if kind == "composite":
            from .perturbation import ElementaryPerturbation
            base = model_from_doc(doc["base"])
            layouts = [TileLayout.from_doc(x) for x in doc.get("layouts", [])]
            patches = []
            for pd in doc.get("patches", []):
                cd = pd["cube"]
                cube = ChartedCube(np.array(cd["center"]), float(cd["rho"]),
                                   np.array(cd["frames"]), tuple(base.splitting_dims))
                patches.append(LocalPatch(cube, np.array(pd["slice_offset"]),
                                          layouts[pd["layout"]],
                                          ElementaryPerturbation.from_doc(pd["h"], base.splitting_dims)))
            return Composite(base, tuple(patches))
    except (KeyError, TypeError, IndexError) as exc:
        raise ModelError(f"malformed model document: {exc}") from exc
    raise ModelError(f"unknown model kind {kind!r}")


def default_instance():
    """The desk-scale T^3 map: cat map times the identity circle."""
    return SkewProduct(np.array([[2, 1], [1, 1]]), 0.0, 1)


CAT = np.array([[2, 1], [1, 1]])
