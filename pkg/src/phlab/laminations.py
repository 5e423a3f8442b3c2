"""Local strong stable and unstable leaf disks, leafwise distance, trapping and the
local product structure projection.

Leaves are computed by the graph transform: a seed segment tangent to the base
splitting is placed far back along the orbit and pushed towards the base point,
re-expressed at every step as a graph over the leaf direction in the splitting
frame of the current orbit point and trimmed back to the working radius.
Only one-dimensional leaves (s = u = 1) are supported.
"""

import csv
import math
import threading
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline, RegularGridInterpolator
from scipy.optimize import brentq

from .cones import InverseModel
from .models import ModelError, eigen_rates, splitting_matrix, torus_delta, wrap

DEFAULT_TOL = 1e-9
DEFAULT_MESH = 1e-3
ITERATION_CAP = 200


class LaminationError(RuntimeError):
    """Raised when a disk cannot be computed or a projection is not unique."""


@dataclass(eq=False)
class LeafDisk:
    """A leaf disk through x as a graph over the leaf coordinate of a fixed frame.

    `samples` are lifted (unwrapped) points; `arclength` holds the signed leafwise
    parameter of every sample, zero at x.
    """

    x: np.ndarray
    sigma: str
    radius: float
    samples: np.ndarray
    arclength: np.ndarray
    frame: np.ndarray
    leaf_axis: int
    lipschitz: float
    iterations: int
    graph: CubicSpline = field(repr=False)
    coord_range: tuple = (0.0, 0.0)

    @property
    def lipschitz_certificate(self):
        return ("frame@x", self.lipschitz)

    @property
    def mesh_step(self):
        return float(np.max(np.diff(self.arclength)))

    def point_at(self, a):
        """Lifted point with leaf coordinate a (scalar or array)."""
        a = np.atleast_1d(np.asarray(a, dtype=float))
        y = np.empty((a.size, self.frame.shape[0]))
        y[:, self.leaf_axis] = a
        others = [k for k in range(y.shape[1]) if k != self.leaf_axis]
        y[:, others] = self.graph(a)
        return self.x + y @ self.frame.T

    def endpoints(self):
        return self.samples[0], self.samples[-1]

    def to_rows(self, leaf_id):
        return [[leaf_id, self.sigma, repr(float(s))] + [repr(float(c)) for c in wrap(p)]
                for s, p in zip(self.arclength, self.samples)]


def _leaf_setup(model, sigma):
    s, c, u = model.splitting_dims
    if s != 1 or u != 1:
        raise ModelError("leaf disks are implemented for one-dimensional s and u bundles")
    if sigma not in ("s", "u"):
        raise ValueError("sigma must be 's' or 'u'")
    B = splitting_matrix(model)
    lam_s, lam_u = eigen_rates(model)
    if sigma == "u":
        return model, B, s + c, 1.0 / lam_u
    return InverseModel(model), B, 0, lam_s


def _lift_chain(points):
    """Unwrap a chain of torus points so consecutive entries are close."""
    steps = torus_delta(points[:-1], points[1:])
    return np.vstack([points[:1], points[:1] + np.cumsum(steps, axis=0)])


def _graph_step(step_map, Binv, B, axis, center, next_center, grid, phi):
    """Push the graph of phi over `grid` (frame at center) forward and resample at next_center."""
    d = B.shape[0]
    others = [k for k in range(d) if k != axis]
    y = np.empty((grid.size, d))
    y[:, axis] = grid
    y[:, others] = phi
    pts = wrap(center + y @ B.T)
    img = _lift_chain(step_map.eval(pts))
    mid = grid.size // 2
    anchor = next_center + torus_delta(next_center, img[mid])
    img = img - img[mid] + anchor
    z = (img - next_center) @ Binv.T
    a_new = z[:, axis]
    if np.any(np.diff(a_new) <= 0):
        raise LaminationError("graph transform lost monotonicity: leaf not expanded")
    if a_new[0] > grid[0] or a_new[-1] < grid[-1]:
        raise LaminationError("graph transform image does not cover the working radius")
    return CubicSpline(a_new, z[:, others], axis=0)(grid)


def _transform(model, x, sigma, half_width, n_steps, n_grid):
    step_map, B, axis, _ = _leaf_setup(model, sigma)
    Binv = np.linalg.inv(B)
    back = step_map.inverse
    orbit = [np.asarray(x, dtype=float)]
    for _ in range(n_steps):
        orbit.append(back(orbit[-1]))
    grid = np.linspace(-half_width, half_width, n_grid)
    phi = np.zeros((n_grid, B.shape[0] - 1))
    for k in range(n_steps, 0, -1):
        phi = _graph_step(step_map, Binv, B, axis, orbit[k], orbit[k - 1], grid, phi)
    return grid, phi, B, axis


def _iterations_for(rate, tol, cap=ITERATION_CAP):
    if not 0 < rate < 1:
        raise LaminationError("no contraction for the graph transform")
    n = math.ceil(math.log(tol) / math.log(rate)) + 5
    if n > cap:
        raise LaminationError(f"graph transform needs {n} iterations, cap is {cap}")
    return n


def default_mesh(model):
    """Mesh step resolving the smallest rectangle of a composite (80 samples across it)."""
    patches = getattr(model, "patches", ())
    if not patches:
        return DEFAULT_MESH
    return min(DEFAULT_MESH, min(pt.cube.rho * pt.eta for pt in patches) / 80)


def local_disk(model, x, radius, sigma, tol=DEFAULT_TOL, mesh_step=None):
    """Leaf disk of leafwise radius `radius` through x, sigma in {'s', 'u'}."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    mesh_step = default_mesh(model) if mesh_step is None else mesh_step
    x = wrap(np.asarray(x, dtype=float))
    _, _, _, rate = _leaf_setup(model, sigma)
    n = _iterations_for(rate, tol)
    half = radius
    n_grid = 2 * math.ceil(half / mesh_step) + 1
    grid, phi, B, axis = _transform(model, x, sigma, half, n, n_grid)
    _, phi2, _, _ = _transform(model, x, sigma, half, n + 2, n_grid)
    if np.max(np.abs(phi - phi2)) > tol * max(1.0, radius):
        raise LaminationError(f"graph transform did not converge within {n + 2} iterations")
    spline = CubicSpline(grid, phi, axis=0)
    slopes = np.abs(spline(grid, 1))
    lip = float(np.max(np.linalg.norm(slopes.reshape(n_grid, -1), axis=1)))

    # arclength along the dense graph, then trim to the requested radius
    y = np.empty((n_grid, B.shape[0]))
    y[:, axis] = grid
    y[:, [k for k in range(B.shape[0]) if k != axis]] = phi
    pts = x + y @ B.T
    mid = n_grid // 2
    pts[mid] = x
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    arc = np.concatenate([[0.0], np.cumsum(seg)])
    arc -= arc[mid]
    if arc[0] > -radius * (1 - 1e-12) or arc[-1] < radius * (1 - 1e-12):
        radius = min(-arc[0], arc[-1])
    a_lo = float(np.interp(-radius, arc, grid))
    a_hi = float(np.interp(radius, arc, grid))
    margin = 1e-6 * mesh_step
    keep = (arc > -radius + margin) & (arc < radius - margin)
    disk = LeafDisk(x=x, sigma=sigma, radius=radius, samples=None, arclength=None, frame=B,
                    leaf_axis=axis, lipschitz=lip, iterations=n, graph=spline,
                    coord_range=(a_lo, a_hi))
    ends = disk.point_at([a_lo, a_hi])
    disk.samples = np.vstack([ends[:1], pts[keep], ends[1:]])
    disk.arclength = np.concatenate([[-radius], arc[keep], [radius]])
    return disk


def local_unstable_disk(model, x, t, tol=DEFAULT_TOL, mesh_step=None):
    return local_disk(model, x, t, "u", tol, mesh_step)


def local_stable_disk(model, x, eps, tol=DEFAULT_TOL, mesh_step=None):
    return local_disk(model, x, eps, "s", tol, mesh_step)


def _project_to_polyline(samples, arclength, p):
    """Arclength parameter and distance of the closest polyline point to p (lifted near samples)."""
    a, b = samples[:-1], samples[1:]
    seg = b - a
    L2 = np.einsum("ij,ij->i", seg, seg)
    t = np.clip(np.einsum("ij,ij->i", p - a, seg) / L2, 0.0, 1.0)
    foot = a + t[:, None] * seg
    dist = np.linalg.norm(p - foot, axis=1)
    k = int(np.argmin(dist))
    return arclength[k] + t[k] * (arclength[k + 1] - arclength[k]), float(dist[k])


def leaf_distance(disk, a, b, tol=1e-6):
    """Leafwise distance between two points lying on a disk."""
    params = []
    for p in (a, b):
        p = np.asarray(p, dtype=float)
        p = disk.x + torus_delta(disk.x, p)
        s, dist = _project_to_polyline(disk.samples, disk.arclength, p)
        if dist > tol:
            raise LaminationError(f"point is {dist:.3e} away from the disk")
        params.append(s)
    return abs(params[1] - params[0])


def trapping_factor(model, x, eps, sigma="s", tol=DEFAULT_TOL, mesh_step=None):
    """Measured lambda with g(W^s_eps(x)) inside W^s_{lambda eps}(g x) (g^{-1} for sigma = u)."""
    disk = local_disk(model, x, eps, sigma, tol, mesh_step)
    step = model if sigma == "s" else InverseModel(model)
    fx = step.eval(disk.x)
    img = _lift_chain(step.eval(wrap(disk.samples)))
    img = img - img[np.argmin(np.abs(disk.arclength))] + fx
    seg = np.linalg.norm(np.diff(img, axis=0), axis=1)
    arc = np.concatenate([[0.0], np.cumsum(seg)])
    arc -= arc[np.argmin(np.abs(disk.arclength))]
    return float(max(-arc[0], arc[-1]) / eps)


def convergence_profile(model, x, y, n=20, sigma="s", radius=None, tol=DEFAULT_TOL, mesh_step=None):
    """Distances d(g^k y, g^k x), k = 0..n, forward for sigma = s and backward for sigma = u.

    With a radius, every image of y is snapped to the nearest point of the local
    sigma-disk through the image of x. This removes the round-off component
    transverse to the leaf, which otherwise grows like the expansion rate and swamps the
    contraction after about 18 iterations in double precision.
    """
    step = model.eval if sigma == "s" else model.inverse
    p, q = wrap(np.asarray(x, dtype=float)), wrap(np.asarray(y, dtype=float))
    out = []
    for k in range(n + 1):
        if radius is not None and k > 0:
            disk = local_disk(model, p, radius, sigma, tol, mesh_step)
            lifted = p + torus_delta(p, q)
            s_par, _ = _project_to_polyline(disk.samples, disk.arclength, lifted)
            q = wrap(np.array([np.interp(s_par, disk.arclength, disk.samples[:, j])
                               for j in range(p.size)]))
        out.append(float(np.linalg.norm(torus_delta(p, q))))
        p, q = step(p), step(q)
    return np.array(out)


# ---------------------------------------------------------------- cu-disks and projection

@dataclass(eq=False)
class CenterUnstableDisk:
    """A disk tangent to the cu-cone: the s-coordinate as a function of (c, u) coordinates."""

    center: np.ndarray
    frame: np.ndarray
    grid_c: np.ndarray
    grid_u: np.ndarray
    offset: np.ndarray

    def __post_init__(self):
        self._interp = RegularGridInterpolator((self.grid_c, self.grid_u), self.offset,
                                               method="cubic" if min(self.offset.shape) >= 4
                                               else "linear")
        self._Binv = np.linalg.inv(self.frame)

    @property
    def gamma(self):
        return float(min(self.grid_c[-1], self.grid_u[-1]))

    def coords(self, p):
        return (self.center + torus_delta(self.center, p) - self.center) @ self._Binv.T

    def signed_offset(self, p):
        """s-coordinate of p minus the disk height at its (c, u) coordinates."""
        z = np.atleast_2d(self.coords(p))
        cu = np.clip(z[:, 1:], [self.grid_c[0], self.grid_u[0]], [self.grid_c[-1], self.grid_u[-1]])
        return z[:, 0] - self._interp(cu)

    def inside(self, p):
        z = np.atleast_2d(self.coords(p))
        return ((z[:, 1] >= self.grid_c[0]) & (z[:, 1] <= self.grid_c[-1])
                & (z[:, 2] >= self.grid_u[0]) & (z[:, 2] <= self.grid_u[-1]))

    def point_at(self, c, u):
        s = self._interp(np.array([[c, u]]))[0]
        return wrap(self.center + self.frame @ np.array([s, c, u]))


def planar_cu_disk(model, center, gamma, n=9):
    """Flat cu-disk through center spanned by the base E^c and E^u."""
    g = np.linspace(-gamma, gamma, n)
    return CenterUnstableDisk(wrap(np.asarray(center, dtype=float)), splitting_matrix(model),
                              g, g, np.zeros((n, n)))


def cu_disk_from_leaves(model, center, gamma, n_c=9, tol=DEFAULT_TOL, mesh_step=None):
    """cu-disk swept by unstable disks through a center segment of the base frame."""
    B = splitting_matrix(model)
    Binv = np.linalg.inv(B)
    center = wrap(np.asarray(center, dtype=float))
    gc = np.linspace(-gamma, gamma, n_c)
    mesh_step = default_mesh(model) if mesh_step is None else mesh_step
    gu = np.linspace(-gamma, gamma, 2 * math.ceil(gamma / mesh_step) + 1)
    offset = np.empty((n_c, gu.size))
    for i, c in enumerate(gc):
        base = wrap(center + c * B[:, 1])
        disk = local_unstable_disk(model, base, 1.2 * gamma, tol, mesh_step)
        z = (disk.samples - base + torus_delta(center, base)) @ Binv.T
        if z[0, 2] > gu[0] or z[-1, 2] < gu[-1]:
            raise LaminationError("unstable disk too short to span the cu-disk")
        offset[i] = np.interp(gu, z[:, 2], z[:, 0])
    return CenterUnstableDisk(center, B, gc, gu, offset)


def product_projection(model, x, D, gamma=None, tol=DEFAULT_TOL, mesh_step=None):
    """The unique point of W^s_gamma(x) on the cu-disk D."""
    gamma = D.gamma if gamma is None else gamma
    x = wrap(np.asarray(x, dtype=float))
    if np.linalg.norm(torus_delta(D.center, x)) >= gamma:
        raise LaminationError("x is not within gamma of the disk center")
    if abs(D.signed_offset(x)[0]) == 0.0:
        return x
    leaf = local_stable_disk(model, x, gamma, tol, mesh_step)
    a = np.linspace(*leaf.coord_range, 2 * math.ceil(gamma / leaf.mesh_step) + 1)
    pts = leaf.point_at(a)
    off = D.signed_offset(wrap(pts))
    inside = D.inside(wrap(pts))
    sign = np.sign(off)
    cross = np.flatnonzero((sign[:-1] * sign[1:] <= 0) & inside[:-1] & inside[1:])
    if cross.size == 0:
        raise LaminationError("stable disk does not meet the cu-disk within gamma")
    # adjacent mesh cells sharing an exact zero count once
    groups = np.split(cross, np.flatnonzero(np.diff(cross) > 1) + 1)
    if len(groups) > 1:
        raise LaminationError(f"{len(groups)} intersections: mesh too coarse or disk not transverse")
    k = groups[0][0]
    if off[k] == 0.0:
        return wrap(pts[k])
    if off[k + 1] == 0.0:
        return wrap(pts[k + 1])
    root = brentq(lambda t: D.signed_offset(wrap(leaf.point_at(t)))[0], a[k], a[k + 1],
                  xtol=1e-15, rtol=4 * np.finfo(float).eps)
    return wrap(leaf.point_at(root)[0])


# ---------------------------------------------------------------- cache and dumps

class DiskCache:
    """Memo of leaf disks keyed by model digest, quantized base point, radius and sigma."""

    def __init__(self, quantum=1e-12):
        self.quantum = quantum
        self._store = {}
        self._lock = threading.Lock()
        self._digests = {}

    def get(self, model, x, radius, sigma, **kw):
        # the model is kept alive next to its digest so its id cannot be reused
        entry = self._digests.get(id(model))
        if entry is None:
            entry = self._digests.setdefault(id(model), (model, model.digest()))
        dig = entry[1]
        key = (dig, tuple(np.round(wrap(np.asarray(x, dtype=float)) / self.quantum).astype(np.int64)),
               float(radius), sigma, tuple(sorted(kw.items())))
        with self._lock:
            hit = self._store.get(key)
        if hit is not None:
            return hit
        disk = local_disk(model, x, radius, sigma, **kw)
        with self._lock:
            return self._store.setdefault(key, disk)


def write_leaf_csv(disks, stream):
    """One sample per row: leaf id, sigma, arclength parameter, wrapped coordinates."""
    w = csv.writer(stream, lineterminator="\n")
    d = disks[0].x.size if disks else 0
    w.writerow(["leaf", "sigma", "arclength"] + [f"x{k}" for k in range(d)])
    for i, disk in enumerate(disks):
        w.writerows(disk.to_rows(i))
