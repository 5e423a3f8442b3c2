"""The elementary Hamiltonian perturbation, its global composition and C1-size estimates.

The perturbation lives on a rectangle [0, eta]^s x [0, 1]^c x [0, eta]^u. It is
computed in rescaled coordinates y = (x^s / eta, x^c, x^u / eta) in [0, 1]^d,
where it is the time-one map of the Hamiltonian field of

    H(y) = phi(y_other) * beta(y_i) * G(y_j),

scaled by eps = C_F * kappa * eta. In raw coordinates this is the flow of
C_F * kappa * eta^2 * phi * beta(x_i) * G(x_j / eta), so the center coordinate
moves by O(kappa * eta) while the unstable coordinate moves by O(kappa * eta^2).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .models import (ChartedCube, Composite, LocalPatch, ModelError, TileLayout,
                     torus_delta, wrap)

# bump profile: zero on the collar [0, COLLAR], one on [RAMP_END, 1 - RAMP_END]
COLLAR = 0.01
RAMP_END = 0.25
EDGE = 0.02
_SPAN = RAMP_END - COLLAR
_SLOPE = 1.0 / (_SPAN - EDGE)

# shear template G(b) = K sin^4(pi (b - c0) / w) on [c0, 1 - c0]
_C0 = COLLAR
_W = 1.0 - 2 * _C0
# K makes max |G'| = 1/2, so G' sweeps [-1/2, 1/2] across b in [1/4, 3/4]
_K = 0.5 * _W / (4 * (np.sqrt(3) / 2) ** 3 * 0.5 * np.pi)

# calibration constant, see calibrate_cf
C_F = 0.2
FLOW_STEPS = 32


def _ramp(t):
    """Ramp from 0 at t=0 to 1 at t=_SPAN whose slope is a smoothed plateau."""
    t = np.clip(t, 0.0, _SPAN)
    s1 = np.clip(t / EDGE, 0.0, 1.0)
    s2 = np.clip((_SPAN - t) / EDGE, 0.0, 1.0)
    lead = t < EDGE
    tail = t > _SPAN - EDGE
    mid = ~(lead | tail)
    Q = lambda s: s ** 3 - 0.5 * s ** 4
    q = lambda s: 3 * s ** 2 - 2 * s ** 3
    dq = lambda s: 6 * s - 6 * s ** 2
    val = np.where(lead, _SLOPE * EDGE * Q(s1),
                   np.where(tail, 1.0 - _SLOPE * EDGE * Q(s2),
                            _SLOPE * EDGE / 2 + _SLOPE * (t - EDGE)))
    d1 = np.where(lead, _SLOPE * q(s1), np.where(tail, _SLOPE * q(s2), _SLOPE))
    d2 = np.where(lead, _SLOPE * dq(s1) / EDGE, np.where(tail, -_SLOPE * dq(s2) / EDGE, 0.0))
    d1 = np.where(mid, _SLOPE, d1)
    return val, d1, d2


def bump(x):
    """C^2 bump on [0, 1]: value, first and second derivative."""
    x = np.asarray(x, dtype=float)
    left = x < 0.5
    t = np.where(left, x, 1.0 - x) - COLLAR
    v, d1, d2 = _ramp(t)
    inside = t > 0
    v = np.where(inside, v, 0.0)
    d1 = np.where(inside, np.where(left, d1, -d1), 0.0)
    d2 = np.where(inside, d2, 0.0)
    return v, d1, d2


def shear_template(b):
    """G(b) with first and second derivative; vanishes to fourth order at the collar."""
    b = np.asarray(b, dtype=float)
    th = np.pi * (b - _C0) / _W
    inside = (b > _C0) & (b < 1 - _C0)
    sn, cs = np.sin(th), np.cos(th)
    k = np.pi / _W
    g = _K * sn ** 4
    g1 = _K * 4 * sn ** 3 * cs * k
    g2 = _K * (12 * sn ** 2 * cs ** 2 - 4 * sn ** 4) * k * k
    z = np.zeros_like(b)
    return np.where(inside, g, z), np.where(inside, g1, z), np.where(inside, g2, z)


def _others(d, axes):
    return [k for k in range(d) if k not in axes]


def _bump_product(y, axes):
    """phi over the coordinates other than the flow axes, and its gradient (n, d)."""
    n, d = y.shape
    phi = np.ones(n)
    grad = np.zeros((n, d))
    vals = {}
    for k in _others(d, axes):
        vals[k] = bump(y[:, k])
        phi = phi * vals[k][0]
    for k in _others(d, axes):
        part = np.ones(n)
        for m in _others(d, axes):
            part = part * (vals[m][1] if m == k else vals[m][0])
        grad[:, k] = part
    return phi, grad


def unit_hamiltonian(y, axes):
    i, j = axes
    phi, _ = _bump_product(y, axes)
    return phi * bump(y[:, i])[0] * shear_template(y[:, j])[0]


def _field(y, eps, axes, phi, gphi, jac):
    i, j = axes
    a, b = y[:, i], y[:, j]
    be, be1, be2 = bump(a)
    g, g1, g2 = shear_template(b)
    e = eps * phi
    fa = e * be * g1
    fb = -e * be1 * g
    if not jac:
        return fa, fb, None
    n, d = y.shape
    J = np.zeros((n, 2, d))
    J[:, 0, :] = (eps * be * g1)[:, None] * gphi
    J[:, 1, :] = (-eps * be1 * g)[:, None] * gphi
    J[:, 0, i] = e * be1 * g1
    J[:, 0, j] = e * be * g2
    J[:, 1, i] = -e * be2 * g
    J[:, 1, j] = -e * be1 * g1
    return fa, fb, J


def flow_unit(y, eps, axes, jacobian=False, steps=FLOW_STEPS):
    """Time-one map of the rescaled field: returns (displacement dy, Jacobian or None).

    eps may be a scalar or one value per point; a negative eps runs the flow
    backward. The displacement is accumulated from zero so that points where
    the field vanishes come back bitwise unchanged.
    """
    y = np.asarray(y, dtype=float)
    n, d = y.shape
    i, j = axes
    eps = np.broadcast_to(np.asarray(eps, dtype=float), (n,))
    phi, gphi = _bump_product(y, axes)
    da = np.zeros(n)
    db = np.zeros(n)
    T = None
    if jacobian:
        T = np.zeros((n, 2, d))
        T[:, 0, i] = 1.0
        T[:, 1, j] = 1.0
    hstep = 1.0 / steps
    base = y.copy()

    def stage(da_, db_, T_):
        z = base.copy()
        z[:, i] += da_
        z[:, j] += db_
        fa, fb, J = _field(z, eps, axes, phi, gphi, jacobian)
        dT = None
        if jacobian:
            full = np.broadcast_to(np.eye(d), (n, d, d)).copy()
            full[:, i, :] = T_[:, 0, :]
            full[:, j, :] = T_[:, 1, :]
            dT = np.einsum("nab,nbc->nac", J, full)
        return fa, fb, dT

    for _ in range(steps):
        k1 = stage(da, db, T)
        k2 = stage(da + 0.5 * hstep * k1[0], db + 0.5 * hstep * k1[1],
                   None if T is None else T + 0.5 * hstep * k1[2])
        k3 = stage(da + 0.5 * hstep * k2[0], db + 0.5 * hstep * k2[1],
                   None if T is None else T + 0.5 * hstep * k2[2])
        k4 = stage(da + hstep * k3[0], db + hstep * k3[1],
                   None if T is None else T + hstep * k3[2])
        da = da + hstep / 6 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        db = db + hstep / 6 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
        if jacobian:
            T = T + hstep / 6 * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2])
    dy = np.zeros_like(y)
    dy[:, i] = da
    dy[:, j] = db
    Jfull = None
    if jacobian:
        Jfull = np.broadcast_to(np.eye(d), (n, d, d)).copy()
        Jfull[:, i, :] = T[:, 0, :]
        Jfull[:, j, :] = T[:, 1, :]
    return dy, Jfull


@dataclass(frozen=True)
class ElementaryPerturbation:
    """Time-one Hamiltonian map supported in a rectangle of width eta."""

    kappa: float
    eta: float
    axes: tuple
    dims: tuple = (1, 1, 1)
    c_f: float = C_F
    steps: int = FLOW_STEPS

    def __post_init__(self):
        s, c, u = self.dims
        i, j = self.axes
        if not 0 <= self.kappa < 1:
            raise ModelError("kappa must lie in [0, 1)")
        if not 0 < self.eta < 1:
            raise ModelError("eta must lie in (0, 1)")
        if not (s <= i < s + c and s + c <= j < s + c + u):
            raise ModelError("axes must be (center index, unstable index)")
        object.__setattr__(self, "axes", (int(i), int(j)))

    @property
    def d(self):
        return sum(self.dims)

    @property
    def eps(self):
        return self.c_f * self.kappa * self.eta

    def scale(self):
        s, c, u = self.dims
        return np.concatenate([np.full(s, self.eta), np.ones(c), np.full(u, self.eta)])

    def _run(self, x, direction, jacobian=False):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        sc = self.scale()
        dy, J = flow_unit(x / sc, direction * self.eps, self.axes, jacobian, self.steps)
        return x + dy * sc, (None if J is None else sc[:, None] * J / sc[None, :])

    def apply(self, x):
        """Image of raw rectangle coordinates x (n, d)."""
        return self._run(x, 1.0)[0]

    def inverse(self, x):
        return self._run(x, -1.0)[0]

    def jacobian(self, x):
        return self._run(x, 1.0, jacobian=True)[1]

    def hamiltonian(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return self.eps * self.eta * unit_hamiltonian(x / self.scale(), self.axes)

    def to_doc(self):
        return {"kappa": float(self.kappa), "eta": float(self.eta), "axes": list(self.axes),
                "c_f": float(self.c_f), "steps": int(self.steps)}

    @classmethod
    def from_doc(cls, doc, dims):
        return cls(float(doc["kappa"]), float(doc["eta"]), tuple(doc["axes"]), tuple(dims),
                   float(doc.get("c_f", C_F)), int(doc.get("steps", FLOW_STEPS)))


def default_axes(dims):
    s, c, u = dims
    return (s, s + c)


def build_elementary(kappa, eta, axes=None, dims=(1, 1, 1), c_f=C_F):
    return ElementaryPerturbation(float(kappa), float(eta),
                                  tuple(axes) if axes is not None else default_axes(dims),
                                  tuple(dims), float(c_f))


# ---------------------------------------------------------------- property (i)

def _disk_samples(h, n):
    s, c, u = h.dims
    t = (np.arange(n) + 0.5) / n * h.eta
    grids = np.meshgrid(*([t] * u), indexing="ij")
    return np.stack([g.ravel() for g in grids], axis=1)


def displacement_gaps(h, bases, n=401):
    """Spread of the center coordinate over the images of disks {x^s} x {x^c} x [0, eta]^u.

    `bases` is a list of (x^s, x^c) pairs. Only image points whose unstable
    block lands in [eta/4, 3 eta/4]^u count.
    """
    s, c, u = h.dims
    xu = _disk_samples(h, n if u == 1 else int(round(n ** (1 / u))))
    m = len(xu)
    rows = []
    for xs, xc in bases:
        rows.append(np.hstack([np.tile(np.atleast_1d(xs), (m, 1)),
                               np.tile(np.atleast_1d(xc), (m, 1)), xu]))
    img = h.apply(np.vstack(rows)).reshape(len(bases), m, -1)
    keep = np.all((img[..., s + c:] >= h.eta / 4) & (img[..., s + c:] <= 3 * h.eta / 4), axis=2)
    if not np.all(np.any(keep, axis=1)):
        raise ModelError("no image point lands in the central band; c_f is miscalibrated")
    gaps = np.empty(len(bases))
    for k in range(len(bases)):
        cen = img[k][keep[k]][:, s:s + c]
        if c == 1:
            gaps[k] = cen.max() - cen.min()
        else:
            diff = cen[:, None, :] - cen[None, :, :]
            gaps[k] = np.sqrt((diff ** 2).sum(-1)).max()
    return gaps


def displacement_gap(h, xs, xc, n=401):
    """Gap of a single disk; see displacement_gaps."""
    return float(displacement_gaps(h, [(xs, xc)], n)[0])


def admissible_grid(h, n=20):
    """Grid of (x^s, x^c) base points in [eta/4, 3 eta/4]^s x [1/4, 3/4]^c (s = c = 1)."""
    xs = np.linspace(h.eta / 4, 3 * h.eta / 4, n)
    xc = np.linspace(0.25, 0.75, n)
    return [(a, b) for a in xs for b in xc]


def calibrate_cf(kappa=0.05, eta=0.02, n=12, margin=2.0):
    """Smallest gap/(kappa eta) at c_f=1 over admissible disks; returns margin*0.1/that.

    The module constant C_F was fixed from this measurement; the function is
    kept so the calibration can be re-run.
    """
    h = build_elementary(kappa, eta, c_f=1.0)
    worst = displacement_gaps(h, admissible_grid(h, n)).min()
    return margin * 0.1 / (worst / (kappa * eta))


# ---------------------------------------------------------------- C1 size

@dataclass(frozen=True)
class C1SizeReport:
    kappa: float
    sup_displacement: float
    unit_deviation: float
    deviation: float
    theta: float

    def to_doc(self):
        return {k: float(v) for k, v in self.__dict__.items()}


def _probe_points(h, n_grid, n_random, rng):
    g = (np.arange(n_grid) + 0.5) / n_grid
    grids = np.meshgrid(*([g] * h.d), indexing="ij")
    pts = np.stack([x.ravel() for x in grids], axis=1)
    return np.vstack([pts, rng.random((n_random, h.d))])


def estimate_c1_size(h, chart=None, n_grid=17, n_random=400, seed=0):
    """Finite-difference C1 size of h in the unit cube and conjugated into the torus.

    Without a chart the conjugation uses an identity frame. The unit-cube
    deviation is that of q -> S h(S^-1 q) on the rectangle's unit chart; the
    torus deviation is measured on psi^-1 o h o psi with central differences.
    """
    rng = np.random.default_rng(seed)
    d = h.d
    sc = h.scale()
    y = _probe_points(h, n_grid, n_random, rng)
    if chart is None:
        B, rho = np.eye(d), 0.1
    else:
        B, rho = chart.frames, chart.rho
    Binv = np.linalg.inv(B)

    def disp_q(yy):
        return flow_unit(yy, h.eps, h.axes)[0] * sc

    # unit cube: steps in q-coordinates, q = offset + sc*y
    tau_q = 1e-4 * h.eta
    unit = np.zeros((len(y), d, d))
    for k in range(d):
        e = np.zeros(d)
        e[k] = tau_q / sc[k]
        unit[:, :, k] = (disp_q(y + e) - disp_q(y - e)) / (2 * tau_q)
    # torus: displacement rho*B*dq as a function of the torus point
    tau_x = 1e-3 * rho * h.eta
    tor = np.zeros((len(y), d, d))
    for k in range(d):
        v = np.zeros(d)
        v[k] = tau_x
        dyv = (Binv @ v) / rho / sc
        tor[:, :, k] = rho * ((disp_q(y + dyv) - disp_q(y - dyv)) @ B.T) / (2 * tau_x)
    sup_disp = np.max(np.linalg.norm(rho * disp_q(y) @ B.T, axis=1))
    return C1SizeReport(float(h.kappa), float(sup_disp),
                        float(np.max(np.linalg.norm(unit, 2, axis=(1, 2)))),
                        float(np.max(np.linalg.norm(tor, 2, axis=(1, 2)))),
                        float(np.linalg.cond(B)))


# ---------------------------------------------------------------- composition

@dataclass(frozen=True)
class Placement:
    """A slice of a charted cube together with the rectangle layout inside it."""

    cube: ChartedCube
    slice_offset: np.ndarray
    layout: TileLayout
    axes: tuple | None = None


def single_rectangle(cube, offset, eta):
    """Placement of one rectangle at chart offset (d-vector) of width eta."""
    s, c, u = cube.dims
    offset = np.asarray(offset, dtype=float)
    layout = TileLayout(1, offset[:s][None, :] / eta, None)
    return Placement(cube, offset[s + c:], layout)


def _slice_box(pl, eta):
    """Frame coordinates (relative to the cube center, in torus units) of the slice."""
    s, c, u = pl.cube.dims
    lo = np.zeros(s + c + u)
    hi = np.ones(s + c + u)
    lo[s + c:] = pl.slice_offset
    hi[s + c:] = pl.slice_offset + eta * pl.layout.rows
    return pl.cube.rho * (lo - 0.5), pl.cube.rho * (hi - 0.5)


def _check_placements(placements, eta):
    for pl in placements:
        s, c, u = pl.cube.dims
        top = pl.slice_offset + eta * pl.layout.rows
        if np.any(pl.slice_offset < -1e-12) or np.any(top > 1 + 1e-9):
            raise ModelError("rectangle escapes its cube")
    if len(placements) < 2:
        return
    frames = np.array([pl.cube.frames for pl in placements])
    same = np.allclose(frames, frames[0])
    centers = np.array([pl.cube.center for pl in placements])
    boxes = [_slice_box(pl, eta) for pl in placements]
    lo = np.array([b[0] for b in boxes])
    hi = np.array([b[1] for b in boxes])
    if not same:
        raise ModelError("placements with different frames are not supported")
    B = frames[0]
    Binv = np.linalg.inv(B)
    reach = np.abs(B) @ np.maximum(np.abs(lo), np.abs(hi)).max(axis=0)
    shifts = np.stack(np.meshgrid(*([np.arange(-1, 2)] * B.shape[0]), indexing="ij"), -1).reshape(-1, B.shape[0])
    for a in range(len(placements)):
        delta = torus_delta(centers[a], centers[a + 1:])
        near = np.flatnonzero(np.all(np.abs(delta) <= 2 * reach + 1e-12, axis=1))
        for k in near:
            b = a + 1 + k
            for sh in shifts:
                e = Binv @ (delta[k] + sh)
                # slice a occupies [lo_a, hi_a], slice b occupies e + [lo_b, hi_b]
                if np.all(e + lo[b] < hi[a] - 1e-15) and np.all(e + hi[b] > lo[a] + 1e-15):
                    raise ModelError(f"overlapping slices in placements {a} and {b}")


def compose_global(f, placements, kappa, eta, c_f=C_F, check=True):
    """Composite g = f off the rectangles and chart-conjugated h o f on their preimages."""
    placements = list(placements)
    if check:
        _check_placements(placements, eta)
    if kappa == 0 or not placements:
        return Composite(f, ())
    patches = []
    hs = {}
    for pl in placements:
        axes = pl.axes or default_axes(pl.cube.dims)
        key = tuple(axes)
        if key not in hs:
            hs[key] = build_elementary(kappa, eta, axes, pl.cube.dims, c_f)
        patches.append(LocalPatch(pl.cube, pl.slice_offset, pl.layout, hs[key]))
    return Composite(f, tuple(patches))


def patch_displacement_bound(g):
    """Sup-norm bound on |g - f| in torus units (zero for an unperturbed composite)."""
    if not isinstance(g, Composite) or not g.patches:
        return 0.0
    t = g._table
    Gmax = _K
    # |dy_c| <= eps * max|G'|, |dy_u| <= eps * max|beta'| * max G
    dyc = t.cf * t.kappa * t.eta * 0.5
    dyu = t.cf * t.kappa * t.eta * _SLOPE * Gmax * t.eta
    return float(np.max(t.rho * np.linalg.norm(t.B, 2, axis=(1, 2)) * np.hypot(dyc, dyu)))


__all__ = ["ElementaryPerturbation", "build_elementary", "displacement_gap", "displacement_gaps", "estimate_c1_size",
           "compose_global", "Placement", "single_rectangle", "C1SizeReport", "calibrate_cf",
           "bump", "shear_template", "flow_unit", "C_F", "wrap"]


def rectangle_points(g, n, rng, lo=0.0, hi=1.0):
    """Random torus points inside rectangles of a composite (unit coordinates in [lo, hi]).

    Returns the points and the index of the patch each one belongs to.
    """
    s, c, u = g.splitting_dims
    if not g.patches:
        return np.zeros((0, g.d)), np.zeros(0, dtype=int)
    k = rng.integers(0, len(g.patches), n)
    pts = np.empty((n, g.d))
    for m in range(n):
        pt = g.patches[k[m]]
        lay, eta = pt.layout, pt.eta
        b = int(rng.integers(0, lay.rows ** u))
        bvec = np.array(np.unravel_index(b, (lay.rows,) * u), dtype=float)
        a = lay.anchors[b]
        if lay.period is not None:
            kmin = np.ceil(-a / lay.period)
            kmax = np.floor((1.0 / eta - 1.0 - a) / lay.period)
            a = a + lay.period * np.array([rng.integers(x, y + 1) for x, y in zip(kmin, kmax)])
        y = lo + (hi - lo) * rng.random(g.d)
        q = np.empty(g.d)
        q[:s] = eta * (a + y[:s])
        q[s:s + c] = y[s:s + c]
        q[s + c:] = pt.slice_offset + eta * (bvec + y[s + c:])
        pts[m] = pt.cube.psi_inv(q)
    return pts, k
