"""Constant-width cone fields around the splitting and their sampled certification."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .models import Composite, MapModel, splitting_matrix

FORWARD_LABELS = ("u", "cu")
BACKWARD_LABELS = ("s", "cs")


class CertificationError(RuntimeError):
    """A sampled cone or rate check failed; carries the violating witness."""

    def __init__(self, message, witness):
        super().__init__(message)
        self.witness = witness


@dataclass(frozen=True, eq=False)
class ConeField:
    """{v : |v_perp| < width |v_E|} around the span of `frame` (constant over the torus)."""

    frame: np.ndarray
    width: float
    label: str

    def __post_init__(self):
        if self.width <= 0:
            raise ValueError("cone width must be positive")
        if self.label not in FORWARD_LABELS + BACKWARD_LABELS:
            raise ValueError(f"unknown cone label {self.label!r}")
        Q, _ = np.linalg.qr(np.asarray(self.frame, dtype=float))
        object.__setattr__(self, "basis", Q)
        d = Q.shape[0]
        full, _ = np.linalg.qr(np.hstack([Q, np.eye(d)]))
        object.__setattr__(self, "complement", full[:, Q.shape[1]:d])

    @property
    def forward(self):
        return self.label in FORWARD_LABELS

    def split(self, v):
        """(|v_E|, |v_perp|) for vectors v (..., d)."""
        along = v @ self.basis
        perp = v - along @ self.basis.T
        return np.linalg.norm(along, axis=-1), np.linalg.norm(perp, axis=-1)

    def margin(self, v):
        """Relative slack width*|v_E| - |v_perp|, divided by |v|; positive inside."""
        a, p = self.split(v)
        return (self.width * a - p) / np.linalg.norm(v, axis=-1)

    def boundary_mesh(self, n=64):
        """Unit directions on the cone boundary, |v_perp| = width |v_E|."""
        k = self.basis.shape[1]
        m = self.complement.shape[1]
        if m == 0:
            return self.basis.T.copy()
        na, nb = _split_budget(k, m, n)
        A = sphere_mesh(k, na) @ self.basis.T
        Bm = sphere_mesh(m, nb) @ self.complement.T
        v = (A[:, None, :] + self.width * Bm[None, :, :]).reshape(-1, A.shape[1])
        return v / np.linalg.norm(v, axis=1, keepdims=True)

    def with_width(self, width):
        return ConeField(self.frame, width, self.label)

    def to_doc(self):
        return {"label": self.label, "width": float(self.width), "frame": self.basis.tolist()}


def _split_budget(k, m, n):
    if k == 1:
        return 2, max(1, n // 2) if m > 1 else 2
    if m == 1:
        return max(1, n // 2), 2
    r = int(round(math.sqrt(n)))
    return r, max(1, n // r)


def sphere_mesh(dim, n):
    """Deterministic quasi-uniform points on the unit sphere S^(dim-1) in R^dim."""
    if dim == 1:
        return np.array([[1.0], [-1.0]])
    if dim == 2:
        t = 2 * np.pi * (np.arange(n) + 0.5) / n
        return np.column_stack([np.cos(t), np.sin(t)])
    if dim == 3:
        i = np.arange(n) + 0.5
        z = 1 - 2 * i / n
        r = np.sqrt(1 - z * z)
        phi = np.pi * (1 + 5 ** 0.5) * i
        return np.column_stack([r * np.cos(phi), r * np.sin(phi), z])
    g = np.random.default_rng(dim * 7919 + n).normal(size=(n, dim))
    return g / np.linalg.norm(g, axis=1, keepdims=True)


def cone_contains(cone, v):
    v = np.asarray(v, dtype=float)
    if np.any(np.linalg.norm(v, axis=-1) == 0):
        raise ValueError("zero vector has no direction")
    a, p = cone.split(v)
    return p < cone.width * a


def standard_cones(model, width):
    """The four cone fields u, cu, s, cs around the (base) exact splitting."""
    B = splitting_matrix(model)
    s, c, u = model.splitting_dims
    return {
        "u": ConeField(B[:, s + c:], width, "u"),
        "cu": ConeField(B[:, s:], width, "cu"),
        "s": ConeField(B[:, :s], width, "s"),
        "cs": ConeField(B[:, :s + c], width, "cs"),
    }


class InverseModel(MapModel):
    """g^-1 viewed as a map in its own right."""

    def __init__(self, model):
        self.model = model
        self.d = model.d
        s, c, u = model.splitting_dims
        self.splitting_dims = (u, c, s)

    def _eval(self, p):
        return self.model._inverse(p)

    def _inverse(self, p):
        return self.model._eval(p)

    def _derivative(self, p):
        return np.linalg.inv(self.model._derivative(self.model._inverse(p)))

    def to_doc(self):
        return {"kind": "inverse", "of": self.model.to_doc()}


def orbit_derivative(model, p, n, forward=True):
    """Derivative of the n-th forward (or backward) iterate at p, and the orbit."""
    p = np.atleast_2d(np.asarray(p, dtype=float))
    M = np.broadcast_to(np.eye(model.d), (len(p), model.d, model.d)).copy()
    orbit = [p]
    q = p
    for _ in range(n):
        if forward:
            D = model.derivative(q)
            q = model.eval(q)
        else:
            q = model.inverse(q)
            D = np.linalg.inv(model.derivative(q))
        M = np.einsum("nij,njk->nik", D, M)
        orbit.append(q)
    return M, orbit


@dataclass
class HyperbolicityCertificate:
    ell: int
    samples: int
    widths: dict
    margins: dict
    expansion_u: float
    expansion_s: float
    center_min: float
    center_max: float
    rate_margin: float
    narrowing: dict = field(default_factory=dict)
    mesh: int = 64
    norm_max: float = float("nan")
    witness: dict | None = None

    @property
    def passed(self):
        return all(m > 0 for m in self.margins.values()) and self.rate_margin > 0

    def delta(self):
        """Sampled bound on |Dg| (which for these maps also bounds |Dg^-1|)."""
        return self.norm_max

    def to_doc(self):
        return {
            "ell": self.ell, "samples": self.samples, "mesh": self.mesh,
            "widths": {k: float(v) for k, v in sorted(self.widths.items())},
            "margins": {k: float(v) for k, v in sorted(self.margins.items())},
            "expansion_u": float(self.expansion_u), "expansion_s": float(self.expansion_s),
            "center_min": float(self.center_min), "center_max": float(self.center_max),
            "rate_margin": float(self.rate_margin), "norm_max": float(self.norm_max),
            "narrowing": {repr(float(a)): int(n) for a, n in sorted(self.narrowing.items())},
            "passed": bool(self.passed),
        }


def _vectors_in(frame, n):
    Q, _ = np.linalg.qr(frame)
    return sphere_mesh(Q.shape[1], n) @ Q.T if Q.shape[1] else np.zeros((0, frame.shape[0]))


def certify_invariance(model, cones, samples, n_iter=1, mesh=64, raise_on_failure=True,
                       frames=None, dims=None):
    """Sampled check of strict cone invariance and the rate inequalities.

    Forward cones (u, cu) are pushed by Dg^n, backward cones (s, cs) by
    Dg^-n; each image of a boundary direction must land strictly inside the
    cone at the image point. Unstable vectors must expand forward, stable
    ones backward, and at every sample
    |Dg^n v^s| < min(1, |Dg^n v^c|) <= max(1, |Dg^n v^c|) < |Dg^n v^u|
    for unit vectors along the (base) splitting, or along `frames` split as
    `dims` when given.
    """
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    cones = list(cones.values()) if isinstance(cones, dict) else list(cones)
    Mf, _ = orbit_derivative(model, samples, n_iter, True)
    Mb, _ = orbit_derivative(model, samples, n_iter, False)
    margins, widths = {}, {}
    exp_u, exp_s = np.inf, np.inf
    witness = None
    for cone in cones:
        M = Mf if cone.forward else Mb
        dirs = np.vstack([cone.boundary_mesh(mesh), cone.basis.T])
        img = np.einsum("nij,kj->nki", M, dirs)
        mg = cone.margin(img)
        worst = np.unravel_index(np.argmin(mg), mg.shape)
        margins[cone.label] = float(mg[worst])
        widths[cone.label] = cone.width
        if mg[worst] <= 0 and witness is None:
            witness = {"cone": cone.label, "point": samples[worst[0]].tolist(),
                       "vector": dirs[worst[1]].tolist(), "margin": float(mg[worst])}
        stretch = np.linalg.norm(img, axis=2)
        if cone.label == "u":
            exp_u = float(stretch.min())
        if cone.label == "s":
            exp_s = float(stretch.min())
    B = splitting_matrix(model) if frames is None else frames
    s, c, u = model.splitting_dims if dims is None else dims
    vs = np.linalg.norm(np.einsum("nij,kj->nki", Mf, _vectors_in(B[:, :s], 8)), axis=2).max(axis=1)
    vu = np.linalg.norm(np.einsum("nij,kj->nki", Mf, _vectors_in(B[:, s + c:], 8)), axis=2).min(axis=1)
    if c:
        vc = np.linalg.norm(np.einsum("nij,kj->nki", Mf, _vectors_in(B[:, s:s + c], 8)), axis=2)
        cmin, cmax = vc.min(axis=1), vc.max(axis=1)
    else:
        cmin = cmax = np.ones(len(samples))
    rate = np.minimum(np.minimum(1, cmin) - vs, vu - np.maximum(1, cmax))
    cert = HyperbolicityCertificate(n_iter, len(samples), widths, margins,
                                    exp_u if np.isfinite(exp_u) else float("nan"),
                                    exp_s if np.isfinite(exp_s) else float("nan"),
                                    float(cmin.min()), float(cmax.max()), float(rate.min()),
                                    mesh=mesh)
    cert.norm_max = float(max(np.linalg.norm(Mf, 2, axis=(1, 2)).max(),
                              np.linalg.norm(Mb, 2, axis=(1, 2)).max()))
    if ("u" in margins and not exp_u > 1) or ("s" in margins and not exp_s > 1):
        witness = witness or {"cone": "u" if not exp_u > 1 else "s",
                              "point": samples[0].tolist(), "expansion": min(exp_u, exp_s)}
    if rate.min() <= 0 and witness is None:
        k = int(np.argmin(rate))
        witness = {"rates": "splitting inequality", "point": samples[k].tolist(),
                   "margin": float(rate[k])}
    if witness is not None and raise_on_failure:
        raise CertificationError(f"certification failed: {witness}", witness)
    cert.witness = witness
    return cert


def narrowing_iterations(model, cone, a, samples, cap=60, mesh=64):
    """Smallest N with Dg^N(cone of width eps0) inside the width-a cone at all usable samples.

    Samples whose N-orbit meets a perturbation rectangle are skipped, which is
    the hypothesis under which cone narrowing is claimed.
    """
    if a >= cone.width:
        return 0
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    dirs = np.vstack([cone.boundary_mesh(mesh), cone.basis.T])
    target = cone.with_width(a)
    M = np.broadcast_to(np.eye(model.d), (len(samples), model.d, model.d)).copy()
    q = samples
    usable = np.ones(len(samples), dtype=bool)
    for n in range(1, cap + 1):
        if cone.forward:
            D = model.derivative(q)
            if isinstance(model, Composite):
                usable &= model.patch_of(model.base.eval(q)) < 0
            q = model.eval(q)
        else:
            q = model.inverse(q)
            if isinstance(model, Composite):
                usable &= model.patch_of(model.base.eval(q)) < 0
            D = np.linalg.inv(model.derivative(q))
        M = np.einsum("nij,njk->nik", D, M)
        if not np.any(usable):
            raise CertificationError("every sample orbit meets a rectangle", {"n": n})
        img = np.einsum("nij,kj->nki", M[usable], dirs)
        if np.all(target.margin(img) > 0):
            return n
    raise CertificationError(f"cone does not narrow to {a} within {cap} iterates",
                             {"a": a, "cap": cap})


def narrowing_oracle(rate, eps0, a):
    """ceil(log(eps0/a)/log(rate)) for linear cone contraction at the given rate."""
    return max(0, math.ceil(math.log(eps0 / a) / math.log(rate) - 1e-12))


def default_samples(model, n, seed=0):
    return np.random.default_rng(seed).random((n, model.d))


def certify_model(model, width=0.02, n_samples=200, seed=0, labels=("u", "cu", "s", "cs"),
                  narrowing_targets=(), extra_samples=None, mesh=64):
    """Certificate for the standard cones, including a narrowing table for the cu-cone."""
    s, c, u = model.splitting_dims
    if s == 0 or u == 0:
        raise CertificationError("no contracting or expanding eigendirections",
                                 {"splitting_dims": [s, c, u]})
    samples = default_samples(model, n_samples, seed)
    if extra_samples is not None and len(extra_samples):
        samples = np.vstack([samples, extra_samples])
    cones = standard_cones(model, width)
    cert = certify_invariance(model, [cones[k] for k in labels], samples, mesh=mesh)
    for a in narrowing_targets:
        cert.narrowing[float(a)] = narrowing_iterations(model, cones["cu"], a, samples, mesh=mesh)
    return cert
