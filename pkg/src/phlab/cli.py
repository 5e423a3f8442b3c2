"""Command line entry point: certify, schedule, perturb, verify, census, leaf-dump.

Every command reads an optional JSON config, writes deterministic reports into
the output directory and a manifest holding hashes, versions, timings and the
file inventory. Timings live only in the manifest, so reports are byte-identical
across runs with the same seed.

Exit codes: 0 pass, 2 verification or certification failure, 3 infeasible
schedule, 4 bad config.
"""

import argparse
import copy
import csv
import dataclasses
import hashlib
import io
import json
import math
import os
import platform
import sys
import time
from dataclasses import asdict, dataclass, field
from importlib import metadata
from pathlib import Path

import numpy as np

from . import census as cen
from .cones import CertificationError, certify_model
from .coverings import ScheduleError, build_schedule, theta_bound
from .models import CAT, ModelError, SkewProduct, default_instance, model_from_doc
from .nji import (RESOLVABLE, PipelineError, break_joint_integrability, find_witness,
                  joint_integrability_probe, plan_schedule, robustness_recheck, sample_pairs,
                  search_context, stable_points, unstable_points, verify_nji)

EXIT_OK, EXIT_FAIL, EXIT_INFEASIBLE, EXIT_CONFIG = 0, 2, 3, 4

DEFAULTS = {
    "model": default_instance().to_doc(),
    "mode": "tight",
    "seed": 0,
    "rho": 0.24,
    "schedule": {"r": 0.25, "r_prime": 0.3, "t": 0.25, "gamma": 0.35, "kappa": 0.05},
    "certify": {"width": 0.02, "samples": 200, "narrowing": [0.004]},
    "verify": {"pairs": 100, "probe_pairs": 10, "robustness_rounds": 4},
    "census": {
        "horizontal": 16, "fibers": [8, 16, 32], "samples_per_box": 4,
        "models": {"config": "config", "perturbed": "perturbed",
                   "skew3": SkewProduct(CAT, 0.2, 3).to_doc()},
        "entropy": {"gamma": 0.2, "eta_sep": 0.05},
    },
    "leaf_dump": {"pair": 0, "points": 65},
    "out": "phlab-out",
}


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------- serialization

def _jsonable(obj):
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (set, frozenset)):
        return sorted(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def dumps(doc):
    """Sorted keys; floats use repr, which round-trips exactly."""
    return json.dumps(doc, sort_keys=True, indent=2, default=_jsonable) + "\n"


def canonical_hash(doc):
    text = json.dumps(doc, sort_keys=True, separators=(",", ":"), default=_jsonable)
    return hashlib.sha256(text.encode()).hexdigest()


def pop_timings(doc, prefix="", sink=None):
    """Move every nested "timings" entry out of a report into a flat dict."""
    sink = {} if sink is None else sink
    if isinstance(doc, dict):
        if isinstance(doc.get("timings"), dict):
            for k, v in doc.pop("timings").items():
                sink[f"{prefix}{k}"] = v
        for k, v in doc.items():
            pop_timings(v, f"{prefix}{k}.", sink)
    elif isinstance(doc, list):
        for v in doc:
            pop_timings(v, prefix, sink)
    return sink


# ---------------------------------------------------------------- config and manifest

def _merge(base, over, path=""):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in base:
            raise ConfigError(f"unknown config key {path}{k}")
        if isinstance(base[k], dict) and k not in ("model", "models"):
            if not isinstance(v, dict):
                raise ConfigError(f"config key {path}{k} must be an object")
            out[k] = _merge(base[k], v, f"{path}{k}.")
        else:
            out[k] = v
    return out


@dataclass
class ExperimentConfig:
    doc: dict
    workers: int = 1

    @classmethod
    def load(cls, path=None, seed=None, mode=None, out=None, workers=None):
        over = {}
        if path is not None:
            try:
                over = json.loads(Path(path).read_text())
            except OSError as exc:
                raise ConfigError(f"cannot read config: {exc}") from exc
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config is not valid JSON: {exc}") from exc
            if not isinstance(over, dict):
                raise ConfigError("config must be a JSON object")
        doc = _merge(DEFAULTS, over)
        for key, val in (("seed", seed), ("mode", mode), ("out", out)):
            if val is not None:
                doc[key] = val
        if not isinstance(doc["seed"], int) or isinstance(doc["seed"], bool):
            raise ConfigError("seed must be an integer")
        if doc["mode"] not in ("strict", "tight"):
            raise ConfigError("mode must be strict or tight")
        if workers is None:
            env = os.environ.get("PHLAB_WORKERS")
            try:
                workers = int(env) if env else 1
            except ValueError as exc:
                raise ConfigError("PHLAB_WORKERS must be an integer") from exc
        if workers < 1:
            raise ConfigError("workers must be positive")
        cfg = cls(doc, workers)
        cfg.model()
        return cfg

    def model(self):
        try:
            return model_from_doc(self.doc["model"])
        except ModelError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def seed(self):
        return self.doc["seed"]

    @property
    def out(self):
        return Path(self.doc["out"])

    def digest(self):
        return canonical_hash(self.doc)


@dataclass
class RunManifest:
    command: str
    config_hash: str
    model_hash: str
    schedule_hash: str | None = None
    timings: dict = field(default_factory=dict)
    files: dict = field(default_factory=dict)

    def versions(self):
        out = {"python": platform.python_version()}
        for pkg in ("artifact", "numpy", "scipy"):
            try:
                out[pkg] = metadata.version(pkg)
            except metadata.PackageNotFoundError:
                out[pkg] = None
        return out

    def to_doc(self):
        doc = asdict(self)
        doc["versions"] = self.versions()
        return doc


class Writer:
    """Writes report files and records their hashes in the manifest."""

    def __init__(self, cfg, manifest):
        self.dir = cfg.out
        self.dir.mkdir(parents=True, exist_ok=True)
        self.manifest = manifest

    def text(self, name, text):
        (self.dir / name).write_text(text)
        self.manifest.files[name] = hashlib.sha256(text.encode()).hexdigest()

    def json(self, name, doc):
        self.manifest.timings.update(pop_timings(doc, f"{name}:"))
        self.text(name, dumps(doc))

    def close(self):
        (self.dir / "manifest.json").write_text(dumps(self.manifest.to_doc()))


def _timed(manifest, key, fn, *args, **kw):
    t0 = time.perf_counter()
    try:
        return fn(*args, **kw)
    finally:
        manifest.timings[key] = time.perf_counter() - t0


# ---------------------------------------------------------------- pipelines

def _schedule_args(cfg):
    s = dict(cfg.doc["schedule"])
    kappa = float(s.pop("kappa"))
    return kappa, s


def _plan(cfg, model, manifest):
    kappa, targets = _schedule_args(cfg)
    # kappa = 0 keeps the geometry planned at the default kappa and drops every patch
    plan_kappa = kappa if kappa > 0 else DEFAULTS["schedule"]["kappa"]
    plan = _timed(manifest, "plan", plan_schedule, model, mode=cfg.doc["mode"], kappa=plan_kappa,
                  rho=cfg.doc["rho"], seed=cfg.seed, targets=targets)
    if kappa > 0:
        return plan
    cert, cov, slices, sched, timings = plan
    return cert, cov, slices, dataclasses.replace(sched, kappa=0.0), timings


def _construct(cfg, model, manifest, verify_slices=True):
    plan = _plan(cfg, model, manifest)
    return _timed(manifest, "construct", break_joint_integrability, model, seed=cfg.seed,
                  mode=cfg.doc["mode"], plan=plan, verify_slices=verify_slices)


def cmd_certify(cfg, writer):
    model = cfg.model()
    c = cfg.doc["certify"]
    try:
        cert = _timed(writer.manifest, "certify", certify_model, model, width=c["width"],
                      n_samples=c["samples"], seed=cfg.seed, narrowing_targets=c["narrowing"])
    except CertificationError as exc:
        writer.json("certificate.json", {"passed": False, "error": str(exc), "witness": exc.witness})
        print(f"certification failed: {exc}; witness {exc.witness}", file=sys.stderr)
        return EXIT_FAIL
    writer.json("certificate.json", cert.to_doc())
    return EXIT_OK


def _strict_schedule(cfg, model, manifest):
    kappa, targets = _schedule_args(cfg)
    theta = 0.8 * theta_bound(kappa)
    cert = _timed(manifest, "certify", certify_model, model, narrowing_targets=(theta,))
    return _timed(manifest, "schedule", build_schedule, cert, model.splitting_dims, mode="strict",
                  kappa=kappa, rho=cfg.doc["rho"], theta=theta, **targets)


def _infeasible_doc(sched):
    lg = sched.logs
    return {"feasible": False,
            "diagnostic": (f"infeasible eta_hat: log(eta_hat) = {lg['eta_hat']:.2f}, log(rho*eta) = "
                           f"{math.log(sched.rho) + lg['eta']:.2f} is below double precision")}


def cmd_schedule(cfg, writer):
    model = cfg.model()
    if cfg.doc["mode"] == "strict":
        sched = _strict_schedule(cfg, model, writer.manifest)
        doc = {"schedule": sched.to_doc(), "geometry": {"feasible": True}}
        if sched.rho * sched.eta < RESOLVABLE:
            doc["geometry"] = _infeasible_doc(sched)
        writer.manifest.schedule_hash = canonical_hash(doc["schedule"])
        writer.json("schedule.json", doc)
        if not doc["geometry"]["feasible"]:
            print(doc["geometry"]["diagnostic"], file=sys.stderr)
            return EXIT_INFEASIBLE
        return EXIT_OK
    cert, cov, slices, sched, timings = _plan(cfg, model, writer.manifest)
    doc = {"schedule": sched.to_doc(), "covering": cov.to_doc(), "slices": slices.to_doc(),
           "certificate": cert.to_doc(), "geometry": {"feasible": True}}
    writer.manifest.schedule_hash = canonical_hash(doc["schedule"])
    writer.manifest.timings.update({f"plan.{k}": v for k, v in timings.items()})
    writer.json("schedule.json", doc)
    return EXIT_OK


def cmd_perturb(cfg, writer):
    model = cfg.model()
    con = _construct(cfg, model, writer.manifest)
    writer.manifest.schedule_hash = canonical_hash(con.schedule.to_doc())
    writer.json("model.json", con.g.to_doc())
    writer.json("placements.json", con.placement_doc())
    writer.json("build.json", dict(con.report, model_hash=con.g.digest(), base_hash=model.digest()))
    return EXIT_OK


def _witness_row(w):
    return asdict(w)


def cmd_verify(cfg, writer):
    model = cfg.model()
    v = cfg.doc["verify"]
    con = _construct(cfg, model, writer.manifest, verify_slices=False)
    sched_hash = canonical_hash(con.schedule.to_doc())
    writer.manifest.schedule_hash = sched_hash
    rep = _timed(writer.manifest, "verify", verify_nji, con, n_pairs=v["pairs"], seed=cfg.seed,
                 workers=cfg.workers)
    kappa, targets = _schedule_args(cfg)
    rep.baseline = _timed(writer.manifest, "baseline", joint_integrability_probe, model,
                          n_pairs=v["probe_pairs"], seed=cfg.seed, t=targets["t"], gamma=targets["gamma"],
                          r=targets["r"], r_prime=targets["r_prime"])
    if rep.witnesses:
        rep.robustness = _timed(writer.manifest, "robustness", robustness_recheck, con, rep,
                                rounds=v["robustness_rounds"], seed=cfg.seed, workers=cfg.workers)
    doc = {"schedule_hash": sched_hash, "model_hash": con.g.digest(), "base_hash": model.digest(),
           "pairs": [_witness_row(w) for w in rep.witnesses], "failures": rep.failures,
           "aggregate": {"samples": rep.samples, "witnesses": len(rep.witnesses),
                         "delta_min": rep.delta_min, "delta_median": rep.delta_median,
                         "n_max": rep.n_max, "scale": rep.scale, "passed": rep.passed},
           "baseline": rep.baseline, "robustness": rep.robustness}
    writer.json("verify.json", doc)
    return EXIT_OK if rep.passed else EXIT_FAIL


def _census_models(cfg, manifest):
    out = {}
    for name, entry in sorted(cfg.doc["census"]["models"].items()):
        if entry == "config":
            out[name] = cfg.model()
        elif entry == "perturbed":
            out[name] = _construct(cfg, cfg.model(), manifest, verify_slices=False).g
        else:
            try:
                out[name] = model_from_doc(entry)
            except ModelError as exc:
                raise ConfigError(f"census model {name}: {exc}") from exc
    return out


def census_rows(model, c, seed):
    rows, tables = [], []
    for nf in c["fibers"]:
        graph = cen.build_box_graph(model, (c["horizontal"], c["horizontal"], nf),
                                    samples_per_box=c["samples_per_box"], seed=seed)
        cond = cen.chain_classes(graph)
        rep = cen.quasi_attractor_census(graph, cond)
        doc = rep.to_doc()
        doc["fiber"] = nf
        doc["graph"] = graph.to_doc()
        try:
            boxes = cen.class_boxes(cond, cond.terminal[0])
            bound, info = cen.entropy_lower_bound(model, boxes, graph, eta_sep=c["entropy"]["eta_sep"],
                                                  gamma=c["entropy"]["gamma"], seed=seed, details=True)
            doc["entropy"] = dict(info, bound=bound)
        except cen.EntropyError as exc:
            doc["entropy"] = {"bound": None, "reason": str(exc)}
        rows.append(doc)
        for i, vol in enumerate(rep.volumes):
            tables.append([nf, i, repr(vol), rep.trapping[i], rep.saturated[i]])
    return rows, tables


def cmd_census(cfg, writer):
    c = cfg.doc["census"]
    for nf in c["fibers"]:
        if nf < 1 or nf & (nf - 1):
            raise ConfigError("census fibers must be powers of 2")
    models = _census_models(cfg, writer.manifest)
    doc, lines = {}, []
    for name, model in models.items():
        rows, table = _timed(writer.manifest, f"census.{name}", census_rows, model, c, cfg.seed)
        counts = [r["terminal_classes"] for r in rows]
        doc[name] = {"model_hash": model.digest(), "sweep": rows, "terminal_counts": counts,
                     "non_increasing": all(b <= a for a, b in zip(counts, counts[1:]))}
        lines += [[name] + t for t in table]
    writer.json("census.json", doc)
    with_header = [["model", "fiber", "class", "volume", "trapping", "saturated"]] + lines
    writer.text("census_volumes.csv", _csv(with_header))
    return EXIT_OK


def _csv(rows):
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


def cmd_leaf_dump(cfg, writer):
    model = cfg.model()
    ld = cfg.doc["leaf_dump"]
    con = _construct(cfg, model, writer.manifest, verify_slices=False)
    ctx = search_context(con)
    k = int(ld["pair"])
    x, sigma = sample_pairs(con.g.d, k + 1, cfg.seed, ctx.r, ctx.r_prime)[k]
    w, diag = _timed(writer.manifest, "witness", find_witness, ctx, k, x, sigma)
    if w is None:
        writer.json("witness.json", {"pair": k, "witness": None, "diagnostic": diag})
        return EXIT_FAIL
    g, sched = con.g, con.schedule
    par = np.linspace(-1.0, 1.0, int(ld["points"]))
    leaves = [("stable", "y", stable_points(g, np.array(w.y), sched.gamma * par)),
              ("unstable", "y", unstable_points(g, np.array(w.y), sched.gamma * par)),
              ("stable", "x_prime", stable_points(g, np.array(w.x_prime), sched.gamma * par)),
              ("unstable", "x", unstable_points(g, np.array(w.x), sched.t * par))]
    scale = {"x": sched.t}
    rows = [["leaf", "kind", "through", "param", "x0", "x1", "x2"]]
    for i, (kind, through, pts) in enumerate(leaves):
        s = scale.get(through, sched.gamma)
        rows += [[i, kind, through, repr(float(s * p))] + [repr(float(c)) for c in q]
                 for p, q in zip(par, pts)]
    writer.json("witness.json", {"pair": k, "witness": asdict(w)})
    writer.text("leaves.csv", _csv(rows))
    return EXIT_OK


COMMANDS = {"certify": cmd_certify, "schedule": cmd_schedule, "perturb": cmd_perturb,
            "verify": cmd_verify, "census": cmd_census, "leaf-dump": cmd_leaf_dump}


def build_parser():
    p = argparse.ArgumentParser(prog="phlab", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="JSON config overriding the defaults")
    p.add_argument("--seed", type=int)
    p.add_argument("--mode", choices=("strict", "tight"))
    p.add_argument("--out", help="output directory")
    p.add_argument("--workers", type=int, help="worker processes (default $PHLAB_WORKERS or 1)")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = ExperimentConfig.load(args.config, args.seed, args.mode, args.out, args.workers)
    except ConfigError as exc:
        print(f"bad config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    manifest = RunManifest(args.command, cfg.digest(), cfg.model().digest())
    writer = Writer(cfg, manifest)
    try:
        code = COMMANDS[args.command](cfg, writer)
    except ConfigError as exc:
        print(f"bad config: {exc}", file=sys.stderr)
        code = EXIT_CONFIG
    except ScheduleError as exc:
        print(f"schedule: {exc}", file=sys.stderr)
        code = EXIT_INFEASIBLE
    except PipelineError as exc:
        print(str(exc), file=sys.stderr)
        code = EXIT_FAIL
    writer.manifest.timings = dict(sorted(writer.manifest.timings.items()))
    writer.close()
    return code


if __name__ == "__main__":
    sys.exit(main())
