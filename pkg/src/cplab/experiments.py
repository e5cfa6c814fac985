"""Batch experiment harness: config loading, replica scheduling, reports.

Every experiment is driven by a TOML config and a root seed.  Replica-level
work is keyed by replica index through derived seeds, and partial results
are merged in index order, so the emitted metrics are identical for any
worker count.  Result files are written atomically and embed the fully
resolved configuration plus its hash, making every number reproducible
from the file alone.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from . import rng
from .spacetime import (Box, InvariantViolation, make_geometry, q_params,
                        sample_diagram)
from .reachability import sample_occupancy_field
from .percolation import (CrossingSpec, binomial_estimate, extract_clusters,
                          fit_tail, has_crossing, InsufficientTailError)
from .discretization import default_delta, sandwich_check
from .influence import influence_mc, threshold_window
from .coupling import couple_diagrams, verify_stability

ARTIFACT_VERSION = "0.1.0"

EXPERIMENTS = ("tail", "crossing", "finite_size", "mixing", "influence",
               "threshold_window", "sandwich", "coupling_audit", "sweep")

_DEFAULTS = {
    "replicas": 200,
    "seed": 0,
    "confidence": 0.95,
    "threads": 1,
    "alpha": 0.25,
    "tail_floor": 10,
    "eps": 0.25,
}


class ConfigError(ValueError):
    """Invalid or incomplete experiment configuration (exit code 2)."""


def load_config(path) -> dict:
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except (OSError, tomllib.TOMLDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    return resolve_config(raw)


def resolve_config(raw: dict) -> dict:
    """Validate and fill defaults; the resolved dict is echoed in outputs."""
    cfg = dict(raw)
    exp = cfg.get("experiment")
    if exp not in EXPERIMENTS:
        raise ConfigError(f"experiment must be one of {EXPERIMENTS}, got {exp!r}")
    for key in ("replicas", "seed", "confidence", "threads"):
        cfg.setdefault(key, _DEFAULTS[key])
    geo = dict(cfg.get("geometry", {}))
    if "n" not in geo and "n_list" not in geo:
        raise ConfigError("geometry.n or geometry.n_list is required")
    if "n" in geo and (not isinstance(geo["n"], int) or geo["n"] < 1):
        raise ConfigError("geometry.n must be a positive integer")
    geo.setdefault("cylinder", exp in ("influence", "threshold_window"))
    cfg["geometry"] = geo
    par = dict(cfg.get("params", {}))
    if exp in ("sweep", "threshold_window"):
        if "q_grid" not in par:
            raise ConfigError(f"{exp} needs params.q_grid")
    elif "q" not in par and "lam" not in par:
        raise ConfigError("params.q or params.lam is required")
    cfg["params"] = par
    dis = dict(cfg.get("discretization", {}))
    dis.setdefault("alpha", _DEFAULTS["alpha"])
    cfg["discretization"] = dis
    if exp == "tail":
        t = dict(cfg.get("tail", {}))
        t.setdefault("tail_floor", _DEFAULTS["tail_floor"])
        cfg["tail"] = t
    if exp == "finite_size":
        fs = dict(cfg.get("finite_size", {}))
        if "eps_hat" not in fs:
            raise ConfigError("finite_size.eps_hat must be set explicitly "
                              "(no non-constructive default is assumed)")
        cfg["finite_size"] = fs
    if exp == "coupling_audit":
        ca = dict(cfg.get("coupling_audit", {}))
        if "q2" not in ca:
            raise ConfigError("coupling_audit.q2 is required")
        ca.setdefault("pairs", cfg["replicas"])
        cfg["coupling_audit"] = ca
    if exp == "threshold_window":
        tw = dict(cfg.get("threshold_window", {}))
        tw.setdefault("eps", _DEFAULTS["eps"])
        cfg["threshold_window"] = tw
    return cfg


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _params_of(cfg: dict, q: float | None = None):
    from .spacetime import lambda_params
    if q is not None:
        return q_params(q)
    par = cfg["params"]
    if "q" in par:
        return q_params(par["q"])
    return lambda_params(par["lam"])


def _geometry_of(cfg: dict, n: int | None = None):
    geo = cfg["geometry"]
    return make_geometry(n if n is not None else geo["n"],
                         cylinder=geo.get("cylinder", False))


def _delta_of(cfg: dict, n: int) -> float:
    dis = cfg["discretization"]
    return dis.get("delta", default_delta(n, dis["alpha"]))


# ---------------------------------------------------------------------------
# Replica kernels (module-level, picklable, keyed by replica index)
# ---------------------------------------------------------------------------

def _kernel_tail(cfg, i):
    g = _geometry_of(cfg)
    f = sample_occupancy_field(g, _params_of(cfg), rng.replica_seed(cfg["seed"], i))
    return extract_clusters(f).sizes.tolist()


def _crossing_spec(cfg, g) -> CrossingSpec:
    c = cfg.get("crossing", {})
    n = g.n
    rect = Box(*c.get("rect", (0, 0, 3 * n, n)))
    return CrossingSpec(rect, c.get("direction", "horizontal"))


def _kernel_crossing(cfg, i):
    g = _geometry_of(cfg)
    spec = _crossing_spec(cfg, g)
    f = sample_occupancy_field(g, _params_of(cfg),
                               rng.replica_seed(cfg["seed"], i), box=spec.rect)
    return int(has_crossing(f, spec))


def _kernel_finite_size(cfg, i):
    g = _geometry_of(cfg)
    n = g.n
    p = _params_of(cfg)
    rect = Box(0, 0, 3 * n, n)
    sv = rng.replica_seed(cfg["seed"], 2 * i)
    sh = rng.replica_seed(cfg["seed"], 2 * i + 1)
    fv = sample_occupancy_field(g, p, sv, box=rect)
    fh = sample_occupancy_field(g, p, sh, box=rect)
    return (has_crossing(fv, CrossingSpec(rect, "vertical")),
            has_crossing(fh, CrossingSpec(rect, "horizontal")))


def _mixing_rects(cfg, g) -> list[Box]:
    n, r = g.n, g.trunc_radius
    mx = cfg.get("mixing", {})
    if "rectangles" in mx:
        return [Box(*t) for t in mx["rectangles"]]
    gap = mx.get("gap", 2 * r + 1)
    return [Box(0, 0, 3 * n, n), Box(0, n + gap, 3 * n, 2 * n + gap)]


def _kernel_mixing(cfg, i):
    from .reachability import occupancy_field
    g = _geometry_of(cfg)
    rects = _mixing_rects(cfg, g)
    bounding = Box(min(b.x0 for b in rects) - g.trunc_radius,
                   min(b.y0 for b in rects) - g.trunc_radius,
                   max(b.x1 for b in rects) + g.trunc_radius,
                   max(b.y1 for b in rects) + g.trunc_radius)
    dia = sample_diagram(g, _params_of(cfg), rng.replica_seed(cfg["seed"], i),
                         box=bounding, depth=g.trunc_depth)
    vals = []
    for rect in rects:
        f = occupancy_field(dia, g.n, box=rect)
        vals.append(has_crossing(f, CrossingSpec(rect, "horizontal")))
    return vals


def _kernel_sandwich(cfg, i):
    g = _geometry_of(cfg)
    n = g.n
    delta = _delta_of(cfg, n)
    r = g.trunc_radius
    foot = Box(-r, -r, r, r)
    dia = sample_diagram(g, _params_of(cfg), rng.replica_seed(cfg["seed"], i),
                         box=foot, depth=g.trunc_depth)
    b1, b2, b3 = sandwich_check(dia, delta, (0, 0), n)
    # tight variant: stability width delta instead of the widened 3*delta,
    # reported so the unresolved guard-width question stays measurable
    from .reachability import boundary_for as _bf, delta_stable_reachable
    b3_tight = delta_stable_reachable(dia, _bf((0, 0), n), delta)
    return [b1, b2, b3, b3_tight]


def _kernel_coupling(cfg, payload):
    n, i = payload
    g = make_geometry(n)
    ca = cfg["coupling_audit"]
    alpha = cfg["discretization"]["alpha"]
    cd = couple_diagrams(g, cfg["params"]["q"], ca["q2"],
                         seed=rng.replica_seed(cfg["seed"], n * 1_000_003 + i),
                         alpha=alpha, size_cap=ca.get("size_cap"))
    rep = verify_stability(cd)
    out = rep.to_dict()
    out["audit"] = cd.audit_record()
    return out


def _kernel_sweep(cfg, payload):
    q, n, gi, i = payload
    g = make_geometry(n)
    spec = _crossing_spec(cfg, g)
    f = sample_occupancy_field(g, q_params(q),
                               rng.derived_seed(cfg["seed"], rng.EVENT_MC,
                                                gi, n, i),
                               box=spec.rect)
    return int(has_crossing(f, spec))


_KERNELS = {
    "tail": _kernel_tail,
    "crossing": _kernel_crossing,
    "finite_size": _kernel_finite_size,
    "mixing": _kernel_mixing,
    "sandwich": _kernel_sandwich,
    "coupling_audit": _kernel_coupling,
    "sweep": _kernel_sweep,
}


def _kernel_range(args):
    name, cfg, items = args
    k = _KERNELS[name]
    return [k(cfg, it) for it in items]


def map_replicas(name: str, cfg: dict, items, threads: int) -> list:
    """Run kernel ``name`` over ``items``; results in item order regardless
    of the worker count."""
    items = list(items)
    if threads <= 1 or len(items) < 2:
        k = _KERNELS[name]
        return [k(cfg, it) for it in items]
    chunk = max(1, math.ceil(len(items) / (threads * 4)))
    batches = [(name, cfg, items[lo:lo + chunk])
               for lo in range(0, len(items), chunk)]
    out = []
    with ProcessPoolExecutor(max_workers=threads) as ex:
        for part in ex.map(_kernel_range, batches):
            out.extend(part)
    return out


# ---------------------------------------------------------------------------
# Experiment drivers
# ---------------------------------------------------------------------------

def _estimate_metrics(bits, cfg) -> dict:
    est = binomial_estimate(int(sum(bits)), len(bits), cfg["confidence"])
    return est.to_dict()


def run_tail(cfg, threads):
    sizes = []
    per_replica = map_replicas("tail", cfg, range(cfg["replicas"]), threads)
    for s in per_replica:
        sizes.extend(s)
    sizes = np.array(sizes, np.int64) if sizes else np.zeros(0, np.int64)
    hist = np.bincount(sizes) if sizes.size else np.zeros(1, int)
    metrics = {"n_clusters": int(sizes.size),
               "occupied": int(sizes.sum()),
               "histogram": {str(s): int(c) for s, c in enumerate(hist) if c}}
    try:
        pair = fit_tail(sizes, cfg["tail"]["tail_floor"])
        metrics["fit"] = {
            "tail_floor": pair.exponential.tail_floor,
            "n_tail": pair.n_tail,
            "exponential": {"rate": pair.exponential.rate_or_exponent,
                            "loglik": pair.exponential.goodness,
                            "degenerate": pair.exponential.degenerate},
            "power_law": {"exponent": pair.power_law.rate_or_exponent,
                          "loglik": pair.power_law.goodness,
                          "degenerate": pair.power_law.degenerate},
            "note": pair.note,
        }
    except InsufficientTailError as e:
        metrics["fit"] = {"error": str(e)}
    tables = {"cluster_hist.csv": [("size", "count")]
              + [(s, int(c)) for s, c in enumerate(hist) if c]}
    return metrics, tables, per_replica


def run_crossing(cfg, threads):
    bits = map_replicas("crossing", cfg, range(cfg["replicas"]), threads)
    return {"crossing": _estimate_metrics(bits, cfg)}, {}, bits


def run_finite_size(cfg, threads):
    pairs = map_replicas("finite_size", cfg, range(cfg["replicas"]), threads)
    v = _estimate_metrics([p[0] for p in pairs], cfg)
    h = _estimate_metrics([p[1] for p in pairs], cfg)
    eps_hat = cfg["finite_size"]["eps_hat"]
    if v["estimate"] < eps_hat:
        branch = "a"
    elif h["estimate"] > 1 - eps_hat:
        branch = "b"
    else:
        branch = "neither"
    return ({"eps_hat": eps_hat, "v": v, "h": h, "branch": branch}, {}, pairs)


def run_mixing(cfg, threads):
    g = _geometry_of(cfg)
    rects = _mixing_rects(cfg, g)
    r = g.trunc_radius
    for i in range(len(rects)):
        for j in range(i + 1, len(rects)):
            if rects[i].distance(rects[j]) <= 2 * r:
                raise ConfigError("mixing rectangles closer than 2*sqrt(n)")
    vals = map_replicas("mixing", cfg, range(cfg["replicas"]), threads)
    k = len(rects)
    joint = _estimate_metrics([all(v) for v in vals], cfg)
    margs = [_estimate_metrics([v[j] for v in vals], cfg) for j in range(k)]
    prod = float(np.prod([m["estimate"] for m in margs]))
    se_prod = prod * math.sqrt(sum((m["se"] / m["estimate"]) ** 2
                                   for m in margs if m["estimate"] > 0))
    pa_ok = prod <= joint["estimate"] + 3 * math.hypot(joint["se"], se_prod)
    dil = [b.dilate(r) for b in rects]
    disjoint = all(dil[i].distance(dil[j]) >= 1
                   for i in range(k) for j in range(i + 1, k))
    metrics = {"k": k, "joint": joint, "marginals": margs,
               "product_of_marginals": prod,
               "positive_association_ok": bool(pa_ok),
               "factorization_exact": bool(disjoint),
               "rectangles": [b.as_tuple() for b in rects]}
    return metrics, {}, vals


def run_influence(cfg, threads):
    g = _geometry_of(cfg)
    n = g.n
    delta = _delta_of(cfg, n)
    inf_cfg = cfg.get("influence", {})
    classes = [tuple(c) for c in inf_cfg["classes"]] if "classes" in inf_cfg \
        else None
    rep = influence_mc(g, _params_of(cfg), delta, cfg["replicas"],
                       cfg["seed"], classes=classes, level=cfg["confidence"])
    rows = [("class_key", "influence", "stderr")]
    for key in sorted(rep.class_influence):
        rows.append((f"mark{key[0]}_k{key[1]}_row{key[2]}",
                     rep.class_influence[key], rep.class_stderr[key]))
    metrics = {"p_event": rep.p_event, "sum_influences": rep.sum_influences,
               "m": rep.m, "delta": delta,
               "classes": {f"{k}": rep.class_influence[k]
                           for k in rep.class_influence}}
    return metrics, {"influence.csv": rows}, None


def run_threshold_window(cfg, threads):
    geo = cfg["geometry"]
    ns = geo.get("n_list", [geo.get("n")])
    eps = cfg["threshold_window"]["eps"]
    grid = cfg["params"]["q_grid"]
    out = {}
    rows = [("n", "q", "estimate", "ci_lo", "ci_hi", "replicas", "seed")]
    for n in ns:
        g = make_geometry(n, cylinder=True)
        delta = _delta_of(cfg, n)
        rep = threshold_window(g, delta, grid, cfg["replicas"],
                               rng.replica_seed(cfg["seed"], n), eps=eps,
                               level=cfg["confidence"])
        out[str(n)] = rep.to_dict()
        for q, e in zip(rep.q_grid, rep.estimates):
            rows.append((n, q, e.estimate, e.ci_lo, e.ci_hi, e.replicas,
                         cfg["seed"]))
    return {"eps": eps, "windows": out}, {"window.csv": rows}, None


def run_sandwich(cfg, threads):
    rows = map_replicas("sandwich", cfg, range(cfg["replicas"]), threads)
    arr = np.array(rows)
    counts = {}
    for b1, b2, b3, _ in rows:
        key = f"{b1}{b2}{b3}"
        counts[key] = counts.get(key, 0) + 1
    viol_12 = int(np.sum(arr[:, 1] > arr[:, 0]))
    metrics = {"pattern_counts": counts,
               "upper_violations": viol_12,
               "lower_exceptions": int(np.sum(arr[:, 2] > arr[:, 1])),
               "lower_bound_rate": float(np.mean(arr[:, 1] >= arr[:, 2])),
               "tight_lower_bound_rate": float(np.mean(arr[:, 1] >= arr[:, 3]))}
    if viol_12:
        raise InvariantViolation("certified occupancy exceeded reachability")
    return metrics, {}, rows


def run_coupling_audit(cfg, threads):
    geo = cfg["geometry"]
    ns = geo.get("n_list", [geo.get("n")])
    pairs = cfg["coupling_audit"]["pairs"]
    rows = [("n", "pairs", "occupied", "failures", "failure_rate",
             "pair_failure_rate", "implication_violations", "crossed",
             "oversized_pairs")]
    per_n = {}
    traces = []
    for n in ns:
        items = [(n, i) for i in range(pairs)]
        reps = map_replicas("coupling_audit", cfg, items, threads)
        traces.extend(reps)
        occupied = sum(r["occupied"] for r in reps)
        failures = sum(len(r["failures"]) for r in reps)
        fail_pairs = sum(1 for r in reps if r["failures"])
        impl = sum(1 for r in reps if r["failures"] and not r["any_oversized"])
        crossed = sum(r["audit"]["n_crossed"] for r in reps)
        oversized = sum(1 for r in reps if r["audit"]["n_oversized"])
        rate = failures / occupied if occupied else 0.0
        per_n[str(n)] = {
            "pairs": pairs, "occupied": occupied, "failures": failures,
            "failure_rate": rate,
            "pair_failure_rate": fail_pairs / pairs,
            "implication_violations": impl,
            "crossed": crossed,
            "oversized_pairs": oversized,
            "size_cap": reps[0]["size_cap"] if reps else None,
        }
        rows.append((n, pairs, occupied, failures, rate, fail_pairs / pairs,
                     impl, crossed, oversized))
        if impl:
            raise InvariantViolation(
                f"stability failure without an oversized cluster at n={n}")
    return {"per_n": per_n}, {"coupling_audit.csv": rows}, traces


def run_sweep(cfg, threads):
    geo = cfg["geometry"]
    ns = geo.get("n_list", [geo.get("n")])
    grid = cfg["params"]["q_grid"]
    rows = [("q", "n", "estimate", "ci_lo", "ci_hi", "replicas", "seed")]
    metrics = {}
    for n in ns:
        for gi, q in enumerate(grid):
            items = [(q, n, gi, i) for i in range(cfg["replicas"])]
            bits = map_replicas("sweep", cfg, items, threads)
            est = binomial_estimate(int(sum(bits)), len(bits),
                                    cfg["confidence"])
            rows.append((q, n, est.estimate, est.ci_lo, est.ci_hi,
                         est.replicas, cfg["seed"]))
            metrics[f"n{n}_q{q}"] = est.to_dict()
    return metrics, {"sweep.csv": rows}, None


_DRIVERS = {
    "tail": run_tail,
    "crossing": run_crossing,
    "finite_size": run_finite_size,
    "mixing": run_mixing,
    "influence": run_influence,
    "threshold_window": run_threshold_window,
    "sandwich": run_sandwich,
    "coupling_audit": run_coupling_audit,
    "sweep": run_sweep,
}


# ---------------------------------------------------------------------------
# Result records, atomic IO, replay
# ---------------------------------------------------------------------------

def _atomic_write(path: str, text: str) -> None:
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _write_csv(path: str, rows) -> None:
    import io
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerows(rows)
    _atomic_write(path, buf.getvalue())


def run(cfg: dict, out_dir: str, threads: int | None = None,
        trace: bool = False) -> str:
    """Execute the configured experiment; returns the result record path."""
    exp = cfg["experiment"]
    threads = threads if threads is not None else cfg.get("threads", 1)
    t0 = time.perf_counter()
    metrics, tables, per_replica = _DRIVERS[exp](cfg, threads)
    wall = time.perf_counter() - t0
    record = {
        "experiment": exp,
        "config": cfg,
        "config_hash": config_hash(cfg),
        "seed": cfg["seed"],
        "metrics": metrics,
        "artifact_version": ARTIFACT_VERSION,
        "wall_clock_s": wall,
        "tables": sorted(tables),
    }
    os.makedirs(out_dir, exist_ok=True)
    for name, rows in tables.items():
        _write_csv(os.path.join(out_dir, name), rows)
    if trace and per_replica is not None:
        lines = "\n".join(json.dumps(x) for x in per_replica)
        _atomic_write(os.path.join(out_dir, f"{exp}_trace.ndjson"), lines + "\n")
    path = os.path.join(out_dir, f"{exp}_result.json")
    _atomic_write(path, json.dumps(record, indent=1, sort_keys=True))
    return path


def replay(result_path: str, threads: int | None = None) -> dict:
    """Re-run the embedded config and compare metrics exactly."""
    try:
        with open(result_path) as fh:
            record = json.load(fh)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read result {result_path}: {e}") from e
    if "config" not in record or "metrics" not in record:
        raise ConfigError("result file lacks embedded config/metrics")
    cfg = resolve_config(record["config"])
    threads = threads if threads is not None else 1
    metrics, _, _ = _DRIVERS[cfg["experiment"]](cfg, threads)
    want = record["metrics"]
    got = json.loads(json.dumps(metrics))  # normalize types like the record
    match = got == want
    divergences = []
    if not match:
        divergences = _diff_paths(want, got, "")
    return {"match": match, "divergences": divergences[:50]}


def _diff_paths(a, b, prefix):
    out = []
    if isinstance(a, dict) and isinstance(b, dict):
        for k in sorted(set(a) | set(b)):
            out.extend(_diff_paths(a.get(k), b.get(k), f"{prefix}.{k}"))
    elif isinstance(a, list) and isinstance(b, list) and len(a) == len(b):
        for i, (x, y) in enumerate(zip(a, b)):
            out.extend(_diff_paths(x, y, f"{prefix}[{i}]"))
    elif a != b:
        out.append({"path": prefix, "expected": a, "got": b})
    return out
