"""Self-check battery behind ``sdfinspect verify``.

Every check compares a fast code path against a slow, independently written
reference: brute-force point-triangle distances and ray casts over all faces, central finite
differences, and an explicit set union of stored surface points.
"""

from __future__ import annotations

import math
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from . import scenes
from .errors import SdfInspectError
from .field import FieldConfig, global_surface_points, train_env_field
from .nn import FeatureExtractor, HashGridConfig, MlpHead, load_checkpoint, save_checkpoint
from .oracle import DistanceOracle, sample_tsdf_training_set
from .primitives import (
    LocalConfig,
    RobotConfig,
    SensorModel,
    local_surface_points,
    observation_bounding_box,
    represent_observation,
    simulate_observation,
    total_coverage,
)


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


# -- scalar references --------------------------------------------------------

def _segment_distance(p, a, b):
    ab = b - a
    t = np.clip(np.einsum("ij,ij->i", p - a, ab) / np.einsum("ij,ij->i", ab, ab), 0.0, 1.0)
    return np.linalg.norm(p - (a + t[:, None] * ab), axis=1)


def brute_distance(tris, p) -> float:
    """Distance from one point to every triangle: plane projection if it lands
    inside (same-side test), else the nearest edge; minimum over all."""
    a, b, c = tris[:, 0], tris[:, 1], tris[:, 2]
    n = np.cross(b - a, c - a)
    n = n / np.linalg.norm(n, axis=1, keepdims=True)
    h = np.einsum("ij,ij->i", p - a, n)
    x = p - h[:, None] * n
    inside = np.ones(len(tris), dtype=bool)
    for v0, v1 in ((a, b), (b, c), (c, a)):
        inside &= np.einsum("ij,ij->i", np.cross(v1 - v0, x - v0), n) >= 0
    pp = np.broadcast_to(p, a.shape)
    edge = np.minimum(np.minimum(_segment_distance(pp, a, b), _segment_distance(pp, b, c)),
                      _segment_distance(pp, c, a))
    return float(np.where(inside, np.abs(h), edge).min())


def brute_ray(tris, o, d, max_range) -> float:
    """Nearest plane intersection that passes the edge same-side test; inf on miss."""
    a, b, c = tris[:, 0], tris[:, 1], tris[:, 2]
    n = np.cross(b - a, c - a)
    den = n @ d
    ok = np.abs(den) > 1e-15
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.einsum("ij,ij->i", n, a - o) / den
    x = o + t[:, None] * d
    s = [np.einsum("ij,ij->i", np.cross(v1 - v0, x - v0), n) for v0, v1 in ((a, b), (b, c), (c, a))]
    inside = ((s[0] >= 0) & (s[1] >= 0) & (s[2] >= 0)) | ((s[0] <= 0) & (s[1] <= 0) & (s[2] <= 0))
    hit = ok & inside & (t > 0) & (t <= max_range)
    return float(t[hit].min()) if hit.any() else math.inf


# -- checks -------------------------------------------------------------------------

def check_distance(name: str, n_queries: int = 100, tol: float = 1e-6, seed: int = 0) -> CheckResult:
    mesh = scenes.bundled_scene(name)
    oracle = DistanceOracle(mesh)
    rng = np.random.default_rng(seed)
    lo, hi = mesh.bounds
    pts = lo + rng.random((n_queries, 3)) * (hi - lo)
    fast = oracle.unsigned_distance(pts)
    tris = mesh.triangles
    ref = np.array([brute_distance(tris, p) for p in pts])
    err = float(np.abs(fast - ref).max())
    return CheckResult(f"distance[{name}]", err <= tol, f"max |err| {err:.2e} m over {n_queries}")


def check_raycast(name: str, n_rays: int = 100, tol: float = 1e-6, seed: int = 0) -> CheckResult:
    mesh = scenes.bundled_scene(name)
    oracle = DistanceOracle(mesh)
    rng = np.random.default_rng(seed)
    lo, hi = mesh.bounds
    o = lo + rng.random((n_rays, 3)) * (hi - lo)
    d = rng.normal(size=(n_rays, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    rng_max = float(np.linalg.norm(hi - lo))
    fast = oracle.ray_cast(o, d, rng_max)
    tris = mesh.triangles
    ref = np.array([brute_ray(tris, o[i], d[i], rng_max) for i in range(n_rays)])
    same_miss = np.isinf(fast) == np.isinf(ref)
    fin = np.isfinite(ref) & np.isfinite(fast)
    err = float(np.abs(fast[fin] - ref[fin]).max()) if fin.any() else 0.0
    ok = bool(same_miss.all()) and err <= tol
    return CheckResult(f"raycast[{name}]", ok,
                       f"max |err| {err:.2e} m, miss agreement {int(same_miss.sum())}/{n_rays}")


def _rel_err(a, b):
    return np.abs(a - b) / np.maximum(1e-6, np.maximum(np.abs(a), np.abs(b)))


def check_gradients(n_configs: int = 20, tol: float = 1e-4, seed: int = 0) -> CheckResult:
    """Central differences for hash-grid table entries and head parameters."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for k in range(n_configs):
        fe = FeatureExtractor.create([0, 0, 0], [1, 1, 1], HashGridConfig(levels=3, log2_table=8,
                                     base_resolution=2, growth=2.0), oneblob_bins=3, seed=k)
        fe.grid.table = rng.normal(scale=0.5, size=fe.grid.table.shape)
        head = MlpHead([fe.output_width, 5, 4, 1], seed=k)
        x = rng.random((4, 3))

        def loss():
            return float(np.sum(head.forward(fe.encode(x)) ** 2))

        feats = fe.encode(x)
        out, cache = head.forward(feats, return_cache=True)
        grads, gfeat = head.backward(cache, 2 * out)
        gtable = fe.backward(x, gfeat)
        h = 1e-6
        # a handful of touched table entries
        corners = fe.grid.corners(x)[0]
        for _ in range(3):
            b, l, c = rng.integers(4), rng.integers(3), rng.integers(8)
            row, f = corners[b, l, c], rng.integers(fe.grid.config.features)
            old = fe.grid.table[l, row, f]
            fe.grid.table[l, row, f] = old + h
            up = loss()
            fe.grid.table[l, row, f] = old - h
            dn = loss()
            fe.grid.table[l, row, f] = old
            worst = max(worst, float(_rel_err((up - dn) / (2 * h), gtable[l, row, f])))
        for i, p in enumerate(head.params):
            flat = p.reshape(-1)
            j = rng.integers(flat.size)
            old = flat[j]
            flat[j] = old + h
            up = loss()
            flat[j] = old - h
            dn = loss()
            flat[j] = old
            worst = max(worst, float(_rel_err((up - dn) / (2 * h), grads[i].reshape(-1)[j])))
    return CheckResult("gradients", worst <= tol, f"worst relative error {worst:.2e} over {n_configs} configs")


def sphere_field(seed: int = 0):
    mesh = scenes.unit_sphere()
    oracle = DistanceOracle(mesh)
    samples = sample_tsdf_training_set(mesh, oracle, 16000, 4000, 0.2, 0.1, seed)
    cfg = FieldConfig(cell_size=0.05, epochs=30)
    return train_env_field(samples, cfg, seed=seed)


def explicit_union_coverage(point_sets, s_e_count: int, eps: float):
    """Coverage after each node when every node's surface points are stored explicitly.

    A point counts as already stored if an earlier node emitted a point on the
    same lattice edge or within ``eps`` of it.
    """
    stored, edges, out, total = [], set(), [], 0
    for ps in point_sets:
        new = np.ones(ps.count, dtype=bool)
        if stored and ps.count:
            d = cKDTree(np.concatenate(stored)).query(ps.points)[0]
            same_edge = np.array([tuple(e) in edges for e in ps.edges.tolist()], dtype=bool)
            new = ~((d < eps) | same_edge)
        total += int(new.sum())
        out.append(min(1.0, total / s_e_count))
        stored.append(ps.points)
        edges |= {tuple(e) for e in ps.edges.tolist()}
    return out


def scripted_chain(field, n: int = 5, radius: float = 1.6, step_deg: float = 25.0, seed: int = 0):
    """Overlapping views circling the unit sphere, all looking at its centre."""
    sensor = SensorModel(range=1.5, width=24, height=24)
    cfg = LocalConfig()
    nodes = []
    for i in range(n):
        a = math.radians(step_deg * i)
        q = RobotConfig((radius * math.cos(a), radius * math.sin(a), 0.0), a + math.pi, 0.0)
        obs = simulate_observation(field, q, sensor)
        box = observation_bounding_box(obs, field)
        local = represent_observation(obs, field, cfg, seed=seed + i, box=box)
        nodes.append((box, local, local_surface_points(local)))
    return nodes


def implicit_chain_coverage(nodes, s_e_count: int, eps: float, prune: bool = True):
    covs, prior = [], 0.0
    for k, (box, local, pts) in enumerate(nodes):
        ancestors = [(b, l) for b, l, _ in nodes[:k]]
        prior, _ = total_coverage(pts, box, ancestors, prior, s_e_count, eps, prune=prune)
        covs.append(prior)
    return covs


def check_coverage_union(field=None, tol: float = 0.02) -> CheckResult:
    field = field or sphere_field()
    s_e = global_surface_points(field)
    nodes = scripted_chain(field)
    eps = field.grid.cell_size / 2
    implicit = implicit_chain_coverage(nodes, s_e.count, eps)
    unpruned = implicit_chain_coverage(nodes, s_e.count, eps, prune=False)
    explicit = explicit_union_coverage([p for _, _, p in nodes], s_e.count, eps)
    diff = max(abs(a - b) for a, b in zip(implicit, explicit))
    ok = diff <= tol and implicit == unpruned
    return CheckResult("coverage-union", ok, f"max |implicit - explicit| {100 * diff:.2f} pp; "
                       f"pruned == unpruned: {implicit == unpruned}")


def check_checkpoint(path=None) -> CheckResult:
    if path is not None:
        try:
            _, hdr = load_checkpoint(path)
        except (SdfInspectError, OSError) as exc:
            return CheckResult("checkpoint", False, str(exc))
        return CheckResult("checkpoint", True, f"{Path(path).name}: sha256 {hdr['sha256'][:16]}... ok")
    rng = np.random.default_rng(0)
    arrays = {"a": rng.normal(size=(7, 3)).astype(np.float32).astype(np.float64), "b": rng.normal(size=5)
              .astype(np.float32).astype(np.float64)}
    with tempfile.TemporaryDirectory() as tmp:
        p = Path(tmp) / "x.ckpt"
        save_checkpoint(p, arrays, {"kind": "test"})
        back, _ = load_checkpoint(p)
    ok = all(np.array_equal(arrays[k], back[k]) for k in arrays)
    return CheckResult("checkpoint", ok, "round trip bit-exact" if ok else "round trip mismatch")


def run_battery(field_checkpoint=None, quick: bool = False):
    """Run all checks; returns list of (CheckResult, seconds)."""
    n = 30 if quick else 100
    jobs = [lambda: check_distance("sphere", n), lambda: check_distance("room", n),
            lambda: check_raycast("sphere", n), lambda: check_raycast("room", n),
            lambda: check_gradients(10 if quick else 50),
            lambda: check_coverage_union(),
            lambda: check_checkpoint(field_checkpoint)]
    out = []
    for job in jobs:
        t = time.perf_counter()
        try:
            res = job()
        except Exception as exc:  # a crashing check is a failing check
            res = CheckResult(getattr(job, "__name__", "check"), False, f"error: {exc}")
        out.append((res, time.perf_counter() - t))
    return out
