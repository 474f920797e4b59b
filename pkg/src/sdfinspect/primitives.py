"""Inspection-planning primitives evaluated directly on implicit TSDFs.

collision checks, depth-image simulation by ray marching, per-observation
local SDF heads on top of the frozen shared feature extractor, and the
incremental coverage count along a root-to-node chain.

Every function that takes a ``field`` only needs ``field.evaluate(points)``,
``field.tr`` and ``field.grid``, so exact analytic fields work as well as
learned ones.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyObservationError, InvalidInputError, TrainingError
from .marching import GridSpec, SurfacePointSet, edge_vertices, lattice_values
from .nn import AdamWState, MlpHead, adamw_step, load_checkpoint, quantize, save_checkpoint

MISS = np.inf
# lo/hi lattice indices, 6 x int32
BOX_BYTES = 24


def wrap_angle(a: float) -> float:
    """Map to [-pi, pi)."""
    return (a + math.pi) % (2 * math.pi) - math.pi


@dataclass(frozen=True)
class RobotConfig:
    position: tuple
    yaw: float = 0.0
    pitch: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "position", tuple(float(v) for v in self.position))
        object.__setattr__(self, "yaw", wrap_angle(float(self.yaw)))
        if not -math.pi / 2 <= self.pitch <= math.pi / 2:
            raise InvalidInputError(f"pitch {self.pitch} outside [-pi/2, pi/2]")

    @property
    def pos(self) -> np.ndarray:
        return np.array(self.position)

    def as_array(self) -> np.ndarray:
        return np.array([*self.position, self.yaw, self.pitch])


def rotation(yaw: float, pitch: float) -> np.ndarray:
    """Body-to-world rotation; body x is forward, positive pitch lifts the nose."""
    cy, sy = math.cos(yaw), math.sin(yaw)
    cp, sp = math.cos(pitch), math.sin(pitch)
    rz = np.array([[cy, -sy, 0.0], [sy, cy, 0.0], [0.0, 0.0, 1.0]])
    ry = np.array([[cp, 0.0, -sp], [0.0, 1.0, 0.0], [sp, 0.0, cp]])
    return rz @ ry


def _fibonacci_sphere(n: int) -> np.ndarray:
    i = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * i / n)
    theta = math.pi * (1 + 5 ** 0.5) * i
    return np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], axis=1)


@dataclass
class RobotGeometry:
    control_points: np.ndarray
    spacing: float
    size: float

    @classmethod
    def drone(cls, side: float = 0.1, n_points: int = 128) -> "RobotGeometry":
        """Control points on the bounding sphere of a cube drone, plus its centre.

        ``spacing`` is twice the measured covering radius of the points on that
        sphere, so every body-surface point is within spacing/2 of one of them.
        """
        r = side * math.sqrt(3) / 2
        pts = _fibonacci_sphere(n_points) * r
        probe = _fibonacci_sphere(20000) * r
        gaps = cKDTree(pts).query(probe)[0]
        spacing = 2.0 * float(gaps.max()) * 1.01
        return cls(np.vstack([np.zeros(3), pts]), spacing, side)

    @property
    def radius(self) -> float:
        return float(np.linalg.norm(self.control_points, axis=1).max())

    def world_points(self, q: RobotConfig) -> np.ndarray:
        return self.control_points @ rotation(q.yaw, q.pitch).T + q.pos


@dataclass(frozen=True)
class SensorModel:
    hfov: float = math.pi / 2
    vfov: float = math.pi / 2
    range: float = 1.0
    width: int = 32
    height: int = 32

    def __post_init__(self):
        if not (0 < self.hfov < math.pi and 0 < self.vfov < math.pi):
            raise InvalidInputError("fields of view must lie in (0, pi)")
        if self.range <= 0 or self.width < 2 or self.height < 2:
            raise InvalidInputError("sensor needs positive range and at least 2x2 pixels")

    def body_directions(self) -> np.ndarray:
        """Unit ray directions in the body frame, (height, width, 3); row 0 is the top."""
        u = math.tan(self.hfov / 2) * (2 * (np.arange(self.width) + 0.5) / self.width - 1)
        v = math.tan(self.vfov / 2) * (2 * (np.arange(self.height) + 0.5) / self.height - 1)
        uu, vv = np.meshgrid(u, v)
        d = np.stack([np.ones_like(uu), -uu, -vv], axis=-1)
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    def directions(self, q: RobotConfig) -> np.ndarray:
        return self.body_directions() @ rotation(q.yaw, q.pitch).T


@dataclass
class DepthImage:
    origin: np.ndarray
    directions: np.ndarray  # (H, W, 3)
    depths: np.ndarray      # (H, W); MISS (inf) where no surface within range
    max_depth: float

    @property
    def hit_mask(self) -> np.ndarray:
        return np.isfinite(self.depths)

    @property
    def n_hits(self) -> int:
        return int(self.hit_mask.sum())

    def hit_points(self) -> np.ndarray:
        m = self.hit_mask
        return self.origin + self.directions[m] * self.depths[m][:, None]

    def to_pgm(self, path) -> None:
        """16-bit PGM, depth in millimetres, 0 for MISS."""
        mm = np.where(self.hit_mask, np.round(np.where(self.hit_mask, self.depths, 0) * 1000.0), 0)
        mm = np.clip(mm, 0, 65535).astype(">u2")
        h, w = mm.shape
        with open(path, "wb") as fh:
            fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
            fh.write(mm.tobytes())


@dataclass(frozen=True)
class SnappedBoundingBox:
    lo: tuple  # integer lattice indices
    hi: tuple
    grid: GridSpec

    @property
    def min_corner(self) -> np.ndarray:
        return np.asarray(self.grid.origin) + np.asarray(self.lo) * self.grid.cell_size

    @property
    def max_corner(self) -> np.ndarray:
        return np.asarray(self.grid.origin) + np.asarray(self.hi) * self.grid.cell_size

    def intersects(self, other: "SnappedBoundingBox") -> bool:
        return all(a_lo <= b_hi and b_lo <= a_hi
                   for a_lo, a_hi, b_lo, b_hi in zip(self.lo, self.hi, other.lo, other.hi))

    def contains(self, points, tol: float = 1e-9) -> np.ndarray:
        p = np.atleast_2d(points)
        return np.all((p >= self.min_corner - tol) & (p <= self.max_corner + tol), axis=1)


# -- collision ---------------------------------------------------------------

def collision_free_config(field, q: RobotConfig, geom: RobotGeometry, xi: float) -> bool:
    if not 0 < xi < field.tr:
        raise InvalidInputError(f"xi must lie in (0, tr={field.tr})")
    return bool(np.all(field.evaluate(geom.world_points(q)) > xi))


def segment_configs(q_from: RobotConfig, q_to: RobotConfig, step: float) -> list:
    """Configurations at most ``step`` apart in position, endpoints included."""
    if q_from == q_to:
        return [q_from]
    a, b = q_from.pos, q_to.pos
    n = max(1, int(math.ceil(np.linalg.norm(b - a) / step)))
    dyaw = wrap_angle(q_to.yaw - q_from.yaw)
    out = []
    for i in range(n + 1):
        s = i / n
        out.append(RobotConfig(tuple(a + s * (b - a)), q_from.yaw + s * dyaw,
                               q_from.pitch + s * (q_to.pitch - q_from.pitch)))
    return out


def collision_free_segment(field, q_from: RobotConfig, q_to: RobotConfig, geom: RobotGeometry,
                           xi: float, step: float) -> bool:
    if not 0 < step <= xi:
        raise InvalidInputError("step must lie in (0, xi]")
    if not 0 < xi < field.tr:
        raise InvalidInputError(f"xi must lie in (0, tr={field.tr})")
    pts = np.concatenate([geom.world_points(q) for q in segment_configs(q_from, q_to, step)])
    return bool(np.all(field.evaluate(pts) > xi))


# -- observation simulation ------------------------------------------------------

def march_rays(field, origin, dirs, max_range: float, step: float | None = None, bisect_iters: int = 20):
    """First outside-to-inside crossing along each ray; MISS where none within range.

    Fixed steps of ``step`` (default tr/2) bracket the crossing, then bisection
    refines it.
    """
    origin = np.asarray(origin, dtype=np.float64)
    dirs = np.atleast_2d(dirs)
    step = field.tr / 2 if step is None else step
    n = int(math.ceil(max_range / step - 1e-12))
    ts = np.minimum(np.arange(n + 1) * step, max_range)
    pts = origin + dirs[:, None, :] * ts[None, :, None]
    vals = field.evaluate(pts.reshape(-1, 3)).reshape(len(dirs), n + 1)
    inside = vals < 0
    enter = ~inside[:, :-1] & inside[:, 1:]
    hit = enter.any(axis=1)
    depths = np.full(len(dirs), MISS)
    if not hit.any():
        return depths
    k = np.argmax(enter[hit], axis=1)
    a, b = ts[k], ts[k + 1]
    d = dirs[hit]
    for _ in range(bisect_iters):
        mid = 0.5 * (a + b)
        neg = field.evaluate(origin + d * mid[:, None]) < 0
        b = np.where(neg, mid, b)
        a = np.where(neg, a, mid)
    depths[hit] = 0.5 * (a + b)
    return depths


def simulate_observation(field, q: RobotConfig, sensor: SensorModel, step: float | None = None,
                         bisect_iters: int = 20) -> DepthImage:
    dirs = sensor.directions(q)
    depths = march_rays(field, q.pos, dirs.reshape(-1, 3), sensor.range, step, bisect_iters)
    return DepthImage(q.pos, dirs, depths.reshape(sensor.height, sensor.width), float(sensor.range))


def _snap(r: np.ndarray, up: bool) -> np.ndarray:
    near = np.round(r)
    on_lattice = np.abs(r - near) < 1e-9
    return np.where(on_lattice, near, np.ceil(r) if up else np.floor(r)).astype(int)


def snap_box(points_min, points_max, grid: GridSpec) -> SnappedBoundingBox:
    o, h = np.asarray(grid.origin), grid.cell_size
    lo = np.clip(_snap((np.asarray(points_min) - o) / h, up=False), 0, grid.dims)
    hi = np.clip(_snap((np.asarray(points_max) - o) / h, up=True), 0, grid.dims)
    return SnappedBoundingBox(tuple(int(v) for v in lo), tuple(int(v) for v in hi), grid)


def observation_bounding_box(obs: DepthImage, field, pad: float = 0.0) -> SnappedBoundingBox:
    if obs.n_hits == 0:
        raise EmptyObservationError("observation has no hit pixels")
    pts = obs.hit_points()
    return snap_box(pts.min(axis=0) - pad, pts.max(axis=0) + pad, field.grid)


# -- local observation representation -----------------------------------------------

@dataclass
class LocalConfig:
    param_target: int = 505
    hidden_layers: int = 2
    max_iter: int = 100
    lr: float = 1e-2
    weight_decay: float = 0.01
    lambda_vis: float = 1.0
    lambda_occ: float = 0.5
    n_vis: int = 4
    n_occ: int = 4
    ray_budget: int = 2048
    box_pad: float = 0.0


class LocalSdf:
    """Tiny head over the shared, frozen feature extractor of the global field."""

    def __init__(self, head: MlpHead, field, box: SnappedBoundingBox, tr: float):
        self.head = head
        self.field = field
        self.box = box
        self.tr = float(tr)

    @property
    def fe(self):
        return self.field.fe

    @property
    def grid(self) -> GridSpec:
        return self.field.grid

    @property
    def nbytes(self) -> int:
        return 4 * self.head.n_params + BOX_BYTES

    def evaluate_features(self, feats) -> np.ndarray:
        return np.clip(self.head.forward(feats), -self.tr, self.tr)

    def evaluate(self, points) -> np.ndarray:
        return self.evaluate_features(self.field.features(points))

    __call__ = evaluate

    def save(self, path) -> None:
        arrays = {f"head{i}": p for i, p in enumerate(self.head.params)}
        save_checkpoint(path, arrays, {"kind": "local_sdf", "tr": self.tr, "head_widths": self.head.widths,
                                       "box_lo": list(self.box.lo), "box_hi": list(self.box.hi),
                                       "box_min": self.box.min_corner.tolist(),
                                       "box_max": self.box.max_corner.tolist(),
                                       "grid": self.grid.to_dict()})

    @classmethod
    def load(cls, path, field) -> "LocalSdf":
        arrays, hdr = load_checkpoint(path)
        if hdr.get("kind") != "local_sdf":
            raise InvalidInputError(f"{path}: not a local SDF checkpoint")
        widths = hdr["head_widths"]
        head = MlpHead(widths, params=[arrays[f"head{i}"] for i in range(2 * (len(widths) - 1))])
        box = SnappedBoundingBox(tuple(hdr["box_lo"]), tuple(hdr["box_hi"]), field.grid)
        return cls(head, field, box, hdr["tr"])


@dataclass
class LocalTrainingSet:
    X_vis: np.ndarray
    Y_vis: np.ndarray
    X_occ: np.ndarray
    Y_occ: np.ndarray


def local_training_samples(obs: DepthImage, tr: float, config: LocalConfig,
                           rng: np.random.Generator) -> LocalTrainingSet:
    """Stratified samples in front of (visible) and behind (occluded) each hit.

    visible depth in [T - tr, T] with target T - t_vis; occluded depth in
    [T, max_depth] with target -min(t_occ - T, tr).
    """
    mask = obs.hit_mask
    T = obs.depths[mask]
    D = obs.directions[mask]
    if len(T) == 0:
        raise EmptyObservationError("observation has no hit pixels")
    if len(T) > config.ray_budget:
        keep = np.sort(rng.choice(len(T), size=config.ray_budget, replace=False))
        T, D = T[keep], D[keep]
    n = len(T)
    sv = (np.arange(config.n_vis)[None, :] + rng.random((n, config.n_vis))) / config.n_vis
    t_vis = np.maximum(T[:, None] - tr * sv, 0.0)
    so = (np.arange(config.n_occ)[None, :] + rng.random((n, config.n_occ))) / config.n_occ
    t_occ = T[:, None] + so * np.maximum(obs.max_depth - T, 0.0)[:, None]
    y_vis = T[:, None] - t_vis
    y_occ = -np.minimum(t_occ - T[:, None], tr)
    x_vis = obs.origin + D[:, None, :] * t_vis[..., None]
    x_occ = obs.origin + D[:, None, :] * t_occ[..., None]
    return LocalTrainingSet(x_vis.reshape(-1, 3), y_vis.ravel(), x_occ.reshape(-1, 3), y_occ.ravel())


def represent_observation(obs: DepthImage, field, config: LocalConfig | None = None,
                          seed: int = 0, box: SnappedBoundingBox | None = None) -> LocalSdf:
    """Fit a fresh tiny head to one depth image with the feature extractor frozen."""
    config = config or LocalConfig()
    if obs.n_hits == 0:
        raise EmptyObservationError("observation has no hit pixels")
    rng = np.random.default_rng(seed)
    box = box or observation_bounding_box(obs, field, config.box_pad)
    tr = field.tr
    data = local_training_samples(obs, tr, config, rng)
    # frozen extractor: features are computed once
    f_vis = field.features(data.X_vis)
    f_occ = field.features(data.X_occ)
    head = MlpHead.for_target(field.fe.output_width, config.param_target, seed=int(rng.integers(2**31)),
                              hidden_layers=config.hidden_layers)
    feats = np.concatenate([f_vis, f_occ])
    y = np.concatenate([data.Y_vis, data.Y_occ])
    nv, no = len(f_vis), len(f_occ)
    # d(loss)/d(pred) weights for lambda_vis * MSE(vis) + lambda_occ * MSE(occ)
    wts = np.concatenate([np.full(nv, 2.0 * config.lambda_vis / nv), np.full(no, 2.0 * config.lambda_occ / no)])
    opt = AdamWState(lr=config.lr, weight_decay=config.weight_decay).init(head.params)
    for it in range(config.max_iter):
        pred, cache = head.forward(feats, return_cache=True)
        resid = pred - y
        if not np.all(np.isfinite(resid)):
            raise TrainingError(f"local head diverged at iteration {it}")
        grads, _ = head.backward(cache, wts * resid)
        adamw_step(opt, head.params, grads)
    head.params = [quantize(p) for p in head.params]
    return LocalSdf(head, field, box, tr)


def local_loss(local: LocalSdf, data: LocalTrainingSet, config: LocalConfig) -> float:
    ev = local.head.forward
    lv = np.mean((ev(local.field.features(data.X_vis)) - data.Y_vis) ** 2)
    lo = np.mean((ev(local.field.features(data.X_occ)) - data.Y_occ) ** 2)
    return float(config.lambda_vis * lv + config.lambda_occ * lo)


def local_surface_points(local, kappa: float | None = 1.0, global_field=None) -> SurfacePointSet:
    """Marching-cube vertices of a local SDF inside its snapped box.

    Uses the global lattice, so a vertex produced here is bitwise the one the
    global extraction would produce from the same values. With ``kappa`` set,
    vertices where the global field says |f| > kappa * h are dropped: they
    cannot be global surface points.
    """
    box = local.box
    grid = box.grid
    if any(h <= l for l, h in zip(box.lo, box.hi)):
        return SurfacePointSet(np.zeros((0, 3)), np.zeros((0, 4), dtype=int))
    if hasattr(local, "field") and hasattr(local.field, "lattice_features"):
        shape = tuple(h - l + 1 for l, h in zip(box.lo, box.hi))
        values = local.evaluate_features(local.field.lattice_features(box.lo, box.hi)).reshape(shape)
    else:
        values = lattice_values(local.evaluate, grid, box.lo, box.hi)
    pts = edge_vertices(values, grid, box.lo)
    gf = global_field if global_field is not None else getattr(local, "field", None)
    if kappa is not None and gf is not None and pts.count:
        keep = np.abs(gf.evaluate(pts.points)) <= kappa * grid.cell_size
        pts = SurfacePointSet(pts.points[keep], pts.edges[keep])
    return pts


# -- coverage -------------------------------------------------------------------

def seen_by_chain(points, ancestors, eps: float, new_box: SnappedBoundingBox | None = None,
                  prune: bool = True) -> np.ndarray:
    """Mask of points some ancestor (box, local) already observed: p in box and |f(p)| < eps."""
    points = np.atleast_2d(points)
    seen = np.zeros(len(points), dtype=bool)
    feats, feats_fe = None, None
    for box, local in ancestors:
        if prune and new_box is not None and not box.intersects(new_box):
            continue
        cand = ~seen & box.contains(points)
        if not cand.any():
            continue
        fe = getattr(local, "fe", None) if hasattr(local, "evaluate_features") else None
        if fe is not None:
            if feats is None or feats_fe is not fe:
                feats, feats_fe = local.field.features(points), fe
            vals = local.evaluate_features(feats[cand])
        else:
            vals = local.evaluate(points[cand])
        idx = np.flatnonzero(cand)
        seen[idx[np.abs(vals) < eps]] = True
    return seen


def total_coverage(new_points: SurfacePointSet, new_box: SnappedBoundingBox, ancestors, prior_cov: float,
                   s_e_count: int, eps: float, prune: bool = True):
    """Coverage after appending a node: prior + (# new points unseen by ancestors) / |S_E|."""
    if eps <= 0 or s_e_count <= 0:
        raise InvalidInputError("eps and |S_E| must be positive")
    pts = new_points.points if isinstance(new_points, SurfacePointSet) else np.atleast_2d(new_points)
    if len(pts) == 0:
        return float(prior_cov), 0
    seen = seen_by_chain(pts, ancestors, eps, new_box, prune)
    surviving = int((~seen).sum())
    return float(min(1.0, prior_cov + surviving / s_e_count)), surviving
