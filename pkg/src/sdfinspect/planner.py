"""Coverage-biased tree planner over implicit primitives.

Each node stores its configuration, the snapped box of its observation, the
tiny local SDF head fitted to that observation, and the cumulative coverage of
the path from the root. Expansion picks a parent with probability
proportional to ``1/N_d + alpha * cov``, and every ``prune_interval``
iterations the tree collapses to its best root-to-leaf branch.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field as dc_field

import numpy as np

from .errors import EmptyObservationError, InvalidInputError, SetupError, TrainingError
from .field import global_surface_points
from .marching import SurfacePointSet
from .primitives import (
    LocalConfig,
    RobotConfig,
    RobotGeometry,
    SensorModel,
    collision_free_config,
    collision_free_segment,
    local_surface_points,
    observation_bounding_box,
    represent_observation,
    seen_by_chain,
    simulate_observation,
    total_coverage,
    wrap_angle,
)

log = logging.getLogger(__name__)

# config (5 x float32) + cov + cost (float32) + parent id (int32) + child count (int32)
NODE_HEADER_BYTES = 36

ADDED = "added"
REJECTED = "rejected"


@dataclass
class PlannerSettings:
    alpha: float = 10.0
    crowd_radius: float | None = None  # d; None -> edge_length
    angular_weight: float = 0.1        # metres per radian in the configuration distance
    prune_interval: int = 200
    edge_length: float = 0.5
    min_edge_length: float = 0.0
    yaw_step: float = math.pi / 2
    pitch_step: float = math.pi / 8
    pitch_limit: float = math.pi / 4
    xi: float | None = None            # None -> 1.5 x control-point spacing
    collision_step: float | None = None  # None -> xi
    eps: float | None = None           # None -> h / 2
    kappa: float | None = 1.0          # None disables the |f_E| <= kappa*h filter
    time_budget: float = 300.0
    node_budget: int = 2000
    iteration_budget: int | None = None
    memory_budget: int = 1 << 30
    root: tuple = (0.0, 0.0, 0.0)
    root_yaw: float = 0.0
    root_pitch: float = 0.0
    world_min: tuple | None = None     # None -> field lattice box
    world_max: tuple | None = None
    seed: int = 0
    local: LocalConfig = dc_field(default_factory=LocalConfig)

    def __post_init__(self):
        if self.alpha <= 0:
            raise InvalidInputError("alpha must be positive")
        if self.crowd_radius is not None and self.crowd_radius <= 0:
            raise InvalidInputError("crowd radius d must be positive")
        if self.prune_interval < 1:
            raise InvalidInputError("prune interval must be >= 1")
        if not 0 <= self.min_edge_length <= self.edge_length:
            raise InvalidInputError("edge length bounds must satisfy 0 <= min <= max")
        if self.node_budget < 1 or self.time_budget <= 0 or self.memory_budget <= 0:
            raise InvalidInputError("budgets must be positive")

    @property
    def d(self) -> float:
        return self.edge_length if self.crowd_radius is None else self.crowd_radius

    def resolved_xi(self, geom: RobotGeometry) -> float:
        return 1.5 * geom.spacing if self.xi is None else self.xi

    def resolved_step(self, geom: RobotGeometry) -> float:
        return self.resolved_xi(geom) if self.collision_step is None else self.collision_step

    def resolved_eps(self, field) -> float:
        return field.grid.cell_size / 2 if self.eps is None else self.eps


@dataclass
class PlanNode:
    id: int
    q: RobotConfig
    box: object          # SnappedBoundingBox, or None when the observation was empty (root only)
    local: object        # LocalSdf or None
    cov: float
    parent: int | None
    cost: float
    children: list = dc_field(default_factory=list)

    @property
    def nbytes(self) -> int:
        return NODE_HEADER_BYTES + (self.local.nbytes if self.local is not None else 0)


def config_distance(a, b, angular_weight: float):
    """Positional distance plus weighted shortest-arc yaw and pitch differences.

    ``a`` is (5,) and ``b`` is (n, 5) rows of (x, y, z, yaw, pitch).
    """
    b = np.atleast_2d(b)
    dp = np.linalg.norm(b[:, :3] - a[:3], axis=1)
    dyaw = np.abs((b[:, 3] - a[3] + math.pi) % (2 * math.pi) - math.pi)
    dpitch = np.abs(b[:, 4] - a[4])
    return dp + angular_weight * (dyaw + dpitch)


class PlanTree:
    """Node arena with crowding counts kept up to date on insertion and pruning."""

    def __init__(self, root: PlanNode, settings: PlannerSettings, s_e_count: int, rng=None):
        self.settings = settings
        self.s_e_count = int(s_e_count)
        self.rng = rng if rng is not None else np.random.default_rng(settings.seed)
        self.iteration = 0
        self.nodes = {}
        self.root_id = root.id
        self.next_id = root.id + 1
        self._ids = []
        self._cfg = np.zeros((0, 5))
        self._crowd = np.zeros(0, dtype=np.int64)
        self._insert(root)

    def __len__(self):
        return len(self.nodes)

    def _insert(self, node: PlanNode) -> None:
        v = node.q.as_array()
        near = config_distance(v, self._cfg, self.settings.angular_weight) < self.settings.d
        self._crowd = np.append(self._crowd + near, 1 + int(near.sum()))
        self._cfg = np.vstack([self._cfg, v])
        self._ids.append(node.id)
        self.nodes[node.id] = node

    def _recount(self) -> None:
        self._ids = sorted(self.nodes)
        self._cfg = np.array([self.nodes[i].q.as_array() for i in self._ids]).reshape(-1, 5)
        self._crowd = np.array([int((config_distance(v, self._cfg, self.settings.angular_weight)
                                     < self.settings.d).sum()) for v in self._cfg], dtype=np.int64)

    def add(self, parent_id: int, q: RobotConfig, box, local, cov: float) -> PlanNode:
        parent = self.nodes[parent_id]
        cost = parent.cost + float(np.linalg.norm(q.pos - parent.q.pos))
        node = PlanNode(self.next_id, q, box, local, cov, parent_id, cost)
        self.next_id += 1
        parent.children.append(node.id)
        self._insert(node)
        return node

    @property
    def ids(self) -> list:
        return list(self._ids)

    def crowding(self) -> dict:
        """N_d(n) per node id (n itself included)."""
        return dict(zip(self._ids, self._crowd.tolist()))

    def weights(self) -> np.ndarray:
        cov = np.array([self.nodes[i].cov for i in self._ids])
        return 1.0 / self._crowd + self.settings.alpha * cov

    def leaves(self) -> list:
        return [i for i in self._ids if not self.nodes[i].children]

    def best_leaf(self) -> int:
        """Max coverage, then min cost, then lowest id."""
        return min(self.leaves(), key=lambda i: (-self.nodes[i].cov, self.nodes[i].cost, i))

    def chain(self, node_id: int) -> list:
        """Node ids from the root to ``node_id``."""
        out = []
        i = node_id
        while i is not None:
            out.append(i)
            i = self.nodes[i].parent
        return out[::-1]

    def ancestors(self, node_id: int) -> list:
        """(box, local) pairs along the root-to-node chain, root first; skips empty nodes."""
        return [(self.nodes[i].box, self.nodes[i].local) for i in self.chain(node_id)
                if self.nodes[i].local is not None]

    def node_bytes(self) -> int:
        return sum(n.nbytes for n in self.nodes.values())


@dataclass
class ExpansionOutcome:
    status: str
    node_id: int | None = None
    reason: str | None = None

    @property
    def added(self) -> bool:
        return self.status == ADDED


def select_expansion_node(tree: PlanTree, settings: PlannerSettings | None = None, rng=None) -> int:
    """Draw a node id with probability proportional to 1/N_d + alpha * cov."""
    rng = tree.rng if rng is None else rng
    w = tree.weights()
    c = np.cumsum(w)
    k = int(np.searchsorted(c, rng.random() * c[-1], side="right"))
    return tree._ids[min(k, len(w) - 1)]


def sample_child_config(parent: RobotConfig, settings: PlannerSettings, rng,
                        world_min=None, world_max=None) -> RobotConfig:
    """Uniform position in the ball (or shell) of the edge bounds, angles within one step.

    Always consumes the same number of random draws, whatever the settings.
    """
    g = rng.standard_normal(3)
    u, a, b = rng.random(3)
    norm = float(np.linalg.norm(g))
    dirn = g / norm if norm > 0 else np.array([1.0, 0.0, 0.0])
    r0, r1 = settings.min_edge_length, settings.edge_length
    r = (r0 ** 3 + u * (r1 ** 3 - r0 ** 3)) ** (1.0 / 3.0)
    pos = parent.pos + r * dirn
    if world_min is not None:
        pos = np.maximum(pos, world_min)
    if world_max is not None:
        pos = np.minimum(pos, world_max)
    yaw = wrap_angle(parent.yaw + (2 * a - 1) * settings.yaw_step)
    pitch = float(np.clip(parent.pitch + (2 * b - 1) * settings.pitch_step, -settings.pitch_limit, settings.pitch_limit))
    return RobotConfig(tuple(pos), yaw, pitch)


def _world_limits(field, settings: PlannerSettings):
    lo = field.grid.box_min if settings.world_min is None else np.asarray(settings.world_min, dtype=np.float64)
    hi = field.grid.box_max if settings.world_max is None else np.asarray(settings.world_max, dtype=np.float64)
    return lo, hi


def observe(field, q: RobotConfig, sensor: SensorModel, settings: PlannerSettings, seed: int):
    """Observation -> (box, local SDF, local surface points). Raises on empty/failed observations."""
    obs = simulate_observation(field, q, sensor)
    if obs.n_hits == 0:
        raise EmptyObservationError("no surface within sensor range")
    box = observation_bounding_box(obs, field, settings.local.box_pad)
    local = represent_observation(obs, field, settings.local, seed=seed, box=box)
    points = local_surface_points(local, settings.kappa)
    return box, local, points


def expand_once(tree: PlanTree, field, geom: RobotGeometry, sensor: SensorModel,
                settings: PlannerSettings) -> ExpansionOutcome:
    """One iteration: select, sample, check the edge, observe, count new coverage, attach."""
    tree.iteration += 1
    rng = tree.rng
    parent_id = select_expansion_node(tree, settings, rng)
    parent = tree.nodes[parent_id]
    lo, hi = _world_limits(field, settings)
    q = sample_child_config(parent.q, settings, rng, lo, hi)
    seed = int(rng.integers(2 ** 31))
    xi = settings.resolved_xi(geom)
    if not collision_free_segment(field, parent.q, q, geom, xi, settings.resolved_step(geom)):
        return ExpansionOutcome(REJECTED, reason="collision")
    try:
        box, local, points = observe(field, q, sensor, settings, seed)
    except EmptyObservationError:
        return ExpansionOutcome(REJECTED, reason="empty-observation")
    except TrainingError:
        return ExpansionOutcome(REJECTED, reason="training")
    cov, _ = total_coverage(points, box, tree.ancestors(parent_id), parent.cov, tree.s_e_count,
                            settings.resolved_eps(field))
    node = tree.add(parent_id, q, box, local, cov)
    return ExpansionOutcome(ADDED, node_id=node.id)


def prune_to_best_branch(tree: PlanTree) -> PlanTree:
    """Keep only the root-to-best-leaf chain; other nodes (and their heads) are dropped."""
    keep = tree.chain(tree.best_leaf())
    keep_set = set(keep)
    if len(keep_set) == len(tree.nodes):
        return tree
    tree.nodes = {i: tree.nodes[i] for i in keep}
    for i in keep:
        tree.nodes[i].children = [c for c in tree.nodes[i].children if c in keep_set]
    tree._recount()
    return tree


def memory_accounting(tree: PlanTree | None, field, explicit_shape=(128, 128)) -> dict:
    """Tracked bytes: field parameters plus every node's head, box and header.

    Also reports what storing each observed node's fully-hit point cloud
    (float32 xyz at ``explicit_shape``) would cost instead.
    """
    field_bytes = int(field.nbytes)
    nodes = [] if tree is None else [tree.nodes[i] for i in sorted(tree.nodes)]
    node_bytes = sum(n.nbytes for n in nodes)
    observed = [n for n in nodes if n.local is not None]
    explicit_per_node = int(explicit_shape[0] * explicit_shape[1] * 3 * 4)
    per_node = observed[0].nbytes if observed else 0
    head_params = observed[0].local.head.n_params if observed else 0
    return {
        "field_bytes": field_bytes,
        "node_bytes": int(node_bytes),
        "baseline_bytes": int(field_bytes + node_bytes),
        "n_nodes": len(nodes),
        "n_observed_nodes": len(observed),
        "per_node_bytes": int(per_node),
        "head_params": int(head_params),
        "node_header_bytes": NODE_HEADER_BYTES,
        "explicit_shape": list(explicit_shape),
        "explicit_per_node_bytes": explicit_per_node,
        "explicit_node_bytes": explicit_per_node * len(observed),
        "explicit_ratio": (explicit_per_node / per_node) if per_node else None,
    }


@dataclass
class PlanResult:
    trajectory: list
    node_ids: list
    node_cov: list
    node_cost: list
    coverage: float
    cost: float
    nodes_created: int
    iterations: int
    rejections: dict
    prune_iterations: list
    peak_memory_bytes: int
    elapsed_s: float
    history: list
    stop_reason: str
    tree: PlanTree = None
    surface: SurfacePointSet = None

    def covered_mask(self, field, eps: float) -> np.ndarray:
        """Which global surface points the final chain observed (box + |f_P| < eps)."""
        return seen_by_chain(self.surface.points, self.tree.ancestors(self.node_ids[-1]), eps)


def make_root(field, geom: RobotGeometry, sensor: SensorModel, settings: PlannerSettings, s_e_count: int,
              rng) -> PlanTree:
    q = RobotConfig(tuple(settings.root), settings.root_yaw, settings.root_pitch)
    if not collision_free_config(field, q, geom, settings.resolved_xi(geom)):
        raise SetupError(f"root configuration {q.position} is in collision")
    seed = int(rng.integers(2 ** 31))
    try:
        box, local, points = observe(field, q, sensor, settings, seed)
        cov, _ = total_coverage(points, box, [], 0.0, s_e_count, settings.resolved_eps(field))
    except (EmptyObservationError, TrainingError):
        box, local, cov = None, None, 0.0
    root = PlanNode(0, q, box, local, cov, None, 0.0)
    return PlanTree(root, settings, s_e_count, rng)


def plan(field, geom: RobotGeometry, sensor: SensorModel, settings: PlannerSettings,
         surface: SurfacePointSet | None = None, progress=None) -> PlanResult:
    """Grow the tree until the node, iteration, time or memory budget runs out."""
    t0 = time.perf_counter()
    surface = global_surface_points(field) if surface is None else surface
    rng = np.random.default_rng(settings.seed)
    tree = make_root(field, geom, sensor, settings, surface.count, rng)
    field_bytes = int(field.nbytes)
    created = 1
    rejections = {"collision": 0, "empty-observation": 0, "training": 0}
    prunes = []
    peak = field_bytes + tree.node_bytes()
    history = []

    def record():
        best = tree.nodes[tree.best_leaf()]
        history.append({"iteration": tree.iteration, "elapsed_s": time.perf_counter() - t0,
                        "nodes": len(tree), "coverage": best.cov, "cost": best.cost})

    record()
    stop = "node-budget"
    while True:
        if created >= settings.node_budget:
            stop = "node-budget"
            break
        if settings.iteration_budget is not None and tree.iteration >= settings.iteration_budget:
            stop = "iteration-budget"
            break
        if time.perf_counter() - t0 >= settings.time_budget:
            stop = "time-budget"
            break
        if field_bytes + tree.node_bytes() >= settings.memory_budget:
            stop = "memory-budget"
            break
        out = expand_once(tree, field, geom, sensor, settings)
        if out.added:
            created += 1
            peak = max(peak, field_bytes + tree.node_bytes())
        else:
            rejections[out.reason] += 1
        if tree.iteration % settings.prune_interval == 0:
            prune_to_best_branch(tree)
            prunes.append(tree.iteration)
        record()
        if progress is not None:
            progress(tree, out)
    best = tree.best_leaf()
    chain = tree.chain(best)
    nodes = [tree.nodes[i] for i in chain]
    elapsed = time.perf_counter() - t0
    log.info("plan: %d nodes, %d iterations, coverage %.4f, cost %.3f m, %.1f s",
             created, tree.iteration, nodes[-1].cov, nodes[-1].cost, elapsed)
    return PlanResult(
        trajectory=[n.q for n in nodes],
        node_ids=chain,
        node_cov=[n.cov for n in nodes],
        node_cost=[n.cost for n in nodes],
        coverage=nodes[-1].cov,
        cost=nodes[-1].cost,
        nodes_created=created,
        iterations=tree.iteration,
        rejections=rejections,
        prune_iterations=prunes,
        peak_memory_bytes=int(peak),
        elapsed_s=elapsed,
        history=history,
        stop_reason=stop,
        tree=tree,
        surface=surface,
    )


def trajectory_records(result: PlanResult) -> list:
    return [{"node": i, "x": q.position[0], "y": q.position[1], "z": q.position[2], "yaw": q.yaw,
             "pitch": q.pitch, "coverage": c, "cost": k}
            for i, q, c, k in zip(result.node_ids, result.trajectory, result.node_cov, result.node_cost)]
