"""The global implicit TSDF: feature extractor + head, training, and S_E extraction."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import DegenerateFieldError, InvalidInputError, TrainingError
from .marching import GridSpec, SurfacePointSet, edge_vertices, lattice_values, triangulate
from .nn import (
    AdamWState,
    FeatureExtractor,
    HashGridConfig,
    HashGridEncoder,
    MlpHead,
    OneBlobEncoder,
    adamw_step,
    load_checkpoint,
    quantize,
    save_checkpoint,
)
from .oracle import TsdfSampleSet

log = logging.getLogger(__name__)

EVAL_CHUNK = 1 << 15


@dataclass
class FieldConfig:
    box_min: tuple | None = (-1.5, -1.5, -1.5)
    box_max: tuple | None = (1.5, 1.5, 1.5)
    cell_size: float = 0.05
    tr: float = 0.1
    hashgrid: HashGridConfig = field(default_factory=HashGridConfig)
    oneblob_bins: int = 6
    hidden: tuple = (32, 32)
    lr: float = 3e-3
    weight_decay: float = 0.0
    epochs: int = 60
    batch_size: int = 1024

    def grid(self) -> GridSpec:
        if self.box_min is None or self.box_max is None:
            raise InvalidInputError("field world box is not set")
        return GridSpec.from_box(self.box_min, self.box_max, self.cell_size)


class EnvField:
    """f(x) = clamp(head(FE(x)), -tr, tr) over a fixed world box and lattice."""

    def __init__(self, fe: FeatureExtractor, head: MlpHead, tr: float, grid: GridSpec, meta=None):
        self.fe = fe
        self.head = head
        self.tr = float(tr)
        self.grid = grid
        self.meta = dict(meta or {})
        self.loss_history = []
        self._lattice_feats = None

    @classmethod
    def create(cls, config: FieldConfig, seed: int = 0) -> "EnvField":
        grid = config.grid()
        fe = FeatureExtractor.create(grid.box_min, grid.box_max, config.hashgrid, config.oneblob_bins, seed=seed)
        head = MlpHead([fe.output_width, *config.hidden, 1], seed=seed + 1)
        return cls(fe, head, config.tr, grid)

    @property
    def n_params(self) -> int:
        return self.fe.n_params + self.head.n_params

    @property
    def nbytes(self) -> int:
        return 4 * self.n_params

    def features(self, points) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        out = np.empty((len(points), self.fe.output_width))
        for s in range(0, len(points), EVAL_CHUNK):
            out[s:s + EVAL_CHUNK] = self.fe.encode(points[s:s + EVAL_CHUNK])
        return out

    def lattice_features(self, lo, hi) -> np.ndarray:
        """Features at lattice points lo..hi (inclusive), rows in C order.

        The extractor is frozen once training ends, so the features of the
        whole lattice are computed on first use and sliced afterwards.
        """
        if self._lattice_feats is None:
            xs, ys, zs = self.grid.axis_coords((0, 0, 0), self.grid.dims)
            pts = np.stack(np.meshgrid(xs, ys, zs, indexing="ij"), axis=-1).reshape(-1, 3)
            self._lattice_feats = self.features(pts).reshape(len(xs), len(ys), len(zs), -1)
        sub = self._lattice_feats[lo[0]:hi[0] + 1, lo[1]:hi[1] + 1, lo[2]:hi[2] + 1]
        return sub.reshape(-1, sub.shape[-1])

    def raw(self, points) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        out = np.empty(len(points))
        for s in range(0, len(points), EVAL_CHUNK):
            out[s:s + EVAL_CHUNK] = self.head.forward(self.fe.encode(points[s:s + EVAL_CHUNK]))
        return out

    def evaluate(self, points) -> np.ndarray:
        return np.clip(self.raw(points), -self.tr, self.tr)

    __call__ = evaluate

    def quantize(self) -> None:
        self._lattice_feats = None
        self.fe.grid.table = quantize(self.fe.grid.table)
        self.head.params = [quantize(p) for p in self.head.params]

    # -- persistence ----------------------------------------------------------
    def header(self) -> dict:
        return {"kind": "env_field", "tr": self.tr, "grid": self.grid.to_dict(),
                "encoder": self.fe.to_header(), "head_widths": self.head.widths, "meta": self.meta}

    def save(self, path) -> None:
        arrays = {"hashgrid": self.fe.grid.table}
        arrays.update({f"head{i}": p for i, p in enumerate(self.head.params)})
        save_checkpoint(path, arrays, self.header())

    @classmethod
    def load(cls, path) -> "EnvField":
        arrays, hdr = load_checkpoint(path)
        if hdr.get("kind") != "env_field":
            raise InvalidInputError(f"{path}: not an environment field checkpoint")
        grid = GridSpec.from_dict(hdr["grid"])
        enc = hdr["encoder"]
        hg = enc["hashgrid"]
        genc = HashGridEncoder(HashGridConfig(**hg["config"]), hg["box_min"], hg["box_max"])
        genc.table = arrays["hashgrid"]
        blob = OneBlobEncoder(enc["oneblob_bins"], hg["box_min"], hg["box_max"], sigma=enc["oneblob_sigma"])
        widths = hdr["head_widths"]
        head = MlpHead(widths, params=[arrays[f"head{i}"] for i in range(2 * (len(widths) - 1))])
        return cls(FeatureExtractor(genc, blob), head, hdr["tr"], grid, hdr.get("meta"))


class AnalyticField:
    """Any exact SDF callable wrapped with truncation and a lattice; no learning."""

    def __init__(self, sdf, tr: float, grid: GridSpec):
        self.sdf = sdf
        self.tr = float(tr)
        self.grid = grid

    def evaluate(self, points) -> np.ndarray:
        return np.clip(self.sdf(np.atleast_2d(np.asarray(points, dtype=np.float64))), -self.tr, self.tr)

    __call__ = evaluate


def sphere_sdf(center=(0.0, 0.0, 0.0), radius: float = 0.5):
    c = np.asarray(center, dtype=np.float64)

    def sdf(p):
        return np.linalg.norm(p - c, axis=1) - radius
    return sdf


def plane_sdf(point, normal):
    """Signed distance to a plane, positive on the ``normal`` side."""
    p0 = np.asarray(point, dtype=np.float64)
    n = np.asarray(normal, dtype=np.float64)
    n = n / np.linalg.norm(n)

    def sdf(p):
        return (p - p0) @ n
    return sdf


def train_env_field(samples: TsdfSampleSet, config: FieldConfig, epochs: int | None = None,
                    batch_size: int | None = None, seed: int = 0, log_every: int = 0) -> EnvField:
    """Jointly fit grid features and head to the sampled TSDF values (mean squared error)."""
    if len(samples) == 0:
        raise InvalidInputError("empty sample set")
    if abs(samples.tr - config.tr) > 1e-12:
        raise InvalidInputError(f"sample truncation {samples.tr} != config truncation {config.tr}")
    epochs = config.epochs if epochs is None else epochs
    batch_size = config.batch_size if batch_size is None else batch_size
    fld = EnvField.create(config, seed=seed)
    params = [fld.fe.grid.table, *fld.head.params]
    opt = AdamWState(lr=config.lr, weight_decay=config.weight_decay).init(params)
    rng = np.random.default_rng(seed)
    X, Y = samples.X, samples.Y
    n = len(X)
    history = []
    for epoch in range(epochs):
        perm = rng.permutation(n)
        total = 0.0
        snapshot = [p.copy() for p in params]
        for s in range(0, n, batch_size):
            idx = perm[s:s + batch_size]
            x, y = X[idx], Y[idx]
            corners = fld.fe.grid.corners(x)
            feats = fld.fe.encode(x, corners)
            pred, cache = fld.head.forward(feats, return_cache=True)
            resid = pred - y
            loss = float(np.mean(resid * resid))
            if not np.isfinite(loss):
                _restore(params, snapshot)
                raise TrainingError(f"non-finite loss at epoch {epoch}", state=fld)
            total += loss * len(idx)
            head_grads, gfeat = fld.head.backward(cache, 2.0 * resid / len(idx))
            grid_grad = fld.fe.backward(x, gfeat, corners)
            try:
                adamw_step(opt, params, [grid_grad, *head_grads])
            except TrainingError as exc:
                _restore(params, snapshot)
                raise TrainingError(f"{exc} at epoch {epoch}", state=fld) from None
        history.append(total / n)
        if log_every and (epoch + 1) % log_every == 0:
            log.info("epoch %d loss %.3e", epoch + 1, history[-1])
    fld.quantize()
    fld.loss_history = history
    return fld


def _restore(params, snapshot):
    for p, s in zip(params, snapshot):
        p[...] = s


def eval_tsdf(field, points) -> np.ndarray:
    return field.evaluate(np.reshape(points, (-1, 3)))


def global_surface_points(field) -> SurfacePointSet:
    """Marching-cube vertices of the zero level set over the whole lattice (S_E)."""
    values = lattice_values(field.evaluate, field.grid)
    pts = edge_vertices(values, field.grid)
    if pts.count == 0:
        raise DegenerateFieldError("no isosurface: field has no zero crossing on the lattice")
    return pts


def isosurface_mesh(field, grid: GridSpec | None = None):
    grid = grid or field.grid
    values = lattice_values(field.evaluate, grid)
    tri = triangulate(values, grid)
    if tri is None:
        raise DegenerateFieldError("no isosurface: field has no zero crossing on the lattice")
    return tri


def field_config_dict(config: FieldConfig) -> dict:
    d = asdict(config)
    d["box_min"] = list(config.box_min)
    d["box_max"] = list(config.box_max)
    d["hidden"] = list(config.hidden)
    return d
