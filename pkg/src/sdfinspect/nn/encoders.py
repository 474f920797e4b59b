"""Input encoders: multiresolution hash grid (trainable) and one-blob (fixed)."""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass

import numba
import numpy as np

# Spatial hash primes from the instant-NGP encoding; the first axis is unhashed.
HASH_PRIMES = np.array([1, 2654435761, 805459861], dtype=np.uint64)

_CORNERS = np.array([[(c >> 0) & 1, (c >> 1) & 1, (c >> 2) & 1] for c in range(8)], dtype=np.int64)


def quantize(a: np.ndarray) -> np.ndarray:
    """Round to float32-representable values but keep float64 storage.

    Everything that gets checkpointed passes through here, so a save/load
    round trip is bit exact.
    """
    return np.asarray(a, dtype=np.float32).astype(np.float64)


@numba.njit(cache=True)
def _encode_kernel(u, resolutions, dense, table):
    """Fused corner lookup + trilinear interpolation (inference path)."""
    B = u.shape[0]
    L, T, F = table.shape
    out = np.zeros((B, L * F))
    mask = np.uint64(T - 1)
    p1 = np.uint64(2654435761)
    p2 = np.uint64(805459861)
    for b in range(B):
        for l in range(L):
            N = resolutions[l]
            n = N + 1
            px, py, pz = u[b, 0] * N, u[b, 1] * N, u[b, 2] * N
            ix0, iy0, iz0 = min(np.int64(px), N - 1), min(np.int64(py), N - 1), min(np.int64(pz), N - 1)
            fx, fy, fz = px - ix0, py - iy0, pz - iz0
            for c in range(8):
                cx, cy, cz = c & 1, (c >> 1) & 1, (c >> 2) & 1
                wz = fz if cz else 1.0 - fz
                wy = fy if cy else 1.0 - fy
                wx = fx if cx else 1.0 - fx
                w = wz * wy * wx
                ix, iy, iz = ix0 + cx, iy0 + cy, iz0 + cz
                if dense[l]:
                    row = iz * (n * n) + iy * n + ix
                else:
                    row = np.int64((np.uint64(ix) ^ (np.uint64(iy) * p1) ^ (np.uint64(iz) * p2)) & mask)
                for f in range(F):
                    out[b, l * F + f] += w * table[l, row, f]
    return out


@dataclass(frozen=True)
class HashGridConfig:
    levels: int = 8
    features: int = 2
    log2_table: int = 15
    base_resolution: int = 8
    growth: float = 1.25

    @property
    def table_size(self) -> int:
        return 1 << self.log2_table

    @property
    def output_width(self) -> int:
        return self.levels * self.features


class HashGridEncoder:
    """Trilinearly interpolated multi-level feature grid with a spatial hash.

    Coordinates are normalised against ``box_min``/``box_max`` and clamped to
    the unit cube. Levels whose dense lattice fits the table are indexed
    directly; finer levels are hashed and collisions are simply shared.
    """

    def __init__(self, config: HashGridConfig, box_min, box_max, seed: int = 0, init_scale: float = 1e-4):
        self.config = config
        self.box_min = np.asarray(box_min, dtype=np.float64)
        self.box_max = np.asarray(box_max, dtype=np.float64)
        c = config
        self.resolutions = np.array([int(np.floor(c.base_resolution * c.growth ** l)) for l in range(c.levels)])
        self.dense = (self.resolutions + 1) ** 3 <= c.table_size
        rng = np.random.default_rng(seed)
        self.table = quantize(rng.uniform(-init_scale, init_scale, size=(c.levels, c.table_size, c.features)))

    @property
    def n_params(self) -> int:
        return self.table.size

    def normalize(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        return np.clip((x - self.box_min) / (self.box_max - self.box_min), 0.0, 1.0)

    def lattice_index(self, level: int, ijk: np.ndarray) -> np.ndarray:
        """Table row of integer lattice coordinates ``ijk`` (..., 3) at ``level``."""
        n = int(self.resolutions[level]) + 1
        T = self.config.table_size
        if self.dense[level]:
            return ijk[..., 0] + n * (ijk[..., 1] + n * ijk[..., 2])
        h = ijk.astype(np.uint64) * HASH_PRIMES
        return ((h[..., 0] ^ h[..., 1] ^ h[..., 2]) & np.uint64(T - 1)).astype(np.int64)

    def corners(self, x):
        """Row indices (B, L, 8) and trilinear weights (B, L, 8).

        Corner c has offsets (c & 1, c >> 1 & 1, c >> 2 & 1); indices and
        weights are built per axis and combined by broadcasting.
        """
        u = self.normalize(x)
        B, L = len(u), self.config.levels
        T = self.config.table_size
        idx = np.empty((B, L, 8), dtype=np.int64)
        w = np.empty((B, L, 8))
        for l in range(L):
            N = int(self.resolutions[l])
            pos = u * N
            i0 = np.minimum(pos.astype(np.int64), N - 1)
            frac = pos - i0
            wa = np.stack([1.0 - frac, frac], axis=2)  # (B, 3, 2)
            w[:, l] = (wa[:, 2, :, None, None] * wa[:, 1, None, :, None] * wa[:, 0, None, None, :]).reshape(B, 8)
            ia = np.stack([i0, i0 + 1], axis=2)        # (B, 3, 2)
            if self.dense[l]:
                n = N + 1
                r = ia[:, 2, :, None, None] * (n * n) + ia[:, 1, None, :, None] * n + ia[:, 0, None, None, :]
            else:
                ha = ia.astype(np.uint64) * HASH_PRIMES[None, :, None]
                r = (ha[:, 2, :, None, None] ^ ha[:, 1, None, :, None] ^ ha[:, 0, None, None, :]) & np.uint64(T - 1)
            idx[:, l] = r.reshape(B, 8)
        return idx, w

    def encode(self, x, corners=None) -> np.ndarray:
        if corners is None:
            return _encode_kernel(self.normalize(x), self.resolutions.astype(np.int64), self.dense, self.table)
        idx, w = corners
        L, F = self.config.levels, self.config.features
        out = np.empty((len(idx), L * F))
        for l in range(L):
            feats = self.table[l][idx[:, l]]  # (B, 8, F)
            out[:, l * F:(l + 1) * F] = np.einsum("bc,bcf->bf", w[:, l], feats)
        return out

    def backward(self, x, grad_out, corners=None) -> np.ndarray:
        """Gradient of sum(grad_out * encode(x)) w.r.t. the table (dense, same shape).

        Only the <= 8 rows per level touched by each point are nonzero.
        ``corners`` may be passed back from the forward pass to skip rehashing.
        """
        idx, w = self.corners(x) if corners is None else corners
        grad_out = np.atleast_2d(grad_out)
        L, T, F = self.table.shape
        grad = np.zeros_like(self.table)
        for l in range(L):
            rows = idx[:, l].ravel()
            g = w[:, l, :, None] * grad_out[:, None, l * F:(l + 1) * F]  # (B, 8, F)
            g = g.reshape(-1, F)
            for f in range(F):
                grad[l, :, f] = np.bincount(rows, weights=g[:, f], minlength=T)
        return grad

    def to_header(self) -> dict:
        return {"config": asdict(self.config), "box_min": self.box_min.tolist(),
                "box_max": self.box_max.tolist()}


def hashgrid_encode(enc: HashGridEncoder, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = enc.encode(x.reshape(-1, 3))
    return out[0] if x.ndim == 1 else out


def hashgrid_backward(enc: HashGridEncoder, x, grad_out) -> np.ndarray:
    return enc.backward(np.reshape(x, (-1, 3)), np.reshape(grad_out, (-1, enc.config.output_width)))


class OneBlobEncoder:
    """Per-axis Gaussian bumps centred on ``bins`` evenly spaced bin centres."""

    def __init__(self, bins: int, box_min, box_max, sigma: float | None = None):
        self.bins = int(bins)
        self.box_min = np.asarray(box_min, dtype=np.float64)
        self.box_max = np.asarray(box_max, dtype=np.float64)
        self.sigma = 1.0 / self.bins if sigma is None else float(sigma)
        self.centers = (np.arange(self.bins) + 0.5) / self.bins

    @property
    def output_width(self) -> int:
        return 3 * self.bins

    def encode(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        u = np.clip((x - self.box_min) / (self.box_max - self.box_min), 0.0, 1.0)
        z = (u[:, :, None] - self.centers[None, None, :]) / self.sigma
        return np.exp(-0.5 * z * z).reshape(len(x), -1)


def oneblob_encode(enc: OneBlobEncoder, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = enc.encode(x.reshape(-1, 3))
    return out[0] if x.ndim == 1 else out


class FeatureExtractor:
    """Concatenation [hash grid features, one-blob features]; only the grid trains."""

    def __init__(self, grid: HashGridEncoder, blob: OneBlobEncoder):
        self.grid = grid
        self.blob = blob

    @classmethod
    def create(cls, box_min, box_max, grid_config: HashGridConfig | None = None,
               oneblob_bins: int = 6, seed: int = 0) -> "FeatureExtractor":
        grid = HashGridEncoder(grid_config or HashGridConfig(), box_min, box_max, seed=seed)
        return cls(grid, OneBlobEncoder(oneblob_bins, box_min, box_max))

    @property
    def output_width(self) -> int:
        return self.grid.config.output_width + self.blob.output_width

    @property
    def n_params(self) -> int:
        return self.grid.n_params

    def encode(self, x, corners=None) -> np.ndarray:
        return np.concatenate([self.grid.encode(x, corners), self.blob.encode(x)], axis=1)

    def backward(self, x, grad_features, corners=None) -> np.ndarray:
        return self.grid.backward(x, grad_features[:, :self.grid.config.output_width], corners)

    def checksum(self) -> str:
        return hashlib.sha256(self.grid.table.tobytes()).hexdigest()

    def to_header(self) -> dict:
        return {"hashgrid": self.grid.to_header(), "oneblob_bins": self.blob.bins,
                "oneblob_sigma": self.blob.sigma}
