"""Zero-isosurface extraction on the global lattice.

Coverage only needs marching-cubes *vertices*, i.e. one point per lattice
edge whose endpoints straddle zero. Those are produced here directly so the
same edge always yields the same bits no matter which sub-box is evaluated.
Triangles for export come from scikit-image on the same lattice values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError


@dataclass(frozen=True)
class GridSpec:
    origin: tuple
    cell_size: float
    dims: tuple  # cell counts per axis; lattice has dims + 1 points

    @classmethod
    def from_box(cls, box_min, box_max, cell_size: float) -> "GridSpec":
        box_min = np.asarray(box_min, dtype=np.float64)
        extent = np.asarray(box_max, dtype=np.float64) - box_min
        if cell_size <= 0 or np.any(extent <= 0):
            raise InvalidInputError("grid needs a positive cell size and a non-empty box")
        dims = np.ceil(extent / cell_size - 1e-9).astype(int)
        return cls(tuple(float(v) for v in box_min), float(cell_size), tuple(int(d) for d in dims))

    @property
    def box_min(self) -> np.ndarray:
        return np.array(self.origin)

    @property
    def box_max(self) -> np.ndarray:
        return np.array(self.origin) + np.array(self.dims) * self.cell_size

    def axis_coords(self, lo, hi):
        """Lattice coordinates for integer index ranges [lo, hi] per axis."""
        return [self.origin[a] + np.arange(lo[a], hi[a] + 1) * self.cell_size for a in range(3)]

    def to_dict(self) -> dict:
        return {"origin": list(self.origin), "cell_size": self.cell_size, "dims": list(self.dims)}

    @classmethod
    def from_dict(cls, d) -> "GridSpec":
        return cls(tuple(float(v) for v in d["origin"]), float(d["cell_size"]), tuple(int(v) for v in d["dims"]))


@dataclass
class SurfacePointSet:
    points: np.ndarray
    # (axis, i, j, k) global index of the generating lattice edge, one row per point
    edges: np.ndarray = None

    @property
    def count(self) -> int:
        return len(self.points)

    def __len__(self):
        return len(self.points)


def lattice_values(evaluate, grid: GridSpec, lo=None, hi=None, chunk: int = 1 << 16) -> np.ndarray:
    """Field values on lattice points lo..hi (inclusive), shape (nx, ny, nz).

    Points are visited in C (row-major) order.
    """
    lo = np.zeros(3, dtype=int) if lo is None else np.asarray(lo, dtype=int)
    hi = np.array(grid.dims) if hi is None else np.asarray(hi, dtype=int)
    xs, ys, zs = grid.axis_coords(lo, hi)
    shape = (len(xs), len(ys), len(zs))
    pts = np.stack(np.meshgrid(xs, ys, zs, indexing="ij"), axis=-1).reshape(-1, 3)
    out = np.empty(len(pts))
    for s in range(0, len(pts), chunk):
        out[s:s + chunk] = evaluate(pts[s:s + chunk])
    return out.reshape(shape)


def edge_vertices(values: np.ndarray, grid: GridSpec, lo=None) -> SurfacePointSet:
    """One vertex per lattice edge with a sign change, linearly interpolated.

    Ordering: x-edges, then y-edges, then z-edges, each in row-major order.
    """
    lo = np.zeros(3, dtype=int) if lo is None else np.asarray(lo, dtype=int)
    hi = lo + np.array(values.shape) - 1
    coords = grid.axis_coords(lo, hi)
    pts, ids = [], []
    inside = values < 0
    for axis in range(3):
        a = [slice(None)] * 3
        b = [slice(None)] * 3
        a[axis] = slice(None, -1)
        b[axis] = slice(1, None)
        v0, v1 = values[tuple(a)], values[tuple(b)]
        cross = inside[tuple(a)] != inside[tuple(b)]
        ijk = np.argwhere(cross)
        if len(ijk) == 0:
            continue
        f0, f1 = v0[cross], v1[cross]
        den = f0 - f1
        t = np.where(den != 0, f0 / np.where(den != 0, den, 1.0), 0.5)
        p = np.stack([coords[0][ijk[:, 0]], coords[1][ijk[:, 1]], coords[2][ijk[:, 2]]], axis=1)
        p[:, axis] = p[:, axis] + t * grid.cell_size
        pts.append(p)
        ids.append(np.column_stack([np.full(len(ijk), axis), ijk + lo]))
    if not pts:
        return SurfacePointSet(np.zeros((0, 3)), np.zeros((0, 4), dtype=int))
    return SurfacePointSet(np.concatenate(pts), np.concatenate(ids))


def triangulate(values: np.ndarray, grid: GridSpec, lo=None):
    """Triangle mesh (vertices, faces) of the zero level set, or None when there is none."""
    from skimage.measure import marching_cubes

    if not (values.min() < 0 < values.max()):
        return None
    lo = np.zeros(3, dtype=int) if lo is None else np.asarray(lo, dtype=int)
    h = grid.cell_size
    verts, faces, _, _ = marching_cubes(values, level=0.0, spacing=(h, h, h))
    verts = verts + np.asarray(grid.origin) + lo * h
    return verts, faces
