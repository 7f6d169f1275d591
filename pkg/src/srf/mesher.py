"""Density grids, marching cubes, vertex coloring and PLY export.

Grid node ``(i, j, k)`` sits at ``lo + (i, j, k) * spacing`` with
``spacing = (hi - lo) / (resolution - 1)``. Nodes whose value is at least the
threshold count as inside the surface. With the corner layout of
``mc_tables`` the table's vertex order already winds every triangle
counter-clockwise seen from outside, so normals point away from the
high-density region.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import mc_tables
from . import tensor as T


class MeshError(ValueError):
    pass


@dataclass
class DensityGrid:
    lo: np.ndarray
    hi: np.ndarray
    values: np.ndarray  # [nx, ny, nz]

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=np.float64)
        self.hi = np.asarray(self.hi, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3 or min(self.values.shape) < 2:
            raise MeshError(f"density grid needs at least 2 nodes per axis, got shape {self.values.shape}")
        if not np.all(self.hi > self.lo):
            raise MeshError(f"invalid bounding box {self.lo} .. {self.hi}")

    @property
    def resolution(self) -> tuple:
        return self.values.shape

    @property
    def spacing(self) -> np.ndarray:
        return (self.hi - self.lo) / (np.array(self.values.shape) - 1)

    @property
    def voxel_diagonal(self) -> float:
        return float(np.linalg.norm(self.spacing))


@dataclass
class ColoredMesh:
    vertices: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    faces: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))
    colors: np.ndarray = None  # [V, 3] in [0, 1]

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)


def grid_points(lo, hi, resolution) -> np.ndarray:
    """Node coordinates ``[nx*ny*nz, 3]`` in C order (x slowest)."""
    res = np.broadcast_to(np.asarray(resolution, dtype=int), (3,))
    if np.any(res < 2):
        raise MeshError(f"grid resolution must be >= 2 per axis, got {tuple(res)}")
    axes = [np.linspace(lo[d], hi[d], res[d]) for d in range(3)]
    xx, yy, zz = np.meshgrid(*axes, indexing="ij")
    return np.stack([xx, yy, zz], axis=-1).reshape(-1, 3)


def evaluate_grid(model, cond, bbox, resolution, batch_size: int = 4096, pyramid=None) -> DensityGrid:
    """Density at every node of a regular grid over ``bbox = (lo, hi)``."""
    lo, hi = (np.asarray(b, dtype=np.float64) for b in bbox)
    res = tuple(np.broadcast_to(np.asarray(resolution, dtype=int), (3,)))
    pts = grid_points(lo, hi, res)
    out = np.empty(len(pts))
    with T.no_grad():
        if pyramid is None:
            pyramid = model.encode(cond)
        for start in range(0, len(pts), batch_size):
            _, sigma = model.query(cond, pyramid, pts[start : start + batch_size])
            out[start : start + batch_size] = sigma.data
    return DensityGrid(lo, hi, out.reshape(res))


def default_threshold(grid: DensityGrid, ratio: float = 0.5) -> float:
    return float(ratio * grid.values.max())


def marching_cubes(grid: DensityGrid, threshold: float) -> ColoredMesh:
    """Triangulate the ``threshold`` level set of ``grid``.

    Vertices shared between neighbouring cells are merged (one vertex per
    crossed grid edge). A threshold outside the value range gives an empty
    mesh.
    """
    V = grid.values
    if not np.all(np.isfinite(V)):
        raise MeshError("density grid contains non-finite values")
    nx, ny, nz = V.shape
    below = V < threshold
    case = np.zeros((nx - 1, ny - 1, nz - 1), dtype=np.int64)
    for k, (dx, dy, dz) in enumerate(mc_tables.CORNERS):
        case |= below[dx : nx - 1 + dx, dy : ny - 1 + dy, dz : nz - 1 + dz].astype(np.int64) << k
    active = np.flatnonzero((case != 0) & (case != 255))
    if active.size == 0:
        return ColoredMesh()
    cases = case.reshape(-1)[active]
    ci, cj, ck = np.unravel_index(active, case.shape)
    rows = mc_tables.TRIANGLES[cases][:, :15].reshape(-1, 5, 3)
    cell_of_tri, slot = np.nonzero(rows[:, :, 0] >= 0)
    tri_edges = rows[cell_of_tri, slot]  # [F, 3] local edge ids

    # global edge id: (base node, axis) where base is the lower corner of the edge
    a = mc_tables.EDGES[:, 0]
    b = mc_tables.EDGES[:, 1]
    off_a, off_b = mc_tables.CORNERS[a], mc_tables.CORNERS[b]
    base_off = np.minimum(off_a, off_b)  # [12, 3]
    axis = np.argmax(np.abs(off_b - off_a), axis=1)  # [12]
    cell = np.stack([ci, cj, ck], axis=1)[cell_of_tri]  # [F, 3]
    base = cell[:, None, :] + base_off[tri_edges]  # [F, 3, 3]
    node = np.ravel_multi_index((base[..., 0], base[..., 1], base[..., 2]), V.shape)
    gid = node * 3 + axis[tri_edges]
    uniq, faces = np.unique(gid.reshape(-1), return_inverse=True)
    faces = faces.reshape(-1, 3)

    n0 = uniq // 3
    ax = uniq % 3
    p0 = np.stack(np.unravel_index(n0, V.shape), axis=1)
    p1 = p0.copy()
    p1[np.arange(len(p1)), ax] += 1
    v0 = V[p0[:, 0], p0[:, 1], p0[:, 2]]
    v1 = V[p1[:, 0], p1[:, 1], p1[:, 2]]
    frac = (threshold - v0) / (v1 - v0)
    idx = p0 + frac[:, None] * (p1 - p0)
    verts = grid.lo + idx * grid.spacing
    return ColoredMesh(verts, faces.astype(np.int64))


def color_vertices(mesh: ColoredMesh, model, cond, batch_size: int = 4096, pyramid=None) -> ColoredMesh:
    """Color every vertex by querying the field at its position."""
    if mesh.n_vertices == 0:
        return replace(mesh, colors=np.zeros((0, 3)))
    colors = np.empty((mesh.n_vertices, 3))
    with T.no_grad():
        if pyramid is None:
            pyramid = model.encode(cond)
        for start in range(0, mesh.n_vertices, batch_size):
            c, _ = model.query(cond, pyramid, mesh.vertices[start : start + batch_size])
            colors[start : start + batch_size] = c.data
    return replace(mesh, colors=np.clip(colors, 0.0, 1.0))


def scene_bbox(cameras, t_near: float, t_far: float):
    """Cube around the point closest to all optical axes, half-width ``(t_far - t_near) / 2``."""
    A = np.zeros((3, 3))
    rhs = np.zeros(3)
    for cam in cameras:
        d = cam.axis
        P = np.eye(3) - np.outer(d, d)
        A += P
        rhs += P @ cam.center
    center = np.linalg.lstsq(A, rhs, rcond=None)[0]
    half = 0.5 * (t_far - t_near)
    return center - half, center + half


def extract_mesh(model, cond, bbox, resolution: int = 64, threshold=None, threshold_ratio: float = 0.5,
                 batch_size: int = 4096):
    """Grid evaluation, marching cubes and coloring in one call.

    Returns ``(mesh, grid, threshold)``.
    """
    with T.no_grad():
        pyramid = model.encode(cond)
    grid = evaluate_grid(model, cond, bbox, resolution, batch_size, pyramid=pyramid)
    level = default_threshold(grid, threshold_ratio) if threshold is None else float(threshold)
    mesh = marching_cubes(grid, level)
    return color_vertices(mesh, model, cond, batch_size, pyramid=pyramid), grid, level


# ---------------------------------------------------------------------------
# PLY
# ---------------------------------------------------------------------------
#
#   ply
#   format ascii 1.0
#   element vertex <V>
#   property float x
#   property float y
#   property float z
#   property uchar red
#   property uchar green
#   property uchar blue
#   element face <F>
#   property list uchar int vertex_indices
#   end_header
#   <V lines "x y z r g b">
#   <F lines "3 i j k">


def write_ply(path, mesh: ColoredMesh) -> None:
    colors = mesh.colors if mesh.colors is not None else np.ones((mesh.n_vertices, 3))
    rgb = np.round(np.clip(colors, 0, 1) * 255).astype(np.uint8)
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {mesh.n_vertices}",
        "property float x",
        "property float y",
        "property float z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        f"element face {mesh.n_faces}",
        "property list uchar int vertex_indices",
        "end_header",
    ]
    lines += [f"{x:.6g} {y:.6g} {z:.6g} {r} {g} {b}" for (x, y, z), (r, g, b) in zip(mesh.vertices, rgb)]
    lines += [f"3 {i} {j} {k}" for i, j, k in mesh.faces]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n")


def read_ply(path) -> ColoredMesh:
    """Reader for the ASCII layout written by ``write_ply``."""
    text = Path(path).read_text().splitlines()
    if not text or text[0] != "ply":
        raise MeshError(f"{path}: not a PLY file")
    n_v = n_f = 0
    end = 0
    for i, line in enumerate(text):
        parts = line.split()
        if parts[:2] == ["element", "vertex"]:
            n_v = int(parts[2])
        elif parts[:2] == ["element", "face"]:
            n_f = int(parts[2])
        elif line == "end_header":
            end = i + 1
            break
    body = text[end:]
    vdata = np.array([ln.split() for ln in body[:n_v]], dtype=np.float64).reshape(n_v, 6)
    fdata = np.array([ln.split() for ln in body[n_v : n_v + n_f]], dtype=np.int64).reshape(n_f, 4)
    return ColoredMesh(vdata[:, :3], fdata[:, 1:], vdata[:, 3:] / 255.0)
