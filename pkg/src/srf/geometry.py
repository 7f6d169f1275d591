"""Pinhole cameras, rays and stratified depth sampling.

Conventions used throughout the package:

* Cameras follow the x-right, y-down, z-forward convention; extrinsics map
  world points to camera coordinates ``x_cam = R @ x_world + t``.
* Pixel coordinates are continuous and integer values address texel
  centres, so pixel ``(0, 0)`` covers ``[-0.5, 0.5]^2``.
* Ray parameters ``t`` measure Euclidean distance along a unit direction.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

ORTHONORMAL_TOL = 1e-6


class CameraError(ValueError):
    pass


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    R: np.ndarray  # world -> camera rotation
    t: np.ndarray  # world -> camera translation

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)
        self.validate()

    def validate(self) -> None:
        if not (self.fx > 0 and self.fy > 0):
            raise CameraError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise CameraError(
                f"principal point ({self.cx}, {self.cy}) outside image {self.width}x{self.height}"
            )
        err = np.abs(self.R @ self.R.T - np.eye(3)).max()
        if err > ORTHONORMAL_TOL:
            raise CameraError(f"rotation is not orthonormal (max error {err:.2e})")
        if abs(np.linalg.det(self.R) - 1.0) > ORTHONORMAL_TOL:
            raise CameraError("rotation must have determinant +1")

    @property
    def center(self) -> np.ndarray:
        """Camera centre in world coordinates."""
        return -self.R.T @ self.t

    @property
    def axis(self) -> np.ndarray:
        """Optical axis (camera +z) in world coordinates."""
        return self.R[2].copy()

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_near: float
    t_far: float

    def at(self, t) -> np.ndarray:
        return self.origin + np.multiply.outer(t, self.direction)


def look_at(eye, target, up=(0.0, 0.0, 1.0)):
    """World-to-camera ``(R, t)`` for a camera at ``eye`` looking at ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    n = np.linalg.norm(right)
    if n < 1e-9:
        raise CameraError("look_at: viewing direction parallel to up vector")
    right /= n
    down = np.cross(forward, right)
    R = np.stack([right, down, forward])
    return R, -R @ eye


def project(camera: Camera, point):
    """Project world point(s) ``[..., 3]`` to ``(u, v, depth)``.

    Points with ``depth <= 0`` are behind the camera; their ``u, v`` are
    returned as NaN so that downstream lookups see them as outside the image.
    """
    p = np.asarray(point, dtype=np.float64)
    cam = p @ camera.R.T + camera.t
    z = cam[..., 2]
    behind = z <= 0
    with np.errstate(divide="ignore", invalid="ignore"):
        u = camera.fx * cam[..., 0] / z + camera.cx
        v = camera.fy * cam[..., 1] / z + camera.cy
    u = np.where(behind, np.nan, u)
    v = np.where(behind, np.nan, v)
    if np.ndim(u) == 0:
        return float(u), float(v), float(z)
    return u, v, z


def project_many(R: np.ndarray, t: np.ndarray, intr: np.ndarray, points: np.ndarray):
    """Project ``points [P,3]`` into ``N`` stacked cameras.

    ``R [N,3,3]``, ``t [N,3]``, ``intr [N,4]`` holding ``fx, fy, cx, cy``.
    Returns ``u, v, depth`` each ``[P, N]``; behind-camera entries have NaN
    coordinates.
    """
    cam = np.einsum("nij,pj->pni", R, points) + t[None]
    z = cam[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intr[None, :, 0] * cam[..., 0] / z + intr[None, :, 2]
        v = intr[None, :, 1] * cam[..., 1] / z + intr[None, :, 3]
    behind = z <= 0
    u[behind] = np.nan
    v[behind] = np.nan
    return u, v, z


def pixel_to_ray(camera: Camera, u: float, v: float, t_near: float, t_far: float) -> Ray:
    if not t_near < t_far:
        raise ValueError(f"invalid ray bounds: t_near={t_near} must be < t_far={t_far}")
    origins, dirs = pixel_rays(camera, np.array([u], dtype=np.float64), np.array([v], dtype=np.float64))
    return Ray(origins[0], dirs[0], float(t_near), float(t_far))


def pixel_rays(camera: Camera, u: np.ndarray, v: np.ndarray):
    """Origins and unit directions ``[M, 3]`` for pixel coordinate arrays."""
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    d_cam = np.stack([(u - camera.cx) / camera.fx, (v - camera.cy) / camera.fy, np.ones_like(u)], axis=-1)
    d = d_cam @ camera.R  # R^T applied to row vectors
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    o = np.broadcast_to(camera.center, d.shape).copy()
    return o, d


def image_rays(camera: Camera):
    """Rays through all pixel centres, row-major ``[H*W, 3]``."""
    vv, uu = np.meshgrid(np.arange(camera.height), np.arange(camera.width), indexing="ij")
    return pixel_rays(camera, uu.reshape(-1), vv.reshape(-1))


def stratified_t(t_near, t_far, n_bins: int, n_rays: int, rng=None) -> tuple:
    """Depths ``[n_rays, n_bins]`` and segment lengths for stratified sampling.

    One depth is drawn uniformly inside each of ``n_bins`` equal bins of
    ``[t_near, t_far]``; with ``rng=None`` the bin centres are used. Segment
    length ``i`` is the gap to the next sample, and the last one extends to
    ``t_far``.
    """
    if n_bins < 1:
        raise ValueError(f"n_bins must be >= 1, got {n_bins}")
    t_near = np.broadcast_to(np.asarray(t_near, dtype=np.float64), (n_rays,))[:, None]
    t_far = np.broadcast_to(np.asarray(t_far, dtype=np.float64), (n_rays,))[:, None]
    step = (t_far - t_near) / n_bins
    if rng is None:
        jitter = np.full((n_rays, n_bins), 0.5)
    else:
        jitter = rng.random((n_rays, n_bins))
    t = t_near + (np.arange(n_bins)[None, :] + jitter) * step
    delta = np.empty_like(t)
    delta[:, :-1] = t[:, 1:] - t[:, :-1]
    delta[:, -1:] = t_far - t[:, -1:]
    return t, delta


def stratified_samples(ray: Ray, n_bins: int, rng=None) -> list:
    """``(point, t, delta)`` triples along one ray in increasing ``t``."""
    t, delta = stratified_t(ray.t_near, ray.t_far, n_bins, 1, rng)
    pts = ray.at(t[0])
    return [(pts[i], float(t[0, i]), float(delta[0, i])) for i in range(n_bins)]


# ---------------------------------------------------------------------------
# camera text format
# ---------------------------------------------------------------------------
#
#   fx fy cx cy W H
#   r00 r01 r02 t0
#   r10 r11 r12 t1
#   r20 r21 r22 t2
#
# A literal "|" between the rotation and translation columns is accepted.


def format_camera(camera: Camera) -> str:
    lines = [f"{camera.fx!r} {camera.fy!r} {camera.cx!r} {camera.cy!r} {camera.width} {camera.height}"]
    for i in range(3):
        r = " ".join(repr(float(x)) for x in camera.R[i])
        lines.append(f"{r} {float(camera.t[i])!r}")
    return "\n".join(lines) + "\n"


def parse_camera(text: str, source: str = "<camera>") -> Camera:
    rows = [ln.replace("|", " ").split() for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
    if len(rows) != 4 or len(rows[0]) != 6 or any(len(r) != 4 for r in rows[1:]):
        raise CameraError(f"{source}: expected 'fx fy cx cy W H' followed by three 'R | t' rows")
    try:
        fx, fy, cx, cy = (float(x) for x in rows[0][:4])
        width, height = int(rows[0][4]), int(rows[0][5])
        mat = np.array([[float(x) for x in r] for r in rows[1:]])
    except ValueError as exc:
        raise CameraError(f"{source}: {exc}") from None
    try:
        return Camera(fx, fy, cx, cy, width, height, mat[:, :3], mat[:, 3])
    except CameraError as exc:
        raise CameraError(f"{source}: {exc}") from None


def save_camera(camera: Camera, path) -> None:
    Path(path).write_text(format_camera(camera))


def load_camera(path) -> Camera:
    path = Path(path)
    return parse_camera(path.read_text(), source=str(path))


def stack_cameras(cameras) -> tuple:
    """``R [N,3,3]``, ``t [N,3]`` and ``[fx, fy, cx, cy]`` rows for ``project_many``."""
    R = np.stack([c.R for c in cameras])
    t = np.stack([c.t for c in cameras])
    intr = np.array([[c.fx, c.fy, c.cx, c.cy] for c in cameras], dtype=np.float64)
    return R, t, intr
