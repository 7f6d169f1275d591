"""Procedural multi-view datasets of Lambertian primitives and scene I/O.

On-disk layout of a generated scene::

    <root>/manifest.json        views, splits, bounds (schema below)
    <root>/scene.json           the generating spec: primitives, light, ring
    <root>/images/<name>.png    8-bit RGB
    <root>/cameras/<name>.txt   camera text format (see ``srf.geometry``)

``manifest.json``::

    {"format": "srf-scene", "version": 1,
     "t_near": float, "t_far": float,
     "sdf": "scene.json" | null,
     "views": [{"name": str, "image": rel-path, "camera": rel-path,
                "split": "reference" | "target" | "val" | "test"}, ...]}

Splits are disjoint. ``reference`` views condition the model; ``target``
views supervise training; ``val`` and ``test`` are held out.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .geometry import Camera, CameraError, image_rays, load_camera, look_at, save_camera

MANIFEST_FORMAT = "srf-scene"
MANIFEST_VERSION = 1
SPLITS = ("reference", "target", "val", "test")


class SceneError(ValueError):
    pass


@dataclass
class Sphere:
    center: tuple
    radius: float
    albedo: tuple

    kind = "sphere"

    def bounding_radius(self) -> float:
        return float(self.radius)

    def sdf(self, p: np.ndarray) -> np.ndarray:
        return np.linalg.norm(p - np.asarray(self.center), axis=-1) - self.radius

    def intersect(self, o: np.ndarray, d: np.ndarray):
        oc = o - np.asarray(self.center)
        b = np.einsum("ij,ij->i", oc, d)
        c = np.einsum("ij,ij->i", oc, oc) - self.radius**2
        disc = b * b - c
        t = np.full(len(o), np.inf)
        ok = disc >= 0
        sq = np.sqrt(np.where(ok, disc, 0.0))
        t0 = -b - sq
        t1 = -b + sq
        t = np.where(ok & (t0 > 1e-9), t0, np.where(ok & (t1 > 1e-9), t1, np.inf))
        hit = o + np.where(np.isfinite(t), t, 0.0)[:, None] * d
        n = (hit - np.asarray(self.center)) / self.radius
        return t, n


@dataclass
class Box:
    center: tuple
    size: tuple  # full edge lengths along x, y, z
    albedo: tuple

    kind = "box"

    def bounding_radius(self) -> float:
        return float(np.linalg.norm(np.asarray(self.size)) / 2)

    def sdf(self, p: np.ndarray) -> np.ndarray:
        q = np.abs(p - np.asarray(self.center)) - np.asarray(self.size) / 2
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(q.max(axis=-1), 0.0)
        return outside + inside

    def intersect(self, o: np.ndarray, d: np.ndarray):
        lo = np.asarray(self.center) - np.asarray(self.size) / 2
        hi = np.asarray(self.center) + np.asarray(self.size) / 2
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            ta = (lo - o) * inv
            tb = (hi - o) * inv
        tmin = np.nanmax(np.minimum(ta, tb), axis=1)
        tmax = np.nanmin(np.maximum(ta, tb), axis=1)
        ok = (tmax >= tmin) & (tmax > 1e-9)
        t = np.where(ok, np.where(tmin > 1e-9, tmin, tmax), np.inf)
        hit = o + np.where(np.isfinite(t), t, 0.0)[:, None] * d
        # normal from the face whose slab boundary was hit
        rel = (hit - np.asarray(self.center)) / (np.asarray(self.size) / 2)
        axis = np.argmax(np.abs(rel), axis=1)
        n = np.zeros_like(hit)
        n[np.arange(len(hit)), axis] = np.sign(rel[np.arange(len(hit)), axis])
        return t, n


def _primitive_from_dict(d: dict):
    kind = d.get("kind")
    if kind == "sphere":
        return Sphere(tuple(d["center"]), float(d["radius"]), tuple(d["albedo"]))
    if kind == "box":
        return Box(tuple(d["center"]), tuple(d["size"]), tuple(d["albedo"]))
    raise SceneError(f"unknown primitive kind {kind!r}")


def _primitive_to_dict(p) -> dict:
    d = {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(p).items()}
    d["kind"] = p.kind
    return d


@dataclass
class SyntheticScene:
    primitives: list = field(default_factory=list)
    light: tuple = (0.4, -0.3, 0.866)  # unit vector towards the light
    ambient: float = 0.25
    n_reference: int = 10
    n_target: int = 16
    n_val: int = 2
    n_test: int = 4
    ring_radius: float = 3.0
    elevation: tuple = (15.0, 45.0)  # degrees
    look_at: tuple = (0.0, 0.0, 0.0)
    focal: float = 80.0
    image_size: int = 64
    t_near: Optional[float] = None
    t_far: Optional[float] = None
    seed: int = 0

    @property
    def n_views(self) -> int:
        return self.n_reference + self.n_target + self.n_val + self.n_test

    def to_dict(self) -> dict:
        d = asdict(self)
        d["primitives"] = [_primitive_to_dict(p) for p in self.primitives]
        return _jsonable(d)

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticScene":
        d = dict(d)
        prims = [_primitive_from_dict(p) for p in d.pop("primitives", [])]
        for key in ("light", "elevation", "look_at"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(primitives=prims, **d)


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.generic):
        return x.item()
    return x


def scene_sdf(primitives, points: np.ndarray) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64)
    if not primitives:
        return np.full(points.shape[:-1], np.inf)
    return np.min([p.sdf(points) for p in primitives], axis=0)


def ring_cameras(spec: SyntheticScene) -> list:
    """Cameras spread around ``look_at`` with a golden-ratio elevation sweep."""
    n = spec.n_views
    rng = np.random.default_rng(spec.seed)
    offset = rng.uniform(0.0, 2 * np.pi / max(n, 1))
    lo, hi = np.radians(spec.elevation[0]), np.radians(spec.elevation[1])
    golden = (np.sqrt(5.0) - 1.0) / 2.0
    c = (spec.image_size - 1) / 2.0
    target = np.asarray(spec.look_at, dtype=np.float64)
    cams = []
    for k in range(n):
        az = offset + 2 * np.pi * k / n
        el = lo + (hi - lo) * ((k * golden) % 1.0)
        eye = target + spec.ring_radius * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
        R, t = look_at(eye, target)
        cams.append(Camera(spec.focal, spec.focal, c, c, spec.image_size, spec.image_size, R, t))
    return cams


def assign_splits(spec: SyntheticScene) -> list:
    """Reference views evenly spread over the ring; the rest interleaved."""
    n = spec.n_views
    ref = set(np.round(np.linspace(0, n, spec.n_reference, endpoint=False)).astype(int).tolist())
    rest = [k for k in range(n) if k not in ref]
    splits = ["reference" if k in ref else None for k in range(n)]
    held = spec.n_val + spec.n_test
    if held:
        picks = np.round(np.linspace(0, len(rest), held, endpoint=False)).astype(int)
        for j, p in enumerate(picks):
            splits[rest[p]] = "val" if j % 2 == 0 and j // 2 < spec.n_val else "test"
        # rebalance if interleaving handed out too many of one kind
        vals = [k for k, s in enumerate(splits) if s == "val"]
        tests = [k for k, s in enumerate(splits) if s == "test"]
        while len(vals) > spec.n_val:
            k = vals.pop()
            splits[k] = "test"
            tests.append(k)
        while len(tests) > spec.n_test:
            k = tests.pop()
            splits[k] = "val"
            vals.append(k)
    return ["target" if s is None else s for s in splits]


def auto_bounds(spec: SyntheticScene) -> tuple:
    target = np.asarray(spec.look_at, dtype=np.float64)
    reach = 0.0
    for p in spec.primitives:
        reach = max(reach, np.linalg.norm(np.asarray(p.center) - target) + p.bounding_radius())
    reach = max(reach, 0.25) * 1.1
    return max(spec.ring_radius - reach, 1e-3), spec.ring_radius + reach


def check_ring(spec: SyntheticScene, cameras, t_near: float, t_far: float) -> None:
    for k, cam in enumerate(cameras):
        eye = cam.center
        half_fov = np.arctan(((spec.image_size - 1) / 2.0) / spec.focal)
        for p in spec.primitives:
            c = np.asarray(p.center, dtype=np.float64)
            r = p.bounding_radius()
            dist = np.linalg.norm(c - eye)
            if dist - r < t_near or dist + r > t_far:
                raise SceneError(
                    f"primitive at {tuple(c)} leaves the [t_near, t_far] = [{t_near}, {t_far}] shell of camera {k}"
                )
            angle = np.arccos(np.clip(np.dot((c - eye) / dist, cam.axis), -1.0, 1.0))
            if r >= dist or angle + np.arcsin(r / dist) > half_fov:
                raise SceneError(f"unsatisfiable camera ring: primitive at {tuple(c)} outside the frustum of camera {k}")


def render_view(spec: SyntheticScene, camera: Camera) -> np.ndarray:
    """Ray-traced Lambertian image ``[H, W, 3]`` in ``[0, 1]``; background black."""
    o, d = image_rays(camera)
    best = np.full(len(o), np.inf)
    color = np.zeros((len(o), 3))
    light = np.asarray(spec.light, dtype=np.float64)
    light = light / np.linalg.norm(light)
    for p in spec.primitives:
        t, n = p.intersect(o, d)
        closer = t < best
        if not closer.any():
            continue
        best = np.where(closer, t, best)
        shade = spec.ambient + (1.0 - spec.ambient) * np.clip(n @ light, 0.0, None)
        color[closer] = np.asarray(p.albedo)[None] * shade[closer, None]
    return np.clip(color, 0.0, 1.0).reshape(camera.height, camera.width, 3)


def save_png(path, image_hwc: np.ndarray) -> None:
    arr = image_hwc
    if arr.dtype != np.uint8:
        arr = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG", optimize=False)


def load_png(path) -> np.ndarray:
    """8-bit RGB PNG -> ``[3, H, W]`` float64 in ``[0, 1]``."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return arr.transpose(2, 0, 1)


def generate_scene(spec: SyntheticScene, out_dir) -> Path:
    """Write images, cameras and manifest for ``spec``; returns the manifest path."""
    out = Path(out_dir)
    cams = ring_cameras(spec)
    if spec.t_near is None or spec.t_far is None:
        t_near, t_far = auto_bounds(spec)
    else:
        t_near, t_far = float(spec.t_near), float(spec.t_far)
    if not 0 < t_near < t_far:
        raise SceneError(f"invalid bounds t_near={t_near}, t_far={t_far}")
    check_ring(spec, cams, t_near, t_far)
    splits = assign_splits(spec)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "cameras").mkdir(parents=True, exist_ok=True)
    views = []
    for k, (cam, split) in enumerate(zip(cams, splits)):
        name = f"view_{k:03d}"
        save_png(out / "images" / f"{name}.png", render_view(spec, cam))
        save_camera(cam, out / "cameras" / f"{name}.txt")
        views.append({"name": name, "image": f"images/{name}.png", "camera": f"cameras/{name}.txt", "split": split})
    (out / "scene.json").write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n")
    manifest = {
        "format": MANIFEST_FORMAT,
        "version": MANIFEST_VERSION,
        "t_near": t_near,
        "t_far": t_far,
        "sdf": "scene.json",
        "views": views,
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


# ---------------------------------------------------------------------------
# loading
# ---------------------------------------------------------------------------


@dataclass
class View:
    name: str
    camera: Camera
    split: str
    image_path: Optional[Path] = None
    pixels: Optional[np.ndarray] = None


class Scene:
    """Loaded scene: views with cameras, lazily read images, depth bounds.

    Every image read is recorded in ``access_log`` so callers can audit which
    views a procedure consumed.
    """

    def __init__(self, views, t_near: float, t_far: float, root=None, primitives=None, name: str = ""):
        if not 0 < t_near < t_far:
            raise SceneError(f"invalid bounds t_near={t_near}, t_far={t_far}")
        self.views = list(views)
        self.t_near = float(t_near)
        self.t_far = float(t_far)
        self.root = root
        self.primitives = primitives
        self.name = name or (Path(root).name if root else "scene")
        self.access_log: list = []
        self._cache: dict = {}
        if len(self.indices("reference")) < 2:
            raise SceneError(f"scene {self.name}: at least 2 reference views are required")

    def indices(self, split: str) -> list:
        return [i for i, v in enumerate(self.views) if v.split == split]

    def image(self, i: int) -> np.ndarray:
        self.access_log.append(i)
        if i not in self._cache:
            view = self.views[i]
            if view.pixels is not None:
                self._cache[i] = np.asarray(view.pixels, dtype=np.float64)
            else:
                try:
                    self._cache[i] = load_png(view.image_path)
                except (OSError, ValueError) as exc:
                    raise SceneError(f"cannot read image {view.image_path}: {exc}") from None
            cam = view.camera
            if self._cache[i].shape != (3, cam.height, cam.width):
                raise SceneError(f"image {view.name} has shape {self._cache[i].shape}, camera says {cam.width}x{cam.height}")
        return self._cache[i]

    def conditioning(self, indices=None):
        from .model import Conditioning

        indices = self.indices("reference") if indices is None else list(indices)
        return Conditioning.from_views([self.image(i) for i in indices], [self.views[i].camera for i in indices])

    def sdf(self, points):
        if self.primitives is None:
            raise SceneError(f"scene {self.name} has no ground-truth geometry")
        return scene_sdf(self.primitives, points)


def load_scene(path) -> Scene:
    path = Path(path)
    manifest_path = path / "manifest.json" if path.is_dir() else path
    if not manifest_path.is_file():
        raise SceneError(f"manifest not found: {manifest_path}")
    root = manifest_path.parent
    try:
        data = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise SceneError(f"corrupt manifest {manifest_path}: {exc}") from None
    if data.get("format") != MANIFEST_FORMAT:
        raise SceneError(f"{manifest_path}: not an {MANIFEST_FORMAT} manifest")
    if data.get("version") != MANIFEST_VERSION:
        raise SceneError(f"{manifest_path}: unsupported manifest version {data.get('version')}")
    views = []
    for entry in data.get("views", []):
        split = entry.get("split")
        if split not in SPLITS:
            raise SceneError(f"{manifest_path}: view {entry.get('name')} has unknown split {split!r}")
        img = root / entry["image"]
        if not img.is_file():
            raise SceneError(f"missing image file {img}")
        cam_path = root / entry["camera"]
        if not cam_path.is_file():
            raise SceneError(f"missing camera file {cam_path}")
        try:
            cam = load_camera(cam_path)
        except CameraError as exc:
            raise SceneError(f"invalid camera: {exc}") from None
        views.append(View(entry["name"], cam, split, img))
    primitives = None
    if data.get("sdf"):
        sdf_path = root / data["sdf"]
        if sdf_path.is_file():
            primitives = SyntheticScene.from_dict(json.loads(sdf_path.read_text())).primitives
    return Scene(views, data["t_near"], data["t_far"], root=root, primitives=primitives, name=root.name)


def load_dtu_scene(path, n_reference: int = 10) -> Scene:
    """Adapter for an MVSNet-style DTU folder (``images/*.png|jpg`` + ``cams/*_cam.txt``).

    Camera files hold ``extrinsic`` (4x4 world-to-camera) and ``intrinsic``
    (3x3) blocks followed by a ``depth_min depth_interval [n depth_max]`` line.
    """
    root = Path(path)
    img_dir, cam_dir = root / "images", root / "cams"
    if not img_dir.is_dir() or not cam_dir.is_dir():
        raise SceneError(f"no DTU-style layout (images/ + cams/) at {root}")
    cam_files = sorted(cam_dir.glob("*_cam.txt"))
    if not cam_files:
        raise SceneError(f"no *_cam.txt files in {cam_dir}")
    views, near, far = [], np.inf, 0.0
    for k, cf in enumerate(cam_files):
        stem = cf.name[: -len("_cam.txt")]
        img = next((p for p in (img_dir / f"{stem}.png", img_dir / f"{stem}.jpg") if p.is_file()), None)
        if img is None:
            raise SceneError(f"no image for camera {cf.name}")
        tokens = cf.read_text().split()
        try:
            e = tokens.index("extrinsic")
            i = tokens.index("intrinsic")
            ext = np.array(tokens[e + 1 : e + 17], dtype=np.float64).reshape(4, 4)
            intr = np.array(tokens[i + 1 : i + 10], dtype=np.float64).reshape(3, 3)
            depth = [float(x) for x in tokens[i + 10 :]]
        except (ValueError, IndexError) as exc:
            raise SceneError(f"cannot parse DTU camera {cf}: {exc}") from None
        with Image.open(img) as im:
            w, h = im.size
        try:
            cam = Camera(intr[0, 0], intr[1, 1], intr[0, 2], intr[1, 2], w, h, ext[:3, :3], ext[:3, 3])
        except CameraError as exc:
            raise SceneError(f"invalid DTU camera {cf}: {exc}") from None
        if depth:
            d_min = depth[0]
            d_max = depth[3] if len(depth) >= 4 else depth[0] + depth[1] * 192
            near, far = min(near, d_min), max(far, d_max)
        views.append(View(stem, cam, "reference" if k < n_reference else "target", img))
    if not np.isfinite(near) or far <= near:
        raise SceneError(f"DTU cameras in {cam_dir} carry no depth range")
    return Scene(views, near, far, root=root, name=root.name)


# ---------------------------------------------------------------------------
# presets and spec files
# ---------------------------------------------------------------------------


def preset(name: str, seed: int = 0) -> SyntheticScene:
    if name == "sphere":
        return SyntheticScene(primitives=[Sphere((0.0, 0.0, 0.0), 0.6, (0.9, 0.15, 0.1))], seed=seed)
    if name == "two_primitives":
        return SyntheticScene(
            primitives=[
                Sphere((0.25, -0.3, 0.1), 0.45, (0.9, 0.2, 0.15)),
                Box((-0.35, 0.3, -0.15), (0.55, 0.55, 0.55), (0.15, 0.45, 0.9)),
            ],
            seed=seed,
        )
    if name == "empty":
        return SyntheticScene(primitives=[], seed=seed)
    if name.startswith("random"):
        return random_scene(seed)
    raise SceneError(f"unknown scene preset {name!r}")


def random_scene(seed: int, n_primitives: int = 2) -> SyntheticScene:
    """Two well-separated primitives of random shape, size and albedo."""
    rng = np.random.default_rng(seed)
    prims = []
    base = rng.uniform(0, 2 * np.pi)
    for k in range(n_primitives):
        ang = base + 2 * np.pi * k / n_primitives
        center = (0.35 * np.cos(ang), 0.35 * np.sin(ang), rng.uniform(-0.15, 0.15))
        albedo = tuple(float(a) for a in rng.uniform(0.1, 0.95, 3))
        if rng.random() < 0.5:
            prims.append(Sphere(tuple(float(c) for c in center), float(rng.uniform(0.3, 0.45)), albedo))
        else:
            size = tuple(float(s) for s in rng.uniform(0.4, 0.6, 3))
            prims.append(Box(tuple(float(c) for c in center), size, albedo))
    return SyntheticScene(primitives=prims, seed=seed)


def load_spec(path_or_name: str, seed: Optional[int] = None) -> SyntheticScene:
    """Scene spec from a preset name or a ``.toy`` file.

    A ``.toy`` file is INI text: a ``[scene]`` section with any
    ``SyntheticScene`` field (tuples comma-separated) and one section per
    primitive, ``[sphere ...]`` with center/radius/albedo or ``[box ...]``
    with center/size/albedo.
    """
    import configparser

    p = Path(path_or_name)
    if not p.is_file():
        spec = preset(path_or_name.removesuffix(".toy"), seed or 0)
        if seed is not None:
            spec.seed = seed
        return spec
    parser = configparser.ConfigParser()
    parser.read_string(p.read_text())
    kwargs = {}
    base = SyntheticScene()
    for key, value in (parser["scene"].items() if parser.has_section("scene") else []):
        if not hasattr(base, key) or key == "primitives":
            raise SceneError(f"{p}: unknown scene key {key!r}")
        current = getattr(base, key)
        if isinstance(current, tuple):
            kwargs[key] = tuple(float(x) for x in value.split(","))
        elif key in ("t_near", "t_far"):
            kwargs[key] = None if value.lower() == "none" else float(value)
        elif isinstance(current, int):
            kwargs[key] = int(value)
        else:
            kwargs[key] = float(value)
    prims = []
    for section in parser.sections():
        kind = section.split()[0]
        if section == "scene":
            continue
        vals = parser[section]
        vec = lambda k: tuple(float(x) for x in vals[k].split(","))  # noqa: E731
        try:
            if kind == "sphere":
                prims.append(Sphere(vec("center"), float(vals["radius"]), vec("albedo")))
            elif kind == "box":
                prims.append(Box(vec("center"), vec("size"), vec("albedo")))
            else:
                raise SceneError(f"{p}: unknown section [{section}]")
        except KeyError as exc:
            raise SceneError(f"{p}: section [{section}] lacks {exc}") from None
    if seed is not None:
        kwargs["seed"] = seed
    return SyntheticScene(primitives=prims, **kwargs)
