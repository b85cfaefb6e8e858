"""Procedural multi-view dataset: scenes of simple solids rendered from
cameras on a sphere around the origin.

Scenes are a deterministic function of an integer seed; the renderer is a
pure-numpy raycaster (perspective pinhole, 45 degree vertical FOV, one fixed
directional light, white background), so identical inputs give bit-identical
images. Each ordered pair of views of an object yields a training triplet
(reference image, relative camera pose, target image + alpha).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .images import load_rgba_png, save_rgba_png
from .rng import np_rng

RENDERER_VERSION = "raycast-1"

VALID_RESOLUTIONS = (16, 32, 64)

FOV_Y_RAD = np.deg2rad(45.0)
BG_COLOR = np.array([1.0, 1.0, 1.0])
LIGHT_DIR = np.array([0.35, 0.25, 0.9]) / np.linalg.norm([0.35, 0.25, 0.9])
AMBIENT = 0.3

# View sampling ranges for dataset building (objects stay fully in frame).
ELEV_MIN_RAD = np.deg2rad(-10.0)
ELEV_MAX_RAD = np.deg2rad(60.0)
BASE_RADIUS = 2.2
RADIUS_JITTER = 0.2


class DegeneratePoseError(ValueError):
    """Camera position intersects scene geometry."""


def wrap_angle(theta: float) -> float:
    """Wrap an angle into [-pi, pi)."""
    return float(np.mod(theta + np.pi, 2.0 * np.pi) - np.pi)


@dataclass(frozen=True)
class CameraPose:
    """Camera on a sphere looking at the origin, world up along +z.

    azimuth is wrapped into [-pi, pi); elevation must lie in [-pi/2, pi/2];
    radius is strictly positive.
    """

    azimuth: float
    elevation: float
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "azimuth", wrap_angle(self.azimuth))
        if not -np.pi / 2 <= self.elevation <= np.pi / 2:
            raise ValueError(f"elevation {self.elevation} outside [-pi/2, pi/2]")
        if not self.radius > 0:
            raise ValueError(f"radius must be positive, got {self.radius}")

    def position(self) -> np.ndarray:
        ce = np.cos(self.elevation)
        return self.radius * np.array(
            [ce * np.cos(self.azimuth), ce * np.sin(self.azimuth), np.sin(self.elevation)]
        )

    def rotation(self) -> np.ndarray:
        """Camera-to-world rotation, columns = (right, up, forward).

        Forward points from the camera to the origin. At the poles the
        right vector is the continuous limit of the generic formula, which
        keeps pose -> rotation bijective on the full elevation range.
        """
        eye = self.position()
        forward = -eye / np.linalg.norm(eye)
        world_up = np.array([0.0, 0.0, 1.0])
        right = np.cross(forward, world_up)
        n = np.linalg.norm(right)
        if n < 1e-12:
            right = np.array([-np.sin(self.azimuth), np.cos(self.azimuth), 0.0])
        else:
            right = right / n
        up = np.cross(right, forward)
        return np.stack([right, up, forward], axis=1)

    def translation(self) -> np.ndarray:
        return self.position()


@dataclass(frozen=True)
class RelativePose:
    """4-component spherical condition vector between two camera poses."""

    d_elevation: float
    d_azimuth_sin: float
    d_azimuth_cos: float
    d_radius: float

    def __post_init__(self):
        s2 = self.d_azimuth_sin**2 + self.d_azimuth_cos**2
        if abs(s2 - 1.0) > 1e-6:
            raise ValueError(f"(sin, cos) not on the unit circle: norm^2 = {s2}")

    def as_vector(self) -> np.ndarray:
        return np.array(
            [self.d_elevation, self.d_azimuth_sin, self.d_azimuth_cos, self.d_radius]
        )


def relative_pose(ref: CameraPose, tg: CameraPose) -> RelativePose:
    d_az = tg.azimuth - ref.azimuth
    return RelativePose(
        d_elevation=tg.elevation - ref.elevation,
        d_azimuth_sin=float(np.sin(d_az)),
        d_azimuth_cos=float(np.cos(d_az)),
        d_radius=tg.radius - ref.radius,
    )


def recompose(ref: CameraPose, rel: RelativePose) -> CameraPose:
    """Apply a relative pose to a reference pose; inverse of relative_pose."""
    return CameraPose(
        azimuth=ref.azimuth + float(np.arctan2(rel.d_azimuth_sin, rel.d_azimuth_cos)),
        elevation=ref.elevation + rel.d_elevation,
        radius=ref.radius + rel.d_radius,
    )


@dataclass(frozen=True)
class Primitive:
    kind: str  # "sphere" | "box"
    center: tuple[float, float, float]
    size: tuple[float, ...]  # (radius,) for spheres, half-extents for boxes
    rgb: tuple[float, float, float]


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    primitives: tuple[Primitive, ...]


def make_scene(seed: int) -> SceneSpec:
    """Deterministic scene of 2-5 solids, all inside the unit ball."""
    if seed < 0:
        raise ValueError("seed must be non-negative")
    rng = np_rng(seed, "scene")
    count = int(rng.integers(2, 6))
    prims = []
    for _ in range(count):
        kind = "sphere" if rng.random() < 0.5 else "box"
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        center = direction * rng.uniform(0.0, 0.55)
        if kind == "sphere":
            radius = rng.uniform(0.12, 0.38)
            # shrink until the solid fits inside the unit ball
            radius = min(radius, 0.98 - np.linalg.norm(center))
            size = (float(radius),)
        else:
            half = rng.uniform(0.10, 0.32, size=3)
            budget = 0.98 - np.linalg.norm(center)
            if np.linalg.norm(half) > budget:
                half = half * (budget / np.linalg.norm(half))
            size = tuple(float(h) for h in half)
        rgb = tuple(float(c) for c in rng.uniform(0.05, 0.9, size=3))
        prims.append(Primitive(kind=kind, center=tuple(float(c) for c in center), size=size, rgb=rgb))
    return SceneSpec(seed=seed, primitives=tuple(prims))


def _camera_inside(scene: SceneSpec, eye: np.ndarray) -> bool:
    for p in scene.primitives:
        c = np.asarray(p.center)
        if p.kind == "sphere":
            if np.linalg.norm(eye - c) <= p.size[0]:
                return True
        else:
            if np.all(np.abs(eye - c) <= np.asarray(p.size)):
                return True
    return False


def _intersect_sphere(origins, dirs, center, radius):
    oc = origins - center
    b = np.einsum("ij,ij->i", oc, dirs)
    c = np.einsum("ij,ij->i", oc, oc) - radius**2
    disc = b * b - c
    hit = disc >= 0.0
    sq = np.sqrt(np.maximum(disc, 0.0))
    t = -b - sq
    t = np.where(t > 1e-9, t, -b + sq)
    return np.where(hit & (t > 1e-9), t, np.inf)


def _intersect_box(origins, dirs, center, half):
    # slab method for axis-aligned boxes
    inv = 1.0 / np.where(np.abs(dirs) < 1e-15, np.copysign(1e-15, dirs), dirs)
    t1 = (center - half - origins) * inv
    t2 = (center + half - origins) * inv
    tmin = np.minimum(t1, t2).max(axis=1)
    tmax = np.maximum(t1, t2).min(axis=1)
    hit = (tmax >= tmin) & (tmax > 1e-9)
    t = np.where(tmin > 1e-9, tmin, tmax)
    return np.where(hit & (t > 1e-9), t, np.inf)


def _box_normals(pts, center, half):
    rel = (pts - center) / half
    axis = np.argmax(np.abs(rel), axis=1)
    normals = np.zeros_like(pts)
    rows = np.arange(len(pts))
    normals[rows, axis] = np.sign(rel[rows, axis])
    return normals


def render(scene: SceneSpec, pose: CameraPose, resolution: int) -> tuple[np.ndarray, np.ndarray]:
    """Raycast the scene. Returns (HxWx3 RGB in [0,1], HxW binary alpha)."""
    if resolution not in VALID_RESOLUTIONS:
        raise ValueError(f"resolution must be one of {VALID_RESOLUTIONS}, got {resolution}")
    eye = pose.position()
    if _camera_inside(scene, eye):
        raise DegeneratePoseError(f"camera at radius {pose.radius} is inside scene geometry")

    rot = pose.rotation()
    right, up, forward = rot[:, 0], rot[:, 1], rot[:, 2]
    half_h = np.tan(FOV_Y_RAD / 2.0)

    idx = (np.arange(resolution) + 0.5) / resolution
    u = idx * 2.0 - 1.0  # x, left -> right
    v = 1.0 - idx * 2.0  # y, top -> bottom
    uu, vv = np.meshgrid(u, v)
    dirs = (
        forward[None, :]
        + (uu.ravel()[:, None] * half_h) * right[None, :]
        + (vv.ravel()[:, None] * half_h) * up[None, :]
    )
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    origins = np.broadcast_to(eye, dirs.shape)

    n_rays = dirs.shape[0]
    best_t = np.full(n_rays, np.inf)
    color = np.tile(BG_COLOR, (n_rays, 1))
    alpha = np.zeros(n_rays)

    for prim in scene.primitives:
        center = np.asarray(prim.center)
        if prim.kind == "sphere":
            t = _intersect_sphere(origins, dirs, center, prim.size[0])
        else:
            t = _intersect_box(origins, dirs, center, np.asarray(prim.size))
        closer = t < best_t
        if not closer.any():
            continue
        pts = origins[closer] + t[closer, None] * dirs[closer]
        if prim.kind == "sphere":
            n = (pts - center) / prim.size[0]
        else:
            n = _box_normals(pts, center, np.asarray(prim.size))
        n /= np.linalg.norm(n, axis=1, keepdims=True)
        lambert = np.maximum(n @ LIGHT_DIR, 0.0)
        shade = AMBIENT + (1.0 - AMBIENT) * lambert
        color[closer] = np.asarray(prim.rgb)[None, :] * shade[:, None]
        alpha[closer] = 1.0
        best_t = np.where(closer, t, best_t)

    shape = (resolution, resolution)
    return color.reshape(*shape, 3), alpha.reshape(shape)


@dataclass
class ViewRecord:
    azimuth: float
    elevation: float
    radius: float
    image_path: str

    def pose(self) -> CameraPose:
        return CameraPose(self.azimuth, self.elevation, self.radius)


@dataclass
class ObjectRecord:
    object_seed: int
    views: list[ViewRecord]


@dataclass
class DatasetManifest:
    seed: int
    version: str
    resolution: int
    objects: list[ObjectRecord] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "version": self.version,
            "resolution": self.resolution,
            "objects": [
                {
                    "object_seed": o.object_seed,
                    "views": [
                        {
                            "azimuth": v.azimuth,
                            "elevation": v.elevation,
                            "radius": v.radius,
                            "image_path": v.image_path,
                        }
                        for v in o.views
                    ],
                }
                for o in self.objects
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        return cls(
            seed=d["seed"],
            version=d["version"],
            resolution=d["resolution"],
            objects=[
                ObjectRecord(
                    object_seed=o["object_seed"],
                    views=[ViewRecord(**v) for v in o["views"]],
                )
                for o in d["objects"]
            ],
        )


def sample_view_pose(rng: np.random.Generator) -> CameraPose:
    """Draw a camera pose from the dataset view distribution."""
    return CameraPose(
        azimuth=rng.uniform(0.0, 2.0 * np.pi),
        elevation=rng.uniform(ELEV_MIN_RAD, ELEV_MAX_RAD),
        radius=BASE_RADIUS + rng.uniform(-RADIUS_JITTER, RADIUS_JITTER),
    )


def build_dataset(
    n_objects: int, n_views: int, resolution: int, seed: int, out_dir: str | Path
) -> DatasetManifest:
    """Render n_objects x n_views images plus masks and write manifest.json."""
    if n_objects < 1:
        raise ValueError("n_objects must be >= 1")
    if n_views < 2:
        raise ValueError("n_views must be >= 2")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create dataset directory {out!s}: {e}") from e

    manifest = DatasetManifest(seed=seed, version=RENDERER_VERSION, resolution=resolution)
    object_seeds = np_rng(seed, "objects").integers(0, 2**31, size=n_objects)
    for i in range(n_objects):
        object_seed = int(object_seeds[i])
        scene = make_scene(object_seed)
        pose_rng = np_rng(seed, "views", i)
        views = []
        for j in range(n_views):
            pose = sample_view_pose(pose_rng)
            rgb, alpha = render(scene, pose, resolution)
            rel_path = f"obj{i:03d}_view{j:03d}.png"
            save_rgba_png(out / rel_path, rgb, alpha)
            views.append(
                ViewRecord(
                    azimuth=pose.azimuth,
                    elevation=pose.elevation,
                    radius=pose.radius,
                    image_path=rel_path,
                )
            )
        manifest.objects.append(ObjectRecord(object_seed=object_seed, views=views))

    (out / "manifest.json").write_text(
        json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return manifest


def load_manifest(data_dir: str | Path) -> DatasetManifest:
    path = Path(data_dir) / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no manifest.json under {data_dir!s}")
    manifest = DatasetManifest.from_dict(json.loads(path.read_text(encoding="utf-8")))
    for o in manifest.objects:
        for v in o.views:
            if not (Path(data_dir) / v.image_path).exists():
                raise FileNotFoundError(f"manifest references missing file {v.image_path}")
    return manifest


def load_view(data_dir: str | Path, view: ViewRecord) -> tuple[np.ndarray, np.ndarray]:
    return load_rgba_png(Path(data_dir) / view.image_path)
