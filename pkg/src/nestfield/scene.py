"""3D Gaussian scene model, camera model, file I/O and the synthetic nested-scene generator."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

SCENE_MAGIC = b"NFSC"
SCENE_VERSION = 1
_HEADER = struct.Struct("<4sIQ")
_FLOATS_PER_GAUSSIAN = 14

MAX_SYNTHETIC_GAUSSIANS = 50_000
LEVELS = ("group", "object", "part")


class SceneFormatError(ValueError):
    """Base class for scene file decoding problems."""


class MalformedHeaderError(SceneFormatError):
    pass


class VersionMismatchError(SceneFormatError):
    pass


class TruncatedPayloadError(SceneFormatError):
    pass


def quat_to_rotmat(q) -> np.ndarray:
    """Rotation matrices for quaternions stored (w, x, y, z). Accepts (4,) or (N, 4)."""
    q = np.asarray(q, dtype=np.float64)
    single = q.ndim == 1
    q = np.atleast_2d(q)
    q = q / np.linalg.norm(q, axis=1, keepdims=True)
    w, x, y, z = q.T
    rot = np.empty((q.shape[0], 3, 3))
    rot[:, 0, 0] = 1 - 2 * (y * y + z * z)
    rot[:, 0, 1] = 2 * (x * y - w * z)
    rot[:, 0, 2] = 2 * (x * z + w * y)
    rot[:, 1, 0] = 2 * (x * y + w * z)
    rot[:, 1, 1] = 1 - 2 * (x * x + z * z)
    rot[:, 1, 2] = 2 * (y * z - w * x)
    rot[:, 2, 0] = 2 * (x * z - w * y)
    rot[:, 2, 1] = 2 * (y * z + w * x)
    rot[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return rot[0] if single else rot


@dataclass(frozen=True)
class Gaussian:
    mean: np.ndarray
    scale: np.ndarray
    rotation: np.ndarray  # (w, x, y, z)
    opacity: float
    color: np.ndarray

    def __post_init__(self):
        for name in ("mean", "scale", "rotation", "color"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.mean.shape != (3,) or self.scale.shape != (3,) or self.color.shape != (3,):
            raise ValueError("mean, scale and color must be 3-vectors")
        if self.rotation.shape != (4,):
            raise ValueError("rotation must be a (w, x, y, z) quaternion")
        if np.any(self.scale <= 0):
            raise ValueError(f"scale components must be positive, got {self.scale}")
        if abs(np.linalg.norm(self.rotation) - 1.0) > 1e-6:
            raise ValueError("rotation quaternion must have unit norm")
        if not 0.0 < self.opacity <= 1.0:
            raise ValueError(f"opacity must lie in (0, 1], got {self.opacity}")


def covariance_of(g: Gaussian) -> np.ndarray:
    """Sigma = R S S^T R^T."""
    rot = quat_to_rotmat(g.rotation)
    m = rot * g.scale[None, :]
    return m @ m.T


def covariances(scales: np.ndarray, quats: np.ndarray) -> np.ndarray:
    rot = quat_to_rotmat(quats)
    m = rot * scales[:, None, :]
    return m @ np.transpose(m, (0, 2, 1))


class GaussianScene:
    """Immutable, array-backed collection of Gaussians.

    Arrays are stored as float32 (the on-disk precision) so that a save/load
    round trip is the identity.
    """

    def __init__(self, means, scales, rotations, opacities, colors):
        means = np.ascontiguousarray(means, dtype=np.float32).reshape(-1, 3)
        n = means.shape[0]
        if n == 0:
            raise ValueError("a scene needs at least one Gaussian")
        scales = np.ascontiguousarray(scales, dtype=np.float32).reshape(n, 3)
        rotations = np.ascontiguousarray(rotations, dtype=np.float32).reshape(n, 4)
        opacities = np.ascontiguousarray(opacities, dtype=np.float32).reshape(n)
        colors = np.ascontiguousarray(colors, dtype=np.float32).reshape(n, 3)
        if np.any(scales <= 0):
            raise ValueError("scale components must be positive")
        if np.any(opacities <= 0) or np.any(opacities > 1):
            raise ValueError("opacities must lie in (0, 1]")
        norms = np.linalg.norm(rotations.astype(np.float64), axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-4):
            raise ValueError("rotation quaternions deviate from unit norm by more than 1e-4")
        for arr in (means, scales, rotations, opacities, colors):
            arr.setflags(write=False)
        self.means = means
        self.scales = scales
        self.rotations = rotations
        self.opacities = opacities
        self.colors = colors

    def __len__(self) -> int:
        return self.means.shape[0]

    def __getitem__(self, i: int) -> Gaussian:
        rot = self.rotations[i].astype(np.float64)
        return Gaussian(
            mean=self.means[i],
            scale=self.scales[i],
            rotation=rot / np.linalg.norm(rot),
            opacity=float(self.opacities[i]),
            color=self.colors[i],
        )

    def __iter__(self) -> Iterator[Gaussian]:
        return (self[i] for i in range(len(self)))

    @property
    def gaussians(self) -> list[Gaussian]:
        return list(self)

    @property
    def extent(self) -> tuple[np.ndarray, np.ndarray]:
        """Axis-aligned bounding box (lo, hi) of the means."""
        m = self.means.astype(np.float64)
        return m.min(axis=0), m.max(axis=0)

    @property
    def extent_radius(self) -> float:
        lo, hi = self.extent
        return float(0.5 * np.linalg.norm(hi - lo))

    def covariances(self) -> np.ndarray:
        return covariances(self.scales.astype(np.float64), self.rotations.astype(np.float64))

    @classmethod
    def from_gaussians(cls, gaussians: Sequence[Gaussian]) -> "GaussianScene":
        return cls(
            [g.mean for g in gaussians],
            [g.scale for g in gaussians],
            [g.rotation for g in gaussians],
            [g.opacity for g in gaussians],
            [g.color for g in gaussians],
        )

    def with_opacities(self, opacities) -> "GaussianScene":
        return GaussianScene(self.means, self.scales, self.rotations, opacities, self.colors)

    def equals(self, other: "GaussianScene") -> bool:
        return all(
            np.array_equal(getattr(self, k), getattr(other, k))
            for k in ("means", "scales", "rotations", "opacities", "colors")
        )


@dataclass(frozen=True)
class Camera:
    rotation: np.ndarray  # world -> camera, OpenCV axes (x right, y down, z forward)
    translation: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        trans = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")
        if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-6):
            raise ValueError("camera rotation is not orthonormal")

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def unproject(self, xs, ys, depths) -> np.ndarray:
        """World points for pixel coordinates at the given camera-z depths."""
        xs, ys, depths = (np.asarray(a, dtype=np.float64) for a in (xs, ys, depths))
        cam = np.stack(
            [(xs - self.cx) * depths / self.fx, (ys - self.cy) * depths / self.fy, depths],
            axis=-1,
        )
        return (cam - self.translation) @ self.rotation

    def to_dict(self) -> dict:
        return {
            "rotation": self.rotation.tolist(),
            "translation": self.translation.tolist(),
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(
            rotation=np.array(d["rotation"]),
            translation=np.array(d["translation"]),
            fx=float(d["fx"]),
            fy=float(d["fy"]),
            cx=float(d["cx"]),
            cy=float(d["cy"]),
            width=int(d["width"]),
            height=int(d["height"]),
        )


def look_at(eye, target, width: int, height: int, fov_deg: float = 50.0, up=(0.0, 0.0, 1.0)) -> Camera:
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(right) < 1e-8:
        right = np.cross(forward, np.array([0.0, 1.0, 0.0]))
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    rot = np.stack([right, down, forward])
    f = 0.5 * width / math.tan(math.radians(fov_deg) / 2)
    return Camera(rot, -rot @ eye, f, f, width / 2, height / 2, width, height)


def orbit_cameras(
    scene: GaussianScene,
    n_views: int,
    width: int,
    height: int,
    elevation_deg: float = 55.0,
    distance_scale: float = 2.2,
    fov_deg: float = 50.0,
    phase: float = 0.0,
) -> list[Camera]:
    """Cameras evenly spaced in azimuth around the scene, looking at its center."""
    lo, hi = scene.extent
    center = 0.5 * (lo + hi)
    radius = max(scene.extent_radius, 1e-3) * distance_scale
    elev = math.radians(elevation_deg)
    cams = []
    for v in range(n_views):
        az = phase + 2 * math.pi * v / n_views
        eye = center + radius * np.array(
            [math.cos(elev) * math.cos(az), math.cos(elev) * math.sin(az), math.sin(elev)]
        )
        cams.append(look_at(eye, center, width, height, fov_deg))
    return cams


# --- serialization -----------------------------------------------------------


def save_scene(scene: GaussianScene, path) -> None:
    payload = np.concatenate(
        [scene.means, scene.scales, scene.rotations, scene.opacities[:, None], scene.colors], axis=1
    ).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(SCENE_MAGIC, SCENE_VERSION, len(scene)))
        fh.write(payload.tobytes())


def load_scene(path) -> GaussianScene:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        if len(data) >= 4 and data[:4] != SCENE_MAGIC:
            raise MalformedHeaderError(f"{path}: bad magic {data[:4]!r}")
        raise TruncatedPayloadError(f"{path}: {len(data)} bytes is shorter than the header")
    magic, version, count = _HEADER.unpack_from(data)
    if magic != SCENE_MAGIC:
        raise MalformedHeaderError(f"{path}: bad magic {magic!r}")
    if version != SCENE_VERSION:
        raise VersionMismatchError(f"{path}: version {version}, expected {SCENE_VERSION}")
    need = _HEADER.size + count * _FLOATS_PER_GAUSSIAN * 4
    if len(data) < need:
        raise TruncatedPayloadError(f"{path}: expected {need} bytes, found {len(data)}")
    if count == 0:
        raise MalformedHeaderError(f"{path}: empty scene")
    arr = np.frombuffer(data, dtype="<f4", count=count * _FLOATS_PER_GAUSSIAN, offset=_HEADER.size)
    arr = arr.reshape(count, _FLOATS_PER_GAUSSIAN).astype(np.float32)
    quats = arr[:, 6:10]
    # Rotation math normalizes on use; stored values are kept bit-exact.
    norms = np.linalg.norm(quats.astype(np.float64), axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-4):
        raise SceneFormatError(f"{path}: quaternion norm deviates from 1 by more than 1e-4")
    return GaussianScene(arr[:, 0:3], arr[:, 3:6], quats, arr[:, 10], arr[:, 11:14])


# --- hierarchy ---------------------------------------------------------------


@dataclass(frozen=True)
class HierarchyAnnotation:
    node_id: int
    level: str
    member_gaussians: np.ndarray = field(repr=False)
    parent: Optional[int] = None

    def __post_init__(self):
        if self.level not in LEVELS:
            raise ValueError(f"unknown hierarchy level {self.level!r}")
        members = np.asarray(self.member_gaussians, dtype=np.int64)
        members.setflags(write=False)
        object.__setattr__(self, "member_gaussians", members)

    def to_json(self) -> str:
        return json.dumps(
            {
                "node_id": self.node_id,
                "level": self.level,
                "parent": self.parent,
                "members": self.member_gaussians.tolist(),
            }
        )

    @classmethod
    def from_json(cls, line: str) -> "HierarchyAnnotation":
        d = json.loads(line)
        return cls(d["node_id"], d["level"], np.array(d["members"], dtype=np.int64), d["parent"])


def save_annotations(annotations: Sequence[HierarchyAnnotation], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for a in annotations:
            fh.write(a.to_json() + "\n")


def load_annotations(path) -> list[HierarchyAnnotation]:
    with open(path, encoding="utf-8") as fh:
        return [HierarchyAnnotation.from_json(line) for line in fh if line.strip()]


@dataclass(frozen=True)
class SyntheticSceneSpec:
    group_count: int = 2
    objects_per_group: int = 2
    parts_per_object: int = 2
    gaussians_per_part: int = 48
    scale_ratio: float = 3.0
    seed: int = 0
    opacity_range: tuple[float, float] = (0.7, 1.0)

    def __post_init__(self):
        counts = (self.group_count, self.objects_per_group, self.parts_per_object, self.gaussians_per_part)
        if min(counts) < 1:
            raise ValueError("all counts must be >= 1")
        if not self.scale_ratio > 1:
            raise ValueError("scale_ratio must exceed 1")

    @property
    def total_gaussians(self) -> int:
        return self.group_count * self.objects_per_group * self.parts_per_object * self.gaussians_per_part


def _lattice(n: int, spacing: float) -> np.ndarray:
    """n centered points on a square xy lattice."""
    side = math.ceil(math.sqrt(n))
    idx = np.arange(n)
    pts = np.stack([idx % side, idx // side], axis=1).astype(np.float64)
    rows = math.ceil(n / side)
    pts[:, 0] -= (side - 1) / 2 if n >= side else (n - 1) / 2
    pts[:, 1] -= (rows - 1) / 2
    return np.concatenate([pts * spacing, np.zeros((n, 1))], axis=1)


def _rot_z(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def generate_synthetic(
    spec: SyntheticSceneSpec, max_gaussians: int = MAX_SYNTHETIC_GAUSSIANS
) -> tuple[GaussianScene, list[HierarchyAnnotation]]:
    """Build a three-level group/object/part scene with known hierarchy.

    Groups sit on a coarse lattice, objects on a jittered sub-lattice inside each
    group and parts are isotropic blobs of Gaussians. Each level is roughly
    ``scale_ratio`` times larger than the one below it.
    """
    if spec.total_gaussians > max_gaussians:
        raise ValueError(f"spec asks for {spec.total_gaussians} Gaussians, cap is {max_gaussians}")
    rng = np.random.default_rng(spec.seed)
    ratio = spec.scale_ratio
    part_spacing = 1.0
    object_spacing = part_spacing * ratio
    group_spacing = object_spacing * ratio
    blob_radius = 0.32 * part_spacing
    gauss_scale = 0.45 * blob_radius / max(1.0, spec.gaussians_per_part ** (1 / 3)) * 2.0

    means, scales, quats, colors = [], [], [], []
    annotations: list[HierarchyAnnotation] = []
    group_ids = list(range(spec.group_count))
    n_objects = spec.group_count * spec.objects_per_group
    object_base = spec.group_count
    part_base = object_base + n_objects

    group_centers = _lattice(spec.group_count, group_spacing)
    group_members: list[list[int]] = [[] for _ in group_ids]
    object_members: list[list[int]] = [[] for _ in range(n_objects)]
    next_index = 0
    part_counter = 0
    for g, gc in enumerate(group_centers):
        rot_g = _rot_z(rng.uniform(0, 2 * math.pi))
        obj_offsets = _lattice(spec.objects_per_group, object_spacing) @ rot_g.T
        obj_offsets[:, :2] += rng.uniform(-0.1, 0.1, size=(spec.objects_per_group, 2)) * object_spacing
        obj_offsets[:, 2] += rng.uniform(-0.1, 0.1, size=spec.objects_per_group) * part_spacing
        for o in range(spec.objects_per_group):
            obj_id = g * spec.objects_per_group + o
            oc = gc + obj_offsets[o]
            rot_o = _rot_z(rng.uniform(0, 2 * math.pi))
            part_offsets = _lattice(spec.parts_per_object, part_spacing) @ rot_o.T
            part_offsets[:, :2] += rng.uniform(-0.05, 0.05, size=(spec.parts_per_object, 2)) * part_spacing
            for p in range(spec.parts_per_object):
                pc = oc + part_offsets[p]
                color = rng.uniform(0.1, 0.9, size=3)
                k = spec.gaussians_per_part
                direction = rng.normal(size=(k, 3))
                direction /= np.maximum(np.linalg.norm(direction, axis=1, keepdims=True), 1e-12)
                radius = blob_radius * rng.uniform(0, 1, size=k) ** (1 / 3)
                if k == 1:
                    radius[:] = 0.0
                means.append(pc + direction * radius[:, None])
                scales.append(np.full((k, 3), gauss_scale) * rng.uniform(0.8, 1.2, size=(k, 3)))
                q = rng.normal(size=(k, 4))
                quats.append(q / np.linalg.norm(q, axis=1, keepdims=True))
                colors.append(np.clip(color + rng.normal(scale=0.03, size=(k, 3)), 0, 1))
                members = list(range(next_index, next_index + k))
                next_index += k
                annotations.append(
                    HierarchyAnnotation(part_base + part_counter, "part", np.array(members), object_base + obj_id)
                )
                part_counter += 1
                object_members[obj_id].extend(members)
                group_members[g].extend(members)

    opac = rng.uniform(*spec.opacity_range, size=next_index)
    scene = GaussianScene(
        np.concatenate(means), np.concatenate(scales), np.concatenate(quats), opac, np.concatenate(colors)
    )
    nodes = [HierarchyAnnotation(g, "group", np.array(group_members[g]), None) for g in group_ids]
    nodes += [
        HierarchyAnnotation(object_base + o, "object", np.array(object_members[o]), o // spec.objects_per_group)
        for o in range(n_objects)
    ]
    return scene, nodes + annotations
