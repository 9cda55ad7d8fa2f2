"""Synthetic multi-view dataset: hierarchy silhouettes as segments, random unit
teachers per hierarchy node, and held-out evaluation cases."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .hierarchy import SegmentRecord, rle_decode, rle_encode
from .query import CANONICAL_LABELS, CanonicalSet
from .raster import CompositeWeightsMap, composite_weights
from .scene import Camera, GaussianScene, HierarchyAnnotation, SyntheticSceneSpec, generate_synthetic, orbit_cameras


@dataclass(frozen=True)
class ViewSpec:
    n_train: int = 8
    n_test: int = 2
    width: int = 160
    height: int = 160
    elevation_deg: float = 65.0
    distance_scale: float = 2.0
    fov_deg: float = 50.0
    min_segment_area: int = 8


@dataclass(frozen=True)
class EvalCase:
    query_id: str
    view_id: int
    node_id: int
    level: str
    mask: np.ndarray  # (H, W) bool
    box: tuple[int, int, int, int]
    embedding: np.ndarray

    def to_json(self) -> dict:
        flat = np.flatnonzero(self.mask.ravel())
        return {
            "query_id": self.query_id,
            "view_id": self.view_id,
            "node_id": self.node_id,
            "level": self.level,
            "gt_mask": rle_encode(flat).tolist(),
            "gt_box": list(self.box),
            "embedding": self.embedding.tolist(),
        }

    @classmethod
    def from_json(cls, d: dict, height: int, width: int) -> "EvalCase":
        mask = np.zeros(height * width, dtype=bool)
        if d.get("gt_mask") is not None:
            mask[rle_decode(np.array(d["gt_mask"], dtype=np.int64))] = True
        box = tuple(d["gt_box"]) if d.get("gt_box") is not None else mask_box(mask.reshape(height, width))
        return cls(
            d["query_id"], int(d["view_id"]), int(d.get("node_id", -1)), d.get("level", ""),
            mask.reshape(height, width), box, np.asarray(d["embedding"], dtype=np.float64),
        )


def near_orthogonal_units(count: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    """Random unit vectors; exactly orthonormal when count <= dim."""
    g = rng.normal(size=(dim, count))
    if count <= dim:
        q, r = np.linalg.qr(g)
        return (q * np.sign(np.diag(r))).T
    return (g / np.linalg.norm(g, axis=0)).T


def mask_box(mask: np.ndarray) -> tuple[int, int, int, int]:
    ys, xs = np.nonzero(mask)
    return int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max())


def node_coverage(weights: CompositeWeightsMap, members: np.ndarray) -> np.ndarray:
    ind = np.zeros(weights.n_gaussians)
    ind[members] = 1.0
    return (weights.matrix @ ind).reshape(weights.height, weights.width)


@dataclass
class SyntheticDataset:
    scene: GaussianScene
    annotations: list[HierarchyAnnotation]
    cameras: list[Camera]
    train_views: list[int]
    test_views: list[int]
    weights: list[CompositeWeightsMap]
    teachers: dict[int, np.ndarray]
    canon: CanonicalSet
    segments: list[SegmentRecord]
    cases: list[EvalCase]
    dim: int

    def silhouettes(self, view: int, min_area: int = 1) -> dict[int, np.ndarray]:
        out = {}
        for a in self.annotations:
            m = node_coverage(self.weights[view], a.member_gaussians) > 0.5
            if m.sum() >= min_area:
                out[a.node_id] = m
        return out

    @property
    def train_weights(self) -> list[CompositeWeightsMap]:
        return [self.weights[v] for v in self.train_views]


def build_dataset(
    spec: SyntheticSceneSpec,
    dim: int,
    views: ViewSpec = ViewSpec(),
    scene: Optional[GaussianScene] = None,
    annotations: Optional[list[HierarchyAnnotation]] = None,
    teacher_seed: Optional[int] = None,
) -> SyntheticDataset:
    if scene is None:
        scene, annotations = generate_synthetic(spec)
    n_views = views.n_train + views.n_test
    train_cams = orbit_cameras(scene, views.n_train, views.width, views.height, views.elevation_deg, views.distance_scale, views.fov_deg)
    test_cams = orbit_cameras(
        scene, views.n_test, views.width, views.height, views.elevation_deg - 7.0, views.distance_scale, views.fov_deg,
        phase=np.pi / max(views.n_train, 1) * 0.5 + 0.3,
    )
    cams = train_cams + test_cams
    weights = [composite_weights(scene, c) for c in cams]
    rng = np.random.default_rng(spec.seed + 1 if teacher_seed is None else teacher_seed)
    vecs = near_orthogonal_units(len(annotations) + len(CANONICAL_LABELS), dim, rng)
    teachers = {a.node_id: vecs[i] for i, a in enumerate(annotations)}
    canon = CanonicalSet(vecs[len(annotations):], CANONICAL_LABELS)

    ds = SyntheticDataset(
        scene, annotations, cams, list(range(views.n_train)), list(range(views.n_train, n_views)),
        weights, teachers, canon, [], [], dim,
    )
    levels = {a.node_id: a.level for a in annotations}
    for train_idx, v in enumerate(ds.train_views):
        for node, m in ds.silhouettes(v, views.min_segment_area).items():
            ds.segments.append(SegmentRecord.from_mask(train_idx, m, teachers[node], node_id=node))
    for v in ds.test_views:
        for node, m in ds.silhouettes(v, views.min_segment_area).items():
            if levels[node] == "group":
                continue
            ds.cases.append(EvalCase(f"v{v}_n{node}", v, node, levels[node], m, mask_box(m), teachers[node]))
    return ds


# --- files ---------------------------------------------------------------------


def save_cameras(cameras: list[Camera], train: list[int], test: list[int], path) -> None:
    Path(path).write_text(
        json.dumps({"cameras": [c.to_dict() for c in cameras], "train": train, "test": test}, indent=1)
    )


def load_cameras(path) -> tuple[list[Camera], list[int], list[int]]:
    d = json.loads(Path(path).read_text())
    return [Camera.from_dict(c) for c in d["cameras"]], list(d["train"]), list(d["test"])


def save_cases(cases: list[EvalCase], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for c in cases:
            fh.write(json.dumps(c.to_json()) + "\n")


def load_cases(path, cameras: list[Camera]) -> list[EvalCase]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                d = json.loads(line)
                cam = cameras[int(d["view_id"])]
                out.append(EvalCase.from_json(d, cam.height, cam.width))
    return out
