"""End-to-end synthetic experiment: build data, distill a field, query it."""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from typing import Optional

import numpy as np

from .evaluate import QueryResult, evaluate_cases, sibling_map
from .field import FieldConfig, NestedField
from .hierarchy import SegmentRecord, TrainConfig, TrainResult, extract_raw_scales, quantize_segments, train
from .query import CompositeCache, build_composite_cache
from .scene import SyntheticSceneSpec
from .synth import SyntheticDataset, ViewSpec, build_dataset

FIELD_MARGIN = 0.5  # world units of padding around the scene for the triplane box


@dataclass(frozen=True)
class ExperimentConfig:
    scene: SyntheticSceneSpec = SyntheticSceneSpec(2, 2, 2, 48, 2.5, 0)
    dim: int = 32
    views: ViewSpec = ViewSpec()
    field: FieldConfig = FieldConfig(resolution=64, channels=16, hidden=64, dim=32)
    train: TrainConfig = TrainConfig()
    field_seed: int = 0


@dataclass
class Experiment:
    config: ExperimentConfig
    dataset: SyntheticDataset
    segments: list[SegmentRecord]
    result: TrainResult
    cache: CompositeCache
    results: dict[str, list[QueryResult]] = dc_field(default_factory=dict)

    @property
    def field(self) -> NestedField:
        return self.result.field

    @property
    def test_weights(self):
        return {v: self.dataset.weights[v] for v in self.dataset.test_views}


def prepare_segments(ds: SyntheticDataset) -> list[SegmentRecord]:
    segs = extract_raw_scales(ds.scene, ds.train_weights, ds.segments)
    segs, _ = quantize_segments(segs, ds.dim)
    return segs


def field_bounds(ds: SyntheticDataset) -> tuple[np.ndarray, np.ndarray]:
    lo, hi = ds.scene.extent
    return lo - FIELD_MARGIN, hi + FIELD_MARGIN


def run_experiment(
    cfg: ExperimentConfig = ExperimentConfig(),
    modes=("composite", "explicit", "oracle"),
    dataset: Optional[SyntheticDataset] = None,
) -> Experiment:
    if cfg.field.dim != cfg.dim:
        raise ValueError(f"field dimension {cfg.field.dim} != teacher dimension {cfg.dim}")
    ds = dataset if dataset is not None else build_dataset(cfg.scene, cfg.dim, cfg.views)
    segs = prepare_segments(ds)
    init = NestedField.create(cfg.field, *field_bounds(ds), seed=cfg.field_seed)
    res = train(ds.scene, ds.train_weights, segs, init, cfg.train)
    cache = build_composite_cache(ds.scene, res.field, ds.canon)
    exp = Experiment(cfg, ds, segs, res, cache)
    if modes:
        exp.results = evaluate_cases(
            res.field, cache, ds.canon, exp.test_weights, ds.cases, res.dim_map, modes, sibling_map(ds.annotations)
        )
    return exp
