"""Run composite / explicit / oracle queries over evaluation cases and score them."""

from __future__ import annotations

import statistics
import time
from collections import defaultdict
from dataclasses import dataclass, field as dc_field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import metrics
from .field import NestedField
from .hierarchy import DimensionMap
from .query import (
    CanonicalSet,
    CompositeCache,
    RelevancyMap,
    build_composite_cache,
    composite_map,
    oracle_scale_query,
    per_scale_relevancy,
    relevancy,
    render_theta,
)
from .raster import CompositeWeightsMap
from .synth import EvalCase

R_AT = (1, 2, 3, 4, 5)


@dataclass
class QueryResult:
    query_id: str
    mode: str
    level: str
    loc_hit: bool
    iou: float
    rank: int
    chosen_scale: object = None
    max_sibling_iou: float = 0.0
    evaluations: int = 1

    def to_json(self) -> dict:
        return {
            "query_id": self.query_id,
            "level": self.level,
            "loc_hit": self.loc_hit,
            "iou": self.iou,
            "rank": self.rank,
            "chosen_scale": self.chosen_scale,
            "max_sibling_iou": self.max_sibling_iou,
        }


def aggregate(results: Sequence[QueryResult]) -> dict:
    if not results:
        return {"loc_acc": 0.0, "miou": 0.0, "r_at": {str(k): 0.0 for k in R_AT}, "n": 0}
    ranks = [r.rank for r in results]
    return {
        "loc_acc": float(np.mean([r.loc_hit for r in results])),
        "miou": float(np.mean([r.iou for r in results])),
        "r_at": {str(k): metrics.recall_at_k(ranks, k) for k in R_AT},
        "n": len(results),
    }


def evaluate_cases(
    field: NestedField,
    cache: CompositeCache,
    canon: CanonicalSet,
    weights: dict[int, CompositeWeightsMap],
    cases: Sequence[EvalCase],
    dmap: DimensionMap,
    modes: Iterable[str] = ("composite", "explicit", "oracle"),
    siblings: dict[int, list[int]] | None = None,
    threshold: float = metrics.DEFAULT_THRESHOLD,
) -> dict[str, list[QueryResult]]:
    """Score every case in every mode. The segment pool of a view is the set of
    ground-truth masks of all cases in that view."""
    modes = tuple(modes)
    by_view: dict[int, list[EvalCase]] = defaultdict(list)
    for c in cases:
        by_view[c.view_id].append(c)
    out: dict[str, list[QueryResult]] = {m: [] for m in modes}
    siblings = siblings or {}
    for view, view_cases in sorted(by_view.items()):
        wmap = weights[view]
        comp = composite_map(cache, field, wmap)
        theta = render_theta(cache, wmap) if {"explicit", "oracle"} & set(modes) else None
        pool = [c.mask for c in view_cases]
        masks_by_node = {c.node_id: c.mask for c in view_cases}
        for gi, case in enumerate(view_cases):
            comp_rel = relevancy(comp, case.embedding, canon, case.query_id, "composite")
            scale_maps = None
            if theta is not None:
                scale_maps = per_scale_relevancy(theta, field.w, case.embedding, canon, dmap, case.query_id)

            def sib_iou(rel):
                pred = metrics.binarize(rel, threshold)
                ious = [metrics.iou(pred, masks_by_node[s]) for s in siblings.get(case.node_id, []) if s in masks_by_node]
                return max(ious, default=0.0)

            for mode in modes:
                if mode == "composite":
                    rels = {"loc": comp_rel, "seg": comp_rel}
                    evals = 1
                elif mode == "explicit":
                    best = max(scale_maps, key=lambda d: (scale_maps[d].values.max(), -d))
                    rel = scale_maps[best]
                    rels = {"loc": rel, "seg": rel}
                    evals = len(scale_maps)
                else:
                    loc_rel, _ = oracle_scale_query(
                        scale_maps, lambda m: float(metrics.localization_hit(m, case.box)), comp_rel, case.query_id
                    )
                    seg_rel, _ = oracle_scale_query(
                        scale_maps, lambda m: metrics.miou(m, case.mask, threshold), comp_rel, case.query_id
                    )
                    rels = {"loc": loc_rel, "seg": seg_rel}
                    evals = len(scale_maps) + 1
                hit = metrics.localization_hit(rels["loc"], case.box)
                iou = metrics.miou(rels["seg"], case.mask, threshold)
                rank = metrics.retrieval_rank(rels["seg"], pool, gi)
                out[mode].append(
                    QueryResult(
                        case.query_id, mode, case.level, hit, iou, rank,
                        getattr(rels["seg"], "chosen_scale", None), sib_iou(rels["seg"]), evals,
                    )
                )
    return out


def sibling_map(annotations) -> dict[int, list[int]]:
    children = defaultdict(list)
    for a in annotations:
        if a.parent is not None:
            children[a.parent].append(a.node_id)
    return {
        a.node_id: [s for s in children[a.parent] if s != a.node_id]
        for a in annotations
        if a.parent is not None
    }


# --- timing ---------------------------------------------------------------------


def _median_time(fn: Callable[[], object], repeats: int, warmup: int) -> float:
    for _ in range(warmup):
        fn()
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - t0)
    return statistics.median(samples)


def bench_modes(
    field: NestedField,
    cache: CompositeCache,
    canon: CanonicalSet,
    weights: dict[int, CompositeWeightsMap],
    cases: Sequence[EvalCase],
    dmap: DimensionMap,
    modes: Iterable[str] = ("composite", "explicit"),
    repeats: int = 5,
    warmup: int = 1,
    query_counts: Sequence[int] = (1, 10),
    threshold: float = metrics.DEFAULT_THRESHOLD,
    scene=None,
) -> dict:
    """Median wall-clock timings per mode, split into a once-per-view render and a
    per-query part, plus measured totals for a view answering n queries.

    Render is the feature map a mode needs before any query (W * render(theta_tilde)
    for composite, render(theta) for explicit and oracle). Queries are taken from
    ``cases`` round-robin; the first case's view is used for every timing.
    """
    if not cases:
        raise ValueError("bench_modes needs at least one query")
    repeats = max(int(repeats), 5)
    view = cases[0].view_id
    wmap = weights[view]
    view_cases = [c for c in cases if c.view_id == view]
    report: dict = {
        "view_id": view,
        "repeats": repeats,
        "warmup": warmup,
    }
    if scene is not None:
        # per-Gaussian theta and gamma, paid once per trained field
        report["precompute_time"] = _median_time(lambda: build_composite_cache(scene, field, canon), repeats, warmup)
    for mode in modes:
        if mode == "composite":
            render = lambda: composite_map(cache, field, wmap)

            def answer(feat, case):
                return relevancy(feat, case.embedding, canon, case.query_id, "composite")

            evals = 1
        elif mode in ("explicit", "oracle"):
            render = lambda: render_theta(cache, wmap)
            if mode == "explicit":

                def answer(feat, case):
                    maps = per_scale_relevancy(feat, field.w, case.embedding, canon, dmap, case.query_id)
                    best = max(maps, key=lambda d: (maps[d].values.max(), -d))
                    return maps[best]

                evals = int(dmap.allowed_dims().size)
            else:
                comp_feat = composite_map(cache, field, wmap)

                def answer(feat, case):
                    maps = per_scale_relevancy(feat, field.w, case.embedding, canon, dmap, case.query_id)
                    comp = relevancy(comp_feat, case.embedding, canon, case.query_id, "composite")
                    return oracle_scale_query(maps, lambda m: metrics.miou(m, case.mask, threshold), comp, case.query_id)

                evals = int(dmap.allowed_dims().size) + 1
        else:
            raise ValueError(f"unknown mode {mode!r}")
        feat = render()
        render_time = _median_time(render, repeats, warmup)
        per_query = _median_time(lambda: answer(feat, view_cases[0]), repeats, warmup)

        def run(n):
            f = render()
            for i in range(n):
                answer(f, view_cases[i % len(view_cases)])

        totals = {str(n): _median_time(lambda: run(n), repeats, warmup) for n in query_counts}
        report[mode] = {
            "render_time": render_time,
            "per_query_time": per_query,
            "total": totals,
            "evaluations_per_query": evals,
        }
    return report
