"""Composite-embedding querying and the explicit/oracle scale-selection baselines."""

from __future__ import annotations

import json
from dataclasses import dataclass, field as dc_field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .field import NestedField, field_at, make_sample_plan
from .hierarchy import DimensionMap
from .raster import COVERAGE_FLOOR, CompositeWeightsMap, FeatureMap
from .scene import GaussianScene

CANONICAL_LABELS = ("object", "stuff", "thing", "part", "texture")
MODES = ("composite", "explicit", "oracle")


class StaleCacheError(RuntimeError):
    pass


@dataclass(frozen=True)
class CanonicalSet:
    vectors: np.ndarray  # (K, D) unit rows
    labels: tuple = CANONICAL_LABELS

    def __post_init__(self):
        v = np.atleast_2d(np.asarray(self.vectors, dtype=np.float64))
        object.__setattr__(self, "vectors", v)
        if v.shape[0] < 1:
            raise ValueError("canonical set needs at least one vector")
        if np.any(np.abs(np.linalg.norm(v, axis=1) - 1.0) > 1e-4):
            raise ValueError("canonical vectors must have unit norm")
        if len(self.labels) != v.shape[0]:
            object.__setattr__(self, "labels", tuple(f"canon{i}" for i in range(v.shape[0])))


@dataclass(frozen=True)
class RelevancyMap:
    width: int
    height: int
    values: np.ndarray = dc_field(repr=False)  # (H, W) in [0, 1]
    query_id: str = ""
    mode: str = "composite"
    chosen_scale: Optional[int] = None
    evaluations: int = 1  # relevancy maps computed to produce this one

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")


# --- per-Gaussian precomputation ----------------------------------------------------


def gamma_3d(theta: np.ndarray, w: np.ndarray, canon: CanonicalSet, temperature: float = 1.0) -> np.ndarray:
    """Softmax over d of max_k (W[:, :d] theta[:d]) . canon_k, for each row of theta."""
    theta = np.atleast_2d(theta)
    # (W[:, :d] theta[:d]) . c = sum_{j<d} theta_j (W^T c)_j, a prefix sum per canonical
    proj = canon.vectors @ w  # (K, D)
    logits = np.cumsum(theta[:, None, :] * proj[None, :, :], axis=2).max(axis=1) / temperature
    logits -= logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=1, keepdims=True)


def suffix_sums(gamma: np.ndarray) -> np.ndarray:
    return np.cumsum(gamma[..., ::-1], axis=-1)[..., ::-1]


def reweight(theta: np.ndarray, gamma: np.ndarray) -> np.ndarray:
    """theta_tilde_j = (sum_{d >= j} gamma_d) * theta_j."""
    return suffix_sums(gamma) * theta


def composite_direct(theta: np.ndarray, gamma: np.ndarray, w: np.ndarray) -> np.ndarray:
    """sum_d gamma_d W[:, :d] theta[:d] evaluated scale by scale (reference form)."""
    theta = np.atleast_2d(theta)
    gamma = np.atleast_2d(gamma)
    out = np.zeros((theta.shape[0], w.shape[0]))
    for d in range(1, w.shape[1] + 1):
        out += gamma[:, d - 1:d] * (theta[:, :d] @ w[:, :d].T)
    return out


@dataclass(frozen=True)
class CompositeCache:
    field_checksum: str
    theta: np.ndarray  # (N, D) point features
    gamma: np.ndarray  # (N, D)
    theta_tilde: np.ndarray  # (N, D)


def build_composite_cache(scene: GaussianScene, field: NestedField, canon: CanonicalSet, temperature: float = 1.0) -> CompositeCache:
    theta = field_at(field, scene.means.astype(np.float64), make_sample_plan(field.triplane, scene.means.astype(np.float64)))
    gamma = gamma_3d(theta, field.w, canon, temperature)
    return CompositeCache(field.checksum(), theta, gamma, reweight(theta, gamma))


def composite_map(
    cache: CompositeCache, field: NestedField, weights: CompositeWeightsMap, coverage_floor: float = COVERAGE_FLOOR
) -> FeatureMap:
    """phi_comp(u) = W * render(theta_tilde)(u).

    Pixels whose accumulated alpha is at or below ``coverage_floor`` are marked
    invalid and score zero relevancy.
    """
    if cache.field_checksum != field.checksum():
        raise StaleCacheError("field parameters changed since gamma was computed; rebuild the composite cache")
    rendered = np.asarray(weights.matrix @ cache.theta_tilde)
    return FeatureMap(
        weights.width, weights.height, field.dim, rendered @ field.w.T, "composite-embedding",
        valid=weights.coverage > coverage_floor,
    )


def render_theta(cache: CompositeCache, weights: CompositeWeightsMap, coverage_floor: float = COVERAGE_FLOOR) -> FeatureMap:
    return FeatureMap(
        weights.width, weights.height, cache.theta.shape[1], np.asarray(weights.matrix @ cache.theta),
        valid=weights.coverage > coverage_floor,
    )


def render_gamma(cache: CompositeCache, weights: CompositeWeightsMap) -> FeatureMap:
    """Diagnostic only; the query path uses precomputed theta_tilde."""
    return FeatureMap(weights.width, weights.height, cache.gamma.shape[1], np.asarray(weights.matrix @ cache.gamma), "gamma")


# --- relevancy ----------------------------------------------------------------------


def relevancy_values(
    embeddings: np.ndarray, q: np.ndarray, canon: CanonicalSet, temperature: float = 1.0, kind: str = "paired"
) -> np.ndarray:
    """Per-row relevancy of (P, D) embeddings against query q; zero rows score 0."""
    norms = np.linalg.norm(embeddings, axis=1)
    live = norms > 0
    unit = embeddings / np.where(live, norms, 1.0)[:, None]
    sq = unit @ q
    if kind == "cosine":
        r = 0.5 * (1.0 + sq)
    elif kind == "paired":
        sc = unit @ canon.vectors.T
        # exp(a) / (exp(a) + exp(b)) = 1 / (1 + exp(b - a))
        r = (1.0 / (1.0 + np.exp((sc - sq[:, None]) / temperature))).min(axis=1)
    else:
        raise ValueError(f"unknown relevancy kind {kind!r}")
    return np.where(live, r, 0.0)


def relevancy(
    embedding_map: FeatureMap,
    q: np.ndarray,
    canon: CanonicalSet,
    query_id: str = "",
    mode: str = "composite",
    temperature: float = 1.0,
    kind: str = "paired",
) -> RelevancyMap:
    q = np.asarray(q, dtype=np.float64)
    vals = relevancy_values(embedding_map.flat(), q, canon, temperature, kind)
    if embedding_map.valid is not None:
        vals = np.where(embedding_map.valid.ravel(), vals, 0.0)
    return RelevancyMap(embedding_map.width, embedding_map.height, vals.reshape(embedding_map.height, embedding_map.width), query_id, mode)


def scale_maps(theta_map: FeatureMap, w: np.ndarray, dmap: DimensionMap):
    """Yield (d, phi_d) with phi_d = W[:, :d] theta[:d] for every allowed d, coarse to fine."""
    theta = theta_map.flat()
    allowed = set(dmap.allowed_dims().tolist())
    acc = np.zeros((theta.shape[0], w.shape[0]))
    for d in range(1, dmap.dim + 1):
        acc += theta[:, d - 1:d] * w[:, d - 1][None, :]
        if d in allowed:
            yield d, acc


def per_scale_relevancy(
    theta_map: FeatureMap, w: np.ndarray, q: np.ndarray, canon: CanonicalSet, dmap: DimensionMap,
    query_id: str = "", temperature: float = 1.0, kind: str = "paired",
) -> dict[int, RelevancyMap]:
    out = {}
    valid = None if theta_map.valid is None else theta_map.valid.ravel()
    for d, phi in scale_maps(theta_map, w, dmap):
        vals = relevancy_values(phi, q, canon, temperature, kind)
        if valid is not None:
            vals = np.where(valid, vals, 0.0)
        vals = vals.reshape(theta_map.height, theta_map.width)
        out[d] = RelevancyMap(theta_map.width, theta_map.height, vals, query_id, "explicit", d)
    return out


def explicit_scale_query(
    theta_map: FeatureMap, w: np.ndarray, q: np.ndarray, canon: CanonicalSet, dmap: DimensionMap,
    query_id: str = "", temperature: float = 1.0, kind: str = "paired", score: str = "max",
) -> RelevancyMap:
    """Relevancy at every allowed scale; keep the scale whose map peaks highest."""
    maps = per_scale_relevancy(theta_map, w, q, canon, dmap, query_id, temperature, kind)
    best_d, best_score = None, -np.inf
    for d, m in maps.items():
        if score == "max":
            s = float(m.values.max())
        else:  # mean of the top 1%
            v = np.sort(m.values.ravel())
            s = float(v[-max(1, v.size // 100):].mean())
        if s > best_score:
            best_d, best_score = d, s
    m = maps[best_d]
    return RelevancyMap(m.width, m.height, m.values, query_id, "explicit", best_d, evaluations=len(maps))


def oracle_scale_query(
    per_scale: dict[int, RelevancyMap],
    metric: Callable[[RelevancyMap], float],
    composite: Optional[RelevancyMap] = None,
    query_id: str = "",
) -> tuple[RelevancyMap, float]:
    """Best map under a ground-truth task metric; returns (map, metric value).

    ``composite``, when given, competes alongside the per-scale maps (its
    chosen_scale is None if it wins).
    """
    if metric is None:
        raise ValueError("oracle selection needs a ground-truth metric")
    best, best_val = None, -np.inf
    candidates = [(d, m) for d, m in sorted(per_scale.items())]
    if composite is not None:
        candidates.append((None, composite))
    for d, m in candidates:
        val = metric(m)
        if val > best_val:
            best, best_val = (d, m), val
    d, m = best
    return RelevancyMap(m.width, m.height, m.values, query_id, "oracle", d, evaluations=len(candidates)), best_val


# --- output -----------------------------------------------------------------------


def save_relevancy(rel: RelevancyMap, path) -> list[Path]:
    """P5 PGM of the map (linearly scaled to 0..255) plus a JSON sidecar."""
    path = Path(path)
    v = rel.values
    lo, hi = float(v.min()), float(v.max())
    scaled = np.zeros_like(v) if hi <= lo else (v - lo) / (hi - lo)
    img = np.round(scaled * 255).clip(0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{rel.width} {rel.height}\n255\n".encode())
        fh.write(img.tobytes())
    side = Path(str(path) + ".json")
    side.write_text(
        json.dumps(
            {"query_id": rel.query_id, "mode": rel.mode, "chosen_scale": rel.chosen_scale, "min": lo, "max": hi},
            sort_keys=True,
        )
    )
    return [path, side]


def load_relevancy(path) -> RelevancyMap:
    """Inverse of save_relevancy up to 8-bit quantization."""
    raw = Path(path).read_bytes()
    magic, dims, _maxval, payload = raw.split(b"\n", 3)
    if magic != b"P5":
        raise ValueError(f"{path}: not a P5 file")
    w, h = map(int, dims.split())
    img = np.frombuffer(payload, dtype=np.uint8, count=w * h).reshape(h, w).astype(np.float64)
    meta = json.loads(Path(str(path) + ".json").read_text())
    values = meta["min"] + img / 255.0 * (meta["max"] - meta["min"])
    return RelevancyMap(w, h, values, meta["query_id"], meta["mode"], meta["chosen_scale"])
