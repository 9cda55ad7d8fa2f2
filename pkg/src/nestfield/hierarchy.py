"""Scale-aware hierarchical supervision of the nested field.

Segments are lifted to 3D with the expected depth, given a physical scale
(largest covariance eigenvalue), rank-quantized into D bins and mapped to an
active dimension count M(s) = ceil(D (1 - s)). Training regresses the masked
projection W (B(s) * theta) onto each segment's teacher embedding.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .field import Adam, NestedField, deferred_forward, backward_step, make_sample_plan
from .raster import CompositeWeightsMap, FeatureMap, render_depth
from .scene import Camera, GaussianScene

log = logging.getLogger(__name__)

EMB_MAGIC = b"NFEB"
EMB_VERSION = 1
_EMB_HEADER = struct.Struct("<4sIIQ")

MIN_LOG_AREA = 2
COS_GATE = 1e-8


class DegenerateSegmentError(ValueError):
    pass


# --- masks -------------------------------------------------------------------


def rle_encode(pixels: np.ndarray) -> np.ndarray:
    """(start, length) runs of a set of flat row-major pixel indices."""
    pix = np.unique(np.asarray(pixels, dtype=np.int64))
    if pix.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    breaks = np.nonzero(np.diff(pix) != 1)[0]
    starts = np.concatenate([[pix[0]], pix[breaks + 1]])
    ends = np.concatenate([pix[breaks], [pix[-1]]])
    return np.stack([starts, ends - starts + 1], axis=1)


def rle_decode(runs: np.ndarray) -> np.ndarray:
    runs = np.asarray(runs, dtype=np.int64).reshape(-1, 2)
    if runs.size == 0:
        return np.zeros(0, dtype=np.int64)
    lengths = runs[:, 1]
    offsets = np.arange(lengths.sum()) - np.repeat(np.cumsum(lengths) - lengths, lengths)
    return np.repeat(runs[:, 0], lengths) + offsets


def mask_from_pixels(pixels: np.ndarray, height: int, width: int) -> np.ndarray:
    m = np.zeros(height * width, dtype=bool)
    m[np.asarray(pixels, dtype=np.int64)] = True
    return m.reshape(height, width)


@dataclass(frozen=True)
class SegmentRecord:
    view_id: int
    rle: np.ndarray
    area: int
    teacher: np.ndarray
    raw_scale: Optional[float] = None
    quantized_scale: Optional[float] = None
    embedding_index: Optional[int] = None
    node_id: Optional[int] = None

    def __post_init__(self):
        rle = np.asarray(self.rle, dtype=np.int64).reshape(-1, 2)
        teacher = np.asarray(self.teacher, dtype=np.float64)
        object.__setattr__(self, "rle", rle)
        object.__setattr__(self, "teacher", teacher)
        if self.area < 1 or int(rle[:, 1].sum()) != self.area:
            raise ValueError(f"segment area {self.area} does not match its mask")
        if abs(np.linalg.norm(teacher) - 1.0) > 1e-4:
            raise ValueError("teacher embedding must have unit norm")

    @property
    def pixels(self) -> np.ndarray:
        return rle_decode(self.rle)

    @classmethod
    def from_mask(cls, view_id: int, mask: np.ndarray, teacher, **kw) -> "SegmentRecord":
        pix = np.flatnonzero(np.asarray(mask).ravel())
        return cls(view_id, rle_encode(pix), int(pix.size), teacher, **kw)


# --- scale extraction ------------------------------------------------------------


def lift_segment(pixels: np.ndarray, depth_map: FeatureMap, cam: Camera) -> np.ndarray:
    """Unproject mask pixels at their expected depth; invalid-depth pixels are skipped."""
    pixels = np.asarray(pixels, dtype=np.int64)
    depth = depth_map.data[..., 0].ravel()[pixels]
    ok = np.isfinite(depth)
    if depth_map.valid is not None:
        ok &= depth_map.valid.ravel()[pixels]
    if ok.sum() < 3:
        raise DegenerateSegmentError(f"only {int(ok.sum())} mask pixels have valid depth")
    ys, xs = np.divmod(pixels[ok], depth_map.width)
    return cam.unproject(xs, ys, depth[ok])


def segment_scale(points: np.ndarray) -> float:
    """Largest eigenvalue of the (1/n) covariance of the points."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.shape[0] < 3:
        raise DegenerateSegmentError("need at least 3 points")
    centered = pts - pts.mean(axis=0)
    cov = centered.T @ centered / pts.shape[0]
    return max(float(np.linalg.eigvalsh(cov)[-1]), 0.0)


# --- quantization -----------------------------------------------------------------


@dataclass(frozen=True)
class ScaleQuantizer:
    """Quantile boundaries: bin b holds raw scales in [boundaries[b], boundaries[b+1])."""

    boundaries: np.ndarray
    n_bins: int

    def assign(self, raw_scales) -> np.ndarray:
        """Balanced bins by stable rank, for the multiset the quantizer was fit on."""
        return rank_bins(raw_scales, self.n_bins)

    def bin_of(self, raw_scale: float) -> int:
        b = int(np.searchsorted(self.boundaries[1:-1], raw_scale, side="right"))
        return min(max(b, 0), self.n_bins - 1)


def rank_bins(raw_scales, n_bins: int) -> np.ndarray:
    raw = np.asarray(raw_scales, dtype=np.float64)
    n = raw.size
    order = np.argsort(raw, kind="stable")
    bins = np.empty(n, dtype=np.int64)
    bins[order] = (np.arange(n) * n_bins) // n
    return bins


def fit_quantizer(raw_scales, n_bins: int) -> ScaleQuantizer:
    raw = np.asarray(raw_scales, dtype=np.float64)
    if raw.size == 0:
        raise ValueError("cannot fit a quantizer to an empty set of scales")
    srt = np.sort(raw, kind="stable")
    n = srt.size
    first_rank = -((-np.arange(n_bins) * n) // n_bins)  # ceil(b n / D)
    lower = srt[np.minimum(first_rank, n - 1)]
    bounds = np.concatenate([lower, [srt[-1]]])
    bounds = np.maximum.accumulate(bounds)
    return ScaleQuantizer(bounds, n_bins)


def quantize(q: ScaleQuantizer, raw_scale: float) -> float:
    """Quantized scale s = b / D of the bin's left edge."""
    return q.bin_of(raw_scale) / q.n_bins


# --- dimension map ----------------------------------------------------------------


@dataclass(frozen=True)
class DimensionMap:
    dim: int
    step_size: int = 1

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("dimension must be positive")
        if not 1 <= self.step_size <= self.dim:
            raise ValueError(f"step size {self.step_size} must lie in [1, {self.dim}]")

    def allowed_dims(self) -> np.ndarray:
        k = self.step_size
        return k * np.arange(1, self.dim // k + 1)


def dim_for_scale(dmap: DimensionMap, s: float) -> int:
    """Active dimension count for quantized scale s in [0, 1)."""
    # tolerance absorbs the rounding of s = b / D
    m = math.ceil(dmap.dim * (1.0 - s) - 1e-9)
    m = min(max(m, 1), dmap.dim)
    k = dmap.step_size
    if k == 1:
        return m
    return max(k, k * (m // k))


def dims_for_scales(dmap: DimensionMap, s: np.ndarray) -> np.ndarray:
    return np.array([dim_for_scale(dmap, float(v)) for v in np.asarray(s).ravel()], dtype=np.int64)


def dimension_mask(active: np.ndarray, dim: int) -> np.ndarray:
    return (np.arange(dim)[None, :] < np.asarray(active).reshape(-1, 1)).astype(np.float64)


def scale_aware_feature(theta: np.ndarray, s: float, w: np.ndarray, dmap: Optional[DimensionMap] = None) -> np.ndarray:
    """phi = W (B(s) * theta); no normalization."""
    dmap = dmap or DimensionMap(w.shape[0])
    m = dim_for_scale(dmap, s)
    mask = np.zeros(w.shape[1])
    mask[:m] = 1.0
    return w @ (mask * theta)


# --- loss -------------------------------------------------------------------------


def hierarchical_loss(phi: np.ndarray, target: np.ndarray, lam: float) -> tuple[float, np.ndarray]:
    """||phi - target||^2 + lam (1 - cos(phi, target)) and its gradient in phi."""
    loss, grad = batch_hierarchical_loss(np.atleast_2d(phi), np.atleast_2d(target), lam, reduce="sum")
    return loss, grad.reshape(np.shape(phi))


def batch_hierarchical_loss(phi: np.ndarray, target: np.ndarray, lam: float, reduce: str = "mean"):
    diff = phi - target
    loss = np.sum(diff * diff, axis=1)
    grad = 2.0 * diff
    if lam:
        pn = np.linalg.norm(phi, axis=1)
        tn = np.linalg.norm(target, axis=1)
        live = pn >= COS_GATE
        dot = np.sum(phi * target, axis=1)
        safe_pn = np.where(live, pn, 1.0)
        cos = np.where(live, dot / (safe_pn * tn), 1.0)
        loss = loss + lam * (1.0 - cos)
        dcos = target / (safe_pn * tn)[:, None] - (dot / (safe_pn ** 3 * tn))[:, None] * phi
        grad = grad - lam * np.where(live[:, None], dcos, 0.0)
    if reduce == "mean":
        n = phi.shape[0]
        return float(loss.sum() / n), grad / n
    return float(loss.sum()), grad


# --- sampling ---------------------------------------------------------------------


def segment_weights(areas) -> np.ndarray:
    """Selection weight 1 / log(area), areas floored at 2."""
    return 1.0 / np.log(np.maximum(np.asarray(areas, dtype=np.float64), MIN_LOG_AREA))


class PixelSegmentIndex:
    """Which segments cover each pixel, over the union of all training images."""

    def __init__(self, segments: Sequence[SegmentRecord], view_sizes: Sequence[tuple[int, int]]):
        self.segments = list(segments)
        sizes = np.array([h * w for h, w in view_sizes], dtype=np.int64)
        self.view_offsets = np.concatenate([[0], np.cumsum(sizes)])
        self.total_pixels = int(self.view_offsets[-1])
        gpix, segs = [], []
        for i, seg in enumerate(self.segments):
            p = seg.pixels + self.view_offsets[seg.view_id]
            gpix.append(p)
            segs.append(np.full(p.size, i, dtype=np.int64))
        gpix = np.concatenate(gpix) if gpix else np.zeros(0, dtype=np.int64)
        segs = np.concatenate(segs) if segs else np.zeros(0, dtype=np.int64)
        order = np.lexsort((segs, gpix))
        self.entry_segment = segs[order]
        self.ptr = np.zeros(self.total_pixels + 1, dtype=np.int64)
        np.cumsum(np.bincount(gpix, minlength=self.total_pixels), out=self.ptr[1:])
        w = segment_weights([s.area for s in self.segments])[self.entry_segment] if segs.size else np.zeros(0)
        self.entry_cumw = np.cumsum(w)
        self.entry_w = w

    def covering(self, global_pixel: int) -> np.ndarray:
        return self.entry_segment[self.ptr[global_pixel]:self.ptr[global_pixel + 1]]


@dataclass
class Batch:
    global_pixel: np.ndarray
    view: np.ndarray
    pixel: np.ndarray
    segment: np.ndarray

    def __len__(self) -> int:
        return self.segment.size


def sample_batch(index: PixelSegmentIndex, pixels_per_step: int, rng: np.random.Generator, max_retries: int = 16) -> Batch:
    """Uniform pixels over all images; among covering segments pick one with weight 1/log(area)."""
    pix = rng.integers(0, index.total_pixels, size=pixels_per_step)
    for _ in range(max_retries):
        bare = index.ptr[pix + 1] == index.ptr[pix]
        if not bare.any():
            break
        pix[bare] = rng.integers(0, index.total_pixels, size=int(bare.sum()))
    pix = pix[index.ptr[pix + 1] > index.ptr[pix]]
    lo, hi = index.ptr[pix], index.ptr[pix + 1]
    base = np.where(lo > 0, index.entry_cumw[np.maximum(lo - 1, 0)], 0.0)
    total = index.entry_cumw[hi - 1] - base
    target = base + rng.random(pix.size) * total
    pick = np.searchsorted(index.entry_cumw, target, side="right")
    pick = np.clip(pick, lo, hi - 1)
    view = np.searchsorted(index.view_offsets, pix, side="right") - 1
    return Batch(pix, view, pix - index.view_offsets[view], index.entry_segment[pick])


# --- data preparation ---------------------------------------------------------------


def extract_raw_scales(
    scene: GaussianScene, views: Sequence[CompositeWeightsMap], segments: Sequence[SegmentRecord]
) -> list[SegmentRecord]:
    """Fill raw_scale for segments lacking one; degenerate segments are dropped."""
    depths = {}
    out = []
    for seg in segments:
        if seg.raw_scale is not None:
            out.append(seg)
            continue
        if seg.view_id not in depths:
            depths[seg.view_id] = render_depth(views[seg.view_id], scene)
        try:
            pts = lift_segment(seg.pixels, depths[seg.view_id], views[seg.view_id].camera)
        except DegenerateSegmentError as exc:
            log.warning("dropping segment in view %d: %s", seg.view_id, exc)
            continue
        out.append(replace(seg, raw_scale=segment_scale(pts)))
    return out


def quantize_segments(segments: Sequence[SegmentRecord], dim: int) -> tuple[list[SegmentRecord], ScaleQuantizer]:
    raw = [s.raw_scale for s in segments]
    q = fit_quantizer(raw, dim)
    bins = q.assign(raw)
    return [replace(s, quantized_scale=float(b) / dim) for s, b in zip(segments, bins)], q


# --- training -----------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 5000
    batch_size: int = 512
    lam: float = 0.001
    lr_plane_factor: float = 0.0016  # multiplied by the scene extent
    lr_mlp: float = 0.00125
    lr_w: Optional[float] = None  # defaults to lr_mlp
    step_size: int = 1
    seed: int = 0
    log_every: int = 0

    def __post_init__(self):
        if self.iterations < 0 or self.batch_size < 1:
            raise ValueError("iterations must be >= 0 and batch size >= 1")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")


@dataclass
class TrainResult:
    field: NestedField
    losses: np.ndarray
    dim_map: DimensionMap


def train(
    scene: GaussianScene,
    views: Sequence[CompositeWeightsMap],
    segments: Sequence[SegmentRecord],
    field: NestedField,
    cfg: TrainConfig,
) -> TrainResult:
    """Distill segment teachers into a copy of ``field``; segments must be quantized."""
    field = field.copy()
    dmap = DimensionMap(field.dim, cfg.step_size)
    losses = np.zeros(cfg.iterations)
    if cfg.iterations == 0:
        return TrainResult(field, losses, dmap)
    if any(s.quantized_scale is None for s in segments):
        raise ValueError("segments must carry quantized scales; run quantize_segments first")
    for s in segments:
        if s.teacher.shape != (field.dim,):
            raise ValueError(f"teacher dimension {s.teacher.shape} does not match field dimension {field.dim}")

    plan = make_sample_plan(field.triplane, scene.means.astype(np.float64))
    stacked = sp.vstack([v.matrix for v in views], format="csr")
    index = PixelSegmentIndex(segments, [(v.height, v.width) for v in views])
    active = dims_for_scales(dmap, [s.quantized_scale for s in segments])
    teachers = np.stack([s.teacher for s in segments])
    lr_w = cfg.lr_mlp if cfg.lr_w is None else cfg.lr_w
    extent = max(scene.extent_radius, 1e-6)
    opt = Adam({"planes": cfg.lr_plane_factor * extent, "mlp": cfg.lr_mlp, "w": lr_w})
    rng = np.random.default_rng(cfg.seed)
    dims = np.arange(field.dim)

    for it in range(cfg.iterations):
        batch = sample_batch(index, cfg.batch_size, rng)
        if len(batch) == 0:
            losses[it] = np.nan
            raise RuntimeError(f"iteration {it}: no pixel in the batch is covered by a segment")
        masks = (dims[None, :] < active[batch.segment][:, None]).astype(np.float64)
        phi, tape = deferred_forward(field, stacked[batch.global_pixel], plan, masks)
        loss, dphi = batch_hierarchical_loss(phi, teachers[batch.segment], cfg.lam)
        if not np.isfinite(loss):
            raise FloatingPointError(f"non-finite loss at iteration {it}")
        losses[it] = loss
        grads = backward_step(field, tape, dphi)
        opt.step(field, grads)
        if cfg.log_every and it % cfg.log_every == 0:
            log.info("iter %d loss %.6f", it, loss)
    return TrainResult(field, losses, dmap)


# --- file formats -------------------------------------------------------------------


def save_embeddings(embeddings: np.ndarray, path) -> None:
    emb = np.asarray(embeddings, dtype="<f4")
    if emb.ndim != 2:
        raise ValueError("embeddings must be a (count, D) matrix")
    with open(path, "wb") as fh:
        fh.write(_EMB_HEADER.pack(EMB_MAGIC, EMB_VERSION, emb.shape[1], emb.shape[0]))
        fh.write(emb.tobytes())


def load_embeddings(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < _EMB_HEADER.size:
        raise ValueError(f"{path}: truncated embeddings header")
    magic, version, dim, count = _EMB_HEADER.unpack_from(data)
    if magic != EMB_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != EMB_VERSION:
        raise ValueError(f"{path}: version {version}, expected {EMB_VERSION}")
    need = _EMB_HEADER.size + 4 * dim * count
    if len(data) < need:
        raise ValueError(f"{path}: truncated payload")
    return np.frombuffer(data, dtype="<f4", count=dim * count, offset=_EMB_HEADER.size).reshape(count, dim).astype(np.float64)


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def save_segments(segments: Sequence[SegmentRecord], path, embeddings_path) -> None:
    """JSON-lines segment records plus an NFEB file of their teacher rows."""
    emb = np.stack([s.teacher for s in segments])
    save_embeddings(emb, embeddings_path)
    with open(path, "w", encoding="utf-8") as fh:
        for i, s in enumerate(segments):
            rec = {"view_id": s.view_id, "area": s.area, "rle": s.rle.tolist(), "embedding": i}
            if s.raw_scale is not None:
                rec["raw_scale"] = s.raw_scale
            if s.node_id is not None:
                rec["node_id"] = s.node_id
            fh.write(json.dumps(rec) + "\n")


def load_segments(path, embeddings_path) -> list[SegmentRecord]:
    emb = load_embeddings(embeddings_path)
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            d = json.loads(line)
            out.append(
                SegmentRecord(
                    view_id=int(d["view_id"]),
                    rle=np.array(d["rle"], dtype=np.int64).reshape(-1, 2),
                    area=int(d["area"]),
                    # stored as f32; renormalize so the unit-norm invariant holds exactly
                    teacher=_unit(emb[d["embedding"]]),
                    raw_scale=d.get("raw_scale"),
                    embedding_index=int(d["embedding"]),
                    node_id=d.get("node_id"),
                )
            )
    return out
