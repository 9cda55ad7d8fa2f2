"""Tile-based EWA splatting on the CPU.

Geometry is frozen during feature distillation, so a view's compositing
weights are computed once (:func:`composite_weights`) and every later feature
render is a sparse linear map over them (:func:`render_features`), with
:func:`backward_features` as its exact transpose.

The per-tile compositing loop runs in a compiled extension when available and
falls back to numpy otherwise; ``KERNEL_BACKEND`` reports which one is active.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Optional

import numpy as np
import scipy.sparse as sp

from ..scene import Camera, Gaussian, GaussianScene, covariance_of, covariances
from . import _fallback

if os.environ.get("NESTFIELD_PURE_PYTHON"):
    _kernel = _fallback
    KERNEL_BACKEND = "python"
else:
    try:
        from . import _composite as _kernel

        KERNEL_BACKEND = "compiled"
    except ImportError:  # extension not built
        _kernel = _fallback
        KERNEL_BACKEND = "python"

TILE_SIZE = 16
LOWPASS = 0.3
NEAR_PLANE = 0.2
ALPHA_CLAMP = 0.99
ALPHA_MIN = 1.0 / 255.0
T_CUTOFF = 1e-4
COVERAGE_FLOOR = 0.5

SEMANTICS = ("rgb", "depth", "field-feature", "composite-embedding", "gamma")


@dataclass(frozen=True)
class RasterSettings:
    tile_size: int = TILE_SIZE
    lowpass: float = LOWPASS
    near: float = NEAR_PLANE
    alpha_clamp: float = ALPHA_CLAMP
    alpha_min: float = ALPHA_MIN
    t_cutoff: float = T_CUTOFF


DEFAULT_SETTINGS = RasterSettings()


@dataclass(frozen=True)
class Splat2D:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    gaussian_index: int
    radius: int = 0


@dataclass(frozen=True)
class Projection:
    """Projected splats for a whole scene; rows follow gaussian_index order."""

    gaussian_index: np.ndarray
    means2d: np.ndarray
    cov2d: np.ndarray
    conics: np.ndarray  # (a, b, c) of the inverse 2D covariance
    depths: np.ndarray
    radii: np.ndarray
    opacities: np.ndarray


def _footprint_radius(cov2d: np.ndarray, opacity: np.ndarray, alpha_min: float) -> np.ndarray:
    """Pixel radius beyond which a splat's alpha is below alpha_min."""
    a, b, c = cov2d[..., 0, 0], cov2d[..., 0, 1], cov2d[..., 1, 1]
    mid = 0.5 * (a + c)
    lam_max = mid + np.sqrt(np.maximum(mid * mid - (a * c - b * b), 0.0))
    ratio = np.maximum(opacity / alpha_min, 1.0)
    sigmas = np.sqrt(2.0 * np.log(ratio))
    return np.ceil(sigmas * np.sqrt(lam_max)).astype(np.int64)


def project_scene(scene: GaussianScene, cam: Camera, settings: RasterSettings = DEFAULT_SETTINGS) -> Projection:
    """EWA projection of all Gaussians; culled ones are dropped."""
    means = scene.means.astype(np.float64)
    cam_pts = cam.to_camera(means)
    z = cam_pts[:, 2]
    visible = z > settings.near
    idx = np.nonzero(visible)[0]
    x, y, z = cam_pts[idx, 0], cam_pts[idx, 1], cam_pts[idx, 2]
    mean2d = np.stack([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy], axis=1)
    jac = np.zeros((idx.size, 2, 3))
    jac[:, 0, 0] = cam.fx / z
    jac[:, 0, 2] = -cam.fx * x / (z * z)
    jac[:, 1, 1] = cam.fy / z
    jac[:, 1, 2] = -cam.fy * y / (z * z)
    sigma = covariances(scene.scales[idx].astype(np.float64), scene.rotations[idx].astype(np.float64))
    t = jac @ cam.rotation
    cov2d = t @ sigma @ np.transpose(t, (0, 2, 1))
    cov2d[:, 0, 0] += settings.lowpass
    cov2d[:, 1, 1] += settings.lowpass
    opac = scene.opacities[idx].astype(np.float64)
    radii = _footprint_radius(cov2d, opac, settings.alpha_min)
    on_screen = (
        (mean2d[:, 0] + radii >= 0)
        & (mean2d[:, 0] - radii <= cam.width - 1)
        & (mean2d[:, 1] + radii >= 0)
        & (mean2d[:, 1] - radii <= cam.height - 1)
        & (opac >= settings.alpha_min)
    )
    keep = np.nonzero(on_screen)[0]
    cov2d = cov2d[keep]
    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] ** 2
    assert np.all(det > 0), "dilated 2D covariance must be positive definite"
    conics = np.stack([cov2d[:, 1, 1] / det, -cov2d[:, 0, 1] / det, cov2d[:, 0, 0] / det], axis=1)
    return Projection(
        gaussian_index=idx[keep],
        means2d=mean2d[keep],
        cov2d=cov2d,
        conics=conics,
        depths=z[keep],
        radii=radii[keep],
        opacities=opac[keep],
    )


def project(g: Gaussian, cam: Camera, settings: RasterSettings = DEFAULT_SETTINGS, index: int = 0) -> Optional[Splat2D]:
    """Project a single Gaussian; None when culled."""
    # Single-Gaussian path keeps full float64 precision of the input.
    mean = np.asarray(g.mean, dtype=np.float64)
    p = cam.to_camera(mean[None])[0]
    if p[2] <= settings.near:
        return None
    x, y, z = p
    jac = np.array([[cam.fx / z, 0.0, -cam.fx * x / z**2], [0.0, cam.fy / z, -cam.fy * y / z**2]])
    t = jac @ cam.rotation
    cov2d = t @ covariance_of(g) @ t.T + settings.lowpass * np.eye(2)
    mean2d = np.array([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy])
    radius = int(_footprint_radius(cov2d, np.array(g.opacity), settings.alpha_min))
    if g.opacity < settings.alpha_min:
        return None
    if (
        mean2d[0] + radius < 0
        or mean2d[0] - radius > cam.width - 1
        or mean2d[1] + radius < 0
        or mean2d[1] - radius > cam.height - 1
    ):
        return None
    return Splat2D(mean2d, cov2d, float(z), index, radius)


@dataclass(frozen=True, eq=False)
class CompositeWeightsMap:
    """Per-pixel front-to-back (gaussian_index, weight) lists in CSR layout.

    Pixel ``p = y * width + x`` owns ``indices[indptr[p]:indptr[p+1]]`` and the
    matching ``weights``; ``t_final`` is the residual transmittance.
    """

    width: int
    height: int
    n_gaussians: int
    indptr: np.ndarray
    indices: np.ndarray
    weights: np.ndarray
    t_final: np.ndarray
    depths: np.ndarray  # camera-z per Gaussian, NaN when culled
    camera: Optional[Camera] = None

    @property
    def n_pixels(self) -> int:
        return self.width * self.height

    @cached_property
    def matrix(self) -> sp.csr_matrix:
        return sp.csr_matrix(
            (self.weights, self.indices, self.indptr), shape=(self.n_pixels, self.n_gaussians)
        )

    @cached_property
    def coverage(self) -> np.ndarray:
        """Sum of weights per pixel, shape (H, W)."""
        return np.asarray(self.matrix.sum(axis=1)).reshape(self.height, self.width)

    def pixel(self, x: int, y: int) -> list[tuple[int, float]]:
        p = y * self.width + x
        lo, hi = self.indptr[p], self.indptr[p + 1]
        return list(zip(self.indices[lo:hi].tolist(), self.weights[lo:hi].tolist()))

    def rows(self, pixels: np.ndarray) -> sp.csr_matrix:
        """Weight rows for a batch of flat pixel indices."""
        return self.matrix[pixels]


def _bin_tiles(proj: Projection, width: int, height: int, tile: int):
    tiles_x = (width + tile - 1) // tile
    tiles_y = (height + tile - 1) // tile
    order = np.lexsort((proj.gaussian_index, proj.depths))
    mx, my, r = proj.means2d[order, 0], proj.means2d[order, 1], proj.radii[order]
    tx0 = np.clip(np.floor((mx - r) / tile), 0, tiles_x - 1).astype(np.int64)
    tx1 = np.clip(np.floor((mx + r) / tile), 0, tiles_x - 1).astype(np.int64)
    ty0 = np.clip(np.floor((my - r) / tile), 0, tiles_y - 1).astype(np.int64)
    ty1 = np.clip(np.floor((my + r) / tile), 0, tiles_y - 1).astype(np.int64)
    nx, ny = tx1 - tx0 + 1, ty1 - ty0 + 1
    counts = nx * ny
    total = int(counts.sum())
    splat_of = np.repeat(np.arange(order.size), counts)
    local = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    tile_x = tx0[splat_of] + local % nx[splat_of]
    tile_y = ty0[splat_of] + local // nx[splat_of]
    tile_id = tile_y * tiles_x + tile_x
    # stable sort keeps the global depth order inside each tile
    perm = np.argsort(tile_id, kind="stable")
    tile_splats = order[splat_of[perm]].astype(np.int64)
    tile_ptr = np.zeros(tiles_x * tiles_y + 1, dtype=np.int64)
    np.cumsum(np.bincount(tile_id, minlength=tiles_x * tiles_y), out=tile_ptr[1:])
    return tile_ptr, tile_splats


def _to_csr(proj, n_gaussians, width, height, pix_start, pix_count, ent_splat, ent_w, t_final, cam):
    indptr = np.zeros(width * height + 1, dtype=np.int64)
    np.cumsum(pix_count, out=indptr[1:])
    gather = np.repeat(pix_start - indptr[:-1], pix_count) + np.arange(indptr[-1])
    depths = np.full(n_gaussians, np.nan)
    depths[proj.gaussian_index] = proj.depths
    return CompositeWeightsMap(
        width=width,
        height=height,
        n_gaussians=n_gaussians,
        indptr=indptr,
        indices=proj.gaussian_index[ent_splat[gather]].astype(np.int64),
        weights=ent_w[gather],
        t_final=t_final.reshape(height, width),
        depths=depths,
        camera=cam,
    )


def composite_weights(
    scene: GaussianScene, cam: Camera, settings: RasterSettings = DEFAULT_SETTINGS, backend=None
) -> CompositeWeightsMap:
    """Front-to-back alpha-compositing weights w = alpha * T for every pixel."""
    kernel = backend or _kernel
    proj = project_scene(scene, cam, settings)
    tile_ptr, tile_splats = _bin_tiles(proj, cam.width, cam.height, settings.tile_size)
    out = kernel.composite_tiles(
        np.ascontiguousarray(proj.means2d),
        np.ascontiguousarray(proj.conics),
        np.ascontiguousarray(proj.opacities),
        tile_ptr,
        tile_splats,
        cam.width,
        cam.height,
        settings.tile_size,
        settings.alpha_clamp,
        settings.alpha_min,
        settings.t_cutoff,
    )
    return _to_csr(proj, len(scene), cam.width, cam.height, *out, cam)


def composite_weights_naive(
    scene: GaussianScene, cam: Camera, settings: RasterSettings = DEFAULT_SETTINGS
) -> CompositeWeightsMap:
    """Reference renderer: every pixel scans every projected splat, no tiling."""
    proj = project_scene(scene, cam, settings)
    order = np.lexsort((proj.gaussian_index, proj.depths))
    n_pix = cam.width * cam.height
    pix_start = np.zeros(n_pix, dtype=np.int64)
    pix_count = np.zeros(n_pix, dtype=np.int64)
    t_final = np.ones(n_pix)
    splats, ws = [], []
    for p in range(n_pix):
        py, px = divmod(p, cam.width)
        pix_start[p] = len(splats)
        T = 1.0
        for j in order:
            dx = px - proj.means2d[j, 0]
            dy = py - proj.means2d[j, 1]
            a, b, c = proj.conics[j]
            power = -0.5 * (a * dx * dx + 2.0 * b * dx * dy + c * dy * dy)
            alpha = min(settings.alpha_clamp, proj.opacities[j] * math.exp(power))
            if alpha < settings.alpha_min:
                continue
            splats.append(j)
            ws.append(alpha * T)
            T *= 1.0 - alpha
            if T < settings.t_cutoff:
                break
        pix_count[p] = len(splats) - pix_start[p]
        t_final[p] = T
    return _to_csr(
        proj, len(scene), cam.width, cam.height, pix_start, pix_count,
        np.array(splats, dtype=np.int64), np.array(ws, dtype=np.float64), t_final, cam,
    )


# --- feature maps ------------------------------------------------------------


@dataclass
class FeatureMap:
    width: int
    height: int
    dim: int
    data: np.ndarray = field(repr=False)  # (height, width, dim)
    semantics: str = "field-feature"
    valid: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        self.data = np.asarray(self.data).reshape(self.height, self.width, self.dim)
        if self.semantics not in SEMANTICS:
            raise ValueError(f"unknown semantics {self.semantics!r}")

    def flat(self) -> np.ndarray:
        return self.data.reshape(-1, self.dim)


def render_features(weights: CompositeWeightsMap, per_gaussian_features: np.ndarray, semantics: str = "field-feature") -> FeatureMap:
    feats = np.asarray(per_gaussian_features)
    if feats.ndim != 2 or feats.shape[0] != weights.n_gaussians:
        raise ValueError(
            f"feature matrix has shape {feats.shape}, expected ({weights.n_gaussians}, D)"
        )
    out = weights.matrix @ feats
    return FeatureMap(weights.width, weights.height, feats.shape[1], out, semantics)


def render_rgb(weights: CompositeWeightsMap, scene: GaussianScene) -> FeatureMap:
    return render_features(weights, scene.colors.astype(np.float64), "rgb")


def render_depth(weights: CompositeWeightsMap, scene: GaussianScene, coverage_floor: float = COVERAGE_FLOOR) -> FeatureMap:
    """Weight-normalized expected camera-z; pixels below the coverage floor are NaN."""
    if len(scene) != weights.n_gaussians:
        raise ValueError("weights were built for a different scene")
    depths = np.nan_to_num(weights.depths, nan=0.0)
    num = (weights.matrix @ depths).reshape(weights.height, weights.width)
    cov = weights.coverage
    valid = cov > coverage_floor
    out = np.full(cov.shape, np.nan)
    out[valid] = num[valid] / cov[valid]
    return FeatureMap(weights.width, weights.height, 1, out[..., None], "depth", valid=valid)


def backward_features(weights: CompositeWeightsMap, pixel_gradients: np.ndarray) -> np.ndarray:
    """Transpose of render_features: grad[i] = sum_p w[p, i] * pixel_gradients[p]."""
    g = np.asarray(pixel_gradients)
    if g.ndim == 3:
        if g.shape[:2] != (weights.height, weights.width):
            raise ValueError(f"pixel gradients have shape {g.shape}, image is {weights.height}x{weights.width}")
        g = g.reshape(weights.n_pixels, -1)
    elif g.ndim != 2 or g.shape[0] != weights.n_pixels:
        raise ValueError(f"pixel gradients have shape {g.shape}")
    return np.asarray(weights.matrix.T @ g)


# --- export ------------------------------------------------------------------


def export_feature_map(fmap: FeatureMap, path) -> list[Path]:
    """Write a feature map; PPM + sidecar for dim 1 or 3, raw f32 + JSON header otherwise."""
    path = Path(path)
    data = fmap.data.astype(np.float64)
    if fmap.dim in (1, 3):
        finite = data[np.isfinite(data)]
        lo = float(finite.min()) if finite.size else 0.0
        hi = float(finite.max()) if finite.size else 0.0
        scaled = np.zeros_like(data) if hi <= lo else (data - lo) / (hi - lo)
        img = np.round(np.nan_to_num(scaled, nan=0.0) * 255).clip(0, 255).astype(np.uint8)
        magic = b"P5" if fmap.dim == 1 else b"P6"
        with open(path, "wb") as fh:
            fh.write(magic + f"\n{fmap.width} {fmap.height}\n255\n".encode())
            fh.write(img.tobytes())
        side = path.with_suffix(path.suffix + ".json")
        side.write_text(json.dumps({"min": lo, "max": hi, "semantics": fmap.semantics}, sort_keys=True))
        return [path, side]
    header = path.with_suffix(path.suffix + ".json")
    header.write_text(
        json.dumps({"width": fmap.width, "height": fmap.height, "dim": fmap.dim, "semantics": fmap.semantics}, sort_keys=True)
    )
    data.astype("<f4").tofile(path)
    return [path, header]


def read_pgm(path) -> tuple[np.ndarray, dict]:
    """Read a P5/P6 file written by export_feature_map and its sidecar."""
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    magic, dims, _maxval, payload = parts
    w, h = map(int, dims.split())
    channels = 1 if magic == b"P5" else 3
    img = np.frombuffer(payload, dtype=np.uint8, count=w * h * channels).reshape(h, w, channels)
    side = Path(str(path) + ".json")
    meta = json.loads(side.read_text()) if side.exists() else {}
    return img, meta
