"""Trainable nested feature field: TriPlane grids feeding a small MLP, plus the
projection matrix W, with hand-written reverse-mode gradients and Adam."""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field as dc_field
from pathlib import Path
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .raster import CompositeWeightsMap

CKPT_MAGIC = b"NFCK"
CKPT_VERSION = 1
_COMBINE_CODES = {"sum": 0, "product": 1}

PLANE_AXES = ((0, 1), (0, 2), (1, 2))  # xy, xz, yz


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class FieldConfig:
    resolution: int = 64
    channels: int = 16
    hidden: int = 64
    dim: int = 64
    combine: str = "sum"
    n_layers: int = 3
    init_plane_range: float = 1e-4

    def __post_init__(self):
        if self.combine not in _COMBINE_CODES:
            raise ValueError(f"combine must be one of {sorted(_COMBINE_CODES)}")
        if min(self.resolution, self.channels, self.hidden, self.dim, self.n_layers) < 1:
            raise ValueError("field sizes must be positive")
        if self.resolution < 2:
            raise ValueError("plane resolution must be at least 2")

    @classmethod
    def full_scale(cls) -> "FieldConfig":
        """Full-size configuration: 512^2 x 64 planes, 256 hidden units, D = 512."""
        return cls(resolution=512, channels=64, hidden=256, dim=512)


class TriPlane:
    """Three R x R x C grids over the (xy), (xz), (yz) projections of the scene box."""

    def __init__(self, planes: np.ndarray, lo, hi, combine: str = "sum"):
        planes = np.asarray(planes, dtype=np.float64)
        if planes.ndim != 4 or planes.shape[0] != 3 or planes.shape[1] != planes.shape[2]:
            raise ValueError(f"planes must have shape (3, R, R, C), got {planes.shape}")
        self.planes = planes
        self.lo = np.asarray(lo, dtype=np.float64).reshape(3)
        self.hi = np.asarray(hi, dtype=np.float64).reshape(3)
        self.combine = combine

    @property
    def resolution(self) -> int:
        return self.planes.shape[1]

    @property
    def channels(self) -> int:
        return self.planes.shape[3]

    def normalize(self, points: np.ndarray) -> np.ndarray:
        """Map world points into [0, 1]^3, clamping outside the box."""
        span = np.where(self.hi - self.lo > 0, self.hi - self.lo, 1.0)
        return np.clip((np.asarray(points, dtype=np.float64) - self.lo) / span, 0.0, 1.0)


@dataclass
class SamplePlan:
    """Sparse bilinear interpolation operators for a fixed point set (one per plane)."""

    operators: list  # three (M, R*R) CSR matrices

    @property
    def n_points(self) -> int:
        return self.operators[0].shape[0]


def make_sample_plan(triplane: TriPlane, points: np.ndarray) -> SamplePlan:
    uvw = triplane.normalize(points)
    r = triplane.resolution
    m = uvw.shape[0]
    ops = []
    for a, b in PLANE_AXES:
        ca, cb = uvw[:, a] * (r - 1), uvw[:, b] * (r - 1)
        ia = np.minimum(np.floor(ca).astype(np.int64), r - 2)
        ib = np.minimum(np.floor(cb).astype(np.int64), r - 2)
        fa, fb = ca - ia, cb - ib
        cols = np.stack([ia * r + ib, ia * r + ib + 1, (ia + 1) * r + ib, (ia + 1) * r + ib + 1], axis=1)
        vals = np.stack([(1 - fa) * (1 - fb), (1 - fa) * fb, fa * (1 - fb), fa * fb], axis=1)
        rows = np.repeat(np.arange(m), 4)
        ops.append(sp.csr_matrix((vals.ravel(), (rows, cols.ravel())), shape=(m, r * r)))
    return SamplePlan(ops)


def _plane_samples(triplane: TriPlane, plan: SamplePlan) -> list[np.ndarray]:
    r2 = triplane.resolution ** 2
    return [op @ triplane.planes[p].reshape(r2, -1) for p, op in enumerate(plan.operators)]


def _combine(samples: list[np.ndarray], mode: str) -> np.ndarray:
    if mode == "sum":
        return samples[0] + samples[1] + samples[2]
    return samples[0] * samples[1] * samples[2]


def sample_triplane(triplane: TriPlane, points: np.ndarray, plan: Optional[SamplePlan] = None) -> np.ndarray:
    """Bilinear sample of each plane at the projected point, combined across planes."""
    plan = plan or make_sample_plan(triplane, points)
    return _combine(_plane_samples(triplane, plan), triplane.combine)


def triplane_backward(triplane: TriPlane, plan: SamplePlan, grad_out: np.ndarray) -> np.ndarray:
    """Gradient of sum(grad_out * sample_triplane) with respect to the plane texels."""
    r = triplane.resolution
    grads = np.zeros_like(triplane.planes)
    if triplane.combine == "sum":
        per_plane = [grad_out] * 3
    else:
        s = _plane_samples(triplane, plan)
        per_plane = [grad_out * s[1] * s[2], grad_out * s[0] * s[2], grad_out * s[0] * s[1]]
    for p, op in enumerate(plan.operators):
        grads[p] = (op.T @ per_plane[p]).reshape(r, r, -1)
    return grads


class Mlp:
    """Dense layers with ReLU between them and a linear output layer."""

    def __init__(self, weights: list[np.ndarray], biases: list[np.ndarray]):
        if len(weights) != len(biases) or not weights:
            raise ValueError("need one bias per weight matrix")
        for i, (w, b) in enumerate(zip(weights, biases)):
            if b.shape != (w.shape[1],):
                raise ValueError(f"layer {i}: bias shape {b.shape} does not match weight {w.shape}")
            if i and weights[i - 1].shape[1] != w.shape[0]:
                raise ValueError(f"layer {i}: input width {w.shape[0]} != previous output {weights[i - 1].shape[1]}")
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    def forward(self, x: np.ndarray, cache: Optional[list] = None) -> np.ndarray:
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if cache is not None:
                cache.append(h)
            h = h @ w + b
            if i < last:
                h = np.maximum(h, 0.0)
        return h

    def backward(self, cache: list, grad_out: np.ndarray):
        """Returns (grad wrt input, [weight grads], [bias grads]) given the forward cache."""
        gw = [None] * len(self.weights)
        gb = [None] * len(self.weights)
        g = grad_out
        for i in range(len(self.weights) - 1, -1, -1):
            x = cache[i]
            gw[i] = x.T @ g
            gb[i] = g.sum(axis=0)
            g = g @ self.weights[i].T
            if i > 0:
                # cache[i] is the post-ReLU activation of layer i-1
                g = g * (x > 0)
        return g, gw, gb


def _kaiming_uniform(rng, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class NestedField:
    """TriPlane + MLP feature field with a D x D projection matrix W."""

    def __init__(self, triplane: TriPlane, mlp: Mlp, w: np.ndarray, config: FieldConfig):
        w = np.asarray(w, dtype=np.float64)
        if mlp.out_dim != w.shape[0] or w.shape[0] != w.shape[1]:
            raise ValueError(f"MLP output {mlp.out_dim} must equal the side of W {w.shape}")
        if mlp.in_dim != triplane.channels:
            raise ValueError("MLP input width must equal the plane channel count")
        self.triplane = triplane
        self.mlp = mlp
        self.w = w
        self.config = config

    @property
    def dim(self) -> int:
        return self.w.shape[0]

    @classmethod
    def create(cls, config: FieldConfig, lo, hi, seed: int = 0) -> "NestedField":
        rng = np.random.default_rng(seed)
        r, c = config.resolution, config.channels
        planes = rng.uniform(-config.init_plane_range, config.init_plane_range, size=(3, r, r, c))
        widths = [c] + [config.hidden] * (config.n_layers - 1) + [config.dim]
        weights = [_kaiming_uniform(rng, a, b) for a, b in zip(widths[:-1], widths[1:])]
        biases = [np.zeros(b) for b in widths[1:]]
        return cls(TriPlane(planes, lo, hi, config.combine), Mlp(weights, biases), np.zeros((config.dim, config.dim)), config)

    def parameters(self) -> dict[str, np.ndarray]:
        params = {"planes": self.triplane.planes}
        for i, (w, b) in enumerate(zip(self.mlp.weights, self.mlp.biases)):
            params[f"mlp.{i}.weight"] = w
            params[f"mlp.{i}.bias"] = b
        params["w"] = self.w
        return params

    def copy(self) -> "NestedField":
        tri = TriPlane(self.triplane.planes.copy(), self.triplane.lo, self.triplane.hi, self.triplane.combine)
        mlp = Mlp([w.copy() for w in self.mlp.weights], [b.copy() for b in self.mlp.biases])
        return NestedField(tri, mlp, self.w.copy(), self.config)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, arr in self.parameters().items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def check_finite(self) -> None:
        for name, arr in self.parameters().items():
            bad = ~np.isfinite(arr)
            if bad.any():
                loc = tuple(int(i) for i in np.argwhere(bad)[0])
                raise FloatingPointError(f"non-finite value in parameter {name} at index {loc}")


def field_at(field: NestedField, points: np.ndarray, plan: Optional[SamplePlan] = None) -> np.ndarray:
    """Point features Theta(x) = MLP(TriPlane(x)), shape (M, D)."""
    field.check_finite()
    return field.mlp.forward(sample_triplane(field.triplane, points, plan))


# --- batched forward / backward ------------------------------------------------


@dataclass
class GradientTape:
    """Activations of one deferred forward pass, consumed by backward_step."""

    plan: SamplePlan
    rows: sp.csr_matrix  # (B, N) compositing weights of the batch pixels
    mlp_cache: list
    theta: np.ndarray  # (B, D) pixel features
    masks: Optional[np.ndarray] = None  # (B, D) binary dimension masks when projected
    consumed: bool = False


def deferred_forward(
    field: NestedField, rows: sp.csr_matrix, plan: SamplePlan, masks: Optional[np.ndarray] = None
):
    """Render plane features through ``rows`` then run the MLP per pixel.

    With ``masks`` the scale-aware projection phi = W (mask * theta) is applied
    too. Returns (output, tape).
    """
    if rows.shape[1] != plan.n_points:
        raise ValueError(f"weight rows cover {rows.shape[1]} Gaussians, plan has {plan.n_points}")
    tri = sample_triplane(field.triplane, None, plan)
    pix_tri = np.asarray(rows @ tri)
    cache: list = []
    theta = field.mlp.forward(pix_tri, cache)
    tape = GradientTape(plan=plan, rows=rows, mlp_cache=cache, theta=theta, masks=masks)
    if masks is None:
        return theta, tape
    if masks.shape != theta.shape:
        raise ValueError("mask batch does not match the pixel batch")
    return (masks * theta) @ field.w.T, tape


def deferred_pixel_features(field: NestedField, weights: CompositeWeightsMap, plan: SamplePlan):
    """Train-time path for a full view: (H, W, D) features and their tape."""
    theta, tape = deferred_forward(field, weights.matrix, plan)
    return theta.reshape(weights.height, weights.width, -1), tape


def per_gaussian_pixel_features(field: NestedField, weights: CompositeWeightsMap, plan: SamplePlan) -> np.ndarray:
    """Test-time path: evaluate the field per Gaussian, then composite."""
    theta = field.mlp.forward(sample_triplane(field.triplane, None, plan))
    return np.asarray(weights.matrix @ theta).reshape(weights.height, weights.width, -1)


def backward_step(field: NestedField, tape: GradientTape, loss_gradients: np.ndarray) -> dict[str, np.ndarray]:
    """Parameter gradients given dL/d(output) of the recorded forward pass."""
    if tape.consumed:
        raise RuntimeError("tape was already used for a backward pass")
    g = np.asarray(loss_gradients, dtype=np.float64)
    if g.shape[0] != tape.theta.shape[0]:
        raise ValueError(f"gradient batch {g.shape[0]} != tape batch {tape.theta.shape[0]}")
    grads: dict[str, np.ndarray] = {}
    if tape.masks is not None:
        masked = tape.masks * tape.theta
        grads["w"] = g.T @ masked
        g = (g @ field.w) * tape.masks
    else:
        grads["w"] = np.zeros_like(field.w)
    g_tri_pix, gw, gb = field.mlp.backward(tape.mlp_cache, g)
    for i in range(len(gw)):
        grads[f"mlp.{i}.weight"] = gw[i]
        grads[f"mlp.{i}.bias"] = gb[i]
    g_tri = np.asarray(tape.rows.T @ g_tri_pix)
    grads["planes"] = triplane_backward(field.triplane, tape.plan, g_tri)
    tape.consumed = True
    return grads


class Adam:
    """Adam with one learning rate per parameter group (planes, mlp, w)."""

    def __init__(self, lrs: dict[str, float], betas=(0.9, 0.999), eps: float = 1e-15):
        self.lrs = lrs
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    @staticmethod
    def group_of(name: str) -> str:
        return name.split(".", 1)[0]

    def step(self, field: NestedField, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        params = field.parameters()
        for name, g in grads.items():
            p = params[name]
            if g.shape != p.shape:
                raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
            m = self.m.setdefault(name, np.zeros_like(p))
            v = self.v.setdefault(name, np.zeros_like(p))
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= self.lrs[self.group_of(name)] * (m / c1) / (np.sqrt(v / c2) + self.eps)


def apply_update(field: NestedField, grads: dict[str, np.ndarray], optimizer: Adam) -> None:
    optimizer.step(field, grads)


# --- checkpoint I/O ------------------------------------------------------------


def save_checkpoint(field: NestedField, path) -> None:
    cfg = field.config
    widths = [field.mlp.in_dim] + [w.shape[1] for w in field.mlp.weights]
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", CKPT_VERSION))
        fh.write(struct.pack("<5I", field.triplane.resolution, field.triplane.channels, cfg.hidden, field.dim, _COMBINE_CODES[field.triplane.combine]))
        fh.write(struct.pack("<I", len(widths)))
        fh.write(struct.pack(f"<{len(widths)}I", *widths))
        fh.write(np.concatenate([field.triplane.lo, field.triplane.hi]).astype("<f4").tobytes())
        fh.write(field.triplane.planes.astype("<f4").tobytes())
        for w, b in zip(field.mlp.weights, field.mlp.biases):
            fh.write(w.astype("<f4").tobytes())
            fh.write(b.astype("<f4").tobytes())
        fh.write(field.w.astype("<f4").tobytes())


def load_checkpoint(path) -> NestedField:
    data = Path(path).read_bytes()
    if data[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    off = 4
    try:
        (version,) = struct.unpack_from("<I", data, off)
        off += 4
        if version != CKPT_VERSION:
            raise CheckpointError(f"{path}: version {version}, expected {CKPT_VERSION}")
        r, c, hidden, d, comb = struct.unpack_from("<5I", data, off)
        off += 20
        (nw,) = struct.unpack_from("<I", data, off)
        off += 4
        widths = struct.unpack_from(f"<{nw}I", data, off)
        off += 4 * nw
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated header") from exc
    if widths[0] != c or widths[-1] != d:
        raise CheckpointError(f"{path}: MLP widths {widths} do not chain from C={c} to D={d}")

    def take(count, shape):
        nonlocal off
        end = off + 4 * count
        if end > len(data):
            raise CheckpointError(f"{path}: truncated payload")
        arr = np.frombuffer(data[off:end], dtype="<f4").astype(np.float64).reshape(shape)
        off = end
        return arr

    ext = take(6, (6,))
    planes = take(3 * r * r * c, (3, r, r, c))
    weights, biases = [], []
    for a, b in zip(widths[:-1], widths[1:]):
        weights.append(take(a * b, (a, b)))
        biases.append(take(b, (b,)))
    w = take(d * d, (d, d))
    combine = {v: k for k, v in _COMBINE_CODES.items()}[comb]
    cfg = FieldConfig(resolution=r, channels=c, hidden=hidden, dim=d, combine=combine, n_layers=nw - 1)
    return NestedField(TriPlane(planes, ext[:3], ext[3:], combine), Mlp(weights, biases), w, cfg)


def round_to_checkpoint_precision(field: NestedField) -> None:
    """Round parameters to float32 in place so in-memory state matches a saved checkpoint."""
    for arr in field.parameters().values():
        arr[...] = arr.astype(np.float32)
    field.triplane.lo = field.triplane.lo.astype(np.float32).astype(np.float64)
    field.triplane.hi = field.triplane.hi.astype(np.float32).astype(np.float64)
