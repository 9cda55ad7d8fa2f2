import numpy as np
import pytest
import scipy.sparse as sp

from nestfield.field import (
    Adam,
    CheckpointError,
    FieldConfig,
    Mlp,
    NestedField,
    TriPlane,
    backward_step,
    deferred_forward,
    deferred_pixel_features,
    field_at,
    load_checkpoint,
    make_sample_plan,
    per_gaussian_pixel_features,
    round_to_checkpoint_precision,
    sample_triplane,
    save_checkpoint,
)
from nestfield.hierarchy import batch_hierarchical_loss
from nestfield.raster import composite_weights

from conftest import axis_camera, single_scene

LO, HI = np.array([-1.0, -1.0, -1.0]), np.array([1.0, 1.0, 1.0])
SMALL = FieldConfig(resolution=8, channels=4, hidden=8, dim=8)


def random_field(cfg=SMALL, seed=0, plane_scale=0.5, bias_scale=0.1):
    f = NestedField.create(cfg, LO, HI, seed=seed)
    rng = np.random.default_rng(seed + 100)
    f.triplane.planes[...] = rng.normal(scale=plane_scale, size=f.triplane.planes.shape)
    for b in f.mlp.biases:
        b[...] = rng.normal(scale=bias_scale, size=b.shape)
    f.w[...] = rng.normal(scale=0.5, size=f.w.shape)
    return f


# --- triplane ------------------------------------------------------------------------


def test_zero_planes_give_zero_features(rng):
    tri = TriPlane(np.zeros((3, 8, 8, 4)), LO, HI)
    assert not sample_triplane(tri, rng.uniform(-1, 1, (20, 3))).any()


def test_constant_planes_sum_to_three_v(rng):
    v = np.array([0.5, -1.0, 2.0])
    tri = TriPlane(np.broadcast_to(v, (3, 6, 6, 3)).copy(), LO, HI)
    assert np.allclose(sample_triplane(tri, rng.uniform(-1, 1, (10, 3))), 3 * v)


def test_texel_center_sampling_is_exact(rng):
    r = 5
    planes = rng.normal(size=(3, r, r, 2))
    tri = TriPlane(planes, np.zeros(3), np.ones(3))
    i, j, k = 1, 3, 4
    point = np.array([[i, j, k]]) / (r - 1)
    expected = planes[0, i, j] + planes[1, i, k] + planes[2, j, k]
    assert np.allclose(sample_triplane(tri, point), expected, atol=1e-12)


def test_bilinear_midpoint(rng):
    planes = np.zeros((3, 2, 2, 1))
    planes[0, :, :, 0] = [[0.0, 1.0], [2.0, 3.0]]
    tri = TriPlane(planes, np.zeros(3), np.ones(3))
    assert sample_triplane(tri, np.array([[0.5, 0.5, 0.0]]))[0, 0] == pytest.approx(1.5)


def test_out_of_extent_points_clamp(rng):
    planes = rng.normal(size=(3, 6, 6, 3))
    tri = TriPlane(planes, LO, HI)
    inside = sample_triplane(tri, np.array([[1.0, -1.0, 1.0]]))
    outside = sample_triplane(tri, np.array([[5.0, -7.0, 3.0]]))
    assert np.allclose(inside, outside)


def test_product_combine(rng):
    planes = rng.normal(size=(3, 4, 4, 2))
    sum_tri, prod_tri = TriPlane(planes, LO, HI, "sum"), TriPlane(planes, LO, HI, "product")
    pts = np.array([[-1.0, -1.0, -1.0]])
    assert np.allclose(sample_triplane(sum_tri, pts), planes[0, 0, 0] + planes[1, 0, 0] + planes[2, 0, 0])
    assert np.allclose(sample_triplane(prod_tri, pts), planes[0, 0, 0] * planes[1, 0, 0] * planes[2, 0, 0])


# --- field evaluation -------------------------------------------------------------------


def test_create_initialization():
    f = NestedField.create(FieldConfig(resolution=8, channels=4, hidden=8, dim=6, init_plane_range=1e-4), LO, HI, seed=3)
    assert not f.w.any()
    assert all(not b.any() for b in f.mlp.biases)
    assert np.abs(f.triplane.planes).max() <= 1e-4
    assert [w.shape for w in f.mlp.weights] == [(4, 8), (8, 8), (8, 6)]


def test_zero_mlp_gives_zero_output(rng):
    f = random_field()
    for w in f.mlp.weights:
        w[...] = 0
    for b in f.mlp.biases:
        b[...] = 0
    assert not field_at(f, rng.uniform(-1, 1, (5, 3))).any()


def test_single_identity_layer_reproduces_triplane(rng):
    cfg = FieldConfig(resolution=8, channels=4, hidden=4, dim=4, n_layers=1)
    f = random_field(cfg)
    f.mlp.weights[0][...] = np.eye(4)
    f.mlp.biases[0][...] = 0
    pts = rng.uniform(-1, 1, (12, 3))
    assert np.allclose(field_at(f, pts), sample_triplane(f.triplane, pts))


def test_field_at_is_deterministic(rng):
    f = random_field()
    pts = rng.uniform(-1, 1, (30, 3))
    assert np.array_equal(field_at(f, pts), field_at(f, pts))


def test_non_finite_parameters_fail_with_location():
    f = random_field()
    f.mlp.weights[1][2, 5] = np.nan
    with pytest.raises(FloatingPointError, match=r"mlp\.1\.weight.*\(2, 5\)"):
        field_at(f, np.zeros((1, 3)))


def test_mlp_shape_chain_is_validated():
    with pytest.raises(ValueError):
        Mlp([np.zeros((4, 8)), np.zeros((7, 3))], [np.zeros(8), np.zeros(3)])


def _central_jacobian_check(f, pts, eps=1e-4):
    """Reverse-mode input Jacobian-vector products against central differences."""
    rng = np.random.default_rng(9)
    tri = sample_triplane(f.triplane, pts)
    cache = []
    out = f.mlp.forward(tri, cache)
    v = rng.normal(size=out.shape)
    g_in, _, _ = f.mlp.backward(cache, v)
    for _ in range(5):
        u = rng.normal(size=tri.shape)
        fd = (np.sum(v * f.mlp.forward(tri + eps * u)) - np.sum(v * f.mlp.forward(tri - eps * u))) / (2 * eps)
        an = np.sum(g_in * u)
        assert abs(fd - an) <= 1e-4 * max(abs(fd), abs(an), 1e-8)


def test_field_jacobian_matches_finite_differences(rng):
    _central_jacobian_check(random_field(), rng.uniform(-1, 1, (10, 3)))


# --- gradients of the training objective -----------------------------------------------------


def _loss_setup(seed=0, combine="sum"):
    rng = np.random.default_rng(seed)
    cfg = FieldConfig(resolution=8, channels=4, hidden=8, dim=8, combine=combine)
    f = random_field(cfg, seed)
    n_gauss, batch = 12, 6
    plan = make_sample_plan(f.triplane, rng.uniform(-1, 1, (n_gauss, 3)))
    rows = sp.csr_matrix(rng.uniform(0, 0.3, (batch, n_gauss)) * (rng.uniform(size=(batch, n_gauss)) < 0.6))
    masks = (np.arange(8)[None, :] < rng.integers(1, 9, batch)[:, None]).astype(float)
    target = rng.normal(size=(batch, 8))
    target /= np.linalg.norm(target, axis=1, keepdims=True)
    lam = 0.3

    def loss_fn():
        phi, tape = deferred_forward(f, rows, plan, masks)
        return batch_hierarchical_loss(phi, target, lam, reduce="sum"), tape

    return f, loss_fn


@pytest.mark.parametrize("combine", ["sum", "product"])
def test_parameter_gradients_match_finite_differences(combine):
    f, loss_fn = _loss_setup(1, combine)
    (loss, dphi), tape = loss_fn()
    grads = backward_step(f, tape, dphi)
    rng = np.random.default_rng(5)
    params = f.parameters()
    eps = 1e-4
    checked = {}
    for name, p in params.items():
        n_probe = 20 if name in ("planes", "w") else 6
        flat = p.reshape(-1)
        gflat = grads[name].reshape(-1)
        if name == "planes":
            # probe texels that the sample plan actually touches
            candidates = np.flatnonzero(gflat)
        else:
            candidates = np.arange(flat.size)
        for idx in rng.choice(candidates, size=min(n_probe, candidates.size), replace=False):
            old = flat[idx]
            flat[idx] = old + eps
            lp = loss_fn()[0][0]
            flat[idx] = old - eps
            lm = loss_fn()[0][0]
            flat[idx] = old
            fd = (lp - lm) / (2 * eps)
            an = gflat[idx]
            assert abs(fd - an) <= 1e-4 * max(abs(fd), abs(an), 1e-6), (name, idx, fd, an)
        checked[name] = True
    assert set(checked) == set(params)


def test_tape_is_single_use():
    f, loss_fn = _loss_setup()
    (loss, dphi), tape = loss_fn()
    backward_step(f, tape, dphi)
    with pytest.raises(RuntimeError):
        backward_step(f, tape, dphi)


def test_tape_batch_mismatch():
    f, loss_fn = _loss_setup()
    (loss, dphi), tape = loss_fn()
    with pytest.raises(ValueError):
        backward_step(f, tape, dphi[:-1])


def test_zero_gradients_leave_parameters_unchanged():
    f = random_field()
    before = f.copy()
    opt = Adam({"planes": 0.1, "mlp": 0.1, "w": 0.1})
    opt.step(f, {k: np.zeros_like(v) for k, v in f.parameters().items()})
    assert f.checksum() == before.checksum()


def test_identical_steps_are_deterministic():
    results = []
    for _ in range(2):
        f, loss_fn = _loss_setup(2)
        opt = Adam({"planes": 0.01, "mlp": 0.01, "w": 0.01})
        for _ in range(3):
            (loss, dphi), tape = loss_fn()
            opt.step(f, backward_step(f, tape, dphi))
        results.append(f.checksum())
    assert results[0] == results[1]


def test_adam_first_step_moves_by_learning_rate():
    f = random_field()
    before = f.w.copy()
    g = np.sign(np.random.default_rng(0).normal(size=f.w.shape))
    Adam({"planes": 0.0, "mlp": 0.0, "w": 0.01}).step(f, {"w": g})
    assert np.allclose(before - f.w, 0.01 * g)


# --- deferred vs per-Gaussian ----------------------------------------------------------------


def _scene_and_plan(f, means, opacity=1.0, scale=0.05):
    scene = single_scene(means, scale=scale, opacity=opacity)
    cam = axis_camera(48, 48, 60.0)
    w = composite_weights(scene, cam)
    return w, make_sample_plan(f.triplane, scene.means.astype(np.float64))


def test_zero_mlp_deferred_is_zero():
    f = random_field()
    for w in f.mlp.weights:
        w[...] = 0
    for b in f.mlp.biases:
        b[...] = 0
    w, plan = _scene_and_plan(f, [[0, 0, 2], [0.1, 0, 2.5]])
    out, _ = deferred_pixel_features(f, w, plan)
    assert not out.any()


def test_linear_mlp_commutes_with_rendering(rng):
    cfg = FieldConfig(resolution=8, channels=4, hidden=8, dim=6, n_layers=1)
    f = random_field(cfg)
    f.mlp.biases[0][...] = 0
    means = np.column_stack([rng.uniform(-0.3, 0.3, (15, 2)), rng.uniform(1.5, 3, 15)])
    w, plan = _scene_and_plan(f, means, opacity=0.8, scale=0.08)
    a, _ = deferred_pixel_features(f, w, plan)
    b = per_gaussian_pixel_features(f, w, plan)
    assert np.allclose(a, b, atol=1e-5 * np.abs(b).max())


def test_relu_mlp_without_clipping_commutes(rng):
    f = random_field(bias_scale=0.0)
    for w in f.mlp.weights:
        w[...] = np.abs(w)
    f.triplane.planes[...] = np.abs(f.triplane.planes)
    means = np.column_stack([rng.uniform(-0.3, 0.3, (15, 2)), rng.uniform(1.5, 3, 15)])
    w, plan = _scene_and_plan(f, means, opacity=0.8, scale=0.08)
    a, _ = deferred_pixel_features(f, w, plan)
    b = per_gaussian_pixel_features(f, w, plan)
    assert np.allclose(a, b, atol=1e-5 * np.abs(b).max())


def test_single_dominant_gaussian_pixel():
    f = random_field()
    w, plan = _scene_and_plan(f, [[0, 0, 2]])
    a, _ = deferred_pixel_features(f, w, plan)
    b = per_gaussian_pixel_features(f, w, plan)
    y = x = 24
    assert w.pixel(x, y)[0][1] == pytest.approx(0.99)
    assert np.linalg.norm(a[y, x] - b[y, x]) <= 0.02 * np.linalg.norm(b[y, x])


def test_binary_opacity_non_overlapping_at_clamped_pixels():
    f = random_field(seed=4)
    xs = np.linspace(-0.5, 0.5, 5)
    means = np.array([[x, y, 2.0] for x in xs for y in xs])
    w, plan = _scene_and_plan(f, means, opacity=1.0, scale=0.02)
    a, _ = deferred_pixel_features(f, w, plan)
    b = per_gaussian_pixel_features(f, w, plan)
    counts = np.diff(w.indptr)
    dominant = (counts == 1) & (w.matrix.max(axis=1).toarray().ravel() >= 0.98)
    assert dominant.sum() >= 5
    rel = np.linalg.norm((a - b).reshape(-1, f.dim), axis=1) / np.linalg.norm(b.reshape(-1, f.dim), axis=1).clip(1e-12)
    assert np.all(rel[dominant] <= 0.02)


# --- checkpoints ---------------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    f = random_field()
    round_to_checkpoint_precision(f)
    save_checkpoint(f, tmp_path / "f.nfck")
    g = load_checkpoint(tmp_path / "f.nfck")
    assert g.checksum() == f.checksum()
    assert np.array_equal(g.triplane.lo, f.triplane.lo)
    assert g.config == f.config


def test_checkpoint_errors(tmp_path):
    f = random_field()
    save_checkpoint(f, tmp_path / "f.nfck")
    data = (tmp_path / "f.nfck").read_bytes()
    (tmp_path / "bad.nfck").write_bytes(b"XXXX" + data[4:])
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(tmp_path / "bad.nfck")
    (tmp_path / "short.nfck").write_bytes(data[:-10])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(tmp_path / "short.nfck")
    (tmp_path / "hdr.nfck").write_bytes(data[:12])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "hdr.nfck")
    broken = bytearray(data)
    broken[4 + 4 + 12:4 + 4 + 16] = (99).to_bytes(4, "little")  # D no longer matches the MLP output width
    (tmp_path / "chain.nfck").write_bytes(bytes(broken))
    with pytest.raises(CheckpointError, match="chain"):
        load_checkpoint(tmp_path / "chain.nfck")
