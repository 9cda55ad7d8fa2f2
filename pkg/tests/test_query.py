import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nestfield.field import FieldConfig, NestedField, field_at
from nestfield.hierarchy import DimensionMap
from nestfield.metrics import iou, binarize, miou
from nestfield.query import (
    CanonicalSet,
    RelevancyMap,
    StaleCacheError,
    build_composite_cache,
    composite_direct,
    composite_map,
    explicit_scale_query,
    gamma_3d,
    load_relevancy,
    oracle_scale_query,
    per_scale_relevancy,
    relevancy,
    render_theta,
    reweight,
    save_relevancy,
    suffix_sums,
)
from nestfield.raster import FeatureMap, composite_weights

from conftest import axis_camera, single_scene

LO, HI = np.full(3, -1.0), np.full(3, 4.0)


def eye(d, i):
    return np.eye(d)[i]


def canon_of(*rows):
    return CanonicalSet(np.array(rows, dtype=float))


def random_field(dim=6, seed=0):
    f = NestedField.create(FieldConfig(resolution=8, channels=4, hidden=8, dim=dim), LO, HI, seed=seed)
    rng = np.random.default_rng(seed)
    f.triplane.planes[...] = rng.normal(scale=0.5, size=f.triplane.planes.shape)
    f.w[...] = rng.normal(size=f.w.shape)
    return f


# --- gamma and reweighting --------------------------------------------------------------


def test_gamma_uniform_for_zero_theta(rng):
    d = 7
    g = gamma_3d(np.zeros((3, d)), rng.normal(size=(d, d)), canon_of(eye(d, 0)))
    assert np.allclose(g, 1 / d)


def test_gamma_concentrates_on_full_dimension():
    d = 5
    theta = np.array([[0, 0, 0, 0, 10.0]])
    g = gamma_3d(theta, np.eye(d), canon_of(eye(d, 4)))
    assert int(np.argmax(g)) == d - 1
    assert g[0, -1] > 0.99


@settings(max_examples=50)
@given(st.integers(1, 32), st.integers(0, 10_000))
def test_gamma_on_simplex(d, seed):
    rng = np.random.default_rng(seed)
    canon = CanonicalSet(_units(rng, 3, d))
    g = gamma_3d(rng.normal(scale=3, size=(10, d)), rng.normal(size=(d, d)), canon)
    assert np.all(g >= 0)
    assert np.allclose(g.sum(axis=1), 1, atol=1e-6)


def _units(rng, n, d):
    v = rng.normal(size=(n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def test_gamma_matches_explicit_loop(rng):
    d = 6
    theta, w = rng.normal(size=(4, d)), rng.normal(size=(d, d))
    canon = CanonicalSet(_units(rng, 3, d))
    m = np.array([[max((w[:, :k] @ t[:k]) @ c for c in canon.vectors) for k in range(1, d + 1)] for t in theta])
    e = np.exp(m - m.max(axis=1, keepdims=True))
    assert np.allclose(gamma_3d(theta, w, canon), e / e.sum(axis=1, keepdims=True))


def test_reweight_examples(rng):
    theta = rng.normal(size=4)
    assert np.allclose(reweight(theta, eye(4, 3)), theta)
    assert np.allclose(reweight(theta, eye(4, 0)), [theta[0], 0, 0, 0])
    assert np.allclose(reweight(theta, np.full(4, 0.25)), [1, 0.75, 0.5, 0.25] * theta)


@given(st.integers(1, 20), st.integers(0, 10_000))
def test_suffix_sums_non_increasing_and_start_at_one(d, seed):
    g = np.random.default_rng(seed).dirichlet(np.ones(d))
    s = suffix_sums(g)
    assert s[0] == pytest.approx(1.0)
    assert np.all(np.diff(s) <= 1e-15)


@settings(max_examples=100)
@given(st.sampled_from([1, 4, 16, 64]), st.integers(0, 10_000))
def test_suffix_sum_identity(d, seed):
    rng = np.random.default_rng(seed)
    w, theta = rng.normal(size=(d, d)), rng.normal(size=(5, d))
    gamma = rng.dirichlet(np.ones(d), size=5)
    direct = composite_direct(theta, gamma, w)
    fast = reweight(theta, gamma) @ w.T
    assert np.linalg.norm(fast - direct) <= 1e-5 * max(np.linalg.norm(direct), 1e-12)


# --- composite maps -----------------------------------------------------------------------


def _one_gaussian(dim=6):
    scene = single_scene([[0.0, 0.0, 2.0]], scale=0.05)
    w = composite_weights(scene, axis_camera(32, 32, 60.0))
    return scene, w


def test_zero_field_gives_zero_composite():
    scene, w = _one_gaussian()
    f = NestedField.create(FieldConfig(resolution=8, channels=4, hidden=8, dim=6), LO, HI, seed=0)
    canon = canon_of(eye(6, 0))
    assert not composite_map(build_composite_cache(scene, f, canon), f, w).data.any()


def test_single_opaque_gaussian_composite():
    scene, w = _one_gaussian()
    f = random_field()
    canon = canon_of(eye(6, 0), eye(6, 1))
    cache = build_composite_cache(scene, f, canon)
    phi = composite_map(cache, f, w)
    assert phi.semantics == "composite-embedding"
    assert np.allclose(phi.data[16, 16], 0.99 * f.w @ cache.theta_tilde[0])
    # per pixel, equal to the direct weighted sum over scales of the same Gaussian
    direct = composite_direct(cache.theta, cache.gamma, f.w)[0]
    coverage = w.coverage.reshape(32, 32)
    assert np.allclose(phi.data, coverage[..., None] * direct, atol=1e-12)


def test_stale_cache_is_rejected():
    scene, w = _one_gaussian()
    f = random_field()
    cache = build_composite_cache(scene, f, canon_of(eye(6, 0)))
    f.w[0, 0] += 1.0
    with pytest.raises(StaleCacheError):
        composite_map(cache, f, w)


def test_cache_theta_is_field_at_means():
    scene, _ = _one_gaussian()
    f = random_field()
    cache = build_composite_cache(scene, f, canon_of(eye(6, 0)))
    assert np.allclose(cache.theta, field_at(f, scene.means.astype(float)))


# --- relevancy ----------------------------------------------------------------------------


def _emb_map(rows, valid=None):
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    return FeatureMap(rows.shape[0], 1, rows.shape[1], rows, valid=valid)


def test_relevancy_symmetric_logits():
    r = relevancy(_emb_map([eye(4, 0)]), eye(4, 1), canon_of(eye(4, 2), eye(4, 3)))
    assert r.values[0, 0] == pytest.approx(0.5)


def test_relevancy_aligned_query():
    r = relevancy(_emb_map([3 * eye(4, 0)]), eye(4, 0), canon_of(eye(4, 2), eye(4, 3)))
    assert r.values[0, 0] == pytest.approx(np.e / (np.e + 1))


def test_relevancy_zero_embedding_and_invalid_pixels():
    r = relevancy(_emb_map([np.zeros(4), eye(4, 0), eye(4, 0)], valid=np.array([[True, True, False]])), eye(4, 0), canon_of(eye(4, 1)))
    assert r.values[0, 0] == 0.0 and r.values[0, 1] > 0.5 and r.values[0, 2] == 0.0


@given(st.integers(0, 10_000))
def test_relevancy_in_unit_interval(seed):
    rng = np.random.default_rng(seed)
    d = 8
    r = relevancy(_emb_map(rng.normal(size=(20, d))), _units(rng, 1, d)[0], CanonicalSet(_units(rng, 3, d)))
    assert np.all((r.values >= 0) & (r.values <= 1))


def test_canonical_set_validation():
    with pytest.raises(ValueError):
        CanonicalSet(np.array([[1.0, 1.0]]))


def test_unknown_mode_rejected():
    with pytest.raises(ValueError):
        RelevancyMap(1, 1, np.zeros((1, 1)), mode="bogus")


# --- explicit and oracle baselines -----------------------------------------------------------


def test_explicit_single_dimension_equals_composite():
    scene = single_scene([[0.0, 0.0, 2.0], [0.1, 0.05, 2.4]], scale=0.08, opacity=0.7)
    w = composite_weights(scene, axis_camera(24, 24, 40.0))
    f = random_field(dim=1)
    canon = CanonicalSet(np.array([[1.0]]))
    q = np.array([-1.0])
    cache = build_composite_cache(scene, f, canon)
    comp = relevancy(composite_map(cache, f, w), q, canon)
    expl = explicit_scale_query(render_theta(cache, w), f.w, q, canon, DimensionMap(1))
    assert np.allclose(comp.values, expl.values)
    assert expl.chosen_scale == 1 and expl.evaluations == 1


def test_explicit_part_query_picks_finer_half():
    d = 8
    theta = np.array([1.0, 0, 0, 0, 0, 2.0, 0, 0])
    tmap = FeatureMap(1, 1, d, theta[None, :])
    canon = canon_of(eye(d, 7))
    part = explicit_scale_query(tmap, np.eye(d), theta / np.linalg.norm(theta), canon, DimensionMap(d))
    obj = explicit_scale_query(tmap, np.eye(d), eye(d, 0), canon, DimensionMap(d))
    assert part.chosen_scale > d // 2
    assert obj.chosen_scale <= d // 2
    assert part.evaluations == d


def test_explicit_respects_step_size(rng):
    tmap = FeatureMap(3, 1, 12, rng.normal(size=(3, 12)))
    r = explicit_scale_query(tmap, rng.normal(size=(12, 12)), eye(12, 0), canon_of(eye(12, 1)), DimensionMap(12, 5))
    assert r.evaluations == 2 and r.chosen_scale in (5, 10)


def _map(values, d=None, mode="explicit"):
    v = np.asarray(values, dtype=float)
    return RelevancyMap(v.shape[1], v.shape[0], v, mode=mode, chosen_scale=d)


def test_oracle_picks_constructed_optimum():
    gt = np.zeros((4, 4), dtype=bool)
    gt[1:3, 1:3] = True
    per_scale = {d: _map(np.random.default_rng(d).uniform(size=(4, 4)), d) for d in (1, 2, 3, 4)}
    per_scale[3] = _map(gt * 0.9 + 0.05, 3)
    best, val = oracle_scale_query(per_scale, lambda m: miou(m, gt))
    assert best.chosen_scale == 3 and val == 1.0 and best.mode == "oracle"


def test_oracle_dominates(rng):
    gt = rng.uniform(size=(6, 6)) < 0.3
    per_scale = {d: _map(rng.uniform(size=(6, 6)), d) for d in range(1, 9)}
    comp = _map(rng.uniform(size=(6, 6)), mode="composite")
    metric = lambda m: miou(m, gt)  # noqa: E731
    expl = max(per_scale.values(), key=lambda m: m.values.max())
    _, val = oracle_scale_query(per_scale, metric, comp)
    assert val >= metric(expl) >= 0 and val >= metric(comp)


def test_oracle_degenerate_single_scale():
    gt = np.eye(3, dtype=bool)
    m = _map(np.eye(3) * 0.5 + 0.1, 1)
    best, val = oracle_scale_query({1: m}, lambda x: miou(x, gt))
    assert val == miou(m, gt) and np.array_equal(best.values, m.values)


def test_oracle_requires_metric():
    with pytest.raises(ValueError):
        oracle_scale_query({1: _map(np.ones((1, 1)), 1)}, None)


def test_per_scale_relevancy_gates_invalid(rng):
    tmap = FeatureMap(2, 1, 4, rng.normal(size=(2, 4)), valid=np.array([[True, False]]))
    maps = per_scale_relevancy(tmap, rng.normal(size=(4, 4)), eye(4, 0), canon_of(eye(4, 1)), DimensionMap(4))
    assert sorted(maps) == [1, 2, 3, 4]
    assert all(m.values[0, 1] == 0 for m in maps.values())


# --- files ------------------------------------------------------------------------------


def test_relevancy_file_round_trip(tmp_path, rng):
    v = rng.uniform(0.2, 0.8, size=(5, 7))
    rel = RelevancyMap(7, 5, v, "q1", "explicit", 3)
    paths = save_relevancy(rel, tmp_path / "q1.pgm")
    assert paths[0].read_bytes().startswith(b"P5\n7 5\n255\n")
    back = load_relevancy(tmp_path / "q1.pgm")
    assert back.query_id == "q1" and back.mode == "explicit" and back.chosen_scale == 3
    assert np.allclose(back.values, v, atol=(v.max() - v.min()) / 255)
    assert back.values.flat[np.argmax(v)] == back.values.max()
