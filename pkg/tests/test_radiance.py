import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nerfedit.encodings import HashGridConfig
from nerfedit.errors import ContractError, TrainingDiverged
from nerfedit.grids import VoxelGrid
from nerfedit.radiance import (AnalyticFieldAdapter, RadianceField, composite,
                               fine_tune, make_train_state, psnr, ray_termination,
                               render_image, render_ray, render_rays, train)
from nerfedit.scenes import (RayDataset, generate_dataset, opaque_plane,
                             oracle_render, two_spheres)
from nerfedit.cameras import orbit_rig


def tiny_field(aabb=None, seed=0):
    cfg = HashGridConfig(levels=4, base_resolution=4, growth=1.5, features=2,
                         log2_table_size=8)
    return RadianceField(aabb if aabb is not None else [[-1, -1, -1], [1, 1, 1]],
                         seed=seed, grid_config=cfg, occupancy_resolution=16,
                         hidden=16, latent=7)


@pytest.fixture(scope="module")
def sphere_dataset(tmp_path_factory):
    scene = two_spheres()
    rig = orbit_rig(4, radius=2.7, width=24, height=24)
    root = tmp_path_factory.mktemp("ds")
    generate_dataset(scene, rig, root, n_quad=512)
    return scene, rig, RayDataset(root)


def test_composite_two_sample_hand_case():
    color, depth, alpha, w = composite(
        sigmas=[np.log(2.0), np.log(2.0)], deltas=[1.0, 1.0], t_next=[2.0, 3.0],
        colors=[[1, 0, 0], [0, 1, 0]])
    np.testing.assert_allclose(color, [0.5, 0.25, 0.0], atol=1e-6)
    assert abs(depth - 1.75) < 1e-6
    assert abs(alpha - 0.75) < 1e-6
    np.testing.assert_allclose(w, [0.5, 0.25], atol=1e-6)


def test_composite_opaque_first_sample():
    color, depth, alpha, _ = composite([1e6, 1.0], [1.0, 1.0], [2.0, 3.0],
                                       [[1, 0, 0], [0, 1, 0]])
    np.testing.assert_allclose(color, [1, 0, 0], atol=1e-6)
    assert abs(depth - 2.0) < 1e-6 and abs(alpha - 1.0) < 1e-6


def test_composite_transmittance_monotone():
    rng = np.random.default_rng(0)
    sig = rng.uniform(0, 3, 32)
    delta = np.full(32, 0.1)
    od = sig * delta
    trans = np.exp(-(np.cumsum(od) - od))
    assert np.all(np.diff(trans) <= 1e-12)


def test_render_ray_against_quadrature_oracle_on_analytic_field():
    scene = two_spheres()
    adapter = AnalyticFieldAdapter(scene)
    o = [2.5, 0.1, 0.05]
    d = [-1.0, 0.0, 0.0]
    res = render_ray(adapter, o, d, step_count=1024)
    ref = oracle_render(scene, [o], [d], n_quad=8192)
    step = float(np.linalg.norm(scene.aabb[1] - scene.aabb[0])) / 1024
    np.testing.assert_allclose(res.color, ref["raw"][0], atol=5e-3)
    assert abs(res.depth - ref["depth"][0]) < 2 * step
    assert abs(res.alpha - ref["alpha"][0]) < 1e-3


def test_render_ray_empty_space_no_termination():
    adapter = AnalyticFieldAdapter(two_spheres())
    res = render_ray(adapter, [0.0, 2.5, 0.0], [0.0, -1.0, 0.0])
    assert res.alpha < 1e-4 and res.depth < 1e-3
    assert ray_termination(adapter, [0.0, 2.5, 0.0], [0.0, -1.0, 0.0]) is None


def test_ray_termination_direct_substitution():
    adapter = AnalyticFieldAdapter(opaque_plane())
    x = ray_termination(adapter, [0.0, 0.0, 0.0], [0.0, 0.0, 1.0], step_count=1024)
    np.testing.assert_allclose(x, [0.0, 0.0, 2.0], atol=0.01)


def test_opaque_plane_depth_within_one_percent():
    # Eq.-4 depth through the marching path at a fine step count
    adapter = AnalyticFieldAdapter(opaque_plane())
    res = render_ray(adapter, [0.0, 0.0, 0.0], [0.0, 0.0, 1.0], step_count=1024)
    assert abs(res.depth - 2.0) < 0.01


def test_alpha_always_in_unit_interval():
    adapter = AnalyticFieldAdapter(two_spheres())
    rng = np.random.default_rng(1)
    o = rng.uniform(-2, 2, (64, 3)).astype(np.float32)
    d = rng.standard_normal((64, 3)).astype(np.float32)
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    out = render_rays(adapter, o, d)
    assert np.all(out["alpha"] >= 0.0) and np.all(out["alpha"] <= 1.0)


def test_occupancy_acceleration_matches_dense_marching():
    scene = two_spheres()
    # a grid that is a strict superset of the density support
    occ = VoxelGrid(32, scene.aabb)
    centers = occ.centers(np.arange(32 ** 3))
    occ.bits = scene.sdf_all(centers.astype(np.float32)).min(axis=1) < 0.1
    adapter = AnalyticFieldAdapter(scene, occupancy=occ)
    rng = np.random.default_rng(2)
    o = np.tile(np.array([[2.5, 0, 0]], np.float32), (1000, 1))
    d = np.stack([-np.ones(1000), rng.uniform(-0.4, 0.4, 1000),
                  rng.uniform(-0.4, 0.4, 1000)], axis=1).astype(np.float32)
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    fast = render_rays(adapter, o, d)
    dense = render_rays(adapter, o, d, use_occupancy=False)
    assert np.abs(fast["color"] - dense["color"]).max() < 1e-3
    assert np.abs(fast["alpha"] - dense["alpha"]).max() < 1e-3


def test_near_plane_cells_marked_off():
    field = tiny_field()
    origin = np.array([[0.0, 0.0, 0.0]])
    field.mark_near_plane(origin, near_distance=0.5)
    assert field.near_plane_mask.any()
    centers = field.occupancy.centers(np.flatnonzero(field.near_plane_mask))
    assert np.linalg.norm(centers, axis=1).max() < 0.5 + 0.2
    # refresh keeps them off even though the raw density is above threshold
    field.refresh_occupancy(np.random.default_rng(0), full=True)
    assert not field.occupancy.bits[field.near_plane_mask].any()


def test_train_requires_data_and_is_deterministic(sphere_dataset, tmp_path):
    _, _, ds = sphere_dataset

    def one_loss(seed):
        field = tiny_field(ds.aabb, seed=3)
        state = train(field, ds, iters=2, batch_rays=64, seed=seed, target_samples=2048)
        return state.log[-1][1], field.pos_encoding.table.data.copy()

    l1, t1 = one_loss(5)
    l2, t2 = one_loss(5)
    assert l1 == l2
    np.testing.assert_array_equal(t1, t2)


def test_zero_iteration_fine_tune_is_noop(sphere_dataset):
    _, _, ds = sphere_dataset
    field = tiny_field(ds.aabb)
    before = field.clone_snapshot()
    fine_tune(field, ds, iters=0)
    after = field.state_arrays()
    for k in before:
        np.testing.assert_array_equal(before[k], after[k])


def test_one_iteration_updates_only_trainable_arrays(sphere_dataset):
    _, _, ds = sphere_dataset
    field = tiny_field(ds.aabb)
    occ_before = field.occupancy.bits.copy()
    aabb_before = field.aabb.copy()
    train(field, ds, iters=1, batch_rays=32, seed=0, target_samples=1024)
    np.testing.assert_array_equal(field.aabb, aabb_before)
    np.testing.assert_array_equal(field.occupancy.bits, occ_before)  # refresh at 16
    changed = any(
        not np.array_equal(p.data, q) for p, q in zip(
            tiny_field(ds.aabb).parameters(),
            [p.data for p in field.parameters()]))
    assert changed


def test_checkpoint_roundtrip_preserves_renders(sphere_dataset, tmp_path):
    _, rig, ds = sphere_dataset
    field = tiny_field(ds.aabb, seed=1)
    train(field, ds, iters=20, batch_rays=64, seed=0, target_samples=2048)
    img1 = render_image(field, ds.poses[0], 16, 16, ds.focal * 16 / ds.width)
    field.save(tmp_path / "ckpt")
    loaded = RadianceField.load(tmp_path / "ckpt")
    img2 = render_image(loaded, ds.poses[0], 16, 16, ds.focal * 16 / ds.width)
    np.testing.assert_array_equal(img1["color"], img2["color"])
    np.testing.assert_array_equal(loaded.occupancy.bits, field.occupancy.bits)


def test_divergence_aborts_with_snapshot(sphere_dataset):
    _, _, ds = sphere_dataset
    field = tiny_field(ds.aabb)
    def poison(iteration, loss):
        if iteration == 2:
            field.color_mlp.layers[-1][0].data[0, 0] = np.nan

    with pytest.raises(TrainingDiverged) as exc:
        train(field, ds, iters=8, batch_rays=32, seed=1, target_samples=1024,
              callback=poison)
    assert exc.value.snapshot is not None
    # the field was rolled back to the last good snapshot (finite weights)
    assert np.all(np.isfinite(field.color_mlp.layers[-1][0].data))


def test_empty_dataset_rejected(tmp_path):
    field = tiny_field()

    class Empty:
        n_views = 0

    with pytest.raises(ContractError):
        train(field, Empty(), iters=1)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_composite_alpha_bounded_property(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 40))
    sig = rng.uniform(0, 50, n)
    deltas = rng.uniform(1e-4, 0.2, n)
    t = np.cumsum(deltas)
    colors = rng.uniform(0, 1, (n, 3))
    color, depth, alpha, w = composite(sig, deltas, t + deltas, colors)
    assert -1e-6 <= alpha <= 1.0 + 1e-6
    assert np.all(w >= -1e-9)
    assert np.all(color <= alpha + 1e-5)
