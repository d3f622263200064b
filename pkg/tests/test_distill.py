import numpy as np
import pytest
from PIL import Image
from hypothesis import given, settings
from hypothesis import strategies as st

from nerfedit.distill import (PROVENANCE_EDITED, PROVENANCE_ORIGINAL,
                              PROVENANCE_TRANSITION, build_blended_dataset, distill,
                              load_distill_checkpoint, save_distill_checkpoint)
from nerfedit.encodings import HashGridConfig
from nerfedit.grids import VoxelGrid
from nerfedit.palette import PaletteEdit, PaletteModel
from nerfedit.radiance import AnalyticFieldAdapter, RadianceField, fine_tune
from nerfedit.cameras import orbit_rig
from nerfedit.scenes import RayDataset, generate_dataset, two_spheres
from nerfedit.selection import extract_dataset


def tiny_field(aabb, seed=0):
    cfg = HashGridConfig(levels=3, base_resolution=4, growth=1.5, features=2,
                         log2_table_size=7)
    return RadianceField(aabb, seed=seed, grid_config=cfg,
                         occupancy_resolution=8, hidden=8, latent=4)


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    scene = two_spheres()
    rig = orbit_rig(3, radius=2.7, width=24, height=24)
    root = tmp_path_factory.mktemp("src")
    generate_dataset(scene, rig, root, n_quad=512)
    ds = RayDataset(root)
    adapter = AnalyticFieldAdapter(scene)
    edit_grid = VoxelGrid(64, scene.aabb)
    centers = edit_grid.centers(np.arange(64 ** 3))
    edit_grid.bits = scene.objects[0].sdf(centers.astype(np.float32)) < 0.0
    eds = extract_dataset(adapter, edit_grid, ds)
    model = PaletteModel(scene.aabb, seed=0)
    return scene, ds, eds, model


def test_blend_arithmetic_full_and_partial_alpha():
    # target = T_alpha * c_hat + (1 - T_alpha) * C
    t_alpha = np.array([[1.0], [0.75]])
    c_hat = np.array([[1.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
    gt = np.array([[0.0, 0.0, 1.0], [0.0, 0.0, 1.0]])
    target = t_alpha * c_hat + (1 - t_alpha) * gt
    np.testing.assert_allclose(target[0], [1.0, 0.0, 0.0])
    np.testing.assert_allclose(target[1], [0.75, 0.0, 0.25])


def test_blended_dataset_copies_recordless_pixels_bytewise(pipeline, tmp_path):
    scene, ds, eds, model = pipeline
    edit = PaletteEdit.identity(model.palette.data)
    edit.p_mod[0] = [0.0, 1.0, 0.0]
    blended, provenance = build_blended_dataset(model, edit, ds, eds, tmp_path / "bl")
    assert blended.n_views == ds.n_views
    for v in range(ds.n_views):
        src = ds.images[v]
        out = blended.images[v]
        recordless = eds.record_index[v] < 0
        np.testing.assert_array_equal(out[recordless], src[recordless])
        assert np.array_equal(provenance[v] == PROVENANCE_ORIGINAL, recordless)
        # alpha channel is preserved everywhere
        np.testing.assert_array_equal(out[..., 3], src[..., 3])


def test_blended_pixels_stay_convex_in_sources(pipeline, tmp_path):
    scene, ds, eds, model = pipeline
    edit = PaletteEdit.identity(model.palette.data)
    blended, _ = build_blended_dataset(model, edit, ds, eds, tmp_path / "bl2")
    rows = eds.view_records(0)
    with_pix = eds.pixels[rows]
    c_hat = model.compose_color(eds.x_term[rows], eds.dirs[rows])
    gt = eds.gt_rgb[rows]
    out = blended.images[0][with_pix[:, 0], with_pix[:, 1], :3] / 255.0
    lo = np.minimum(c_hat, gt) - 1 / 255.0
    hi = np.maximum(c_hat, gt) + 1 / 255.0
    assert np.all(out >= lo) and np.all(out <= hi)


def test_provenance_marks_transition_pixels(pipeline, tmp_path):
    scene, ds, eds, model = pipeline
    eds.d_trans = eds.d_trans.copy()
    rows = eds.view_records(0)
    eds.d_trans[rows[: rows.size // 2]] = 0.5
    edit = PaletteEdit.identity(model.palette.data)
    blended, provenance = build_blended_dataset(model, edit, ds, eds, tmp_path / "bl3")
    pix = eds.pixels[rows]
    half = rows.size // 2
    assert np.all(provenance[0][pix[:half, 0], pix[:half, 1]] == PROVENANCE_TRANSITION)
    assert np.all(provenance[0][pix[half:, 0], pix[half:, 1]] == PROVENANCE_EDITED)
    eds.d_trans[:] = 0.0
    # provenance PNG exists and decodes to the same map
    img = np.asarray(Image.open(tmp_path / "bl3" / "r_0.provenance.png"))
    np.testing.assert_array_equal(img, provenance[0])


def test_distill_runs_and_logs_trajectory(pipeline, tmp_path):
    scene, ds, eds, model = pipeline
    edit = PaletteEdit.identity(model.palette.data)
    blended, _ = build_blended_dataset(model, edit, ds, eds, tmp_path / "bl4")
    field = tiny_field(scene.aabb)
    mask = eds.record_index[0] >= 0
    state, traj = distill(field, blended, iters=6, eval_mask=mask,
                          batch_rays=32, target_samples=512, log_points=3)
    assert state.iteration == 6
    assert len(traj) >= 2
    assert {"iteration", "mse", "masked_mse", "background_mse"} <= set(traj[-1])


def test_interrupted_distillation_resumes_bit_exact(pipeline, tmp_path):
    scene, ds, eds, model = pipeline
    edit = PaletteEdit.identity(model.palette.data)
    blended, _ = build_blended_dataset(model, edit, ds, eds, tmp_path / "bl5")

    # uninterrupted run
    field_a = tiny_field(scene.aabb, seed=1)
    state_a = fine_tune(field_a, blended, iters=8, seed=5, batch_rays=32,
                        target_samples=512, refresh_every=4)

    # interrupted at 4 iterations, checkpointed, resumed for 4 more
    field_b = tiny_field(scene.aabb, seed=1)
    state_b = fine_tune(field_b, blended, iters=4, seed=5, batch_rays=32,
                        target_samples=512, refresh_every=4)
    save_distill_checkpoint(tmp_path / "resume", field_b, state_b)

    field_c = tiny_field(scene.aabb, seed=1)
    state_c = load_distill_checkpoint(tmp_path / "resume", field_c)
    fine_tune(field_c, blended, iters=4, state=state_c, batch_rays=32,
              target_samples=512, refresh_every=4)

    for key, arr in field_a.state_arrays().items():
        np.testing.assert_array_equal(arr, field_c.state_arrays()[key], err_msg=key)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_blend_convexity_property(seed):
    rng = np.random.default_rng(seed)
    t = rng.random((16, 1))
    a = rng.random((16, 3))
    b = rng.random((16, 3))
    out = t * a + (1 - t) * b
    assert np.all(out >= np.minimum(a, b) - 1e-12)
    assert np.all(out <= np.maximum(a, b) + 1e-12)
