import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nerfedit import autodiff as ad
from nerfedit.autodiff import Tensor
from nerfedit.encodings import (HASH_PRIMES, HashGrid, HashGridConfig,
                                hash_corners, sh_encode)
from nerfedit.errors import ContractError

from util import finite_difference_check


def small_grid(levels=1, res=4, log2=8, seed=0):
    cfg = HashGridConfig(levels=levels, base_resolution=res, growth=1.5,
                         features=2, log2_table_size=log2)
    return HashGrid(cfg, np.random.default_rng(seed))


def test_hash_matches_scripted_oracle():
    # corner (3, 1, 2) with a 16-entry table, from first principles
    expected = (3 * 1 ^ 1 * 2654435761 ^ 2 * 805459861) % 16
    assert hash_corners(np.array([[3, 1, 2]]), 16)[0] == expected


def test_full_level_matches_scripted_interpolation_oracle():
    enc = small_grid(levels=2, res=4, log2=6, seed=3)
    cfg = enc.config
    rng = np.random.default_rng(1)
    pts = rng.random((32, 3)).astype(np.float32)
    out = enc.encode(pts).data

    # independent oracle: per level, hash each corner and trilerp in float64
    expect = np.zeros((32, cfg.levels * cfg.features))
    for lvl, res in enumerate(cfg.resolutions()):
        scaled = pts.astype(np.float64) * res
        base = np.floor(scaled).astype(np.int64)
        frac = scaled - base
        acc = np.zeros((32, cfg.features))
        for cz in (0, 1):
            for cy in (0, 1):
                for cx in (0, 1):
                    corner = base + np.array([cx, cy, cz])
                    h = (corner[:, 0] * HASH_PRIMES[0]
                         ^ corner[:, 1] * HASH_PRIMES[1]
                         ^ corner[:, 2] * HASH_PRIMES[2]) % cfg.table_size
                    w = (np.where(cx, frac[:, 0], 1 - frac[:, 0])
                         * np.where(cy, frac[:, 1], 1 - frac[:, 1])
                         * np.where(cz, frac[:, 2], 1 - frac[:, 2]))
                    acc += w[:, None] * enc.table.data[h + lvl * cfg.table_size]
        expect[:, lvl * cfg.features:(lvl + 1) * cfg.features] = acc
    assert np.abs(out - expect).max() < 1e-6


def test_grid_vertex_snaps_to_table_entry():
    enc = small_grid(res=4, log2=8)
    p = np.array([[0.25, 0.5, 0.75]], dtype=np.float32)
    idx = hash_corners(np.array([[1, 2, 3]]), enc.config.table_size)[0]
    np.testing.assert_allclose(enc.encode(p).data[0], enc.table.data[idx], atol=1e-6)


def test_cell_center_is_mean_of_corners():
    enc = small_grid(res=4, log2=8)
    p = np.array([[1.5 / 4, 2.5 / 4, 0.5 / 4]], dtype=np.float32)
    corners = np.array([[1 + a, 2 + b, 0 + c] for c in (0, 1) for b in (0, 1) for a in (0, 1)])
    mean = enc.table.data[hash_corners(corners, enc.config.table_size)].mean(axis=0)
    np.testing.assert_allclose(enc.encode(p).data[0], mean, atol=1e-6)


def test_continuity_across_cell_faces():
    enc = small_grid(levels=3, res=4, log2=10, seed=2)
    rng = np.random.default_rng(0)
    eps = 5e-7
    for _ in range(20):
        face = rng.integers(1, 4) / 4.0  # a level-0 cell boundary plane
        p = rng.random(3).astype(np.float64)
        axis = rng.integers(0, 3)
        lo = p.copy()
        hi = p.copy()
        lo[axis] = face - eps
        hi[axis] = face + eps
        a = enc.encode(np.array([lo], dtype=np.float32)).data[0]
        b = enc.encode(np.array([hi], dtype=np.float32)).data[0]
        assert np.abs(a - b).max() < 1e-5


def test_outside_unit_cube_rejected():
    enc = small_grid()
    with pytest.raises(ContractError):
        enc.encode(np.array([[1.2, 0.0, 0.0]], dtype=np.float32))


def test_table_gradients_match_finite_differences():
    enc = small_grid(levels=2, res=4, log2=6, seed=4)
    pts = np.random.default_rng(5).random((10, 3)).astype(np.float32)

    def loss(table):
        return ad.tsum(enc.encode(pts) ** 2.0)

    finite_difference_check(loss, [enc.table])


def test_position_gradients_match_finite_differences():
    enc = small_grid(levels=2, res=4, log2=6, seed=6)
    p = Tensor(np.random.default_rng(7).uniform(0.3, 0.6, (5, 3)).astype(np.float32),
               requires_grad=True, name="p")

    def loss(pt):
        return ad.tsum(enc.encode_with_grad(pt) ** 2.0)

    finite_difference_check(loss, [p])


def test_shared_corner_sets_differ_only_by_weights():
    enc = small_grid(levels=1, res=4, log2=8, seed=8)
    # two positions inside the same cell
    p = np.array([[0.30, 0.30, 0.30], [0.45, 0.40, 0.35]], dtype=np.float32)
    idx, w, _, _ = enc._corner_data(p)
    assert np.array_equal(idx[0], idx[1])
    rows = enc.table.data[idx[0, 0]]
    np.testing.assert_allclose(enc.encode(p).data[0], (w[0, 0, :, None] * rows).sum(0), atol=1e-6)
    np.testing.assert_allclose(enc.encode(p).data[1], (w[1, 0, :, None] * rows).sum(0), atol=1e-6)


# -- spherical harmonics ---------------------------------------------------------


def test_sh_constant_band():
    d = np.array([0.3, 0.5, np.sqrt(1 - 0.09 - 0.25)], dtype=np.float32)
    np.testing.assert_allclose(sh_encode(d)[0], 0.28209479, atol=1e-6)


def test_sh_z_axis_band1():
    v = sh_encode(np.array([0.0, 0.0, 1.0], dtype=np.float32))
    np.testing.assert_allclose(v[2], 0.48860251, atol=1e-6)
    assert abs(v[1]) < 1e-7 and abs(v[3]) < 1e-7


def test_sh_rejects_non_unit():
    with pytest.raises(ContractError):
        sh_encode(np.array([[0.0, 0.0, 1.2]], dtype=np.float32))


def test_sh_monte_carlo_orthonormality():
    rng = np.random.default_rng(0)
    v = rng.standard_normal((200000, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    basis = sh_encode(v.astype(np.float32))
    # <Y_i, Y_j> over the sphere = (4*pi) * E[Y_i * Y_j] = delta_ij
    gram = 4.0 * np.pi * (basis.astype(np.float64).T @ basis.astype(np.float64)) / v.shape[0]
    assert np.abs(gram - np.eye(16)).max() < 2e-2


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_encode_finite_and_bounded(seed):
    enc = small_grid(levels=2, res=8, log2=8, seed=1)
    rng = np.random.default_rng(seed)
    pts = rng.random((16, 3)).astype(np.float32)
    out = enc.encode(pts).data
    assert np.all(np.isfinite(out))
    assert np.abs(out).max() <= np.abs(enc.table.data).max() + 1e-7
