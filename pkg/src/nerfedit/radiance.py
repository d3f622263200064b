"""The trainable radiance field: hash-encoded density/color networks,
occupancy-accelerated ray marching, volume rendering and the training loop.

Two render paths share the same math: a chunked no-grad marcher with early
termination for inference, and a dense tape-recorded path for training. The
low-level compositing lives in :func:`composite` so both can be tested
against hand-evaluated cases.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .cameras import ray_aabb, rays_for_pose
from .checkpoints import load_fragments, save_fragments
from .encodings import HashGrid, HashGridConfig, sh_encode
from .errors import ContractError, NumericError, TrainingDiverged
from .grids import VoxelGrid
from .nn import Adam, Mlp
from .scenes import AnalyticScene, RayDataset

SIGMA_CLAMP = 1e4
EARLY_STOP_TRANSMITTANCE = 1e-4
DEFAULT_STEP_COUNT = 256


@dataclass
class RenderResult:
    color: np.ndarray
    depth: float
    alpha: float
    samples: int


def composite(sigmas: np.ndarray, deltas: np.ndarray, t_next: np.ndarray,
              colors: np.ndarray):
    """Discrete volume rendering of one ray (reference implementation).

    color = sum_i T_i (1 - exp(-sigma_i delta_i)) c_i with
    T_i = exp(-sum_{j<i} sigma_j delta_j); depth uses the next sample time.
    """
    sigmas = np.asarray(sigmas, dtype=np.float64)
    deltas = np.asarray(deltas, dtype=np.float64)
    od = sigmas * deltas
    trans = np.exp(-(np.cumsum(od) - od))
    w = trans * (1.0 - np.exp(-od))
    color = (w[:, None] * np.asarray(colors, dtype=np.float64)).sum(axis=0)
    depth = float((w * np.asarray(t_next, dtype=np.float64)).sum())
    alpha = float(w.sum())
    return color.astype(np.float32), depth, alpha, w.astype(np.float32)


class AnalyticFieldAdapter:
    """Expose an analytic scene through the field protocol.

    Lets every marching/selection code path run against ground-truth density
    without training anything.
    """

    def __init__(self, scene: AnalyticScene, occupancy: VoxelGrid | None = None):
        self.scene = scene
        self.aabb = scene.aabb
        self.occupancy = occupancy or VoxelGrid(64, scene.aabb, fill=True)

    def sigma_color(self, p: np.ndarray, d: np.ndarray):
        return self.scene.density(p), self.scene.color(p, d)


class RadianceField:
    """Hash-encoded density + view-dependent color networks over an AABB."""

    def __init__(self, aabb, seed: int = 0, grid_config: HashGridConfig | None = None,
                 occupancy_resolution: int = 64, hidden: int = 64, latent: int = 15,
                 sh_degree: int = 4):
        self.aabb = np.asarray(aabb, dtype=np.float32).reshape(2, 3)
        rng = np.random.default_rng(seed)
        self.grid_config = grid_config or HashGridConfig(
            levels=12, base_resolution=16, growth=1.5, features=2, log2_table_size=16)
        self.seed = seed
        self.pos_encoding = HashGrid(self.grid_config, rng, name="field_pos")
        self.latent = latent
        self.sh_degree = sh_degree
        self.density_mlp = Mlp.create(
            [self.pos_encoding.out_dim, hidden, 1 + latent], "none", rng, name="field_density")
        self.color_mlp = Mlp.create(
            [latent + sh_degree * sh_degree, hidden, 3], "sigmoid", rng, name="field_color")
        self.occupancy = VoxelGrid(occupancy_resolution, self.aabb, fill=True)
        # +inf means "never probed": such cells stay conservatively occupied.
        self.occ_density = np.full(self.occupancy.bits.shape, np.inf, dtype=np.float32)
        self.near_plane_mask = np.zeros(self.occupancy.bits.shape, dtype=bool)
        self._refresh_phase = 0

    @classmethod
    def desk(cls, aabb, seed: int = 0, **kwargs) -> "RadianceField":
        """Desk-scale profile: a lighter hash grid sized for 64x64 datasets."""
        cfg = HashGridConfig(levels=10, base_resolution=16, growth=1.5,
                             features=2, log2_table_size=14)
        return cls(aabb, seed=seed, grid_config=cfg, **kwargs)

    # -- parameterization -------------------------------------------------------

    def parameters(self) -> list[Tensor]:
        return (self.pos_encoding.parameters()
                + self.density_mlp.parameters() + self.color_mlp.parameters())

    @property
    def scale(self) -> float:
        return float((self.aabb[1] - self.aabb[0]).max())

    @property
    def step_size(self) -> float:
        diag = float(np.linalg.norm(self.aabb[1] - self.aabb[0]))
        return diag / DEFAULT_STEP_COUNT

    def normalize(self, p: np.ndarray) -> np.ndarray:
        lo, hi = self.aabb
        return np.clip((p - lo) / (hi - lo), 0.0, 1.0).astype(np.float32)

    # -- field queries -----------------------------------------------------------

    def density_graph(self, p: np.ndarray):
        feats = self.pos_encoding.encode(self.normalize(p))
        h = self.density_mlp(feats)
        sigma = ad.exp(ad.clip(h[:, 0], None, math.log(SIGMA_CLAMP)))
        return sigma, h

    def query_graph(self, p: np.ndarray, d: np.ndarray):
        sigma, h = self.density_graph(p)
        sh = sh_encode(d, self.sh_degree)
        rgb = self.color_mlp(ad.concat([h[:, 1:], Tensor(sh)], axis=1))
        return sigma, rgb

    def sigma_at(self, p: np.ndarray, chunk: int = 65536) -> np.ndarray:
        out = np.empty(p.shape[0], dtype=np.float32)
        with ad.no_grad():
            for lo in range(0, p.shape[0], chunk):
                hi = min(lo + chunk, p.shape[0])
                out[lo:hi] = self.density_graph(p[lo:hi])[0].data
        return out

    def sigma_color(self, p: np.ndarray, d: np.ndarray):
        with ad.no_grad():
            sigma, rgb = self.query_graph(p, d)
        return sigma.data, rgb.data

    # -- occupancy maintenance ------------------------------------------------------

    def mark_near_plane(self, camera_origins: np.ndarray, near_distance: float) -> None:
        """Force cells within ``near_distance`` of any camera origin to empty."""
        centers = self.occupancy.centers(np.arange(self.occupancy.bits.size))
        mask = np.zeros(self.occupancy.bits.size, dtype=bool)
        for origin in np.atleast_2d(camera_origins):
            mask |= np.linalg.norm(centers - origin[None, :], axis=1) < near_distance
        self.near_plane_mask = mask
        self.occupancy.bits &= ~mask

    def refresh_occupancy(self, rng: np.random.Generator, threshold: float = 0.01,
                          subset: int = 8, full: bool = False) -> None:
        """Re-probe densities and re-threshold the bitfield.

        Each call probes 1/``subset`` of the cells (round-robin) at a jittered
        position inside the cell; ``full=True`` probes everything.
        """
        n = self.occ_density.size
        if full:
            sel = np.arange(n)
        else:
            sel = np.arange(self._refresh_phase % subset, n, subset)
            self._refresh_phase += 1
        centers = self.occupancy.centers(sel)
        jitter = (rng.random((sel.size, 3), dtype=np.float32) - 0.5) * self.occupancy.cell_size
        self.occ_density[sel] = self.sigma_at(centers + jitter)
        occupied = self.occ_density > threshold
        self.occupancy.bits = occupied & ~self.near_plane_mask

    # -- persistence -----------------------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        arrs = {}
        arrs.update(self.pos_encoding.state_arrays())
        arrs.update(self.density_mlp.state_arrays())
        arrs.update(self.color_mlp.state_arrays())
        arrs["field_occ_density"] = self.occ_density
        return arrs

    def load_state_arrays(self, arrs: dict[str, np.ndarray]) -> None:
        self.pos_encoding.load_state_arrays(arrs)
        self.density_mlp.load_state_arrays(arrs)
        self.color_mlp.load_state_arrays(arrs)
        if "field_occ_density" in arrs:
            self.occ_density = np.ascontiguousarray(arrs["field_occ_density"], dtype=np.float32)

    def save(self, directory: str | Path) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        extras = {
            "aabb": [[float(v) for v in row] for row in self.aabb],
            "grid_config": self.grid_config.to_dict(),
            "latent": self.latent,
            "sh_degree": self.sh_degree,
            "occupancy_resolution": self.occupancy.resolution,
        }
        save_fragments(directory / "field", self.state_arrays(), extras)
        self.occupancy.save(directory / "occupancy.grid")
        return directory

    @classmethod
    def load(cls, directory: str | Path) -> "RadianceField":
        directory = Path(directory)
        arrays, extras = load_fragments(directory / "field")
        field = cls(
            aabb=np.asarray(extras["aabb"], dtype=np.float32),
            grid_config=HashGridConfig.from_dict(extras["grid_config"]),
            occupancy_resolution=extras["occupancy_resolution"],
            latent=extras["latent"],
            sh_degree=extras["sh_degree"],
        )
        field.load_state_arrays(arrays)
        field.occupancy = VoxelGrid.load(directory / "occupancy.grid", aabb=field.aabb)
        field.occupancy.bits &= ~field.near_plane_mask
        return field

    def clone_snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.state_arrays().items()}


# -- inference marching -----------------------------------------------------------


def render_rays(field, origins: np.ndarray, dirs: np.ndarray,
                step_count: int | None = None, edit_grid: VoxelGrid | None = None,
                use_occupancy: bool = True, slab: int = 32,
                early_stop: float = EARLY_STOP_TRANSMITTANCE) -> dict[str, np.ndarray]:
    """March rays through the field without recording gradients.

    Skips cells the occupancy grid marks empty, stops once transmittance
    drops below ``early_stop`` and optionally accumulates the alpha restricted
    to an edit grid (the dual march used for selection and extraction).
    """
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float32))
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float32))
    n = origins.shape[0]
    aabb = field.aabb
    diag = float(np.linalg.norm(aabb[1] - aabb[0]))
    steps = step_count or DEFAULT_STEP_COUNT
    ds = diag / steps
    t0, t1, hit = ray_aabb(origins, dirs, aabb)

    color = np.zeros((n, 3), dtype=np.float32)
    depth = np.zeros(n, dtype=np.float32)
    alpha = np.zeros(n, dtype=np.float32)
    t_alpha = np.zeros(n, dtype=np.float32)
    samples = np.zeros(n, dtype=np.int64)

    active = np.flatnonzero(hit)
    trans = np.ones(active.size, dtype=np.float64)
    t_cur = t0[active].astype(np.float64) + 0.5 * ds
    max_slabs = int(math.ceil(diag / ds / slab)) + 1
    for _ in range(max_slabs):
        if active.size == 0:
            break
        offs = np.arange(slab, dtype=np.float64) * ds
        ts = t_cur[:, None] + offs[None, :]
        valid = ts < t1[active][:, None]
        pos = origins[active][:, None, :] + ts[..., None].astype(np.float32) * dirs[active][:, None, :]
        flat_pos = pos.reshape(-1, 3)
        occ = field.occupancy.test_points(flat_pos).reshape(ts.shape) if use_occupancy \
            else np.ones(ts.shape, dtype=bool)
        sel = valid & occ
        if sel.any():
            ridx, sidx = np.nonzero(sel)
            pts = pos[ridx, sidx]
            sig, col = field.sigma_color(pts, dirs[active][ridx])
            sig_d = np.zeros(ts.shape, dtype=np.float64)
            col_d = np.zeros(ts.shape + (3,), dtype=np.float32)
            sig_d[ridx, sidx] = sig
            col_d[ridx, sidx] = col
            od = sig_d * ds
            cum = np.cumsum(od, axis=1)
            t_i = trans[:, None] * np.exp(-(cum - od))
            w = t_i * (1.0 - np.exp(-od))
            rows = active
            color[rows] += (w[..., None] * col_d).sum(axis=1).astype(np.float32)
            depth[rows] += (w * (ts + ds)).sum(axis=1).astype(np.float32)
            alpha[rows] += w.sum(axis=1).astype(np.float32)
            if edit_grid is not None:
                inside = np.zeros(ts.shape, dtype=bool)
                inside[ridx, sidx] = edit_grid.test_points(pts)
                t_alpha[rows] += (w * inside).sum(axis=1).astype(np.float32)
            samples[rows] += sel.sum(axis=1)
            trans = trans * np.exp(-od.sum(axis=1))
        t_cur = t_cur + slab * ds
        keep = (trans > early_stop) & (t_cur < t1[active])
        active = active[keep]
        trans = trans[keep]
        t_cur = t_cur[keep]

    out = {"color": color, "depth": depth, "alpha": np.clip(alpha, 0.0, 1.0),
           "samples": samples}
    if edit_grid is not None:
        out["t_alpha"] = np.clip(t_alpha, 0.0, 1.0)
    return out


def render_ray(field, origin, direction, step_count: int | None = None) -> RenderResult:
    out = render_rays(field, origin, direction, step_count=step_count)
    return RenderResult(color=out["color"][0], depth=float(out["depth"][0]),
                        alpha=float(out["alpha"][0]), samples=int(out["samples"][0]))


def ray_termination(field, origin, direction, step_count: int | None = None):
    """Estimated termination point o + depth * d, or None when alpha is zero."""
    res = render_ray(field, origin, direction, step_count=step_count)
    if res.alpha <= 0.0:
        return None
    return np.asarray(origin, dtype=np.float32) + res.depth * np.asarray(direction, dtype=np.float32)


def render_image(field, pose, width: int, height: int, focal: float,
                 background=(1.0, 1.0, 1.0), step_count: int | None = None,
                 chunk: int = 8192) -> dict[str, np.ndarray]:
    o, d = rays_for_pose(pose, width, height, focal)
    color = np.zeros((height * width, 3), dtype=np.float32)
    depth = np.zeros(height * width, dtype=np.float32)
    alpha = np.zeros(height * width, dtype=np.float32)
    bg = np.asarray(background, dtype=np.float32)
    for lo in range(0, o.shape[0], chunk):
        hi = min(lo + chunk, o.shape[0])
        out = render_rays(field, o[lo:hi], d[lo:hi], step_count=step_count)
        color[lo:hi] = out["color"] + (1.0 - out["alpha"][:, None]) * bg
        depth[lo:hi] = out["depth"]
        alpha[lo:hi] = out["alpha"]
    return {"color": color.reshape(height, width, 3),
            "depth": depth.reshape(height, width),
            "alpha": alpha.reshape(height, width)}


# -- training --------------------------------------------------------------------


def _train_render_batch(field: RadianceField, origins, dirs, rng: np.random.Generator,
                        step_count: int):
    """Tape-recorded rendering of a ray batch (jittered uniform stepping)."""
    aabb = field.aabb
    diag = float(np.linalg.norm(aabb[1] - aabb[0]))
    ds = diag / step_count
    t0, t1, hit = ray_aabb(origins, dirs, aabb)
    n = origins.shape[0]
    n_slots = int(min(step_count, math.ceil((t1 - t0).max() / ds))) if hit.any() else 1
    jitter = rng.random(n, dtype=np.float32)
    ts = t0[:, None] + (np.arange(n_slots, dtype=np.float32)[None, :] + jitter[:, None]) * ds
    valid = (ts < t1[:, None]) & hit[:, None]
    pos = origins[:, None, :] + ts[..., None] * dirs[:, None, :]
    occ = field.occupancy.test_points(pos.reshape(-1, 3)).reshape(ts.shape)
    sel = valid & occ
    ridx, sidx = np.nonzero(sel)
    if ridx.size == 0:
        zero3 = Tensor(np.zeros((n, 3), dtype=np.float32))
        zero1 = Tensor(np.zeros(n, dtype=np.float32))
        return zero3, zero1, zero1, 0
    sigma, rgb = field.query_graph(pos[ridx, sidx], dirs[ridx])
    sig_d = ad.scatter(sigma, (ridx, sidx), (n, n_slots))
    col_d = ad.scatter(rgb, (ridx, sidx), (n, n_slots, 3))
    od = sig_d * ds
    cum = ad.cumsum(od, axis=1)
    trans = ad.exp(od - cum)  # exp(-(cum - od)) = exclusive-prefix transmittance
    w = trans * (1.0 - ad.exp(-od))
    color = ad.tsum(ad.reshape(w, (n, n_slots, 1)) * col_d, axis=1)
    alpha = ad.tsum(w, axis=1)
    depth = ad.tsum(w * (ts + ds), axis=1)
    return color, alpha, depth, ridx.size


@dataclass
class TrainState:
    optimizer: Adam
    rng: np.random.Generator
    iteration: int = 0
    log: list = dc_field(default_factory=list)
    # samples-per-ray EMA driving the adaptive batch; persisted so resumed
    # runs consume the rng stream identically to uninterrupted ones
    avg_spr: float | None = None


def make_train_state(field: RadianceField, lr: float = 1e-2, seed: int = 0) -> TrainState:
    return TrainState(optimizer=Adam(field.parameters(), lr=lr),
                      rng=np.random.default_rng(seed))


def train(field: RadianceField, dataset: RayDataset, iters: int,
          batch_rays: int = 512, lr: float = 1e-2, seed: int = 0,
          state: TrainState | None = None, refresh_every: int = 16,
          occupancy_threshold: float = 0.01, near_distance: float | None = None,
          step_count: int = DEFAULT_STEP_COUNT, log_every: int = 50,
          callback=None, snapshot_every: int = 250,
          target_samples: int = 16384) -> TrainState:
    """Photometric MSE training over random ray batches.

    Every batch is alpha-composited over one random background color; the
    occupancy grid is re-thresholded every ``refresh_every`` iterations and
    cells in front of any camera's near plane stay off. The effective batch
    shrinks below ``batch_rays`` whenever the per-ray sample count would
    exceed the ``target_samples`` compute budget (dense early grids).
    """
    if dataset.n_views == 0:
        raise ContractError("training requires a non-empty dataset")
    if state is None:
        state = make_train_state(field, lr=lr, seed=seed)
        if near_distance is None:
            near_distance = 0.05 * field.scale
        cams = dataset.poses[:, :3, 3]
        field.mark_near_plane(cams, near_distance)

    origins_all = np.stack([dataset.rays(v)[0] for v in range(dataset.n_views)])
    dirs_all = np.stack([dataset.rays(v)[1] for v in range(dataset.n_views)])
    pixels_all = np.stack([dataset.pixels_float(v) for v in range(dataset.n_views)])
    total = dataset.n_views * dataset.n_pixels

    rng = state.rng
    opt = state.optimizer
    snapshot = field.clone_snapshot()
    if state.avg_spr is None:
        state.avg_spr = float(step_count) / 2.0
    end = state.iteration + iters
    while state.iteration < end:
        state.iteration += 1
        n_rays = int(np.clip(target_samples / max(state.avg_spr, 1.0), 64, batch_rays))
        flat = rng.integers(0, total, size=n_rays)
        v = flat // dataset.n_pixels
        pix = flat % dataset.n_pixels
        o = origins_all[v, pix]
        d = dirs_all[v, pix]
        gt = pixels_all[v, pix]
        bg = rng.random(3, dtype=np.float32)
        gt_rgb = gt[:, :3] * gt[:, 3:4] + bg[None, :] * (1.0 - gt[:, 3:4])

        color, alpha, _, n_samples = _train_render_batch(field, o, d, rng, step_count)
        state.avg_spr = 0.7 * state.avg_spr + 0.3 * (n_samples / n_rays)
        full = color + ad.reshape(1.0 - alpha, (n_rays, 1)) * bg
        loss = ad.tmean((full - gt_rgb) ** 2.0)
        if not np.isfinite(loss.data):
            field.load_state_arrays(snapshot)
            raise TrainingDiverged("radiance training loss became non-finite",
                                   snapshot=snapshot, iteration=state.iteration)
        ad.backward(loss)
        try:
            opt.step()
        except NumericError:
            field.load_state_arrays(snapshot)
            raise
        if state.iteration % refresh_every == 0:
            field.refresh_occupancy(rng, threshold=occupancy_threshold)
        if state.iteration % snapshot_every == 0:
            snapshot = field.clone_snapshot()
        if state.iteration % log_every == 0 or state.iteration == end:
            state.log.append((state.iteration, float(loss.data)))
        if callback is not None:
            callback(state.iteration, float(loss.data))
    return state


def finalize_occupancy(field: RadianceField, seed: int = 0,
                       threshold: float = 0.01) -> None:
    """Full-grid density probe after training; callers run this once per
    finished pipeline stage (it is deliberately not part of the resumable
    training loop)."""
    field.refresh_occupancy(np.random.default_rng(seed), threshold=threshold, full=True)


def fine_tune(field: RadianceField, dataset: RayDataset, iters: int,
              lr_scale: float = 0.1, base_lr: float = 1e-2, seed: int = 1,
              state: TrainState | None = None, **kwargs) -> TrainState:
    """Continue training an already-trained field on a (blended) dataset.

    Runs the same loop at a reduced learning rate so the edit is absorbed
    without disturbing the background.
    """
    if iters <= 0:
        return state or make_train_state(field, lr=base_lr * lr_scale, seed=seed)
    return train(field, dataset, iters, lr=base_lr * lr_scale, seed=seed,
                 state=state, **kwargs)


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    mse = float(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2))
    if mse == 0:
        return float("inf")
    return -10.0 * math.log10(mse)
