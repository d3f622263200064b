"""Palette-based appearance model over estimated ray terminations.

A hash-encoded weight network predicts barycentric weights over a small set
of learnable base colors; an offset network adds a bounded view-dependent
correction. Output colors are clamp(w^T P + offset). After training, users
recolor by editing the palette (and optionally per-palette weights/biases)
without touching the networks.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import style as style_mod
from .autodiff import Tensor
from .cameras import rays_for_pose
from .checkpoints import load_fragments, save_fragments
from .encodings import HashGrid, HashGridConfig, sh_encode
from .errors import ContractError, NumericError, TrainingDiverged
from .nn import Adam, Mlp
from .radiance import render_rays
from .selection import EditDataset, transition_weights
from .style import LossWeights, StyleConfig, warmup_schedule

NEG_MASK_LOGIT = -1e9


@dataclass
class PaletteEdit:
    """Post-training palette modifications; initialized to the identity."""

    p_mod: np.ndarray
    weights: np.ndarray
    biases: np.ndarray

    @classmethod
    def identity(cls, palette: np.ndarray) -> "PaletteEdit":
        n = palette.shape[0]
        return cls(p_mod=np.array(palette, dtype=np.float32, copy=True),
                   weights=np.ones(n, dtype=np.float32),
                   biases=np.zeros(n, dtype=np.float32))

    def is_identity(self, palette: np.ndarray) -> bool:
        return (np.array_equal(self.p_mod, palette)
                and np.all(self.weights == 1.0) and np.all(self.biases == 0.0))

    def to_json(self) -> str:
        return json.dumps({
            "p_mod": self.p_mod.tolist(),
            "weights": self.weights.tolist(),
            "biases": self.biases.tolist(),
        })

    @classmethod
    def from_json(cls, text: str) -> "PaletteEdit":
        d = json.loads(text)
        return cls(np.asarray(d["p_mod"], dtype=np.float32),
                   np.asarray(d["weights"], dtype=np.float32),
                   np.asarray(d["biases"], dtype=np.float32))


def transform_weights(w: np.ndarray, edit: PaletteEdit,
                      active: np.ndarray | None = None) -> np.ndarray:
    """Per-palette linear re-weighting: clip(w * W_p + b_p, >= 0), renormalized.

    If the transform zeroes every weight of a ray, that ray keeps its
    original weights (the only renormalization that stays on the simplex).
    """
    w = np.asarray(w, dtype=np.float32)
    t = w * edit.weights[None, :] + edit.biases[None, :]
    if active is not None:
        t = t * active[None, :]
    t = np.maximum(t, 0.0)
    total = t.sum(axis=1, keepdims=True)
    dead = total[:, 0] < 1e-8
    t = np.divide(t, np.maximum(total, 1e-8), dtype=np.float32)
    if dead.any():
        t[dead] = w[dead]
    return t


class PaletteModel:
    def __init__(self, aabb, n_palette: int = 8, seed: int = 0,
                 grid_config: HashGridConfig | None = None, hidden: int = 64,
                 sh_degree: int = 4):
        self.aabb = np.asarray(aabb, dtype=np.float32).reshape(2, 3)
        self.n_palette = n_palette
        self.sh_degree = sh_degree
        rng = np.random.default_rng(seed)
        self.grid_config = grid_config or HashGridConfig(
            levels=8, base_resolution=16, growth=1.5, features=2, log2_table_size=14)
        self.pos_encoding = HashGrid(self.grid_config, rng, name="palette_pos")
        feat = self.pos_encoding.out_dim
        sh_dim = sh_degree * sh_degree
        # The weight trunk sees the features padded with a block of ones the
        # width of the SH features, so both trunks share the same input width.
        self.weight_mlp = Mlp.create([feat + sh_dim, hidden, n_palette], "none",
                                     rng, name="palette_weight")
        self.offset_mlp = Mlp.create([feat + sh_dim, hidden, 3], "tanh",
                                     rng, name="palette_offset")
        self.palette = Tensor(rng.random((n_palette, 3)).astype(np.float32),
                              requires_grad=True, name="palette_colors")
        self.active_mask = np.ones(n_palette, dtype=bool)

    @property
    def n_active(self) -> int:
        return int(self.active_mask.sum())

    def parameters(self) -> list[Tensor]:
        return (self.pos_encoding.parameters() + self.weight_mlp.parameters()
                + self.offset_mlp.parameters() + [self.palette])

    def normalize(self, p: np.ndarray) -> np.ndarray:
        lo, hi = self.aabb
        return np.clip((p - lo) / (hi - lo), 0.0, 1.0).astype(np.float32)

    # -- forward -----------------------------------------------------------------

    def weights_offsets(self, x_term: np.ndarray, d: np.ndarray):
        """Barycentric weights (masked softmax) and tanh offsets as tensors."""
        if x_term.shape[0] == 0:
            raise ContractError("empty batch")
        feats = self.pos_encoding.encode(self.normalize(x_term))
        sh = sh_encode(d, self.sh_degree).astype(np.float32)
        ones = np.ones_like(sh)
        logits = self.weight_mlp(ad.concat([feats, Tensor(ones)], axis=1))
        if not self.active_mask.all():
            bias = np.where(self.active_mask, 0.0, NEG_MASK_LOGIT).astype(np.float32)
            logits = logits + bias
        w = ad.softmax(logits, axis=1)
        offsets = self.offset_mlp(ad.concat([feats, Tensor(sh)], axis=1))
        return w, offsets

    def compose_train(self, x_term: np.ndarray, d: np.ndarray):
        """Training-path composition (no edit): clamp(w^T P + offset)."""
        w, offsets = self.weights_offsets(x_term, d)
        c = ad.clip(ad.matmul(w, self.palette) + offsets, 0.0, 1.0)
        return c, w, offsets

    def compose_color(self, x_term: np.ndarray, d: np.ndarray,
                      edit: PaletteEdit | None = None,
                      d_trans: np.ndarray | None = None,
                      orientation: str = "core-modified") -> np.ndarray:
        """Evaluation-path composition with optional palette edit.

        With an edit active, the effective palette interpolates between the
        modified palette at the selection core (d_trans = 0) and the learned
        palette at the far transition edge (d_trans = 1); the reverse
        orientation is available for completeness. The identity edit takes
        the unedited code path, bit-exact.
        """
        x_term = np.atleast_2d(np.asarray(x_term, dtype=np.float32))
        d = np.atleast_2d(np.asarray(d, dtype=np.float32))
        with ad.no_grad():
            w_t, off_t = self.weights_offsets(x_term, d)
        w = w_t.data
        offsets = off_t.data
        palette = self.palette.data
        if edit is None or edit.is_identity(palette):
            mix = w @ palette
        else:
            if orientation not in ("core-modified", "core-original"):
                raise ContractError(f"unknown orientation {orientation!r}")
            w = transform_weights(w, edit, self.active_mask.astype(np.float32))
            if d_trans is None:
                d_trans = np.zeros(x_term.shape[0], dtype=np.float32)
            t = np.asarray(d_trans, dtype=np.float32).reshape(-1, 1)
            if orientation == "core-original":
                t = 1.0 - t
            mix = (1.0 - t) * (w @ edit.p_mod) + t * (w @ palette)
        return np.clip(mix + offsets, 0.0, 1.0).astype(np.float32)

    # -- losses ---------------------------------------------------------------------

    def regularizers(self, w: Tensor, offsets: Tensor, lambdas: LossWeights):
        """(L_weight, L_offset, L_palette) batch means scaled by their weights."""
        l_weight = ad.tmean(1.0 - ad.tmax(w, axis=1)) * lambdas.weight
        l_offset = ad.tmean(ad.tsum(offsets * offsets, axis=1)) * lambdas.offset
        active = self.palette[np.flatnonzero(self.active_mask)]
        floor_const = np.floor(active.data)
        prod = active * floor_const
        l_palette = ad.tsum(prod * prod)
        return l_weight, l_offset, l_palette

    # -- palette removal ----------------------------------------------------------------

    def remove_weak_palettes(self, dataset: EditDataset, rng: np.random.Generator,
                             n_poses: int = 10, threshold: float = 0.025) -> np.ndarray:
        """Deactivate base colors whose mean weight over sampled views is
        below the threshold; never removes the last surviving color."""
        views = np.arange(dataset.n_views)
        chosen = rng.choice(views, size=min(n_poses, views.size), replace=False)
        rows = np.concatenate([dataset.view_records(v) for v in chosen])
        if rows.size == 0:
            return np.zeros(0, dtype=np.int64)
        with ad.no_grad():
            w, _ = self.weights_offsets(dataset.x_term[rows], dataset.dirs[rows])
        mean_w = w.data.mean(axis=0)
        weak = (mean_w < threshold) & self.active_mask
        keep = self.active_mask & ~weak
        if not keep.any():
            # keep the strongest contributor alive
            strongest = int(np.argmax(np.where(self.active_mask, mean_w, -1.0)))
            weak[strongest] = False
            keep[strongest] = True
        removed = np.flatnonzero(weak)
        self.active_mask = keep
        return removed

    # -- persistence ------------------------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        arrs = {"palette_colors": self.palette.data,
                "palette_active": self.active_mask.astype(np.float32)}
        arrs.update(self.pos_encoding.state_arrays())
        arrs.update(self.weight_mlp.state_arrays())
        arrs.update(self.offset_mlp.state_arrays())
        return arrs

    def load_state_arrays(self, arrs: dict[str, np.ndarray]) -> None:
        self.palette.data = np.ascontiguousarray(arrs["palette_colors"], dtype=np.float32)
        self.active_mask = arrs["palette_active"] > 0.5
        self.pos_encoding.load_state_arrays(arrs)
        self.weight_mlp.load_state_arrays(arrs)
        self.offset_mlp.load_state_arrays(arrs)

    def save(self, stem: str | Path) -> None:
        save_fragments(stem, self.state_arrays(), extras={
            "aabb": [[float(v) for v in row] for row in self.aabb],
            "n_palette": self.n_palette,
            "sh_degree": self.sh_degree,
            "grid_config": self.grid_config.to_dict(),
        })

    @classmethod
    def load(cls, stem: str | Path) -> "PaletteModel":
        arrays, extras = load_fragments(stem)
        model = cls(np.asarray(extras["aabb"], dtype=np.float32),
                    n_palette=extras["n_palette"], sh_degree=extras["sh_degree"],
                    grid_config=HashGridConfig.from_dict(extras["grid_config"]))
        model.load_state_arrays(arrays)
        return model

    def clone_snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.state_arrays().items()}


# -- training ---------------------------------------------------------------------------


@dataclass
class EditSession:
    """Configuration + state of one palette-model optimization."""

    dataset: EditDataset
    mode: str = "recolor"                       # "recolor" | "style"
    iters: int = 20000
    lambdas: LossWeights | None = None
    style: StyleConfig | None = None
    patch: int = 32
    lr: float = 1e-3
    palette_lr: float = 1e-2
    seed: int = 0
    n_palette: int = 8
    removal_before_end: int = 1500
    preview_every: int = 50
    preview_hook: object = None
    log: dict = dc_field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in ("recolor", "style"):
            raise ContractError(f"unknown edit mode {self.mode!r}")
        if self.lambdas is None:
            self.lambdas = LossWeights.recolor() if self.mode == "recolor" else LossWeights()
        if self.mode == "style" and self.style is None:
            raise ContractError("style mode requires a StyleConfig")

    @property
    def removal_iteration(self) -> int:
        if self.iters >= 10000:
            return self.iters - self.removal_before_end
        return int(0.85 * self.iters)

    @property
    def warmup_iters(self) -> int:
        base = self.style.warmup_iters if self.style is not None else 1000
        if self.iters >= 10000:
            return base
        # schedule points scale down with the desk-scale iteration count
        return max(1, int(0.05 * self.iters))


def _patch_bounds(rng, pixel, patch, height, width):
    i, j = int(pixel[0]), int(pixel[1])
    top = int(np.clip(i - rng.integers(0, patch), 0, max(height - patch, 0)))
    left = int(np.clip(j - rng.integers(0, patch), 0, max(width - patch, 0)))
    return top, left


def train_edit(session: EditSession, model: PaletteModel | None = None,
               stop=None) -> PaletteModel:
    """Optimize the palette model on the extracted ray records.

    Batches are contiguous pixel patches of one view so the spatial style
    losses see image structure; recolor mode uses the same batching with the
    style-side losses disabled. Weak palettes are removed once, near the end
    of the schedule. A NaN loss aborts with the last good snapshot attached.
    """
    ds = session.dataset
    if ds.n_records == 0:
        raise ContractError("cannot train on an empty edit dataset")
    lambdas = session.lambdas
    rng = np.random.default_rng(session.seed)
    if model is None:
        model = PaletteModel(_dataset_aabb(ds), n_palette=session.n_palette,
                             seed=session.seed)
    params = model.parameters()
    opt = Adam(params, lr=session.lr,
               lr_overrides={"palette_colors": session.palette_lr})

    n_views, h, w = ds.record_index.shape
    patch = min(session.patch, h, w)
    guidance_cache: dict[int, np.ndarray] = {}
    removal_done = False
    losses_log: list[tuple[int, float]] = []
    snapshot = model.clone_snapshot()
    last_losses: dict[str, float] = {}

    for it in range(session.iters):
        if stop is not None and stop():
            break
        active = warmup_schedule(it, session.mode, session.warmup_iters)

        r = int(rng.integers(0, ds.n_records))
        view = int(ds.view_ids[r])
        top, left = _patch_bounds(rng, ds.pixels[r], patch, h, w)
        block = ds.record_index[view, top:top + patch, left:left + patch]
        rec = block.reshape(-1)
        rec_mask = rec >= 0
        rows = rec[rec_mask]
        if rows.size == 0:
            continue

        pred, w_hat, offsets = model.compose_train(ds.x_term[rows], ds.dirs[rows])
        gt = ds.gt_rgb[rows]
        diff = pred - gt
        total = ad.tmean(ad.tsum(diff * diff, axis=1))
        last_losses = {"content": float(total.data)}

        l_weight, l_offset, l_palette = model.regularizers(w_hat, offsets, lambdas)
        if "weight" in active and lambdas.weight > 0:
            total = total + l_weight
            last_losses["weight"] = float(l_weight.data)
        if "offset" in active and lambdas.offset > 0:
            total = total + l_offset
            last_losses["offset"] = float(l_offset.data)
        if "palette" in active:
            total = total + l_palette
            last_losses["palette"] = float(l_palette.data)
        if "smooth" in active and lambdas.smooth > 0 and ds.d_trans[rows].any():
            l_smooth = style_mod.smooth_loss(pred, gt, ds.d_trans[rows], lambdas.smooth)
            total = total + l_smooth
            last_losses["smooth"] = float(l_smooth.data)

        needs_patch_image = ("style" in active and lambdas.style > 0) or \
            ("tv" in active and lambdas.tv > 0) or ("dd" in active and lambdas.dd > 0)
        if needs_patch_image:
            base = _patch_gt(ds, view, top, left, patch)
            img_flat = ad.scatter(pred, (np.flatnonzero(rec_mask),), (patch * patch, 3)) \
                + base * (~rec_mask[:, None])
            img = ad.reshape(img_flat, (patch, patch, 3))
            if view not in guidance_cache:
                guidance_cache[view] = style_mod.depth_guidance(
                    ds.depth_images[view], ds.t_alpha_images[view])
            guide = guidance_cache[view][top:top + patch, left:left + patch]
            if ("tv" in active and lambdas.tv > 0) or ("dd" in active and lambdas.dd > 0):
                l_tv, l_dd = style_mod.tv_losses(img, guide, lambdas.tv, lambdas.dd)
                if "tv" in active and lambdas.tv > 0:
                    total = total + l_tv
                    last_losses["tv"] = float(l_tv.data)
                if "dd" in active and lambdas.dd > 0:
                    total = total + l_dd
                    last_losses["dd"] = float(l_dd.data)
            if "style" in active and lambdas.style > 0:
                l_style = style_mod.style_loss(session.style, img, lambdas.style)
                total = total + l_style
                last_losses["style"] = float(l_style.data)

        if not np.isfinite(total.data):
            model.load_state_arrays(snapshot)
            raise TrainingDiverged("palette training loss became non-finite",
                                   snapshot=snapshot, iteration=it)
        ad.backward(total)
        try:
            opt.step()
        except NumericError:
            model.load_state_arrays(snapshot)
            raise
        if not removal_done and it + 1 >= session.removal_iteration:
            probe = rng.integers(0, ds.n_records, size=min(ds.n_records, 2048))
            before = _eval_content(model, ds, probe)
            removed = model.remove_weak_palettes(ds, rng)
            session.log["removal"] = {
                "iteration": it + 1,
                "removed": [int(v) for v in removed],
                "active": int(model.active_mask.sum()),
                "content_before": before,
                "content_after": _eval_content(model, ds, probe),
            }
            removal_done = True
        if (it + 1) % 100 == 0:
            snapshot = model.clone_snapshot()
            losses_log.append((it + 1, float(total.data)))
        if session.preview_hook is not None and (it + 1) % session.preview_every == 0:
            session.preview_hook(it + 1, dict(last_losses), model)

    session.log["losses"] = losses_log
    session.log["final"] = last_losses
    return model


def _eval_content(model: PaletteModel, ds: EditDataset, rows: np.ndarray) -> float:
    with ad.no_grad():
        pred = model.compose_color(ds.x_term[rows], ds.dirs[rows])
    return float(((pred - ds.gt_rgb[rows]) ** 2).sum(axis=1).mean())


def _patch_gt(ds: EditDataset, view: int, top: int, left: int, patch: int) -> np.ndarray:
    """Ground-truth patch colors; recordless pixels contribute these constants
    so the spatial losses stay defined while receiving zero gradient."""
    return ds.gt_images[view][top:top + patch, left:left + patch].reshape(-1, 3)


def _dataset_aabb(ds: EditDataset) -> np.ndarray:
    lo = ds.x_term.min(axis=0) - 1e-3
    hi = ds.x_term.max(axis=0) + 1e-3
    return np.stack([lo, hi])


# -- live preview rendering -------------------------------------------------------------


def preview_render(field, model: PaletteModel, edit_grid, pose, width: int,
                   height: int, focal: float, edit: PaletteEdit | None = None,
                   transition_points: np.ndarray | None = None,
                   r_grow: float = 0.02, tau: float = 0.5,
                   background=(1.0, 1.0, 1.0), step_count: int | None = None,
                   orientation: str = "core-modified") -> np.ndarray:
    """Render a novel view with the palette output inside the selection.

    Queries the field for termination points and edit-grid alpha; pixels
    with T_alpha above the threshold blend the palette color over the field
    color, everything else shows the field render unchanged.
    """
    o, d = rays_for_pose(pose, width, height, focal)
    out = render_rays(field, o, d, step_count=step_count, edit_grid=edit_grid)
    bg = np.asarray(background, dtype=np.float32)
    color = out["color"] + (1.0 - out["alpha"][:, None]) * bg
    sel = out["t_alpha"] > tau
    if sel.any():
        x_term = o[sel] + out["depth"][sel, None] * d[sel]
        d_trans = transition_weights(x_term, transition_points, r_grow) \
            if transition_points is not None else None
        c_hat = model.compose_color(x_term, d[sel], edit=edit, d_trans=d_trans,
                                    orientation=orientation)
        ta = out["t_alpha"][sel][:, None]
        color[sel] = ta * c_hat + (1.0 - ta) * color[sel]
    return np.clip(color.reshape(height, width, 3), 0.0, 1.0)
