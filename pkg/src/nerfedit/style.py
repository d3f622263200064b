"""Non-photorealistic supervision: pluggable feature extractor, Gram-matrix
style loss, depth guidance with alpha correction, depth-guided TV and
depth-discontinuity losses, smooth-transition loss and the warm-up schedule.

The default extractor is a three-stage strided convolution stack with fixed
seeded random weights; it exercises every formula without shipping
pretrained weights, and a manifest-format loader accepts externally trained
filters as a drop-in.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field as dc_field

import numpy as np
from PIL import Image

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoints import load_fragments, save_fragments
from .errors import ConfigError, ContractError

STYLE_SIZE = 256

LOSS_NAMES = ("content", "weight", "palette", "offset", "smooth", "style", "tv", "dd")
_WARMUP_EXCLUDED = frozenset({"style", "offset", "tv"})


@dataclass
class LossWeights:
    """Loss multipliers; stylization defaults follow the training recipe."""

    style: float = 1.3e2
    tv: float = 1e-4
    dd: float = 5e-4
    weight: float = 1e-7
    offset: float = 5e-5
    smooth: float = 1e-3

    @classmethod
    def recolor(cls) -> "LossWeights":
        return cls(style=0.0, tv=0.0, dd=0.0)

    @classmethod
    def desk_recolor(cls) -> "LossWeights":
        """Recoloring multipliers recalibrated for short desk-scale runs.

        The published weight/offset multipliers assume ~1e5 iterations; at a
        few thousand iterations their integrated pressure is too weak to
        produce a sparse decomposition, so both are raised until the learned
        weights concentrate and the offsets stay small (calibrated on the
        two-spheres scene).
        """
        return cls(style=0.0, tv=0.0, dd=0.0, weight=1e-3, offset=5e-3)

    @classmethod
    def desk_style(cls) -> "LossWeights":
        """Stylization multipliers for desk-scale runs (see desk_recolor).

        The spatial losses are raised the same way: at the published values
        their gradients are orders of magnitude below the content term on
        desk-scale depth ranges, so neither smooths nor preserves anything.
        """
        return cls(weight=1e-3, offset=5e-3, tv=0.05, dd=6.0)

    def to_dict(self) -> dict:
        return {"style": self.style, "tv": self.tv, "dd": self.dd,
                "weight": self.weight, "offset": self.offset, "smooth": self.smooth}


def warmup_schedule(iteration: int, mode: str, warmup_iters: int = 1000) -> frozenset:
    """Which losses are active at this iteration.

    Stylization trains without the style, offset and TV losses for the first
    ``warmup_iters`` iterations so the palette initializes cleanly; recolor
    mode never enables the style-side losses at all.
    """
    if iteration < 0:
        raise ContractError("iteration must be >= 0")
    if mode == "recolor":
        return frozenset(LOSS_NAMES) - frozenset({"style", "tv", "dd"})
    if mode != "style":
        raise ContractError(f"unknown edit mode {mode!r}")
    if iteration < warmup_iters:
        return frozenset(LOSS_NAMES) - _WARMUP_EXCLUDED
    return frozenset(LOSS_NAMES)


# -- feature extractor -----------------------------------------------------------

_IM2COL_CACHE: dict[tuple, np.ndarray] = {}


def _im2col_indices(h: int, w: int, c: int, k: int, stride: int) -> np.ndarray:
    key = (h, w, c, k, stride)
    if key not in _IM2COL_CACHE:
        ho = (h - k) // stride + 1
        wo = (w - k) // stride + 1
        base = (np.arange(ho)[:, None] * stride * w + np.arange(wo)[None, :] * stride) * c
        win = (np.arange(k)[:, None] * w + np.arange(k)[None, :]) * c
        win = (win[..., None] + np.arange(c)).reshape(-1)
        _IM2COL_CACHE[key] = (base.reshape(-1, 1) + win[None, :]).astype(np.int64)
    return _IM2COL_CACHE[key]


class FeatureExtractor:
    """Pure function image -> list of feature maps [C_k, H_k, W_k].

    Deterministic and differentiable with respect to the input image; the
    convolution weights themselves are frozen.
    """

    def __init__(self, stage_weights: list[tuple[np.ndarray, np.ndarray]],
                 kernel: int = 3, stride: int = 2, descriptor: str = "custom"):
        self.kernel = kernel
        self.stride = stride
        self.descriptor = descriptor
        self.stages = [(Tensor(w), Tensor(b)) for w, b in stage_weights]

    @classmethod
    def seeded_random(cls, seed: int = 42, channels=(3, 8, 16, 32),
                      kernel: int = 3, stride: int = 2) -> "FeatureExtractor":
        rng = np.random.default_rng(seed)
        stages = []
        for cin, cout in zip(channels[:-1], channels[1:]):
            fan_in = kernel * kernel * cin
            scale = np.sqrt(2.0 / fan_in)
            w = (rng.standard_normal((fan_in, cout)) * scale).astype(np.float32)
            b = np.zeros(cout, dtype=np.float32)
            stages.append((w, b))
        return cls(stages, kernel, stride, descriptor=f"seeded-random-conv/{seed}")

    @classmethod
    def from_checkpoint(cls, stem) -> "FeatureExtractor":
        arrays, extras = load_fragments(stem)
        n = extras["stages"]
        stages = [(arrays[f"stage{i}/w"], arrays[f"stage{i}/b"]) for i in range(n)]
        return cls(stages, extras["kernel"], extras["stride"],
                   descriptor=extras.get("descriptor", "external"))

    def save(self, stem) -> None:
        arrays = {}
        for i, (w, b) in enumerate(self.stages):
            arrays[f"stage{i}/w"] = w.data
            arrays[f"stage{i}/b"] = b.data
        save_fragments(stem, arrays, extras={
            "stages": len(self.stages), "kernel": self.kernel,
            "stride": self.stride, "descriptor": self.descriptor})

    @property
    def min_input(self) -> int:
        size = self.kernel
        for _ in range(len(self.stages) - 1):
            size = size * self.stride + self.kernel - self.stride
        return size

    def __call__(self, image: Tensor | np.ndarray) -> list[Tensor]:
        x = ad.as_tensor(image)
        if x.data.ndim != 3 or x.data.shape[2] != self.stages[0][0].data.shape[0] // (self.kernel ** 2):
            raise ContractError(f"extractor expects [H, W, {self.stages[0][0].data.shape[0] // self.kernel**2}] images")
        if min(x.data.shape[0], x.data.shape[1]) < self.min_input:
            raise ContractError(
                f"image {x.data.shape[:2]} smaller than the extractor's receptive field")
        feats = []
        for w, b in self.stages:
            h, wd, c = x.data.shape
            idx = _im2col_indices(h, wd, c, self.kernel, self.stride)
            cols = ad.take_flat(x, idx)
            y = ad.relu(ad.matmul(cols, w) + b)
            ho = (h - self.kernel) // self.stride + 1
            wo = (wd - self.kernel) // self.stride + 1
            x = ad.reshape(y, (ho, wo, w.data.shape[1]))
            feats.append(ad.transpose(x, (2, 0, 1)))
        return feats


@dataclass
class StyleConfig:
    """Style image plus extractor; Gram statistics are cached per session."""

    image: np.ndarray
    extractor: FeatureExtractor = dc_field(default_factory=FeatureExtractor.seeded_random)
    warmup_iters: int = 1000
    # Rescales the style term: the published multiplier assumes VGG features.
    # With the seeded random stack, 2e-4 puts the style and content gradient
    # norms within the same order of magnitude (calibrated on striped-sphere).
    style_scale: float = 2e-4

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float32)
        if self.image.shape != (STYLE_SIZE, STYLE_SIZE, 3):
            raise ContractError(
                f"style image must be {STYLE_SIZE}x{STYLE_SIZE}x3, got {self.image.shape}")
        self._style_grams: list[np.ndarray] | None = None

    def style_grams(self) -> list[np.ndarray]:
        if self._style_grams is None:
            with ad.no_grad():
                feats = self.extractor(self.image)
                self._style_grams = [gram(f).data.copy() for f in feats]
        return self._style_grams


def gram(features: Tensor) -> Tensor:
    """Channel-by-channel inner products, normalized by pixel count."""
    c, h, w = features.data.shape
    if h * w == 0:
        raise ContractError("gram needs a non-empty feature map")
    flat = ad.reshape(features, (c, h * w))
    return ad.matmul64(flat, ad.transpose(flat)) / float(h * w)


def style_loss(config: StyleConfig, rendered: Tensor, lam: float) -> Tensor:
    """Squared Frobenius gap between the Gram statistics of the rendered
    patch and the cached style-image statistics, summed over layers."""
    if lam == 0.0:
        return Tensor(np.float32(0.0))
    try:
        feats = config.extractor(rendered)
    except ContractError:
        raise
    except Exception as exc:  # configured extractor misbehaving
        raise ConfigError(f"feature extractor {config.extractor.descriptor!r} failed: {exc}") from exc
    total = None
    for f, gs in zip(feats, config.style_grams()):
        gap = gram(f) - Tensor(gs)
        term = ad.tsum(gap * gap)
        total = term if total is None else total + term
    return total * float(lam * config.style_scale)


# -- depth guidance and spatial losses ------------------------------------------------


def depth_guidance(depth_img: np.ndarray, t_alpha_img: np.ndarray) -> np.ndarray:
    """Absolute forward depth differences, alpha-corrected.

    Returns [H, W, 2]: channel 0 horizontal (j -> j+1), channel 1 vertical
    (i -> i+1); the trailing row/column is zero. Each entry is multiplied by
    the edit-grid alpha of the two pixels involved and their direct
    neighbors (out-of-bounds factors count as 1).
    """
    depth_img = np.asarray(depth_img, dtype=np.float32)
    t_alpha = np.asarray(t_alpha_img, dtype=np.float32)
    if depth_img.shape != t_alpha.shape:
        raise ContractError("depth and T_alpha images must share dimensions")
    h, w = depth_img.shape
    guide = np.zeros((h, w, 2), dtype=np.float32)
    guide[:, : w - 1, 0] = np.abs(depth_img[:, 1:] - depth_img[:, :-1])
    guide[: h - 1, :, 1] = np.abs(depth_img[1:, :] - depth_img[:-1, :])

    padded_h = np.pad(t_alpha, ((0, 0), (1, 2)), constant_values=1.0)
    prod_h = np.ones((h, w), dtype=np.float32)
    for off in range(4):  # columns j-1 .. j+2
        prod_h *= padded_h[:, off: off + w]
    padded_v = np.pad(t_alpha, ((1, 2), (0, 0)), constant_values=1.0)
    prod_v = np.ones((h, w), dtype=np.float32)
    for off in range(4):  # rows i-1 .. i+2
        prod_v *= padded_v[off: off + h, :]
    guide[:, :, 0] *= prod_h
    guide[:, :, 1] *= prod_v
    return guide


def _squared_diffs(img: Tensor):
    """Per-pixel squared forward differences (summed over channels), padded
    with zeros on the trailing row/column so both maps are [h, w]."""
    h, w, _ = img.data.shape
    dv = img[1:, :, :] - img[:-1, :, :]
    dh = img[:, 1:, :] - img[:, :-1, :]
    dv2 = ad.tsum(dv * dv, axis=2)
    dh2 = ad.tsum(dh * dh, axis=2)
    zrow = Tensor(np.zeros((1, w), dtype=np.float32))
    zcol = Tensor(np.zeros((h, 1), dtype=np.float32))
    dv2 = ad.concat([dv2, zrow], axis=0)
    dh2 = ad.concat([dh2, zcol], axis=1)
    return dh2, dv2


def tv_losses(img: Tensor, guidance: np.ndarray, lam_tv: float, lam_dd: float):
    """Depth-guided total variation and (negative) depth-discontinuity loss.

    The guidance channels multiply their matching difference terms; the
    squared norm is averaged over the pixels that have any in-range forward
    difference (all but the bottom-right corner).
    """
    h, w, _ = img.data.shape
    if h < 2 and w < 2:
        raise ContractError("tv losses need a patch of at least 2 pixels")
    dh2, dv2 = _squared_diffs(img)
    g_h = np.asarray(guidance[:, :, 0], dtype=np.float32)
    g_v = np.asarray(guidance[:, :, 1], dtype=np.float32)
    norm = float(max(h * w - 1, 1))
    tv_map = dh2 * (1.0 - g_h) + dv2 * (1.0 - g_v)
    dd_map = dh2 * g_h + dv2 * g_v
    l_tv = ad.tsum(tv_map * tv_map) * float(lam_tv / norm)
    l_dd = ad.tsum(dd_map * dd_map) * float(-lam_dd / norm)
    return l_tv, l_dd


def smooth_loss(pred: Tensor, gt: np.ndarray, d_trans: np.ndarray, lam: float) -> Tensor:
    """Extra reconstruction pressure inside the transition band:
    mean over rays of lam * sum_channels (pred - gt)^2 * d_trans."""
    gt = np.asarray(gt, dtype=np.float32)
    d_trans = np.asarray(d_trans, dtype=np.float32)
    if gt.shape != pred.data.shape or d_trans.shape[0] != gt.shape[0]:
        raise ContractError("smooth_loss expects aligned batches")
    diff = pred - gt
    per_ray = ad.tsum(diff * diff * d_trans.reshape(-1, 1), axis=1)
    return ad.tmean(per_ray) * float(lam)


# -- style image ingestion -------------------------------------------------------


def load_style_image(source, crop: tuple[int, int, int, int] | None = None) -> np.ndarray:
    """Decode PNG/JPEG bytes or a path, crop (left, top, width, height) and
    bilinearly resample to the 256x256 style resolution."""
    if isinstance(source, (bytes, bytearray)):
        img = Image.open(io.BytesIO(source))
    else:
        img = Image.open(source)
    img = img.convert("RGB")
    if crop is not None:
        left, top, cw, ch = crop
        left = max(0, min(int(left), img.width - 1))
        top = max(0, min(int(top), img.height - 1))
        cw = max(1, min(int(cw), img.width - left))
        ch = max(1, min(int(ch), img.height - top))
        img = img.crop((left, top, left + cw, top + ch))
    else:
        side = min(img.width, img.height)
        left = (img.width - side) // 2
        top = (img.height - side) // 2
        img = img.crop((left, top, left + side, top + side))
    img = img.resize((STYLE_SIZE, STYLE_SIZE), Image.BILINEAR)
    return (np.asarray(img, dtype=np.float32) / 255.0).reshape(STYLE_SIZE, STYLE_SIZE, 3)
