"""Input featurizations: multiresolution hash grid and spherical harmonics.

The hash grid stores one trainable table of shape ``[levels * table_size,
features]``; every level hashes its 8 cell corners with the classic
XOR-of-prime-multiples scheme and trilinearly blends the gathered rows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError

HASH_PRIMES = (1, 2654435761, 805459861)


def hash_corners(coords: np.ndarray, table_size: int) -> np.ndarray:
    """Spatial hash of integer corner coordinates ``[..., 3]`` into [0, table_size)."""
    c = coords.astype(np.int64)
    h = c[..., 0] * HASH_PRIMES[0] ^ c[..., 1] * HASH_PRIMES[1] ^ c[..., 2] * HASH_PRIMES[2]
    return (h & (table_size - 1)).astype(np.int64)


# Offsets of the 8 corners of a unit cell, in a fixed order (x fastest).
_CORNERS = np.array([
    [0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0],
    [0, 0, 1], [1, 0, 1], [0, 1, 1], [1, 1, 1],
], dtype=np.int64)


@dataclass
class HashGridConfig:
    levels: int = 8
    base_resolution: int = 16
    growth: float = 1.5
    features: int = 2
    log2_table_size: int = 14

    @property
    def table_size(self) -> int:
        return 1 << self.log2_table_size

    def resolutions(self) -> np.ndarray:
        return np.floor(self.base_resolution * self.growth ** np.arange(self.levels)).astype(np.int64)

    def to_dict(self) -> dict:
        return {
            "levels": self.levels,
            "base_resolution": self.base_resolution,
            "growth": self.growth,
            "features": self.features,
            "log2_table_size": self.log2_table_size,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "HashGridConfig":
        return cls(**d)


class HashGrid:
    """Trainable multiresolution hash encoding over the unit cube."""

    def __init__(self, config: HashGridConfig, rng: np.random.Generator | None = None,
                 name: str = "hashgrid"):
        self.config = config
        self.name = name
        rng = rng if rng is not None else np.random.default_rng(0)
        shape = (config.levels * config.table_size, config.features)
        # Small uniform init keeps early densities near the raw-bias value.
        self.table = Tensor(rng.uniform(-1e-4, 1e-4, size=shape).astype(np.float32),
                            requires_grad=True, name=f"{name}/table")
        self._resolutions = config.resolutions()

    @property
    def out_dim(self) -> int:
        return self.config.levels * self.config.features

    def parameters(self) -> list[Tensor]:
        return [self.table]

    def _corner_data(self, p: np.ndarray):
        """Corner indices (offset into the stacked table) and trilinear weights.

        Hashing is factorized per axis so no [N, 8, 3] temporaries are built:
        the corner hash is the XOR of three precomputed per-axis terms.
        """
        if p.ndim != 2 or p.shape[1] != 3:
            raise ContractError(f"expected positions [N, 3], got {p.shape}")
        if p.size and (p.min() < -1e-6 or p.max() > 1.0 + 1e-6):
            raise ContractError("positions must lie in the unit cube; callers clamp first")
        cfg = self.config
        n = p.shape[0]
        res = self._resolutions
        scaled = p[:, None, :].astype(np.float64) * res[None, :, None]   # [N, L, 3]
        base = np.floor(scaled)
        frac = (scaled - base).astype(np.float32)
        base = base.astype(np.int64)
        mask = cfg.table_size - 1
        level_off = (np.arange(cfg.levels, dtype=np.int64) * cfg.table_size)[None, :]
        hx0 = base[:, :, 0] * HASH_PRIMES[0]
        hy0 = base[:, :, 1] * HASH_PRIMES[1]
        hz0 = base[:, :, 2] * HASH_PRIMES[2]
        hx = (hx0, hx0 + HASH_PRIMES[0])
        hy = (hy0, hy0 + HASH_PRIMES[1])
        hz = (hz0, hz0 + HASH_PRIMES[2])
        wx1 = frac[:, :, 0]
        wy1 = frac[:, :, 1]
        wz1 = frac[:, :, 2]
        wx = (1.0 - wx1, wx1)
        wy = (1.0 - wy1, wy1)
        wz = (1.0 - wz1, wz1)
        idx = np.empty((n, cfg.levels, 8), dtype=np.int64)
        w = np.empty((n, cfg.levels, 8), dtype=np.float32)
        for c, (cx, cy, cz) in enumerate(_CORNERS):
            idx[:, :, c] = ((hx[cx] ^ hy[cy] ^ hz[cz]) & mask) + level_off
            w[:, :, c] = wx[cx] * wy[cy] * wz[cz]
        return idx, w, frac, base

    def encode(self, p: np.ndarray) -> Tensor:
        """Encode positions ``[N, 3]`` in the unit cube to ``[N, levels*features]``.

        Differentiable with respect to the table entries; positions are
        treated as constants (see :meth:`encode_with_grad` for the position
        gradient path).
        """
        cfg = self.config
        p = np.asarray(p, dtype=np.float32)
        idx, w, _, _ = self._corner_data(p)
        summed = ad.weighted_row_sum(self.table, idx, w)                 # [N, L, F]
        return ad.reshape(summed, (p.shape[0], cfg.levels * cfg.features))

    def encode_with_grad(self, p: Tensor) -> Tensor:
        """Encoding that also differentiates through the trilinear weights.

        Slower than :meth:`encode`; only used where the position itself is a
        learned quantity.
        """
        cfg = self.config
        pdata = p.data
        idx, _, _, base_all = self._corner_data(pdata)
        feats = []
        for lvl, res in enumerate(self._resolutions):
            frac = p * float(res) - base_all[:, lvl, :].astype(np.float32)  # Tensor [N, 3]
            level_rows = ad.take_rows(self.table, idx[:, lvl, :])           # [N, 8, F]
            acc = None
            for c in range(8):
                cw = None
                for axis in range(3):
                    comp = frac[:, axis] if _CORNERS[c, axis] == 1 else 1.0 - frac[:, axis]
                    cw = comp if cw is None else cw * comp
                term = level_rows[:, c, :] * ad.reshape(cw, (pdata.shape[0], 1))
                acc = term if acc is None else acc + term
            feats.append(acc)
        return ad.concat(feats, axis=1)

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {f"{self.name}/table": self.table.data}

    def load_state_arrays(self, arrs: dict[str, np.ndarray]) -> None:
        self.table.data = np.ascontiguousarray(arrs[f"{self.name}/table"], dtype=np.float32)


# -- spherical harmonics -------------------------------------------------------

SH_DEGREE = 4  # bands l = 0..3, 16 coefficients


def sh_encode(d: np.ndarray, degree: int = SH_DEGREE) -> np.ndarray:
    """Real spherical harmonics basis of unit directions ``[N, 3]``.

    Fixed (non-trainable) featurization; returns ``[N, degree**2]``.
    """
    d = np.asarray(d, dtype=np.float32)
    single = d.ndim == 1
    if single:
        d = d[None]
    norms = np.linalg.norm(d, axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-4):
        raise ContractError("sh_encode expects unit directions (|d| = 1 within 1e-4)")
    if not 1 <= degree <= 4:
        raise ContractError("sh degree must be in 1..4")
    x, y, z = d[:, 0], d[:, 1], d[:, 2]
    out = np.empty((d.shape[0], degree * degree), dtype=np.float32)
    out[:, 0] = 0.28209479177387814
    if degree >= 2:
        out[:, 1] = -0.48860251190291987 * y
        out[:, 2] = 0.48860251190291987 * z
        out[:, 3] = -0.48860251190291987 * x
    if degree >= 3:
        xx, yy, zz = x * x, y * y, z * z
        out[:, 4] = 1.0925484305920792 * x * y
        out[:, 5] = -1.0925484305920792 * y * z
        out[:, 6] = 0.31539156525252005 * (3.0 * zz - 1.0)
        out[:, 7] = -1.0925484305920792 * x * z
        out[:, 8] = 0.5462742152960396 * (xx - yy)
    if degree >= 4:
        out[:, 9] = -0.5900435899266435 * y * (3.0 * xx - yy)
        out[:, 10] = 2.890611442640554 * x * y * z
        out[:, 11] = -0.4570457994644658 * y * (5.0 * zz - 1.0)
        out[:, 12] = 0.3731763325901154 * z * (5.0 * zz - 3.0)
        out[:, 13] = -0.4570457994644658 * x * (5.0 * zz - 1.0)
        out[:, 14] = 1.445305721320277 * z * (xx - yy)
        out[:, 15] = -0.5900435899266435 * x * (xx - 3.0 * yy)
    return out[0] if single else out
