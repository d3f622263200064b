"""Dense binary voxel grids over an axis-aligned box.

One class serves three roles: the occupancy grid that accelerates ray
marching, the edit grid that marks the user selection, and the growing grid
that defines the smooth-transition band. Bit index is x + res*(y + res*z).
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import ContractError

DEFAULT_RESOLUTION = 128


class VoxelGrid:
    def __init__(self, resolution: int = DEFAULT_RESOLUTION, aabb=None, fill: bool = False):
        if resolution <= 0:
            raise ContractError("grid resolution must be positive")
        self.resolution = int(resolution)
        if aabb is None:
            aabb = [[-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]]
        self.aabb = np.asarray(aabb, dtype=np.float32).reshape(2, 3)
        self.bits = np.full(self.resolution ** 3, bool(fill), dtype=bool)

    # -- coordinate mapping ----------------------------------------------------

    def voxel_coords(self, p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Integer voxel coordinates of points; also returns an in-bounds mask."""
        p = np.atleast_2d(np.asarray(p, dtype=np.float32))
        lo, hi = self.aabb
        rel = (p - lo) / (hi - lo)
        coords = np.floor(rel * self.resolution).astype(np.int64)
        inside = np.all((coords >= 0) & (coords < self.resolution), axis=1)
        return coords, inside

    def linear_index(self, coords: np.ndarray) -> np.ndarray:
        r = self.resolution
        return coords[..., 0] + r * (coords[..., 1] + r * coords[..., 2])

    def coords_of(self, linear: np.ndarray) -> np.ndarray:
        r = self.resolution
        linear = np.asarray(linear)
        x = linear % r
        y = (linear // r) % r
        z = linear // (r * r)
        return np.stack([x, y, z], axis=-1)

    def centers(self, linear: np.ndarray) -> np.ndarray:
        lo, hi = self.aabb
        cell = (hi - lo) / self.resolution
        return lo + (self.coords_of(linear).astype(np.float32) + 0.5) * cell

    @property
    def cell_size(self) -> np.ndarray:
        return (self.aabb[1] - self.aabb[0]) / self.resolution

    # -- queries / mutation -----------------------------------------------------

    def test_points(self, p: np.ndarray) -> np.ndarray:
        """Membership of points; anything outside the box counts as empty."""
        coords, inside = self.voxel_coords(p)
        out = np.zeros(coords.shape[0], dtype=bool)
        if inside.any():
            out[inside] = self.bits[self.linear_index(coords[inside])]
        return out

    def set_points(self, p: np.ndarray) -> int:
        """Set the bits containing the given points; returns how many were new."""
        coords, inside = self.voxel_coords(p)
        idx = np.unique(self.linear_index(coords[inside]))
        fresh = int((~self.bits[idx]).sum())
        self.bits[idx] = True
        return fresh

    def count(self) -> int:
        return int(self.bits.sum())

    def copy(self) -> "VoxelGrid":
        g = VoxelGrid(self.resolution, self.aabb)
        g.bits = self.bits.copy()
        return g

    def binary_op(self, other: "VoxelGrid", op: str) -> "VoxelGrid":
        if other.resolution != self.resolution:
            raise ContractError(
                f"grid resolutions differ: {self.resolution} vs {other.resolution}")
        out = VoxelGrid(self.resolution, self.aabb)
        if op == "union":
            out.bits = self.bits | other.bits
        elif op == "difference":
            out.bits = self.bits & ~other.bits
        elif op == "intersection":
            out.bits = self.bits & other.bits
        else:
            raise ContractError(f"unknown binary op {op!r}")
        return out

    # -- persistence ------------------------------------------------------------

    def save(self, path: str | Path) -> None:
        """Little-endian uint32 resolution followed by the packed bitfield."""
        packed = np.packbits(self.bits, bitorder="little")
        Path(path).write_bytes(struct.pack("<I", self.resolution) + packed.tobytes())

    @classmethod
    def load(cls, path: str | Path, aabb=None) -> "VoxelGrid":
        raw = Path(path).read_bytes()
        (resolution,) = struct.unpack("<I", raw[:4])
        grid = cls(resolution, aabb)
        bits = np.unpackbits(np.frombuffer(raw[4:], dtype=np.uint8), bitorder="little")
        grid.bits = bits[: resolution ** 3].astype(bool)
        return grid
