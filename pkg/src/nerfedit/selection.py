"""Region selection: scribble-to-voxel mapping, queue-based region growing,
dual ray marching through edit + occupancy grids, and extraction of the
per-ray training set the palette model consumes.
"""

from __future__ import annotations

from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.spatial import cKDTree

from .cameras import rays_for_pose
from .errors import ContractError
from .grids import VoxelGrid
from .radiance import render_rays

# Fixed neighbor order; growing results are reproducible across runs.
NEIGHBORS_6 = np.array([
    [1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1],
], dtype=np.int64)

NEIGHBORS_26 = np.array([
    [dx, dy, dz]
    for dz in (-1, 0, 1) for dy in (-1, 0, 1) for dx in (-1, 0, 1)
    if (dx, dy, dz) != (0, 0, 0)
], dtype=np.int64)


@dataclass
class GrowQueue:
    """FIFO of pending voxel indices plus the visited bitfield."""

    pending: deque = dc_field(default_factory=deque)
    visited: np.ndarray | None = None

    def snapshot(self) -> list[int]:
        return [int(v) for v in self.pending]


def _neighbor_indices(grid: VoxelGrid, linear: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    coords = grid.coords_of(np.asarray(linear))
    nbr = coords[:, None, :] + offsets[None, :, :]
    ok = np.all((nbr >= 0) & (nbr < grid.resolution), axis=2)
    return grid.linear_index(nbr), ok


def seed_queue(edit: VoxelGrid, connectivity: int = 6) -> GrowQueue:
    """Queue every not-yet-selected neighbor of the current selection.

    Selected voxels are marked visited so nothing is enqueued twice; seed
    order follows ascending voxel index and the fixed neighbor order.
    """
    offsets = NEIGHBORS_6 if connectivity == 6 else NEIGHBORS_26
    visited = edit.bits.copy()
    queue = GrowQueue(visited=visited)
    selected = np.flatnonzero(edit.bits)
    if selected.size == 0:
        return queue
    nbr, ok = _neighbor_indices(edit, selected, offsets)
    for row in range(nbr.shape[0]):
        for col in range(nbr.shape[1]):
            if not ok[row, col]:
                continue
            v = int(nbr[row, col])
            if not visited[v]:
                visited[v] = True
                queue.pending.append(v)
    return queue


def region_grow(edit: VoxelGrid, occupancy: VoxelGrid, queue: GrowQueue,
                steps: int, per_step: int, connectivity: int = 6) -> int:
    """BFS expansion of the selection.

    Each of ``steps`` iterations pops up to ``per_step`` voxels; a popped
    voxel joins the selection (and its unvisited neighbors join the queue)
    only when the occupancy grid is set there. Returns voxels added.
    """
    offsets = NEIGHBORS_6 if connectivity == 6 else NEIGHBORS_26
    if queue.visited is None:
        queue.visited = edit.bits.copy()
    added = 0
    for _ in range(max(0, steps)):
        for _ in range(max(0, per_step)):
            if not queue.pending:
                return added
            v = queue.pending.popleft()
            center = edit.centers(np.array([v]))
            if not occupancy.test_points(center)[0]:
                continue
            if not edit.bits[v]:
                edit.bits[v] = True
                added += 1
            nbr, ok = _neighbor_indices(edit, np.array([v]), offsets)
            for col in range(nbr.shape[1]):
                if not ok[0, col]:
                    continue
                n = int(nbr[0, col])
                if not queue.visited[n]:
                    queue.visited[n] = True
                    queue.pending.append(n)
    return added


def make_growing_grid(edit: VoxelGrid, queue: GrowQueue) -> VoxelGrid:
    """Materialize the frontier (everything still pending) as its own grid."""
    grid = VoxelGrid(edit.resolution, edit.aabb)
    if queue.pending:
        grid.bits[np.fromiter(queue.pending, dtype=np.int64)] = True
    return grid


def grid_binary_op(a: VoxelGrid, b: VoxelGrid, op: str) -> VoxelGrid:
    return a.binary_op(b, op)


# -- scribbles ---------------------------------------------------------------


def scribble_select(field, edit: VoxelGrid, pose: np.ndarray, pixels,
                    width: int, height: int, focal: float,
                    min_alpha: float = 1e-4, step_count: int | None = None) -> dict:
    """Cast a ray through each scribbled pixel and set the voxel holding its
    estimated termination point. Returns selection stats; when every ray
    misses, the grid is left untouched and a warning is reported.
    """
    pixels = np.atleast_2d(np.asarray(pixels, dtype=np.int64))
    if pixels.size == 0:
        return {"rays": 0, "hits": 0, "new_voxels": 0, "warning": "empty scribble"}
    if (pixels[:, 0].min() < 0 or pixels[:, 0].max() >= height
            or pixels[:, 1].min() < 0 or pixels[:, 1].max() >= width):
        raise ContractError("scribble pixels outside image bounds")
    origins, dirs = rays_for_pose(pose, width, height, focal, pixels=pixels)
    out = render_rays(field, origins, dirs, step_count=step_count)
    hit = out["alpha"] > min_alpha
    new = 0
    if hit.any():
        x_term = origins[hit] + out["depth"][hit, None] * dirs[hit]
        new = edit.set_points(x_term)
    warning = None if hit.any() else "all scribble rays missed the scene"
    return {"rays": int(pixels.shape[0]), "hits": int(hit.sum()),
            "new_voxels": new, "warning": warning}


# -- dual ray marching and extraction ----------------------------------------------


def dual_raymarch(field, edit: VoxelGrid, origins, dirs,
                  step_count: int | None = None) -> dict[str, np.ndarray]:
    """March through the occupancy grid while also accumulating the alpha
    restricted to edit-grid membership (T_alpha)."""
    return render_rays(field, origins, dirs, step_count=step_count, edit_grid=edit)


@dataclass
class EditDataset:
    """Per-ray extraction results plus full guidance images per view."""

    x_term: np.ndarray        # [M, 3]
    depth: np.ndarray         # [M]
    t_alpha: np.ndarray       # [M]
    gt_rgb: np.ndarray        # [M, 3]
    dirs: np.ndarray          # [M, 3]
    view_ids: np.ndarray      # [M]
    pixels: np.ndarray        # [M, 2] (row, col)
    d_trans: np.ndarray       # [M], 0 outside the transition band
    record_index: np.ndarray  # [V, H, W] int32, -1 where no record
    depth_images: np.ndarray  # [V, H, W]
    t_alpha_images: np.ndarray  # [V, H, W]
    gt_images: np.ndarray     # [V, H, W, 3], alpha-composited over white
    tau: float
    r_grow: float
    transition_points: np.ndarray | None = None  # point cloud Z

    @property
    def n_records(self) -> int:
        return int(self.x_term.shape[0])

    @property
    def n_views(self) -> int:
        return int(self.record_index.shape[0])

    def view_records(self, view: int) -> np.ndarray:
        return np.flatnonzero(self.view_ids == view)


def transition_weights(x_term: np.ndarray, z_points: np.ndarray, r_grow: float) -> np.ndarray:
    """d_trans = 1 - min(d_min, r)/r against the transition point cloud."""
    if z_points is None or len(z_points) == 0:
        return np.zeros(x_term.shape[0], dtype=np.float32)
    if len(z_points) < 4096:
        d2 = ((x_term[:, None, :] - z_points[None, :, :]) ** 2).sum(axis=2)
        d_min = np.sqrt(d2.min(axis=1))
    else:
        d_min, _ = cKDTree(z_points).query(x_term, k=1)
    return (1.0 - np.minimum(d_min, r_grow) / r_grow).astype(np.float32)


def extract_dataset(field, edit: VoxelGrid, dataset, growing: VoxelGrid | None = None,
                    tau: float = 0.5, r_grow: float | None = None,
                    step_count: int | None = 512, threads: int = 1) -> EditDataset:
    """Dual-raymarch every training ray and keep those with T_alpha > tau.

    When a growing grid is supplied, rays terminating inside it form the
    point cloud Z, and each record's transition weight comes from its
    distance to Z. Extraction marches at twice the render step density: the
    tau threshold sits exactly where quantization bites hardest (grazing
    silhouette rays).
    """
    if edit.count() == 0:
        raise ContractError("empty selection: the edit grid has no voxels set")
    if r_grow is None:
        r_grow = 1e-2 * float((np.asarray(field.aabb)[1] - np.asarray(field.aabb)[0]).max())

    n_views = dataset.n_views
    h, w = dataset.height, dataset.width

    def march_view(v: int):
        o, d = dataset.rays(v)
        return v, render_rays(field, o, d, step_count=step_count, edit_grid=edit)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            marched = dict(pool.map(march_view, range(n_views)))
    else:
        marched = dict(map(march_view, range(n_views)))

    records = []
    z_points = []
    depth_images = np.zeros((n_views, h, w), dtype=np.float32)
    t_alpha_images = np.zeros((n_views, h, w), dtype=np.float32)
    gt_images = np.zeros((n_views, h, w, 3), dtype=np.float32)
    record_index = np.full((n_views, h, w), -1, dtype=np.int32)
    counter = 0
    for v in range(n_views):
        out = marched[v]
        o, d = dataset.rays(v)
        gt = dataset.pixels_float(v)
        gt_images[v] = (gt[:, :3] * gt[:, 3:4] + (1.0 - gt[:, 3:4])).reshape(h, w, 3)
        t_alpha = out["t_alpha"]
        depth = out["depth"]
        x_term = o + depth[:, None] * d
        depth_images[v] = depth.reshape(h, w)
        t_alpha_images[v] = t_alpha.reshape(h, w)
        keep = t_alpha > tau
        if growing is not None:
            in_g = growing.test_points(x_term) & (out["alpha"] > tau)
            if in_g.any():
                z_points.append(x_term[in_g])
        idx = np.flatnonzero(keep)
        if idx.size:
            rows, cols = np.divmod(idx, w)
            record_index[v, rows, cols] = np.arange(counter, counter + idx.size)
            counter += idx.size
            records.append({
                "x_term": x_term[idx],
                "depth": depth[idx],
                "t_alpha": t_alpha[idx],
                "gt_rgb": gt[idx, :3],
                "dirs": d[idx],
                "view_ids": np.full(idx.size, v, dtype=np.int32),
                "pixels": np.stack([rows, cols], axis=1).astype(np.int32),
            })

    if not records:
        raise ContractError("empty selection: no ray accumulates T_alpha above tau")

    merged = {k: np.concatenate([r[k] for r in records]) for k in records[0]}
    z_cloud = np.concatenate(z_points) if z_points else None
    if growing is not None and z_cloud is not None:
        d_trans = transition_weights(merged["x_term"], z_cloud, r_grow)
    else:
        d_trans = np.zeros(merged["x_term"].shape[0], dtype=np.float32)

    return EditDataset(
        x_term=merged["x_term"].astype(np.float32),
        depth=merged["depth"].astype(np.float32),
        t_alpha=merged["t_alpha"].astype(np.float32),
        gt_rgb=merged["gt_rgb"].astype(np.float32),
        dirs=merged["dirs"].astype(np.float32),
        view_ids=merged["view_ids"],
        pixels=merged["pixels"],
        d_trans=d_trans,
        record_index=record_index,
        depth_images=depth_images,
        t_alpha_images=t_alpha_images,
        gt_images=gt_images,
        tau=tau,
        r_grow=float(r_grow),
        transition_points=z_cloud,
    )


# -- replayable selection sessions ---------------------------------------------


def replay_selection(field, dataset, session: dict,
                     resolution: int = 128) -> tuple[VoxelGrid, GrowQueue]:
    """Re-run a serialized selection session (scribbles, growing, binary ops).

    The session format is the JSON written by the interactive service:
    ``{"resolution": int, "actions": [{"op": "scribble", "view": v,
    "pixels": [[i, j], ...]} | {"op": "grow", "steps": s, "per_step": p} |
    {"op": "binary", "kind": k, "other": <session>} ...]}``
    """
    resolution = int(session.get("resolution", resolution))
    edit = VoxelGrid(resolution, field.aabb)
    queue: GrowQueue | None = None
    for action in session.get("actions", []):
        op = action["op"]
        if op == "scribble":
            scribble_select(field, edit, dataset.poses[action["view"]],
                            np.asarray(action["pixels"], dtype=np.int64),
                            dataset.width, dataset.height, dataset.focal)
            queue = None
        elif op == "grow":
            if queue is None:
                queue = seed_queue(edit, connectivity=action.get("connectivity", 6))
            region_grow(edit, field.occupancy, queue,
                        action["steps"], action["per_step"],
                        connectivity=action.get("connectivity", 6))
        elif op == "binary":
            other, _ = replay_selection(field, dataset, action["other"], resolution)
            edit = grid_binary_op(edit, other, action["kind"])
            queue = None
        else:
            raise ContractError(f"unknown selection action {op!r}")
    if queue is None:
        queue = seed_queue(edit)
    return edit, queue
