"""Procedural analytic scenes with a brute-force quadrature renderer.

The closed-form density/albedo fields double as ground truth for every
rendering test and as the source of desk-scale training datasets written in
the NeRF-synthetic layout (transforms.json + RGBA PNGs + raw depth maps).
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from PIL import Image

from .cameras import CameraRig, orbit_rig, ray_aabb, rays_for_pose
from .errors import ContractError


@dataclass
class SceneObject:
    name: str
    sdf: Callable[[np.ndarray], np.ndarray]
    albedo: Callable[[np.ndarray], np.ndarray]


def _const_albedo(rgb) -> Callable[[np.ndarray], np.ndarray]:
    rgb = np.asarray(rgb, dtype=np.float32)
    return lambda p: np.broadcast_to(rgb, (p.shape[0], 3)).copy()


@dataclass
class AnalyticScene:
    name: str
    objects: list[SceneObject]
    aabb: np.ndarray
    sigma_max: float = 150.0
    edge_width: float = 0.015
    tint: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None

    def __post_init__(self):
        self.aabb = np.asarray(self.aabb, dtype=np.float32).reshape(2, 3)

    @property
    def scale(self) -> float:
        return float((self.aabb[1] - self.aabb[0]).max())

    def sdf_all(self, p: np.ndarray) -> np.ndarray:
        return np.stack([obj.sdf(p) for obj in self.objects], axis=1)

    def density(self, p: np.ndarray) -> np.ndarray:
        """Soft-shell density: 0 outside, ramping to sigma_max over edge_width."""
        d = self.sdf_all(p).min(axis=1)
        return (self.sigma_max * np.clip(-d / self.edge_width, 0.0, 1.0)).astype(np.float32)

    def albedo(self, p: np.ndarray) -> np.ndarray:
        sd = self.sdf_all(p)
        owner = sd.argmin(axis=1)
        out = np.empty((p.shape[0], 3), dtype=np.float32)
        for k, obj in enumerate(self.objects):
            sel = owner == k
            if sel.any():
                out[sel] = obj.albedo(p[sel])
        return out

    def color(self, p: np.ndarray, d: np.ndarray | None = None) -> np.ndarray:
        c = self.albedo(p)
        if self.tint is not None and d is not None:
            c = np.clip(c + self.tint(p, d), 0.0, 1.0)
        return c

    def first_hit(self, origins: np.ndarray, dirs: np.ndarray,
                  n_steps: int = 256, hit_eps: float = 1e-3):
        """Sphere-trace the union SDF. Returns (t_hit, object_index, hit_mask).

        object_index is -1 where the ray leaves the AABB without hitting.
        """
        origins = np.asarray(origins, dtype=np.float64)
        dirs = np.asarray(dirs, dtype=np.float64)
        t_near, t_far, hit = ray_aabb(origins, dirs, self.aabb)
        t = t_near.astype(np.float64).copy()
        alive = hit.copy()
        for _ in range(n_steps):
            if not alive.any():
                break
            p = origins[alive] + t[alive, None] * dirs[alive]
            d = self.sdf_all(p.astype(np.float32)).min(axis=1).astype(np.float64)
            arrived = d < hit_eps
            # conservative factor: displaced surfaces are not exact SDFs
            t[alive] += np.where(arrived, 0.0, np.maximum(d * 0.7, 1e-4))
            idx = np.flatnonzero(alive)
            alive[idx[arrived]] = False
            overshoot = t[idx] > t_far[idx]
            alive[idx[overshoot]] = False
        p = origins + t[:, None] * dirs
        sd = self.sdf_all(p.astype(np.float32))
        obj = sd.argmin(axis=1)
        ok = hit & (t <= t_far + 1e-6) & (sd.min(axis=1) < 10 * hit_eps)
        obj = np.where(ok, obj, -1)
        return t.astype(np.float32), obj.astype(np.int32), ok


# -- quadrature oracle ---------------------------------------------------------


def oracle_render(scene: AnalyticScene, origins: np.ndarray, dirs: np.ndarray,
                  n_quad: int = 1024, background=(0.0, 0.0, 0.0),
                  chunk: int = 2048) -> dict[str, np.ndarray]:
    """Volume rendering of the analytic fields by dense midpoint quadrature.

    Returns color composited over ``background``, expected depth, alpha and
    the premultiplied color (``raw``) for alpha-aware consumers.
    """
    if n_quad < 512:
        raise ContractError("oracle_render requires n_quad >= 512")
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float32))
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float32))
    bg = np.asarray(background, dtype=np.float32)
    n = origins.shape[0]
    color = np.zeros((n, 3), dtype=np.float32)
    raw = np.zeros((n, 3), dtype=np.float32)
    depth = np.zeros(n, dtype=np.float32)
    alpha = np.zeros(n, dtype=np.float32)
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        o, d = origins[lo:hi], dirs[lo:hi]
        t0, t1, hit = ray_aabb(o, d, scene.aabb)
        if not hit.any():
            color[lo:hi] = bg
            continue
        oh, dh = o[hit], d[hit]
        t0h = t0[hit].astype(np.float64)
        dt = ((t1[hit] - t0[hit]) / n_quad).astype(np.float64)
        tm = t0h[:, None] + (np.arange(n_quad, dtype=np.float64)[None, :] + 0.5) * dt[:, None]
        pts = oh[:, None, :] + tm[..., None].astype(np.float32) * dh[:, None, :]
        flat = pts.reshape(-1, 3)
        sig = scene.density(flat).reshape(tm.shape).astype(np.float64)
        dflat = np.repeat(dh, n_quad, axis=0)
        col = scene.color(flat, dflat).reshape(tm.shape + (3,)).astype(np.float64)
        od = sig * dt[:, None]
        acc = np.cumsum(od, axis=1)
        trans = np.exp(-(acc - od))
        w = trans * (1.0 - np.exp(-od))
        raw_h = (w[..., None] * col).sum(axis=1)
        alpha_h = w.sum(axis=1)
        depth_h = (w * (tm + dt[:, None])).sum(axis=1)
        rows = np.flatnonzero(hit) + lo
        raw[rows] = raw_h.astype(np.float32)
        alpha[rows] = alpha_h.astype(np.float32)
        depth[rows] = depth_h.astype(np.float32)
        color[lo:hi] = bg
        color[rows] = (raw_h + (1.0 - alpha_h[:, None]) * bg).astype(np.float32)
    return {"color": color, "raw": raw, "depth": depth, "alpha": alpha}


def render_view(scene: AnalyticScene, rig: CameraRig, view: int,
                n_quad: int = 1024, background=(0.0, 0.0, 0.0)) -> dict[str, np.ndarray]:
    o, d = rays_for_pose(rig.poses[view], rig.width, rig.height, rig.focal)
    out = oracle_render(scene, o, d, n_quad=n_quad, background=background)
    h, w = rig.height, rig.width
    return {
        "color": out["color"].reshape(h, w, 3),
        "raw": out["raw"].reshape(h, w, 3),
        "depth": out["depth"].reshape(h, w),
        "alpha": out["alpha"].reshape(h, w),
    }


def object_mask(scene: AnalyticScene, rig: CameraRig, view: int, object_name: str) -> np.ndarray:
    """Boolean [H, W] mask of pixels whose first surface hit is the named object."""
    names = [obj.name for obj in scene.objects]
    if object_name not in names:
        raise ContractError(f"scene {scene.name!r} has no object {object_name!r}")
    target = names.index(object_name)
    o, d = rays_for_pose(rig.poses[view], rig.width, rig.height, rig.focal)
    _, obj, _ = scene.first_hit(o, d)
    return (obj == target).reshape(rig.height, rig.width)


# -- dataset I/O -----------------------------------------------------------------


def generate_dataset(scene: AnalyticScene, rig: CameraRig, out_dir: str | Path,
                     seed: int = 0, n_quad: int = 1024, threads: int = 1) -> Path:
    """Render every pose and write the on-disk dataset.

    Layout: ``r_<k>.png`` (8-bit straight-alpha RGBA), ``r_<k>.depth``
    (little-endian float32, row-major) and ``transforms.json``.
    """
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out_dir}: {exc}") from exc
    del seed  # the oracle is deterministic; kept for interface symmetry

    def render_one(k: int):
        return k, render_view(scene, rig, k, n_quad=n_quad)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = dict(pool.map(render_one, range(rig.n_views)))
    else:
        results = dict(map(render_one, range(rig.n_views)))

    frames = []
    for k in range(rig.n_views):
        out = results[k]
        a = out["alpha"][..., None]
        straight = np.where(a > 1e-6, out["raw"] / np.maximum(a, 1e-6), 0.0)
        rgba = np.concatenate([np.clip(straight, 0, 1), np.clip(a, 0, 1)], axis=2)
        img = (np.round(rgba * 255.0)).astype(np.uint8)
        name = f"r_{k}"
        try:
            Image.fromarray(img, "RGBA").save(out_dir / f"{name}.png")
            (out_dir / f"{name}.depth").write_bytes(
                out["depth"].astype("<f4").tobytes())
        except OSError as exc:
            raise OSError(f"failed writing frame {name} under {out_dir}: {exc}") from exc
        frames.append({
            "file_path": f"./{name}",
            "transform_matrix": [[float(v) for v in row] for row in np.asarray(rig.poses[k])],
        })
    meta = {"camera_angle_x": float(rig.camera_angle_x), "frames": frames}
    (out_dir / "transforms.json").write_text(json.dumps(meta, indent=1))
    (out_dir / "scene.json").write_text(json.dumps({
        "scene": scene.name,
        "aabb": self_aabb_list(scene),
        "width": rig.width,
        "height": rig.height,
    }, indent=1))
    return out_dir


def self_aabb_list(scene: AnalyticScene) -> list:
    return [[float(v) for v in row] for row in scene.aabb]


class RayDataset:
    """A dataset directory loaded into memory, with cached per-view rays."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        meta = json.loads((self.root / "transforms.json").read_text())
        self.camera_angle_x = float(meta["camera_angle_x"])
        self.poses = []
        self.images = []
        self.depths = []
        for frame in meta["frames"]:
            name = frame["file_path"].split("/")[-1]
            img = np.asarray(Image.open(self.root / f"{name}.png").convert("RGBA"))
            self.images.append(img)
            self.poses.append(np.asarray(frame["transform_matrix"], dtype=np.float64))
            depth_file = self.root / f"{name}.depth"
            if depth_file.exists():
                d = np.frombuffer(depth_file.read_bytes(), dtype="<f4")
                self.depths.append(d.reshape(img.shape[0], img.shape[1]).copy())
        self.images = np.stack(self.images)
        self.poses = np.stack(self.poses)
        self.depths = np.stack(self.depths) if self.depths else None
        self.height, self.width = self.images.shape[1:3]
        self.focal = 0.5 * self.width / math.tan(0.5 * self.camera_angle_x)
        scene_file = self.root / "scene.json"
        self.aabb = None
        self.scene_name = None
        if scene_file.exists():
            info = json.loads(scene_file.read_text())
            self.aabb = np.asarray(info["aabb"], dtype=np.float32)
            self.scene_name = info.get("scene")
        self._ray_cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    @property
    def n_views(self) -> int:
        return self.images.shape[0]

    @property
    def n_pixels(self) -> int:
        return self.height * self.width

    def rays(self, view: int) -> tuple[np.ndarray, np.ndarray]:
        if view not in self._ray_cache:
            self._ray_cache[view] = rays_for_pose(
                self.poses[view], self.width, self.height, self.focal)
        return self._ray_cache[view]

    def pixels_float(self, view: int) -> np.ndarray:
        """RGBA float image in [0,1], flattened row-major to [H*W, 4]."""
        return (self.images[view].reshape(-1, 4) / 255.0).astype(np.float32)

    def rig(self) -> CameraRig:
        return CameraRig(self.width, self.height, self.focal, [p.copy() for p in self.poses])


# -- scene library -----------------------------------------------------------------


def _sphere(name: str, center, radius: float, albedo) -> SceneObject:
    c = np.asarray(center, dtype=np.float32)

    def sdf(p):
        return np.linalg.norm(p - c, axis=1) - radius

    return SceneObject(name, sdf, _const_albedo(albedo))


def two_spheres() -> AnalyticScene:
    """Two well-separated matte spheres; sphere A is the editable target."""
    return AnalyticScene(
        name="two-spheres",
        objects=[
            _sphere("sphere_a", (-0.45, 0.0, 0.0), 0.35, (0.80, 0.22, 0.18)),
            _sphere("sphere_b", (0.45, 0.0, 0.0), 0.35, (0.18, 0.32, 0.82)),
        ],
        aabb=np.array([[-0.9, -0.9, -0.9], [0.9, 0.9, 0.9]]),
    )


def box_on_plane() -> AnalyticScene:
    """A box floating over a floor plane; exercises occlusion handling."""
    half = np.array([0.3, 0.3, 0.25], dtype=np.float32)
    center = np.array([0.0, 0.0, -0.05], dtype=np.float32)

    def box_sdf(p):
        q = np.abs(p - center) - half
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
        inside = np.minimum(q.max(axis=1), 0.0)
        return outside + inside

    def plane_sdf(p):
        return p[:, 2] + 0.55

    return AnalyticScene(
        name="box-on-plane",
        objects=[
            SceneObject("box", box_sdf, _const_albedo((0.82, 0.52, 0.18))),
            SceneObject("floor", plane_sdf, _const_albedo((0.72, 0.72, 0.70))),
        ],
        aabb=np.array([[-0.9, -0.9, -0.9], [0.9, 0.9, 0.9]]),
    )


def striped_sphere() -> AnalyticScene:
    """A sphere with raised latitude ridges: small geometric structure whose
    band edges produce genuine depth discontinuities inside the silhouette."""
    r0, amp, freq, sharp = 0.40, 0.12, 3.0, 0.07

    def band(p):
        rr = np.maximum(np.linalg.norm(p, axis=1), 1e-6)
        u = p[:, 2] / rr
        return 0.5 + 0.5 * np.tanh(np.sin(freq * math.pi * u) / sharp)

    def sdf(p):
        return np.linalg.norm(p, axis=1) - (r0 + amp * band(p))

    def albedo(p):
        b = band(p)[:, None]
        bright = np.array([0.88, 0.80, 0.22], dtype=np.float32)
        dark = np.array([0.15, 0.18, 0.30], dtype=np.float32)
        return (b * bright + (1.0 - b) * dark).astype(np.float32)

    return AnalyticScene(
        name="striped-sphere",
        objects=[SceneObject("sphere", sdf, albedo)],
        aabb=np.array([[-0.9, -0.9, -0.9], [0.9, 0.9, 0.9]]),
    )


def opaque_plane() -> AnalyticScene:
    """Empty space up to z = 2, then a hard red wall; used by depth tests."""

    def sdf(p):
        return 2.0 - p[:, 2]

    return AnalyticScene(
        name="opaque-plane",
        objects=[SceneObject("wall", sdf, _const_albedo((1.0, 0.0, 0.0)))],
        aabb=np.array([[-1.0, -1.0, -0.2], [1.0, 1.0, 2.4]]),
        sigma_max=1e5,  # one marching step through the wall is fully opaque
        edge_width=1e-4,
    )


SCENES: dict[str, Callable[[], AnalyticScene]] = {
    "two-spheres": two_spheres,
    "box-on-plane": box_on_plane,
    "striped-sphere": striped_sphere,
    "opaque-plane": opaque_plane,
}


def build_scene(name: str) -> AnalyticScene:
    if name not in SCENES:
        raise ContractError(f"unknown scene {name!r}; available: {sorted(SCENES)}")
    return SCENES[name]()


def default_rig(scene: AnalyticScene, n_views: int = 8, width: int = 64,
                height: int = 64, **kwargs) -> CameraRig:
    radius = kwargs.pop("radius", 1.5 * scene.scale)
    return orbit_rig(n_views, radius=radius, width=width, height=height, **kwargs)
