"""Session-oriented editing service: the full workflow over HTTP plus one
WebSocket preview stream per session.

One worker thread per session runs the long jobs (field training, edit
training, distillation); every endpoint mutation funnels through the session
lock; renders during training read parameter snapshots taken between
optimizer steps.
"""

from __future__ import annotations

import io
import json
import tarfile
import threading
import time
import traceback
import uuid
from collections import deque
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from urllib.parse import parse_qs, urlparse

import numpy as np
from PIL import Image

from . import wsproto
from .errors import ContractError
from .grids import VoxelGrid
from .palette import EditSession, PaletteEdit, PaletteModel, preview_render, train_edit
from .distill import build_blended_dataset, distill
from .radiance import RadianceField, finalize_occupancy, render_image, train
from .scenes import RayDataset
from .selection import (extract_dataset, make_growing_grid, region_grow,
                        scribble_select, seed_queue)
from .style import LossWeights, StyleConfig, load_style_image

API_PREFIX = "/v1"

STATES = ("idle", "nerf_training", "selecting", "edit_training",
          "editing_palette", "distilling", "done")


class SchemaError(ValueError):
    def __init__(self, field: str, message: str = "missing or invalid"):
        super().__init__(f"{field}: {message}")
        self.field = field


class StateError(RuntimeError):
    def __init__(self, state: str, wanted):
        super().__init__(f"operation requires state {wanted}, session is {state!r}")
        self.state = state


def _need(body: dict, field: str, kind=None):
    if field not in body:
        raise SchemaError(field)
    value = body[field]
    if kind is not None and not isinstance(value, kind):
        raise SchemaError(field, f"expected {kind}")
    return value


class Subscriber:
    """Per-connection outbox: status messages are never dropped, frames are
    latest-wins."""

    def __init__(self):
        self.statuses: deque = deque()
        self.frame: tuple[int, bytes] | None = None
        self.cond = threading.Condition()
        self.closed = False

    def push(self, status: str, frame: bytes | None, iteration: int) -> None:
        with self.cond:
            self.statuses.append(status)
            if frame is not None:
                self.frame = (iteration, frame)
            self.cond.notify()

    def pop(self, timeout: float = 0.5):
        with self.cond:
            if not self.statuses and self.frame is None:
                self.cond.wait(timeout)
            status = self.statuses.popleft() if self.statuses else None
            frame = self.frame
            self.frame = None
            return status, frame


class Session:
    def __init__(self, session_id: str, dataset_path: str, root: Path,
                 seed: int = 0):
        self.id = session_id
        self.root = root
        self.seed = seed
        self.lock = threading.RLock()
        self.state = "idle"
        self.dataset_path = dataset_path
        self.dataset = RayDataset(dataset_path)
        aabb = self.dataset.aabb if self.dataset.aabb is not None else \
            np.array([[-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]], np.float32)
        self.field = RadianceField.desk(aabb, seed=seed)
        self.edit_grid = VoxelGrid(128, aabb)
        self.grids: dict[str, VoxelGrid] = {}
        self.grow_queue = None
        self.growing_grid: VoxelGrid | None = None
        self.edit_dataset = None
        self.palette_model: PaletteModel | None = None
        # live palette edits: per-row color overrides plus weight/bias vectors,
        # materialized against whatever model is current (training or final)
        self.palette_overrides: dict[int, np.ndarray] = {}
        self.palette_weights: np.ndarray | None = None
        self.palette_biases: np.ndarray | None = None
        self.edit_config: dict = {}
        self.selection_actions: list[dict] = []
        self.subscribers: list[Subscriber] = []
        self.preview_pose = np.asarray(self.dataset.poses[0])
        self.pending_inputs: deque = deque()
        self.worker: threading.Thread | None = None
        self.job_counter = 0
        self.current_job: dict | None = None
        self.stop_flag = threading.Event()
        self.job_error: str | None = None
        self.render_snapshot: dict | None = None
        self.idempotency: dict[str, tuple[int, bytes]] = {}
        self._rev_counter = 0

    # -- state machine -------------------------------------------------------------

    def require_state(self, *allowed: str) -> None:
        if self.state not in allowed:
            raise StateError(self.state, allowed)

    def transition(self, new_state: str) -> None:
        if new_state not in STATES:
            raise ContractError(f"unknown state {new_state!r}")
        self.state = new_state
        self.persist()

    def persist(self) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        # in-flight jobs resume from their last stable state after a restart
        stable = {"nerf_training": "idle", "edit_training": "selecting",
                  "distilling": "editing_palette"}.get(self.state, self.state)
        meta = {
            "id": self.id,
            "state": stable,
            "dataset_path": str(self.dataset_path),
            "seed": self.seed,
            "job_counter": self.job_counter,
        }
        (self.root / "session.json").write_text(json.dumps(meta, indent=1))
        (self.root / "selection_replay.json").write_text(json.dumps({
            "resolution": self.edit_grid.resolution,
            "actions": self.selection_actions,
        }, indent=1))
        if self.state in ("selecting", "editing_palette", "done"):
            self.field.save(self.root / "field")
            self.edit_grid.save(self.root / "edit.grid")
            if self.palette_model is not None:
                self.palette_model.save(self.root / "palette")
            edit = self.current_edit()
            if edit is not None:
                (self.root / "palette_edit.json").write_text(edit.to_json())

    # -- jobs ---------------------------------------------------------------------------

    def start_job(self, kind: str, work, done_state: str) -> dict:
        if self.worker is not None and self.worker.is_alive():
            raise StateError(self.state, "no concurrent jobs")
        self.job_counter += 1
        job = {"id": self.job_counter, "kind": kind}
        self.current_job = job
        self.stop_flag.clear()
        self.job_error = None
        prev_state = self.state

        def runner():
            try:
                work()
                with self.lock:
                    self.transition(done_state)
            except Exception as exc:  # noqa: BLE001 - job boundary
                with self.lock:
                    self.job_error = f"{type(exc).__name__}: {exc}"
                    self.state = prev_state
                traceback.print_exc()
            finally:
                self.current_job = None

        self.worker = threading.Thread(target=runner, daemon=True,
                                       name=f"session-{self.id}-{kind}")
        self.worker.start()
        return job

    def stash_revision(self) -> str:
        self._rev_counter += 1
        name = f"rev{self._rev_counter}"
        self.grids[name] = self.edit_grid.copy()
        if self._rev_counter > 8:
            self.grids.pop(f"rev{self._rev_counter - 8}", None)
        return name

    # -- preview -----------------------------------------------------------------------

    def subscribe(self) -> Subscriber:
        sub = Subscriber()
        with self.lock:
            self.subscribers.append(sub)
        return sub

    def unsubscribe(self, sub: Subscriber) -> None:
        with self.lock:
            if sub in self.subscribers:
                self.subscribers.remove(sub)

    def apply_pending_inputs(self) -> None:
        while self.pending_inputs:
            msg = self.pending_inputs.popleft()
            kind = msg.get("type")
            if kind == "camera":
                if "pose_index" in msg:
                    idx = int(msg["pose_index"]) % self.dataset.n_views
                    self.preview_pose = np.asarray(self.dataset.poses[idx])
                elif "pose" in msg:
                    self.preview_pose = np.asarray(msg["pose"], dtype=np.float64)
            elif kind == "palette":
                self.apply_palette_update(msg)

    def apply_palette_update(self, body: dict) -> None:
        model = self.palette_model
        if model is None:
            raise StateError(self.state, "an edit session with a palette model")
        if "index" in body:
            idx = int(body["index"])
            if not 0 <= idx < model.n_palette:
                raise SchemaError("index", "palette row out of range")
            rgb = _need(body, "rgb", list)
            if len(rgb) != 3:
                raise SchemaError("rgb", "expected three channels")
            self.palette_overrides[idx] = np.clip(
                np.asarray(rgb, dtype=np.float32), 0.0, 1.0)
        elif "weights" in body or "biases" in body:
            if "weights" in body:
                w = np.asarray(body["weights"], dtype=np.float32)
                if w.shape != (model.n_palette,):
                    raise SchemaError("weights", "wrong length")
                self.palette_weights = w
            if "biases" in body:
                b = np.asarray(body["biases"], dtype=np.float32)
                if b.shape != (model.n_palette,):
                    raise SchemaError("biases", "wrong length")
                self.palette_biases = np.clip(b, -1.0, 1.0)
        else:
            raise SchemaError("index|weights|biases")

    def current_edit(self, model: PaletteModel | None = None) -> PaletteEdit | None:
        """Materialize the live overrides against a model's learned palette;
        untouched rows keep tracking the (possibly still training) palette."""
        model = model or self.palette_model
        if model is None:
            return None
        edit = PaletteEdit.identity(model.palette.data)
        for idx, rgb in self.palette_overrides.items():
            if idx < model.n_palette:
                edit.p_mod[idx] = rgb
        if self.palette_weights is not None:
            edit.weights = self.palette_weights.copy()
        if self.palette_biases is not None:
            edit.biases = self.palette_biases.copy()
        return edit

    def emit_preview(self, iteration: int, losses: dict, model: PaletteModel) -> None:
        with self.lock:
            self.apply_pending_inputs()
            subs = list(self.subscribers)
            pose = self.preview_pose.copy()
            edit = self.current_edit(model)
        if not subs:
            return
        img = preview_render(
            self.field, model, self.edit_grid, pose,
            width=self.dataset.width, height=self.dataset.height,
            focal=self.dataset.focal, edit=edit,
            transition_points=None if self.edit_dataset is None
            else self.edit_dataset.transition_points,
            r_grow=0.0 if self.edit_dataset is None else self.edit_dataset.r_grow,
            step_count=128)
        png = _encode_png(img)
        status = json.dumps({
            "type": "status",
            "iter": iteration,
            "losses": losses,
            "palette": model.palette.data.round(5).tolist(),
            "active_mask": model.active_mask.tolist(),
            "frame": "binary-follows",
        })
        frame = iteration.to_bytes(8, "little") + png
        for sub in subs:
            sub.push(status, frame, iteration)


def _encode_png(img01: np.ndarray) -> bytes:
    data = (np.clip(img01, 0, 1) * 255).round().astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(data).save(buf, format="PNG")
    return buf.getvalue()


class EditingService:
    def __init__(self, data_root: str | Path, seed: int = 0, desk_iters: dict | None = None):
        self.data_root = Path(data_root)
        self.data_root.mkdir(parents=True, exist_ok=True)
        self.seed = seed
        self.sessions: dict[str, Session] = {}
        self.style_images: dict[str, dict] = {}
        self.lock = threading.Lock()
        # default iteration counts; callers override per request
        self.defaults = {"train_iters": 1000, "edit_iters": 3000,
                         "distill_iters": 1000}
        if desk_iters:
            self.defaults.update(desk_iters)
        self.resume_sessions()

    def resume_sessions(self) -> None:
        for meta_file in self.data_root.glob("sessions/*/session.json"):
            try:
                meta = json.loads(meta_file.read_text())
                session = Session(meta["id"], meta["dataset_path"],
                                  meta_file.parent, seed=meta.get("seed", 0))
                field_dir = meta_file.parent / "field"
                if (field_dir / "field.json").exists():
                    session.field = RadianceField.load(field_dir)
                grid_file = meta_file.parent / "edit.grid"
                if grid_file.exists():
                    session.edit_grid = VoxelGrid.load(grid_file, aabb=session.field.aabb)
                pal = meta_file.parent / "palette.json"
                if pal.exists():
                    session.palette_model = PaletteModel.load(meta_file.parent / "palette")
                    edit_file = meta_file.parent / "palette_edit.json"
                    if edit_file.exists():
                        saved = PaletteEdit.from_json(edit_file.read_text())
                        session.palette_overrides = {
                            i: saved.p_mod[i] for i in range(saved.p_mod.shape[0])}
                        session.palette_weights = saved.weights
                        session.palette_biases = saved.biases
                session.state = meta["state"]
                session.job_counter = meta.get("job_counter", 0)
                self.sessions[session.id] = session
            except Exception:  # noqa: BLE001 - resume is best effort
                traceback.print_exc()

    # -- session helpers ---------------------------------------------------------------

    def create_session(self, dataset_path: str) -> Session:
        session_id = uuid.uuid4().hex[:12]
        root = self.data_root / "sessions" / session_id
        session = Session(session_id, dataset_path, root, seed=self.seed)
        with self.lock:
            self.sessions[session_id] = session
        session.persist()
        return session

    def get(self, session_id: str) -> Session:
        session = self.sessions.get(session_id)
        if session is None:
            raise KeyError(session_id)
        return session

    # -- job bodies --------------------------------------------------------------------

    def job_train(self, session: Session, iters: int):
        def work():
            def snapshot_cb(iteration, loss):
                if iteration % 50 == 0:
                    session.render_snapshot = {
                        "arrays": session.field.clone_snapshot(),
                        "occupancy": session.field.occupancy.bits.copy(),
                    }
            train(session.field, session.dataset, iters=iters, seed=session.seed,
                  batch_rays=1024, callback=snapshot_cb)
            finalize_occupancy(session.field, seed=session.seed)
            session.render_snapshot = None
        return work

    def job_edit(self, session: Session, config: dict):
        def work():
            mode = config["mode"]
            grow = session.growing_grid
            session.edit_dataset = extract_dataset(
                session.field, session.edit_grid, session.dataset,
                growing=grow, r_grow=config.get("r_grow") or
                0.01 * session.field.scale)
            lambdas = LossWeights.desk_recolor() if mode == "recolor" \
                else LossWeights.desk_style()
            for key, value in (config.get("lambdas") or {}).items():
                if not hasattr(lambdas, key):
                    raise SchemaError(f"lambdas.{key}", "unknown loss weight")
                setattr(lambdas, key, float(value))
            style_cfg = None
            if mode == "style":
                entry = self.style_images.get(config.get("style_image_id"))
                if entry is None:
                    raise SchemaError("style_image_id", "unknown style image")
                image = entry["image"]
                if config.get("crop") is not None:
                    image = load_style_image(entry["raw"], crop=tuple(config["crop"]))
                style_cfg = StyleConfig(image=image)
            edit_session = EditSession(
                dataset=session.edit_dataset, mode=mode,
                iters=int(config.get("iters") or self.defaults["edit_iters"]),
                lambdas=lambdas, style=style_cfg, seed=session.seed,
                preview_every=50)
            edit_session.preview_hook = session.emit_preview
            model = PaletteModel(_model_aabb(session), seed=session.seed)
            # expose the in-training model so live palette edits validate, and
            # start the new edit from a clean slate
            session.palette_model = model
            session.palette_overrides = {}
            session.palette_weights = None
            session.palette_biases = None
            train_edit(edit_session, model=model, stop=session.stop_flag.is_set)
            session.edit_config = dict(config)
            session.edit_log = edit_session.log
        return work

    def job_distill(self, session: Session, iters: int):
        def work():
            blended, provenance = build_blended_dataset(
                session.palette_model, session.current_edit(), session.dataset,
                session.edit_dataset, session.root / "blended")
            def snapshot_cb(iteration, loss):
                if iteration % 50 == 0:
                    session.render_snapshot = {
                        "arrays": session.field.clone_snapshot(),
                        "occupancy": session.field.occupancy.bits.copy(),
                    }
            distill(session.field, blended, iters=iters, seed=session.seed + 1,
                    callback=snapshot_cb)
            finalize_occupancy(session.field, seed=session.seed)
            session.render_snapshot = None
            session.provenance = provenance
        return work


def _model_aabb(session: Session) -> np.ndarray:
    eds = session.edit_dataset
    lo = eds.x_term.min(axis=0) - 1e-3
    hi = eds.x_term.max(axis=0) + 1e-3
    return np.stack([lo, hi])


# -- HTTP layer ------------------------------------------------------------------------


class Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    service: EditingService = None  # assigned by make_server

    def log_message(self, fmt, *args):  # quiet
        pass

    # -- plumbing ------------------------------------------------------------------

    def send_json(self, payload: dict, status: int = 200) -> None:
        body = json.dumps(payload).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def send_bytes(self, data: bytes, content_type: str) -> None:
        self.send_response(200)
        self.send_header("Content-Type", content_type)
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def read_body(self) -> bytes:
        length = int(self.headers.get("Content-Length") or 0)
        return self.rfile.read(length) if length else b""

    def read_json(self) -> dict:
        raw = self.read_body()
        if not raw:
            return {}
        try:
            body = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise SchemaError("body", f"invalid JSON at char {exc.pos}") from exc
        if not isinstance(body, dict):
            raise SchemaError("body", "expected a JSON object")
        return body

    # -- routing -------------------------------------------------------------------

    def do_POST(self):  # noqa: N802
        self.route("POST")

    def do_GET(self):  # noqa: N802
        self.route("GET")

    def route(self, method: str) -> None:
        try:
            parsed = urlparse(self.path)
            parts = [p for p in parsed.path.split("/") if p]
            if not parts or parts[0] != API_PREFIX.strip("/"):
                self.send_json({"error": "not_found"}, 404)
                return
            self.dispatch(method, parts[1:], parse_qs(parsed.query))
        except SchemaError as exc:
            self.send_json({"error": "schema", "field": exc.field,
                            "message": str(exc)}, 400)
        except StateError as exc:
            self.send_json({"error": "invalid_state", "state": exc.state,
                            "message": str(exc)}, 409)
        except KeyError as exc:
            self.send_json({"error": "not_found", "id": str(exc)}, 404)
        except ContractError as exc:
            self.send_json({"error": "contract", "message": str(exc)}, 400)
        except (ConnectionError, BrokenPipeError):
            pass
        except Exception as exc:  # noqa: BLE001 - service boundary
            traceback.print_exc()
            self.send_json({"error": "internal", "message": str(exc)}, 500)

    def dispatch(self, method: str, parts: list[str], query: dict) -> None:
        service = self.service
        if method == "POST" and parts == ["session"]:
            body = self.read_json()
            path = _need(body, "dataset_path", str)
            if not (Path(path) / "transforms.json").exists():
                raise SchemaError("dataset_path", "no transforms.json there")
            session = service.create_session(path)
            self.send_json({"session_id": session.id})
            return
        if method == "POST" and parts == ["style_image"]:
            raw = self.read_body()
            if not raw:
                raise SchemaError("body", "empty upload")
            crop = None
            if "crop" in query:
                crop = tuple(int(v) for v in query["crop"][0].split(","))
            try:
                image = load_style_image(raw, crop=crop)
            except Exception as exc:
                raise SchemaError("body", f"not a decodable image: {exc}") from exc
            image_id = uuid.uuid4().hex[:12]
            service.style_images[image_id] = {"raw": raw, "image": image}
            self.send_json({"style_image_id": image_id})
            return
        if parts and parts[0] == "session" and len(parts) >= 2:
            session = service.get(parts[1])
            self.session_route(method, session, parts[2:], query)
            return
        self.send_json({"error": "not_found"}, 404)

    def session_route(self, method: str, session: Session, parts: list[str],
                      query: dict) -> None:
        if method == "GET" and parts == ["preview"]:
            self.handle_preview(session)
            return
        if method == "GET" and parts == ["render"]:
            self.handle_render(session, query)
            return
        if method == "GET" and parts == ["export"]:
            self.handle_export(session)
            return
        if method == "GET" and parts == []:
            self.send_json({"session_id": session.id, "state": session.state,
                            "job": session.current_job,
                            "job_error": session.job_error,
                            "voxels": session.edit_grid.count(),
                            "views": session.dataset.n_views})
            return
        if method != "POST":
            self.send_json({"error": "not_found"}, 404)
            return

        body = self.read_json()
        request_id = body.pop("request_id", None)
        if request_id is not None:
            cached = session.idempotency.get(request_id)
            if cached is not None:
                status, payload = cached
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(payload)))
                self.end_headers()
                self.wfile.write(payload)
                return

        with session.lock:
            result = self.session_post(session, parts, body)
        payload = json.dumps(result).encode()
        if request_id is not None:
            session.idempotency[request_id] = (200, payload)
        self.send_bytes(payload, "application/json")

    def session_post(self, session: Session, parts: list[str], body: dict) -> dict:
        service = self.service
        if parts == ["train"]:
            session.require_state("idle")
            iters = int(body.get("iters") or service.defaults["train_iters"])
            job = session.start_job("train", service.job_train(session, iters),
                                    done_state="selecting")
            session.transition("nerf_training")
            return {"job": job}
        if parts == ["select", "scribble"]:
            session.require_state("selecting", "editing_palette")
            view = int(_need(body, "view", int))
            if not 0 <= view < session.dataset.n_views:
                raise SchemaError("view", "view index out of range")
            pixels = _need(body, "pixels", list)
            session.transition("selecting")
            revision = session.stash_revision()
            stats = scribble_select(
                session.field, session.edit_grid, session.dataset.poses[view],
                np.asarray(pixels, dtype=np.int64), session.dataset.width,
                session.dataset.height, session.dataset.focal)
            session.grow_queue = None
            session.selection_actions.append(
                {"op": "scribble", "view": view, "pixels": pixels})
            session.persist()
            return {"voxels_set": stats["new_voxels"],
                    "voxels_total": session.edit_grid.count(),
                    "hits": stats["hits"], "warning": stats["warning"],
                    "revision": revision}
        if parts == ["select", "grow"]:
            session.require_state("selecting", "editing_palette")
            steps = int(_need(body, "steps", int))
            per_step = int(_need(body, "per_step", int))
            session.transition("selecting")
            revision = session.stash_revision()
            if session.grow_queue is None:
                session.grow_queue = seed_queue(session.edit_grid)
            added = region_grow(session.edit_grid, session.field.occupancy,
                                session.grow_queue, steps, per_step)
            session.selection_actions.append(
                {"op": "grow", "steps": steps, "per_step": per_step})
            session.persist()
            return {"voxels_added": added,
                    "voxels_total": session.edit_grid.count(),
                    "queue": len(session.grow_queue.pending),
                    "revision": revision}
        if parts == ["select", "op"]:
            session.require_state("selecting", "editing_palette")
            op = _need(body, "op", str)
            other_id = _need(body, "other_grid_id", str)
            other = session.grids.get(other_id)
            if other is None:
                raise KeyError(other_id)
            session.transition("selecting")
            session.edit_grid = session.edit_grid.binary_op(other, op)
            session.grow_queue = None
            session.selection_actions.append(
                {"op": "binary", "kind": op, "other_id": other_id})
            session.persist()
            return {"voxels_total": session.edit_grid.count()}
        if parts == ["select", "make_growgrid"]:
            session.require_state("selecting", "editing_palette")
            if session.grow_queue is None:
                session.grow_queue = seed_queue(session.edit_grid)
            session.growing_grid = make_growing_grid(session.edit_grid,
                                                     session.grow_queue)
            grid_id = f"growgrid{session.job_counter}-{len(session.grids)}"
            session.grids[grid_id] = session.growing_grid
            return {"growgrid_id": grid_id,
                    "voxels": session.growing_grid.count()}
        if parts == ["edit", "start"]:
            session.require_state("selecting", "editing_palette")
            mode = _need(body, "mode", str)
            if mode not in ("recolor", "style"):
                raise SchemaError("mode", "expected 'recolor' or 'style'")
            if session.edit_grid.count() == 0:
                raise ContractError("empty selection: scribble before editing")
            if mode == "style" and not body.get("style_image_id"):
                raise SchemaError("style_image_id")
            job = session.start_job("edit", service.job_edit(session, body),
                                    done_state="editing_palette")
            session.transition("edit_training")
            return {"job": job}
        if parts == ["palette"]:
            session.require_state("edit_training", "editing_palette")
            if session.state == "edit_training":
                session.pending_inputs.append({"type": "palette", **body})
            else:
                session.apply_palette_update(body)
                session.persist()
            return {"ok": True}
        if parts == ["edit", "stop"]:
            session.require_state("edit_training")
            session.stop_flag.set()
            worker = session.worker
            if worker is not None:
                worker.join(timeout=120)
            if session.job_error:
                raise ContractError(session.job_error)
            model = session.palette_model
            return {
                "palette": model.palette.data.tolist(),
                "active_mask": model.active_mask.tolist(),
                "edit": json.loads(session.current_edit().to_json()),
            }
        if parts == ["distill"]:
            session.require_state("editing_palette")
            worker = session.worker
            if worker is not None and worker.is_alive():
                worker.join(timeout=120)
            iters = int(body.get("iters") or service.defaults["distill_iters"])
            job = session.start_job("distill", service.job_distill(session, iters),
                                    done_state="done")
            session.transition("distilling")
            return {"job": job}
        raise KeyError("/".join(parts))

    # -- binary endpoints -----------------------------------------------------------

    def handle_render(self, session: Session, query: dict) -> None:
        if session.state == "idle":
            raise StateError(session.state, "a trained field")
        width = int(query.get("w", [session.dataset.width])[0])
        height = int(query.get("h", [session.dataset.height])[0])
        if "pose_matrix" in query:
            pose = np.asarray(json.loads(query["pose_matrix"][0]), dtype=np.float64)
            if pose.shape != (4, 4):
                raise SchemaError("pose_matrix", "expected a 4x4 matrix")
        else:
            index = int(query.get("pose_index", [0])[0])
            if not 0 <= index < session.dataset.n_views:
                raise SchemaError("pose_index", "out of range")
            pose = session.dataset.poses[index]
        focal = session.dataset.focal * width / session.dataset.width
        snapshot = session.render_snapshot
        if snapshot is not None:
            field = RadianceField.desk(session.field.aabb, seed=0)
            field.grid_config = session.field.grid_config
            field.load_state_arrays(snapshot["arrays"])
            field.occupancy = session.field.occupancy.copy()
            field.occupancy.bits = snapshot["occupancy"].copy()
        else:
            field = session.field
        if session.palette_model is not None and session.state != "done":
            img = preview_render(field, session.palette_model, session.edit_grid,
                                 pose, width, height, focal,
                                 edit=session.current_edit(),
                                 transition_points=None if session.edit_dataset is None
                                 else session.edit_dataset.transition_points,
                                 r_grow=0.02 if session.edit_dataset is None
                                 else session.edit_dataset.r_grow)
        else:
            img = render_image(field, pose, width, height, focal)["color"]
        self.send_bytes(_encode_png(img), "image/png")

    def handle_export(self, session: Session) -> None:
        session.persist()
        buf = io.BytesIO()
        with tarfile.open(fileobj=buf, mode="w") as tar:
            for path in sorted(session.root.rglob("*")):
                if path.is_file():
                    tar.add(path, arcname=str(path.relative_to(session.root)))
        self.send_bytes(buf.getvalue(), "application/x-tar")

    def handle_preview(self, session: Session) -> None:
        key = self.headers.get("Sec-WebSocket-Key")
        if self.headers.get("Upgrade", "").lower() != "websocket" or not key:
            self.send_json({"error": "schema", "field": "Upgrade",
                            "message": "websocket upgrade required"}, 400)
            return
        self.send_response(101, "Switching Protocols")
        self.send_header("Upgrade", "websocket")
        self.send_header("Connection", "Upgrade")
        self.send_header("Sec-WebSocket-Accept", wsproto.accept_key(key))
        self.end_headers()
        self.close_connection = True
        sock = self.connection
        sub = session.subscribe()

        stop = threading.Event()

        def reader():
            try:
                while not stop.is_set():
                    opcode, payload = wsproto.read_frame(sock)
                    if opcode == wsproto.OP_CLOSE:
                        break
                    if opcode == wsproto.OP_PING:
                        sock.sendall(wsproto.encode_frame(wsproto.OP_PONG, payload))
                        continue
                    if opcode == wsproto.OP_TEXT:
                        try:
                            msg = json.loads(payload.decode())
                        except json.JSONDecodeError:
                            continue
                        with session.lock:
                            session.pending_inputs.append(msg)
            except (ConnectionError, OSError):
                pass
            finally:
                stop.set()

        thread = threading.Thread(target=reader, daemon=True)
        thread.start()
        try:
            while not stop.is_set():
                status, frame = sub.pop(timeout=0.5)
                if status is not None:
                    sock.sendall(wsproto.encode_frame(wsproto.OP_TEXT, status.encode()))
                if frame is not None:
                    sock.sendall(wsproto.encode_frame(wsproto.OP_BINARY, frame[1]))
        except (ConnectionError, OSError, BrokenPipeError):
            pass
        finally:
            stop.set()
            session.unsubscribe(sub)


def make_server(data_root: str | Path, port: int = 0, seed: int = 0,
                defaults: dict | None = None) -> ThreadingHTTPServer:
    service = EditingService(data_root, seed=seed, desk_iters=defaults)
    handler = type("BoundHandler", (Handler,), {"service": service})
    server = ThreadingHTTPServer(("127.0.0.1", port), handler)
    server.service = service
    return server


def serve_forever(data_root: str | Path, port: int, seed: int = 0) -> None:
    server = make_server(data_root, port=port, seed=seed)
    host, bound_port = server.server_address
    print(f"editing service listening on http://{host}:{bound_port}{API_PREFIX}")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        server.shutdown()
