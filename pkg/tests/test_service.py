import io
import json
import tarfile
import threading
import time
import urllib.request

import numpy as np
import pytest

from nerfedit.cameras import orbit_rig
from nerfedit.scenes import generate_dataset, object_mask, two_spheres
from nerfedit.service import make_server
from nerfedit.wsproto import OP_BINARY, OP_TEXT, WsClient


@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    scene = two_spheres()
    rig = orbit_rig(4, radius=2.7, width=24, height=24)
    root = tmp_path_factory.mktemp("svc_ds")
    generate_dataset(scene, rig, root, n_quad=512)
    # view 2 faces sphere A
    mask = object_mask(scene, rig, 2, "sphere_a")
    return scene, rig, root, mask


@pytest.fixture(scope="module")
def server(tiny_dataset, tmp_path_factory):
    scene, rig, root, mask = tiny_dataset
    srv = make_server(tmp_path_factory.mktemp("svc_root"), port=0, seed=0,
                      defaults={"train_iters": 150, "edit_iters": 150,
                                "distill_iters": 20})
    thread = threading.Thread(target=srv.serve_forever, daemon=True)
    thread.start()
    yield srv
    srv.shutdown()


def call(server, method, path, body=None, raw=None, timeout=60):
    port = server.server_address[1]
    url = f"http://127.0.0.1:{port}/v1{path}"
    data = raw if raw is not None else (
        json.dumps(body).encode() if body is not None else None)
    req = urllib.request.Request(url, data=data, method=method)
    if raw is None and body is not None:
        req.add_header("Content-Type", "application/json")
    try:
        with urllib.request.urlopen(req, timeout=timeout) as resp:
            payload = resp.read()
            ctype = resp.headers.get("Content-Type", "")
            return resp.status, payload, ctype
    except urllib.error.HTTPError as exc:
        return exc.code, exc.read(), exc.headers.get("Content-Type", "")


def wait_state(server, sid, state, timeout=180):
    deadline = time.time() + timeout
    while time.time() < deadline:
        _, payload, _ = call(server, "GET", f"/session/{sid}")
        info = json.loads(payload)
        if info.get("job_error"):
            raise AssertionError(f"job failed: {info['job_error']}")
        if info["state"] == state:
            return info
        time.sleep(0.3)
    raise AssertionError(f"timed out waiting for state {state}")


@pytest.fixture(scope="module")
def session_id(server, tiny_dataset):
    _, _, root, _ = tiny_dataset
    status, payload, _ = call(server, "POST", "/session",
                              {"dataset_path": str(root)})
    assert status == 200
    return json.loads(payload)["session_id"]


def test_full_walkthrough(server, session_id, tiny_dataset):
    scene, rig, root, mask = tiny_dataset
    sid = session_id

    # train the field
    status, payload, _ = call(server, "POST", f"/session/{sid}/train", {"iters": 150})
    assert status == 200
    # double-start is rejected while the job runs
    status, payload, _ = call(server, "POST", f"/session/{sid}/train", {"iters": 1})
    assert status == 409
    wait_state(server, sid, "selecting")

    # scribble over sphere A in view 1
    ii, jj = np.nonzero(mask)
    pick = np.linspace(0, ii.size - 1, 6).astype(int)
    pixels = [[int(a), int(b)] for a, b in zip(ii[pick], jj[pick])]
    status, payload, _ = call(server, "POST", f"/session/{sid}/select/scribble",
                              {"view": 2, "pixels": pixels})
    assert status == 200
    first = json.loads(payload)
    assert first["voxels_total"] >= 1

    # grow with zero steps is a no-op
    status, payload, _ = call(server, "POST", f"/session/{sid}/select/grow",
                              {"steps": 0, "per_step": 4})
    assert json.loads(payload)["voxels_total"] == first["voxels_total"]
    status, payload, _ = call(server, "POST", f"/session/{sid}/select/grow",
                              {"steps": 1500, "per_step": 10})
    grown = json.loads(payload)
    assert grown["voxels_total"] > first["voxels_total"]

    status, payload, _ = call(server, "POST", f"/session/{sid}/select/make_growgrid", {})
    growgrid = json.loads(payload)
    assert growgrid["voxels"] >= 0

    # the recorded replay reproduces the same grid stats against this field
    # (checked now: later stages retrain the field, changing its occupancy)
    from nerfedit.scenes import RayDataset
    from nerfedit.selection import replay_selection

    session_obj = server.service.get(sid)
    replay = json.loads((session_obj.root / "selection_replay.json").read_text())
    grid, _ = replay_selection(session_obj.field, RayDataset(root), replay)
    assert grid.count() == grown["voxels_total"]

    # live edit with a preview subscriber
    status, payload, _ = call(server, "POST", f"/session/{sid}/edit/start",
                              {"mode": "recolor", "iters": 150})
    assert status == 200
    port = server.server_address[1]
    ws = WsClient("127.0.0.1", port, f"/v1/session/{sid}/preview")
    # look at the selection from the view that faces sphere A
    ws.send_text(json.dumps({"type": "camera", "pose_index": 2}))
    statuses, frames = [], []
    green_edit_sent = False
    deadline = time.time() + 120
    while time.time() < deadline and len(frames) < 3:
        op, data = ws.recv()
        if op == OP_TEXT:
            statuses.append(json.loads(data))
            if not green_edit_sent and statuses[-1]["iter"] >= 50:
                # recolor every base to green, live
                n = len(statuses[-1]["palette"])
                for idx in range(n):
                    call(server, "POST", f"/session/{sid}/palette",
                         {"index": idx, "rgb": [0.0, 1.0, 0.0]})
                green_edit_sent = True
        elif op == OP_BINARY:
            frames.append((int.from_bytes(data[:8], "little"), data[8:]))
    ws.close()
    assert len(frames) >= 2
    iters = [s["iter"] for s in statuses]
    assert iters == sorted(iters)
    wait_state(server, sid, "editing_palette")

    # last frame reflects the green palette edit inside the selection
    from PIL import Image

    first_img = np.asarray(Image.open(io.BytesIO(frames[0][1]))).astype(float)
    last_img = np.asarray(Image.open(io.BytesIO(frames[-1][1]))).astype(float)
    greenness_first = float((first_img[..., 1] - first_img[..., 0]).max())
    greenness_last = float((last_img[..., 1] - last_img[..., 0]).max())
    assert greenness_last > greenness_first + 30

    # palette update in editing_palette state is applied immediately
    status, payload, _ = call(server, "POST", f"/session/{sid}/palette",
                              {"weights": [1.0] * 8, "biases": [0.0] * 8})
    assert status == 200

    # distill and render
    status, payload, _ = call(server, "POST", f"/session/{sid}/distill", {"iters": 20})
    assert status == 200
    wait_state(server, sid, "done", timeout=240)

    status, payload, ctype = call(server, "GET", f"/session/{sid}/render?pose_index=0")
    assert status == 200 and ctype == "image/png"
    img = np.asarray(Image.open(io.BytesIO(payload)))
    assert img.shape[:2] == (24, 24)

    # exported checkpoint archive carries the field + grids + palette
    status, payload, ctype = call(server, "GET", f"/session/{sid}/export")
    assert status == 200 and ctype == "application/x-tar"
    with tarfile.open(fileobj=io.BytesIO(payload)) as tar:
        names = tar.getnames()
    assert "session.json" in names
    assert "field/field.json" in names and "field/field.bin" in names
    assert "edit.grid" in names
    assert "selection_replay.json" in names
    assert "palette.json" in names


def test_unknown_session_404(server):
    status, payload, _ = call(server, "GET", "/session/nope")
    assert status == 404
    assert json.loads(payload)["error"] == "not_found"


def test_malformed_json_names_field(server, tiny_dataset):
    _, _, root, _ = tiny_dataset
    status, payload, _ = call(server, "POST", "/session",
                              raw=b"{not json")
    body = json.loads(payload)
    assert status == 400 and body["error"] == "schema"
    assert body["field"] == "body"

    status, payload, _ = call(server, "POST", "/session", {})
    body = json.loads(payload)
    assert status == 400 and body["field"] == "dataset_path"


def test_invalid_state_transition_409(server, tiny_dataset):
    _, _, root, _ = tiny_dataset
    _, payload, _ = call(server, "POST", "/session", {"dataset_path": str(root)})
    sid = json.loads(payload)["session_id"]
    status, payload, _ = call(server, "POST", f"/session/{sid}/distill", {})
    body = json.loads(payload)
    assert status == 409 and body["error"] == "invalid_state"
    assert body["state"] == "idle"


def test_style_image_upload_and_errors(server):
    from PIL import Image

    buf = io.BytesIO()
    Image.fromarray((np.random.default_rng(0).random((64, 64, 3)) * 255)
                    .astype(np.uint8)).save(buf, format="PNG")
    status, payload, _ = call(server, "POST", "/style_image", raw=buf.getvalue())
    assert status == 200
    assert "style_image_id" in json.loads(payload)

    status, payload, _ = call(server, "POST", "/style_image", raw=b"not an image")
    assert status == 400
    assert json.loads(payload)["error"] == "schema"


def test_idempotent_retry_with_request_id(server, tiny_dataset):
    _, _, root, _ = tiny_dataset
    _, payload, _ = call(server, "POST", "/session", {"dataset_path": str(root)})
    sid = json.loads(payload)["session_id"]
    # invalid-state errors are not cached; use a grow before training: 409
    status1, p1, _ = call(server, "POST", f"/session/{sid}/train",
                          {"iters": 1, "request_id": "r1"})
    assert status1 == 200
    # a retried train with the same request id must not start a second job
    status2, p2, _ = call(server, "POST", f"/session/{sid}/train",
                          {"iters": 1, "request_id": "r1"})
    assert status2 == 200
    assert json.loads(p1) == json.loads(p2)
    wait_state(server, sid, "selecting")
