import io
import json
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest
from fastapi.testclient import TestClient
from PIL import Image

from clva import imageops
from clva.service import create_app


def png_bytes(w=32, h=32, seed=0):
    rng = np.random.default_rng(seed)
    img = (rng.uniform(0, 255, size=(h, w, 3))).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(img).save(buf, format="PNG")
    return buf.getvalue()


def stylize_req(client, image_bytes, instruction, output_size=None):
    data = {"instruction": instruction}
    if output_size:
        data["output_size"] = output_size
    return client.post(
        "/stylize",
        files={"content_image": ("img.png", image_bytes, "image/png")},
        data=data,
    )


@pytest.fixture(scope="module")
def client(trained_run):
    app = create_app(checkpoint_path=str(trained_run["paths"][-1]))
    with TestClient(app) as c:
        yield c


class TestHealth:
    def test_ready_after_load(self, client):
        doc = client.get("/health").json()
        assert doc["status"] == "ready"
        assert doc["model_id"]
        assert doc["uptime_s"] >= 0

    def test_loading_without_model(self):
        app = create_app()
        with TestClient(app) as c:
            doc = c.get("/health").json()
        assert doc["status"] == "loading"
        assert doc["model_id"] is None

    def test_error_after_failed_load(self, tmp_path):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"junk")
        app = create_app(checkpoint_path=str(bad))
        with TestClient(app) as c:
            doc = c.get("/health").json()
        assert doc["status"] == "error"
        assert doc["message"]


class TestStylize:
    def test_valid_request_returns_png_of_requested_size(self, client):
        resp = stylize_req(client, png_bytes(), "red solid color", output_size="32x32")
        assert resp.status_code == 200
        assert resp.headers["content-type"] == "image/png"
        assert "X-Model-Id" in resp.headers and "X-Latency-Ms" in resp.headers
        img = imageops.decode_bytes(resp.content)
        assert img.shape == (32, 32, 3)

    def test_default_resize_to_divisible(self, client):
        resp = stylize_req(client, png_bytes(w=70, h=50), "blue checkerboard pattern")
        assert resp.status_code == 200
        img = imageops.decode_bytes(resp.content)
        assert img.shape == (48, 64, 3)

    def test_empty_instruction_400(self, client):
        resp = stylize_req(client, png_bytes(), "   ")
        assert resp.status_code == 400

    def test_garbage_image_400(self, client):
        resp = stylize_req(client, b"this is not an image", "red solid color")
        assert resp.status_code == 400

    def test_model_not_loaded_503(self):
        app = create_app()
        with TestClient(app) as c:
            resp = stylize_req(c, png_bytes(), "red solid color")
        assert resp.status_code == 503

    def test_identical_requests_byte_identical(self, client):
        a = stylize_req(client, png_bytes(seed=4), "green horizontal stripes").content
        b = stylize_req(client, png_bytes(seed=4), "green horizontal stripes").content
        assert a == b

    def test_concurrent_requests_match_serial(self, client):
        payload = png_bytes(seed=5)
        serial = stylize_req(client, payload, "cyan vertical stripes").content

        def call(_):
            return stylize_req(client, payload, "cyan vertical stripes").content

        with ThreadPoolExecutor(max_workers=8) as pool:
            results = list(pool.map(call, range(8)))
        assert all(r == serial for r in results)


class TestReload:
    def test_reload_swaps_model_id(self, trained_run):
        app = create_app(checkpoint_path=str(trained_run["paths"][-1]))
        with TestClient(app) as c:
            first_id = c.get("/health").json()["model_id"]
            resp = c.post("/reload", json={"checkpoint_path": str(trained_run["paths"][0])})
            assert resp.status_code == 200
            new_id = resp.json()["model_id"]
            assert new_id != first_id
            assert c.get("/health").json()["model_id"] == new_id

    def test_corrupt_reload_422_keeps_old_model(self, trained_run, tmp_path):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"junk")
        app = create_app(checkpoint_path=str(trained_run["paths"][-1]))
        with TestClient(app) as c:
            old_id = c.get("/health").json()["model_id"]
            resp = c.post("/reload", json={"checkpoint_path": str(bad)})
            assert resp.status_code == 422
            assert resp.json()["model_id"] == old_id
            assert c.get("/health").json()["model_id"] == old_id
            ok = stylize_req(c, png_bytes(), "red solid color")
            assert ok.status_code == 200
            assert ok.headers["X-Model-Id"] == old_id

    def test_reload_identical_checkpoint_idempotent(self, trained_run):
        app = create_app(checkpoint_path=str(trained_run["paths"][-1]))
        with TestClient(app) as c:
            before = stylize_req(c, png_bytes(seed=6), "magenta solid color").content
            resp = c.post("/reload", json={"checkpoint_path": str(trained_run["paths"][-1])})
            assert resp.status_code == 200
            after = stylize_req(c, png_bytes(seed=6), "magenta solid color").content
        assert before == after
