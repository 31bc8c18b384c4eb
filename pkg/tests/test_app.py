import io

import pytest
from PIL import Image

from inference import save_checkpoint
from main import create_app
from network import Detector
from scan_lab import _params, simulate


@pytest.fixture
def client(tmp_path):
    app = create_app(checkpoint=str(tmp_path / "missing.ckpt"))
    app.config["TESTING"] = True
    return app.test_client()


@pytest.fixture
def served(tmp_path, tiny_net):
    path = str(tmp_path / "served.ckpt")
    save_checkpoint(path, Detector(tiny_net))
    app = create_app(checkpoint=path)
    app.config["TESTING"] = True
    return app.test_client()


def _png(size=(40, 30)):
    buf = io.BytesIO()
    Image.new("RGB", size, (160, 140, 120)).save(buf, format="PNG")
    buf.seek(0)
    return buf


def test_health_and_landing(client):
    assert client.get("/healthz").get_data(as_text=True) == "ok"
    page = client.get("/")
    assert page.status_code == 200
    assert "/scan-lab/" in page.get_data(as_text=True)


def test_app_serves_no_static_route(client):
    assert client.application.static_folder is None
    assert "static" not in client.application.view_functions
    assert client.get("/static/app.css").status_code == 404


def test_scan_lab_page_reports_deviation(client):
    page = client.get("/scan-lab/?delta=0.2&T=2")
    assert page.status_code == 200
    html = page.get_data(as_text=True)
    assert 'id="deviation"' in html
    assert "10 steps" in html


def test_scan_lab_translates(client):
    html = client.get("/scan-lab/?lang=hu").get_data(as_text=True)
    assert "Rendszer" in html


def test_scan_lab_shows_bad_step(client):
    html = client.get("/scan-lab/?delta=-1").get_data(as_text=True)
    assert "must be positive" in html


def test_scan_lab_plot(client):
    resp = client.get("/scan-lab/plot.png?method=euler&u=sin")
    assert resp.status_code == 200
    assert resp.mimetype == "image/png"
    assert resp.data[:8] == b"\x89PNG\r\n\x1a\n"
    assert "no-store" in resp.headers["Cache-Control"]
    assert client.get("/scan-lab/plot.png?T=0").status_code == 400


def test_zero_order_hold_tracks_constant_input_exactly():
    zoh = simulate(_params({"method": "zoh"}))
    euler = simulate(_params({"method": "euler"}))
    assert zoh["deviation"] < 1e-6
    assert euler["deviation"] > 10 * zoh["deviation"]
    assert zoh["steps"] == 50


def test_detect_without_checkpoint_is_unavailable(client):
    assert client.get("/detect/").status_code == 200
    resp = client.post("/detect/api/run", data={"image": (_png(), "face.png")},
                       content_type="multipart/form-data")
    assert resp.status_code == 503
    assert "not found" in resp.get_json()["error"]


def test_detect_returns_json(served):
    resp = served.post("/detect/api/run", data={"image": (_png(), "face.png"), "conf": "0.0"},
                       content_type="multipart/form-data")
    assert resp.status_code == 200
    body = resp.get_json()
    assert body["input_size"] == 64
    assert body["detections"]
    first = body["detections"][0]
    assert set(first) == {"class", "class_id", "score", "box"} and len(first["box"]) == 4


def test_detect_heatmap_png(served):
    resp = served.post("/detect/heatmap.png", data={"image": (_png(), "face.png")},
                       content_type="multipart/form-data")
    assert resp.status_code == 200
    assert Image.open(io.BytesIO(resp.data)).size == (64, 64)


@pytest.mark.parametrize("data,message", [
    ({}, "missing"),
    ({"image": (io.BytesIO(b"not an image"), "x.png")}, "unreadable"),
    ({"conf": "high"}, "number"),
])
def test_detect_rejects_bad_uploads(served, data, message):
    if "conf" in data:
        data = dict(data, image=(_png(), "face.png"))
    resp = served.post("/detect/api/run", data=data, content_type="multipart/form-data")
    assert resp.status_code == 400
    assert message in resp.get_json()["error"]
