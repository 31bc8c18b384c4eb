# detect_view.py
import io
import logging
import threading

from flask import Blueprint, Response, current_app, jsonify, render_template, request
from PIL import Image, UnidentifiedImageError

import config
from inference import CheckpointError, detect_image, heatmap_overlay, load_checkpoint

logger = logging.getLogger(__name__)

detect_bp = Blueprint("detect", __name__)

_LOCK = threading.Lock()
_CACHE = {}  # checkpoint path -> Checkpoint


def _checkpoint():
    path = current_app.config.get("FERYOLO_CHECKPOINT") or config.CHECKPOINT
    if not path:
        raise CheckpointError("no checkpoint configured (set FERYOLO_CHECKPOINT)")
    with _LOCK:
        if path not in _CACHE:
            _CACHE[path] = load_checkpoint(path)
            logger.info("serving checkpoint %s", path)
        return _CACHE[path]


class BadUpload(ValueError):
    pass


def _uploaded_image():
    upload = request.files.get("image")
    if upload is None or not upload.filename:
        raise BadUpload("missing 'image' file field")
    try:
        image = Image.open(io.BytesIO(upload.read()))
        image.load()
    except (UnidentifiedImageError, OSError) as exc:
        raise BadUpload(f"unreadable image: {exc}") from exc
    return image


def _conf():
    try:
        conf = float(request.form.get("conf", 0.5))
    except ValueError:
        raise BadUpload("conf must be a number")
    if not 0.0 <= conf <= 1.0:
        raise BadUpload("conf must lie in [0, 1]")
    return conf


def _run():
    ckpt = _checkpoint()
    image = _uploaded_image()
    return detect_image(ckpt.model, image, _conf())


@detect_bp.errorhandler(BadUpload)
def _bad_upload(exc):
    return jsonify({"error": str(exc)}), 400


@detect_bp.errorhandler(CheckpointError)
def _no_checkpoint(exc):
    return jsonify({"error": str(exc)}), 503


# --------------- routes ---------------
@detect_bp.route("/", methods=["GET"])
def index():
    """Upload form."""
    return render_template("detect.html")


@detect_bp.route("/api/run", methods=["POST"])
def api_run():
    result = _run()
    return jsonify({
        "input_size": int(result.heatmap.shape[0]),
        "detections": [
            {"class": result.class_names[d.class_id], "class_id": d.class_id,
             "score": round(d.score, 4), "box": [round(v, 2) for v in d.box]}
            for d in result.detections
        ],
    })


@detect_bp.route("/heatmap.png", methods=["POST"])
def heatmap_png():
    result = _run()
    buf = io.BytesIO()
    heatmap_overlay(result).save(buf, format="PNG")
    resp = Response(buf.getvalue(), mimetype="image/png")
    resp.headers["Cache-Control"] = "no-store, no-cache, must-revalidate, max-age=0"
    return resp
