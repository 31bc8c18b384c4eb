import logging
import os

from flask import Flask, render_template
from werkzeug.exceptions import HTTPException

import config

# --- Paths: make sure Flask knows where templates live ---
BASE_DIR = os.path.dirname(os.path.abspath(__file__))
TEMPLATES_DIR = os.path.join(BASE_DIR, "templates")

from scan_lab import scan_lab_bp
from detect_view import detect_bp

logger = logging.getLogger(__name__)


def create_app(checkpoint=None):
    app = Flask(
        __name__,
        template_folder=TEMPLATES_DIR,
        static_folder=None,
    )
    app.config["FERYOLO_CHECKPOINT"] = checkpoint or config.CHECKPOINT

    # --- Landing page (root) ---
    @app.route("/")
    def home():
        return render_template("index.html", checkpoint=app.config["FERYOLO_CHECKPOINT"])

    # --- Health check ---
    @app.route("/healthz")
    def healthz():
        return "ok", 200

    # --- Mount pages ---
    # 1-state discretization explorer at /scan-lab
    app.register_blueprint(scan_lab_bp, url_prefix="/scan-lab")

    # Detection + heatmap viewer at /detect
    # - Page route:        GET  /detect/
    # - Detections (JSON): POST /detect/api/run
    # - Overlay (PNG):     POST /detect/heatmap.png
    app.register_blueprint(detect_bp, url_prefix="/detect")

    # -------- Friendly error pages (so you see what's wrong locally) --------
    @app.errorhandler(Exception)
    def handle_exception(e):
        if isinstance(e, HTTPException):
            return e  # let Flask show default HTTP errors
        logger.exception("unhandled error")
        return (
            "<h3>Internal Server Error</h3>"
            "<p>Check the server logs for a traceback. Common causes:</p>"
            "<ul>"
            "<li>FERYOLO_CHECKPOINT points at a checkpoint without its .manifest</li>"
            "<li>Template not found (templates/index.html, scan_lab.html, detect.html)</li>"
            "<li>Wrong working directory when starting Flask</li>"
            "</ul>",
            500,
        )

    return app


app = create_app()

if __name__ == "__main__":
    logging.basicConfig(level=config.LOG_LEVEL, format=config.LOG_FORMAT)
    # Visit http://localhost:5000/          → landing screen
    # Scan lab:  http://localhost:5000/scan-lab/
    # Detect:    http://localhost:5000/detect/
    app.run(host="0.0.0.0", port=5000, debug=True)
