# scan_lab.py  (bilingual EN/HU)
import io
import logging
import time

import matplotlib
matplotlib.use("Agg")  # headless backend for servers
import matplotlib.pyplot as plt
import numpy as np
from flask import Blueprint, Response, render_template, request

from ssm import continuous_response, discretize, selective_scan_sequential

logger = logging.getLogger(__name__)

scan_lab_bp = Blueprint("scan_lab", __name__)

MAX_STEPS = 5000

# ------------------------ translations ------------------------
TR = {
    "en": {
        "page_title": "Scan Lab: one-state system, discrete vs continuous",
        "inputs_h2": "System",
        "label_a": "State coefficient a",
        "label_b": "Input gain b",
        "label_c": "Output gain c",
        "label_delta": "Step Δ",
        "label_T": "Horizon T",
        "label_method": "Discretization",
        "label_u": "Input",
        "btn_update": "Update",
        "results_h2": "Discretized system",
        "deviation": "Max deviation from the continuous solution: {dev}",
        "steps": "{n} steps",
        "plot_title": "h' = a·h + b·u,  y = c·h",
        "plot_xlabel": "time t",
        "plot_ylabel": "output y",
        "legend_cont": "continuous",
        "legend_disc": "discrete ({method})",
    },
    "hu": {
        "page_title": "Scan Lab: egyállapotú rendszer, diszkrét és folytonos",
        "inputs_h2": "Rendszer",
        "label_a": "Állapot együttható a",
        "label_b": "Bemeneti erősítés b",
        "label_c": "Kimeneti erősítés c",
        "label_delta": "Lépésköz Δ",
        "label_T": "Időtartam T",
        "label_method": "Diszkretizáció",
        "label_u": "Bemenet",
        "btn_update": "Frissítés",
        "results_h2": "Diszkretizált rendszer",
        "deviation": "Legnagyobb eltérés a folytonos megoldástól: {dev}",
        "steps": "{n} lépés",
        "plot_title": "h' = a·h + b·u,  y = c·h",
        "plot_xlabel": "idő t",
        "plot_ylabel": "kimenet y",
        "legend_cont": "folytonos",
        "legend_disc": "diszkrét ({method})",
    },
}


def get_lang():
    lang = (request.args.get("lang") or "").lower()
    return "hu" if lang == "hu" else "en"


def _get_float(args, name, default):
    val = args.get(name)
    if val is None or val == "":
        return float(default)
    try:
        return float(val)
    except ValueError:
        return float(default)


def _params(args):
    method = args.get("method", "zoh")
    u = args.get("u", "constant")
    return {
        "a": _get_float(args, "a", -1.0),
        "b": _get_float(args, "b", 1.0),
        "c": _get_float(args, "c", 1.0),
        "delta": _get_float(args, "delta", 0.1),
        "T": _get_float(args, "T", 5.0),
        "omega": _get_float(args, "omega", 2.0),
        "method": method if method in ("zoh", "euler") else "zoh",
        "u": u if u in ("constant", "sin") else "constant",
    }


def simulate(p):
    """Discrete response through the scan kernel next to the continuous solution."""
    if p["delta"] <= 0 or p["T"] <= 0:
        raise ValueError("Δ and T must be positive")
    steps = min(MAX_STEPS, max(1, int(round(p["T"] / p["delta"]))))
    starts = np.arange(steps) * p["delta"]
    x = np.ones(steps) if p["u"] == "constant" else np.sin(p["omega"] * starts)
    a_bar, b_bar = discretize(p["a"], p["b"], p["delta"], method=p["method"])
    if p["method"] == "zoh":
        result = selective_scan_sequential(
            x.reshape(1, 1, steps),
            np.full((1, 1, steps), p["delta"]),
            np.array([[p["a"]]]),
            np.full((1, 1, steps), p["b"]),
            np.full((1, 1, steps), p["c"]),
            np.zeros(1),
        )
        y = result.y[0, 0]
    else:
        # the kernel always holds the input (zoh); step the euler form directly
        h, y = 0.0, np.empty(steps)
        for k in range(steps):
            h = a_bar * h + b_bar * x[k]
            y[k] = p["c"] * h
    times = starts + p["delta"]
    exact = continuous_response(p["a"], p["b"], p["c"], times, u=p["u"], omega=p["omega"])
    return {
        "times": times, "discrete": y, "continuous": exact, "steps": steps,
        "a_bar": float(a_bar), "b_bar": float(b_bar),
        "deviation": float(np.max(np.abs(y - exact))),
    }


# --------------- routes ---------------
@scan_lab_bp.route("/", methods=["GET"])
def index():
    """Form, discretized coefficients and the deviation from the exact response."""
    lang = get_lang()
    params = _params(request.args)
    error = None
    result = None
    try:
        result = simulate(params)
    except ValueError as exc:
        error = str(exc)
    return render_template(
        "scan_lab.html",
        p=params, result=result, error=error,
        ts=int(time.time()),
        t=TR[lang], lang=lang,
    )


@scan_lab_bp.route("/plot.png", methods=["GET"])
def plot_png():
    lang = get_lang()
    text = TR[lang]
    params = _params(request.args)
    try:
        result = simulate(params)
    except ValueError as exc:
        return Response(str(exc), status=400, mimetype="text/plain")

    fig, ax = plt.subplots(figsize=(6, 4), dpi=150)
    fine = np.linspace(0.0, result["times"][-1], 400)
    ax.plot(fine, continuous_response(params["a"], params["b"], params["c"], fine, u=params["u"],
                                      omega=params["omega"]),
            linewidth=2, label=text["legend_cont"])
    ax.step(np.concatenate([[0.0], result["times"]]), np.concatenate([[0.0], result["discrete"]]),
            where="post", linewidth=1.2, label=text["legend_disc"].format(method=params["method"]))
    ax.set_xlabel(text["plot_xlabel"])
    ax.set_ylabel(text["plot_ylabel"])
    ax.set_title(text["plot_title"])
    ax.grid(True, linestyle="--", alpha=0.5)
    ax.legend()
    fig.tight_layout()

    buf = io.BytesIO()
    fig.savefig(buf, format="png")
    plt.close(fig)
    buf.seek(0)

    resp = Response(buf.getvalue(), mimetype="image/png")
    resp.headers["Cache-Control"] = "no-store, no-cache, must-revalidate, max-age=0"
    return resp
