import os
import sys
from dataclasses import dataclass

import numpy as np
import pytest

ROOT = os.path.abspath(os.path.join(os.path.dirname(__file__), ".."))
sys.path.insert(0, ROOT)

import numerics as nx  # noqa: E402
from config import TrainConfig, load_config  # noqa: E402
from dataset import load_dataset  # noqa: E402
from inference import load_checkpoint  # noqa: E402
from network import Detector, NetConfig  # noqa: E402
from synth import SynthSpec, gen_synth  # noqa: E402
from train import TrainResult, train  # noqa: E402


def pytest_collection_modifyitems(config, items):
    if os.environ.get("FERYOLO_RUN_SLOW") == "1":
        return
    skip = pytest.mark.skip(reason="slow; set FERYOLO_RUN_SLOW=1")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def float64():
    with nx.default_dtype(np.float64):
        yield


@pytest.fixture
def tiny_net():
    return NetConfig(input_size=64, width_mult=0.125, d_state=2, head_width=64, scan_chunk=8)


@dataclass
class DeskRun:
    model: Detector
    val_records: list
    result: TrainResult
    train_config: TrainConfig


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    """The tiny.cfg recipe trained on the 700-image synthetic corpus, best epoch reloaded."""
    root = tmp_path_factory.mktemp("desk")
    data = str(root / "data")
    gen_synth(SynthSpec(image_size=160, count=700, seed=0), data)
    train_config, net = load_config(os.path.join(ROOT, "content", "tiny.cfg"))
    records = load_dataset(os.path.join(data, "train.csv"), net.input_size, net.class_count)
    val_records = load_dataset(os.path.join(data, "val.csv"), net.input_size, net.class_count)
    result = train(Detector(net), records, train_config, out_dir=str(root / "run"), val_records=val_records)
    model = load_checkpoint(result.best_path).model
    return DeskRun(model, val_records, result, train_config)
