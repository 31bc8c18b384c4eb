import csv
import math
import os

import numpy as np
import pytest

import numerics as nx
import train as train_mod
from config import TrainConfig
from dataset import AnnotatedImage, load_dataset
from inference import evaluate, load_checkpoint
from network import NetConfig
from numerics import Tensor
from synth import SynthSpec, gen_synth
from train import LOG_HEADER, Adam, PrefetchLoader, TrainingDiverged, build_model, epoch_order, lr_at, train


@pytest.fixture
def fast_net():
    return NetConfig(input_size=64, width_mult=0.125, d_state=2, head_width=64, scan_chunk=8,
                     directions=("h_fwd", "v_rev"))


@pytest.fixture
def faces(tmp_path):
    gen_synth(SynthSpec(image_size=64, count=7, seed=4), str(tmp_path / "data"))
    return load_dataset(str(tmp_path / "data" / "manifest.csv"), input_size=64)


def _records(n):
    return [AnnotatedImage(path=f"img{i}", width=8, height=8, raster=np.full((8, 8, 3), i, dtype=np.uint8))
            for i in range(n)]


def test_learning_rate_schedule():
    config = TrainConfig()
    assert lr_at(0, config) == pytest.approx(0.001)
    assert lr_at(63, config) == pytest.approx(0.001)
    assert lr_at(64, config) == pytest.approx(0.0009)
    assert lr_at(128, config) == pytest.approx(0.00081)
    for epoch in range(1001):
        assert lr_at(epoch, config) == pytest.approx(0.001 * 0.9 ** math.floor(epoch / 64))
    with pytest.raises(ValueError):
        lr_at(-1, config)


def test_adam_first_step_moves_by_learning_rate():
    w = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    idle = Tensor(np.array([5.0]), requires_grad=True)
    opt = Adam([w, idle], lr=0.1)
    w.grad = np.array([4.0, -0.5])
    opt.step()
    np.testing.assert_allclose(w.data, [0.9, -1.9], rtol=1e-5)
    assert idle.data[0] == 5.0
    opt.zero_grad()
    assert w.grad is None


def test_adam_minimizes_a_quadratic():
    w = Tensor(np.array([0.0]), requires_grad=True)
    opt = Adam([w], lr=0.1)
    for _ in range(300):
        w.grad = 2 * (w.data - 3.0)
        opt.step()
    assert w.data[0] == pytest.approx(3.0, abs=1e-2)


def test_epoch_order_is_seeded():
    assert np.array_equal(epoch_order(10, 0, 1), epoch_order(10, 0, 1))
    assert not np.array_equal(epoch_order(10, 0, 1), epoch_order(10, 0, 2))
    assert sorted(epoch_order(10, 3, 0).tolist()) == list(range(10))


def test_loader_order_does_not_depend_on_workers():
    records = _records(11)
    expected = epoch_order(11, 5, 2)
    for workers in (0, 1, 3):
        loader = PrefetchLoader(records, batch_size=3, seed=5, epoch=2, workers=workers, prefetch=2)
        assert len(loader) == 4
        seen = [int(round(v * 255)) for images, _ in loader for v in images[:, 0, 0, 0]]
        assert seen == expected.tolist()


def test_loader_hands_worker_errors_to_consumer():
    records = _records(6)
    records[4].raster = None
    loader = PrefetchLoader(records, batch_size=1, seed=0, epoch=0, workers=2)
    with pytest.raises(ValueError, match="rasters"):
        list(loader)


def test_train_writes_log_and_checkpoints(fast_net, faces, tmp_path):
    config = TrainConfig(epochs=2, batch_size=4, loader_workers=1, eval_interval=1, seed=1)
    out = str(tmp_path / "run")
    result = train(build_model(fast_net), faces, config, out, val_records=faces[:3])
    assert len(result.history) == 2
    assert len(result.step_losses) == 4
    with open(result.log_path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == LOG_HEADER
    assert [row[0] for row in rows[1:]] == ["0", "1"]
    assert all(row[-1] != "" for row in rows[1:])
    for name in ("best.ckpt", "last.ckpt"):
        assert os.path.isfile(os.path.join(out, name))
        assert os.path.isfile(os.path.join(out, name + ".manifest"))
    assert result.best_report is not None and result.final_report is not None
    assert result.best_epoch in (0, 1)
    assert load_checkpoint(result.last_path).net == fast_net


def test_train_without_validation_keeps_lowest_loss(fast_net, faces, tmp_path):
    config = TrainConfig(epochs=2, batch_size=7, loader_workers=0)
    result = train(build_model(fast_net), faces, config, str(tmp_path / "run"))
    losses = [entry.loss_total for entry in result.history]
    assert result.best_epoch == int(np.argmin(losses))
    assert result.best_report is None and all(e.val_map is None for e in result.history)


def test_max_steps_stops_early(fast_net, faces):
    config = TrainConfig(epochs=5, batch_size=2, loader_workers=0, max_steps=3)
    result = train(build_model(fast_net), faces, config)
    assert len(result.step_losses) == 3
    assert len(result.history) == 1
    assert result.last_path is None


def test_training_is_deterministic(fast_net, faces, tmp_path):
    runs = []
    for workers in (0, 2):
        config = TrainConfig(epochs=1, batch_size=4, loader_workers=workers, max_steps=2, seed=9)
        model = build_model(fast_net)
        result = train(model, faces, config, out_dir=str(tmp_path / f"workers{workers}"))
        runs.append((model, result))
    (model_a, a), (model_b, b) = runs
    assert a.step_losses == b.step_losses
    assert [e.as_row() for e in a.history] == [e.as_row() for e in b.history]
    for (name_a, pa), (name_b, pb) in zip(model_a.named_parameters(), model_b.named_parameters()):
        assert name_a == name_b
        assert np.array_equal(pa.data, pb.data), name_a
    saved_a = dict(load_checkpoint(a.last_path).model.named_parameters())
    saved_b = dict(load_checkpoint(b.last_path).model.named_parameters())
    assert saved_a.keys() == saved_b.keys()
    for name in saved_a:
        assert np.array_equal(saved_a[name].data, saved_b[name].data), name


def test_nonfinite_loss_skips_the_update(fast_net, faces, monkeypatch):
    monkeypatch.setattr(nx, "DEBUG_NUMERICS", False)
    model = build_model(fast_net)
    optimizer = Adam(model.parameters(), lr=1e-3)
    images, targets = train_mod.to_batch(faces[:2])
    before = {name: p.data.copy() for name, p in model.named_parameters()}
    values = train_mod.train_step(model, optimizer, np.full_like(images, np.nan), targets)
    assert not math.isfinite(values["loss_total"])
    assert optimizer.t == 0
    for name, p in model.named_parameters():
        assert np.array_equal(p.data, before[name]), name


def test_divergence_leaves_weights_untouched(fast_net, faces, monkeypatch):
    real_to_batch = train_mod.to_batch

    def poisoned(records):
        images, targets = real_to_batch(records)
        return np.full_like(images, np.nan), targets

    monkeypatch.setattr(train_mod, "to_batch", poisoned)
    monkeypatch.setattr(nx, "DEBUG_NUMERICS", False)
    model = build_model(fast_net)
    before = {name: p.data.copy() for name, p in model.named_parameters()}
    with pytest.raises(TrainingDiverged) as info:
        train(model, faces, TrainConfig(epochs=1, batch_size=4, loader_workers=0))
    assert (info.value.epoch, info.value.batch) == (0, 0)
    for name, p in model.named_parameters():
        assert np.array_equal(p.data, before[name]), name


def test_divergence_is_reported(fast_net, faces, monkeypatch):
    monkeypatch.setattr(train_mod, "train_step", lambda *a: {"loss_iou": 0.0, "loss_obj": 0.0,
                                                              "loss_cls": 0.0, "loss_total": float("nan")})
    with pytest.raises(TrainingDiverged) as info:
        train(build_model(fast_net), faces, TrainConfig(epochs=1, batch_size=4, loader_workers=0))
    assert (info.value.epoch, info.value.batch) == (0, 0)


def test_train_needs_records(fast_net):
    with pytest.raises(ValueError):
        train(build_model(fast_net), [], TrainConfig(epochs=1))


@pytest.mark.slow
def test_desk_recipe_reaches_target_map(desk_run):
    assert desk_run.train_config.epochs <= 50
    assert all(math.isfinite(v) for v in desk_run.result.step_losses)
    report = evaluate(desk_run.model, desk_run.val_records, desk_run.train_config.eval_conf, title="held-out")
    assert report.map >= 0.90
