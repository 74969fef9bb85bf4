from collections import OrderedDict

import numpy as np
import pytest
import torch

from cdasr.models import LossWeights, SchedulerConfig, TrainConfig
from cdasr.services.checkpoint import load_checkpoint
from cdasr.services.data_pipeline import build_dataset
from cdasr.services.metrics_analysis import evaluate, evaluate_bicubic
from cdasr.services.semantic_encoder import EncoderFactory
from cdasr.services.sr_network import ParameterSet, forward, init_network
from cdasr.services.trainer import (
    TRAIN_LOG_FIELDS,
    OptimizerState,
    Trainer,
    optimizer_step,
    scheduled_lr,
    smoothed,
    train,
)
from cdasr.utils.csv_log import read_csv
from cdasr.utils.errors import NonFiniteGradientError, RejectedInputError, ScaleMismatchError, TrainingDivergedError

from .conftest import smooth

pytestmark = pytest.mark.unit


def toy_cfg(**overrides) -> TrainConfig:
    fields = dict(batch_size=2, patch_size=8, max_steps=4, checkpoint_every=2, learning_rate=1e-3, seed=0)
    fields.update(overrides)
    return TrainConfig(**fields)


@pytest.fixture
def toy_ds(image_dir):
    return build_dataset(image_dir(count=4, size=32), scale=2)


def scalar_set(value: float) -> ParameterSet:
    return ParameterSet(OrderedDict(w=torch.tensor([value], dtype=torch.float64)))


def test_adam_matches_the_recurrence():
    params = scalar_set(0.0)
    opt = OptimizerState(params, lr=0.1)
    beta1, beta2, eps, lr = 0.9, 0.999, 1e-8, 0.1
    w, m, v = 0.0, 0.0, 0.0
    for t in range(1, 6):
        g = 2 * (w - 3.0)
        params.set_grads({"w": torch.tensor([2 * (float(params["w"]) - 3.0)], dtype=torch.float64)})
        optimizer_step(params, opt, lr)
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        w -= lr * (m / (1 - beta1 ** t)) / (np.sqrt(v / (1 - beta2 ** t)) + eps)
        assert float(params["w"]) == pytest.approx(w, rel=1e-12)
    assert opt.step == 5


def test_first_adam_step_moves_by_lr():
    params = scalar_set(0.0)
    params.set_grads({"w": torch.tensor([-6.0], dtype=torch.float64)})
    optimizer_step(params, OptimizerState(params, lr=0.1), 0.1)
    assert float(params["w"]) == pytest.approx(0.1, rel=1e-6)


def test_non_finite_gradient_is_refused():
    params = scalar_set(1.0)
    opt = OptimizerState(params, lr=0.1)
    params.set_grads({"w": torch.tensor([float("nan")], dtype=torch.float64)})
    with pytest.raises(NonFiniteGradientError):
        optimizer_step(params, opt, 0.1)
    assert float(params["w"]) == 1.0


def test_optimizer_refuses_foreign_parameters():
    opt = OptimizerState(scalar_set(0.0), lr=0.1)
    with pytest.raises(RejectedInputError):
        optimizer_step(scalar_set(0.0), opt, 0.1)


def test_snapshot_restore_continues_identically():
    a = scalar_set(0.0)
    opt_a = OptimizerState(a, lr=0.1)
    for _ in range(3):
        a.set_grads({"w": 2 * (a["w"] - 3.0)})
        optimizer_step(a, opt_a, 0.1)

    b = a.clone()
    opt_b = OptimizerState(b, lr=0.1)
    opt_b.restore(opt_a.snapshot())
    assert opt_b.step == 3
    for _ in range(2):
        for p, o in ((a, opt_a), (b, opt_b)):
            p.set_grads({"w": 2 * (p["w"] - 3.0)})
            optimizer_step(p, o, 0.1)
    assert torch.equal(a["w"], b["w"])


def test_halving_schedule():
    cfg = TrainConfig(learning_rate=1e-3, scheduler=SchedulerConfig(kind="halve_every_k", k=2))
    assert [scheduled_lr(cfg, e) for e in range(6)] == pytest.approx([1e-3, 1e-3, 5e-4, 5e-4, 2.5e-4, 2.5e-4])
    flat = TrainConfig(learning_rate=1e-3, scheduler=SchedulerConfig(kind="none"))
    assert scheduled_lr(flat, 1000) == 1e-3


def test_smoothed_is_a_trailing_mean():
    assert smoothed([1.0, 2.0, 3.0, 4.0], window=2) == pytest.approx([1.0, 1.5, 2.5, 3.5])


def test_run_logs_every_step(toy_ds, tiny_net, stub_spec, tmp_path):
    log_path = tmp_path / "train_log.csv"
    params, rows = train(toy_ds, toy_cfg(), tiny_net(2), stub_spec, log_path=log_path)
    assert [r.step for r in rows] == [0, 1, 2, 3]
    assert [r.epoch for r in rows] == [0, 0, 1, 1]
    on_disk = read_csv(log_path)
    assert list(on_disk[0]) == TRAIN_LOG_FIELDS
    assert [float(r["total"]) for r in on_disk] == pytest.approx([r.total for r in rows])
    assert all(np.isfinite(r.total) for r in rows)


def test_training_changes_parameters(toy_ds, tiny_net, stub_spec):
    cfg = tiny_net(2)
    before = init_network(cfg, seed=0)
    after, _ = train(toy_ds, toy_cfg(), cfg, stub_spec)
    assert after.names == before.names
    assert not after.equal(before)


def test_zero_steps_leave_parameters_untouched(toy_ds, tiny_net, stub_spec, tmp_path):
    cfg = tiny_net(2)
    trainer = Trainer(toy_ds, toy_cfg(max_steps=0), cfg, stub_spec, checkpoint_dir=tmp_path / "ckpt")
    result = trainer.run()
    assert result.log == []
    assert result.params.equal(init_network(cfg, seed=0))
    assert load_checkpoint(tmp_path / "ckpt" / "final").meta.step == 0


def test_same_seed_same_run(toy_ds, tiny_net, stub_spec):
    _, a = train(toy_ds, toy_cfg(max_steps=10), tiny_net(2), stub_spec)
    _, b = train(toy_ds, toy_cfg(max_steps=10), tiny_net(2), stub_spec)
    assert len(a) == 10
    assert [r.total for r in a] == [r.total for r in b]


def test_resume_replays_the_same_batches(toy_ds, tiny_net, stub_spec, tmp_path):
    cfg = tiny_net(2)
    train_cfg = toy_cfg(max_steps=10, checkpoint_every=5)
    full = Trainer(toy_ds, train_cfg, cfg, stub_spec, checkpoint_dir=tmp_path / "a").run()
    assert (tmp_path / "a" / "step_5").exists()
    assert (tmp_path / "a" / "step_10").exists()

    resumed = Trainer(toy_ds, train_cfg, cfg, stub_spec).run(resume=load_checkpoint(tmp_path / "a" / "step_5"))
    assert [r.step for r in resumed.log] == list(range(5, 10))
    assert [r.total for r in resumed.log] == [r.total for r in full.log[5:]]
    assert resumed.params.equal(full.params)
    assert resumed.optimizer.step == full.optimizer.step == 10


def test_resume_appends_to_the_log(toy_ds, tiny_net, stub_spec, tmp_path):
    cfg = tiny_net(2)
    log_path = tmp_path / "log.csv"
    Trainer(toy_ds, toy_cfg(), cfg, stub_spec, log_path=log_path, checkpoint_dir=tmp_path / "ckpt").run()
    Trainer(toy_ds, toy_cfg(max_steps=6), cfg, stub_spec, log_path=log_path).run(
        resume=load_checkpoint(tmp_path / "ckpt" / "step_2")
    )
    steps = [int(r["step"]) for r in read_csv(log_path)]
    assert steps == [0, 1, 2, 3, 2, 3, 4, 5]


def test_encoder_stays_frozen(toy_ds, tiny_net, stub_spec):
    encoder = EncoderFactory.create(stub_spec)
    projection = encoder._projection.clone()
    params, _ = train(toy_ds, toy_cfg(), tiny_net(2), stub_spec)
    assert torch.equal(encoder._projection, projection)
    assert all(n.split(".")[0] in {"backbone", "alignment", "reconstruction"} for n in params.names)


def test_patch_is_clipped_to_the_smallest_image(toy_ds, tiny_net, stub_spec):
    trainer = Trainer(toy_ds, toy_cfg(patch_size=48), tiny_net(2), stub_spec)
    assert trainer.patch == 16


def test_dataset_scale_must_match_network(toy_ds, tiny_net, stub_spec):
    with pytest.raises(ScaleMismatchError):
        Trainer(toy_ds, toy_cfg(), tiny_net(4), stub_spec)


def test_non_finite_loss_stops_the_run(toy_ds, tiny_net, stub_spec):
    cfg = tiny_net(2)
    params = init_network(cfg, seed=0)
    params["backbone.head.weight"][0, 0, 0, 0] = float("inf")
    with pytest.raises(TrainingDivergedError) as excinfo:
        Trainer(toy_ds, toy_cfg(), cfg, stub_spec).run(params=params)
    assert excinfo.value.snapshot["step"] == 0
    assert len(excinfo.value.snapshot["batch_indices"]) == 2


@pytest.fixture
def smooth_ds(image_dir):
    return build_dataset(image_dir(count=1, size=64, name="smooth", generator=lambda size, i: smooth(size)), scale=2)


def pixel_only(**overrides) -> TrainConfig:
    fields = dict(
        batch_size=4, patch_size=16, epochs=300, learning_rate=1e-3,
        weights=LossWeights(pixel=1.0, perceptual=0.0, semantic=0.0),
        scheduler=SchedulerConfig(kind="none"),
    )
    fields.update(overrides)
    return TrainConfig(**fields)


@pytest.mark.slow
def test_loss_falls_from_a_disturbed_start(smooth_ds, tiny_net, stub_spec):
    cfg = tiny_net(2, backbone_channels=16)
    params = init_network(cfg, seed=0)
    g = torch.Generator().manual_seed(1)
    final = params["reconstruction.final.weight"]
    final += 0.01 * torch.randn(final.shape, generator=g)
    _, rows = train(smooth_ds, pixel_only(), cfg, stub_spec, params=params)
    totals = [r.total for r in rows]
    assert np.mean(totals[-50:]) < 0.5 * np.mean(totals[:10])
    assert smoothed(totals)[-1] < smoothed(totals)[10]


def rings(size: int, _index: int = 0) -> np.ndarray:
    """Concentric square rings, 4 px wide, alternating 0.25 / 0.75; unchanged by flips and quarter turns."""
    centre = (size - 1) / 2
    y, x = np.mgrid[0:size, 0:size]
    band = np.floor(np.maximum(np.abs(x - centre), np.abs(y - centre))).astype(int) // 4
    grey = 0.25 + 0.5 * (band % 2)
    return np.repeat(grey[:, :, None], 3, axis=2)


@pytest.fixture
def ring_ds(image_dir):
    return build_dataset(image_dir(count=1, size=64, name="rings", generator=rings), scale=2)


@pytest.mark.slow
def test_single_image_fit_beats_bicubic(ring_ds, tiny_net, stub_spec):
    cfg = tiny_net(2, backbone_channels=16)
    # the whole 32x32 LR image is the patch, so all 500 batches are the same picture
    params, rows = train(ring_ds, pixel_only(epochs=500, patch_size=32, learning_rate=1e-4), cfg, stub_spec)
    assert len(rows) == 500

    totals = [r.total for r in rows]
    assert totals[-1] < totals[0]
    trend = smoothed(totals)[50::50]
    assert all(later < earlier for earlier, later in zip(trend, trend[1:]))

    bicubic = evaluate_bicubic(ring_ds, "rgb_full").psnr_db
    assert bicubic < 35.0
    assert evaluate(params, cfg, ring_ds, "rgb_full", stub_spec).psnr_db > bicubic


def test_trained_network_responds_to_the_embedding(toy_ds, tiny_net, stub_spec):
    cfg = tiny_net(2)
    params, _ = train(toy_ds, toy_cfg(max_steps=10), cfg, stub_spec)
    params = params.to(torch.float64)
    lr = toy_ds.pairs[0][0]
    first = torch.nn.functional.normalize(torch.arange(1, cfg.clip_dim + 1, dtype=torch.float64), dim=0)
    second = first.flip(0)
    with torch.no_grad():
        gap = (forward(params, cfg, lr, first) - forward(params, cfg, lr, second)).abs().max()
    assert float(gap) > 0.0
