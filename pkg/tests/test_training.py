import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from ddgcn import reference as ref
from ddgcn.exceptions import ConfigError, DimensionError, HorizonError, TrainingDivergedError
from ddgcn.model import ModelConfig
from ddgcn.selftest import TOY_CONFIG
from ddgcn.training import (
    Adam,
    TrainConfig,
    adam_step,
    clip_gradients,
    evaluate_horizons,
    fit,
    global_norm,
    history_to_csv,
    horizon_offset,
    lr_at_epoch,
    mpjpe_loss,
    zero_velocity_forecast,
)

D = torch.float64


def test_mpjpe_examples():
    g = torch.Generator().manual_seed(0)
    gt = torch.randn(2, 3, 4, 3, generator=g, dtype=D)
    assert mpjpe_loss(gt, gt).item() == 0
    shift = torch.tensor([3.0, 4.0, 0.0], dtype=D)
    assert mpjpe_loss(gt + shift, gt).item() == pytest.approx(5.0, abs=1e-12)
    pred = torch.randn(2, 3, 4, 3, generator=g, dtype=D)
    assert mpjpe_loss(pred, gt).item() == pytest.approx(ref.mpjpe(pred.numpy(), gt.numpy()), abs=1e-12)
    with pytest.raises(DimensionError):
        mpjpe_loss(pred, gt[:, :2])


@settings(max_examples=30)
@given(st.integers(0, 2**31 - 1), st.lists(st.floats(-100, 100), min_size=3, max_size=3))
def test_mpjpe_non_negative_and_translation_invariant(seed, c):
    g = torch.Generator().manual_seed(seed)
    p, q = torch.randn(1, 2, 3, 3, generator=g, dtype=D), torch.randn(1, 2, 3, 3, generator=g, dtype=D)
    c = torch.tensor(c, dtype=D)
    assert mpjpe_loss(p, q) >= 0
    assert abs(mpjpe_loss(p + c, q + c) - mpjpe_loss(p, q)) < 1e-9


def test_clip_examples():
    grads = [torch.tensor([2.0, 0.0], dtype=D)]
    clipped, norm = clip_gradients(grads, 1.0)
    assert norm == 2.0 and clipped[0].tolist() == [1.0, 0.0]
    small = {"a": torch.tensor([0.3, 0.4], dtype=D)}
    same, _ = clip_gradients(small, 1.0)
    assert torch.equal(same["a"], small["a"])
    with pytest.raises(ConfigError):
        clip_gradients(grads, 0.0)


@settings(max_examples=40)
@given(st.integers(0, 2**31 - 1), st.floats(0.01, 100))
def test_clip_properties(seed, max_norm):
    g = torch.Generator().manual_seed(seed)
    grads = [torch.randn(3, generator=g, dtype=D) * 10, torch.randn(2, 2, generator=g, dtype=D)]
    clipped, norm = clip_gradients(grads, max_norm)
    assert abs(global_norm(clipped) - min(norm, max_norm)) < 1e-12 * max(1, norm)
    for a, b in zip(grads, clipped):
        assert (b.abs() <= a.abs() + 1e-15).all()


def test_lr_schedule_examples():
    assert lr_at_epoch(0) == 1e-5
    assert lr_at_epoch(3) == 1e-5
    assert lr_at_epoch(4) == pytest.approx(9.6e-6, rel=1e-12)
    with pytest.raises(ConfigError):
        lr_at_epoch(-1)


@given(st.integers(0, 500))
def test_lr_non_increasing(epoch):
    assert lr_at_epoch(epoch + 1) <= lr_at_epoch(epoch)


def test_adam_first_step_is_lr_sign():
    p = {"w": torch.tensor([1.0, -2.0], dtype=D)}
    state = Adam()
    adam_step(p, {"w": torch.tensor([0.3, -5.0], dtype=D)}, state, 1e-3)
    assert p["w"].tolist() == pytest.approx([1.0 - 1e-3, -2.0 + 1e-3], abs=1e-10)


def test_adam_zero_gradient_keeps_params_and_decays_moments():
    p = {"w": torch.tensor([1.0], dtype=D)}
    state = Adam()
    state.step(p, {"w": torch.tensor([1.0], dtype=D)}, 0.1)
    before, m, v = p["w"].clone(), state.m["w"].clone(), state.v["w"].clone()
    state.step(p, {"w": torch.tensor([0.0], dtype=D)}, 0.0)
    assert torch.equal(p["w"], before)
    assert state.m["w"].item() == pytest.approx(0.9 * m.item())
    assert state.v["w"].item() == pytest.approx(0.999 * v.item())


def test_adam_matches_hand_rolled_trajectory():
    x = {"x": torch.tensor([1.0], dtype=D)}
    state = Adam()
    ours = [1.0]
    for _ in range(10):
        state.step(x, {"x": 2 * x["x"].clone()}, 0.1)
        ours.append(x["x"].item())
    oracle = ref.adam_trajectory(lambda v: 2 * v, 1.0, 0.1, 10)
    assert max(abs(a - b) for a, b in zip(ours, oracle)) < 1e-12


def test_train_config_defaults_and_validation():
    cfg = TrainConfig()
    assert (cfg.epochs, cfg.batch_size, cfg.base_lr, cfg.clip_norm) == (50, 16, 1e-5, 1.0)
    assert (cfg.beta1, cfg.beta2, cfg.adam_eps) == (0.9, 0.999, 1e-8)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"epoch": 3})
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)
    with pytest.raises(ConfigError):
        TrainConfig(clip_norm=-1)


def _toy_data(n, seed=0):
    g = torch.Generator().manual_seed(seed)
    cfg = TOY_CONFIG
    x = torch.randn(n, cfg.t_history, cfg.n_joints, cfg.n_dims, generator=g, dtype=D)
    y = x[:, -1:] + 0.1 * torch.randn(n, cfg.t_future, cfg.n_joints, cfg.n_dims, generator=g, dtype=D)
    return x.numpy(), y.numpy()


def test_fit_overfits_single_sample():
    train = _toy_data(1)
    result = fit(TOY_CONFIG, train, train_cfg=TrainConfig(epochs=50, base_lr=1e-3, checkpoint_every=0))
    assert result.history[-1]["train_loss"] < result.history[0]["train_loss"]
    assert len(result.history) == 50


def test_fit_is_deterministic():
    train, val = _toy_data(20, 1), _toy_data(6, 2)
    cfg = ModelConfig(**{**TOY_CONFIG.to_dict(), "dropout": 0.2})
    tc = TrainConfig(epochs=4, batch_size=8, base_lr=1e-3, seed=3)
    a = fit(cfg, train, val, tc).history
    b = fit(cfg, train, val, tc).history
    for ra, rb in zip(a, b):
        for key in ("train_loss", "val_loss"):
            assert abs(ra[key] - rb[key]) < 1e-12


def test_zero_learning_rate_keeps_loss_constant():
    train = _toy_data(8, 4)
    cfg = TOY_CONFIG
    # one batch per epoch, so batch statistics see the same samples every time;
    # eval-mode losses would still drift with the batch-norm running averages
    result = fit(cfg, train, None, TrainConfig(epochs=3, base_lr=0.0, batch_size=16))
    losses = [r["train_loss"] for r in result.history]
    assert max(losses) - min(losses) < 1e-12  # only the summation order changes
    before = dict(fit(cfg, train, None, TrainConfig(epochs=0)).model.named_parameters())
    for name, p in result.model.named_parameters():
        assert torch.equal(p, before[name])


def test_fit_writes_outputs(tmp_path):
    train, val = _toy_data(10, 5), _toy_data(4, 6)
    fit(TOY_CONFIG, train, val, TrainConfig(epochs=4, checkpoint_every=2, base_lr=1e-3), out_dir=tmp_path)
    names = {p.name for p in tmp_path.iterdir()}
    assert {"best.ckpt", "last.ckpt", "epoch002.ckpt", "epoch004.ckpt", "loss_history.csv"} <= names
    lines = (tmp_path / "loss_history.csv").read_text().splitlines()
    assert lines[0] == "epoch,lr,train_loss,val_loss" and len(lines) == 5


def test_fit_input_validation():
    x, y = _toy_data(4)
    with pytest.raises(DimensionError):
        fit(TOY_CONFIG, (x, y[:2]))
    with pytest.raises(DimensionError):
        fit(TOY_CONFIG, (x[:, :1], y))
    with pytest.raises(ConfigError):
        fit(TOY_CONFIG, (x[:0], y[:0]))


def test_fit_reports_divergence():
    x, y = _toy_data(4)
    with pytest.raises(TrainingDivergedError) as info:
        fit(TOY_CONFIG, (x, y), train_cfg=TrainConfig(epochs=2, batch_size=2, base_lr=1e300))
    assert (info.value.epoch, info.value.batch) == (0, 1)


def test_history_csv_round_trip():
    hist = [{"epoch": 1, "lr": 1e-5, "train_loss": 1 / 3, "val_loss": math.nan}]
    line = history_to_csv(hist).splitlines()[1].split(",")
    assert float(line[2]) == 1 / 3 and math.isnan(float(line[3]))


@pytest.mark.parametrize("ms, fps, k", [(1000, 25, 25), (80, 25, 2), (400, 25, 10), (560, 25, 14)])
def test_horizon_offsets(ms, fps, k):
    assert horizon_offset(ms, fps) == k


def test_evaluate_horizons_perfect_and_values():
    g = torch.Generator().manual_seed(7)
    hist = torch.randn(5, 2, 3, 3, generator=g, dtype=D)
    fut = torch.randn(5, 4, 3, 3, generator=g, dtype=D)
    rows = evaluate_horizons(None, hist, fut, [80, 160], 25, predictions=fut)
    assert all(r["mpjpe"] == 0 and r["mpjpe_cumulative"] == 0 for r in rows)
    pred = fut + torch.arange(1, 5, dtype=D)[None, :, None, None] * torch.tensor([1.0, 0, 0], dtype=D)
    rows = evaluate_horizons(None, hist, fut, [160, 80], 25, predictions=pred)
    assert [r["horizon_ms"] for r in rows] == [80, 160]
    assert rows[0]["frame_offset"] == 2 and rows[0]["mpjpe"] == pytest.approx(2.0)
    assert rows[0]["mpjpe_cumulative"] == pytest.approx(1.5)
    assert rows[1]["mpjpe"] == pytest.approx(4.0) and rows[1]["mpjpe_cumulative"] == pytest.approx(2.5)


def test_evaluate_horizons_range_errors():
    fut = torch.zeros(1, 4, 2, 3, dtype=D)
    for bad in ([200], [10]):
        with pytest.raises(HorizonError):
            evaluate_horizons(None, fut[:, :1], fut, bad, 25, predictions=fut)


def test_evaluate_horizons_runs_model():
    from ddgcn.model import DDGCN

    cfg = ModelConfig(**{**TOY_CONFIG.to_dict(), "decoder_init": "zero"})
    model = DDGCN(cfg)
    x, y = _toy_data(3)
    rows = evaluate_horizons(model, x, y, [40, 80], 25)
    zv = zero_velocity_forecast(torch.from_numpy(x), 2)
    expected = torch.linalg.vector_norm(zv - torch.from_numpy(y), dim=-1).mean(dim=(0, 2))
    assert [r["mpjpe"] for r in rows] == pytest.approx(expected.tolist(), abs=1e-14)


def test_zero_velocity_forecast():
    x = torch.arange(6, dtype=D).reshape(1, 2, 1, 3)
    zv = zero_velocity_forecast(x, 3)
    assert zv.shape == (1, 3, 1, 3) and torch.equal(zv[0, 2, 0], x[0, 1, 0])
    assert np.isclose(mpjpe_loss(zv, x[:, -1:].expand(-1, 3, -1, -1)).item(), 0)
