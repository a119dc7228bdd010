"""Loss, optimiser, schedule and the training loop."""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from .core import DTYPE, as_real_tensor
from .exceptions import ConfigError, DimensionError, HorizonError, TrainingDivergedError
from .model import DDGCN, ModelConfig, pad_history, parameter_groups

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    """Optimisation settings; defaults follow the published recipe."""

    epochs: int = 50
    batch_size: int = 16
    base_lr: float = 1e-5
    lr_decay: float = 0.96
    decay_every: int = 4
    clip_norm: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    checkpoint_every: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.decay_every < 1:
            raise ConfigError("epochs >= 0, batch_size >= 1 and decay_every >= 1 required")
        if self.clip_norm <= 0:
            raise ConfigError("clip_norm must be positive")
        if self.base_lr < 0:
            raise ConfigError("base_lr must be non-negative")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)


def mpjpe_loss(pred, gt):
    """Mean Euclidean distance between predicted and true joints over all samples, frames, joints."""
    if pred.shape != gt.shape:
        raise DimensionError(f"prediction {list(pred.shape)} and target {list(gt.shape)} differ")
    return torch.linalg.vector_norm(gt - pred, dim=-1).mean()


def lr_at_epoch(epoch, base_lr=1e-5, decay=0.96, every=4):
    """Step schedule: ``base_lr * decay ** (epoch // every)`` for 0-based ``epoch``."""
    if epoch < 0:
        raise ConfigError("epoch must be non-negative")
    return base_lr * decay ** (epoch // every)


def global_norm(grads):
    return math.sqrt(sum(float((g.double() ** 2).sum()) for g in grads))


def clip_gradients(grads, max_norm):
    """Rescale so the joint l2 norm is at most ``max_norm``.

    Accepts a list or a name-to-tensor dict and returns the same kind of
    container with new tensors, plus the norm before clipping.
    """
    if max_norm <= 0:
        raise ConfigError("max_norm must be positive")
    items = list(grads.values()) if isinstance(grads, dict) else list(grads)
    norm = global_norm(items)
    scale = max_norm / norm if norm > max_norm else 1.0
    clipped = [g * scale if scale != 1.0 else g.clone() for g in items]
    if isinstance(grads, dict):
        return dict(zip(grads, clipped)), norm
    return clipped, norm


@dataclass
class Adam:
    """Bias-corrected Adam over named tensors."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def from_config(cls, cfg: TrainConfig):
        return cls(cfg.beta1, cfg.beta2, cfg.adam_eps)

    def step(self, params: dict, grads: dict, lr):
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        with torch.no_grad():
            for name, p in params.items():
                g = grads[name]
                if name not in self.m:
                    self.m[name] = torch.zeros_like(p, dtype=DTYPE)
                    self.v[name] = torch.zeros_like(p, dtype=DTYPE)
                m = self.m[name].mul_(self.beta1).add_(g, alpha=1.0 - self.beta1)
                v = self.v[name].mul_(self.beta2).addcmul_(g, g, value=1.0 - self.beta2)
                p.sub_(lr * (m / c1) / (torch.sqrt(v / c2) + self.eps))


def adam_step(params, grads, state: Adam, lr):
    state.step(params, grads, lr)
    return params, state


def zero_velocity_forecast(history, t_future):
    """Every future frame is a copy of the last observed frame."""
    return pad_history(history, history.shape[-3] + t_future)[..., history.shape[-3]:, :, :]


@dataclass
class FitResult:
    model: DDGCN
    history: list
    optimizer: Adam
    best_epoch: int | None = None


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    return [order[k:k + batch_size] for k in range(0, n, batch_size)]


def _offending_group(model, grads=None):
    for group, items in parameter_groups(model).items():
        for name, p in items:
            if not torch.isfinite(p).all():
                return group
            if grads is not None and name in grads and not torch.isfinite(grads[name]).all():
                return group
    return "inputs"


def evaluate_loss(model, history, future, batch_size=64):
    """Loss over all frames in eval mode, averaged per sample."""
    model.eval()
    total, n = 0.0, history.shape[0]
    with torch.no_grad():
        for k in range(0, n, batch_size):
            x, y = history[k:k + batch_size], future[k:k + batch_size]
            pred = model(x)
            total += float(mpjpe_loss(pred, torch.cat([x, y], dim=1))) * x.shape[0]
    return total / max(n, 1)


def fit(model_cfg: ModelConfig, train, val=None, train_cfg: TrainConfig | None = None,
        out_dir=None, topology=None, model=None):
    """Train a network on ``(history, future)`` arrays.

    ``train`` and ``val`` are pairs of ``[N, T_h, M, D]`` and ``[N, T_f, M, D]``
    arrays. The loss covers every frame: observed frames are reconstructed,
    future frames forecast. When ``out_dir`` is given, checkpoints (periodic,
    best-validation and last) and ``loss_history.csv`` are written there.
    """
    from .checkpoint import save_checkpoint

    train_cfg = train_cfg or TrainConfig()
    x_train = as_real_tensor(train[0], "train history")
    y_train = as_real_tensor(train[1], "train future")
    if x_train.shape[0] == 0:
        raise ConfigError("training set is empty")
    if x_train.shape[0] != y_train.shape[0]:
        raise DimensionError("history and future sample counts differ")
    if val is not None:
        x_val, y_val = as_real_tensor(val[0], "val history"), as_real_tensor(val[1], "val future")
    if model is None:
        model = DDGCN(model_cfg, topology)
        model.reset_parameters(torch.Generator().manual_seed(train_cfg.seed))
    expected = (model_cfg.t_history, model_cfg.n_joints, model_cfg.n_dims)
    if tuple(x_train.shape[1:]) != expected:
        raise DimensionError(f"history samples must be {list(expected)}, got {list(x_train.shape[1:])}")
    if y_train.shape[1] != model_cfg.t_future:
        raise DimensionError(f"future samples must have {model_cfg.t_future} frames")

    out = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(train_cfg.seed)
    gen = torch.Generator().manual_seed(train_cfg.seed + 1)
    optimizer = Adam.from_config(train_cfg)
    params = dict(model.named_parameters())
    target = torch.cat([x_train, y_train], dim=1)
    history, best_val, best_epoch = [], math.inf, None

    for epoch in range(train_cfg.epochs):
        lr = lr_at_epoch(epoch, train_cfg.base_lr, train_cfg.lr_decay, train_cfg.decay_every)
        model.train()
        running, seen = 0.0, 0
        for b, idx in enumerate(_batches(x_train.shape[0], train_cfg.batch_size, rng)):
            idx = torch.as_tensor(idx)
            pred = model(x_train[idx], gen)
            loss = mpjpe_loss(pred, target[idx])
            if not torch.isfinite(loss):
                raise TrainingDivergedError(epoch, b, _offending_group(model))
            grads = torch.autograd.grad(loss, list(params.values()), allow_unused=True)
            grads = {n: torch.zeros_like(p) if g is None else g
                     for (n, p), g in zip(params.items(), grads)}
            if not all(torch.isfinite(g).all() for g in grads.values()):
                raise TrainingDivergedError(epoch, b, _offending_group(model, grads))
            grads, _ = clip_gradients(grads, train_cfg.clip_norm)
            optimizer.step(params, grads, lr)
            running += loss.item() * len(idx)
            seen += len(idx)
        row = {"epoch": epoch + 1, "lr": lr, "train_loss": running / seen, "val_loss": math.nan}
        if val is not None:
            row["val_loss"] = evaluate_loss(model, x_val, y_val)
        history.append(row)
        logger.info("epoch %d lr %.3g train %.6f val %.6f", epoch + 1, lr,
                    row["train_loss"], row["val_loss"])

        if out is not None:
            if val is not None and row["val_loss"] < best_val:
                best_val, best_epoch = row["val_loss"], epoch + 1
                save_checkpoint(out / "best.ckpt", model, optimizer, epoch + 1, train_cfg)
            if train_cfg.checkpoint_every and (epoch + 1) % train_cfg.checkpoint_every == 0:
                save_checkpoint(out / f"epoch{epoch + 1:03d}.ckpt", model, optimizer,
                                epoch + 1, train_cfg)
        elif val is not None and row["val_loss"] < best_val:
            best_val, best_epoch = row["val_loss"], epoch + 1

    if out is not None:
        save_checkpoint(out / "last.ckpt", model, optimizer, train_cfg.epochs, train_cfg)
        (out / "loss_history.csv").write_text(history_to_csv(history))
    model.eval()
    return FitResult(model, history, optimizer, best_epoch)


def history_to_csv(history):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["epoch", "lr", "train_loss", "val_loss"])
    for row in history:
        writer.writerow([row["epoch"], format(row["lr"], ".17g"),
                         format(row["train_loss"], ".17g"), format(row["val_loss"], ".17g")])
    return buf.getvalue()


def horizon_offset(horizon_ms, fps):
    """Frames after the last observed one that correspond to ``horizon_ms``."""
    return int(math.floor(horizon_ms * fps / 1000.0 + 0.5))


def evaluate_horizons(model, history, future, horizons_ms, fps=25.0, batch_size=64,
                      predictions=None):
    """MPJPE at each horizon, per single frame and averaged up to that frame.

    A horizon of ``h`` ms lands on the ``round(h * fps / 1000)``-th predicted
    frame (the first predicted frame is offset 1). Pass ``predictions``
    (``[N, T_f, M, D]``) to score a forecast without running ``model``.
    """
    future = as_real_tensor(future, "future")
    t_future = future.shape[1]
    offsets = []
    for h in horizons_ms:
        k = horizon_offset(h, fps)
        if k < 1 or k > t_future:
            raise HorizonError(
                f"horizon {h} ms is frame {k} ahead; predictions cover frames 1..{t_future}"
            )
        offsets.append(k)
    if predictions is None:
        history = as_real_tensor(history, "history")
        model.eval()
        chunks = []
        with torch.no_grad():
            for k in range(0, history.shape[0], batch_size):
                chunks.append(model(history[k:k + batch_size])[:, -t_future:])
        predictions = torch.cat(chunks)
    else:
        predictions = as_real_tensor(predictions, "predictions")
    err = torch.linalg.vector_norm(predictions - future, dim=-1).mean(dim=(0, 2))
    rows = []
    for h, k in sorted(zip(horizons_ms, offsets)):
        rows.append({
            "horizon_ms": h,
            "frame_offset": k,
            "mpjpe": float(err[k - 1]),
            "mpjpe_cumulative": float(err[:k].mean()),
        })
    return rows
