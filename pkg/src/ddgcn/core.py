"""Tensor primitives shared by the graph layers.

Everything runs in float64 on the CPU. Reverse-mode differentiation is
delegated to torch autograd; :func:`finite_diff_check` is the independent
central-difference audit of those gradients.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
import torch
from torch import nn

from .exceptions import ConfigError, DimensionError, NumericError

DTYPE = torch.float64

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def as_real_tensor(x, name="tensor"):
    """Convert ``x`` to a float64 tensor, rejecting NaN and Inf."""
    t = torch.as_tensor(x, dtype=DTYPE)
    if not torch.isfinite(t).all():
        raise NumericError(f"{name} contains non-finite values")
    return t


def softsign(x):
    """Elementwise ``x / (1 + |x|)``; the derivative at 0 is 1."""
    return x / (1.0 + x.abs())


def contract(a, b, axes_a: Sequence[int], axes_b: Sequence[int]):
    """Sum-product of ``a`` and ``b`` over paired axes.

    The free axes of ``a`` come first, followed by the free axes of ``b``,
    each in their original order.
    """
    axes_a, axes_b = list(axes_a), list(axes_b)
    if len(axes_a) != len(axes_b):
        raise DimensionError(f"cannot pair {len(axes_a)} axes with {len(axes_b)} axes")
    for ia, ib in zip(axes_a, axes_b):
        if a.shape[ia] != b.shape[ib]:
            raise DimensionError(
                f"paired axes differ in extent: a[{ia}]={a.shape[ia]} vs b[{ib}]={b.shape[ib]}"
            )
    return torch.tensordot(a, b, dims=(axes_a, axes_b))


def batch_norm(x, weight, bias, running_mean, running_var, training,
               momentum=BN_MOMENTUM, eps=BN_EPS):
    """Normalise the trailing channel axis over every other axis.

    In training mode the batch statistics are used and the running
    buffers are updated in place (unbiased variance, as torch does).
    """
    channels = x.shape[-1]
    if weight.shape[0] != channels:
        raise DimensionError(f"batch norm expects {weight.shape[0]} channels, got {channels}")
    reduce_dims = tuple(range(x.dim() - 1))
    if training:
        mean = x.mean(dim=reduce_dims)
        var = x.var(dim=reduce_dims, unbiased=False)
        n = x.numel() // channels
        with torch.no_grad():
            running_mean.mul_(1 - momentum).add_(momentum * mean.detach())
            unbiased = var.detach() * (n / max(n - 1, 1))
            running_var.mul_(1 - momentum).add_(momentum * unbiased)
    else:
        mean, var = running_mean, running_var
    return (x - mean) / torch.sqrt(var + eps) * weight + bias


class BatchNorm(nn.Module):
    """Per-channel batch normalisation for ``[..., channels]`` tensors."""

    def __init__(self, channels, eps=BN_EPS, momentum=BN_MOMENTUM):
        super().__init__()
        self.eps = eps
        self.momentum = momentum
        self.weight = nn.Parameter(torch.ones(channels, dtype=DTYPE))
        self.bias = nn.Parameter(torch.zeros(channels, dtype=DTYPE))
        self.register_buffer("running_mean", torch.zeros(channels, dtype=DTYPE))
        self.register_buffer("running_var", torch.ones(channels, dtype=DTYPE))

    def forward(self, x):
        return batch_norm(x, self.weight, self.bias, self.running_mean,
                          self.running_var, self.training, self.momentum, self.eps)


def dropout(x, rate, generator=None, training=True):
    """Inverted dropout. Returns ``x`` itself when inactive."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    keep = torch.rand(x.shape, generator=generator, dtype=DTYPE) >= rate
    return x * keep / (1.0 - rate)


def tape_gradients(loss, leaves: Sequence[torch.Tensor], seed=None):
    """Backpropagate ``loss`` and return one gradient per leaf.

    Leaves that do not influence ``loss`` get a zero tensor. ``seed`` is
    the upstream gradient (defaults to ones).
    """
    grads = torch.autograd.grad(loss, list(leaves), grad_outputs=seed, allow_unused=True)
    return [torch.zeros_like(leaf) if g is None else g for leaf, g in zip(leaves, grads)]


@dataclass
class GradCheckReport:
    """Outcome of a finite-difference audit."""

    eps: float
    max_rel_error: float = 0.0
    max_abs_error: float = 0.0
    n_checked: int = 0
    per_leaf: dict = field(default_factory=dict)

    def passed(self, tol):
        return self.max_rel_error < tol

    def worst(self):
        if not self.per_leaf:
            return None
        return max(self.per_leaf, key=lambda k: self.per_leaf[k]["max_rel_error"])


def finite_diff_check(f: Callable[[], torch.Tensor],
                      leaves: Mapping[str, torch.Tensor] | Sequence[torch.Tensor],
                      eps=1e-6, abs_floor=1e-5, max_per_leaf=None, seed=0):
    """Compare autograd gradients of scalar ``f()`` with central differences.

    ``leaves`` are tensors with ``requires_grad`` that ``f`` closes over;
    they are perturbed in place and restored. The relative error of an
    element is ``|fd - ad| / max(|fd|, |ad|, abs_floor)``, so gradients far
    below ``abs_floor`` are judged by absolute error instead.
    ``max_per_leaf`` limits the audit to a seeded random subset of each leaf.
    """
    if eps <= 0:
        raise ConfigError("eps must be positive")
    if not isinstance(leaves, Mapping):
        leaves = {f"leaf{i}": t for i, t in enumerate(leaves)}
    names = list(leaves)
    tensors = [leaves[n] for n in names]

    def evaluate():
        value = f()
        v = float(value)
        if not np.isfinite(v):
            raise NumericError("objective evaluated to a non-finite value")
        return v

    loss = f()
    if not torch.isfinite(loss):
        raise NumericError("objective evaluated to a non-finite value")
    analytic = tape_gradients(loss, tensors)

    rng = np.random.default_rng(seed)
    report = GradCheckReport(eps=eps)
    with torch.no_grad():
        for name, leaf, grad in zip(names, tensors, analytic):
            flat = leaf.view(-1)
            gflat = grad.reshape(-1)
            idx = np.arange(flat.numel())
            if max_per_leaf is not None and flat.numel() > max_per_leaf:
                idx = np.sort(rng.choice(flat.numel(), size=max_per_leaf, replace=False))
            worst_rel = worst_abs = 0.0
            for k in idx:
                orig = flat[k].item()
                flat[k] = orig + eps
                up = evaluate()
                flat[k] = orig - eps
                down = evaluate()
                flat[k] = orig
                fd = (up - down) / (2 * eps)
                ad = gflat[k].item()
                err = abs(fd - ad)
                rel = err / max(abs(fd), abs(ad), abs_floor)
                worst_rel = max(worst_rel, rel)
                worst_abs = max(worst_abs, err)
            report.per_leaf[name] = {
                "n": len(idx), "max_rel_error": worst_rel, "max_abs_error": worst_abs,
            }
            report.n_checked += len(idx)
            report.max_rel_error = max(report.max_rel_error, worst_rel)
            report.max_abs_error = max(report.max_abs_error, worst_abs)
    return report
