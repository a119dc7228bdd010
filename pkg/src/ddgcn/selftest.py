"""Fast oracle-equivalence and invariant checks behind ``ddgcn selftest``.

Each check returns a :class:`CheckResult`; vectorised code is compared
against the loop implementations in :mod:`ddgcn.reference`.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import torch

from . import reference as ref
from .core import DTYPE, finite_diff_check
from .graph import build_dense_adjacency, chain_topology, subgraph_mask
from .layers import (
    SLMP,
    FactorizedSLMP,
    build_factorized_adjacency,
    dynamic_weights,
    static_reduction_forward,
)
from .model import DDGCN, ModelConfig, pad_history, zero_decoder_
from .training import TrainConfig, clip_gradients, lr_at_epoch, mpjpe_loss

ORACLE_TOL = 1e-10
GRAD_TOL = 1e-4

TOY_CONFIG = ModelConfig(
    t_history=2, t_future=2, n_joints=4, d_hidden=8, n_blocks=1, n_levels_extra=2,
    level_joint_counts=(4, 2, 1), topology="chain", dropout=0.0,
)


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    threshold: float
    seconds: float = 0.0

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: value={self.value:.3e} threshold={self.threshold:.1e} ({self.seconds:.2f}s)"


def _randomised_adjacency(topo, n_frames, gen):
    """Default adjacency with the support weights jittered so the test is not symmetric."""
    adj = build_dense_adjacency(topo, n_frames)
    noise = torch.rand(adj.weights.shape, generator=gen, dtype=DTYPE) + 0.5
    adj.weights = adj.weights * noise
    return adj


def check_aggregation(seed=0):
    """Dense dynamic aggregation against the quadruple loop, both dynamic modes."""
    gen = torch.Generator().manual_seed(seed)
    topo = chain_topology(3)
    adj = _randomised_adjacency(topo, 4, gen)
    h = torch.randn(4, 3, 2, generator=gen, dtype=DTYPE)
    worst = 0.0
    for mode in ("phi1", "phi2"):
        slmp = SLMP(adj, 2, 2, phi_mode=mode)
        fast = slmp.message(h).detach().numpy()
        slow = ref.aggregate(h.numpy(), adj.weights.numpy(), adj.degree.numpy(), mode, 2)
        worst = max(worst, float(np.abs(fast - slow).max()))
    return worst


def _reduction_setup(seed):
    gen = torch.Generator().manual_seed(seed)
    topo = chain_topology(4)
    adj = _randomised_adjacency(topo, 5, gen)
    h = torch.randn(5, 4, 3, generator=gen, dtype=DTYPE)
    theta = torch.randn(6, 3, generator=gen, dtype=DTYPE)
    bias = torch.randn(6, generator=gen, dtype=DTYPE)
    alpha = adj.normalized().numpy()
    return adj, h, theta, bias, alpha


def check_spatial_reduction(seed=1):
    adj, h, theta, bias, alpha = _reduction_setup(seed)
    fast = static_reduction_forward(h, adj, "pose", theta, bias).numpy()
    blocks = [alpha[i, :, i, :] for i in range(alpha.shape[0])]
    slow = ref.per_frame_gcn(h.numpy(), blocks, theta.numpy(), bias.numpy())
    return float(np.abs(fast - slow).max())


def check_temporal_reduction(seed=2):
    adj, h, theta, bias, alpha = _reduction_setup(seed)
    fast = static_reduction_forward(h, adj, "trajectory", theta, bias).numpy()
    trajectories = [alpha[:, j, :, j] for j in range(alpha.shape[1])]
    slow = ref.per_joint_temporal_gcn(h.numpy(), trajectories, theta.numpy(), bias.numpy())
    return float(np.abs(fast - slow).max())


def check_factorized(seed=3):
    """Pose-then-trajectory SLMP against two masked 4D loop aggregations."""
    gen = torch.Generator().manual_seed(seed)
    topo = chain_topology(3)
    t = 4
    fa = build_factorized_adjacency(topo, t)
    fa.pose = fa.pose * (torch.rand(fa.pose.shape, generator=gen, dtype=DTYPE) + 0.5)
    fa.trajectory = fa.trajectory * (torch.rand(fa.trajectory.shape, generator=gen, dtype=DTYPE) + 0.5)
    worst = 0.0
    h = torch.randn(2, t, 3, 4, generator=gen, dtype=DTYPE)
    for mode in ("off", "phi1", "phi2"):
        layer = FactorizedSLMP(fa, 4, 5, phi_mode=mode, dropout_rate=0.0)
        layer.reset_parameters(gen)
        pose4, traj4 = fa.pose_as_4d(), fa.trajectory_as_4d()
        pmask = subgraph_mask("pose", t, 3).mask.numpy()
        tmask = subgraph_mask("trajectory", t, 3).mask.numpy()
        phi = None if mode == "off" else mode
        msgs = []
        for x in h.numpy():
            p = ref.aggregate(x, pose4.weights.numpy(), pose4.degree.numpy(), phi, 5, pmask)
            q = ref.aggregate(p, traj4.weights.numpy(), traj4.degree.numpy(), phi, 5, tmask)
            msgs.append(p + q)
        msgs = np.stack(msgs)
        worst = max(worst, float(np.abs(layer.message(h).detach().numpy() - msgs).max()))
        lin = np.stack([ref.update(x, mm, layer.update.theta.detach().numpy(),
                                   layer.update.bias.detach().numpy(), None)
                        for x, mm in zip(h.numpy(), msgs)])
        slow = np.tanh(ref.batch_norm_train(lin, 1.0, 0.0, layer.bn.eps))
        layer.train()
        worst = max(worst, float(np.abs(layer(h).detach().numpy() - slow).max()))
    return worst


def toy_model(seed=0, dropout=0.0):
    cfg = ModelConfig(**{**TOY_CONFIG.to_dict(), "dropout": dropout, "seed": seed})
    return DDGCN(cfg)


def gradient_audit(seed=0, eps=1e-6, max_per_leaf=None):
    """Finite-difference audit of every parameter of the toy model in training mode."""
    model = toy_model(seed)
    model.train()
    gen = torch.Generator().manual_seed(seed + 100)
    cfg = model.cfg
    x = torch.randn(3, cfg.t_history, cfg.n_joints, cfg.n_dims, generator=gen, dtype=DTYPE)
    y = torch.randn(3, cfg.n_frames, cfg.n_joints, cfg.n_dims, generator=gen, dtype=DTYPE)
    params = dict(model.named_parameters())
    return finite_diff_check(lambda: mpjpe_loss(model(x), y), params, eps=eps,
                             max_per_leaf=max_per_leaf, seed=seed)


def check_gradients(seed=0):
    return gradient_audit(seed).max_rel_error


def full_shapes():
    """Shapes produced by the default configuration, built and run on the meta device."""
    cfg = ModelConfig()
    with torch.device("meta"):
        model = DDGCN(cfg)
        x = torch.empty(16, cfg.t_history, cfg.n_joints, cfg.n_dims, dtype=DTYPE)
        padded = pad_history(x, cfg.n_frames)
        levels = model.level_inputs(padded)
        hidden = [enc(f) for enc, f in zip(model.encoders, levels)]
        out = model(x)
    fa = build_factorized_adjacency(model.topology, cfg.n_frames)
    return {
        "adjacency": tuple(model.encoders[0].adjacency.shape),
        "hidden_level0": tuple(hidden[0].shape),
        "hidden_level1": tuple(hidden[1].shape),
        "hidden_level2": tuple(hidden[2].shape),
        "pose_adjacency": tuple(fa.pose.shape),
        "trajectory_adjacency": tuple(fa.trajectory.shape),
        "output": tuple(out.shape),
    }


EXPECTED_SHAPES = {
    "adjacency": (50, 22, 50, 22),
    "hidden_level0": (16, 50, 22, 128),
    "hidden_level1": (16, 50, 11, 128),
    "hidden_level2": (16, 50, 2, 128),
    "pose_adjacency": (50, 22, 22),
    "trajectory_adjacency": (22, 50, 50),
    "output": (16, 50, 22, 3),
}


def check_shapes():
    got = full_shapes()
    return float(sum(got[k] != v for k, v in EXPECTED_SHAPES.items()))


def phi_properties(n_pairs=100_000, seed=0):
    """Range, antisymmetry and diagonal sign of the dynamic weights on random pairs.

    Returns the number of violations.
    """
    rng = np.random.default_rng(seed)
    scale = 10.0 ** rng.uniform(-3, 3, size=(n_pairs, 1, 1, 1))
    h = torch.from_numpy(rng.standard_normal((n_pairs, 1, 2, 8)) * scale)
    bad = 0
    for mode in ("phi1", "phi2"):
        phi = dynamic_weights(h, mode)[:, 0, :, 0, :]  # [N, 2, 2]
        bad += int(((phi <= -1) | (phi >= 1)).sum())
        if mode == "phi1":
            bad += int((phi[:, 0, 1] != -phi[:, 1, 0]).sum())
            bad += int((phi.diagonal(dim1=1, dim2=2) != 0).sum())
        else:
            bad += int((phi.diagonal(dim1=1, dim2=2) > 0).sum())
    return float(bad)


def check_residual_identity(seed=0):
    """With the decoder zeroed the network returns the padded history bit for bit."""
    model = zero_decoder_(toy_model(seed, dropout=0.1))
    gen = torch.Generator().manual_seed(seed)
    cfg = model.cfg
    x = torch.randn(5, cfg.t_history, cfg.n_joints, cfg.n_dims, generator=gen, dtype=DTYPE)
    bad = 0
    for training in (True, False):
        model.train(training)
        with torch.no_grad():
            out = model(x, gen)
        bad += int((out != pad_history(x, cfg.n_frames)).sum())
    return float(bad)


def check_hyperparameters():
    """Deviations of the default schedule and optimiser settings from the published values."""
    cfg = TrainConfig()
    deviations = [
        abs(lr_at_epoch(0, cfg.base_lr, cfg.lr_decay, cfg.decay_every) - 1e-5),
        abs(lr_at_epoch(4, cfg.base_lr, cfg.lr_decay, cfg.decay_every) - 9.6e-6),
        abs(cfg.clip_norm - 1.0),
        abs(cfg.batch_size - 16),
        abs(cfg.epochs - 50),
    ]
    g, norm = clip_gradients([torch.full((4,), 10.0, dtype=DTYPE)], cfg.clip_norm)
    deviations.append(abs(float(torch.linalg.vector_norm(g[0])) - 1.0))
    deviations.append(abs(norm - 20.0))
    return max(deviations)


CHECKS = [
    ("aggregation_oracle", check_aggregation, ORACLE_TOL),
    ("spatial_reduction", check_spatial_reduction, ORACLE_TOL),
    ("temporal_reduction", check_temporal_reduction, ORACLE_TOL),
    ("factorized_slmp", check_factorized, ORACLE_TOL),
    ("gradient_audit", check_gradients, GRAD_TOL),
    ("shape_conformance", check_shapes, 0.5),
    ("phi_properties", phi_properties, 0.5),
    ("residual_identity", check_residual_identity, 0.5),
    ("hyperparameters", check_hyperparameters, 1e-15),
]


def run_check(name, fn, threshold):
    start = time.perf_counter()
    value = float(fn())
    return CheckResult(name, value < threshold, value, threshold, time.perf_counter() - start)


def run_all(names=None):
    return [run_check(n, fn, tol) for n, fn, tol in CHECKS if names is None or n in names]
