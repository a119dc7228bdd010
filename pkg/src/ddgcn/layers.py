"""Message-passing blocks of the dynamic dense graph convolution.

Feature tensors are laid out ``[N, T, M, d]`` (batch, frame, joint,
channel). Adjacency-shaped tensors are ``[T, M, T, M]``, or
``[N, T, M, T, M]`` for the per-sample dynamic weights.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .core import DTYPE, BN_EPS, BN_MOMENTUM, BatchNorm, dropout, softsign
from .exceptions import ConfigError, DimensionError
from .graph import Adjacency4D, SkeletonTopology, subgraph_mask

PHI_MODES = ("phi1", "phi2", "off")


def xavier_uniform_(t, fan_in, fan_out, generator=None):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    with torch.no_grad():
        t.uniform_(-bound, bound, generator=generator)
    return t


def dynamic_weights(h, mode):
    """Per-sample pairwise weights ``phi[..., i, j, m, n]`` from node features.

    ``phi1`` compares channel means, ``phi2`` the negated inner product;
    both pass through softsign so every weight lies in (-1, 1).
    """
    if mode == "phi1":
        mu = h.mean(-1)
        return softsign(mu[..., :, :, None, None] - mu[..., None, None, :, :])
    if mode == "phi2":
        t, m, d = h.shape[-3:]
        flat = h.reshape(*h.shape[:-3], t * m, d)
        gram = flat @ flat.transpose(-1, -2)
        return softsign(-gram).reshape(*h.shape[:-3], t, m, t, m)
    raise ConfigError(f"dynamic weights need mode 'phi1' or 'phi2', got {mode!r}")


def _alpha(adj):
    return adj.normalized() if isinstance(adj, Adjacency4D) else adj


def aggregate(h, adj, phi=None, d_out=None, mask=None):
    """Messages ``m[i, j] = sum_{m, n} (alpha[i, j, m, n] + phi[i, j, m, n] / sqrt(d_out)) h[m, n]``.

    ``adj`` is an :class:`Adjacency4D` or an already degree-normalised
    ``[T, M, T, M]`` tensor. ``mask`` zeroes coefficients of removed edges,
    dynamic ones included. The sum runs over every node; entries outside
    the initial support simply start at zero.
    """
    alpha = _alpha(adj)
    t, m = alpha.shape[0], alpha.shape[1]
    if h.shape[-3:-1] != (t, m):
        raise DimensionError(
            f"features have {tuple(h.shape[-3:-1])} (frames, joints), adjacency expects {(t, m)}"
        )
    coef = alpha
    if phi is not None:
        if d_out is None:
            raise ConfigError("d_out is required to scale the dynamic term")
        if phi.shape[-4:] != alpha.shape:
            raise DimensionError("dynamic weights and adjacency differ in shape")
        coef = coef + phi / math.sqrt(d_out)
    if mask is not None:
        coef = coef * mask
    flat = coef.reshape(*coef.shape[:-4], t * m, t * m)
    out = flat @ h.reshape(*h.shape[:-3], t * m, h.shape[-1])
    return out.reshape(h.shape)


class JointProjection(nn.Module):
    """Affine map ``Theta_j x + b`` with one matrix per joint, or one shared matrix."""

    def __init__(self, n_joints, d_in, d_out, shared=False):
        super().__init__()
        self.n_joints, self.d_in, self.d_out, self.shared = n_joints, d_in, d_out, shared
        shape = (d_out, d_in) if shared else (n_joints, d_out, d_in)
        self.theta = nn.Parameter(torch.zeros(shape, dtype=DTYPE))
        self.bias = nn.Parameter(torch.zeros(d_out, dtype=DTYPE))

    def reset_parameters(self, generator=None):
        xavier_uniform_(self.theta, self.d_in, self.d_out, generator)
        with torch.no_grad():
            self.bias.zero_()

    def forward(self, x):
        return project(x, self.theta, self.bias)


def project(x, theta, bias):
    if x.shape[-1] != theta.shape[-1]:
        raise DimensionError(f"projection expects {theta.shape[-1]} input channels, got {x.shape[-1]}")
    if theta.dim() == 2:
        return x @ theta.T + bias
    if x.shape[-2] != theta.shape[0]:
        raise DimensionError(f"projection has {theta.shape[0]} joints, features have {x.shape[-2]}")
    return torch.einsum("jod,...jd->...jo", theta, x) + bias


def update(h, m, theta, bias, activation=torch.tanh):
    """Node update ``activation(Theta_j (h + m) + b)``; ``activation=None`` keeps it linear."""
    if h.shape != m.shape:
        raise DimensionError(f"features {list(h.shape)} and messages {list(m.shape)} differ")
    out = project(h + m, theta, bias)
    return out if activation is None else activation(out)


class SLMP(nn.Module):
    """Single-level message passing: aggregate, joint-specific update, bn, dropout, tanh.

    With ``final=True`` the block is linear after the update (no batch
    norm, dropout or activation), which is what the decoder needs.
    """

    def __init__(self, adjacency: Adjacency4D, d_in, d_out, phi_mode="phi1",
                 dropout_rate=0.1, shared_theta=False, final=False,
                 bn_eps=BN_EPS, bn_momentum=BN_MOMENTUM):
        super().__init__()
        if phi_mode not in PHI_MODES:
            raise ConfigError(f"phi_mode must be one of {PHI_MODES}, got {phi_mode!r}")
        if not 0.0 <= dropout_rate < 1.0:
            raise ConfigError(f"dropout rate must lie in [0, 1), got {dropout_rate}")
        self.phi_mode = phi_mode
        self.dropout_rate = dropout_rate
        self.final = final
        self.d_in, self.d_out = d_in, d_out
        self.adjacency = nn.Parameter(adjacency.weights.clone())
        self.register_buffer("support", adjacency.support.clone())
        self.register_buffer("degree", adjacency.degree.clone())
        self.register_buffer("mask", None)
        self.update = JointProjection(adjacency.n_joints, d_in, d_out, shared_theta)
        self.bn = None if final else BatchNorm(d_out, bn_eps, bn_momentum)

    @property
    def n_joints(self):
        return self.adjacency.shape[1]

    def as_adjacency(self):
        return Adjacency4D(self.adjacency, self.support, self.degree)

    def alpha(self):
        return self.as_adjacency().normalized()

    def reset_parameters(self, generator=None):
        self.update.reset_parameters(generator)

    def message(self, h):
        phi = None if self.phi_mode == "off" else dynamic_weights(h, self.phi_mode)
        return aggregate(h, self.alpha(), phi, self.d_out, self.mask)

    def forward(self, h, generator=None):
        z = self.update(h + self.message(h))
        if self.final:
            return z
        z = self.bn(z)
        z = dropout(z, self.dropout_rate, generator, self.training)
        return torch.tanh(z)


@dataclass
class FactorizedAdjacency:
    """Pose adjacency ``[T, M, M]`` and trajectory adjacency ``[M, T, T]`` with their degrees."""

    pose: torch.Tensor
    trajectory: torch.Tensor
    pose_degree: torch.Tensor
    trajectory_degree: torch.Tensor

    def pose_alpha(self, pose=None):
        p = self.pose if pose is None else pose
        return p / self.pose_degree.to(p.dtype)[:, :, None]

    def trajectory_alpha(self, trajectory=None):
        t = self.trajectory if trajectory is None else trajectory
        return t / self.trajectory_degree.to(t.dtype)[:, :, None]

    def pose_as_4d(self):
        """The pose part scattered into a 4D adjacency (zero off the frame diagonal)."""
        t, m = self.pose.shape[0], self.pose.shape[1]
        w = torch.zeros(t, m, t, m, dtype=self.pose.dtype)
        idx = torch.arange(t)
        w[idx, :, idx, :] = self.pose
        return Adjacency4D(w, w != 0, self.pose_degree.clone())

    def trajectory_as_4d(self):
        """The trajectory part scattered into a 4D adjacency (diagonal blocks only)."""
        m, t = self.trajectory.shape[0], self.trajectory.shape[1]
        w = torch.zeros(t, m, t, m, dtype=self.trajectory.dtype)
        idx = torch.arange(m)
        w[:, idx, :, idx] = self.trajectory
        return Adjacency4D(w, w != 0, self.trajectory_degree.T.contiguous().clone())


def build_factorized_adjacency(topo: SkeletonTopology, n_frames):
    """Pose graph = bones plus self-loops per frame; trajectory graph = all frame pairs per joint."""
    rel = torch.as_tensor(topo.bone_matrix())
    pose = rel.to(DTYPE)[None].expand(n_frames, -1, -1).clone()
    pose_degree = rel.sum(-1)[None].expand(n_frames, -1).clone()
    traj = torch.ones(topo.n_joints, n_frames, n_frames, dtype=DTYPE)
    traj_degree = torch.full((topo.n_joints, n_frames), n_frames, dtype=torch.int64)
    return FactorizedAdjacency(pose, traj, pose_degree, traj_degree)


def pose_aggregate(h, alpha_pose, phi_mode, d_out):
    """Within-frame messages from ``[T, M, M]`` normalised weights."""
    coef = alpha_pose
    if phi_mode != "off":
        mu = h.mean(-1)
        if phi_mode == "phi1":
            phi = softsign(mu[..., :, :, None] - mu[..., :, None, :])
        else:
            phi = softsign(-(h @ h.transpose(-1, -2)))
        coef = coef + phi / math.sqrt(d_out)
    return coef @ h


def trajectory_aggregate(h, alpha_traj, phi_mode, d_out):
    """Same-joint messages across frames from ``[M, T, T]`` normalised weights."""
    x = h.transpose(-3, -2)  # [..., M, T, d]
    coef = alpha_traj
    if phi_mode != "off":
        if phi_mode == "phi1":
            mu = x.mean(-1)
            phi = softsign(mu[..., :, :, None] - mu[..., :, None, :])
        else:
            phi = softsign(-(x @ x.transpose(-1, -2)))
        coef = coef + phi / math.sqrt(d_out)
    return (coef @ x).transpose(-3, -2)


class FactorizedSLMP(nn.Module):
    """SLMP variant with separate pose and trajectory adjacencies.

    The pose step produces ``p``; the trajectory step adds its own
    messages computed from ``p``, so the final message is ``p + traj(p)``.
    A zero trajectory adjacency (with the dynamic term off) leaves purely
    spatial messages.
    """

    def __init__(self, adjacency: FactorizedAdjacency, d_in, d_out, phi_mode="phi1",
                 dropout_rate=0.1, shared_theta=False, bn_eps=BN_EPS, bn_momentum=BN_MOMENTUM):
        super().__init__()
        if phi_mode not in PHI_MODES:
            raise ConfigError(f"phi_mode must be one of {PHI_MODES}, got {phi_mode!r}")
        self.phi_mode = phi_mode
        self.dropout_rate = dropout_rate
        self.d_in, self.d_out = d_in, d_out
        self.pose = nn.Parameter(adjacency.pose.clone())
        self.trajectory = nn.Parameter(adjacency.trajectory.clone())
        self.register_buffer("pose_degree", adjacency.pose_degree.clone())
        self.register_buffer("trajectory_degree", adjacency.trajectory_degree.clone())
        self.update = JointProjection(adjacency.pose.shape[1], d_in, d_out, shared_theta)
        self.bn = BatchNorm(d_out, bn_eps, bn_momentum)

    def as_factorized(self):
        return FactorizedAdjacency(self.pose, self.trajectory, self.pose_degree,
                                   self.trajectory_degree)

    def reset_parameters(self, generator=None):
        self.update.reset_parameters(generator)

    def message(self, h):
        fa = self.as_factorized()
        p = pose_aggregate(h, fa.pose_alpha(), self.phi_mode, self.d_out)
        return p + trajectory_aggregate(p, fa.trajectory_alpha(), self.phi_mode, self.d_out)

    def forward(self, h, generator=None):
        z = self.bn(self.update(h + self.message(h)))
        z = dropout(z, self.dropout_rate, generator, self.training)
        return torch.tanh(z)


class CLMP(nn.Module):
    """Cross-level message from level-``s`` parts back to the fine joints.

    Per frame the output is ``zbar @ A @ H_s (@ Theta)``; the projection
    exists only when the channel counts of the two levels differ.
    """

    def __init__(self, zbar, d_s, d):
        super().__init__()
        self.register_buffer("zbar", zbar.detach().clone().to(DTYPE))
        n_parts = zbar.shape[1]
        self.a = nn.Parameter(torch.eye(n_parts, dtype=DTYPE))
        self.d_s, self.d = d_s, d
        if d_s != d:
            self.theta = nn.Parameter(torch.zeros(d_s, d, dtype=DTYPE))
        else:
            self.register_parameter("theta", None)

    def reset_parameters(self, generator=None):
        with torch.no_grad():
            self.a.copy_(torch.eye(self.a.shape[0], dtype=DTYPE))
        if self.theta is not None:
            xavier_uniform_(self.theta, self.d_s, self.d, generator)

    def forward(self, h_s):
        if h_s.shape[-2] != self.zbar.shape[1] or h_s.shape[-1] != self.d_s:
            raise DimensionError(
                f"cross-level input must be [..., {self.zbar.shape[1]}, {self.d_s}], "
                f"got {list(h_s.shape)}"
            )
        out = torch.einsum("jp,pq,...qd->...jd", self.zbar, self.a, h_s)
        return out if self.theta is None else out @ self.theta


class DDGCBlock(nn.Module):
    """SLMP at every level, then cross-level fusion into level 0.

    Level 0 leaves the block as its own SLMP output plus the CLMP message
    of every coarser level; levels ``1..S`` pass their SLMP outputs on.
    """

    def __init__(self, slmps, clmps):
        super().__init__()
        if len(clmps) != len(slmps) - 1:
            raise ConfigError("need one cross-level module per extra level")
        self.slmps = nn.ModuleList(slmps)
        self.clmps = nn.ModuleList(clmps)

    def reset_parameters(self, generator=None):
        for mod in list(self.slmps) + list(self.clmps):
            mod.reset_parameters(generator)

    def forward(self, hs, generator=None, extra=None):
        if len(hs) != len(self.slmps):
            raise DimensionError(f"block expects {len(self.slmps)} level inputs, got {len(hs)}")
        outs = [slmp(h, generator) for slmp, h in zip(self.slmps, hs)]
        if extra:
            for level, add in extra.items():
                outs[level] = outs[level] + add
        fused = outs[0]
        for clmp, h_s in zip(self.clmps, outs[1:]):
            fused = fused + clmp(h_s)
        return [fused] + outs[1:]


def static_reduction_forward(h, adj, kind, theta, bias, activation=torch.tanh):
    """Static graph convolution on the pose or trajectory subgraphs only.

    Aggregation without the dynamic term over the masked adjacency,
    followed by the update with whatever ``theta`` is given (a shared
    ``[d_out, d_in]`` matrix gives the classic layer).
    """
    alpha = _alpha(adj)
    mask = subgraph_mask(kind, alpha.shape[0], alpha.shape[1]).mask.to(alpha.dtype)
    m = aggregate(h, alpha * mask)
    return update(h, m, theta, bias, activation)
