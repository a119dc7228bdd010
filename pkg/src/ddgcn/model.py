"""The full multi-level network: encoders, stacked blocks, skip, decoder, residual."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import torch
from torch import nn

from .core import BN_EPS, BN_MOMENTUM, DTYPE
from .exceptions import ConfigError, DimensionError
from .graph import (
    SkeletonTopology,
    apply_transform,
    build_dense_adjacency,
    chain_topology,
    h36m_topology,
    init_skeleton_transform,
)
from .layers import CLMP, PHI_MODES, SLMP, DDGCBlock


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    Defaults reproduce the published setup: 10 observed plus 40 predicted
    frames, 22 joints pooled to 11 and 2 parts, 3 blocks of width 128.
    """

    t_history: int = 10
    t_future: int = 40
    n_joints: int = 22
    n_dims: int = 3
    d_hidden: int = 128
    n_blocks: int = 3
    n_levels_extra: int = 2
    level_joint_counts: tuple = (22, 11, 2)
    topology: str = "h36m"
    dropout: float = 0.1
    phi_mode: str = "phi1"
    adjacency_init: str = "mean"
    decoder_init: str = "xavier"
    bn_eps: float = BN_EPS
    bn_momentum: float = BN_MOMENTUM
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "level_joint_counts", tuple(int(c) for c in self.level_joint_counts))
        if self.n_blocks < 1:
            raise ConfigError("n_blocks must be at least 1")
        if self.n_levels_extra < 0:
            raise ConfigError("n_levels_extra must be non-negative")
        if len(self.level_joint_counts) != self.n_levels_extra + 1:
            raise ConfigError(
                f"level_joint_counts has {len(self.level_joint_counts)} entries, "
                f"expected n_levels_extra + 1 = {self.n_levels_extra + 1}"
            )
        if self.level_joint_counts[0] != self.n_joints:
            raise ConfigError("level_joint_counts[0] must equal n_joints")
        if self.t_history < 1 or self.t_future < 0 or self.n_frames < 2:
            raise ConfigError("need t_history >= 1 and at least two frames in total")
        if self.phi_mode not in PHI_MODES:
            raise ConfigError(f"phi_mode must be one of {PHI_MODES}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.decoder_init not in ("xavier", "zero"):
            raise ConfigError("decoder_init must be 'xavier' or 'zero'")
        if self.topology not in ("h36m", "chain"):
            raise ConfigError(f"unknown topology {self.topology!r}")

    @property
    def n_frames(self):
        return self.t_history + self.t_future

    def build_topology(self) -> SkeletonTopology:
        if self.topology == "h36m":
            topo = h36m_topology()
            if topo.level_sizes[: len(self.level_joint_counts)] != self.level_joint_counts \
                    or len(self.level_joint_counts) > topo.n_levels:
                raise ConfigError(
                    f"h36m skeleton provides levels {topo.level_sizes}, "
                    f"config asks for {self.level_joint_counts}"
                )
            return SkeletonTopology(topo.n_joints, topo.bones,
                                    topo.groupings[: self.n_levels_extra], topo.name)
        return chain_topology(self.n_joints, self.level_joint_counts[1:])

    def to_dict(self):
        d = asdict(self)
        d["level_joint_counts"] = list(self.level_joint_counts)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def pad_history(x, n_frames):
    """Extend ``[..., T_h, M, D]`` to ``n_frames`` by repeating the last observed frame."""
    t_h = x.shape[-3]
    if t_h < 1:
        raise ConfigError("history must contain at least one frame")
    if n_frames < t_h:
        raise ConfigError(f"cannot pad {t_h} frames down to {n_frames}")
    if n_frames == t_h:
        return x
    last = x[..., -1:, :, :]
    reps = [1] * x.dim()
    reps[-3] = n_frames - t_h
    return torch.cat([x, last.repeat(*reps)], dim=-3)


class DDGCN(nn.Module):
    """Multi-level dynamic dense graph network for motion forecasting.

    ``forward`` takes ``[N, T_h, M, D]`` history and returns ``[N, T, M, D]``
    covering observed and predicted frames. The output is the padded
    history plus a learned correction, so an untrained decoder with zero
    weights reproduces the zero-velocity forecast exactly.
    """

    def __init__(self, cfg: ModelConfig, topology: SkeletonTopology | None = None):
        super().__init__()
        self.cfg = cfg
        topo = cfg.build_topology() if topology is None else topology
        if topo.n_joints != cfg.n_joints or topo.level_sizes != cfg.level_joint_counts:
            raise ConfigError(
                f"topology levels {topo.level_sizes} do not match config {cfg.level_joint_counts}"
            )
        self.topology = topo
        T, d = cfg.n_frames, cfg.d_hidden

        self.transforms = nn.ParameterList()
        zbars = []
        for s in range(1, topo.n_levels):
            zt = init_skeleton_transform(topo, s)
            self.transforms.append(nn.Parameter(zt.z))
            zbars.append(zt.zbar)
        adjs = [build_dense_adjacency(topo.coarsen(s) if s else topo, T, cfg.adjacency_init)
                for s in range(topo.n_levels)]

        def slmp(s, d_in, d_out, **kw):
            return SLMP(adjs[s], d_in, d_out, phi_mode=cfg.phi_mode, dropout_rate=cfg.dropout,
                        bn_eps=cfg.bn_eps, bn_momentum=cfg.bn_momentum, **kw)

        self.encoders = nn.ModuleList(slmp(s, cfg.n_dims, d) for s in range(topo.n_levels))
        self.blocks = nn.ModuleList(
            DDGCBlock([slmp(s, d, d) for s in range(topo.n_levels)],
                      [CLMP(zb, d, d) for zb in zbars])
            for _ in range(cfg.n_blocks)
        )
        self.skip = slmp(topo.n_levels - 1, d, d)
        self.decoder = slmp(0, d, cfg.n_dims, final=True)
        self.reset_parameters(torch.Generator().manual_seed(cfg.seed))

    @property
    def n_levels(self):
        return self.topology.n_levels

    def reset_parameters(self, generator=None):
        """Xavier-uniform projections, zero biases, identity cross-level adjacency.

        With ``decoder_init="zero"`` the decoder projection starts at zero,
        so the fresh network forecasts zero velocity.
        """
        for mod in [*self.encoders, *self.blocks, self.skip, self.decoder]:
            mod.reset_parameters(generator)
        if self.cfg.decoder_init == "zero":
            zero_decoder_(self)

    def level_inputs(self, padded):
        return [padded] + [apply_transform(z, padded) for z in self.transforms]

    def forward(self, x, generator=None):
        cfg = self.cfg
        if x.dim() != 4 or tuple(x.shape[1:]) != (cfg.t_history, cfg.n_joints, cfg.n_dims):
            raise DimensionError(
                f"expected input [N, {cfg.t_history}, {cfg.n_joints}, {cfg.n_dims}], "
                f"got {list(x.shape)}"
            )
        padded = pad_history(x, cfg.n_frames)
        hs = [enc(f, generator) for enc, f in zip(self.encoders, self.level_inputs(padded))]
        coarsest = self.n_levels - 1
        skip = self.skip(hs[coarsest], generator)
        for k, block in enumerate(self.blocks):
            extra = {coarsest: skip} if k == len(self.blocks) - 1 else None
            hs = block(hs, generator, extra)
        return self.decoder(hs[0]) + padded


def init_params(cfg: ModelConfig, seed=None, topology=None) -> DDGCN:
    """A freshly initialised network; deterministic in ``seed`` (default ``cfg.seed``)."""
    model = DDGCN(cfg, topology)
    seed = cfg.seed if seed is None else seed
    model.reset_parameters(torch.Generator().manual_seed(seed))
    return model


def param_count(module: nn.Module):
    """Total scalar parameter count and a per-group breakdown.

    Groups are the first component of each parameter name.
    """
    groups = {}
    for name, p in module.named_parameters():
        group = name.split(".", 1)[0]
        groups[group] = groups.get(group, 0) + p.numel()
    return sum(groups.values()), groups


def parameter_groups(module: nn.Module):
    """Parameters bucketed by their owning sub-module path, e.g. ``blocks.0.slmps.1``."""
    out = {}
    for name, p in module.named_parameters():
        out.setdefault(name.rsplit(".", 1)[0] if "." in name else name, []).append((name, p))
    return out


def zero_decoder_(model: DDGCN):
    with torch.no_grad():
        model.decoder.update.theta.zero_()
        model.decoder.update.bias.zero_()
    return model


__all__ = [
    "DDGCN", "ModelConfig", "init_params", "pad_history", "param_count",
    "parameter_groups", "zero_decoder_", "DTYPE",
]
