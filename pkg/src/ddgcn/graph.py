"""Dense spatio-temporal graphs over skeleton sequences.

A sequence of ``T`` frames with ``M`` joints is one graph with ``T*M``
nodes. Its adjacency is a ``[T, M, T, M]`` tensor ``A`` whose entry
``A[i, j, m, n]`` weights the edge from node ``(m, n)`` into node ``(i, j)``.
"""
from __future__ import annotations

import io
from collections import deque
from dataclasses import dataclass

import numpy as np
import torch

from .core import DTYPE
from .exceptions import BoundsError, ConfigError, DimensionError, TopologyError


@dataclass(frozen=True)
class SkeletonTopology:
    """Joints, bones and the coarser groupings used by the extra levels.

    Joints are 0-based. ``groupings[k]`` is the partition of the joints
    used by level ``k + 1``; level 0 is the skeleton itself.
    """

    n_joints: int
    bones: tuple = ()
    groupings: tuple = ()
    name: str = "custom"

    def __post_init__(self):
        if self.n_joints < 1:
            raise TopologyError("a skeleton needs at least one joint")
        bones = tuple(tuple(sorted((int(a), int(b)))) for a, b in self.bones)
        for a, b in bones:
            if not (0 <= a < self.n_joints and 0 <= b < self.n_joints):
                raise TopologyError(f"bone ({a}, {b}) references a joint outside 0..{self.n_joints - 1}")
            if a == b:
                raise TopologyError(f"bone ({a}, {b}) connects a joint to itself")
        object.__setattr__(self, "bones", tuple(sorted(set(bones))))
        groupings = tuple(tuple(tuple(int(j) for j in part) for part in g) for g in self.groupings)
        for level, grouping in enumerate(groupings, start=1):
            _check_partition(grouping, self.n_joints, level)
        object.__setattr__(self, "groupings", groupings)

    @property
    def n_levels(self):
        return 1 + len(self.groupings)

    @property
    def level_sizes(self):
        return (self.n_joints,) + tuple(len(g) for g in self.groupings)

    def grouping(self, level):
        if level == 0:
            return tuple((j,) for j in range(self.n_joints))
        if not 0 < level <= len(self.groupings):
            raise TopologyError(f"skeleton has no level {level}")
        return self.groupings[level - 1]

    def bone_matrix(self):
        """Symmetric 0/1 joint relation: self-loops plus bones."""
        r = np.eye(self.n_joints, dtype=bool)
        for a, b in self.bones:
            r[a, b] = r[b, a] = True
        return r

    def parents(self, root=0):
        """Breadth-first parent of every joint; ``-1`` for roots."""
        nbrs = {j: [] for j in range(self.n_joints)}
        for a, b in self.bones:
            nbrs[a].append(b)
            nbrs[b].append(a)
        parent = [-2] * self.n_joints
        order = []
        for start in [root] + list(range(self.n_joints)):
            if parent[start] != -2:
                continue
            parent[start] = -1
            queue = deque([start])
            while queue:
                j = queue.popleft()
                order.append(j)
                for n in sorted(nbrs[j]):
                    if parent[n] == -2:
                        parent[n] = j
                        queue.append(n)
        return parent, order

    def coarsen(self, level):
        """Skeleton over the parts of ``level``; parts touching via a bone are linked."""
        parts = self.grouping(level)
        owner = {j: p for p, part in enumerate(parts) for j in part}
        bones = {(owner[a], owner[b]) for a, b in self.bones if owner[a] != owner[b]}
        return SkeletonTopology(len(parts), tuple(bones), name=f"{self.name}/level{level}")


def _check_partition(grouping, n_joints, level):
    seen = [p for part in grouping for p in part]
    if any(len(part) == 0 for part in grouping):
        raise TopologyError(f"level {level} grouping contains an empty part")
    if sorted(seen) != list(range(n_joints)):
        raise TopologyError(
            f"level {level} grouping is not a partition of joints 0..{n_joints - 1}"
        )


def chain_topology(n_joints, level_sizes=()):
    """A 1D chain ``0-1-...-(M-1)`` with contiguous groupings of the given sizes."""
    bones = tuple((j, j + 1) for j in range(n_joints - 1))
    groupings = []
    for size in level_sizes:
        if not 1 <= size <= n_joints:
            raise TopologyError(f"cannot group {n_joints} joints into {size} parts")
        groupings.append(tuple(tuple(int(j) for j in c)
                               for c in np.array_split(np.arange(n_joints), size)))
    return SkeletonTopology(n_joints, bones, tuple(groupings), name=f"chain{n_joints}")


# 22-joint body after dropping redundant joints:
#  0-3 right leg, 4-7 left leg, 8-11 spine to head, 12-16 left arm, 17-21 right arm.
H36M_JOINTS = (
    "RHip", "RKnee", "RAnkle", "RToe",
    "LHip", "LKnee", "LAnkle", "LToe",
    "Spine", "Thorax", "Neck", "Head",
    "LShoulder", "LElbow", "LWrist", "LHand", "LThumb",
    "RShoulder", "RElbow", "RWrist", "RHand", "RThumb",
)
H36M_BONES = (
    (0, 1), (1, 2), (2, 3), (4, 5), (5, 6), (6, 7),
    (0, 8), (4, 8), (8, 9), (9, 10), (10, 11),
    (9, 12), (12, 13), (13, 14), (14, 15), (14, 16),
    (9, 17), (17, 18), (18, 19), (19, 20), (19, 21),
)
H36M_PARTS_11 = (
    (0, 1), (2, 3), (4, 5), (6, 7), (8,), (9,), (10, 11),
    (12, 13), (14, 15, 16), (17, 18), (19, 20, 21),
)
H36M_PARTS_2 = (
    tuple(range(0, 9)), tuple(range(9, 22)),
)


def h36m_topology():
    """The 22-joint body with its 11-part and 2-part groupings."""
    return SkeletonTopology(22, H36M_BONES, (H36M_PARTS_11, H36M_PARTS_2), name="h36m22")


@dataclass
class Adjacency4D:
    """Trainable ``[T, M, T, M]`` weights plus the frozen initial edge set."""

    weights: torch.Tensor
    support: torch.Tensor
    degree: torch.Tensor

    def __post_init__(self):
        if self.weights.dim() != 4 or self.weights.shape[0] != self.weights.shape[2] \
                or self.weights.shape[1] != self.weights.shape[3]:
            raise DimensionError(f"adjacency must be [T, M, T, M], got {list(self.weights.shape)}")
        if self.support.shape != self.weights.shape:
            raise DimensionError("support and weights differ in shape")
        if self.degree.shape != self.weights.shape[:2]:
            raise DimensionError("degree must be [T, M]")

    @property
    def n_frames(self):
        return self.weights.shape[0]

    @property
    def n_joints(self):
        return self.weights.shape[1]

    @property
    def shape(self):
        return tuple(self.weights.shape)

    def normalized(self, weights=None):
        """Weights divided by the frozen in-degree of the receiving node."""
        w = self.weights if weights is None else weights
        return w / self.degree.to(w.dtype)[:, :, None, None]


def _degree_from_support(support):
    return support.reshape(support.shape[0], support.shape[1], -1).sum(-1)


def build_dense_adjacency(topo: SkeletonTopology, n_frames, init="mean"):
    """Initial dense graph over ``n_frames`` frames of ``topo``.

    Two nodes are linked when their joints coincide or share a bone,
    whatever their frames. ``init`` sets the starting weights on that
    support: ``"mean"`` puts 1 on every edge (so the normalised weights
    average the neighbourhood), ``"row_normalized"`` puts 1/degree.
    Entries outside the support start at zero but stay trainable.
    """
    if n_frames < 1:
        raise ConfigError(f"need at least one frame, got {n_frames}")
    if topo.n_joints > 1 and not topo.bones:
        raise TopologyError("a skeleton with more than one joint needs at least one bone")
    rel = torch.as_tensor(topo.bone_matrix())
    support = rel[None, :, None, :].expand(n_frames, -1, n_frames, -1).contiguous()
    degree = _degree_from_support(support)
    if init == "mean":
        weights = support.to(DTYPE)
    elif init == "row_normalized":
        weights = support.to(DTYPE) / degree.to(DTYPE)[:, :, None, None]
    else:
        raise ConfigError(f"unknown adjacency init scheme {init!r}")
    return Adjacency4D(weights.clone(), support, degree)


def reshape_block_matrix(a):
    """``[T, M, T, M]`` to ``[T*M, T*M]``; entry ``(i*M+j, m*M+n)`` is ``a[i, j, m, n]``."""
    w = a.weights if isinstance(a, Adjacency4D) else a
    t, m = w.shape[0], w.shape[1]
    return w.reshape(t * m, t * m)


def unreshape_block_matrix(mat, n_frames, n_joints):
    size = n_frames * n_joints
    if tuple(mat.shape) != (size, size):
        raise DimensionError(f"expected a {size}x{size} matrix, got {list(mat.shape)}")
    return mat.reshape(n_frames, n_joints, n_frames, n_joints)


@dataclass(frozen=True)
class SubgraphMask:
    kind: str
    mask: torch.Tensor


def subgraph_mask(kind, n_frames, n_joints):
    """Binary mask selecting pose subgraphs (same frame) or trajectories (same joint)."""
    if kind == "pose":
        sel = torch.eye(n_frames, dtype=torch.bool)[:, None, :, None]
    elif kind == "trajectory":
        sel = torch.eye(n_joints, dtype=torch.bool)[None, :, None, :]
    else:
        raise ConfigError(f"mask kind must be 'pose' or 'trajectory', got {kind!r}")
    mask = sel.expand(n_frames, n_joints, n_frames, n_joints).contiguous()
    return SubgraphMask(kind, mask)


@dataclass
class SkeletonTransform:
    """Joint-to-part matrix ``z`` (trainable) and its frozen indicator ``zbar``."""

    z: torch.Tensor
    zbar: torch.Tensor
    level: int


def init_skeleton_transform(topo: SkeletonTopology, level):
    """Averaging matrix for grouping ``level``: ``z[j, p] = 1/|part p|`` for ``j`` in part ``p``."""
    parts = topo.grouping(level)
    z = torch.zeros(topo.n_joints, len(parts), dtype=DTYPE)
    for p, part in enumerate(parts):
        for j in part:
            z[j, p] = 1.0 / len(part)
    return SkeletonTransform(z, (z != 0).to(DTYPE), level)


def apply_transform(z, f):
    """Pool joint features ``[..., T, M, D]`` into part features ``[..., T, M_s, D]``."""
    z = z.z if isinstance(z, SkeletonTransform) else z
    if f.dim() < 3 or f.shape[-2] != z.shape[0]:
        raise DimensionError(
            f"transform expects {z.shape[0]} joints on axis -2, got shape {list(f.shape)}"
        )
    return torch.einsum("...tjd,jp->...tpd", f, z)


def _check_range(rng, extent, what):
    start, stop = rng
    if not (0 <= start < stop <= extent):
        raise BoundsError(f"{what} range [{start}, {stop}) outside 0..{extent}")
    return slice(start, stop)


def export_subadjacency(a, frames=None, joints=None, col_frames=None, col_joints=None):
    """Slice of the block matrix as a 2D numpy grid.

    Row ``(i, j)`` and column ``(m, n)`` run over the frame and joint
    ranges (half-open ``(start, stop)`` pairs). Columns default to the
    row ranges.
    """
    w = a.weights if isinstance(a, Adjacency4D) else a
    t, m = w.shape[0], w.shape[1]
    frames = (0, t) if frames is None else frames
    joints = (0, m) if joints is None else joints
    col_frames = frames if col_frames is None else col_frames
    col_joints = joints if col_joints is None else col_joints
    fi = _check_range(frames, t, "frame")
    ji = _check_range(joints, m, "joint")
    fm = _check_range(col_frames, t, "column frame")
    jn = _check_range(col_joints, m, "column joint")
    block = w.detach()[fi, ji, fm, jn]
    r = block.shape[0] * block.shape[1]
    c = block.shape[2] * block.shape[3]
    return block.reshape(r, c).cpu().numpy().copy()


def grid_to_csv(grid):
    """Headerless CSV, one grid row per line, 17 significant digits."""
    buf = io.StringIO()
    for row in np.atleast_2d(grid):
        buf.write(",".join(format(float(v), ".17g") for v in row))
        buf.write("\n")
    return buf.getvalue()
