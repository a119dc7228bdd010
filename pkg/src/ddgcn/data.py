"""SKEL1 motion files, synthetic motion, windowing and result export.

SKEL1 is a line-oriented text format::

    SKEL1 M=<joints> D=<dims> FPS=<rate> T=<frames>
    BONES 0-1 1-2 ...
    LEVEL 0,1 2,3          (optional, one line per coarser grouping)
    <M*D values for frame 0>
    ...

Values are whitespace separated decimals, joint-major within a frame.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ConfigError, ParseError, TopologyError
from .graph import SkeletonTopology


@dataclass
class MotionSequence:
    frames: np.ndarray  # [T, M, D]
    fps: float = 25.0
    topology: SkeletonTopology | None = None

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 3:
            raise ConfigError("frames must be [T, M, D]")
        if self.frames.shape[0] < 2:
            raise ConfigError("a motion sequence needs at least two frames")
        if not np.isfinite(self.frames).all():
            raise ConfigError("motion sequence contains non-finite values")
        if not self.fps > 0:
            raise ConfigError("fps must be positive")
        if self.topology is not None and self.topology.n_joints != self.n_joints:
            raise TopologyError("topology joint count differs from the frames")

    @property
    def n_frames(self):
        return self.frames.shape[0]

    @property
    def n_joints(self):
        return self.frames.shape[1]

    @property
    def n_dims(self):
        return self.frames.shape[2]


def write_skel(seq: MotionSequence) -> bytes:
    t, m, d = seq.frames.shape
    lines = [f"SKEL1 M={m} D={d} FPS={format(seq.fps, '.17g')} T={t}"]
    topo = seq.topology
    bones = topo.bones if topo is not None else ()
    lines.append(" ".join(["BONES"] + [f"{a}-{b}" for a, b in bones]))
    if topo is not None:
        for grouping in topo.groupings:
            lines.append(" ".join(["LEVEL"] + [",".join(map(str, p)) for p in grouping]))
    for frame in seq.frames:
        lines.append(" ".join(format(float(v), ".17g") for v in frame.reshape(-1)))
    return ("\n".join(lines) + "\n").encode("ascii")


def _header_fields(line, lineno):
    parts = line.split()
    if not parts or parts[0] != "SKEL1":
        raise ParseError("missing SKEL1 magic", lineno)
    values = {}
    for tok in parts[1:]:
        key, sep, val = tok.partition("=")
        if not sep:
            raise ParseError(f"malformed header field {tok!r}", lineno)
        values[key] = val
    missing = {"M", "D", "FPS", "T"} - set(values)
    if missing:
        raise ParseError(f"header lacks {sorted(missing)}", lineno)
    try:
        m, d, t = int(values["M"]), int(values["D"]), int(values["T"])
        fps = float(values["FPS"])
    except ValueError as exc:
        raise ParseError(f"bad header value: {exc}", lineno) from None
    if m < 1 or d < 1 or t < 2 or not (math.isfinite(fps) and fps > 0):
        raise ParseError("header requires M >= 1, D >= 1, T >= 2 and FPS > 0", lineno)
    return m, d, fps, t


def parse_skel(data: bytes | str) -> MotionSequence:
    text = data.decode("ascii") if isinstance(data, (bytes, bytearray)) else data
    lines = text.splitlines()
    if not lines:
        raise ParseError("empty document", 1)
    m, d, fps, t = _header_fields(lines[0], 1)
    if len(lines) < 2 or not lines[1].startswith("BONES"):
        raise ParseError("expected BONES line", min(2, len(lines)))
    bones = []
    for tok in lines[1].split()[1:]:
        a, sep, b = tok.partition("-")
        try:
            bones.append((int(a), int(b)))
        except ValueError:
            raise ParseError(f"malformed bone {tok!r}", 2) from None
    groupings = []
    pos = 2
    while pos < len(lines) and lines[pos].startswith("LEVEL"):
        try:
            groupings.append(tuple(tuple(int(j) for j in p.split(","))
                                   for p in lines[pos].split()[1:]))
        except ValueError:
            raise ParseError("malformed LEVEL line", pos + 1) from None
        pos += 1
    try:
        topo = SkeletonTopology(m, tuple(bones), tuple(groupings))
    except TopologyError as exc:
        raise ParseError(str(exc), 2) from None

    frames = np.empty((t, m * d))
    for k in range(t):
        lineno = pos + k + 1
        if pos + k >= len(lines):
            raise ParseError(f"expected {t} frames, found {k} before end of file", len(lines))
        toks = lines[pos + k].split()
        if len(toks) != m * d:
            raise ParseError(f"expected {m * d} values, found {len(toks)}", lineno)
        try:
            row = [float(v) for v in toks]
        except ValueError:
            raise ParseError("non-numeric value", lineno) from None
        if not all(math.isfinite(v) for v in row):
            raise ParseError("non-finite value", lineno)
        frames[k] = row
    extra = [i for i in range(pos + t, len(lines)) if lines[i].strip()]
    if extra:
        raise ParseError(f"more than the declared {t} frames", extra[0] + 1)
    return MotionSequence(frames.reshape(t, m, d), fps, topo)


def rest_pose(topo: SkeletonTopology, bone_length=1.0, n_dims=3):
    """Rest positions built outward from joint 0: children step one bone length away,
    siblings fanned around the vertical."""
    parent, order = topo.parents(0)
    children = {j: [c for c in order if parent[c] == j] for j in range(topo.n_joints)}
    pos = np.zeros((topo.n_joints, n_dims))
    for j in order:
        kids = children[j]
        for k, c in enumerate(kids):
            direction = np.zeros(n_dims)
            direction[min(1, n_dims - 1)] = 1.0
            if len(kids) > 1 and n_dims >= 3:
                theta = 2 * math.pi * k / len(kids)
                direction[0] += math.cos(theta)
                direction[2] += math.sin(theta)
            pos[c] = pos[j] + bone_length * direction / np.linalg.norm(direction)
    return pos


def synthesize_dataset(topo: SkeletonTopology, n_sequences, n_frames, seed=0, fps=25.0,
                       n_dims=3, bone_length=1.0, amplitude=0.3, freq_range=(0.2, 1.5),
                       drift=0.0):
    """Smooth periodic motion with exact bone lengths.

    Every non-root joint oscillates around its rest position by a sum of
    one to three sinusoids (random frequency in ``freq_range`` Hz, random
    phase, per-axis amplitude up to ``amplitude * bone_length``); each child
    is then pulled back to its rest distance from its already-placed parent.
    The root moves only by ``drift`` units per second along the first axis.
    """
    if n_sequences < 1:
        raise ConfigError("n_sequences must be at least 1")
    rng = np.random.default_rng(seed)
    parent, order = topo.parents(0)
    rest = rest_pose(topo, bone_length, n_dims)
    lengths = {j: np.linalg.norm(rest[j] - rest[parent[j]]) for j in order if parent[j] >= 0}
    t = np.arange(n_frames) / fps
    out = []
    for _ in range(n_sequences):
        raw = np.repeat(rest[None], n_frames, axis=0)
        for j in range(topo.n_joints):
            for a in range(n_dims):
                for _ in range(rng.integers(1, 4)):
                    f = rng.uniform(*freq_range)
                    phase = rng.uniform(0, 2 * math.pi)
                    amp = rng.uniform(0, amplitude * bone_length)
                    raw[:, j, a] += amp * np.sin(2 * math.pi * f * t + phase)
        pos = np.empty_like(raw)
        for j in order:
            p = parent[j]
            if p < 0:
                pos[:, j] = rest[j]
                pos[:, j, 0] += drift * t
                continue
            v = raw[:, j] - pos[:, p]
            norm = np.linalg.norm(v, axis=-1, keepdims=True)
            fallback = (rest[j] - rest[p])[None]
            v = np.where(norm > 1e-12, v / np.maximum(norm, 1e-300), fallback / lengths[j])
            pos[:, j] = pos[:, p] + lengths[j] * v
        out.append(MotionSequence(pos, fps, topo))
    return out


def split_windows(seq, t_history, t_future, stride=1):
    """Sliding ``(history, future)`` windows, in order, from one sequence."""
    frames = seq.frames if isinstance(seq, MotionSequence) else np.asarray(seq)
    span = t_history + t_future
    if t_history < 1 or t_future < 0 or stride < 1:
        raise ConfigError("need t_history >= 1, t_future >= 0 and stride >= 1")
    if span > frames.shape[0]:
        raise ConfigError(f"window of {span} frames exceeds the {frames.shape[0]}-frame sequence")
    return [(frames[s:s + t_history], frames[s + t_history:s + span])
            for s in range(0, frames.shape[0] - span + 1, stride)]


def stack_windows(windows):
    """Windows to a pair of ``[N, T_h, M, D]`` / ``[N, T_f, M, D]`` arrays."""
    if not windows:
        raise ConfigError("no windows to stack")
    return np.stack([w[0] for w in windows]), np.stack([w[1] for w in windows])


@dataclass
class DatasetSplit:
    t_history: int
    t_future: int
    train: list = field(default_factory=list)
    val: list = field(default_factory=list)
    test: list = field(default_factory=list)

    def arrays(self, part):
        return stack_windows(getattr(self, part))


def make_split(sequences, t_history, t_future, stride=1, fractions=(0.8, 0.1, 0.1)):
    """Assign whole sequences to train/val/test in order, then window each one."""
    n = len(sequences)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    split = DatasetSplit(t_history, t_future)
    for k, seq in enumerate(sequences):
        part = split.train if k < n_train else split.val if k < n_train + n_val else split.test
        part.extend(split_windows(seq, t_history, t_future, stride))
    return split


def export_errors(rows) -> bytes:
    """CSV ``horizon_ms,mpjpe_mm`` in ascending horizon order."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["horizon_ms", "mpjpe_mm"])
    for row in sorted(rows, key=_horizon_of):
        h, err = _horizon_of(row), row["mpjpe"] if isinstance(row, dict) else row[1]
        writer.writerow([format(h, "g"), format(float(err), ".17g")])
    return buf.getvalue().encode("ascii")


def _horizon_of(row):
    return row["horizon_ms"] if isinstance(row, dict) else row[0]


def read_errors(data: bytes):
    reader = csv.reader(io.StringIO(data.decode("ascii")))
    header = next(reader)
    if header != ["horizon_ms", "mpjpe_mm"]:
        raise ParseError("unexpected error-table header", 1)
    return [(float(h), float(e)) for h, e in reader]
