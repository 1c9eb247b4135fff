"""Skeleton sequences, body graphs, ingestion, synthetic data, and preprocessing.

Array convention: a sequence is a dense float32 array of shape (C, T, V, P)
with C=3 coordinate channels (x, y, z) in meters, T frames, V joints, and
P person slots. Absent persons are all-zero slots.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, ParseError

NTU_JOINT_COUNT = 25
NTU_MAX_BODIES = 2
DEFAULT_TARGET_FRAMES = 50

CACHE_MAGIC = b"SKCACHE1"
CACHE_VERSION = 1


# ---------------------------------------------------------------------------
# Core types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SkeletonGraph:
    """Tree-structured body topology.

    Attributes:
        num_joints: V
        edges: (parent, child) pairs forming a tree rooted at `root`
        root: reference joint used for centering and as the bone-stream origin
        flip_pairs: (left, right) joint index pairs swapped by spatial flip
    """
    num_joints: int
    edges: tuple[tuple[int, int], ...]
    root: int = 0
    flip_pairs: tuple[tuple[int, int], ...] = ()

    def __post_init__(self):
        for p, c in self.edges:
            if not (0 <= p < self.num_joints and 0 <= c < self.num_joints):
                raise ConfigError(f"edge ({p}, {c}) out of range for V={self.num_joints}")

    @property
    def adjacency(self) -> np.ndarray:
        """Symmetric binary adjacency with self-loops, shape (V, V)."""
        a = np.eye(self.num_joints, dtype=np.float64)
        for p, c in self.edges:
            a[p, c] = 1.0
            a[c, p] = 1.0
        return a

    def parents(self) -> np.ndarray:
        """Parent index per joint, -1 for the root."""
        par = np.full(self.num_joints, -1, dtype=np.int64)
        for p, c in self.edges:
            par[c] = p
        return par

    def topological_order(self) -> list[int]:
        """Joint indices ordered root first, every child after its parent."""
        children: dict[int, list[int]] = {v: [] for v in range(self.num_joints)}
        for p, c in self.edges:
            children[p].append(c)
        order, stack = [], [self.root]
        while stack:
            v = stack.pop()
            order.append(v)
            stack.extend(reversed(children[v]))
        return order

    def flip_permutation(self) -> np.ndarray:
        """Joint permutation exchanging left and right body sides."""
        perm = np.arange(self.num_joints)
        for a, b in self.flip_pairs:
            perm[a], perm[b] = b, a
        return perm


@dataclass
class SkeletonSequence:
    """One skeleton clip: data (C, T, V, P) plus optional annotations."""
    data: np.ndarray
    label: int | None = None
    subject_id: int | None = None
    view_id: int | None = None

    def __post_init__(self):
        if self.data.ndim != 4:
            raise ValueError(f"expected (C, T, V, P) array, got shape {self.data.shape}")

    @property
    def num_channels(self) -> int:
        return self.data.shape[0]

    @property
    def num_frames(self) -> int:
        return self.data.shape[1]

    @property
    def num_joints(self) -> int:
        return self.data.shape[2]

    @property
    def num_persons(self) -> int:
        return self.data.shape[3]


@dataclass
class Dataset:
    """Immutable collection of sequences sharing one graph and split."""
    sequences: list[SkeletonSequence]
    graph: SkeletonGraph
    split_tag: str
    class_count: int

    def __post_init__(self):
        if self.split_tag not in ("train", "test"):
            raise ConfigError(f"split_tag must be 'train' or 'test', got {self.split_tag!r}")
        for i, seq in enumerate(self.sequences):
            if seq.num_joints != self.graph.num_joints:
                raise ValueError(f"sequence {i} has V={seq.num_joints}, graph has V={self.graph.num_joints}")
            if seq.label is not None and not (0 <= seq.label < self.class_count):
                raise ValueError(f"sequence {i} label {seq.label} outside [0, {self.class_count})")
        persons = {s.num_persons for s in self.sequences}
        if len(persons) > 1:
            raise ValueError(f"sequences disagree on P: {sorted(persons)}")

    def __len__(self) -> int:
        return len(self.sequences)

    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.sequences], dtype=np.int64)

    def stacked(self) -> np.ndarray:
        """All sequences as one (N, C, T, V, P) array; requires uniform T."""
        return np.stack([s.data for s in self.sequences], axis=0)


# ---------------------------------------------------------------------------
# Built-in graphs
# ---------------------------------------------------------------------------

# NTU 25-joint body, 0-based, rooted at the base of the spine.
_NTU_EDGES = (
    (0, 1), (1, 20), (20, 2), (2, 3),
    (20, 4), (4, 5), (5, 6), (6, 7), (7, 21), (7, 22),
    (20, 8), (8, 9), (9, 10), (10, 11), (11, 23), (11, 24),
    (0, 12), (12, 13), (13, 14), (14, 15),
    (0, 16), (16, 17), (17, 18), (18, 19),
)
_NTU_FLIP_PAIRS = (
    (4, 8), (5, 9), (6, 10), (7, 11), (21, 23), (22, 24),
    (12, 16), (13, 17), (14, 18), (15, 19),
)

# Reduced 11-joint stick figure for fast tests:
# 0 pelvis, 1 chest, 2 head, 3/5 shoulders, 4/6 hands, 7/9 hips, 8/10 feet.
_REDUCED_EDGES = (
    (0, 1), (1, 2), (1, 3), (3, 4), (1, 5), (5, 6),
    (0, 7), (7, 8), (0, 9), (9, 10),
)
_REDUCED_FLIP_PAIRS = ((3, 5), (4, 6), (7, 9), (8, 10))


def ntu_graph() -> SkeletonGraph:
    return SkeletonGraph(25, _NTU_EDGES, root=0, flip_pairs=_NTU_FLIP_PAIRS)


def reduced_graph() -> SkeletonGraph:
    return SkeletonGraph(11, _REDUCED_EDGES, root=0, flip_pairs=_REDUCED_FLIP_PAIRS)


def graph_for_joints(num_joints: int) -> SkeletonGraph:
    if num_joints == 25:
        return ntu_graph()
    if num_joints == 11:
        return reduced_graph()
    raise ConfigError(f"no built-in graph with {num_joints} joints (choose 11 or 25)")


# Rest poses (V, 3) for the synthetic generator, standing figure in meters.
_REDUCED_REST = np.array([
    [0.00, 0.90, 0.0], [0.00, 1.25, 0.0], [0.00, 1.55, 0.0],
    [0.20, 1.40, 0.0], [0.45, 1.10, 0.0], [-0.20, 1.40, 0.0], [-0.45, 1.10, 0.0],
    [0.10, 0.85, 0.0], [0.12, 0.05, 0.0], [-0.10, 0.85, 0.0], [-0.12, 0.05, 0.0],
])
_NTU_REST = np.array([
    [0.00, 1.00, 0.0], [0.00, 1.15, 0.0], [0.00, 1.50, 0.0], [0.00, 1.65, 0.0],
    [0.18, 1.40, 0.0], [0.30, 1.15, 0.0], [0.38, 0.95, 0.0], [0.42, 0.88, 0.0],
    [-0.18, 1.40, 0.0], [-0.30, 1.15, 0.0], [-0.38, 0.95, 0.0], [-0.42, 0.88, 0.0],
    [0.10, 0.95, 0.0], [0.12, 0.55, 0.0], [0.13, 0.12, 0.0], [0.15, 0.05, 0.08],
    [-0.10, 0.95, 0.0], [-0.12, 0.55, 0.0], [-0.13, 0.12, 0.0], [-0.15, 0.05, 0.08],
    [0.00, 1.45, 0.0], [0.45, 0.83, 0.0], [0.38, 0.85, 0.0], [-0.45, 0.83, 0.0],
    [-0.38, 0.85, 0.0],
])

# Joint groups animated by the synthetic motion primitives.
_REDUCED_GROUPS = ([3, 4, 5, 6], [7, 8, 9, 10], [1, 2])
_NTU_GROUPS = (
    [4, 5, 6, 7, 8, 9, 10, 11, 21, 22, 23, 24],
    [12, 13, 14, 15, 16, 17, 18, 19],
    [1, 2, 3, 20],
)


def _rest_pose(num_joints: int) -> np.ndarray:
    return {11: _REDUCED_REST, 25: _NTU_REST}[num_joints]


def _joint_groups(num_joints: int):
    return {11: _REDUCED_GROUPS, 25: _NTU_GROUPS}[num_joints]


# ---------------------------------------------------------------------------
# NTU raw .skeleton ingestion
# ---------------------------------------------------------------------------

class _LineReader:
    def __init__(self, lines: list[str], path: str):
        self.lines = lines
        self.path = path
        self.pos = 0

    def next_fields(self, expect: int | None = None) -> list[str]:
        while self.pos < len(self.lines):
            line = self.lines[self.pos].strip()
            self.pos += 1
            if line:
                fields = line.split()
                if expect is not None and len(fields) < expect:
                    raise ParseError(
                        f"{self.path}:{self.pos}: expected {expect} fields, got {len(fields)}")
                return fields
        raise ParseError(f"{self.path}: truncated file at line {self.pos + 1}")

    def next_int(self) -> int:
        fields = self.next_fields()
        try:
            return int(fields[0])
        except ValueError:
            raise ParseError(f"{self.path}:{self.pos}: expected integer, got {fields[0]!r}") from None

    def next_floats(self, count: int) -> list[float]:
        fields = self.next_fields(expect=count)
        try:
            return [float(f) for f in fields[:count]]
        except ValueError:
            raise ParseError(f"{self.path}:{self.pos}: non-numeric field") from None


def load_ntu_skeleton(path) -> SkeletonSequence:
    """Parse a raw NTU `.skeleton` text file into a (3, T, 25, 2) sequence.

    Layout: frame count; per frame a body count; per body one metadata line,
    a joint count, then one line per joint whose first three fields are the
    x, y, z coordinates. Bodies beyond the second are ignored, absent bodies
    stay zero.
    """
    path = str(path)
    with open(path, "r") as f:
        reader = _LineReader(f.readlines(), path)

    num_frames = reader.next_int()
    if num_frames <= 0:
        raise ParseError(f"{path}: file declares {num_frames} frames")

    data = np.zeros((3, num_frames, NTU_JOINT_COUNT, NTU_MAX_BODIES), dtype=np.float32)
    for t in range(num_frames):
        num_bodies = reader.next_int()
        for b in range(num_bodies):
            reader.next_fields()  # body metadata: id, tracking flags, lean, ...
            num_joints = reader.next_int()
            for v in range(num_joints):
                x, y, z = reader.next_floats(3)
                if b < NTU_MAX_BODIES and v < NTU_JOINT_COUNT:
                    data[:, t, v, b] = (x, y, z)
    return SkeletonSequence(data=data)


def save_ntu_skeleton(seq: SkeletonSequence, path) -> None:
    """Write a sequence back to the NTU text layout (zeroed metadata fields)."""
    lines = [str(seq.num_frames)]
    for t in range(seq.num_frames):
        present = [p for p in range(seq.num_persons) if np.any(seq.data[:, t, :, p] != 0)]
        lines.append(str(len(present)))
        for p in present:
            lines.append(" ".join(["0"] * 10))
            lines.append(str(seq.num_joints))
            for v in range(seq.num_joints):
                x, y, z = (f"{c:.9g}" for c in seq.data[:, t, v, p])
                lines.append(f"{x} {y} {z} 0 0 0 0 0 0 0 0 0")
    with open(str(path), "w") as f:
        f.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Synthetic dataset
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthSpec:
    """Generator config for the synthetic motion dataset.

    Each class is a parametric primitive: one joint group oscillates around
    the rest pose with a class-specific frequency and inter-joint phase lag.
    The per-sequence global phase is random, so classes are not separable by
    raw class means, but temporal-frequency structure identifies them.
    """
    class_count: int = 8
    sequences_per_class: int = 100
    num_joints: int = 11
    raw_frames: int = 60
    noise_scale: float = 0.02
    num_persons: int = 1

    def __post_init__(self):
        if self.class_count < 2:
            raise ConfigError(f"class_count must be >= 2, got {self.class_count}")
        if self.sequences_per_class < 1:
            raise ConfigError("sequences_per_class must be >= 1")
        if self.raw_frames < 2:
            raise ConfigError("raw_frames must be >= 2")


def synth_generate(spec: SynthSpec, seed: int, split: str = "train") -> Dataset:
    """Deterministically generate a labeled synthetic dataset."""
    graph = graph_for_joints(spec.num_joints)
    rest = _rest_pose(spec.num_joints)
    groups = _joint_groups(spec.num_joints)
    rng = np.random.default_rng([seed, {"train": 0, "test": 1}[split]])

    t_axis = np.arange(spec.raw_frames, dtype=np.float64)
    sequences = []
    for cls in range(spec.class_count):
        group = groups[cls % len(groups)]
        cycles = 1.0 + 0.5 * cls
        lag = 0.3 + 0.25 * cls
        direction = np.eye(3)[cls % 3]
        for _ in range(spec.sequences_per_class):
            phase = rng.uniform(0.0, 2.0 * np.pi)
            data = np.zeros((3, spec.raw_frames, spec.num_joints, spec.num_persons))
            data += rest.T[:, None, :, None]
            for g_idx, v in enumerate(group):
                wave = 0.25 * np.sin(2.0 * np.pi * cycles * t_axis / spec.raw_frames
                                     + phase + lag * g_idx)
                data[:, :, v, 0] += direction[:, None] * wave[None, :]
            if spec.noise_scale > 0:
                data += spec.noise_scale * rng.standard_normal(data.shape)
            sequences.append(SkeletonSequence(
                data=data.astype(np.float32), label=cls))
    return Dataset(sequences=sequences, graph=graph, split_tag=split,
                   class_count=spec.class_count)


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------

def temporal_resample(seq: SkeletonSequence, target_frames: int) -> SkeletonSequence:
    """Linearly resample a sequence to `target_frames` along time."""
    if target_frames < 1:
        raise ValueError(f"target_frames must be >= 1, got {target_frames}")
    t_in = seq.num_frames
    if t_in < 1:
        raise ValueError("cannot resample an empty sequence")
    if t_in == target_frames:
        return replace(seq, data=seq.data.copy())
    return replace(seq, data=resample_array(seq.data, target_frames))


def resample_array(data: np.ndarray, target_frames: int) -> np.ndarray:
    """Linear interpolation of a (C, T, V, P) array to a new frame count."""
    t_in = data.shape[1]
    if t_in == 1:
        return np.repeat(data, target_frames, axis=1).astype(data.dtype, copy=False)
    pos = np.linspace(0.0, t_in - 1, target_frames)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, t_in - 1)
    w = (pos - lo).astype(np.float64)[None, :, None, None]
    out = data[:, lo].astype(np.float64) * (1.0 - w) + data[:, hi].astype(np.float64) * w
    return out.astype(data.dtype, copy=False)


def center_sequence(seq: SkeletonSequence, graph: SkeletonGraph) -> SkeletonSequence:
    """Subtract the first frame's root-joint position of the first present person.

    All-zero person slots are left untouched so padding stays zero.
    """
    data = seq.data.copy()
    present = [p for p in range(seq.num_persons) if np.any(data[:, :, :, p] != 0)]
    if not present:
        return replace(seq, data=data)
    origin = data[:, 0, graph.root, present[0]].copy()
    for p in present:
        data[:, :, :, p] -= origin[:, None, None]
    return replace(seq, data=data)


def preprocess_sequence(seq: SkeletonSequence, graph: SkeletonGraph,
                        target_frames: int = DEFAULT_TARGET_FRAMES,
                        center: bool = True) -> SkeletonSequence:
    """Center and resample one sequence; validates finiteness."""
    out = center_sequence(seq, graph) if center else seq
    out = temporal_resample(out, target_frames)
    if not np.all(np.isfinite(out.data)):
        raise ValueError("sequence contains NaN or Inf after preprocessing")
    return out


def preprocess_dataset(ds: Dataset, target_frames: int = DEFAULT_TARGET_FRAMES,
                       center: bool = True) -> Dataset:
    seqs = [preprocess_sequence(s, ds.graph, target_frames, center) for s in ds.sequences]
    return Dataset(sequences=seqs, graph=ds.graph, split_tag=ds.split_tag,
                   class_count=ds.class_count)


# ---------------------------------------------------------------------------
# Streams
# ---------------------------------------------------------------------------

STREAMS = ("joint", "bone", "motion")


def derive_stream(seq: SkeletonSequence, graph: SkeletonGraph, stream: str) -> SkeletonSequence:
    """Derive the joint, bone, or motion view of a sequence.

    bone: per edge (parent, child), bone[child] = joint[child] - joint[parent],
    root joint zero. motion: frame difference, last frame zero.
    """
    if stream == "joint":
        return replace(seq, data=seq.data.copy())
    if stream == "bone":
        out = np.zeros_like(seq.data)
        for p, c in graph.edges:
            out[:, :, c] = seq.data[:, :, c] - seq.data[:, :, p]
        return replace(seq, data=out)
    if stream == "motion":
        out = np.zeros_like(seq.data)
        out[:, :-1] = seq.data[:, 1:] - seq.data[:, :-1]
        return replace(seq, data=out)
    raise ConfigError(f"unknown stream {stream!r}, expected one of {STREAMS}")


def derive_stream_dataset(ds: Dataset, stream: str) -> Dataset:
    seqs = [derive_stream(s, ds.graph, stream) for s in ds.sequences]
    return Dataset(sequences=seqs, graph=ds.graph, split_tag=ds.split_tag,
                   class_count=ds.class_count)


# ---------------------------------------------------------------------------
# Binary dataset cache
# ---------------------------------------------------------------------------
#
# Layout (little-endian):
#   8 bytes  magic "SKCACHE1"
#   7 int32  version, N, C, T, V, P, class_count
#   1 int32  split tag (0 train, 1 test)
#   1 int64  generator seed
#   N int32  labels
#   N*C*T*V*P float32  sequence data
#
# The graph is implied by V via `graph_for_joints`.

def save_dataset_cache(ds: Dataset, path, seed: int = 0) -> None:
    data = ds.stacked().astype("<f4")
    n, c, t, v, p = data.shape
    labels = ds.labels().astype("<i4")
    split = {"train": 0, "test": 1}[ds.split_tag]
    with open(str(path), "wb") as f:
        f.write(CACHE_MAGIC)
        f.write(struct.pack("<8iq", CACHE_VERSION, n, c, t, v, p, ds.class_count,
                            split, seed))
        f.write(labels.tobytes())
        f.write(data.tobytes())


def load_dataset_cache(path) -> tuple[Dataset, int]:
    """Read a cache file; returns the dataset and the recorded seed."""
    path = str(path)
    with open(path, "rb") as f:
        magic = f.read(len(CACHE_MAGIC))
        if magic != CACHE_MAGIC:
            raise ParseError(f"{path}: bad magic {magic!r}")
        header = f.read(struct.calcsize("<8iq"))
        version, n, c, t, v, p, class_count, split, seed = struct.unpack("<8iq", header)
        if version != CACHE_VERSION:
            raise ParseError(f"{path}: unsupported cache version {version}")
        labels = np.frombuffer(f.read(4 * n), dtype="<i4")
        raw = f.read(4 * n * c * t * v * p)
        if len(raw) != 4 * n * c * t * v * p:
            raise ParseError(f"{path}: truncated data section")
        data = np.frombuffer(raw, dtype="<f4").reshape(n, c, t, v, p)
    graph = graph_for_joints(v)
    seqs = [SkeletonSequence(data=data[i].copy(), label=int(labels[i])) for i in range(n)]
    split_tag = "train" if split == 0 else "test"
    return Dataset(sequences=seqs, graph=graph, split_tag=split_tag,
                   class_count=class_count), seed
