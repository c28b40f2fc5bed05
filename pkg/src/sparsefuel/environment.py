"""Spatial deployment and non-IID data assignment.

A rectangular area is split into a grid of subregions, devices are dropped
into it (uniformly at random or on a jittered lattice), a disc-radius
communication topology is derived from the positions, and every device draws
a local dataset from its subregion's distribution: either synthetic Gaussian
class blobs or a label-skewed slice of an IDX-format pool.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .neuralnet import LabeledDataset

PLACEMENTS = ("uniform-random", "jittered-grid")
DISTRIBUTION_KINDS = ("synthetic-blobs", "idx-label-skew")

_IDX_IMAGES_MAGIC = 0x00000803
_IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class Area:
    """A width x height rectangle split into rows x cols subregions."""

    width: float
    height: float
    rows: int
    cols: int

    def __post_init__(self) -> None:
        if self.width <= 0 or self.height <= 0:
            raise ValueError("area dimensions must be positive")
        if self.rows < 1 or self.cols < 1:
            raise ValueError("subregion grid must be at least 1x1")

    @property
    def num_subregions(self) -> int:
        return self.rows * self.cols

    def subregion_of(self, x: float, y: float) -> int:
        """Subregion index (row * cols + col); boundary points fall to the
        lower-index cell."""
        if not (0.0 <= x <= self.width and 0.0 <= y <= self.height):
            raise ValueError(f"point ({x}, {y}) outside the {self.width}x{self.height} area")
        col = min(self.cols - 1, max(0, math.ceil(x / (self.width / self.cols)) - 1))
        row = min(self.rows - 1, max(0, math.ceil(y / (self.height / self.rows)) - 1))
        return row * self.cols + col


@dataclass(frozen=True)
class DeviceSite:
    """Where one device sits and which subregion that is."""

    uid: int
    x: float
    y: float
    subregion_id: int


@dataclass
class Topology:
    """Symmetric, irreflexive disc-radius adjacency over device sites."""

    sites: list[DeviceSite]
    r_c: float
    adjacency: list[list[int]]

    @property
    def n(self) -> int:
        return len(self.sites)

    def neighbors(self, uid: int) -> list[int]:
        return self.adjacency[uid]

    def edges(self) -> list[tuple[int, int]]:
        """Undirected edges as (i, j) with i < j, sorted."""
        return [(i, j) for i in range(self.n) for j in self.adjacency[i] if i < j]


def deploy_devices(area: Area, n: int, placement: str, seed: int) -> list[DeviceSite]:
    """Place n devices; uids are assigned in draw order.

    uniform-random draws positions uniformly over the area.  jittered-grid
    puts devices on the first n cells of a ceil(sqrt(n)) lattice (row-major)
    at cell centers, each jittered by up to a quarter of the lattice pitch
    per axis, so a device never leaves its lattice cell.
    """
    if n < 1:
        raise ValueError("need at least one device")
    if placement not in PLACEMENTS:
        raise ValueError(f"unknown placement {placement!r}, expected one of {PLACEMENTS}")
    rng = np.random.default_rng(seed)
    if placement == "uniform-random":
        xs = rng.uniform(0.0, area.width, n)
        ys = rng.uniform(0.0, area.height, n)
    else:
        g = math.ceil(math.sqrt(n))
        pitch_x = area.width / g
        pitch_y = area.height / g
        cells = np.arange(n)
        cx = (cells % g + 0.5) * pitch_x
        cy = (cells // g + 0.5) * pitch_y
        xs = cx + rng.uniform(-pitch_x / 4, pitch_x / 4, n)
        ys = cy + rng.uniform(-pitch_y / 4, pitch_y / 4, n)
    return [
        DeviceSite(uid, float(x), float(y), area.subregion_of(float(x), float(y)))
        for uid, (x, y) in enumerate(zip(xs, ys))
    ]


def build_topology(sites: list[DeviceSite], r_c: float) -> Topology:
    """Connect every pair within Euclidean distance r_c (inclusive)."""
    if r_c <= 0:
        raise ValueError("communication radius must be positive")
    pos = np.array([[s.x, s.y] for s in sites])
    n = len(sites)
    adjacency: list[list[int]] = [[] for _ in range(n)]
    for i in range(n):
        d = np.hypot(pos[:, 0] - pos[i, 0], pos[:, 1] - pos[i, 1])
        adjacency[i] = [j for j in range(n) if j != i and d[j] <= r_c]
    return Topology(list(sites), r_c, adjacency)


@dataclass(frozen=True)
class BlobClass:
    """One synthetic class: label, Gaussian mean, isotropic std."""

    label: int
    mean: tuple[float, ...]
    std: float

    def __post_init__(self) -> None:
        if self.std <= 0:
            raise ValueError("blob std must be positive")


@dataclass
class DistributionSpec:
    """How each subregion's local data is generated.

    synthetic-blobs: blob_classes[j] lists the Gaussian class blobs of
    subregion j.  idx-label-skew: owned_labels[j] lists the labels subregion j
    owns inside the shared IDX pool, and epsilon is the fraction of each local
    dataset drawn from other subregions' labels.
    """

    kind: str
    blob_classes: tuple[tuple[BlobClass, ...], ...] | None = None
    owned_labels: tuple[tuple[int, ...], ...] | None = None
    epsilon: float = 0.0
    pool: LabeledDataset | None = None

    def __post_init__(self) -> None:
        if self.kind not in DISTRIBUTION_KINDS:
            raise ValueError(
                f"unknown distribution kind {self.kind!r}, expected one of {DISTRIBUTION_KINDS}"
            )
        if not (0.0 <= self.epsilon < 1.0):
            raise ValueError(f"epsilon must be in [0, 1), got {self.epsilon}")
        if self.kind == "synthetic-blobs":
            if not self.blob_classes or any(len(c) == 0 for c in self.blob_classes):
                raise ValueError("every subregion needs at least one blob class")
        else:
            if self.pool is None or not self.owned_labels:
                raise ValueError("idx-label-skew needs a pool and per-subregion labels")
            pool_labels = set(int(v) for v in np.unique(self.pool.labels))
            owned = [l for group in self.owned_labels for l in group]
            if len(owned) != len(set(owned)):
                raise ValueError("a label may be owned by only one subregion")
            if set(owned) != pool_labels:
                raise ValueError("owned label subsets must cover the pool's classes")

    @property
    def num_subregions(self) -> int:
        groups = self.blob_classes if self.kind == "synthetic-blobs" else self.owned_labels
        return len(groups)

    @property
    def num_classes(self) -> int:
        if self.kind == "synthetic-blobs":
            return 1 + max(c.label for group in self.blob_classes for c in group)
        return 1 + int(max(l for group in self.owned_labels for l in group))


def synthetic_blob_spec(
    k: int,
    classes_per_subregion: int = 2,
    feature_dim: int = 2,
    std: float = 0.08,
    seed: int = 0,
) -> DistributionSpec:
    """Build a synthetic-blobs spec with disjoint labels per subregion.

    Subregion j owns labels [j*c, (j+1)*c).  Its class means sit evenly
    spaced on a circle of radius 0.25 around the center of [0, 1]^d (first
    two feature dims; any extra dims stay at 0.5), rotated by a per-subregion
    angle drawn from the seed, which keeps classes within a subregion well
    separated while different subregions still overlap in feature space.
    """
    if k < 1 or classes_per_subregion < 1:
        raise ValueError("need at least one subregion and one class per subregion")
    if feature_dim < 2:
        raise ValueError("feature_dim must be >= 2")
    rng = np.random.default_rng(seed)
    angles = rng.uniform(0.0, 2.0 * math.pi, k)
    groups = []
    for j in range(k):
        classes = []
        for i in range(classes_per_subregion):
            theta = angles[j] + 2.0 * math.pi * i / classes_per_subregion
            mean = [0.5] * feature_dim
            mean[0] = 0.5 + 0.25 * math.cos(theta)
            mean[1] = 0.5 + 0.25 * math.sin(theta)
            classes.append(BlobClass(j * classes_per_subregion + i, tuple(mean), std))
        groups.append(tuple(classes))
    return DistributionSpec("synthetic-blobs", blob_classes=tuple(groups))


def idx_label_skew_spec(pool: LabeledDataset, k: int, epsilon: float = 0.0) -> DistributionSpec:
    """Split the pool's labels into k contiguous owned groups (sorted order)."""
    labels = sorted(int(v) for v in np.unique(pool.labels))
    if len(labels) < k:
        raise ValueError(f"pool has {len(labels)} classes, cannot cover {k} subregions")
    chunks = np.array_split(np.array(labels), k)
    owned = tuple(tuple(int(v) for v in chunk) for chunk in chunks)
    return DistributionSpec("idx-label-skew", owned_labels=owned, epsilon=epsilon, pool=pool)


def sample_local_dataset(
    spec: DistributionSpec, subregion_id: int, m: int, seed: int, salt: int = 0
) -> LabeledDataset:
    """Draw one device's local dataset; deterministic in (seed, subregion, salt)."""
    if m < 1:
        raise ValueError("need at least one sample")
    if not (0 <= subregion_id < spec.num_subregions):
        raise ValueError(f"subregion {subregion_id} out of range")
    rng = np.random.default_rng((int(seed), int(subregion_id), int(salt)))

    if spec.kind == "synthetic-blobs":
        classes = spec.blob_classes[subregion_id]
        picks = rng.integers(0, len(classes), m)
        means = np.array([c.mean for c in classes])
        stds = np.array([c.std for c in classes])
        dim = means.shape[1]
        feats = means[picks] + rng.normal(0.0, 1.0, (m, dim)) * stds[picks, None]
        np.clip(feats, 0.0, 1.0, out=feats)
        labels = np.array([classes[p].label for p in picks])
        return LabeledDataset(feats, labels)

    owned = set(spec.owned_labels[subregion_id])
    own_pool = np.flatnonzero(np.isin(spec.pool.labels, list(owned)))
    other_pool = np.flatnonzero(~np.isin(spec.pool.labels, list(owned)))
    foreign = rng.random(m) < spec.epsilon
    n_foreign = int(foreign.sum())
    n_own = m - n_foreign
    if n_own > len(own_pool) or n_foreign > len(other_pool):
        raise ValueError(
            f"pool exhausted for subregion {subregion_id}: need {n_own} owned / "
            f"{n_foreign} foreign, have {len(own_pool)} / {len(other_pool)}"
        )
    own_sel = rng.permutation(own_pool)[:n_own]
    other_sel = rng.permutation(other_pool)[:n_foreign]
    rows = np.empty(m, dtype=np.int64)
    rows[~foreign] = own_sel
    rows[foreign] = other_sel
    return LabeledDataset(spec.pool.features[rows], spec.pool.labels[rows])


def load_idx(images_path: str, labels_path: str) -> LabeledDataset:
    """Parse big-endian IDX image/label files into a flat [0, 1] dataset.

    Images (magic 0x00000803) are flattened row-major and scaled by 1/255;
    labels (magic 0x00000801) must count the same number of items.
    """
    with open(images_path, "rb") as f:
        head = f.read(16)
        if len(head) < 16:
            raise ValueError(f"{images_path}: truncated IDX header")
        magic, count, rows, cols = struct.unpack(">IIII", head)
        if magic != _IDX_IMAGES_MAGIC:
            raise ValueError(
                f"{images_path}: bad magic 0x{magic:08x}, expected 0x{_IDX_IMAGES_MAGIC:08x}"
            )
        raw = f.read()
    if len(raw) != count * rows * cols:
        raise ValueError(
            f"{images_path}: expected {count * rows * cols} pixel bytes, got {len(raw)}"
        )
    features = np.frombuffer(raw, dtype=np.uint8).astype(np.float64) / 255.0
    features = features.reshape(count, rows * cols)

    with open(labels_path, "rb") as f:
        head = f.read(8)
        if len(head) < 8:
            raise ValueError(f"{labels_path}: truncated IDX header")
        magic, label_count = struct.unpack(">II", head)
        if magic != _IDX_LABELS_MAGIC:
            raise ValueError(
                f"{labels_path}: bad magic 0x{magic:08x}, expected 0x{_IDX_LABELS_MAGIC:08x}"
            )
        label_raw = f.read()
    if len(label_raw) != label_count:
        raise ValueError(f"{labels_path}: expected {label_count} label bytes, got {len(label_raw)}")
    if label_count != count:
        raise ValueError(f"count mismatch: {count} images but {label_count} labels")
    labels = np.frombuffer(label_raw, dtype=np.uint8).astype(np.int64)
    return LabeledDataset(features, labels)
