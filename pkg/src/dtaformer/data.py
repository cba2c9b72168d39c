"""Block files, preprocessing, sampling and the synthetic labelled-cloud generator."""
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BlockFormatError

BINARY_MAGIC = b"DTAB"
DEFAULT_NOISE = 0.03


@dataclass
class PointCloudBlock:
    points: np.ndarray  # (N, C) float64; columns 0..2 are X, Y, Z
    labels: np.ndarray  # (N,) int64
    block_id: str = ""
    num_classes: int = 0

    @property
    def count(self):
        return self.points.shape[0]

    @property
    def channels(self):
        return self.points.shape[1]


@dataclass
class DatasetSpec:
    points_per_block: int | None
    channels: list
    class_names: list
    grid_cell: float | None = None
    block_edge: float | None = None
    splits: dict = field(default_factory=lambda: {"train": "train", "eval": "eval"})

    def __post_init__(self):
        if not self.class_names:
            raise ValueError("class list must be non-empty")
        if len(self.channels) < 3:
            raise ValueError("channel schema needs at least X, Y, Z")

    @property
    def num_channels(self):
        return len(self.channels)

    @property
    def num_classes(self):
        return len(self.class_names)


MSLIDAR = DatasetSpec(
    4096, ["x", "y", "z", "mir", "nir", "green"],
    ["road", "building", "grass", "tree", "soil", "powerline"])
DALES = DatasetSpec(
    8192, ["x", "y", "z", "intensity"],
    ["ground", "vegetation", "cars", "trucks", "power_lines", "fences", "poles", "buildings"],
    grid_cell=0.1, block_edge=20.0)
SHAPENET = DatasetSpec(
    2048, ["x", "y", "z", "nx", "ny", "nz"], [f"part{i}" for i in range(50)])

PRESETS = {"mslidar": MSLIDAR, "dales": DALES, "shapenet": SHAPENET}


def synth_spec(points_per_block, num_channels=6, num_classes=6):
    names = MSLIDAR.class_names if num_classes == 6 else [f"class{i}" for i in range(num_classes)]
    extra = [f"i{k}" for k in range(num_channels - 3)]
    return DatasetSpec(points_per_block, ["x", "y", "z"] + extra, list(names))


# -- text / binary block files ------------------------------------------------

def _fmt(x):
    return repr(float(x))


def save_block(block, path, num_classes=None):
    k = num_classes or block.num_classes or int(block.labels.max()) + 1
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"{block.count} {block.channels} {k}"]
    for row, lab in zip(block.points, block.labels):
        lines.append(" ".join(_fmt(v) for v in row) + f" {int(lab)}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_block(path, spec=None):
    path = Path(path)
    header = None
    rows, labels = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            where = f"{path}:{lineno}"
            if header is None:
                if len(parts) != 3:
                    raise BlockFormatError(f"{where}: header must be 'N C K'")
                try:
                    header = tuple(int(p) for p in parts)
                except ValueError:
                    raise BlockFormatError(f"{where}: non-integer header") from None
                n, c, k = header
                if n < 1 or c < 3 or k < 1:
                    raise BlockFormatError(f"{where}: invalid header values {header}")
                if spec is not None:
                    if c != spec.num_channels:
                        raise BlockFormatError(f"{where}: {c} channels, spec expects {spec.num_channels}")
                    if k != spec.num_classes:
                        raise BlockFormatError(f"{where}: {k} classes, spec expects {spec.num_classes}")
                    if spec.points_per_block and n != spec.points_per_block:
                        raise BlockFormatError(f"{where}: {n} points, spec expects {spec.points_per_block}")
                continue
            n, c, k = header
            if len(parts) != c + 1:
                raise BlockFormatError(f"{where}: expected {c + 1} columns, got {len(parts)}")
            try:
                vals = [float(p) for p in parts[:c]]
                lab = int(parts[c])
            except ValueError:
                raise BlockFormatError(f"{where}: unparsable value") from None
            if not all(math.isfinite(v) for v in vals):
                raise BlockFormatError(f"{where}: non-finite value")
            if not 0 <= lab < k:
                raise BlockFormatError(f"{where}: label {lab} outside [0, {k})")
            rows.append(vals)
            labels.append(lab)
    if header is None:
        raise BlockFormatError(f"{path}: missing header")
    if len(rows) != header[0]:
        raise BlockFormatError(f"{path}: header declares {header[0]} points, found {len(rows)}")
    return PointCloudBlock(np.asarray(rows, dtype=np.float64),
                           np.asarray(labels, dtype=np.int64), path.stem, header[2])


def load_blocks(directory, spec=None):
    """All ``*.blk`` files under ``directory`` in lexicographic order."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"block directory not found: {directory}")
    return [read_block(p, spec) for p in sorted(directory.glob("*.blk"))]


def save_block_binary(block, path, num_classes=None):
    k = num_classes or block.num_classes or int(block.labels.max()) + 1
    n, c = block.points.shape
    with open(path, "wb") as fh:
        fh.write(BINARY_MAGIC)
        fh.write(struct.pack("<III", n, c, k))
        fh.write(block.points.astype("<f4").tobytes())
        fh.write(block.labels.astype("<i4").tobytes())


def read_block_binary(path):
    data = Path(path).read_bytes()
    if data[:4] != BINARY_MAGIC:
        raise BlockFormatError(f"{path}: bad magic")
    if len(data) < 16:
        raise BlockFormatError(f"{path}: truncated header")
    n, c, k = struct.unpack_from("<III", data, 4)
    off = 16
    if len(data) != off + 4 * n * c + 4 * n:
        raise BlockFormatError(f"{path}: truncated or oversized payload")
    pts = np.frombuffer(data, "<f4", n * c, off).reshape(n, c)
    off += 4 * n * c
    labels = np.frombuffer(data, "<i4", n, off)
    return PointCloudBlock(pts.astype(np.float64), labels.astype(np.int64), Path(path).stem, k)


# -- preprocessing -------------------------------------------------------------

def normalize_block(block):
    """Center XYZ on the centroid, divide by the largest axis extent; min-max radiometry."""
    pts = block.points.astype(np.float64, copy=True)
    xyz = pts[:, :3]
    extent = float((xyz.max(0) - xyz.min(0)).max())
    centered = xyz - xyz.mean(0)
    pts[:, :3] = centered / extent if extent > 0 else 0.0
    if pts.shape[1] > 3:
        rad = pts[:, 3:]
        lo, hi = rad.min(0), rad.max(0)
        span = hi - lo
        pts[:, 3:] = np.where(span > 0, (rad - lo) / np.where(span > 0, span, 1.0), 0.0)
    return PointCloudBlock(pts, block.labels.copy(), block.block_id, block.num_classes)


def cell_assignment(xy, edge):
    """Integer (ix, iy) tile per point over the XY bounding box, plus grid shape."""
    lo = xy.min(0)
    extent = xy.max(0) - lo
    shape = np.maximum(1, np.ceil(extent / edge - 1e-9).astype(int))
    idx = np.floor((xy - lo) / edge).astype(int)
    return np.minimum(idx, shape - 1), shape


def partition_area(points, labels, points_per_block, edge=20.0, rng=None,
                   min_occupancy=0.05, num_classes=0):
    """Tile an area into ``edge`` x ``edge`` blocks of exactly ``points_per_block`` points.

    Cells holding fewer than ``min_occupancy * points_per_block`` points are dropped;
    short cells keep every point and are topped up by sampling with replacement.
    """
    if len(points) == 0:
        return []
    rng = rng if rng is not None else np.random.default_rng(0)
    idx, shape = cell_assignment(points[:, :2], edge)
    flat = idx[:, 0] * shape[1] + idx[:, 1]
    blocks = []
    for cell in np.unique(flat):
        members = np.flatnonzero(flat == cell)
        if len(members) < min_occupancy * points_per_block:
            continue
        if len(members) >= points_per_block:
            chosen = rng.choice(members, points_per_block, replace=False)
        else:
            extra = rng.choice(members, points_per_block - len(members), replace=True)
            chosen = np.concatenate([members, extra])
        ix, iy = divmod(int(cell), int(shape[1]))
        blocks.append(PointCloudBlock(points[chosen].copy(), labels[chosen].copy(),
                                      f"cell_{ix}_{iy}", num_classes))
    return blocks


def grid_subsample_indices(xyz, cell):
    """Per occupied voxel, the index of the point nearest the voxel centroid."""
    if cell <= 0:
        raise ValueError("grid cell must be positive")
    if len(xyz) == 0:
        return np.zeros(0, dtype=np.int64)
    keys = np.floor(xyz[:, :3] / cell).astype(np.int64)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    sums = np.zeros((len(counts), 3))
    np.add.at(sums, inverse, xyz[:, :3])
    centroids = sums / counts[:, None]
    dist = ((xyz[:, :3] - centroids[inverse]) ** 2).sum(1)
    order = np.lexsort((np.arange(len(xyz)), dist, inverse))
    first = np.ones(len(order), dtype=bool)
    first[1:] = inverse[order][1:] != inverse[order][:-1]
    return np.sort(order[first])


def grid_subsample(points, cell, labels=None):
    keep = grid_subsample_indices(points, cell)
    if labels is None:
        return points[keep]
    return points[keep], labels[keep]


def fps(xyz, k):
    """Greedy farthest point sampling from index 0; ties go to the lower index."""
    xyz = np.asarray(xyz, dtype=np.float64)
    m = len(xyz)
    if k < 1 or k > m:
        raise ValueError(f"k must satisfy 1 <= k <= {m}, got {k}")
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = 0
    mind = ((xyz - xyz[0]) ** 2).sum(1)
    for i in range(1, k):
        nxt = int(np.argmax(mind))
        chosen[i] = nxt
        mind = np.minimum(mind, ((xyz - xyz[nxt]) ** 2).sum(1))
    return chosen


# -- synthetic corpus ------------------------------------------------------------

AREA = 20.0


def _plane(rng, n, height):
    xy = rng.uniform(0, AREA, (n, 2))
    z = height + rng.normal(0, 0.05, n)
    return np.column_stack([xy, z])


def _box(rng, n):
    cx, cy = rng.uniform(4, 16, 2)
    w, d = rng.uniform(3, 6, 2)
    h = rng.uniform(3, 8)
    pts = np.empty((n, 3))
    roof = rng.random(n) < 0.6
    nr = int(roof.sum())
    pts[roof] = np.column_stack([rng.uniform(cx - w / 2, cx + w / 2, nr),
                                 rng.uniform(cy - d / 2, cy + d / 2, nr), np.full(nr, h)])
    nw = n - nr
    t = rng.uniform(0, 2 * (w + d), nw)
    x = np.where(t < w, cx - w / 2 + t,
                 np.where(t < w + d, cx + w / 2, np.where(t < 2 * w + d, cx + w / 2 - (t - w - d), cx - w / 2)))
    y = np.where(t < w, cy - d / 2,
                 np.where(t < w + d, cy - d / 2 + (t - w), np.where(t < 2 * w + d, cy + d / 2, cy + d / 2 - (t - 2 * w - d))))
    pts[~roof] = np.column_stack([x, y, rng.uniform(0, h, nw)])
    return pts


def _ellipsoids(rng, n):
    count = rng.integers(2, 5)
    centers = np.column_stack([rng.uniform(2, 18, (count, 2)), rng.uniform(3, 6, count)])
    radii = rng.uniform(1, 2.5, (count, 3))
    which = rng.integers(0, count, n)
    u = rng.normal(size=(n, 3))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    scale = rng.uniform(0.6, 1.0, (n, 1))
    return centers[which] + u * radii[which] * scale


def _lines(rng, n):
    count = rng.integers(1, 3)
    a = np.column_stack([np.zeros(count), rng.uniform(0, AREA, count), rng.uniform(9, 12, count)])
    b = np.column_stack([np.full(count, AREA), rng.uniform(0, AREA, count), a[:, 2]])
    which = rng.integers(0, count, n)
    t = rng.random((n, 1))
    return a[which] + t * (b[which] - a[which]) + rng.normal(0, 0.05, (n, 3))


def _class_geometry(rng, cls, n):
    kind = cls % 4
    tier = cls // 4
    if kind == 0:
        return _plane(rng, n, 0.3 * tier)
    if kind == 1:
        return _box(rng, n)
    if kind == 2:
        return _ellipsoids(rng, n)
    return _lines(rng, n)


def class_intensity_means(num_classes, num_radiometric):
    """Well-spread per-class radiometric means in [0.15, 0.85], fixed for every corpus."""
    rng = np.random.default_rng(7919)
    grid = np.linspace(0.15, 0.85, num_classes)
    return np.stack([rng.permutation(grid) for _ in range(num_radiometric)], axis=1)


def synth_generate(num_blocks, points_per_block, num_classes=6, seed=0, num_channels=6,
                   noise=DEFAULT_NOISE):
    """Blocks built from labelled primitives: planes, boxes, ellipsoids, line strips.

    Each class also carries its own radiometric distribution so the corpus is
    learnable from intensities alone; geometry separates classes further.
    """
    if num_classes < 2:
        raise ValueError("need at least two classes")
    if num_channels < 3:
        raise ValueError("need at least XYZ channels")
    rng = np.random.default_rng(seed)
    nrad = num_channels - 3
    means = class_intensity_means(num_classes, nrad)
    blocks = []
    for b in range(num_blocks):
        share = 0.5 / num_classes + 0.5 * rng.dirichlet(np.ones(num_classes))
        counts = np.floor(share * points_per_block).astype(int)
        remainder = points_per_block - counts.sum()
        counts[np.argsort(-(share * points_per_block - counts), kind="stable")[:remainder]] += 1
        xyz_parts, lab_parts = [], []
        for cls, n in enumerate(counts):
            xyz_parts.append(_class_geometry(rng, cls, n))
            lab_parts.append(np.full(n, cls, dtype=np.int64))
        xyz = np.concatenate(xyz_parts)
        labels = np.concatenate(lab_parts)
        rad = means[labels] + rng.normal(0, noise, (points_per_block, nrad))
        points = np.column_stack([xyz, rad])
        perm = rng.permutation(points_per_block)
        blocks.append(PointCloudBlock(points[perm], labels[perm], f"synth_{b:04d}", num_classes))
    return blocks
