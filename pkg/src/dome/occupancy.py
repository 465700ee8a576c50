"""Occupancy grids, semantic class tables, BEV flattening, metrics and file I/O."""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Iterable, Sequence

import numpy as np
import torch

OCCG_MAGIC = b"OCCG"
OCCS_MAGIC = b"OCCS"
FORMAT_VERSION = 1

_OCCG_HEADER = struct.Struct("<4sHIIId3dH")
_OCCS_HEADER = struct.Struct("<4sHI")


@dataclass(frozen=True)
class SemanticClassTable:
    names: tuple[str, ...]
    empty_id: int
    dynamic_class_ids: frozenset[int] = frozenset()
    road_class_ids: frozenset[int] = frozenset()

    def __post_init__(self):
        if len(self.names) < 2:
            raise ValueError("a class table needs at least two classes")
        if not 0 <= self.empty_id < len(self.names):
            raise ValueError(f"empty id {self.empty_id} out of range")
        if self.dynamic_class_ids & self.road_class_ids:
            raise ValueError("dynamic and road class sets must be disjoint")
        for cid in self.dynamic_class_ids | self.road_class_ids:
            if not 0 <= cid < len(self.names):
                raise ValueError(f"class id {cid} out of range")

    @property
    def num_classes(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        return self.names.index(name)


# Occ3D-nuScenes labels, free space last.
NUSCENES_CLASSES = SemanticClassTable(
    names=(
        "others", "barrier", "bicycle", "bus", "car", "construction_vehicle",
        "motorcycle", "pedestrian", "traffic_cone", "trailer", "truck",
        "driveable_surface", "other_flat", "sidewalk", "terrain", "manmade",
        "vegetation", "free",
    ),
    empty_id=17,
    dynamic_class_ids=frozenset({2, 3, 4, 5, 6, 7, 9, 10}),
    road_class_ids=frozenset({11}),
)

SYNTHETIC_CLASSES = SemanticClassTable(
    names=("empty", "road", "sidewalk", "car", "manmade", "vegetation"),
    empty_id=0,
    dynamic_class_ids=frozenset({3}),
    road_class_ids=frozenset({1}),
)


@dataclass(frozen=True)
class GridPreset:
    name: str
    dims: tuple[int, int, int]
    resolution: float
    origin: tuple[float, float, float]

    @property
    def upper(self) -> tuple[float, float, float]:
        return tuple(o + d * self.resolution for o, d in zip(self.origin, self.dims))


PRESETS = {
    "reference": GridPreset("reference", (200, 200, 16), 0.4, (-40.0, -40.0, -1.0)),
    "synthetic": GridPreset("synthetic", (40, 40, 8), 0.4, (-8.0, -8.0, -1.0)),
    "tiny": GridPreset("tiny", (4, 4, 2), 0.4, (-0.8, -0.8, -1.0)),
}


def get_preset(name: str) -> GridPreset:
    try:
        return PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown grid preset {name!r}; known: {sorted(PRESETS)}") from None


@dataclass(frozen=True, eq=False)
class OccupancyGrid:
    """Dense H x W x D voxel grid of class ids.

    Axis 0 runs along x, axis 1 along y and axis 2 along z. ``origin`` is the
    world coordinate of the corner of voxel (0, 0, 0).
    """

    labels: np.ndarray
    resolution: float
    origin: tuple[float, float, float]
    num_classes: int

    def __post_init__(self):
        labels = np.array(self.labels, dtype=np.uint8, copy=True)
        if labels.ndim != 3:
            raise ValueError(f"labels must be 3-D, got shape {labels.shape}")
        if self.num_classes < 2 or self.num_classes > 256:
            raise ValueError(f"num_classes must be in [2, 256], got {self.num_classes}")
        if labels.size and int(labels.max()) >= self.num_classes:
            raise ValueError(f"label {int(labels.max())} >= num_classes {self.num_classes}")
        if self.resolution <= 0:
            raise ValueError("resolution must be positive")
        labels.flags.writeable = False
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))
        object.__setattr__(self, "resolution", float(self.resolution))

    @classmethod
    def from_preset(cls, labels: np.ndarray, preset: GridPreset, num_classes: int) -> "OccupancyGrid":
        if tuple(np.shape(labels)) != preset.dims:
            raise ValueError(f"labels shape {np.shape(labels)} does not match preset {preset.dims}")
        return cls(labels, preset.resolution, preset.origin, num_classes)

    @classmethod
    def empty(cls, preset: GridPreset, table: SemanticClassTable) -> "OccupancyGrid":
        labels = np.full(preset.dims, table.empty_id, dtype=np.uint8)
        return cls(labels, preset.resolution, preset.origin, table.num_classes)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.labels.shape)

    def __eq__(self, other):
        if not isinstance(other, OccupancyGrid):
            return NotImplemented
        return (
            self.dims == other.dims
            and self.resolution == other.resolution
            and self.origin == other.origin
            and self.num_classes == other.num_classes
            and np.array_equal(self.labels, other.labels)
        )

    def voxel_index(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Voxel indices of points (N, 3) and a mask of which fall inside the grid."""
        return voxel_index(points, self.origin, self.resolution, self.dims)

    def voxel_centers(self, idx: np.ndarray) -> np.ndarray:
        return np.asarray(self.origin) + (np.asarray(idx, dtype=np.float64) + 0.5) * self.resolution


def voxel_index(points, origin, resolution, dims) -> tuple[np.ndarray, np.ndarray]:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    # snap values within rounding error of a cell boundary onto it, so 1.2 / 0.4 lands in cell 3
    idx = np.floor((pts - np.asarray(origin, dtype=np.float64)) / resolution + 1e-9).astype(np.int64)
    inside = np.all((idx >= 0) & (idx < np.asarray(dims)), axis=1)
    return idx, inside


# --------------------------------------------------------------------------- #
# class embedding and BEV flattening


class ClassEmbedding(torch.nn.Module):
    """Learnable num_classes x C_emb table."""

    def __init__(self, num_classes: int, dim: int, generator: torch.Generator | None = None):
        super().__init__()
        self.weight = torch.nn.Parameter(torch.randn(num_classes, dim, generator=generator))

    @property
    def num_classes(self) -> int:
        return self.weight.shape[0]

    @property
    def dim(self) -> int:
        return self.weight.shape[1]

    def forward(self, labels: torch.Tensor) -> torch.Tensor:
        return self.weight[labels]


def flatten_bev(labels, emb: ClassEmbedding | torch.Tensor) -> torch.Tensor:
    """Look up class embeddings and fold depth into channels.

    ``labels`` is (..., H, W, D) integer; the result is (..., H, W, D * C_emb)
    with the embedding of voxel d stored at channels [d*C_emb, (d+1)*C_emb).
    """
    table = emb.weight if isinstance(emb, ClassEmbedding) else emb
    if isinstance(labels, OccupancyGrid):
        if labels.num_classes != table.shape[0]:
            raise ValueError(
                f"grid has {labels.num_classes} classes but embedding has {table.shape[0]} rows"
            )
        labels = labels.labels
    lab = torch.as_tensor(np.asarray(labels) if not torch.is_tensor(labels) else labels).long()
    if lab.ndim < 3:
        raise ValueError(f"flatten_bev expects (..., H, W, D) labels, got shape {tuple(lab.shape)}")
    if lab.numel() and int(lab.max()) >= table.shape[0]:
        raise ValueError(f"label {int(lab.max())} has no row in a {table.shape[0]}-row embedding")
    out = table[lab]
    return out.reshape(*lab.shape[:-1], lab.shape[-1] * table.shape[1])


# --------------------------------------------------------------------------- #
# metrics


@dataclass
class MetricReport:
    iou_per_class: dict[int, float]
    miou: float
    iou_total: float
    intersections: dict[int, int] = field(default_factory=dict, repr=False)
    unions: dict[int, int] = field(default_factory=dict, repr=False)


def _as_labels(x) -> np.ndarray:
    if isinstance(x, OccupancyGrid):
        return x.labels
    if torch.is_tensor(x):
        return x.detach().cpu().numpy()
    return np.asarray(x)


def compute_metrics(pred, gt, classes: SemanticClassTable | int, empty_id: int | None = None) -> MetricReport:
    """Per-class IoU, mIoU and binary occupied IoU.

    ``pred`` and ``gt`` may be grids or label arrays of any identical shape; a
    stack of frames is scored as one pooled volume. Classes absent from both
    inputs are left out of the mean, as is the empty class.
    """
    p, g = _as_labels(pred), _as_labels(gt)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: pred {p.shape} vs gt {g.shape}")
    if isinstance(classes, SemanticClassTable):
        n, empty = classes.num_classes, classes.empty_id
    else:
        n, empty = int(classes), (0 if empty_id is None else empty_id)
    p = p.reshape(-1).astype(np.int64)
    g = g.reshape(-1).astype(np.int64)
    if p.size and (p.max() >= n or g.max() >= n):
        raise ValueError(f"label out of range for {n} classes")
    conf = np.bincount(g * n + p, minlength=n * n).reshape(n, n)
    inter = np.diag(conf)
    union = conf.sum(0) + conf.sum(1) - inter
    ious, inters, unions = {}, {}, {}
    for c in range(n):
        if c == empty or union[c] == 0:
            continue
        ious[c] = float(inter[c] / union[c])
        inters[c], unions[c] = int(inter[c]), int(union[c])
    miou = float(np.mean(list(ious.values()))) if ious else 1.0
    occ_p, occ_g = p != empty, g != empty
    occ_union = int(np.count_nonzero(occ_p | occ_g))
    iou_total = 1.0 if occ_union == 0 else np.count_nonzero(occ_p & occ_g) / occ_union
    return MetricReport(ious, miou, float(iou_total), inters, unions)


# --------------------------------------------------------------------------- #
# OCCG / OCCS binary formats


class GridFormatError(ValueError):
    code = "format"


class BadMagic(GridFormatError):
    code = "bad_magic"


class Truncated(GridFormatError):
    code = "truncated"


class InvalidLabel(GridFormatError):
    code = "invalid_label"


class UnsupportedVersion(GridFormatError):
    code = "unsupported_version"


def _read_exact(f: BinaryIO, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise Truncated(f"expected {n} bytes of {what}, got {len(buf)}")
    return buf


def encode_grid(grid: OccupancyGrid) -> bytes:
    h, w, d = grid.dims
    header = _OCCG_HEADER.pack(
        OCCG_MAGIC, FORMAT_VERSION, h, w, d, grid.resolution, *grid.origin, grid.num_classes
    )
    return header + np.ascontiguousarray(grid.labels, dtype=np.uint8).tobytes()


def _decode_grid_from(f: BinaryIO) -> OccupancyGrid:
    magic = f.read(4)
    if len(magic) < 4:
        raise Truncated("file ends inside the magic bytes")
    if magic != OCCG_MAGIC:
        raise BadMagic(f"expected magic {OCCG_MAGIC!r}, got {magic!r}")
    rest = _read_exact(f, _OCCG_HEADER.size - 4, "OCCG header")
    _, version, h, w, d, res, ox, oy, oz, ncls = _OCCG_HEADER.unpack(magic + rest)
    if version != FORMAT_VERSION:
        raise UnsupportedVersion(f"OCCG version {version} not supported")
    payload = _read_exact(f, h * w * d, "label payload")
    labels = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, d)
    if labels.size and int(labels.max()) >= ncls:
        raise InvalidLabel(f"label {int(labels.max())} >= num_classes {ncls}")
    return OccupancyGrid(labels, res, (ox, oy, oz), ncls)


def decode_grid(data: bytes) -> OccupancyGrid:
    return _decode_grid_from(io.BytesIO(data))


def write_grid(grid: OccupancyGrid, path) -> None:
    Path(path).write_bytes(encode_grid(grid))


def read_grid(path) -> OccupancyGrid:
    with open(path, "rb") as f:
        return _decode_grid_from(f)


def write_sequence(grids: Sequence[OccupancyGrid], poses: Iterable[np.ndarray], path) -> None:
    poses = [np.asarray(p, dtype="<f8").reshape(4, 4) for p in poses]
    if len(poses) != len(grids):
        raise ValueError(f"{len(grids)} grids but {len(poses)} poses")
    chunks = [_OCCS_HEADER.pack(OCCS_MAGIC, FORMAT_VERSION, len(grids))]
    for g, p in zip(grids, poses):
        chunks.append(encode_grid(g))
        chunks.append(p.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_sequence(path) -> tuple[list[OccupancyGrid], list[np.ndarray]]:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != OCCS_MAGIC:
            raise BadMagic(f"expected magic {OCCS_MAGIC!r}, got {magic!r}")
        _, version, count = _OCCS_HEADER.unpack(magic + _read_exact(f, _OCCS_HEADER.size - 4, "OCCS header"))
        if version != FORMAT_VERSION:
            raise UnsupportedVersion(f"OCCS version {version} not supported")
        grids, poses = [], []
        for _ in range(count):
            grids.append(_decode_grid_from(f))
            poses.append(np.frombuffer(_read_exact(f, 128, "pose"), dtype="<f8").reshape(4, 4).copy())
    return grids, poses
