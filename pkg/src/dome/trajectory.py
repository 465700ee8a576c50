"""Ego-motion conditioning and trajectory-resampling augmentation.

Resampling turns one recorded occupancy sequence into several: occupied voxels
from every frame are lifted into a shared world point cloud, dynamic classes
are dropped, road points are rasterised into a drivable BEV mask, new routes
are planned on that mask with a smoothed A*, and occupancy is re-extracted
along each route.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from .occupancy import GridPreset, OccupancyGrid, SemanticClassTable, voxel_index

SQRT2 = math.sqrt(2.0)


# --------------------------------------------------------------------------- #
# poses


class NonRigidPose(ValueError):
    pass


def make_pose(x: float, y: float, yaw: float, z: float = 0.0) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    m = np.eye(4)
    m[:2, :2] = [[c, -s], [s, c]]
    m[:3, 3] = (x, y, z)
    return m


def validate_pose(m, tol: float = 1e-9) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (4, 4):
        raise NonRigidPose(f"pose must be 4x4, got {m.shape}")
    r = m[:3, :3]
    if not np.allclose(r.T @ r, np.eye(3), atol=tol) or abs(np.linalg.det(r) - 1.0) > tol:
        raise NonRigidPose("rotation block is not orthonormal with det +1")
    if not np.allclose(m[3], (0, 0, 0, 1), atol=tol):
        raise NonRigidPose(f"last row must be [0, 0, 0, 1], got {m[3]}")
    return m


def invert_pose(m: np.ndarray) -> np.ndarray:
    inv = np.eye(4)
    inv[:3, :3] = m[:3, :3].T
    inv[:3, 3] = -m[:3, :3].T @ m[:3, 3]
    return inv


def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    w = np.mod(np.asarray(a, dtype=np.float64) + np.pi, 2 * np.pi) - np.pi
    w = np.where(w == -np.pi, np.pi, w)
    return float(w) if np.ndim(w) == 0 else w


def yaw_of(m: np.ndarray) -> float:
    return math.atan2(m[1, 0], m[0, 0])


@dataclass(frozen=True, eq=False)
class TrajectoryWindow:
    """Per-frame [x, y, yaw] motion relative to the previous frame; row 0 is zero."""

    deltas: np.ndarray

    def __len__(self):
        return len(self.deltas)


def relative_motion(poses: Sequence[np.ndarray]) -> TrajectoryWindow:
    if len(poses) < 1:
        raise ValueError("need at least one pose")
    mats = [validate_pose(p, tol=1e-6) for p in poses]
    deltas = np.zeros((len(mats), 3))
    for t in range(1, len(mats)):
        d = invert_pose(mats[t - 1]) @ mats[t]
        deltas[t] = (d[0, 3], d[1, 3], wrap_angle(math.atan2(d[1, 0], d[0, 0])))
    return TrajectoryWindow(deltas)


def integrate_motion(start: np.ndarray, window: TrajectoryWindow) -> list[np.ndarray]:
    """Inverse of :func:`relative_motion` for planar motion."""
    poses = [np.asarray(start, dtype=np.float64)]
    for dx, dy, dyaw in window.deltas[1:]:
        poses.append(poses[-1] @ make_pose(dx, dy, dyaw))
    return poses


# --------------------------------------------------------------------------- #
# trajectory encoding


def gamma_encode(values, L: int) -> torch.Tensor:
    """Sin/cos expansion of each scalar at frequencies 2^0 pi .. 2^(L-1) pi.

    The last axis of ``values`` is expanded from n to 2 L n entries, grouped
    per input scalar as (sin f0, cos f0, sin f1, cos f1, ...).
    """
    if L < 1:
        raise ValueError("L must be >= 1")
    v = torch.as_tensor(values, dtype=torch.get_default_dtype() if not torch.is_tensor(values) else None)
    if not torch.is_floating_point(v):
        v = v.to(torch.get_default_dtype())
    freqs = (2.0 ** torch.arange(L, dtype=v.dtype)) * math.pi
    ang = v[..., None] * freqs
    enc = torch.stack([torch.sin(ang), torch.cos(ang)], dim=-1)
    return enc.reshape(*v.shape[:-1], v.shape[-1] * 2 * L) if v.ndim else enc.reshape(2 * L)


def encode_window(deltas, L_xy: int = 10, L_yaw: int = 4) -> torch.Tensor:
    """(..., n_f, 3) deltas -> (..., n_f * (4 L_xy + 2 L_yaw)) flattened features."""
    d = torch.as_tensor(deltas)
    if not torch.is_floating_point(d):
        d = d.to(torch.get_default_dtype())
    feats = torch.cat([gamma_encode(d[..., :2], L_xy), gamma_encode(d[..., 2:3], L_yaw)], dim=-1)
    return feats.reshape(*feats.shape[:-2], -1)


class TrajectoryEncoder(nn.Module):
    """Gamma-encodes a window of motion deltas and projects it to the hidden width."""

    def __init__(self, n_frames: int, hidden: int, L_xy: int = 10, L_yaw: int = 4):
        super().__init__()
        self.n_frames, self.L_xy, self.L_yaw = n_frames, L_xy, L_yaw
        self.in_features = n_frames * (4 * L_xy + 2 * L_yaw)
        self.proj = nn.Linear(self.in_features, hidden)

    def forward(self, deltas) -> torch.Tensor:
        if isinstance(deltas, TrajectoryWindow):
            deltas = deltas.deltas
        d = torch.as_tensor(deltas, dtype=self.proj.weight.dtype)
        if d.shape[-2:] != (self.n_frames, 3):
            raise ValueError(f"expected (..., {self.n_frames}, 3) deltas, got {tuple(d.shape)}")
        return self.proj(encode_window(d, self.L_xy, self.L_yaw))


def embed_trajectory(window: TrajectoryWindow, encoder: TrajectoryEncoder) -> torch.Tensor:
    return encoder(window)


# --------------------------------------------------------------------------- #
# point clouds and BEV


@dataclass(frozen=True, eq=False)
class LabeledPointCloud:
    points: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        lab = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if len(pts) != len(lab):
            raise ValueError(f"{len(pts)} points but {len(lab)} labels")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "labels", lab)

    def __len__(self):
        return len(self.labels)

    def transformed(self, m: np.ndarray) -> "LabeledPointCloud":
        return LabeledPointCloud(self.points @ m[:3, :3].T + m[:3, 3], self.labels)


def grid_to_points(grid: OccupancyGrid, empty_id: int) -> LabeledPointCloud:
    idx = np.argwhere(grid.labels != empty_id)
    return LabeledPointCloud(grid.voxel_centers(idx), grid.labels[tuple(idx.T)])


def aggregate_point_cloud(grids: Sequence[OccupancyGrid], poses: Sequence[np.ndarray],
                          table: SemanticClassTable) -> LabeledPointCloud:
    """Lift every occupied voxel to world coordinates and drop dynamic classes."""
    if len(grids) != len(poses) or not grids:
        raise ValueError("need one pose per grid and at least one frame")
    pts, labs = [], []
    for g, p in zip(grids, poses):
        local = grid_to_points(g, table.empty_id)
        world = local.transformed(np.asarray(p, dtype=np.float64))
        pts.append(world.points)
        labs.append(world.labels)
    cloud = LabeledPointCloud(np.concatenate(pts), np.concatenate(labs))
    return filter_dynamic(cloud, table)


def filter_dynamic(cloud: LabeledPointCloud, table: SemanticClassTable) -> LabeledPointCloud:
    keep = ~np.isin(cloud.labels, sorted(table.dynamic_class_ids))
    return LabeledPointCloud(cloud.points[keep], cloud.labels[keep])


@dataclass(frozen=True, eq=False)
class BevMap:
    """Drivable mask indexed [ix, iy]; cell (i, j) covers origin + [i, i+1) x [j, j+1) * resolution."""

    grid: np.ndarray
    resolution: float
    origin: tuple[float, float]

    def to_world(self, cells) -> np.ndarray:
        """Continuous cell coordinates -> world xy."""
        return np.asarray(self.origin) + np.asarray(cells, dtype=np.float64) * self.resolution

    def to_cells(self, xy) -> np.ndarray:
        return (np.asarray(xy, dtype=np.float64) - np.asarray(self.origin)) / self.resolution

    def is_drivable(self, cells) -> np.ndarray:
        c = np.floor(np.asarray(cells, dtype=np.float64)).astype(np.int64).reshape(-1, 2)
        inside = np.all((c >= 0) & (c < self.grid.shape), axis=1)
        out = np.zeros(len(c), dtype=bool)
        out[inside] = self.grid[c[inside, 0], c[inside, 1]]
        return out


def build_bev_drivable(cloud: LabeledPointCloud, table: SemanticClassTable, resolution: float = 0.4,
                       margin: int = 2) -> BevMap:
    """Rasterise road-class points top-down; the map spans the whole cloud."""
    if len(cloud) == 0:
        return BevMap(np.zeros((1, 1), dtype=bool), resolution, (0.0, 0.0))
    xy = cloud.points[:, :2]
    lo = np.floor(xy.min(0) / resolution) - margin
    hi = np.floor(xy.max(0) / resolution) + margin + 1
    origin = lo * resolution
    shape = (hi - lo).astype(int)
    grid = np.zeros(shape, dtype=bool)
    road = np.isin(cloud.labels, sorted(table.road_class_ids))
    cells = np.floor((xy[road] - origin) / resolution).astype(np.int64)
    grid[cells[:, 0], cells[:, 1]] = True
    return BevMap(grid, resolution, (float(origin[0]), float(origin[1])))


# --------------------------------------------------------------------------- #
# planning


class NoPath(RuntimeError):
    pass


_MOVES = [(1, 0, 1.0), (-1, 0, 1.0), (0, 1, 1.0), (0, -1, 1.0),
          (1, 1, SQRT2), (1, -1, SQRT2), (-1, 1, SQRT2), (-1, -1, SQRT2)]


def grid_neighbors(grid: np.ndarray, cell: tuple[int, int]):
    """8-connected drivable neighbours; diagonals need both side cells free."""
    nx_, ny_ = grid.shape
    i, j = cell
    for di, dj, cost in _MOVES:
        a, b = i + di, j + dj
        if not (0 <= a < nx_ and 0 <= b < ny_) or not grid[a, b]:
            continue
        if di and dj and not (grid[i + di, j] and grid[i, j + dj]):
            continue
        yield (a, b), cost


def astar(grid: np.ndarray, start: tuple[int, int], goal: tuple[int, int]) -> tuple[list[tuple[int, int]], float]:
    """Shortest 8-connected cell path with a Euclidean heuristic."""
    start, goal = tuple(map(int, start)), tuple(map(int, goal))
    if not (grid[start] and grid[goal]):
        raise NoPath("start or goal is not drivable")

    def h(c):
        return math.hypot(c[0] - goal[0], c[1] - goal[1])

    g = {start: 0.0}
    parent = {start: None}
    closed = set()
    heap = [(h(start), 0.0, start)]
    while heap:
        _, gc, cell = heapq.heappop(heap)
        if cell in closed:
            continue
        if cell == goal:
            path = [cell]
            while parent[path[-1]] is not None:
                path.append(parent[path[-1]])
            return path[::-1], gc
        closed.add(cell)
        for nb, cost in grid_neighbors(grid, cell):
            ng = gc + cost
            if ng < g.get(nb, math.inf) - 1e-12:
                g[nb] = ng
                parent[nb] = cell
                heapq.heappush(heap, (ng + h(nb), ng, nb))
    raise NoPath(f"no drivable path from {start} to {goal}")


def path_cost(cells: Sequence[tuple[int, int]]) -> float:
    return sum(math.hypot(b[0] - a[0], b[1] - a[1]) for a, b in zip(cells, cells[1:]))


def segment_cells(p: np.ndarray, q: np.ndarray) -> list[tuple[int, int]]:
    """Every cell a segment touches, including both neighbours at exact corner crossings."""
    p, q = np.asarray(p, dtype=np.float64), np.asarray(q, dtype=np.float64)
    d = q - p
    cells = set()
    n = max(1, int(math.ceil(np.abs(d).max() * 4)))
    ts = [k / n for k in range(n + 1)]
    # boundary crossings on each axis
    for axis in (0, 1):
        if d[axis] == 0:
            continue
        lo, hi = sorted((p[axis], q[axis]))
        for b in range(int(math.floor(lo)) + 1, int(math.ceil(hi))):
            ts.append((b - p[axis]) / d[axis])
    for t in ts:
        x = p + t * d
        fx = [math.floor(x[0] - 1e-9), math.floor(x[0] + 1e-9)]
        fy = [math.floor(x[1] - 1e-9), math.floor(x[1] + 1e-9)]
        on_edge_x = fx[0] != fx[1]
        on_edge_y = fy[0] != fy[1]
        for a in (set(fx) if on_edge_x else {math.floor(x[0])}):
            for b in (set(fy) if on_edge_y else {math.floor(x[1])}):
                cells.add((a, b))
    return sorted(cells)


def segment_free(grid: np.ndarray, p, q) -> bool:
    for a, b in segment_cells(p, q):
        if not (0 <= a < grid.shape[0] and 0 <= b < grid.shape[1]) or not grid[a, b]:
            return False
    return True


def smooth_path(grid: np.ndarray, cells: Sequence[tuple[int, int]]) -> np.ndarray:
    """Line-of-sight shortcutting followed by one collision-checked corner-averaging pass.

    Returns continuous cell coordinates (cell centres sit at i + 0.5).
    """
    pts = np.asarray(cells, dtype=np.float64) + 0.5
    if len(pts) <= 2:
        return pts
    keep = [pts[0]]
    i = 0
    while i < len(pts) - 1:
        j = len(pts) - 1
        while j > i + 1 and not segment_free(grid, pts[i], pts[j]):
            j -= 1
        keep.append(pts[j])
        i = j
    out = [p.copy() for p in keep]
    for k in range(1, len(out) - 1):
        cand = (out[k - 1] + out[k] + out[k + 1]) / 3.0
        if segment_free(grid, out[k - 1], cand) and segment_free(grid, cand, out[k + 1]):
            out[k] = cand
    return np.asarray(out)


@dataclass
class SampledTrajectory:
    start: tuple[int, int]
    goal: tuple[int, int]
    cells: list[tuple[int, int]]
    cost: float
    waypoints: np.ndarray


def sample_trajectory(bev: BevMap, rng: np.random.Generator, min_separation: float = 20.0,
                      retry_budget: int = 50) -> SampledTrajectory:
    """Random start/goal on drivable cells, joined by smoothed A*."""
    free = np.argwhere(bev.grid)
    if len(free) == 0 or (len(free) < 2 and min_separation > 0):
        raise NoPath("BEV map has fewer than two drivable cells")
    for _ in range(max(1, retry_budget)):
        start = free[rng.integers(len(free))]
        far = free[np.hypot(*(free - start).T) >= min_separation]
        if len(far) == 0:
            continue
        goal = far[rng.integers(len(far))]
        try:
            cells, cost = astar(bev.grid, tuple(start), tuple(goal))
        except NoPath:
            continue
        return SampledTrajectory(tuple(map(int, start)), tuple(map(int, goal)), cells, cost,
                                 smooth_path(bev.grid, cells))
    raise NoPath(f"no reachable start/goal pair within {retry_budget} draws")


def path_to_poses(path, bev: BevMap | None, frame_spacing: float, n_poses: int | None = None) -> list[np.ndarray]:
    """Resample a waypoint polyline every ``frame_spacing`` metres into yaw-only poses.

    ``path`` is in BEV cell coordinates when ``bev`` is given, world metres otherwise.
    Each pose faces the next sample; the last one keeps the previous heading.
    """
    if frame_spacing <= 0:
        raise ValueError("frame_spacing must be positive")
    xy = bev.to_world(path) if bev is not None else np.asarray(path, dtype=np.float64)
    xy = xy.reshape(-1, 2)
    seg = np.hypot(*np.diff(xy, axis=0).T) if len(xy) > 1 else np.zeros(0)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    length = s[-1]
    count = int(math.floor(length / frame_spacing + 1e-9)) + 1
    if n_poses is not None:
        if n_poses > count:
            raise ValueError(f"path of {length:.2f} m yields {count} poses at {frame_spacing} m, {n_poses} requested")
        count = n_poses
    if length == 0 and count > 1:
        raise ValueError("zero-length path cannot produce more than one pose")
    targets = np.arange(count) * frame_spacing
    keep = np.concatenate([[True], seg > 0])
    sx, px = s[keep], xy[keep]
    samples = np.stack([np.interp(targets, sx, px[:, 0]), np.interp(targets, sx, px[:, 1])], axis=1)
    yaws = np.zeros(count)
    for k in range(count - 1):
        d = samples[k + 1] - samples[k]
        yaws[k] = math.atan2(d[1], d[0])
    if count > 1:
        yaws[-1] = yaws[-2]
    return [make_pose(x, y, yaw) for (x, y), yaw in zip(samples, yaws)]


# --------------------------------------------------------------------------- #
# occupancy extraction


def extract_occupancy(cloud: LabeledPointCloud, pose: np.ndarray, preset: GridPreset,
                      table: SemanticClassTable) -> OccupancyGrid:
    """Voxelise world points in the ego frame of ``pose`` by majority class vote (ties -> lowest id)."""
    labels = np.full(preset.dims, table.empty_id, dtype=np.uint8)
    if len(cloud):
        local = cloud.transformed(invert_pose(np.asarray(pose, dtype=np.float64)))
        idx, inside = voxel_index(local.points, preset.origin, preset.resolution, preset.dims)
        idx, lab = idx[inside], local.labels[inside]
        if len(lab):
            n = table.num_classes
            flat = np.ravel_multi_index(idx.T, preset.dims)
            keys, counts = np.unique(flat * n + lab, return_counts=True)
            vox, cls = keys // n, keys % n
            # sort by voxel, then count descending, then class ascending; first row per voxel wins
            order = np.lexsort((cls, -counts, vox))
            vox, cls = vox[order], cls[order]
            first = np.concatenate([[True], vox[1:] != vox[:-1]])
            labels.reshape(-1)[vox[first]] = cls[first]
    return OccupancyGrid(labels, preset.resolution, preset.origin, table.num_classes)


# --------------------------------------------------------------------------- #
# resampling


@dataclass
class ResampledSequence:
    sample_idx: int
    poses: list[np.ndarray]
    grids: list[OccupancyGrid]
    trajectory: SampledTrajectory


@dataclass
class ResampleResult:
    samples: list[ResampledSequence] = field(default_factory=list)
    skipped: list[tuple[int, str]] = field(default_factory=list)
    bev: BevMap | None = None


def mean_step(poses: Sequence[np.ndarray]) -> float:
    if len(poses) < 2:
        return 0.0
    xy = np.array([p[:2, 3] for p in poses])
    return float(np.mean(np.hypot(*np.diff(xy, axis=0).T)))


def resample_scene(grids: Sequence[OccupancyGrid], poses: Sequence[np.ndarray], table: SemanticClassTable,
                   preset: GridPreset, num_samples: int, seed: int = 0, min_separation: float = 20.0,
                   retry_budget: int = 50, frame_spacing: float | None = None,
                   max_frames: int | None = None, bev_resolution: float | None = None) -> ResampleResult:
    """Generate ``num_samples`` new (poses, occupancy) sequences from one recorded scene."""
    result = ResampleResult()
    if num_samples <= 0:
        return result
    cloud = aggregate_point_cloud(grids, poses, table)
    bev = build_bev_drivable(cloud, table, bev_resolution or preset.resolution)
    result.bev = bev
    spacing = frame_spacing or mean_step(poses) or preset.resolution * 2
    limit = max_frames or len(grids)
    streams = np.random.SeedSequence(seed).spawn(num_samples)
    for k, ss in enumerate(streams):
        rng = np.random.default_rng(ss)
        try:
            traj = sample_trajectory(bev, rng, min_separation, retry_budget)
        except NoPath as exc:
            result.skipped.append((k, str(exc)))
            continue
        new_poses = path_to_poses(traj.waypoints, bev, spacing)[:limit]
        new_grids = [extract_occupancy(cloud, p, preset, table) for p in new_poses]
        result.samples.append(ResampledSequence(k, new_poses, new_grids, traj))
    return result


def trajectory_stats(trajectories: Sequence[Sequence[np.ndarray]], n_bins: int = 9) -> dict:
    """Heading-change histogram and endpoint displacements in each start frame.

    Bins are centred on zero heading change so straight driving lands in one bin.
    """
    if not trajectories:
        raise ValueError("need at least one trajectory")
    width = 2 * math.pi / n_bins
    edges = -math.pi + np.arange(n_bins + 1) * width
    if n_bins % 2 == 0:
        edges = edges + width / 2
    headings, disp = [], []
    for poses in trajectories:
        first, last = np.asarray(poses[0]), np.asarray(poses[-1])
        rel = invert_pose(first) @ last
        headings.append(wrap_angle(yaw_of(rel)))
        disp.append((float(rel[0, 3]), float(rel[1, 3])))
    h = np.asarray(headings)
    shifted = np.mod(h - edges[0], 2 * math.pi)
    idx = np.minimum((shifted / width).astype(int), n_bins - 1)
    counts = np.bincount(idx, minlength=n_bins)
    return {
        "bins": edges.tolist(),
        "counts": counts.tolist(),
        "headings": h.tolist(),
        "displacements": disp,
        "max_bin_fraction": float(counts.max() / counts.sum()),
    }
