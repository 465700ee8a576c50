"""Procedural driving scenes: a road with sidewalks, static clutter and moving cars."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .occupancy import (SYNTHETIC_CLASSES, GridPreset, OccupancyGrid, SemanticClassTable, get_preset,
                        write_sequence)
from .trajectory import make_pose, path_to_poses

ROAD, SIDEWALK, CAR, MANMADE, VEGETATION = 1, 2, 3, 4, 5

CAR_LENGTH, CAR_WIDTH, CAR_HEIGHT = 8, 4, 3  # voxels


@dataclass
class Car:
    x: int      # world cell of the rear-right corner at frame 0
    y: int
    vx: int     # cells per frame along world x

    def box_at(self, t: int) -> tuple[int, int, int, int]:
        x0 = self.x + self.vx * t
        return x0, x0 + CAR_LENGTH, self.y, self.y + CAR_WIDTH


@dataclass
class WorldMap:
    """Static world voxels on the same vertical layout as the ego grid."""

    labels: np.ndarray
    origin: tuple[float, float, float]
    resolution: float

    def cell(self, xy) -> np.ndarray:
        return np.floor((np.asarray(xy) - np.asarray(self.origin[:2])) / self.resolution).astype(np.int64)


@dataclass
class Scene:
    grids: list[OccupancyGrid]
    poses: list[np.ndarray]
    world: WorldMap
    cars: list[Car]
    meta: dict = field(default_factory=dict)


def _ego_voxel_centers(preset: GridPreset) -> np.ndarray:
    idx = np.stack(np.meshgrid(*[np.arange(d) for d in preset.dims], indexing="ij"), axis=-1).reshape(-1, 3)
    return np.asarray(preset.origin) + (idx + 0.5) * preset.resolution


def render_frame(world: WorldMap, cars: list[Car], t: int, pose: np.ndarray, preset: GridPreset,
                 table: SemanticClassTable = SYNTHETIC_CLASSES) -> OccupancyGrid:
    centers = _ego_voxel_centers(preset)
    pts = centers @ pose[:3, :3].T + pose[:3, 3]
    idx = np.floor((pts - np.asarray(world.origin)) / world.resolution).astype(np.int64)
    inside = np.all((idx >= 0) & (idx < world.labels.shape), axis=1)
    labels = np.full(len(pts), table.empty_id, dtype=np.uint8)
    labels[inside] = world.labels[tuple(idx[inside].T)]
    for car in cars:
        x0, x1, y0, y1 = car.box_at(t)
        hit = ((idx[:, 0] >= x0) & (idx[:, 0] < x1) & (idx[:, 1] >= y0) & (idx[:, 1] < y1)
               & (idx[:, 2] >= 1) & (idx[:, 2] < 1 + CAR_HEIGHT))
        labels[hit] = CAR
    return OccupancyGrid(labels.reshape(preset.dims), preset.resolution, preset.origin, table.num_classes)


def _place_block(vol, rng, x_range, y_range, label, fw, fh, hmax):
    h, w = rng.integers(fw[0], fw[1] + 1), rng.integers(fh[0], fh[1] + 1)
    x = rng.integers(*x_range)
    y = rng.integers(*y_range)
    top = rng.integers(2, hmax + 1)
    vol[max(x, 0):max(x + h, 0), max(y, 0):max(y + w, 0), 0:top] = label


def _build_world(rng, x_lo, x_hi, y_lo, y_hi, res, depth, road_half, walk, cross_x):
    """World volume in cells; road centred on y = 0, optional cross road at x = cross_x (metres)."""
    ox, oy = x_lo, y_lo
    nx_, ny_ = int(round((x_hi - x_lo) / res)), int(round((y_hi - y_lo) / res))
    vol = np.zeros((nx_, ny_, depth), dtype=np.uint8)
    y0 = int(round(-oy / res))  # cell index of y = 0 boundary

    def carve(ax_lo, ax_hi, bx_lo, bx_hi, label, layer_only=True):
        vol[max(ax_lo, 0):max(ax_hi, 0), max(bx_lo, 0):max(bx_hi, 0), :] = 0
        vol[max(ax_lo, 0):max(ax_hi, 0), max(bx_lo, 0):max(bx_hi, 0), 0] = label

    # clutter first, roads carved on top
    n_blocks = int(rng.integers(nx_ // 6, nx_ // 3 + 1))
    for side in (-1, 1):
        band = (y0 + road_half + walk, ny_) if side > 0 else (0, y0 - road_half - walk - 2)
        for _ in range(n_blocks):
            if rng.random() < 0.5:
                _place_block(vol, rng, (0, nx_), band, MANMADE, (3, 7), (3, 7), depth - 1)
            else:
                _place_block(vol, rng, (0, nx_), band, VEGETATION, (2, 3), (2, 3), depth)
    # sidewalk then road along x
    carve(0, nx_, y0 - road_half - walk, y0 + road_half + walk, SIDEWALK)
    carve(0, nx_, y0 - road_half, y0 + road_half, ROAD)
    if cross_x is not None:
        xc = int(round((cross_x - ox) / res))
        carve(xc - road_half - walk, xc + road_half + walk, 0, ny_, SIDEWALK)
        carve(0, nx_, y0 - road_half, y0 + road_half, ROAD)
        carve(xc - road_half, xc + road_half, 0, ny_, ROAD)
    return WorldMap(vol, (ox, oy, -1.0), res)


def make_scene(rng: np.random.Generator, preset: GridPreset, n_frames: int, turn: bool,
               cross_prob: float = 0.5, speeds=(1, 2, 3), n_cars=(1, 3)) -> Scene:
    res = preset.resolution
    depth = preset.dims[2]
    speed_cells = int(rng.choice(speeds))
    speed = speed_cells * res
    road_half = int(rng.integers(5, 8))
    walk = int(rng.integers(3, 5))
    lane_y = -math.floor(road_half / 2) * res
    travel = speed * (n_frames - 1)
    has_cross = turn or rng.random() < cross_prob
    view = max(preset.dims[:2]) * res * 0.75
    if turn:
        cross_x = round((travel * 0.45 + road_half * res) / res) * res
    elif has_cross:
        cross_x = round(rng.uniform(0.0, travel + 4.0) / res) * res
    else:
        cross_x = None
    x_lo = -math.ceil(view / res) * res - 2.0
    x_hi = math.ceil((travel + view) / res) * res + 2.0
    y_lo = -math.ceil(view / res) * res - 2.0
    y_hi = -y_lo + (travel if turn else 0.0)
    y_hi = math.ceil(y_hi / res) * res
    world = _build_world(rng, x_lo, x_hi, y_lo, y_hi, res, depth, road_half, walk, cross_x)

    if turn:
        radius = 3.2
        lane_x = cross_x + math.floor(road_half / 2) * res
        ax = lane_x - radius
        arc = [(ax + radius * math.sin(a), lane_y + radius * (1 - math.cos(a)))
               for a in np.linspace(0, math.pi / 2, 25)]
        path = [(0.0, lane_y)] + arc + [(lane_x, lane_y + radius + travel)]
        poses = path_to_poses(np.asarray(path), None, speed, n_poses=n_frames)
    else:
        poses = [make_pose(k * speed, lane_y, 0.0) for k in range(n_frames)]

    cars = []
    y0 = int(round(-world.origin[1] / res))
    for _ in range(int(rng.integers(n_cars[0], n_cars[1] + 1))):
        same_dir = rng.random() < 0.5
        vx = int(rng.integers(1, 4)) * (1 if same_dir else -1)
        if same_dir:
            cy = y0 - math.floor(road_half / 2) - CAR_WIDTH // 2
        else:
            cy = y0 + math.floor(road_half / 2) - CAR_WIDTH // 2
        lo = int(round((-view / 2 - world.origin[0]) / res))
        hi = int(round((view / 2 + travel * 0.5 - world.origin[0]) / res))
        cars.append(Car(int(rng.integers(lo, hi)), cy, vx))

    grids = [render_frame(world, cars, t, p, preset) for t, p in enumerate(poses)]
    meta = {"speed_cells": speed_cells, "turn": bool(turn), "cross": cross_x is not None,
            "cars": [[c.x, c.y, c.vx] for c in cars]}
    return Scene(grids, poses, world, cars, meta)


def gen_synthetic(seed: int, n_scenes: int, preset: str | GridPreset = "synthetic", n_frames: int = 19,
                  turn_prob: float = 0.2, cross_prob: float = 0.5, out_dir=None) -> list[Scene]:
    """Deterministic scene set; optionally written as OCCS files plus a JSON manifest."""
    preset = get_preset(preset) if isinstance(preset, str) else preset
    if min(preset.dims[:2]) < 32:
        raise ValueError(f"preset {preset.name!r} is too small for synthetic scenes (need at least 32x32 columns)")
    scenes = []
    for k, ss in enumerate(np.random.SeedSequence(seed).spawn(n_scenes)):
        rng = np.random.default_rng(ss)
        turn = bool(rng.random() < turn_prob)
        scene = make_scene(rng, preset, n_frames, turn, cross_prob)
        scene.meta.update(scene_id=f"scene_{k:04d}", seed=seed, index=k)
        scenes.append(scene)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        manifest = []
        for s in scenes:
            write_sequence(s.grids, s.poses, out / f"{s.meta['scene_id']}.occs")
            manifest.append(s.meta)
        (out / "manifest.json").write_text(json.dumps(
            {"seed": seed, "preset": preset.name, "n_frames": n_frames, "scenes": manifest}, indent=2, sort_keys=True))
    return scenes
