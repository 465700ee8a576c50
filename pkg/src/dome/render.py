"""Top-down rendering of occupancy grids as PNG images or terminal text."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .occupancy import OccupancyGrid

BACKGROUND = (255, 255, 255)

# colours for the synthetic class table; other tables fall back to a generated palette
SYNTHETIC_PALETTE = {
    1: (128, 64, 128),    # road
    2: (244, 35, 232),    # sidewalk
    3: (0, 0, 230),       # car
    4: (70, 70, 70),      # manmade
    5: (107, 142, 35),    # vegetation
}

ASCII_GLYPHS = ".#=c^*+%&@xo0ABCDEFGH"


def default_palette(num_classes: int, empty_id: int) -> dict[int, tuple[int, int, int]]:
    if num_classes == 6 and empty_id == 0:
        return dict(SYNTHETIC_PALETTE)
    rng = np.random.default_rng(num_classes)
    return {c: tuple(int(v) for v in rng.integers(30, 226, 3)) for c in range(num_classes) if c != empty_id}


def top_down(labels: np.ndarray, empty_id: int) -> np.ndarray:
    """Class of the highest non-empty voxel in every (h, w) column, ``empty_id`` where none."""
    labels = np.asarray(labels)
    occupied = labels != empty_id
    d = labels.shape[2]
    # index of the last occupied voxel along depth
    top = d - 1 - np.argmax(occupied[:, :, ::-1], axis=2)
    out = np.take_along_axis(labels, top[..., None], axis=2)[..., 0]
    return np.where(occupied.any(axis=2), out, empty_id)


def bev_image(grid: OccupancyGrid | np.ndarray, empty_id: int = 0,
              palette: dict[int, tuple[int, int, int]] | None = None) -> Image.Image:
    labels = grid.labels if isinstance(grid, OccupancyGrid) else np.asarray(grid)
    n = grid.num_classes if isinstance(grid, OccupancyGrid) else int(labels.max(initial=0)) + 1
    palette = palette or default_palette(max(n, empty_id + 1), empty_id)
    flat = top_down(labels, empty_id)
    rgb = np.empty((*flat.shape, 3), dtype=np.uint8)
    rgb[:] = BACKGROUND
    for c, colour in palette.items():
        rgb[flat == c] = colour
    return Image.fromarray(rgb, mode="RGB")


def render_bev(grid: OccupancyGrid | np.ndarray, path, empty_id: int = 0,
               palette: dict[int, tuple[int, int, int]] | None = None) -> Path:
    """Write the top-down view as a PNG of size (W, H)."""
    path = Path(path)
    if not path.parent.is_dir():
        raise OSError(f"cannot write {path}: directory {path.parent} does not exist")
    bev_image(grid, empty_id, palette).save(path, format="PNG")
    return path


def render_ascii(grid: OccupancyGrid | np.ndarray, empty_id: int = 0) -> str:
    labels = grid.labels if isinstance(grid, OccupancyGrid) else np.asarray(grid)
    flat = top_down(labels, empty_id)
    glyph = lambda c: " " if c == empty_id else ASCII_GLYPHS[c % len(ASCII_GLYPHS)]
    return "\n".join("".join(glyph(int(c)) for c in row) for row in flat)
