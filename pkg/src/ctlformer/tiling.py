"""Overlapping tiled inference with weighted stitching.

Full slices are cut into tiles on a stride grid whose final row/column is
clamped to the image edge, every tile is denoised independently, and the
results are blended back by a per-pixel weighted average. With the cosine
window, weights fade toward tile borders so overlapping neighbours
dominate near seams; accumulation happens in float64 and is cast once at
the end, so a single-tile plan returns its tile bit-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ContractError, ShapeError
from .model import ModelConfig, Parameters, forward
from .tensor import Tensor, no_grad

BLEND_MODES = ("uniform", "cosine")
WINDOW_FLOOR = 1e-3


@dataclass(frozen=True)
class TilePlan:
    height: int
    width: int
    tile: int
    stride: int
    origins: tuple[tuple[int, int], ...]
    blend: str = "cosine"

    def __post_init__(self):
        if self.blend not in BLEND_MODES:
            raise ContractError(f"blend must be one of {BLEND_MODES}, got {self.blend!r}")
        if not self.origins:
            raise ContractError("a tile plan needs at least one origin")


def _axis_origins(length: int, tile: int, stride: int) -> list[int]:
    starts = list(range(0, length - tile + 1, stride))
    if starts[-1] != length - tile:
        starts.append(length - tile)
    return starts


def plan(height: int, width: int, tile: int, stride: int,
         blend: str = "cosine") -> TilePlan:
    """Tile origins on a stride grid, final origin clamped to the edge."""
    if tile > height or tile > width:
        raise ContractError(
            f"tile {tile} exceeds image {height}x{width}"
        )
    if tile < 1 or stride < 1 or stride > tile:
        raise ContractError(
            f"need 1 <= stride <= tile, got tile {tile} stride {stride}"
        )
    rows = _axis_origins(height, tile, stride)
    cols = _axis_origins(width, tile, stride)
    origins = tuple((r, c) for r in rows for c in cols)
    return TilePlan(height, width, tile, stride, origins, blend)


def split(image: Tensor, tile_plan: TilePlan) -> list[Tensor]:
    """Cut the image into tiles in plan-origin order."""
    if image.ndim != 3 or image.shape[0] != 1:
        raise ShapeError(f"expected a (1, H, W) image, got {image.shape}")
    if image.shape[1] != tile_plan.height or image.shape[2] != tile_plan.width:
        raise ShapeError(
            f"image {image.shape[1]}x{image.shape[2]} does not match plan "
            f"{tile_plan.height}x{tile_plan.width}"
        )
    t = tile_plan.tile
    return [Tensor(image.data[:, r:r + t, c:c + t].copy())
            for r, c in tile_plan.origins]


@lru_cache(maxsize=8)
def blend_window(tile: int, blend: str) -> np.ndarray:
    """Separable per-pixel stitch weights for one tile, in float64.

    The cosine profile is sin^2 at pixel centers, floored so border
    weights stay strictly positive.
    """
    if blend == "uniform":
        return np.ones((tile, tile), np.float64)
    if blend != "cosine":
        raise ContractError(f"blend must be one of {BLEND_MODES}, got {blend!r}")
    i = np.arange(tile, dtype=np.float64)
    profile = np.sin(np.pi * (i + 0.5) / tile) ** 2
    profile = np.maximum(profile, WINDOW_FLOOR)
    win = profile[:, None] * profile[None, :]
    win.setflags(write=False)
    return win


def stitch(tiles: list[Tensor], tile_plan: TilePlan) -> Tensor:
    """Weighted overlap-add of denoised tiles back onto the full canvas."""
    if len(tiles) != len(tile_plan.origins):
        raise ContractError(
            f"{len(tiles)} tiles for {len(tile_plan.origins)} plan origins"
        )
    t = tile_plan.tile
    win = blend_window(t, tile_plan.blend)
    acc = np.zeros((1, tile_plan.height, tile_plan.width), np.float64)
    wsum = np.zeros((1, tile_plan.height, tile_plan.width), np.float64)
    for tensor, (r, c) in zip(tiles, tile_plan.origins):
        if tensor.shape != (1, t, t):
            raise ShapeError(f"tile at {(r, c)} has shape {tensor.shape}, expected (1, {t}, {t})")
        acc[0, r:r + t, c:c + t] += win * tensor.data[0].astype(np.float64)
        wsum[0, r:r + t, c:c + t] += win
    if wsum.min() <= 0.0:
        raise ContractError("plan leaves pixels with zero stitch weight")
    return Tensor((acc / wsum).astype(np.float32))


def denoise_image(params: Parameters, image: Tensor, cfg: ModelConfig,
                  stride: int | None = None, blend: str = "cosine") -> Tensor:
    """Plan, denoise every tile in eval mode, and stitch the results."""
    if stride is None:
        stride = max(1, cfg.tile_size // 2)
    tile_plan = plan(image.shape[1], image.shape[2], cfg.tile_size, stride, blend)
    pieces = split(image, tile_plan)
    with no_grad():
        out = [forward(params, piece, cfg) for piece in pieces]
    return stitch(out, tile_plan)
