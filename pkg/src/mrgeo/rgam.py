"""Region-level descriptors: fixed grid partition, per-region pooling, ordered concat."""

from __future__ import annotations

from dataclasses import dataclass

from . import tensor as T
from .maps import FeatureMap, View
from .tensor import Region, ShapeError, Tensor


class GridError(ShapeError):
    pass


@dataclass(frozen=True)
class GridSpec:
    rows: int
    cols: int

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError(f"grid needs positive rows/cols, got {self.rows}x{self.cols}")

    @property
    def regions(self) -> int:
        return self.rows * self.cols


SATELLITE_GRID = GridSpec(2, 2)
STREET_GRID = GridSpec(1, 4)


def default_grid(view: View | str) -> GridSpec:
    return SATELLITE_GRID if View(view) is View.SATELLITE else STREET_GRID


@dataclass
class Descriptor:
    """Retrieval embedding; ``values`` is (D,) or batched (B, D)."""

    values: Tensor
    view: View
    normalized: bool

    @property
    def dim(self) -> int:
        return self.values.shape[-1]


def partition_grid(height: int, width: int, g: GridSpec) -> list[Region]:
    """Non-overlapping tiles covering the map, enumerated row-major."""
    if height % g.rows or width % g.cols:
        raise GridError(
            f"a {height}x{width} map cannot be split into a {g.rows}x{g.cols} grid: "
            f"height must be divisible by {g.rows} and width by {g.cols}")
    th, tw = height // g.rows, width // g.cols
    return [Region(r * th, c * tw, th, tw) for r in range(g.rows) for c in range(g.cols)]


def region_descriptor(values: Tensor, g: GridSpec, normalize: bool = True) -> Tensor:
    """Concatenate region means of a (..., C, H, W) tensor -> (..., rows*cols*C)."""
    h, w = values.shape[-2:]
    blocks = [T.avg_pool_region(values, r) for r in partition_grid(h, w, g)]
    desc = T.concat(blocks, axis=-1)
    return T.l2_normalize(desc) if normalize else desc


def pooled_descriptor(values: Tensor, normalize: bool = True) -> Tensor:
    """Whole-map average pooling; the descriptor used when regions are disabled."""
    h, w = values.shape[-2:]
    desc = T.avg_pool_region(values, Region(0, 0, h, w))
    return T.l2_normalize(desc) if normalize else desc


def build_descriptor(x: FeatureMap, g: GridSpec, normalize: bool = True) -> Descriptor:
    return Descriptor(region_descriptor(x.values, g, normalize), View(x.view), normalize)
