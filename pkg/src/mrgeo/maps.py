"""Feature-map containers shared by the spatial and channel modules."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

from . import tensor as T
from .tensor import ShapeError, Tensor


class View(str, Enum):
    STREET = "street"
    SATELLITE = "satellite"


@dataclass
class FeatureMap:
    """Channel-first map of shape (C, H, W) or batched (B, C, H, W)."""

    values: Tensor
    view: View

    def __post_init__(self):
        if self.values.ndim not in (3, 4):
            raise ShapeError(f"FeatureMap needs (C,H,W) or (B,C,H,W), got {self.values.shape}")

    @property
    def channels(self) -> int:
        return self.values.shape[-3]

    @property
    def grid(self) -> tuple[int, int]:
        return self.values.shape[-2], self.values.shape[-1]

    def tokens(self) -> Tensor:
        """Flatten to (..., N, C) row vectors, N = H*W in row-major order."""
        return to_tokens(self.values)

    @classmethod
    def from_tokens(cls, tokens: Tensor, grid: tuple[int, int], view: View) -> "FeatureMap":
        return cls(from_tokens(tokens, grid), view)


def to_tokens(values: Tensor) -> Tensor:
    *lead, c, h, w = values.shape
    flat = T.reshape(values, (*lead, c, h * w))
    return T.transpose(flat)


def from_tokens(tokens: Tensor, grid: tuple[int, int]) -> Tensor:
    *lead, n, c = tokens.shape
    h, w = grid
    if n != h * w:
        raise ShapeError(f"{n} tokens do not fill a {h}x{w} grid")
    return T.reshape(T.transpose(tokens), (*lead, c, h, w))
