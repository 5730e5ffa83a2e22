"""Spatial adaptive representation: global and windowed attention fused by a gate."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .maps import FeatureMap
from .tensor import ShapeError, Tensor


@dataclass
class SarmParams:
    wq_global: Tensor
    wk_global: Tensor
    wv_global: Tensor
    wq_local: Tensor
    wk_local: Tensor
    wv_local: Tensor
    gate_weight: Tensor  # (2C, C)
    gate_bias: Tensor  # (C,)
    k: int = 3

    def __post_init__(self):
        c = self.wq_global.shape[0]
        for name in ("wq_global", "wk_global", "wv_global", "wq_local", "wk_local", "wv_local"):
            if getattr(self, name).shape != (c, c):
                raise ShapeError(f"{name} must be {c}x{c}, got {getattr(self, name).shape}")
        if self.gate_weight.shape != (2 * c, c) or self.gate_bias.shape != (c,):
            raise ShapeError(
                f"gate must map {2 * c}->{c}, got weight {self.gate_weight.shape} "
                f"bias {self.gate_bias.shape}")
        check_window(self.k)

    @property
    def channels(self) -> int:
        return self.wq_global.shape[0]

    def tensors(self) -> dict[str, Tensor]:
        return {
            "wq_global": self.wq_global, "wk_global": self.wk_global,
            "wv_global": self.wv_global, "wq_local": self.wq_local,
            "wk_local": self.wk_local, "wv_local": self.wv_local,
            "gate_weight": self.gate_weight, "gate_bias": self.gate_bias,
        }

    @classmethod
    def init(cls, channels: int, k: int, seed: int, prefix: str = "sarm") -> "SarmParams":
        c = channels

        def proj(name):
            return T.glorot_uniform(seed, f"{prefix}.{name}", (c, c), c, c)

        return cls(
            proj("wq_global"), proj("wk_global"), proj("wv_global"),
            proj("wq_local"), proj("wk_local"), proj("wv_local"),
            T.glorot_uniform(seed, f"{prefix}.gate_weight", (2 * c, c), 2 * c, c),
            T.zeros_param(f"{prefix}.gate_bias", (c,)),
            k=k,
        )


def check_window(k: int) -> None:
    if k < 1 or k % 2 == 0:
        raise ValueError(f"neighbourhood size k must be a positive odd integer, got {k}")


def window_mask(grid: tuple[int, int], k: int) -> np.ndarray:
    """(N, N) boolean mask: j lies in the k x k window centred on i, clipped at borders."""
    check_window(k)
    h, w = grid
    rows, cols = np.divmod(np.arange(h * w), w)
    half = k // 2
    return ((np.abs(rows[:, None] - rows[None, :]) <= half)
            & (np.abs(cols[:, None] - cols[None, :]) <= half))


def _attend(tokens: Tensor, wq: Tensor, wk: Tensor, wv: Tensor,
            mask: np.ndarray | None) -> Tensor:
    c = tokens.shape[-1]
    q = T.matmul(tokens, wq)
    k = T.matmul(tokens, wk)
    v = T.matmul(tokens, wv)
    scores = T.mul(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(c))
    return T.matmul(T.softmax_rows(scores, mask), v)


def _check_map(x: FeatureMap, p: SarmParams) -> None:
    if x.channels != p.channels:
        raise ShapeError(f"feature map has {x.channels} channels, params expect {p.channels}")


def global_attention_tokens(tokens: Tensor, p: SarmParams) -> Tensor:
    return _attend(tokens, p.wq_global, p.wk_global, p.wv_global, None)


def local_attention_tokens(tokens: Tensor, grid: tuple[int, int], p: SarmParams) -> Tensor:
    return _attend(tokens, p.wq_local, p.wk_local, p.wv_local, window_mask(grid, p.k))


def gate_values(o_global: Tensor, o_local: Tensor, p: SarmParams) -> Tensor:
    """Per-position channel gate sigma(FC([O_l, O_h])) on token layout."""
    both = T.concat([o_global, o_local], axis=-1)
    return T.sigmoid(T.add(T.matmul(both, p.gate_weight), p.gate_bias))


def gated_fusion_tokens(o_global: Tensor, o_local: Tensor, p: SarmParams) -> Tensor:
    return T.add(o_global, T.mul(gate_values(o_global, o_local, p), o_local))


def fixed_ratio_tokens(o_global: Tensor, o_local: Tensor, ratio_global: float,
                       ratio_local: float) -> Tensor:
    if ratio_global < 0 or ratio_local < 0:
        raise ValueError(f"fusion ratios must be non-negative, got {ratio_global}:{ratio_local}")
    return T.add(T.mul(o_global, float(ratio_global)), T.mul(o_local, float(ratio_local)))


def sarm_tokens(tokens: Tensor, grid: tuple[int, int], p: SarmParams,
                fusion: tuple[float, float] | None = None) -> Tensor:
    """SARM on (..., N, C) tokens. ``fusion`` replaces the gate with fixed ratios."""
    o_global = global_attention_tokens(tokens, p)
    o_local = local_attention_tokens(tokens, grid, p)
    if fusion is None:
        return gated_fusion_tokens(o_global, o_local, p)
    return fixed_ratio_tokens(o_global, o_local, *fusion)


# FeatureMap-level API -------------------------------------------------------

def global_attention(x: FeatureMap, p: SarmParams) -> FeatureMap:
    _check_map(x, p)
    return FeatureMap.from_tokens(global_attention_tokens(x.tokens(), p), x.grid, x.view)


def local_attention(x: FeatureMap, p: SarmParams) -> FeatureMap:
    _check_map(x, p)
    return FeatureMap.from_tokens(local_attention_tokens(x.tokens(), x.grid, p), x.grid, x.view)


def _check_pair(a: FeatureMap, b: FeatureMap) -> None:
    if a.values.shape != b.values.shape:
        raise ShapeError(f"fusion inputs differ in shape: {a.values.shape} vs {b.values.shape}")


def gated_fusion(o_global: FeatureMap, o_local: FeatureMap, p: SarmParams) -> FeatureMap:
    _check_pair(o_global, o_local)
    fused = gated_fusion_tokens(o_global.tokens(), o_local.tokens(), p)
    return FeatureMap.from_tokens(fused, o_global.grid, o_global.view)


def fixed_ratio_fusion(o_global: FeatureMap, o_local: FeatureMap, ratio_global: float,
                       ratio_local: float) -> FeatureMap:
    _check_pair(o_global, o_local)
    fused = fixed_ratio_tokens(o_global.values, o_local.values, ratio_global, ratio_local)
    return FeatureMap(fused, o_global.view)


def sarm_forward(x: FeatureMap, p: SarmParams,
                 fusion: tuple[float, float] | None = None) -> FeatureMap:
    _check_map(x, p)
    return FeatureMap.from_tokens(sarm_tokens(x.tokens(), x.grid, p, fusion), x.grid, x.view)
