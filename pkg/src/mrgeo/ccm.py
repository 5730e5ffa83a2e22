"""Channel calibration.

The pooled channel vector ``f`` is split into a global component (affine map)
and a local component (channel-axis convolution). Their cross-correlation,
summed along each row, gives a correction vector that is added with learnable
strength ``alpha`` to every projected position.

For plain vectors the correction collapses to ``f_h * sum(f_l) + f_l * sum(f_h)``.
``rank > 1`` keeps ``rank`` components per channel instead, so the correlation
matrix is no longer rank one.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import tensor as T
from .maps import FeatureMap, from_tokens, to_tokens
from .tensor import Region, ShapeError, Tensor


@dataclass
class CcmParams:
    conv_kernels: Tensor  # (rank, w)
    linear_weight: Tensor  # (C, C * rank)
    linear_bias: Tensor  # (C * rank,)
    proj_weight: Tensor  # (C, C)
    proj_bias: Tensor  # (C,)
    alpha: Tensor  # scalar

    def __post_init__(self):
        c = self.proj_weight.shape[0]
        rank, w = self.conv_kernels.shape
        if w % 2 == 0:
            raise ValueError(f"CCM kernel width must be odd, got {w}")
        if self.proj_weight.shape != (c, c) or self.proj_bias.shape != (c,):
            raise ShapeError(f"proj must be {c}x{c} affine, got {self.proj_weight.shape}")
        if self.linear_weight.shape != (c, c * rank) or self.linear_bias.shape != (c * rank,):
            raise ShapeError(
                f"linear must map {c}->{c * rank}, got {self.linear_weight.shape}")
        if self.alpha.shape != ():
            raise ShapeError(f"alpha must be a scalar, got shape {self.alpha.shape}")

    @property
    def channels(self) -> int:
        return self.proj_weight.shape[0]

    @property
    def rank(self) -> int:
        return self.conv_kernels.shape[0]

    def tensors(self) -> dict[str, Tensor]:
        return {
            "conv_kernels": self.conv_kernels, "linear_weight": self.linear_weight,
            "linear_bias": self.linear_bias, "proj_weight": self.proj_weight,
            "proj_bias": self.proj_bias, "alpha": self.alpha,
        }

    @classmethod
    def init(cls, channels: int, seed: int, kernel_width: int = 3, rank: int = 1,
             prefix: str = "ccm") -> "CcmParams":
        c, w = channels, kernel_width
        return cls(
            T.glorot_uniform(seed, f"{prefix}.conv_kernels", (rank, w), w, w),
            T.glorot_uniform(seed, f"{prefix}.linear_weight", (c, c * rank), c, c * rank),
            T.zeros_param(f"{prefix}.linear_bias", (c * rank,)),
            T.glorot_uniform(seed, f"{prefix}.proj_weight", (c, c), c, c),
            T.zeros_param(f"{prefix}.proj_bias", (c,)),
            T.zeros_param(f"{prefix}.alpha", ()),
        )


@dataclass
class ChannelStats:
    f: Tensor
    f_l: Tensor
    f_h: Tensor
    f_prime: Tensor


def _pool(values: Tensor) -> Tensor:
    h, w = values.shape[-2:]
    return T.avg_pool_region(values, Region(0, 0, h, w))


def global_channel_pool(x: FeatureMap) -> Tensor:
    return _pool(x.values)


def decouple_channels(f: Tensor, p: CcmParams) -> tuple[Tensor, Tensor]:
    """Return ``(f_l, f_h)``: shape (..., C) for rank 1, else (..., C, rank)."""
    if f.shape[-1] != p.channels:
        raise ShapeError(f"channel vector has length {f.shape[-1]}, expected {p.channels}")
    row = T.reshape(f, (1, f.shape[0])) if f.ndim == 1 else f
    f_l = T.add(T.matmul(row, p.linear_weight), p.linear_bias)
    if p.rank == 1:
        f_l = T.reshape(f_l, f.shape)
        f_h = T.conv1d_channels(f, T.select(p.conv_kernels, 0))
        return f_l, f_h
    f_l = T.reshape(f_l, (*f.shape, p.rank))
    parts = [T.reshape(T.conv1d_channels(f, T.select(p.conv_kernels, r)), (*f.shape, 1))
             for r in range(p.rank)]
    return f_l, T.concat(parts, axis=-1)


def cross_calibrate_matrix(f_l: Tensor, f_h: Tensor) -> Tensor:
    """Row sums of ``f_h f_l^T + f_l f_h^T`` for (..., C, d) components."""
    if f_l.shape != f_h.shape:
        raise ShapeError(f"cross_calibrate: {f_l.shape} vs {f_h.shape}")
    m_h = T.sum_(T.matmul(f_h, T.transpose(f_l)), axis=-1)
    m_l = T.sum_(T.matmul(f_l, T.transpose(f_h)), axis=-1)
    return T.add(m_h, m_l)


def cross_calibrate(f_l: Tensor, f_h: Tensor, method: str = "outer") -> Tensor:
    """Correction vector f' from (..., C) components.

    ``method="outer"`` builds the C x C correlation matrices explicitly;
    ``"collapsed"`` uses the equivalent ``f_h * sum(f_l) + f_l * sum(f_h)``.
    """
    if f_l.shape != f_h.shape:
        raise ShapeError(f"cross_calibrate: {f_l.shape} vs {f_h.shape}")
    if method == "outer":
        col = (*f_l.shape, 1)
        return cross_calibrate_matrix(T.reshape(f_l, col), T.reshape(f_h, col))
    if method == "collapsed":
        sum_l = T.sum_(f_l, axis=-1, keepdims=True)
        sum_h = T.sum_(f_h, axis=-1, keepdims=True)
        return T.add(T.mul(f_h, sum_l), T.mul(f_l, sum_h))
    raise ValueError(f"unknown cross_calibrate method {method!r}")


def project_tokens(tokens: Tensor, p: CcmParams) -> Tensor:
    return T.add(T.matmul(tokens, p.proj_weight), p.proj_bias)


def inject_tokens(tokens: Tensor, f_prime: Tensor, p: CcmParams) -> Tensor:
    """x_hat_i + alpha * f' at every position of (..., N, C) tokens."""
    shift = T.mul(p.alpha, f_prime)
    shift = T.reshape(shift, (*shift.shape[:-1], 1, shift.shape[-1]))
    return T.add(project_tokens(tokens, p), shift)


def inject_calibration(x: FeatureMap, f_prime: Tensor, p: CcmParams) -> FeatureMap:
    if f_prime.shape[-1] != x.channels:
        raise ShapeError(f"correction has length {f_prime.shape[-1]}, map has {x.channels}")
    out = inject_tokens(x.tokens(), f_prime, p)
    return FeatureMap(from_tokens(out, x.grid), x.view)


def _stats(values: Tensor, p: CcmParams) -> ChannelStats:
    f = _pool(values)
    f_l, f_h = decouple_channels(f, p)
    f_prime = cross_calibrate(f_l, f_h) if p.rank == 1 else cross_calibrate_matrix(f_l, f_h)
    return ChannelStats(f, f_l, f_h, f_prime)


def channel_stats(x: FeatureMap, p: CcmParams) -> ChannelStats:
    return _stats(x.values, p)


def ccm_tokens(values: Tensor, p: CcmParams) -> Tensor:
    """CCM on a (..., C, H, W) tensor, returning (..., N, C) tokens."""
    if values.shape[-3] != p.channels:
        raise ShapeError(f"feature map has {values.shape[-3]} channels, params expect {p.channels}")
    return inject_tokens(to_tokens(values), _stats(values, p).f_prime, p)


def ccm_forward(x: FeatureMap, p: CcmParams) -> FeatureMap:
    return FeatureMap(from_tokens(ccm_tokens(x.values, p), x.grid), x.view)
