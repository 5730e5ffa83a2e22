"""Shared-weight toy encoder: patch embedding, SARM->CCM blocks, region descriptor."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import tensor as T
from .ccm import CcmParams, ccm_tokens
from .config import EncoderConfig
from .data import SceneImage
from .maps import View, from_tokens
from .rgam import Descriptor, pooled_descriptor, region_descriptor
from .sarm import SarmParams, sarm_tokens
from .tensor import ShapeError, Tensor


class EncodeError(ShapeError):
    """Shape failure inside the encoder, tagged with the stage that raised it."""


def init_params(cfg: EncoderConfig, seed: int) -> dict[str, Tensor]:
    c, p = cfg.channels, cfg.patch
    patch_dim = 3 * p * p
    params = {
        "embed.weight": T.glorot_uniform(seed, "embed.weight", (patch_dim, c), patch_dim, c),
        "embed.bias": T.zeros_param("embed.bias", (c,)),
    }
    for i in range(cfg.blocks):
        prefix = f"blocks.{i}"
        if cfg.sarm:
            sp = SarmParams.init(c, cfg.k, seed, prefix=f"{prefix}.sarm")
            params.update({f"{prefix}.sarm.{n}": t for n, t in sp.tensors().items()})
        if cfg.ccm in ("on", "variant"):
            cp = CcmParams.init(c, seed, cfg.ccm_kernel, cfg.effective_ccm_rank,
                                prefix=f"{prefix}.ccm")
            params.update({f"{prefix}.ccm.{n}": t for n, t in cp.tensors().items()})
        elif cfg.ccm == "fc":
            params[f"{prefix}.fc.weight"] = T.glorot_uniform(
                seed, f"{prefix}.fc.weight", (c, c), c, c)
            params[f"{prefix}.fc.bias"] = T.zeros_param(f"{prefix}.fc.bias", (c,))
    return params


def param_shapes(cfg: EncoderConfig) -> dict[str, tuple[int, ...]]:
    return {name: t.shape for name, t in init_params(cfg, 0).items()}


def patchify(pixels: np.ndarray, patch: int) -> np.ndarray:
    """(B, 3, H, W) -> (B, N, 3*p*p) with row-major patch order."""
    b, ch, h, w = pixels.shape
    if h % patch or w % patch:
        raise EncodeError(f"patchify: image {h}x{w} is not divisible by patch size {patch}")
    gh, gw = h // patch, w // patch
    x = pixels.reshape(b, ch, gh, patch, gw, patch).transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(b, gh * gw, ch * patch * patch)


class Encoder:
    """One parameter set serving both views; only the region grid differs."""

    def __init__(self, cfg: EncoderConfig, params: dict[str, Tensor]):
        expected = param_shapes(cfg)
        if set(expected) != set(params):
            missing = sorted(set(expected) - set(params))
            extra = sorted(set(params) - set(expected))
            raise ShapeError(f"parameter names do not match config: missing {missing}, "
                             f"unexpected {extra}")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ShapeError(f"{name}: checkpoint shape {params[name].shape}, "
                                 f"config expects {shape}")
        self.cfg = cfg
        self.params = params
        self._sarm = []
        self._ccm = []
        for i in range(cfg.blocks):
            pre = f"blocks.{i}"
            self._sarm.append(SarmParams(k=cfg.k, **{
                n: params[f"{pre}.sarm.{n}"] for n in _SARM_NAMES}) if cfg.sarm else None)
            self._ccm.append(CcmParams(**{
                n: params[f"{pre}.ccm.{n}"] for n in _CCM_NAMES})
                if cfg.ccm in ("on", "variant") else None)

    @classmethod
    def create(cls, cfg: EncoderConfig, seed: int) -> "Encoder":
        return cls(cfg, init_params(cfg, seed))

    def grid_for(self, view: View | str):
        return self.cfg.satellite_grid if View(view) is View.SATELLITE else self.cfg.street_grid

    def image_size(self, view: View | str) -> tuple[int, int]:
        return self.cfg.satellite_size if View(view) is View.SATELLITE else self.cfg.street_size

    def _block(self, i: int, x: Tensor, grid: tuple[int, int]) -> Tensor:
        cfg = self.cfg
        y = x
        touched = False
        if self._sarm[i] is not None:
            y = _stage(f"block {i} sarm", sarm_tokens, y, grid, self._sarm[i], cfg.fusion_ratio)
            touched = True
        if self._ccm[i] is not None:
            y = _stage(f"block {i} ccm", ccm_tokens, from_tokens(y, grid), self._ccm[i])
            touched = True
        elif cfg.ccm == "fc":
            pre = f"blocks.{i}.fc"
            y = T.add(T.matmul(y, self.params[f"{pre}.weight"]), self.params[f"{pre}.bias"])
            touched = True
        if not touched:
            return x
        return T.add(x, y) if cfg.residual_for(i) else y

    def features(self, pixels: np.ndarray, view: View | str) -> Tensor:
        """(B, 3, H, W) pixels -> (B, C, h, w) feature map after all blocks."""
        cfg = self.cfg
        if pixels.shape[-2:] != self.image_size(view):
            raise EncodeError(f"patchify: {View(view).value} image is "
                              f"{pixels.shape[-2]}x{pixels.shape[-1]}, config expects "
                              "{}x{}".format(*self.image_size(view)))
        patches = patchify(pixels, cfg.patch)
        grid = (pixels.shape[-2] // cfg.patch, pixels.shape[-1] // cfg.patch)
        x = T.add(T.matmul(Tensor(patches), self.params["embed.weight"]),
                  self.params["embed.bias"])
        for i in range(cfg.blocks):
            x = self._block(i, x, grid)
        return from_tokens(x, grid)

    def describe(self, pixels: np.ndarray, view: View | str) -> Tensor:
        fmap = self.features(pixels, view)
        if not self.cfg.rgam:
            return pooled_descriptor(fmap)
        return _stage("descriptor", region_descriptor, fmap, self.grid_for(view))

    def encode_batch(self, images: Sequence[SceneImage]) -> Descriptor:
        if not images:
            raise ValueError("encode_batch needs at least one image")
        view = View(images[0].view)
        if any(View(im.view) is not view for im in images):
            raise ValueError("encode_batch: all images in a batch must share one view")
        pixels = np.stack([np.asarray(im.pixels) for im in images])
        return Descriptor(self.describe(pixels, view), view, True)

    def encode(self, img: SceneImage) -> Descriptor:
        d = self.encode_batch([img])
        return Descriptor(T.reshape(d.values, (d.dim,)), d.view, True)


_SARM_NAMES = ("wq_global", "wk_global", "wv_global", "wq_local", "wk_local", "wv_local",
               "gate_weight", "gate_bias")
_CCM_NAMES = ("conv_kernels", "linear_weight", "linear_bias", "proj_weight", "proj_bias", "alpha")


def _stage(name, fn, *args):
    try:
        return fn(*args)
    except EncodeError:
        raise
    except ShapeError as exc:
        raise EncodeError(f"{name}: {exc}") from exc


def encode(img: SceneImage, cfg: EncoderConfig, params: dict[str, Tensor]) -> Descriptor:
    return Encoder(cfg, params).encode(img)
