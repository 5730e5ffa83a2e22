"""Central-difference gradient checks for the primitives and every module."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .ccm import CcmParams, ccm_forward
from .config import EncoderConfig, LossConfig
from .data import SceneImage
from .encoder import Encoder
from .maps import FeatureMap, View
from .objective import info_nce, info_nce_batch
from .rgam import GridSpec, build_descriptor
from .sarm import SarmParams, sarm_forward
from .tensor import Region, Tensor

STEP = 1e-5
TOLERANCE = 1e-4
# denominators below this are treated as this (gradients that are zero up to roundoff)
FLOOR = 1e-6

SUITES = ("tensor", "sarm", "ccm", "rgam", "loss", "encoder")


def numeric_grad(fn: Callable[[], Tensor], x: Tensor, h: float = STEP) -> np.ndarray:
    base = x.numpy()
    flat = base.reshape(-1)
    out = np.empty(flat.size)
    try:
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            x.assign(base)
            up = fn().item()
            flat[i] = orig - h
            x.assign(base)
            down = fn().item()
            flat[i] = orig
            out[i] = (up - down) / (2 * h)
    finally:
        x.assign(base)
    return out.reshape(x.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = FLOOR) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


@dataclass
class CaseResult:
    suite: str
    case: str
    tensor: str
    max_rel_error: float

    def passed(self, tol: float = TOLERANCE) -> bool:
        return self.max_rel_error <= tol


def check(suite: str, case: str, fn: Callable[[], Tensor], tensors: dict[str, Tensor],
          h: float = STEP) -> list[CaseResult]:
    for t in tensors.values():
        t.requires_grad = True
        t.zero_grad()
    loss = fn()
    T.backward(loss)
    analytic = {name: (t.grad if t.grad is not None else np.zeros(t.shape)).copy()
                for name, t in tensors.items()}
    results = []
    for name, t in tensors.items():
        err = relative_error(analytic[name], numeric_grad(fn, t, h))
        results.append(CaseResult(suite, case, name, float(err.max())))
    return results


def _weights(rng, shape):
    return Tensor(rng.normal(size=shape))


def _probe(out: Tensor, w: Tensor) -> Tensor:
    """Scalar sum(out * w) with fixed random w, so every output entry matters."""
    return T.sum_(T.mul(out, w))


# ---------------------------------------------------------------------------
# suites
# ---------------------------------------------------------------------------

def tensor_suite(seed: int = 0) -> list[CaseResult]:
    rng = np.random.default_rng(seed)

    def rand(*shape, positive=False):
        v = rng.normal(size=shape)
        return Tensor(np.abs(v) + 0.5 if positive else v)

    out: list[CaseResult] = []

    def run(name, build, **tensors):
        sample = build(**tensors)
        w = _weights(rng, sample.shape)
        out.extend(check("tensor", name, lambda: _probe(build(**tensors), w), tensors))

    run("matmul", lambda a, b: T.matmul(a, b), a=rand(3, 4), b=rand(4, 2))
    run("matmul_shared", lambda a, b: T.matmul(a, b), a=rand(2, 3, 4), b=rand(4, 2))
    run("matmul_batched", lambda a, b: T.matmul(a, b), a=rand(2, 3, 4), b=rand(2, 4, 2))
    run("add_vector", lambda a, b: T.add(a, b), a=rand(3, 4), b=rand(4))
    run("sub_keepdims", lambda a, b: T.sub(a, b), a=rand(2, 3, 4), b=rand(2, 1, 4))
    run("mul_scalar", lambda a, b: T.mul(a, b), a=rand(3, 4), b=rand())
    run("div", lambda a, b: T.div(a, b), a=rand(3, 4), b=rand(3, 4, positive=True))
    run("exp", lambda a: T.exp(a), a=rand(3, 4))
    run("log", lambda a: T.log(a), a=rand(3, 4, positive=True))
    run("sqrt", lambda a: T.sqrt(a), a=rand(3, 4, positive=True))
    run("sigmoid", lambda a: T.sigmoid(a), a=rand(3, 4))
    run("softmax_rows", lambda a: T.softmax_rows(a), a=rand(3, 5))
    mask = rng.random((3, 5)) < 0.6
    mask[:, 0] = True
    run("softmax_rows_masked", lambda a: T.softmax_rows(a, mask), a=rand(3, 5))
    run("logsumexp_rows", lambda a: T.logsumexp_rows(a), a=rand(3, 5))
    run("sum_axis", lambda a: T.sum_(a, axis=1), a=rand(3, 4))
    run("mean_keepdims", lambda a: T.mean(a, axis=-1, keepdims=True), a=rand(3, 4))
    run("reshape", lambda a: T.reshape(a, (4, 3)), a=rand(3, 4))
    run("transpose", lambda a: T.transpose(a, (2, 0, 1)), a=rand(2, 3, 4))
    run("concat", lambda a, b: T.concat([a, b], axis=-1), a=rand(3, 2), b=rand(3, 4))
    run("select", lambda a: T.select(a, 1, axis=1), a=rand(3, 4))
    run("conv1d_channels", lambda f, k: T.conv1d_channels(f, k), f=rand(2, 7), k=rand(3))
    run("avg_pool_region", lambda x: T.avg_pool_region(x, Region(1, 0, 2, 3)), x=rand(2, 4, 4))
    run("l2_normalize", lambda x: T.l2_normalize(x), x=rand(3, 5))
    return out


def random_sarm(c: int, k: int, rng) -> SarmParams:
    def m(*shape):
        return Tensor(rng.normal(scale=0.6, size=shape), requires_grad=True)

    return SarmParams(m(c, c), m(c, c), m(c, c), m(c, c), m(c, c), m(c, c),
                      m(2 * c, c), m(c), k=k)


def random_ccm(c: int, rng, rank: int = 1, width: int = 3) -> CcmParams:
    def m(*shape):
        return Tensor(rng.normal(scale=0.6, size=shape), requires_grad=True)

    return CcmParams(m(rank, width), m(c, c * rank), m(c * rank), m(c, c), m(c),
                     Tensor(0.7, requires_grad=True))


def sarm_suite(seed: int = 0) -> list[CaseResult]:
    rng = np.random.default_rng(seed + 1)
    out = []
    for shape, k in (((2, 3, 3), 3), ((4, 4, 4), 3), ((4, 4, 4), 1)):
        p = random_sarm(shape[0], k, rng)
        x = Tensor(rng.normal(size=shape))
        w = _weights(rng, shape)
        tensors = dict(p.tensors(), input=x)
        out.extend(check("sarm", f"{'x'.join(map(str, shape))} k={k}",
                         lambda: _probe(sarm_forward(FeatureMap(x, View.STREET), p).values, w),
                         tensors))
    p = random_sarm(4, 3, rng)
    x = Tensor(rng.normal(size=(4, 4, 4)))
    w = _weights(rng, (4, 4, 4))
    out.extend(check("sarm", "4x4x4 fixed 2:1",
                     lambda: _probe(sarm_forward(FeatureMap(x, View.STREET), p,
                                                 fusion=(2.0, 1.0)).values, w),
                     {n: t for n, t in p.tensors().items() if not n.startswith("gate")}))
    return out


def ccm_suite(seed: int = 0) -> list[CaseResult]:
    rng = np.random.default_rng(seed + 2)
    out = []
    for shape, rank in (((2, 2, 2), 1), ((4, 4, 4), 1), ((4, 4, 4), 2)):
        p = random_ccm(shape[0], rng, rank=rank, width=min(3, shape[0] - (shape[0] + 1) % 2))
        x = Tensor(rng.normal(size=shape))
        w = _weights(rng, shape)
        tensors = dict(p.tensors(), input=x)
        out.extend(check("ccm", f"{'x'.join(map(str, shape))} rank={rank}",
                         lambda: _probe(ccm_forward(FeatureMap(x, View.STREET), p).values, w),
                         tensors))
    return out


def rgam_suite(seed: int = 0) -> list[CaseResult]:
    rng = np.random.default_rng(seed + 3)
    out = []
    for shape, grid in (((4, 4, 4), GridSpec(2, 2)), ((4, 2, 8), GridSpec(1, 4))):
        x = Tensor(rng.normal(size=shape))
        w = _weights(rng, (4 * shape[0],))
        out.extend(check("rgam", f"{'x'.join(map(str, shape))} {grid.rows}x{grid.cols}",
                         lambda: _probe(build_descriptor(FeatureMap(x, View.SATELLITE), grid)
                                        .values, w), {"input": x}))
    return out


def loss_suite(seed: int = 0) -> list[CaseResult]:
    rng = np.random.default_rng(seed + 4)
    out = []
    for tau in (1.0, 0.1):
        cfg = LossConfig(tau=tau)
        q = rng.normal(size=8)
        q = Tensor(q / np.linalg.norm(q))
        refs = rng.normal(size=(4, 8))
        refs = [Tensor(r / np.linalg.norm(r)) for r in refs]
        # raw query/reference values; the check skips the unit-norm guard
        out.extend(check("loss", f"info_nce dq tau={tau}",
                         lambda: info_nce(q, refs, 2, cfg, validate=False),
                         {"query": q, **{f"ref{i}": r for i, r in enumerate(refs)}}))
        u = Tensor(rng.normal(size=8))
        out.extend(check("loss", f"info_nce via normalize tau={tau}",
                         lambda: info_nce(T.l2_normalize(u), refs, 0, cfg), {"raw_query": u}))
    for symmetric in (False, True):
        cfg = LossConfig(tau=0.2, symmetric=symmetric)
        qs = Tensor(rng.normal(size=(3, 8)))
        rs = Tensor(rng.normal(size=(3, 8)))
        out.extend(check("loss", f"batch symmetric={symmetric}",
                         lambda: info_nce_batch(T.l2_normalize(qs), T.l2_normalize(rs), cfg),
                         {"raw_queries": qs, "raw_refs": rs}))
    return out


TINY_ENCODER = EncoderConfig(channels=4, patch=2, blocks=2, k=3, ccm_kernel=3,
                             street_size=(2, 8), satellite_size=(4, 4))


def encoder_suite(seed: int = 0, cfg: EncoderConfig = TINY_ENCODER) -> list[CaseResult]:
    rng = np.random.default_rng(seed + 5)
    enc = Encoder.create(cfg, seed)
    for t in enc.params.values():
        t.assign(rng.normal(scale=0.5, size=t.shape))
    n = 3
    street = [SceneImage(rng.random((3, *cfg.street_size)), i, View.STREET) for i in range(n)]
    sat = [SceneImage(rng.random((3, *cfg.satellite_size)), i, View.SATELLITE)
           for i in range(n)]
    loss_cfg = LossConfig(tau=0.5)

    def fn():
        return info_nce_batch(enc.encode_batch(street), enc.encode_batch(sat), loss_cfg)

    return check("encoder", f"tiny C={cfg.channels}", fn, dict(enc.params))


def run_suites(names=SUITES, seed: int = 0) -> tuple[list[CaseResult], float]:
    builders = {"tensor": tensor_suite, "sarm": sarm_suite, "ccm": ccm_suite,
                "rgam": rgam_suite, "loss": loss_suite, "encoder": encoder_suite}
    start = time.perf_counter()
    results: list[CaseResult] = []
    for name in names:
        results.extend(builders[name](seed))
    return results, time.perf_counter() - start
