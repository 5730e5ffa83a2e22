"""Contrastive objective, AdamW with cosine decay, and the training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .config import LossConfig, RunConfig
from .data import SceneImage, generate_pairs
from .encoder import Encoder
from .rgam import Descriptor
from .tensor import Tensor

log = logging.getLogger(__name__)

NORM_TOLERANCE = 1e-6


class NormalizationError(ValueError):
    pass


def _check_normalized(values: Tensor, what: str) -> None:
    norms = np.linalg.norm(values.data, axis=-1)
    worst = float(np.max(np.abs(norms - 1.0)))
    if worst > NORM_TOLERANCE:
        raise NormalizationError(f"{what} must be L2-normalized (max |norm-1| = {worst:.3g})")


def _values(d) -> Tensor:
    return d.values if isinstance(d, Descriptor) else T.as_tensor(d)


def info_nce(q, refs: Sequence, positive_index: int, cfg: LossConfig = LossConfig(),
             validate: bool = True) -> Tensor:
    """-log softmax(q . r / tau)[positive] over one positive and K negatives.

    ``validate=False`` skips the unit-norm guard; finite-difference checks need it
    because a perturbed query is no longer exactly normalized.
    """
    if not refs:
        raise ValueError("info_nce needs at least one reference")
    qv = _values(q)
    if qv.ndim != 1:
        raise ValueError(f"info_nce expects a single query vector, got shape {qv.shape}")
    rows = [_values(r) for r in refs]
    if not 0 <= positive_index < len(rows):
        raise IndexError(f"positive index {positive_index} outside {len(rows)} references")
    r = T.concat([T.reshape(t, (1, t.shape[-1])) for t in rows], axis=0)
    if validate:
        _check_normalized(qv, "query")
        _check_normalized(r, "references")
    logits = T.mul(T.reshape(T.matmul(r, T.reshape(qv, (qv.shape[0], 1))), (len(rows),)),
                   1.0 / cfg.tau)
    return T.sub(T.logsumexp_rows(logits), T.select(logits, positive_index))


def info_nce_batch(queries, refs, cfg: LossConfig = LossConfig()) -> Tensor:
    """Mean loss over a batch where row i of ``refs`` is query i's positive."""
    qv, rv = _values(queries), _values(refs)
    if qv.shape != rv.shape or qv.ndim != 2:
        raise ValueError(f"batch loss needs matching (B, D) inputs, got {qv.shape}, {rv.shape}")
    _check_normalized(qv, "queries")
    _check_normalized(rv, "references")
    b = qv.shape[0]
    logits = T.mul(T.matmul(qv, T.transpose(rv)), 1.0 / cfg.tau)
    eye = Tensor(np.eye(b))
    positive = T.sum_(T.mul(logits, eye), axis=-1)
    loss = T.mean(T.sub(T.logsumexp_rows(logits), positive))
    if cfg.symmetric:
        back = T.mean(T.sub(T.logsumexp_rows(T.transpose(logits)), positive))
        loss = T.mul(T.add(loss, back), 0.5)
    return loss


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------

def cosine_lr(step: int, total: int, warmup: int, base: float) -> float:
    """Linear warm-up over ``warmup`` steps, then cosine decay to zero at ``total``."""
    if warmup > 0 and step < warmup:
        return base * (step + 1) / warmup
    span = max(1, total - warmup)
    progress = min(1.0, (step - warmup) / span)
    return base * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class AdamW:
    params: dict[str, Tensor]
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros(p.shape)
            m = b1 * self.m.get(name, 0.0) + (1.0 - b1) * g
            v = b2 * self.v.get(name, 0.0) + (1.0 - b2) * g * g
            self.m[name], self.v[name] = m, v
            if lr == 0.0:
                continue
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.assign(p.data - lr * (update + self.weight_decay * p.data))


def train_step(street: Sequence[SceneImage], satellite: Sequence[SceneImage], encoder: Encoder,
               opt: AdamW, loss_cfg: LossConfig, lr: float) -> float:
    if len(street) < 2 or len(street) != len(satellite):
        raise ValueError(f"train_step needs >= 2 matched pairs, got {len(street)}/{len(satellite)}")
    opt.zero_grad()
    q = encoder.encode_batch(street)
    r = encoder.encode_batch(satellite)
    loss = info_nce_batch(q, r, loss_cfg)
    T.backward(loss)
    opt.step(lr)
    return loss.item()


def epoch_batches(seed: int, epoch: int, n: int, batch: int) -> list[np.ndarray]:
    rng = np.random.default_rng(np.random.SeedSequence([seed, epoch, 0xBA7C4]))
    order = rng.permutation(n)
    size = min(batch, n)
    chunks = [order[i:i + size] for i in range(0, n, size)]
    return [c for c in chunks if len(c) >= 2]


@dataclass
class TrainResult:
    encoder: Encoder
    losses: list[float]
    optimizer: AdamW


def train(cfg: RunConfig, seed: int, encoder: Encoder | None = None) -> TrainResult:
    tc = cfg.train
    enc = encoder or Encoder.create(cfg.encoder, seed)
    street, sat = generate_pairs(seed, range(tc.train_scenes), cfg.encoder.street_size,
                                 cfg.encoder.satellite_size)
    opt = AdamW(enc.params, tc.beta1, tc.beta2, tc.eps, tc.weight_decay)
    warmup = tc.warmup_epochs * tc.steps_per_epoch
    losses: list[float] = []
    step, epoch = 0, 0
    while step < tc.steps:
        for idx in epoch_batches(seed, epoch, tc.train_scenes, tc.batch):
            if step >= tc.steps:
                break
            lr = cosine_lr(step, tc.steps, warmup, tc.lr)
            loss = train_step([street[i] for i in idx], [sat[i] for i in idx], enc, opt,
                              cfg.loss, lr)
            losses.append(loss)
            step += 1
        log.debug("epoch %d done, step %d, loss %.4f", epoch, step, losses[-1] if losses else 0)
        epoch += 1
    return TrainResult(enc, losses, opt)
