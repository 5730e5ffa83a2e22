"""Exhaustive L2 retrieval, R@K, and the corruption-robustness report."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import (
    CorruptionKind,
    CorruptionSpec,
    SceneImage,
    apply_corruption,
    generate_pairs,
)
from .encoder import Encoder
from .rgam import Descriptor

TOP_PERCENT = "1%"
DEFAULT_KS = (1, 5, 10, TOP_PERCENT)


def _matrix(x) -> np.ndarray:
    if isinstance(x, Descriptor):
        x = x.values
    if isinstance(x, T.Tensor):
        x = x.data
    if isinstance(x, (list, tuple)) and x and isinstance(x[0], Descriptor):
        x = np.stack([d.values.data for d in x])
    arr = np.asarray(x, dtype=np.float64)
    return arr.reshape(1, -1) if arr.ndim == 1 else arr


def resolve_k(k, n_refs: int) -> int:
    """Integer K, or the top-1% cut ``ceil(0.01 * n_refs)`` floored at 1."""
    if k == TOP_PERCENT:
        return max(1, math.ceil(0.01 * n_refs))
    k = int(k)
    if k < 1:
        raise ValueError(f"K must be >= 1, got {k}")
    return k


@dataclass
class RetrievalResult:
    rankings: np.ndarray  # (Q, R) reference indices, nearest first
    gt: np.ndarray  # (Q,)
    gt_rank: np.ndarray  # (Q,) zero-based position of the ground truth
    hits: dict = field(default_factory=dict)  # K label -> (Q,) bool

    def recall(self, k) -> float:
        return float(self.hits[k].mean())


def pairwise_distances(queries: np.ndarray, refs: np.ndarray) -> np.ndarray:
    diff = queries[:, None, :] - refs[None, :, :]
    return np.sqrt((diff * diff).sum(axis=-1))


def retrieve(queries, refs, gt: Sequence[int], ks=DEFAULT_KS) -> RetrievalResult:
    """Rank references by ascending L2 distance; ties go to the lower index."""
    q, r = _matrix(queries), _matrix(refs)
    gt = np.asarray(gt, dtype=np.int64)
    if len(q) < 1:
        raise ValueError("need at least one query")
    if gt.shape != (len(q),):
        raise ValueError(f"need one ground-truth index per query, got {gt.shape} for {len(q)}")
    if np.any(gt < 0) or np.any(gt >= len(r)):
        raise IndexError(f"ground-truth index out of range for {len(r)} references")
    d = pairwise_distances(q, r)
    rankings = np.argsort(d, axis=1, kind="stable")
    gt_rank = np.argmax(rankings == gt[:, None], axis=1)
    hits = {k: gt_rank < resolve_k(k, len(r)) for k in ks}
    return RetrievalResult(rankings, gt, gt_rank, hits)


def recall_at_k(queries, refs, gt: Sequence[int], k) -> float:
    return retrieve(queries, refs, gt, ks=(k,)).recall(k)


# ---------------------------------------------------------------------------
# robustness protocol
# ---------------------------------------------------------------------------

@dataclass
class RobustnessReport:
    clean: dict  # K label -> rate
    per_severity: dict = field(default_factory=dict)  # (kind, severity) -> R@1
    per_kind: dict = field(default_factory=dict)  # kind -> mean R@1 over severities
    r1_cor: float | None = None

    @classmethod
    def assemble(cls, clean: dict, per_severity: dict) -> "RobustnessReport":
        kinds: dict[str, list[float]] = {}
        for (kind, _sev), value in per_severity.items():
            kinds.setdefault(kind, []).append(value)
        per_kind = {k: float(np.mean(v)) for k, v in kinds.items()}
        r1_cor = float(np.mean(list(per_kind.values()))) if per_kind else None
        return cls(dict(clean), dict(per_severity), per_kind, r1_cor)

    def records(self) -> list[dict]:
        out = [{"kind": "clean", "severity": 0, "K": str(k), "value": v}
               for k, v in self.clean.items()]
        for (kind, sev), v in self.per_severity.items():
            out.append({"kind": kind, "severity": sev, "K": "1", "value": v})
        for kind, v in self.per_kind.items():
            out.append({"kind": kind, "severity": "mean", "K": "1", "value": v})
        if self.r1_cor is not None:
            out.append({"kind": "R@1_cor", "severity": "mean", "K": "1", "value": self.r1_cor})
        return out

    def to_jsonl(self) -> str:
        return "".join(json.dumps(rec, sort_keys=True) + "\n" for rec in self.records())

    def format_table(self) -> str:
        lines = ["clean  " + "  ".join(f"R@{k}={v * 100:6.2f}" for k, v in self.clean.items())]
        if self.per_kind:
            sevs = sorted({s for _, s in self.per_severity})
            head = f"{'corruption':<16}" + "".join(f"  s{s:<5}" for s in sevs) + "    mean"
            lines += ["", head, "-" * len(head)]
            for kind, mean in self.per_kind.items():
                cells = "".join(f"  {self.per_severity[(kind, s)] * 100:6.2f}" for s in sevs)
                lines.append(f"{kind:<16}{cells}  {mean * 100:6.2f}")
            lines.append(f"{'R@1_cor':<16}" + " " * (8 * len(sevs)) + f"  {self.r1_cor * 100:6.2f}")
        return "\n".join(lines)


def encode_all(encoder: Encoder, images: Sequence[SceneImage], chunk: int = 64) -> np.ndarray:
    out = []
    with T.no_grad():
        for i in range(0, len(images), chunk):
            out.append(encoder.encode_batch(images[i:i + chunk]).values.data)
    return np.concatenate(out, axis=0)


def evaluate_robustness(encoder: Encoder, scene_ids: Sequence[int], data_seed: int,
                        kinds: Sequence[CorruptionKind | str] = (),
                        severities: Sequence[int] = (1, 2, 3, 4, 5),
                        corruption_seed: int | None = None,
                        ks=DEFAULT_KS) -> RobustnessReport:
    """Clean R@K plus corrupted-query R@1 per (kind, severity); satellites stay clean."""
    cfg = encoder.cfg
    street, sat = generate_pairs(data_seed, scene_ids, cfg.street_size, cfg.satellite_size)
    refs = encode_all(encoder, sat)
    gt = np.arange(len(scene_ids))
    clean = retrieve(encode_all(encoder, street), refs, gt, ks)
    clean_rates = {str(k): clean.recall(k) for k in ks}
    seed = data_seed if corruption_seed is None else corruption_seed
    per_severity = {}
    for kind in kinds:
        for sev in severities:
            spec = CorruptionSpec(kind, sev)
            corrupted = [apply_corruption(im, spec, seed) for im in street]
            res = retrieve(encode_all(encoder, corrupted), refs, gt, ks=(1,))
            per_severity[(spec.kind.value, sev)] = res.recall(1)
    return RobustnessReport.assemble(clean_rates, per_severity)


def held_out_ids(train_scenes: int, test_scenes: int) -> range:
    return range(train_scenes, train_scenes + test_scenes)


def evaluate_run(encoder: Encoder, cfg, seed: int, kinds=(), severities=(1, 2, 3, 4, 5),
                 ks=DEFAULT_KS) -> RobustnessReport:
    """Robustness report on the held-out scenes that follow the training ids."""
    ids = held_out_ids(cfg.train.train_scenes, cfg.train.test_scenes)
    return evaluate_robustness(encoder, ids, seed, kinds, severities, ks=ks)
