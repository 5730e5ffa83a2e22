"""Train-and-evaluate a matrix of configuration variants.

Matrix file, one variant per line::

    # shared settings; seeds/corruptions/severities are run-level keys
    *         seeds=0,1,2 corruptions=all severities=1-5 steps=300
    full
    baseline  sarm=off ccm=off rgam=off
    no_rgam   rgam=off
    fixed_2_1 fusion=2:1

Every variant is trained from the same seeds. A variant that fails to
configure or train is reported with its error and the rest still run.
"""

from __future__ import annotations

import logging
import shlex
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, apply_overrides, parse_pairs
from .data import ALL_KINDS, parse_kinds, parse_severities
from .evaluation import RobustnessReport, evaluate_run
from .objective import train

log = logging.getLogger(__name__)

RUN_KEYS = ("seeds", "corruptions", "severities")


@dataclass
class Variant:
    name: str
    overrides: dict[str, str]


@dataclass
class AblationMatrix:
    variants: list[Variant]
    defaults: dict[str, str] = field(default_factory=dict)
    seeds: tuple[int, ...] = (0,)
    kinds: tuple = ALL_KINDS
    severities: tuple[int, ...] = (1, 2, 3, 4, 5)


def parse_matrix(text: str) -> AblationMatrix:
    defaults: dict[str, str] = {}
    variants: list[Variant] = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        name, *rest = shlex.split(line)
        try:
            pairs = parse_pairs(rest)
        except ConfigError as exc:
            raise ConfigError(f"line {lineno}: {exc}") from exc
        if name == "*":
            defaults.update(pairs)
        elif any(v.name == name for v in variants):
            raise ConfigError(f"line {lineno}: duplicate variant {name!r}")
        else:
            variants.append(Variant(name, pairs))
    if not variants:
        raise ConfigError("ablation matrix lists no variants")
    run = {k: defaults.pop(k) for k in RUN_KEYS if k in defaults}
    matrix = AblationMatrix(variants, defaults)
    if "seeds" in run:
        matrix.seeds = tuple(int(s) for s in run["seeds"].split(","))
    if "corruptions" in run:
        matrix.kinds = tuple(parse_kinds(run["corruptions"]))
    if "severities" in run:
        matrix.severities = tuple(parse_severities(run["severities"]))
    return matrix


def load_matrix(path: str | Path) -> AblationMatrix:
    return parse_matrix(Path(path).read_text())


@dataclass
class AblationRow:
    variant: str
    seed: int
    report: RobustnessReport | None = None
    error: str | None = None

    @property
    def clean_r1(self) -> float | None:
        return None if self.report is None else self.report.clean["1"]

    @property
    def r1_cor(self) -> float | None:
        return None if self.report is None else self.report.r1_cor


@dataclass
class AblationReport:
    rows: list[AblationRow]

    def for_variant(self, name: str) -> list[AblationRow]:
        return [r for r in self.rows if r.variant == name]

    def mean(self, name: str, metric: str) -> float | None:
        vals = [getattr(r, metric) for r in self.for_variant(name)]
        if not vals or any(v is None for v in vals):
            return None
        return float(np.mean(vals))

    @property
    def failed(self) -> bool:
        return any(r.error for r in self.rows)

    def format_table(self) -> str:
        def pct(v):
            return "     -" if v is None else f"{v * 100:6.2f}"

        head = f"{'variant':<16}{'seed':>6}  {'R@1':>6}  {'R@1_cor':>7}"
        lines = [head, "-" * len(head)]
        names = list(dict.fromkeys(r.variant for r in self.rows))
        for name in names:
            rows = self.for_variant(name)
            for r in rows:
                tail = f"  error: {r.error}" if r.error else ""
                lines.append(f"{name:<16}{r.seed:>6}  {pct(r.clean_r1)}  {pct(r.r1_cor):>7}{tail}")
            if len(rows) > 1:
                lines.append(f"{name:<16}{'mean':>6}  {pct(self.mean(name, 'clean_r1'))}  "
                             f"{pct(self.mean(name, 'r1_cor')):>7}")
        return "\n".join(lines)


def run_variant(cfg: RunConfig, seed: int, kinds, severities) -> RobustnessReport:
    result = train(cfg, seed)
    return evaluate_run(result.encoder, cfg, seed, kinds, severities)


def run_ablation(matrix: AblationMatrix, base: RunConfig | None = None) -> AblationReport:
    base = base or RunConfig()
    rows = []
    for variant in matrix.variants:
        try:
            cfg = apply_overrides(base, {**matrix.defaults, **variant.overrides})
        except ConfigError as exc:
            rows.extend(AblationRow(variant.name, s, error=str(exc)) for s in matrix.seeds)
            continue
        for seed in matrix.seeds:
            log.info("ablation: %s seed %d", variant.name, seed)
            try:
                report = run_variant(cfg, seed, matrix.kinds, matrix.severities)
            except (ValueError, FloatingPointError) as exc:
                rows.append(AblationRow(variant.name, seed, error=f"{type(exc).__name__}: {exc}"))
                continue
            rows.append(AblationRow(variant.name, seed, report))
    return AblationReport(rows)
