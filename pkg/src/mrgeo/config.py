"""Run configuration and its ``key=value`` text form.

One assignment per line, ``#`` starts a comment. Unknown keys are an error.

Encoder:   channels patch blocks k ccm_kernel ccm_rank residual sarm ccm rgam fusion
           street_size satellite_size street_grid satellite_grid
Loss:      tau symmetric
Training:  lr weight_decay beta1 beta2 eps steps batch train_scenes warmup_epochs
Eval:      test_scenes

Sizes and grids are written ``HxW`` / ``ROWSxCOLS``; booleans ``on``/``off``;
``residual`` takes one value or a comma list with one entry per block;
``fusion`` is ``adaptive`` or a ratio ``2:1``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .rgam import GridSpec

CCM_MODES = ("on", "off", "fc", "variant")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    channels: int = 32
    patch: int = 4
    blocks: int = 2
    k: int = 3
    ccm_kernel: int = 3
    # components per channel for ccm=variant; ccm=on always uses one
    ccm_rank: int = 4
    residual: tuple[bool, ...] = (True,)
    sarm: bool = True
    ccm: str = "on"
    rgam: bool = True
    fusion: str = "adaptive"
    street_size: tuple[int, int] = (16, 64)
    satellite_size: tuple[int, int] = (32, 32)
    street_grid: GridSpec = GridSpec(1, 4)
    satellite_grid: GridSpec = GridSpec(2, 2)

    def __post_init__(self):
        if self.channels < 4 or self.channels % 4:
            raise ConfigError(f"channels must be >= 4 and divisible by 4, got {self.channels}")
        if self.blocks < 1:
            raise ConfigError(f"blocks must be >= 1, got {self.blocks}")
        if self.patch < 1:
            raise ConfigError(f"patch must be >= 1, got {self.patch}")
        if self.k < 1 or self.k % 2 == 0:
            raise ConfigError(f"k must be a positive odd integer, got {self.k}")
        if self.ccm_kernel < 1 or self.ccm_kernel % 2 == 0 or self.ccm_kernel > self.channels:
            raise ConfigError(f"ccm_kernel must be odd and <= channels, got {self.ccm_kernel}")
        if self.ccm not in CCM_MODES:
            raise ConfigError(f"ccm must be one of {CCM_MODES}, got {self.ccm!r}")
        if self.ccm_rank < 1:
            raise ConfigError(f"ccm_rank must be >= 1, got {self.ccm_rank}")
        if len(self.residual) not in (1, self.blocks):
            raise ConfigError(
                f"residual needs 1 or {self.blocks} entries, got {len(self.residual)}")
        self.fusion_ratio  # validates
        for name in ("street", "satellite"):
            h, w = getattr(self, f"{name}_size")
            g = getattr(self, f"{name}_grid")
            if h % self.patch or w % self.patch:
                raise ConfigError(f"{name}_size {h}x{w} is not divisible by patch {self.patch}")
            gh, gw = h // self.patch, w // self.patch
            if self.rgam and (gh % g.rows or gw % g.cols):
                raise ConfigError(
                    f"{name} token grid {gh}x{gw} cannot be split into {g.rows}x{g.cols} regions")

    @property
    def fusion_ratio(self) -> tuple[float, float] | None:
        if self.fusion == "adaptive":
            return None
        try:
            a, b = (float(v) for v in self.fusion.split(":"))
        except ValueError:
            raise ConfigError(f"fusion must be 'adaptive' or 'A:B', got {self.fusion!r}") from None
        if a < 0 or b < 0:
            raise ConfigError(f"fusion ratios must be non-negative, got {self.fusion!r}")
        return a, b

    def residual_for(self, block: int) -> bool:
        return self.residual[0] if len(self.residual) == 1 else self.residual[block]

    @property
    def effective_ccm_rank(self) -> int:
        return self.ccm_rank if self.ccm == "variant" else 1

    @property
    def descriptor_dim(self) -> int:
        return self.channels * (self.satellite_grid.regions if self.rgam else 1)


@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.05
    symmetric: bool = False

    def __post_init__(self):
        if not self.tau > 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 3e-3
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    steps: int = 500
    batch: int = 16
    train_scenes: int = 64
    warmup_epochs: int = 1
    test_scenes: int = 32

    def __post_init__(self):
        if self.batch < 2:
            raise ConfigError("batch must hold at least 2 pairs (in-batch negatives)")
        if self.train_scenes < 2:
            raise ConfigError("need at least 2 training scenes")
        if self.steps < 0 or self.lr < 0 or self.weight_decay < 0:
            raise ConfigError("steps, lr and weight_decay must be non-negative")

    @property
    def steps_per_epoch(self) -> int:
        full, rest = divmod(self.train_scenes, min(self.batch, self.train_scenes))
        return full + (1 if rest >= 2 else 0)


@dataclass(frozen=True)
class RunConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def replace(self, **overrides) -> "RunConfig":
        return apply_overrides(self, {k: format_value(v) for k, v in overrides.items()})

    def to_dict(self) -> dict[str, str]:
        out = {}
        for section in (self.encoder, self.loss, self.train):
            for f in dataclasses.fields(section):
                out[f.name] = format_value(getattr(section, f.name))
        return out


_SECTIONS = {
    "encoder": EncoderConfig,
    "loss": LossConfig,
    "train": TrainConfig,
}
_KEY_SECTION = {f.name: name for name, cls in _SECTIONS.items() for f in dataclasses.fields(cls)}


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("on", "true", "yes", "1"):
        return True
    if t in ("off", "false", "no", "0"):
        return False
    raise ConfigError(f"expected on/off, got {text!r}")


def _parse_pair(text: str) -> tuple[int, int]:
    try:
        a, b = text.lower().split("x")
        return int(a), int(b)
    except ValueError:
        raise ConfigError(f"expected AxB, got {text!r}") from None


def _parse_value(key: str, text: str):
    text = text.strip()
    if key == "residual":
        return tuple(_parse_bool(t) for t in text.split(","))
    if key in ("sarm", "rgam", "symmetric"):
        return _parse_bool(text)
    if key in ("street_size", "satellite_size"):
        return _parse_pair(text)
    if key in ("street_grid", "satellite_grid"):
        return GridSpec(*_parse_pair(text))
    if key in ("ccm", "fusion"):
        return text
    cls = _SECTIONS[_KEY_SECTION[key]]
    kind = {f.name: f.type for f in dataclasses.fields(cls)}[key]
    try:
        return int(text) if kind == "int" else float(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {kind}") from None


def format_value(value) -> str:
    if isinstance(value, bool):
        return "on" if value else "off"
    if isinstance(value, GridSpec):
        return f"{value.rows}x{value.cols}"
    if isinstance(value, tuple) and value and isinstance(value[0], bool):
        return ",".join(format_value(v) for v in value)
    if isinstance(value, tuple):
        return "x".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def apply_overrides(base: RunConfig, pairs: dict[str, str]) -> RunConfig:
    updates: dict[str, dict] = {name: {} for name in _SECTIONS}
    for key, text in pairs.items():
        if key not in _KEY_SECTION:
            raise ConfigError(f"unknown config key {key!r}")
        updates[_KEY_SECTION[key]][key] = _parse_value(key, text)
    try:
        return RunConfig(
            encoder=dataclasses.replace(base.encoder, **updates["encoder"]),
            loss=dataclasses.replace(base.loss, **updates["loss"]),
            train=dataclasses.replace(base.train, **updates["train"]),
        )
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def parse_pairs(tokens) -> dict[str, str]:
    out = {}
    for tok in tokens:
        if "=" not in tok:
            raise ConfigError(f"expected key=value, got {tok!r}")
        key, value = tok.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    pairs = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        pairs[key.strip()] = value.strip()
    return apply_overrides(base or RunConfig(), pairs)


def load_config(path: str | Path) -> RunConfig:
    return parse_config_text(Path(path).read_text())


def format_config(cfg: RunConfig) -> str:
    return "".join(f"{k}={v}\n" for k, v in cfg.to_dict().items())
