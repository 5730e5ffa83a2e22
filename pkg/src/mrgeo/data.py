"""Synthetic street/satellite scene pairs and parametric image corruptions.

A scene is a canvas split into four quadrants. Each quadrant has a ground
colour and one or two coloured landmarks. The satellite view draws the canvas
top-down (landmarks as squares); the street view is a four-strip panorama in
which strip ``n`` shows quadrant ``n`` as a horizon: sky on top, ground below,
landmarks as vertical facades. Pixel colours are exact palette entries, so
each quadrant and its strip contain the same set of colours.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np
from scipy import ndimage

from .maps import View

GROUND_PALETTE = np.array([
    [0.35, 0.55, 0.25],  # grass
    [0.55, 0.50, 0.40],  # dirt
    [0.40, 0.40, 0.42],  # asphalt
    [0.75, 0.70, 0.55],  # sand
    [0.25, 0.35, 0.55],  # water
    [0.60, 0.30, 0.30],  # clay
])
LANDMARK_PALETTE = np.array([
    [0.95, 0.20, 0.15],
    [0.15, 0.80, 0.30],
    [0.20, 0.35, 0.95],
    [0.95, 0.85, 0.15],
    [0.85, 0.25, 0.85],
    [0.15, 0.85, 0.90],
    [0.98, 0.55, 0.10],
    [0.10, 0.10, 0.10],
])
SKY = np.array([0.70, 0.85, 1.00])

DEFAULT_STREET_SIZE = (16, 64)
DEFAULT_SATELLITE_SIZE = (32, 32)


@dataclass(frozen=True)
class SceneImage:
    pixels: np.ndarray  # (3, H, W) in [0, 1], read-only
    scene_id: int
    view: View

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.pixels.shape[0] != 3:
            raise ValueError(f"scene pixels must be (3, H, W), got {self.pixels.shape}")


@dataclass(frozen=True)
class Landmark:
    color: int  # index into LANDMARK_PALETTE
    size: int  # satellite square side / street facade width, in pixels
    slot: int  # which half of the quadrant (0 = left, 1 = right)
    offset: float  # position inside the slot, in [0, 1]
    depth: float  # satellite vertical position inside the quadrant, in [0, 1]


@dataclass(frozen=True)
class SceneLayout:
    grounds: tuple[int, ...]  # per quadrant, row-major
    landmarks: tuple[tuple[Landmark, ...], ...]


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    arr.flags.writeable = False
    return arr


def scene_layout(seed: int, scene_id: int) -> SceneLayout:
    rng = np.random.default_rng(np.random.SeedSequence([seed, scene_id, 0x5CE4E]))
    grounds = tuple(int(g) for g in rng.choice(len(GROUND_PALETTE), size=4, replace=False))
    quads = []
    for _ in range(4):
        count = int(rng.integers(1, 3))
        slots = rng.permutation(2)[:count]
        colors = rng.choice(len(LANDMARK_PALETTE), size=count, replace=False)
        quads.append(tuple(
            Landmark(int(c), int(rng.integers(3, 7)), int(s), float(rng.random()),
                     float(rng.random()))
            for c, s in zip(colors, slots)))
    return SceneLayout(grounds, tuple(quads))


def _paint(canvas: np.ndarray, color: np.ndarray, rows: slice, cols: slice) -> None:
    canvas[:, rows, cols] = color[:, None, None]


def render_satellite(layout: SceneLayout, size=DEFAULT_SATELLITE_SIZE) -> np.ndarray:
    h, w = size
    qh, qw = h // 2, w // 2
    img = np.empty((3, h, w))
    for q in range(4):
        top, left = (q // 2) * qh, (q % 2) * qw
        _paint(img, GROUND_PALETTE[layout.grounds[q]], slice(top, top + qh), slice(left, left + qw))
        half = qw // 2
        for lm in layout.landmarks[q]:
            s = min(lm.size, half, qh)
            x0 = left + lm.slot * half + int(round(lm.offset * (half - s)))
            y0 = top + int(round(lm.depth * (qh - s)))
            _paint(img, LANDMARK_PALETTE[lm.color], slice(y0, y0 + s), slice(x0, x0 + s))
    return img


def render_street(layout: SceneLayout, size=DEFAULT_STREET_SIZE) -> np.ndarray:
    h, w = size
    sw = w // 4
    horizon = max(1, h * 3 // 8)
    img = np.empty((3, h, w))
    for q in range(4):
        left = q * sw
        _paint(img, SKY, slice(0, horizon), slice(left, left + sw))
        _paint(img, GROUND_PALETTE[layout.grounds[q]], slice(horizon, h), slice(left, left + sw))
        half = sw // 2
        for lm in layout.landmarks[q]:
            s = min(lm.size, half)
            x0 = left + lm.slot * half + int(round(lm.offset * (half - s)))
            # taller facades for bigger footprints; keep a sky line above and ground below
            top = max(1, horizon - 2 * s + 2)
            bottom = h - 1 if h > horizon + 1 else h
            _paint(img, LANDMARK_PALETTE[lm.color], slice(top, bottom), slice(x0, x0 + s))
    return img


def generate_pair(seed: int, scene_id: int, street_size=DEFAULT_STREET_SIZE,
                  satellite_size=DEFAULT_SATELLITE_SIZE) -> tuple[SceneImage, SceneImage]:
    sh, sw = street_size
    th, tw = satellite_size
    if sw % 4 or th % 2 or tw % 2:
        raise ValueError("street width must divide into 4 strips and satellite into 2x2 quadrants")
    layout = scene_layout(seed, scene_id)
    street = SceneImage(_frozen(render_street(layout, street_size)), scene_id, View.STREET)
    sat = SceneImage(_frozen(render_satellite(layout, satellite_size)), scene_id, View.SATELLITE)
    return street, sat


def generate_pairs(seed: int, scene_ids, street_size=DEFAULT_STREET_SIZE,
                   satellite_size=DEFAULT_SATELLITE_SIZE):
    pairs = [generate_pair(seed, i, street_size, satellite_size) for i in scene_ids]
    return [p[0] for p in pairs], [p[1] for p in pairs]


# ---------------------------------------------------------------------------
# corruptions
# ---------------------------------------------------------------------------

class CorruptionKind(str, Enum):
    GAUSSIAN_NOISE = "gaussian_noise"
    DEFOCUS_BLUR = "defocus_blur"
    MOTION_BLUR = "motion_blur"
    ZOOM_BLUR = "zoom_blur"
    FOG = "fog"
    BRIGHTNESS = "brightness"
    CONTRAST = "contrast"
    PIXELATE = "pixelate"


ALL_KINDS = tuple(CorruptionKind)

SEVERITY_TABLE: dict[CorruptionKind, tuple[float, ...]] = {
    CorruptionKind.GAUSSIAN_NOISE: (0.04, 0.08, 0.12, 0.18, 0.26),
    CorruptionKind.DEFOCUS_BLUR: (1, 2, 3, 4, 6),
    CorruptionKind.MOTION_BLUR: (3, 5, 7, 9, 13),
    CorruptionKind.ZOOM_BLUR: (2, 3, 4, 5, 7),
    CorruptionKind.FOG: (0.15, 0.30, 0.45, 0.60, 0.75),
    CorruptionKind.BRIGHTNESS: (0.1, 0.2, 0.3, 0.4, 0.5),
    CorruptionKind.CONTRAST: (0.75, 0.60, 0.45, 0.30, 0.15),
    CorruptionKind.PIXELATE: (2, 3, 4, 6, 8),
}

# zoom step between successive rescaled copies
ZOOM_STEP = 0.06


@dataclass(frozen=True)
class CorruptionSpec:
    kind: CorruptionKind
    severity: int

    def __post_init__(self):
        try:
            object.__setattr__(self, "kind", CorruptionKind(self.kind))
        except ValueError:
            raise ValueError(f"unknown corruption kind {self.kind!r}") from None
        if not isinstance(self.severity, (int, np.integer)) or not 1 <= self.severity <= 5:
            raise ValueError(f"severity must be an integer in 1..5, got {self.severity!r}")

    @property
    def tag(self) -> str:
        return f"{self.kind.value}_{self.severity}"


def gaussian_noise(x: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    return x + rng.normal(0.0, sigma, size=x.shape)


def disk_kernel(radius: int) -> np.ndarray:
    r = int(radius)
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    k = (xx * xx + yy * yy <= r * r).astype(np.float64)
    return k / k.sum()


def defocus_blur(x: np.ndarray, radius: int) -> np.ndarray:
    k = disk_kernel(radius)
    return np.stack([ndimage.convolve(ch, k, mode="nearest") for ch in x])


def motion_blur(x: np.ndarray, length: int) -> np.ndarray:
    return ndimage.uniform_filter1d(x, size=int(length), axis=-1, mode="nearest")


def zoom_blur(x: np.ndarray, copies: int) -> np.ndarray:
    _, h, w = x.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    acc = np.zeros_like(x)
    for j in range(int(copies)):
        z = 1.0 + ZOOM_STEP * j
        coords = np.stack([cy + (yy - cy) / z, cx + (xx - cx) / z])
        acc += np.stack([ndimage.map_coordinates(ch, coords, order=1, mode="nearest")
                         for ch in x])
    return acc / int(copies)


def fog(x: np.ndarray, weight: float) -> np.ndarray:
    _, h, _ = x.shape
    ramp = np.linspace(0.85, 0.55, h)[None, :, None]
    return (1.0 - weight) * x + weight * ramp


def brightness(x: np.ndarray, shift: float) -> np.ndarray:
    return x + shift


def contrast(x: np.ndarray, scale: float) -> np.ndarray:
    m = x.mean(axis=(1, 2), keepdims=True)
    return m + (x - m) * scale


def pixelate(x: np.ndarray, factor: int, rng: np.random.Generator | None = None) -> np.ndarray:
    """Average over f x f blocks and upsample nearest; partial blocks at the borders.

    With ``rng`` the block grid is shifted by a random phase in [0, f) per axis.
    The synthetic scenes are aligned to power-of-two edges, and a fixed grid
    would let some factors line up with those edges and distort less than a
    smaller factor. An axis no longer than ``f`` is always a single block.
    """
    f = int(factor)
    _, h, w = x.shape
    phase = [0, 0] if rng is None else [int(v) for v in rng.integers(0, f, size=2)]
    if f >= h:
        phase[0] = 0
    if f >= w:
        phase[1] = 0
    rows = (np.arange(h) + phase[0]) // f
    cols = (np.arange(w) + phase[1]) // f
    out = np.empty_like(x)
    for a in np.unique(rows):
        ri = rows == a
        for b in np.unique(cols):
            cell = np.ix_(ri, cols == b)
            out[:, cell[0], cell[1]] = x[:, cell[0], cell[1]].mean(axis=(1, 2), keepdims=True)
    return out


def corruption_rng(seed: int, scene_id: int, spec: CorruptionSpec) -> np.random.Generator:
    kind_index = ALL_KINDS.index(spec.kind)
    return np.random.default_rng(
        np.random.SeedSequence([seed, scene_id, kind_index, int(spec.severity)]))


def corrupt_pixels(x: np.ndarray, spec: CorruptionSpec, rng: np.random.Generator,
                   table: dict | None = None) -> np.ndarray:
    level = (table or SEVERITY_TABLE)[spec.kind][spec.severity - 1]
    kind = spec.kind
    if kind is CorruptionKind.GAUSSIAN_NOISE:
        out = gaussian_noise(x, level, rng)
    elif kind is CorruptionKind.DEFOCUS_BLUR:
        out = defocus_blur(x, level)
    elif kind is CorruptionKind.MOTION_BLUR:
        out = motion_blur(x, level)
    elif kind is CorruptionKind.ZOOM_BLUR:
        out = zoom_blur(x, level)
    elif kind is CorruptionKind.FOG:
        out = fog(x, level)
    elif kind is CorruptionKind.BRIGHTNESS:
        out = brightness(x, level)
    elif kind is CorruptionKind.CONTRAST:
        out = contrast(x, level)
    else:
        out = pixelate(x, level, rng)
    return np.clip(out, 0.0, 1.0)


def apply_corruption(img: SceneImage, spec: CorruptionSpec, seed: int,
                     table: dict | None = None) -> SceneImage:
    rng = corruption_rng(seed, img.scene_id, spec)
    pixels = corrupt_pixels(np.asarray(img.pixels), spec, rng, table)
    return SceneImage(_frozen(pixels), img.scene_id, img.view)


def parse_kinds(text: str) -> list[CorruptionKind]:
    if text.strip() in ("", "none"):
        return []
    if text.strip() == "all":
        return list(ALL_KINDS)
    return [CorruptionSpec(k.strip(), 1).kind for k in text.split(",") if k.strip()]


def parse_severities(text: str) -> list[int]:
    out: list[int] = []
    for part in text.split(","):
        part = part.strip()
        if "-" in part:
            lo, hi = (int(v) for v in part.split("-"))
            out.extend(range(lo, hi + 1))
        elif part:
            out.append(int(part))
    for s in out:
        if not 1 <= s <= 5:
            raise ValueError(f"severity {s} outside 1..5")
    return sorted(set(out))


# ---------------------------------------------------------------------------
# binary PPM dump
# ---------------------------------------------------------------------------

def to_ppm_bytes(pixels: np.ndarray) -> bytes:
    _, h, w = pixels.shape
    rgb = np.clip(np.rint(np.asarray(pixels) * 255.0), 0, 255).astype(np.uint8)
    return f"P6\n{w} {h}\n255\n".encode("ascii") + rgb.transpose(1, 2, 0).tobytes()


def read_ppm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        fields.append(raw[pos:end])
        pos = end
    pos += 1  # single whitespace byte after maxval
    if fields[0] != b"P6" or int(fields[3]) != 255:
        raise ValueError(f"{path}: not an 8-bit P6 pixmap")
    w, h = int(fields[1]), int(fields[2])
    body = np.frombuffer(raw[pos:pos + 3 * w * h], dtype=np.uint8).reshape(h, w, 3)
    return body.transpose(2, 0, 1).astype(np.float64) / 255.0


def ppm_name(split: str, scene_id: int, view: View | str,
             spec: CorruptionSpec | None = None) -> str:
    base = f"{split}_{scene_id}_{View(view).value}"
    if spec is not None:
        base += f"_{spec.kind.value}_{spec.severity}"
    return base + ".ppm"


def write_ppm(path: str | Path, img: SceneImage) -> None:
    Path(path).write_bytes(to_ppm_bytes(img.pixels))

