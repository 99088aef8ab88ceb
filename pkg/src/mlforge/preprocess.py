"""Six-step image pre-processing on in-memory raster arrays.

Steps, in order: random area/aspect crop, bilinear resize to a square,
horizontal flip (p=0.5), rotation (p=0.25, degrees uniform in [-45, 45]),
per-channel color shift (p=0.5), then linear rescale of [0, 255] pixel
values to [-1, 1]. Every random decision is drawn from a caller-supplied
generator, so identical seeds replay byte-identical outputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError

_MOD = "preprocess"

# Bounded rejection sampling for the crop box; past this we fall back to the
# full-image box.
CROP_ATTEMPTS = 10


@dataclass
class Raster:
    """H x W x 3 pixel array. Input semantics [0,255]; output [-1,1]."""

    pixels: np.ndarray

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=float)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise DataError(_MOD, "bad-dims", f"raster must be HxWx3, got {self.pixels.shape}")
        if self.pixels.shape[0] < 1 or self.pixels.shape[1] < 1:
            raise DataError(_MOD, "bad-dims", "raster needs positive height and width")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class PreprocessConfig:
    area_range: tuple[float, float] = (0.05, 1.0)
    aspect_range: tuple[float, float] = (3 / 4, 4 / 3)
    out_size: int = 224
    flip_prob: float = 0.5
    rotate_prob: float = 0.25
    rotate_range: tuple[float, float] = (-45.0, 45.0)
    color_prob: float = 0.5
    # +-10% of the [0,255] range, clamped after the shift
    color_shift_limit: float = 25.5
    seed: int = 0

    def __post_init__(self):
        for name in ("area_range", "aspect_range", "rotate_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise DataError(_MOD, "bad-dims", f"{name} not ordered: ({lo}, {hi})")
        for name in ("flip_prob", "rotate_prob", "color_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise DataError(_MOD, "bad-dims", f"{name}={p} outside [0,1]")


@dataclass(frozen=True)
class AugmentPlan:
    """The random decisions of one pre-processing pass, replayable."""

    box: tuple[int, int, int, int]  # (x, y, bh, bw)
    flip: bool
    rotate_degrees: float | None
    color_shift: tuple[float, float, float] | None


def sample_crop(
    h: int, w: int, config: PreprocessConfig, rng: np.random.Generator
) -> tuple[int, int, int, int]:
    """Sample a crop box (x, y, bh, bw) honoring area and aspect ranges.

    Rejection sampling for a bounded number of attempts, then the full-image
    box as fallback, so the call always succeeds.
    """
    if h < 1 or w < 1:
        raise DataError(_MOD, "bad-dims", f"image dims {h}x{w}")
    area = h * w
    a_lo, a_hi = config.area_range
    r_lo, r_hi = config.aspect_range
    for _ in range(CROP_ATTEMPTS):
        target_area = rng.uniform(a_lo, a_hi) * area
        aspect = rng.uniform(r_lo, r_hi)  # bw / bh
        bh = int(round(np.sqrt(target_area / aspect)))
        bw = int(round(np.sqrt(target_area * aspect)))
        if bh < 1 or bw < 1 or bh > h or bw > w:
            continue
        if not a_lo <= (bh * bw) / area <= a_hi:
            continue
        if not r_lo <= bw / bh <= r_hi:
            continue
        x = int(rng.integers(0, w - bw + 1))
        y = int(rng.integers(0, h - bh + 1))
        return (x, y, bh, bw)
    return (0, 0, h, w)


def resize_bilinear(img: Raster, out_h: int, out_w: int) -> Raster:
    """Bilinear resize with half-pixel centers and edge clamping."""
    if out_h < 1 or out_w < 1:
        raise DataError(_MOD, "bad-dims", f"output dims {out_h}x{out_w}")
    src = img.pixels
    h, w = img.height, img.width
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    return Raster(_sample_bilinear(src, ys[:, None].repeat(out_w, 1), xs[None, :].repeat(out_h, 0)))


def _sample_bilinear(src: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Sample src at fractional (y, x) grids, clamping to the edge."""
    h, w = src.shape[0], src.shape[1]
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    wy = ys - y0
    wx = xs - x0
    y0c = np.clip(y0, 0, h - 1)
    y1c = np.clip(y0 + 1, 0, h - 1)
    x0c = np.clip(x0, 0, w - 1)
    x1c = np.clip(x0 + 1, 0, w - 1)
    top = src[y0c, x0c] * (1 - wx)[..., None] + src[y0c, x1c] * wx[..., None]
    bot = src[y1c, x0c] * (1 - wx)[..., None] + src[y1c, x1c] * wx[..., None]
    return top * (1 - wy)[..., None] + bot * wy[..., None]


def flip_horizontal(img: Raster) -> Raster:
    return Raster(img.pixels[:, ::-1].copy())


def rotate_bilinear(img: Raster, degrees: float) -> Raster:
    """Rotate about the image center, edge-clamping out-of-bounds samples."""
    h, w = img.height, img.width
    theta = np.deg2rad(degrees)
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h, dtype=float), np.arange(w, dtype=float), indexing="ij")
    dy, dx = yy - cy, xx - cx
    # inverse rotation: where did this output pixel come from
    src_y = cy + cos_t * dy + sin_t * dx
    src_x = cx - sin_t * dy + cos_t * dx
    return Raster(_sample_bilinear(img.pixels, src_y, src_x))


def shift_color(img: Raster, shift: tuple[float, float, float]) -> Raster:
    out = img.pixels + np.asarray(shift, dtype=float)[None, None, :]
    return Raster(np.clip(out, 0.0, 255.0))


def rescale_unit(img: Raster) -> Raster:
    """Linear map [0,255] -> [-1,1]."""
    return Raster(img.pixels / 127.5 - 1.0)


def sample_augment_plan(
    h: int, w: int, config: PreprocessConfig, rng: np.random.Generator
) -> AugmentPlan:
    """Draw every random decision for one image, in a fixed order."""
    box = sample_crop(h, w, config, rng)
    flip = bool(rng.random() < config.flip_prob)
    rotate = None
    if rng.random() < config.rotate_prob:
        rotate = float(rng.uniform(config.rotate_range[0], config.rotate_range[1]))
    color = None
    if rng.random() < config.color_prob:
        lim = config.color_shift_limit
        color = tuple(float(v) for v in rng.uniform(-lim, lim, size=3))
    return AugmentPlan(box=box, flip=flip, rotate_degrees=rotate, color_shift=color)


def apply_plan(img: Raster, plan: AugmentPlan, config: PreprocessConfig) -> Raster:
    """Run the deterministic pipeline for an already-sampled plan."""
    x, y, bh, bw = plan.box
    out = Raster(img.pixels[y : y + bh, x : x + bw].copy())
    out = resize_bilinear(out, config.out_size, config.out_size)
    if plan.flip:
        out = flip_horizontal(out)
    if plan.rotate_degrees is not None:
        out = rotate_bilinear(out, plan.rotate_degrees)
    if plan.color_shift is not None:
        out = shift_color(out, plan.color_shift)
    return rescale_unit(out)


def preprocess_image(
    img: Raster, config: PreprocessConfig, rng: np.random.Generator
) -> Raster:
    """All six steps; input pixels must lie in [0,255]."""
    lo, hi = float(img.pixels.min()), float(img.pixels.max())
    if lo < 0.0 or hi > 255.0:
        raise DataError(_MOD, "pixel-range", f"input pixels outside [0,255]: [{lo}, {hi}]")
    plan = sample_augment_plan(img.height, img.width, config, rng)
    return apply_plan(img, plan, config)


def read_raster(path) -> Raster:
    """Header ``H W C`` then whitespace-separated pixel values (row-major)."""
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().split()
        if len(header) != 3:
            raise DataError(_MOD, "parse", "raster header must be 'H W C'")
        try:
            h, w, c = (int(v) for v in header)
        except ValueError:
            raise DataError(_MOD, "parse", "raster header must be integers") from None
        if c != 3:
            raise DataError(_MOD, "bad-dims", f"raster channels must be 3, got {c}")
        try:
            values = np.array(fh.read().split(), dtype=float)
        except ValueError:
            raise DataError(_MOD, "parse", "non-numeric pixel value") from None
    if values.size != h * w * c:
        raise DataError(
            _MOD, "parse", f"expected {h * w * c} pixel values, got {values.size}"
        )
    return Raster(values.reshape(h, w, c))


def write_raster(img: Raster, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{img.height} {img.width} 3\n")
        flat = img.pixels.reshape(-1)
        for start in range(0, flat.size, 12):
            fh.write(" ".join(repr(float(v)) for v in flat[start : start + 12]) + "\n")
