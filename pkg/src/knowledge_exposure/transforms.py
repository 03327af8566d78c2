"""The fixed bank of ten image transformations and their deterministic application.

Images are float arrays of shape (N, H, W, C) with values in [0, 1].  The
severity-resolved parameters of every transform live in
``transform_params.json`` next to this module; ``params`` is a pure lookup
into that table.

Randomness (noise draws, crop offsets, jitter factors) is seeded per image from
``(seed, sample_id, transform_id)``, so an image's output does not depend on
the batch it was processed in.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv
from PIL import Image
from scipy import ndimage

from .errors import ConfigurationError, ValidationError
from .seeding import rng_for

KINDS = ("geometric", "photometric", "corruption")
SEVERITIES = tuple(range(1, 7))
PARAM_TABLE_FILE = "transform_params.json"


@dataclass(frozen=True)
class TransformSpec:
    id: str
    name: str
    kind: str
    severity: int
    params: Mapping = field(default_factory=dict, hash=False)

    def with_severity(self, severity: int) -> "TransformSpec":
        return get_transform(self.id, severity)


@dataclass
class ImageBatch:
    """A stack of same-sized images with one unique identifier per image."""

    pixels: np.ndarray
    sample_ids: tuple

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels)
        self.sample_ids = tuple(str(s) for s in self.sample_ids)
        if self.pixels.ndim != 4:
            raise ValidationError(
                f"pixels must have shape (N, H, W, C), got {self.pixels.shape}")
        if self.pixels.shape[-1] not in (1, 3):
            raise ValidationError(f"expected 1 or 3 channels, got {self.pixels.shape[-1]}")
        if len(self.sample_ids) != self.pixels.shape[0]:
            raise ValidationError(
                f"{len(self.sample_ids)} sample ids for {self.pixels.shape[0]} images")
        if len(set(self.sample_ids)) != len(self.sample_ids):
            raise ValidationError("sample_ids must be unique within a batch")

    def __len__(self):
        return len(self.sample_ids)

    @property
    def image_shape(self):
        return self.pixels.shape[1:]

    def subset(self, indices) -> "ImageBatch":
        indices = np.asarray(indices, dtype=int)
        return ImageBatch(self.pixels[indices], tuple(self.sample_ids[i] for i in indices))

    @classmethod
    def concatenate(cls, batches: Sequence["ImageBatch"]) -> "ImageBatch":
        pixels = np.concatenate([b.pixels for b in batches], axis=0)
        ids = tuple(s for b in batches for s in b.sample_ids)
        return cls(pixels, ids)


# ---------------------------------------------------------------------------
# parameter table


@lru_cache(maxsize=None)
def _load_table_cached(path: str | None):
    if path is None:
        text = resources.files(__package__).joinpath(PARAM_TABLE_FILE).read_text()
    else:
        text = Path(path).read_text()
    doc = json.loads(text)
    table = doc["transforms"]
    for tid, entry in table.items():
        if entry["kind"] not in KINDS:
            raise ConfigurationError(f"{tid}: unknown kind {entry['kind']!r}")
        missing = [s for s in SEVERITIES if str(s) not in entry["severity"]]
        if missing:
            raise ConfigurationError(f"{tid}: missing severities {missing}")
    return table


def load_param_table(path=None) -> dict:
    """Return the raw ``{transform_id: {name, kind, severity: {...}}}`` table."""
    return _load_table_cached(None if path is None else str(path))


def get_transform(transform_id: str, severity: int = 1) -> TransformSpec:
    table = load_param_table()
    if transform_id not in table:
        raise ConfigurationError(
            f"unknown transform {transform_id!r}; known: {sorted(table)}")
    if severity not in SEVERITIES:
        raise ConfigurationError(f"severity must be in 1..6, got {severity}")
    entry = table[transform_id]
    return TransformSpec(
        id=transform_id,
        name=entry["name"],
        kind=entry["kind"],
        severity=int(severity),
        params=dict(entry["severity"][str(severity)]),
    )


def list_transforms(severity: int = 1) -> list[TransformSpec]:
    """All ten bank transforms at one severity, sorted by id."""
    return [get_transform(tid, severity) for tid in sorted(load_param_table())]


def transform_ids() -> tuple:
    return tuple(sorted(load_param_table()))


def format_param_table() -> str:
    """Human-readable dump of the full transform x severity table."""
    table = load_param_table()
    lines = []
    for tid in sorted(table):
        entry = table[tid]
        lines.append(f"{tid}  [{entry['kind']}]  {entry['name']}")
        for s in SEVERITIES:
            params = entry["severity"][str(s)]
            body = ", ".join(f"{k}={v}" for k, v in params.items())
            lines.append(f"    severity {s}: {body}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# image helpers


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int, box=None) -> np.ndarray:
    """Bilinearly resample ``img`` (H, W, C), optionally restricted to a crop box.

    ``box`` is ``(top, left, height, width)`` in pixel units of ``img``.
    """
    h, w = img.shape[:2]
    top, left, bh, bw = box if box is not None else (0, 0, h, w)
    ys = top + (np.arange(out_h) + 0.5) * (bh / out_h) - 0.5
    xs = left + (np.arange(out_w) + 0.5) * (bw / out_w) - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    out = np.empty((out_h, out_w, img.shape[2]), dtype=img.dtype)
    for c in range(img.shape[2]):
        out[..., c] = ndimage.map_coordinates(img[..., c], [yy, xx], order=1, mode="nearest")
    return out


def _gray(img):
    if img.shape[2] == 1:
        return img[..., 0]
    return img @ np.array([0.299, 0.587, 0.114], dtype=img.dtype)


def _blur(img, sigma):
    return ndimage.gaussian_filter(img, sigma=(sigma, sigma, 0), mode="reflect")


def _clipped_zoom(layer, zoom):
    h, w = layer.shape
    ch, cw = int(np.ceil(h / zoom)), int(np.ceil(w / zoom))
    top, left = (h - ch) // 2, (w - cw) // 2
    zoomed = ndimage.zoom(layer[top:top + ch, left:left + cw], zoom, order=1)
    zt, zl = (zoomed.shape[0] - h) // 2, (zoomed.shape[1] - w) // 2
    return zoomed[zt:zt + h, zl:zl + w]


def _line_kernel(length, angle_deg):
    size = 2 * length + 1
    kernel = np.zeros((size, size))
    t = np.linspace(-length, length, 4 * size)
    rad = np.deg2rad(angle_deg)
    ys = np.rint(length + t * np.sin(rad)).astype(int)
    xs = np.rint(length + t * np.cos(rad)).astype(int)
    kernel[ys, xs] = 1.0
    return kernel / kernel.sum()


# ---------------------------------------------------------------------------
# per-image transform kernels: (img, params, rng) -> img


def _flip(img, params, rng):
    return img[:, ::-1, :].copy()


def _rotate(img, params, rng):
    h, w = img.shape[:2]
    out = np.rot90(img, k=params["quarter_turns"], axes=(0, 1))
    if out.shape[:2] != (h, w):
        out = resize_bilinear(np.ascontiguousarray(out), h, w)
    return np.ascontiguousarray(out)


def _random_crop(img, params, rng):
    h, w = img.shape[:2]
    frac = params["crop_fraction"]
    ch, cw = max(1, round(frac * h)), max(1, round(frac * w))
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    return resize_bilinear(img, h, w, box=(top, left, ch, cw))


def _gaussian_noise(img, params, rng):
    noise = rng.standard_normal(img.shape).astype(img.dtype)
    return np.clip(img + params["sigma"] * noise, 0.0, 1.0)


def _gaussian_blur(img, params, rng):
    return np.clip(_blur(img, params["sigma"]), 0.0, 1.0)


def _glass_blur(img, params, rng):
    h, w = img.shape[:2]
    d, iters = int(params["max_delta"]), int(params["iterations"])
    out = _blur(img, params["sigma"])
    rows = range(h - d - 1, d - 1, -1)
    cols = range(w - d - 1, d - 1, -1)
    shifts = rng.integers(-d, d + 1, size=(iters, len(rows), len(cols), 2))
    for it in range(iters):
        for i, y in enumerate(rows):
            for j, x in enumerate(cols):
                dy, dx = shifts[it, i, j]
                y2, x2 = y + dy, x + dx
                out[y, x], out[y2, x2] = out[y2, x2].copy(), out[y, x].copy()
    return np.clip(_blur(out, params["sigma"]), 0.0, 1.0)


def _jpeg(img, params, rng):
    arr = np.rint(img * 255.0).astype(np.uint8)
    mode = "L" if arr.shape[2] == 1 else "RGB"
    pil = Image.fromarray(arr[..., 0] if mode == "L" else arr, mode=mode)
    buf = io.BytesIO()
    pil.save(buf, format="JPEG", quality=int(params["quality"]))
    buf.seek(0)
    back = np.asarray(Image.open(buf).convert(mode), dtype=np.float64) / 255.0
    if back.ndim == 2:
        back = back[..., None]
    return back.astype(img.dtype)


def _snow(img, params, rng):
    h, w = img.shape[:2]
    layer = rng.normal(params["flake_mean"], params["flake_std"], size=(h, w))
    layer = _clipped_zoom(layer, params["zoom"])
    layer[layer < params["threshold"]] = 0.0
    layer = np.clip(layer, 0.0, 1.0)
    length = max(1, int(round(params["streak_fraction"] * max(h, w))))
    angle = rng.uniform(-135.0, -45.0)
    layer = ndimage.convolve(layer, _line_kernel(length, angle), mode="nearest")
    layer = layer[..., None].astype(img.dtype)
    blend = params["blend"]
    brightened = np.maximum(img, _gray(img)[..., None] * 1.5 + 0.5)
    base = blend * img + (1.0 - blend) * brightened
    return np.clip(base + layer + layer[::-1, ::-1], 0.0, 1.0)


def _color_jitter(img, params, rng):
    b, c, s, hue = (params[k] for k in ("brightness", "contrast", "saturation", "hue"))
    fb = rng.uniform(1 - b, 1 + b)
    fc = rng.uniform(1 - c, 1 + c)
    fs = rng.uniform(1 - s, 1 + s)
    fh = rng.uniform(-hue, hue)
    out = np.clip(img * fb, 0.0, 1.0)
    mean = _gray(out).mean()
    out = np.clip((out - mean) * fc + mean, 0.0, 1.0)
    if out.shape[2] == 3:
        g = _gray(out)[..., None]
        out = np.clip(g + (out - g) * fs, 0.0, 1.0)
        hsv = rgb_to_hsv(out)
        hsv[..., 0] = (hsv[..., 0] + fh) % 1.0
        out = np.clip(hsv_to_rgb(hsv), 0.0, 1.0)
    return out.astype(img.dtype)


_KERNELS: dict[str, Callable] = {
    "color-jitter": _color_jitter,
    "flip": _flip,
    "gaussian-blur": _gaussian_blur,
    "gaussian-noise": _gaussian_noise,
    "glass-blur": _glass_blur,
    "jpeg-compression": _jpeg,
    "random-crop": _random_crop,
    "rot270": _rotate,
    "rot90": _rotate,
    "snow": _snow,
}


def apply(spec: TransformSpec, batch: ImageBatch, seed: int) -> ImageBatch:
    """Apply one bank transform to every image of ``batch``.

    The output has the same shape, dtype and sample ids as the input.
    """
    if spec.id not in _KERNELS or spec.id not in load_param_table():
        raise ConfigurationError(f"transform {spec.id!r} is not part of the bank")
    if len(batch) == 0:
        raise ValidationError("cannot transform an empty batch")
    pixels = batch.pixels
    if not np.all(np.isfinite(pixels)) or pixels.min() < 0.0 or pixels.max() > 1.0:
        raise ValidationError("image values must be finite and lie in [0, 1]")
    # Re-resolve params from the table so a hand-built spec cannot drift from it.
    params = get_transform(spec.id, spec.severity).params
    kernel = _KERNELS[spec.id]
    out = np.empty_like(pixels)
    for i, sid in enumerate(batch.sample_ids):
        rng = rng_for(int(seed), sid, spec.id)
        out[i] = kernel(pixels[i], params, rng)
    return ImageBatch(out, batch.sample_ids)


def apply_by_id(transform_id: str, batch: ImageBatch, seed: int, severity: int = 1) -> ImageBatch:
    return apply(get_transform(transform_id, severity), batch, seed)
