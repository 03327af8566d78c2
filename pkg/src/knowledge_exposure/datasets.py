"""Thin dataset layer: labeled image splits and three loaders.

* ``image-folder``: a directory of images plus ``labels.csv`` with columns
  ``filename,label,split`` (split is ``train`` or ``test``).
* ``cifar10``: the python-pickle release (``cifar-10-batches-py``).
* ``procedural``: small synthetic scenes generated on the fly, used for
  offline smoke runs.  Classes differ in which transforms change their
  appearance statistics: ``car``, ``tree`` and ``house`` sit on a ground
  line and are mirror-symmetric in distribution, while ``fruit`` and
  ``flower`` are rotation-symmetric in distribution.
"""

from __future__ import annotations

import csv
import pickle
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from matplotlib.colors import hsv_to_rgb
from PIL import Image

from .errors import ConfigurationError, ValidationError
from .seeding import rng_for
from .transforms import ImageBatch

CIFAR10_NAMES = ("plane", "car", "bird", "cat", "deer", "dog", "frog", "horse", "ship", "truck")
PROCEDURAL_CLASSES = ("car", "fruit", "flower", "tree", "house")


@dataclass
class LabeledImages:
    batch: ImageBatch
    labels: tuple

    def __post_init__(self):
        self.labels = tuple(str(c) for c in self.labels)
        if len(self.labels) != len(self.batch):
            raise ValidationError("one label per image required")

    def __len__(self):
        return len(self.labels)

    def of_class(self, class_id: str, limit: int | None = None) -> ImageBatch:
        idx = [i for i, c in enumerate(self.labels) if c == class_id]
        if limit is not None:
            idx = idx[:limit]
        return self.batch.subset(idx)


@dataclass
class Dataset:
    dataset_id: str
    classes: tuple
    train: LabeledImages
    test: LabeledImages

    def __post_init__(self):
        self.classes = tuple(self.classes)
        self._index = None

    def class_images(self, class_id: str, split: str = "train", limit: int | None = None) -> ImageBatch:
        if class_id not in self.classes:
            raise ValidationError(f"class {class_id!r} not in dataset {self.dataset_id!r}")
        return getattr(self, split).of_class(class_id, limit)

    def locate(self, sample_id: str):
        """Return ``(split_name, row)`` for a sample id, or raise KeyError."""
        if self._index is None:
            self._index = {}
            for split in ("train", "test"):
                for row, sid in enumerate(getattr(self, split).batch.sample_ids):
                    self._index[sid] = (split, row)
        return self._index[sample_id]

    def label_of(self, sample_id: str) -> str:
        split, row = self.locate(sample_id)
        return getattr(self, split).labels[row]

    def pixels_of(self, sample_ids) -> np.ndarray:
        rows = []
        for sid in sample_ids:
            split, row = self.locate(sid)
            rows.append(getattr(self, split).batch.pixels[row])
        return np.stack(rows)

    def limited(self, train_per_class: int | None = None, test_per_class: int | None = None) -> "Dataset":
        """Keep the first ``n`` samples of each class in each split."""

        def cut(split: LabeledImages, n):
            if n is None:
                return split
            seen: dict = {}
            keep = []
            for i, c in enumerate(split.labels):
                if seen.get(c, 0) < n:
                    keep.append(i)
                    seen[c] = seen.get(c, 0) + 1
            return LabeledImages(split.batch.subset(keep), tuple(split.labels[i] for i in keep))

        return Dataset(self.dataset_id, self.classes, cut(self.train, train_per_class),
                       cut(self.test, test_per_class))


# ---------------------------------------------------------------------------
# loaders


def load_image_folder(root, dataset_id: str | None = None) -> Dataset:
    root = Path(root)
    label_file = root / "labels.csv"
    if not label_file.exists():
        raise ConfigurationError(f"{label_file} not found")
    splits = {"train": ([], [], []), "test": ([], [], [])}
    classes: list = []
    with open(label_file, newline="") as f:
        for row in csv.DictReader(f):
            split = row.get("split", "train").strip()
            if split not in splits:
                raise ValidationError(f"unknown split {split!r} in {label_file}")
            img = np.asarray(Image.open(root / row["filename"]).convert("RGB"), dtype=np.float32) / 255.0
            pix, ids, labels = splits[split]
            pix.append(img)
            ids.append(f"{split}/{row['filename']}")
            labels.append(row["label"])
            if row["label"] not in classes:
                classes.append(row["label"])
    parts = {}
    for split, (pix, ids, labels) in splits.items():
        if pix:
            shapes = {p.shape for p in pix}
            if len(shapes) != 1:
                raise ValidationError(f"images in {root} have differing shapes {sorted(shapes)}")
            batch = ImageBatch(np.stack(pix), ids)
        else:
            batch = ImageBatch(np.zeros((0, 1, 1, 3), np.float32), ())
        parts[split] = LabeledImages(batch, labels)
    return Dataset(dataset_id or root.name, tuple(classes), parts["train"], parts["test"])


def load_cifar10(root) -> Dataset:
    root = Path(root)
    if (root / "cifar-10-batches-py").is_dir():
        root = root / "cifar-10-batches-py"
    if not (root / "data_batch_1").exists():
        raise ConfigurationError(f"no CIFAR-10 python batches under {root}")

    def read(names, split):
        pix, labels = [], []
        for name in names:
            with open(root / name, "rb") as f:
                d = pickle.load(f, encoding="latin1")
            pix.append(d["data"].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1))
            labels.extend(CIFAR10_NAMES[i] for i in d["labels"])
        arr = np.concatenate(pix).astype(np.float32) / 255.0
        ids = [f"{split}-{i:05d}" for i in range(len(arr))]
        return LabeledImages(ImageBatch(arr, ids), labels)

    train = read([f"data_batch_{i}" for i in range(1, 6)], "train")
    test = read(["test_batch"], "test")
    return Dataset("cifar10", CIFAR10_NAMES, train, test)


def load_dataset(spec: dict) -> Dataset:
    """Build a dataset from a config mapping with a ``loader`` key."""
    loader = spec.get("loader", "procedural")
    if loader == "procedural":
        ds = make_procedural_dataset(
            classes=spec.get("classes"),
            n_train=spec.get("n_train", 200),
            n_test=spec.get("n_test", 100),
            image_size=spec.get("image_size", 32),
            seed=spec.get("seed", 0),
        )
    elif loader == "image-folder":
        ds = load_image_folder(spec["path"], spec.get("dataset_id"))
    elif loader == "cifar10":
        ds = load_cifar10(spec["path"])
    else:
        raise ConfigurationError(f"unknown dataset loader {loader!r}")
    if spec.get("train_per_class") or spec.get("test_per_class"):
        ds = ds.limited(spec.get("train_per_class"), spec.get("test_per_class"))
    return ds


# ---------------------------------------------------------------------------
# procedural scenes

_SS = 2  # supersampling factor for anti-aliased edges


def _grid(size):
    n = size * _SS
    c = (np.arange(n) + 0.5) / _SS
    return np.meshgrid(c, c, indexing="ij")


def _paint(img, mask, color):
    img[mask] = color


def _hsv(h, s, v):
    return hsv_to_rgb(np.array([h % 1.0, s, v]))


def _ground_scene(rng, size, yy, xx):
    horizon = size * rng.uniform(0.68, 0.78)
    sky_top = _hsv(rng.uniform(0.55, 0.62), rng.uniform(0.3, 0.6), rng.uniform(0.85, 1.0))
    sky_low = _hsv(rng.uniform(0.55, 0.62), rng.uniform(0.1, 0.3), rng.uniform(0.9, 1.0))
    ground = _hsv(rng.uniform(0.22, 0.35), rng.uniform(0.3, 0.6), rng.uniform(0.35, 0.55))
    t = np.clip(yy / horizon, 0, 1)[..., None]
    img = sky_top * (1 - t) + sky_low * t
    img[yy >= horizon] = ground
    return img, horizon


def _draw_car(rng, size, yy, xx):
    img, horizon = _ground_scene(rng, size, yy, xx)
    body_w = size * rng.uniform(0.5, 0.7)
    body_h = size * rng.uniform(0.14, 0.2)
    x0 = rng.uniform(1, size - body_w - 1)
    bottom = horizon + size * rng.uniform(0.0, 0.06)
    top = bottom - body_h
    color = _hsv(rng.uniform(0, 1), rng.uniform(0.6, 0.95), rng.uniform(0.5, 0.95))
    _paint(img, (xx >= x0) & (xx <= x0 + body_w) & (yy >= top) & (yy <= bottom), color)
    cab_w = body_w * rng.uniform(0.4, 0.55)
    facing_right = rng.random() < 0.5
    cab_x0 = x0 + body_w * (0.12 if facing_right else 0.88) - (0 if facing_right else cab_w)
    cab_top = top - body_h * rng.uniform(0.7, 0.95)
    _paint(img, (xx >= cab_x0) & (xx <= cab_x0 + cab_w) & (yy >= cab_top) & (yy <= top), color)
    win = _hsv(0.58, 0.25, 0.95)
    inset = 0.18 * cab_w
    _paint(img, (xx >= cab_x0 + inset) & (xx <= cab_x0 + cab_w - inset)
           & (yy >= cab_top + 0.25 * (top - cab_top)) & (yy <= top - 0.1 * (top - cab_top)), win)
    r = body_h * rng.uniform(0.45, 0.6)
    for wx in (x0 + 0.22 * body_w, x0 + 0.78 * body_w):
        _paint(img, (yy - bottom) ** 2 + (xx - wx) ** 2 <= r ** 2, np.array([0.08, 0.08, 0.08]))
    return img


def _draw_tree(rng, size, yy, xx):
    img, horizon = _ground_scene(rng, size, yy, xx)
    cx = rng.uniform(0.3, 0.7) * size
    trunk_w = size * rng.uniform(0.06, 0.1)
    trunk_top = horizon - size * rng.uniform(0.25, 0.35)
    _paint(img, (np.abs(xx - cx) <= trunk_w / 2) & (yy >= trunk_top) & (yy <= horizon + 1),
           _hsv(0.07, 0.6, rng.uniform(0.3, 0.45)))
    cr = size * rng.uniform(0.18, 0.26)
    cy = trunk_top - 0.4 * cr
    leaf = _hsv(rng.uniform(0.25, 0.38), rng.uniform(0.6, 0.9), rng.uniform(0.35, 0.7))
    _paint(img, ((yy - cy) / 1.15) ** 2 + (xx - cx) ** 2 <= cr ** 2, leaf)
    return img


def _draw_house(rng, size, yy, xx):
    img, horizon = _ground_scene(rng, size, yy, xx)
    w = size * rng.uniform(0.35, 0.5)
    h = size * rng.uniform(0.25, 0.33)
    x0 = rng.uniform(2, size - w - 2)
    top = horizon - h
    wall = _hsv(rng.uniform(0.0, 0.15), rng.uniform(0.1, 0.5), rng.uniform(0.7, 0.95))
    _paint(img, (xx >= x0) & (xx <= x0 + w) & (yy >= top) & (yy <= horizon), wall)
    roof_h = h * rng.uniform(0.6, 0.9)
    cx = x0 + w / 2
    roof = (yy <= top) & (yy >= top - roof_h) & (np.abs(xx - cx) <= (yy - (top - roof_h)) / roof_h * (0.6 * w))
    _paint(img, roof, _hsv(rng.uniform(0.0, 0.05), 0.7, rng.uniform(0.4, 0.6)))
    door_w = w * 0.22
    dx = x0 + w * rng.uniform(0.2, 0.6)
    _paint(img, (xx >= dx) & (xx <= dx + door_w) & (yy >= horizon - 0.55 * h) & (yy <= horizon),
           _hsv(0.08, 0.6, 0.3))
    return img


def _textured_background(rng, size, hue_range, sat, val):
    n = size * _SS
    base = _hsv(rng.uniform(*hue_range), rng.uniform(*sat), rng.uniform(*val))
    coarse = rng.normal(0, 0.06, size=(4, 4, 3))
    tex = np.kron(coarse, np.ones((n // 4, n // 4, 1)))
    return np.clip(base + tex, 0, 1)


def _draw_fruit(rng, size, yy, xx):
    img = _textured_background(rng, size, (0.0, 1.0), (0.05, 0.2), (0.8, 0.95))
    cy, cx = size / 2 + rng.normal(0, 1.5, size=2)
    r = size * rng.uniform(0.25, 0.34)
    hue = rng.choice([rng.uniform(0.0, 0.04), rng.uniform(0.06, 0.1), rng.uniform(0.2, 0.28)])
    body = _hsv(hue, rng.uniform(0.75, 0.95), rng.uniform(0.7, 0.9))
    d2 = (yy - cy) ** 2 + (xx - cx) ** 2
    inside = d2 <= r ** 2
    ang = rng.uniform(0, 2 * np.pi)
    hy, hx = cy + 0.4 * r * np.sin(ang), cx + 0.4 * r * np.cos(ang)
    light = np.exp(-((yy - hy) ** 2 + (xx - hx) ** 2) / (0.5 * r ** 2))[..., None]
    shaded = np.clip(body * (0.75 + 0.25 * light) + 0.25 * light, 0, 1)
    img[inside] = shaded[inside]
    sa = rng.uniform(0, 2 * np.pi)
    t = np.linspace(0.85, 1.25, 12) * r
    for tt in t:
        sy, sx = cy + tt * np.sin(sa), cx + tt * np.cos(sa)
        _paint(img, (yy - sy) ** 2 + (xx - sx) ** 2 <= (0.07 * size) ** 2, _hsv(0.08, 0.7, 0.3))
    return img


def _draw_flower(rng, size, yy, xx):
    img = _textured_background(rng, size, (0.25, 0.38), (0.4, 0.7), (0.3, 0.55))
    cy, cx = size / 2 + rng.normal(0, 1.5, size=2)
    n_petals = int(rng.integers(5, 9))
    phase = rng.uniform(0, 2 * np.pi)
    petal = _hsv(rng.choice([0.15, 0.9, 0.78, 0.0]) + rng.normal(0, 0.02), rng.uniform(0.5, 0.9),
                 rng.uniform(0.8, 1.0))
    r_out = size * rng.uniform(0.3, 0.4)
    dy, dx = yy - cy, xx - cx
    rad = np.hypot(dy, dx)
    theta = np.arctan2(dy, dx)
    petal_r = r_out * (0.55 + 0.45 * np.abs(np.cos(n_petals * (theta - phase) / 2)))
    _paint(img, rad <= petal_r, petal)
    _paint(img, rad <= 0.28 * r_out, _hsv(0.11, 0.85, rng.uniform(0.45, 0.7)))
    return img


_DRAWERS = {
    "car": _draw_car,
    "fruit": _draw_fruit,
    "flower": _draw_flower,
    "tree": _draw_tree,
    "house": _draw_house,
}


def render_procedural(class_id: str, rng: np.random.Generator, size: int = 32) -> np.ndarray:
    if class_id not in _DRAWERS:
        raise ConfigurationError(f"unknown procedural class {class_id!r}; known: {sorted(_DRAWERS)}")
    yy, xx = _grid(size)
    img = _DRAWERS[class_id](rng, size, yy, xx)
    img = img + rng.normal(0, 0.015, size=img.shape)
    img = img.reshape(size, _SS, size, _SS, 3).mean(axis=(1, 3))
    return np.clip(img, 0, 1).astype(np.float32)


def make_procedural_dataset(classes=None, n_train: int = 200, n_test: int = 100,
                            image_size: int = 32, seed: int = 0) -> Dataset:
    """Generate a balanced dataset of synthetic scenes (train and test split)."""
    classes = tuple(classes or PROCEDURAL_CLASSES)

    def split(name, n):
        pix, ids, labels = [], [], []
        for c in classes:
            for i in range(n):
                pix.append(render_procedural(c, rng_for(seed, name, c, i), image_size))
                ids.append(f"{name}-{c}-{i:05d}")
                labels.append(c)
        return LabeledImages(ImageBatch(np.stack(pix), ids), labels)

    return Dataset(f"procedural-{seed}", classes, split("train", n_train), split("test", n_test))
