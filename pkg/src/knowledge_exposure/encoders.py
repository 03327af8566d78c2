"""Pluggable image encoders and embedding of original / transformed image sets.

Backend identifiers
-------------------
``open_clip:<arch>/<pretrained>``
    A vision-language image encoder via ``open_clip`` (e.g.
    ``open_clip:ViT-B-32/openai``).  ``<pretrained>`` may also be a local
    checkpoint path.
``torchvision:<arch>[@<weights.pth>]``
    An ImageNet classifier from torchvision with its head removed.  Without a
    weights path torchvision's default weights are requested.
``random-resnet[:<base_width>]``
    The compact ResNet with seeded random weights.  No pretrained knowledge;
    useful as a structural baseline.
``pixels[:<resolution>]``
    Downsampled, normalized raw pixels.  Needs nothing beyond numpy/torch and
    is what offline smoke runs use.

All backends are run in inference mode and are deterministic on a fixed
build.  Loading failures raise :class:`InitializationError`.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .cache import EmbeddingCache
from .errors import ConfigurationError, InitializationError, NumericalError, ValidationError
from .networks import ResNetFeatures, to_tensor
from .seeding import derive_seed
from .transforms import ImageBatch, TransformSpec, apply, list_transforms

IDENTITY = "identity"
CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_STD = (0.26862954, 0.26130258, 0.27577711)
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass
class EmbeddingSet:
    encoder_id: str
    dataset_id: str
    class_id: str
    transform_id: str
    severity: int
    matrix: np.ndarray
    normalized: bool
    sample_ids: tuple = field(default=())

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix)
        if self.matrix.ndim != 2 or self.matrix.shape[0] < 1:
            raise ValidationError(f"embedding matrix must be N x D with N >= 1, got {self.matrix.shape}")
        if not np.all(np.isfinite(self.matrix)):
            raise NumericalError("embedding matrix contains non-finite values")
        if self.normalized:
            norms = np.linalg.norm(self.matrix.astype(np.float64), axis=1)
            if np.max(np.abs(norms - 1.0)) > 1e-5:
                raise ValidationError("rows flagged normalized but norms deviate from 1 by > 1e-5")
        self.sample_ids = tuple(self.sample_ids)

    @property
    def n(self):
        return self.matrix.shape[0]

    @property
    def dim(self):
        return self.matrix.shape[1]


class EncoderBackend:
    """Base class: preprocessing (resize + per-channel normalization) and a forward pass."""

    backend_id: str = "abstract"
    input_resolution: int = 224
    embed_dim: int = 0
    mean: tuple = (0.5, 0.5, 0.5)
    std: tuple = (0.5, 0.5, 0.5)

    def __init__(self):
        self.calls = 0

    def preprocess(self, pixels: np.ndarray) -> torch.Tensor:
        x = to_tensor(pixels)
        if x.shape[1] == 1:
            x = x.repeat(1, 3, 1, 1)
        r = self.input_resolution
        if x.shape[-2:] != (r, r):
            downsizing = x.shape[-1] > r or x.shape[-2] > r
            x = F.interpolate(x, size=(r, r), mode="bilinear", align_corners=False,
                              antialias=downsizing)
        mean = torch.tensor(self.mean, dtype=x.dtype).view(1, 3, 1, 1)
        std = torch.tensor(self.std, dtype=x.dtype).view(1, 3, 1, 1)
        return (x - mean) / std

    def _forward(self, x: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    @torch.inference_mode()
    def encode(self, pixels: np.ndarray, batch_size: int = 256) -> np.ndarray:
        out = []
        for start in range(0, len(pixels), batch_size):
            chunk = self.preprocess(pixels[start:start + batch_size])
            self.calls += 1
            out.append(self._forward(chunk).float().cpu().numpy())
        return np.concatenate(out, axis=0).astype(np.float32)


class PixelBackend(EncoderBackend):
    def __init__(self, resolution: int = 16):
        super().__init__()
        self.input_resolution = int(resolution)
        self.embed_dim = 3 * self.input_resolution ** 2
        self.backend_id = f"pixels:{self.input_resolution}"
        self.mean = (0.5, 0.5, 0.5)
        self.std = (0.25, 0.25, 0.25)

    def _forward(self, x):
        return torch.flatten(x, 1)


class _TorchModuleBackend(EncoderBackend):
    def __init__(self, module, backend_id, resolution, mean, std, embed_dim):
        super().__init__()
        self.module = module.eval()
        self.backend_id = backend_id
        self.input_resolution = int(resolution)
        self.mean, self.std = tuple(mean), tuple(std)
        self.embed_dim = int(embed_dim)

    def _forward(self, x):
        return self.module(x)


def random_resnet_backend(base_width: int = 16, seed: int = 0, resolution: int = 32):
    gen_state = torch.random.get_rng_state()
    try:
        torch.manual_seed(seed)
        net = ResNetFeatures(base_width=base_width)
    finally:
        torch.random.set_rng_state(gen_state)
    return _TorchModuleBackend(net, f"random-resnet:{base_width}", resolution,
                               IMAGENET_MEAN, IMAGENET_STD, net.feature_dim)


def torchvision_backend(arch: str, weights_path: str | None = None):
    try:
        import torchvision
    except ImportError as exc:  # pragma: no cover - depends on environment
        raise InitializationError("torchvision is not installed") from exc
    try:
        if weights_path:
            model = torchvision.models.get_model(arch, weights=None)
            state = torch.load(weights_path, map_location="cpu", weights_only=True)
            model.load_state_dict(state)
        else:
            model = torchvision.models.get_model(arch, weights="DEFAULT")
    except Exception as exc:
        raise InitializationError(f"could not load torchvision weights for {arch!r}: {exc}") from exc
    dim = _strip_head(model)
    bid = f"torchvision:{arch}" + (f"@{weights_path}" if weights_path else "")
    return _TorchModuleBackend(model, bid, 224, IMAGENET_MEAN, IMAGENET_STD, dim)


def _strip_head(model) -> int:
    for attr in ("fc", "head", "heads", "classifier"):
        head = getattr(model, attr, None)
        if head is None:
            continue
        linear = head if isinstance(head, torch.nn.Linear) else None
        if linear is None and isinstance(head, torch.nn.Sequential):
            linear = next((m for m in head if isinstance(m, torch.nn.Linear)), None)
        if linear is not None:
            setattr(model, attr, torch.nn.Identity())
            return linear.in_features
    raise InitializationError("cannot locate the classification head to remove")


def open_clip_backend(arch: str, pretrained: str):
    try:
        import open_clip
    except ImportError as exc:
        raise InitializationError(
            "open_clip is not installed (pip install open_clip_torch)") from exc
    try:
        model, _, _ = open_clip.create_model_and_transforms(arch, pretrained=pretrained)
    except Exception as exc:
        raise InitializationError(f"could not load open_clip {arch}/{pretrained}: {exc}") from exc
    visual = model.visual
    size = visual.image_size
    size = size[0] if isinstance(size, (tuple, list)) else size
    dim = getattr(visual, "output_dim", None) or model.text_projection.shape[1]

    class _ImageEncoder(torch.nn.Module):
        def __init__(self, m):
            super().__init__()
            self.m = m

        def forward(self, x):
            return self.m.encode_image(x)

    return _TorchModuleBackend(_ImageEncoder(model), f"open_clip:{arch}/{pretrained}", size,
                               CLIP_MEAN, CLIP_STD, dim)


def make_backend(backend_id: str, **options) -> EncoderBackend:
    """Instantiate a backend from its identifier string (see module docstring)."""
    kind, _, rest = backend_id.partition(":")
    if kind == "pixels":
        return PixelBackend(int(rest or options.get("resolution", 16)))
    if kind == "random-resnet":
        return random_resnet_backend(int(rest or options.get("base_width", 16)),
                                     seed=options.get("seed", 0))
    if kind == "torchvision":
        arch, _, weights = rest.partition("@")
        if not arch:
            raise ConfigurationError("torchvision backend needs an architecture name")
        return torchvision_backend(arch, weights or options.get("weights"))
    if kind == "open_clip":
        arch, _, pretrained = rest.partition("/")
        if not arch or not pretrained:
            raise ConfigurationError("open_clip backend id must look like open_clip:<arch>/<pretrained>")
        return open_clip_backend(arch, pretrained)
    raise ConfigurationError(f"unknown encoder backend {backend_id!r}")


def check_backend_id(backend_id: str) -> str | None:
    """Return a problem description for a malformed id, without loading anything."""
    kind, _, rest = backend_id.partition(":")
    if kind in ("pixels", "random-resnet"):
        if rest and not rest.isdigit():
            return f"{kind} option must be an integer, got {rest!r}"
        return None
    if kind == "torchvision":
        return None if rest.partition("@")[0] else "torchvision backend needs an architecture"
    if kind == "open_clip":
        arch, _, pre = rest.partition("/")
        return None if arch and pre else "expected open_clip:<arch>/<pretrained>"
    return f"unknown encoder backend {backend_id!r}"


# ---------------------------------------------------------------------------
# embedding


def l2_normalize(matrix: np.ndarray) -> np.ndarray:
    m = np.asarray(matrix, dtype=np.float64)
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    return (m / np.where(norms == 0, 1.0, norms)).astype(np.float32)


def embed(backend: EncoderBackend, batch: ImageBatch, *, normalize: bool = True,
          batch_size: int = 256, dataset_id: str = "", class_id: str = "",
          transform_id: str = IDENTITY, severity: int = 0) -> EmbeddingSet:
    """Encode every image of ``batch``; row ``i`` belongs to ``batch.sample_ids[i]``."""
    if len(batch) == 0:
        raise ValidationError("cannot embed an empty batch")
    matrix = backend.encode(batch.pixels, batch_size=batch_size)
    bad = ~np.all(np.isfinite(matrix), axis=1)
    if bad.any():
        ids = [batch.sample_ids[i] for i in np.flatnonzero(bad)]
        raise NumericalError(f"non-finite embeddings for {len(ids)} samples", {"sample_ids": ids})
    if normalize:
        matrix = l2_normalize(matrix)
    return EmbeddingSet(backend.backend_id, dataset_id, class_id, transform_id, severity,
                        matrix, normalize, batch.sample_ids)


def content_digest(batch: ImageBatch) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(batch.pixels).tobytes())
    h.update(str(batch.pixels.dtype).encode())
    h.update("\x1f".join(batch.sample_ids).encode())
    return h.hexdigest()[:32]


def cache_key(dataset_id, class_id, transform_id, severity, encoder_id, *, seed=None,
              content=None, normalized=True) -> dict:
    return {
        "dataset": dataset_id,
        "class": class_id,
        "transform": transform_id,
        "severity": int(severity),
        "encoder": encoder_id,
        "seed": seed,
        "content": content,
        "normalized": bool(normalized),
    }


def cache_get(cache: EmbeddingCache, key: dict):
    """Return the cached :class:`EmbeddingSet` for ``key`` or ``None`` on a miss."""
    hit = cache.get(key)
    if hit is None:
        return None
    matrix, meta = hit
    return EmbeddingSet(key["encoder"], key["dataset"], key["class"], key["transform"],
                        key["severity"], matrix, key["normalized"], tuple(meta.get("sample_ids", ())))


def cache_put(cache: EmbeddingCache, key: dict, value: EmbeddingSet):
    cache.put(key, value.matrix, {"sample_ids": list(value.sample_ids)})


def embed_all_transforms(backend: EncoderBackend, class_images: ImageBatch, bank=None, *,
                         severity: int = 1, seed: int = 0, cache: EmbeddingCache | None = None,
                         dataset_id: str = "", class_id: str = "", normalize: bool = True,
                         batch_size: int = 256) -> dict:
    """Embed the originals and every transformed copy of ``class_images``.

    Returns ``{"identity": EmbeddingSet, <transform_id>: EmbeddingSet, ...}``.
    """
    if len(class_images) == 0:
        raise ValidationError("class_images is empty")
    specs: list[TransformSpec] = list(bank) if bank is not None else list_transforms(severity)
    content = content_digest(class_images)
    out = {}
    jobs = [(IDENTITY, None)] + [(s.id, s) for s in specs]
    for tid, spec in jobs:
        sev = 0 if spec is None else spec.severity
        key = cache_key(dataset_id, class_id, tid, sev, backend.backend_id,
                        seed=None if spec is None else derive_seed(seed),
                        content=content, normalized=normalize)
        hit = cache_get(cache, key) if cache is not None else None
        if hit is not None:
            out[tid] = hit
            continue
        images = class_images if spec is None else apply(spec, class_images, seed)
        es = embed(backend, images, normalize=normalize, batch_size=batch_size,
                   dataset_id=dataset_id, class_id=class_id, transform_id=tid, severity=sev)
        if cache is not None:
            cache_put(cache, key, es)
        out[tid] = es
    return out
