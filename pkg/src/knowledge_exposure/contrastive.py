"""Multi-positive InfoNCE training of a compact residual encoder.

Each anchor image is contrasted against K views of itself produced by the
policy's positive transforms and K views produced by its negative
transforms.  The softmax denominator of an anchor contains only its own 2K
views; other anchors in the batch do not act as negatives.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from scipy.special import logsumexp

from .errors import ConfigurationError, NumericalError, ValidationError
from .networks import ResNetFeatures, to_tensor
from .seeding import derive_seed
from .transforms import ImageBatch, apply_by_id, transform_ids
from .transport import PairPolicy

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 50
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    temperature: float = 0.2
    batch_size: int = 64
    K: int = 2
    seed: int = 0
    feature_dim: int = 512
    severity: int = 1

    def __post_init__(self):
        problems = self.problems()
        if problems:
            raise ConfigurationError("; ".join(problems))

    def problems(self) -> list[str]:
        out = []
        if not self.temperature > 0:
            out.append("temperature must be > 0")
        if self.epochs < 1:
            out.append("epochs must be >= 1")
        if self.batch_size < 1:
            out.append("batch_size must be >= 1")
        if not self.learning_rate > 0:
            out.append("learning_rate must be > 0")
        if self.K < 1:
            out.append("K must be >= 1")
        elif 2 * self.K > len(transform_ids()):
            out.append("2K exceeds transform bank size")
        if self.feature_dim < 8 or self.feature_dim % 8:
            out.append("feature_dim must be a positive multiple of 8")
        if not 1 <= self.severity <= 6:
            out.append("severity must be in [1, 6]")
        return out

    @property
    def base_width(self) -> int:
        return self.feature_dim // 8


@dataclass
class ContrastiveBatch:
    anchors: ImageBatch
    positives: list  # K ImageBatches, column k = positive transform k applied to every anchor
    negatives: list
    positive_ids: tuple
    negative_ids: tuple
    seed: int

    @property
    def K(self) -> int:
        return len(self.positives)

    def pixel_tensor(self) -> torch.Tensor:
        """Anchors, then positive columns, then negative columns, stacked along N."""
        parts = [self.anchors.pixels] + [b.pixels for b in self.positives] + [b.pixels for b in self.negatives]
        return to_tensor(np.concatenate(parts, axis=0))


@dataclass
class FeatureModel:
    network: ResNetFeatures
    config: TrainConfig
    class_id: str = ""
    policy: PairPolicy | None = None
    history: list = field(default_factory=list)

    @property
    def feature_dim(self) -> int:
        return self.network.feature_dim

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        policy = None
        if self.policy is not None:
            policy = {"class_id": self.policy.class_id, "K": self.policy.K,
                      "positives": list(self.policy.positives), "negatives": list(self.policy.negatives)}
        torch.save({
            "architecture": self.network.descriptor(),
            "state_dict": self.network.state_dict(),
            "train_config": dataclasses.asdict(self.config),
            "class_id": self.class_id,
            "policy": policy,
            "history": list(self.history),
        }, path)
        return path

    @classmethod
    def load(cls, path) -> "FeatureModel":
        blob = torch.load(path, map_location="cpu", weights_only=True)
        net = ResNetFeatures.from_descriptor(blob["architecture"])
        net.load_state_dict(blob["state_dict"])
        net.eval()
        p = blob.get("policy")
        policy = PairPolicy(p["class_id"], p["K"], tuple(p["positives"]), tuple(p["negatives"])) if p else None
        return cls(net, TrainConfig(**blob["train_config"]), blob.get("class_id", ""), policy,
                   list(blob.get("history", [])))


# ---------------------------------------------------------------------------
# loss


def _cosine_parts(anchors, others):
    a_norm = np.linalg.norm(anchors, axis=-1)
    o_norm = np.linalg.norm(others, axis=-1)
    cos = np.einsum("bd,bjd->bj", anchors, others) / (a_norm[:, None] * o_norm)
    return cos, a_norm, o_norm


def infonce_loss(anchors, positives, negatives, temperature=0.2, return_grad=False):
    """Multi-positive InfoNCE with a per-anchor denominator (NumPy reference).

    Parameters
    ----------
    anchors : (B, D) array
    positives, negatives : (B, K, D) arrays
    temperature : float
    return_grad : bool
        Also return dL/d(anchors), differentiating through the cosine
        normalization.

    Returns
    -------
    float or (float, ndarray)
        Mean over anchors of ``-(1/K) log(sum_pos exp(s/t) / sum_all exp(s/t))``.
    """
    if not temperature > 0:
        raise ValidationError(f"temperature must be > 0, got {temperature}")
    a = np.asarray(anchors, dtype=np.float64)
    p = np.asarray(positives, dtype=np.float64)
    n = np.asarray(negatives, dtype=np.float64)
    if a.ndim != 2 or p.ndim != 3 or n.ndim != 3 or p.shape != n.shape or p.shape[0] != a.shape[0] \
            or p.shape[2] != a.shape[1]:
        raise ValidationError(f"incompatible shapes {a.shape}, {p.shape}, {n.shape}")
    if not (np.isfinite(a).all() and np.isfinite(p).all() and np.isfinite(n).all()):
        raise NumericalError("non-finite representations passed to the loss")
    B, K, _ = p.shape
    others = np.concatenate([p, n], axis=1)
    cos, a_norm, o_norm = _cosine_parts(a, others)
    logits = cos / temperature
    lse_pos = logsumexp(logits[:, :K], axis=1)
    lse_all = logsumexp(logits, axis=1)
    per_anchor = -(lse_pos - lse_all) / K
    loss = float(per_anchor.mean())
    if not return_grad:
        return loss
    # dL_b/dlogit_j = -(1/K) (softmax over positives [j in P] - softmax over all)
    p_pos = np.zeros_like(logits)
    p_pos[:, :K] = np.exp(logits[:, :K] - lse_pos[:, None])
    p_all = np.exp(logits - lse_all[:, None])
    dlogits = -(p_pos - p_all) / K / B
    # d cos_j / d a = x_hat_j / |a| - cos_j a / |a|^2
    x_hat = others / o_norm[..., None]
    dcos_da = x_hat / a_norm[:, None, None] - cos[..., None] * a[:, None, :] / (a_norm[:, None, None] ** 2)
    grad = np.einsum("bj,bjd->bd", dlogits / temperature, dcos_da)
    return loss, grad


def infonce_torch(z_anchor, z_pos, z_neg, temperature):
    """Torch twin of :func:`infonce_loss` for training; inputs (B,D), (B,K,D), (B,K,D)."""
    a = F.normalize(z_anchor, dim=-1)
    others = F.normalize(torch.cat([z_pos, z_neg], dim=1), dim=-1)
    logits = torch.einsum("bd,bjd->bj", a, others) / temperature
    K = z_pos.shape[1]
    per_anchor = -(torch.logsumexp(logits[:, :K], dim=1) - torch.logsumexp(logits, dim=1)) / K
    return per_anchor.mean()


# ---------------------------------------------------------------------------
# batches and training


def _check_policy(policy: PairPolicy, class_id: str | None, bank):
    if class_id is not None and policy.class_id and policy.class_id != class_id:
        raise ConfigurationError(f"policy is for class {policy.class_id!r}, samples are {class_id!r}")
    bank = tuple(bank) if bank is not None else transform_ids()
    missing = [t for t in policy.positives + policy.negatives if t not in bank]
    if missing:
        raise ConfigurationError(f"policy transforms not in bank: {missing}")
    if 2 * policy.K > len(bank):
        raise ConfigurationError("2K exceeds transform bank size")


def build_batch(samples: ImageBatch, policy: PairPolicy, bank=None, cfg: TrainConfig | None = None,
                seed: int | None = None, class_id: str | None = None) -> ContrastiveBatch:
    """Pair every anchor with its own K positive and K negative transformed views."""
    cfg = cfg or TrainConfig(K=policy.K)
    _check_policy(policy, class_id, bank)
    if len(samples) == 0:
        raise ValidationError("empty sample batch")
    seed = cfg.seed if seed is None else seed
    pos = [apply_by_id(t, samples, seed, cfg.severity) for t in policy.positives]
    neg = [apply_by_id(t, samples, seed, cfg.severity) for t in policy.negatives]
    return ContrastiveBatch(samples, pos, neg, tuple(policy.positives), tuple(policy.negatives), seed)


def _set_determinism(seed: int):
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)


def train(class_images: ImageBatch, policy: PairPolicy, cfg: TrainConfig, *, class_id: str | None = None,
          bank=None, init_model: FeatureModel | None = None, callback=None) -> FeatureModel:
    """Train an encoder on one class with the policy's positive/negative transforms.

    Views are regenerated every epoch with seeds derived from
    ``(cfg.seed, epoch)``, so stochastic transforms vary across epochs while
    the transform identities stay fixed by the policy.
    """
    if len(class_images) == 0:
        raise ValidationError("zero-image training set")
    if policy.K != cfg.K:
        raise ConfigurationError(f"policy K={policy.K} differs from config K={cfg.K}")
    class_id = class_id if class_id is not None else policy.class_id
    _check_policy(policy, class_id, bank)
    _set_determinism(derive_seed(cfg.seed, "init"))
    if init_model is not None:
        net = init_model.network
    else:
        net = ResNetFeatures(base_width=cfg.base_width, in_channels=class_images.pixels.shape[-1])
    opt = torch.optim.SGD(net.parameters(), lr=cfg.learning_rate, momentum=cfg.momentum,
                          weight_decay=cfg.weight_decay)
    n = len(class_images)
    K = cfg.K
    history = []
    for epoch in range(cfg.epochs):
        epoch_seed = derive_seed(cfg.seed, "epoch", epoch)
        views = build_batch(class_images, policy, bank, cfg, seed=epoch_seed, class_id=class_id)
        cols = [to_tensor(views.anchors.pixels)] + [to_tensor(b.pixels) for b in views.positives] \
            + [to_tensor(b.pixels) for b in views.negatives]
        order = torch.randperm(n, generator=torch.Generator().manual_seed(epoch_seed % (2 ** 63)))
        net.train()
        losses = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            if len(idx) < 2 and n >= 2:
                continue  # batch norm needs more than one sample
            x = torch.cat([c[idx] for c in cols], dim=0)
            z = net(x)
            b = len(idx)
            z_anchor = z[:b]
            z_pos = z[b:b * (1 + K)].view(K, b, -1).transpose(0, 1)
            z_neg = z[b * (1 + K):].view(K, b, -1).transpose(0, 1)
            loss = infonce_torch(z_anchor, z_pos, z_neg, cfg.temperature)
            if not torch.isfinite(loss):
                raise NumericalError("training loss diverged", {
                    "epoch": epoch, "step": start // cfg.batch_size,
                    "last_finite_losses": losses[-5:], "learning_rate": cfg.learning_rate})
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
        mean_loss = float(np.mean(losses)) if losses else math.nan
        history.append(mean_loss)
        logger.info("class %s epoch %d/%d loss %.5f", class_id, epoch + 1, cfg.epochs, mean_loss)
        if callback is not None:
            callback(epoch, mean_loss)
    net.eval()
    return FeatureModel(net, cfg, class_id or "", policy, history)


def extract_features(model, batch: ImageBatch, batch_size: int = 256) -> np.ndarray:
    """Global-pooled features (N x D_f), rows aligned with ``batch.sample_ids``."""
    net = model.network if isinstance(model, FeatureModel) else model
    pixels = batch.pixels
    if pixels.ndim != 4 or pixels.shape[-1] != net.in_channels:
        raise ValidationError(
            f"expected (N, H, W, {net.in_channels}) images, got shape {pixels.shape}")
    net.eval()
    out = []
    with torch.inference_mode():
        for start in range(0, len(pixels), batch_size):
            out.append(net(to_tensor(pixels[start:start + batch_size])).double().numpy())
    feats = np.concatenate(out, axis=0)
    if not np.isfinite(feats).all():
        bad = [batch.sample_ids[i] for i in np.flatnonzero(~np.isfinite(feats).all(axis=1))]
        raise NumericalError("non-finite features", {"sample_ids": bad[:20]})
    return feats
