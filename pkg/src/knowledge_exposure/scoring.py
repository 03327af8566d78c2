"""One-class SVM anomaly scoring on learned or raw backend features."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
from sklearn.svm import OneClassSVM

from .errors import ConfigurationError, NumericalError, ValidationError

logger = logging.getLogger(__name__)

FEATURE_SOURCES = ("trained_model", "raw_backend")


@dataclass
class ScorerConfig:
    kernel: str = "sigmoid"
    nu: float = 0.1
    gamma: float | None = None  # None -> 1 / D
    coef0: float = 0.0
    # kernel entries on unit vectors are O(gamma), so libsvm's default 1e-3 is too coarse
    tol: float = 1e-6
    normalize: bool = True
    feature_source: str = "trained_model"
    include_positives: bool = False

    def __post_init__(self):
        problems = self.problems()
        if problems:
            raise ConfigurationError("; ".join(problems))

    def problems(self) -> list[str]:
        out = []
        if not 0 < self.nu <= 1:
            out.append("nu must be in (0, 1]")
        if not self.tol > 0:
            out.append("tol must be > 0")
        if self.gamma is not None and not self.gamma > 0:
            out.append("gamma must be > 0")
        if self.feature_source not in FEATURE_SOURCES:
            out.append(f"feature_source must be one of {FEATURE_SOURCES}")
        if self.kernel not in ("sigmoid", "rbf", "linear", "poly"):
            out.append(f"unsupported kernel {self.kernel!r}")
        return out


@dataclass(frozen=True)
class AnomalyScore:
    sample_id: str
    decision_value: float
    binary_label: int
    anomaly_score: float


@dataclass
class ScoreModel:
    svm: OneClassSVM
    config: ScorerConfig
    feature_dim: int
    normalized: bool


def _prepare(features, normalize):
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ValidationError(f"features must be 2-D, got shape {x.shape}")
    if not np.isfinite(x).all():
        raise NumericalError("non-finite features", {"rows": np.flatnonzero(~np.isfinite(x).all(axis=1))[:20].tolist()})
    if normalize:
        norms = np.linalg.norm(x, axis=1, keepdims=True)
        x = x / np.where(norms > 0, norms, 1.0)
    return x


def fit_scorer(train_features, cfg: ScorerConfig | None = None) -> ScoreModel:
    """Fit a one-class SVM on normal-class features."""
    cfg = cfg or ScorerConfig()
    x = np.asarray(train_features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 10:
        raise ValidationError(f"need at least 10 training rows, got shape {x.shape}")
    normalize = cfg.normalize
    if np.all(x.std(axis=0) == 0):
        warnings.warn("training features have zero variance; fitting on raw values", RuntimeWarning)
        normalize = False
    x = _prepare(x, normalize)
    gamma = cfg.gamma if cfg.gamma is not None else 1.0 / x.shape[1]
    svm = OneClassSVM(kernel=cfg.kernel, nu=cfg.nu, gamma=gamma, coef0=cfg.coef0, tol=cfg.tol)
    svm.fit(x)
    return ScoreModel(svm, cfg, x.shape[1], normalize)


def decision_values(model: ScoreModel, features) -> np.ndarray:
    x = _prepare(features, model.normalized)
    if x.shape[1] != model.feature_dim:
        raise ValidationError(f"feature dimension {x.shape[1]} does not match model ({model.feature_dim})")
    return model.svm.decision_function(x).astype(np.float64)


def score(model: ScoreModel, test_features, sample_ids=None) -> list[AnomalyScore]:
    """Continuous and binary one-class SVM outputs for each test row."""
    dv = decision_values(model, test_features)
    if sample_ids is None:
        sample_ids = [str(i) for i in range(len(dv))]
    if len(sample_ids) != len(dv):
        raise ValidationError("sample_ids length does not match features")
    return [AnomalyScore(str(s), float(d), 1 if d >= 0 else -1, float(-d)) for s, d in zip(sample_ids, dv)]


def raw_feature_baseline(backend, train_images, test_images, cfg: ScorerConfig | None = None,
                         batch_size: int = 256) -> list[AnomalyScore]:
    """Score test images with a one-class SVM on untrained backend embeddings."""
    from .encoders import embed

    cfg = cfg or ScorerConfig(feature_source="raw_backend")
    tr = embed(backend, train_images, normalize=False, batch_size=batch_size)
    te = embed(backend, test_images, normalize=False, batch_size=batch_size)
    return score(fit_scorer(tr.matrix, cfg), te.matrix, te.sample_ids)
