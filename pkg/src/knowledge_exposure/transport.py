"""Wasserstein distances between embedding sets and the per-class transform ranking.

Three estimators of the 1-Wasserstein distance between two empirical
distributions with uniform weights:

``exact``
    Optimal assignment on the full cost matrix.  With equal set sizes and
    uniform weights an optimal coupling exists among permutation matrices, so
    this is the exact W1.
``sliced``
    Mean of 1-D W1 distances over random unit projections.  Not equal to W1
    (it is smaller by a dimension-dependent factor) but monotone enough in
    practice for ranking.
``entropic``
    Sinkhorn iterations in the log domain; returns the transport cost of the
    entropic plan.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist
from scipy.special import logsumexp

from .encoders import IDENTITY, EmbeddingSet
from .errors import ConfigurationError, NumericalError, ValidationError
from .seeding import rng_for

METHODS = ("exact", "sliced", "entropic")
COSTS = ("euclidean", "cosine")


@dataclass
class TransportConfig:
    method: str = "sliced"
    cost: str = "euclidean"
    n_projections: int = 512
    epsilon: float = 0.05
    max_samples: int = 2000
    seed: int = 0
    max_iter: int = 10000
    tol: float = 1e-5

    def __post_init__(self):
        problems = self.problems()
        if problems:
            raise ConfigurationError("; ".join(problems))

    def problems(self) -> list[str]:
        out = []
        if self.method not in METHODS:
            out.append(f"method must be one of {METHODS}, got {self.method!r}")
        if self.cost not in COSTS:
            out.append(f"cost must be one of {COSTS}, got {self.cost!r}")
        if self.n_projections < 1:
            out.append("n_projections must be >= 1")
        if not self.epsilon > 0:
            out.append("epsilon must be > 0")
        if self.max_samples < 1:
            out.append("max_samples must be >= 1")
        if self.max_iter < 1:
            out.append("max_iter must be >= 1")
        return out


@dataclass
class TransformRanking:
    class_id: str
    entries: list = field(default_factory=list)

    def __post_init__(self):
        self.entries = sorted(((str(t), float(d)) for t, d in self.entries),
                              key=lambda e: (e[1], e[0]))
        for t, d in self.entries:
            if not math.isfinite(d) or d < 0:
                raise ValidationError(f"distance for {t!r} must be finite and >= 0, got {d}")

    @property
    def transform_ids(self):
        return [t for t, _ in self.entries]

    def distance(self, transform_id):
        return dict(self.entries)[transform_id]

    def covers(self, ids) -> bool:
        return set(self.transform_ids) == set(ids)


@dataclass(frozen=True)
class PairPolicy:
    class_id: str
    K: int
    positives: tuple
    negatives: tuple

    def __post_init__(self):
        if set(self.positives) & set(self.negatives):
            raise ValidationError("positive and negative transforms overlap")
        if len(self.positives) != self.K or len(self.negatives) != self.K:
            raise ValidationError("policy must list exactly K positives and K negatives")


# ---------------------------------------------------------------------------
# estimators


def _as_matrix(x) -> np.ndarray:
    m = x.matrix if isinstance(x, EmbeddingSet) else x
    m = np.asarray(m, dtype=np.float64)
    if m.ndim == 1:
        m = m[:, None]
    if m.ndim != 2 or m.shape[0] == 0:
        raise ValidationError(f"expected a non-empty N x D point set, got shape {m.shape}")
    return m


def _subsample(m, cap, seed):
    if m.shape[0] <= cap:
        return m
    idx = np.sort(rng_for(seed, "subsample", m.shape[0]).choice(m.shape[0], cap, replace=False))
    return m[idx]


def cost_matrix(a, b, cost="euclidean"):
    if cost == "euclidean":
        return cdist(a, b, metric="euclidean")
    if cost == "cosine":
        return np.clip(cdist(a, b, metric="cosine"), 0.0, 2.0)
    raise ConfigurationError(f"unknown cost {cost!r}")


def exact_w1(a, b, cost="euclidean") -> float:
    a, b = _as_matrix(a), _as_matrix(b)
    if a.shape[0] != b.shape[0]:
        raise ValidationError(
            f"exact solver needs equal-size sets, got {a.shape[0]} and {b.shape[0]}")
    c = cost_matrix(a, b, cost)
    rows, cols = linear_sum_assignment(c)
    return float(c[rows, cols].mean())


def _w1_1d(pa, pb):
    """Column-wise 1-D W1 between the empirical distributions of ``pa`` and ``pb``."""
    sa, sb = np.sort(pa, axis=0), np.sort(pb, axis=0)
    n, m = sa.shape[0], sb.shape[0]
    if n == m:
        return np.abs(sa - sb).mean(axis=0)
    u = np.union1d(np.arange(1, n + 1) / n, np.arange(1, m + 1) / m)
    du = np.diff(np.concatenate([[0.0], u]))
    mid = u - du / 2
    ia = np.minimum((mid * n).astype(int), n - 1)
    ib = np.minimum((mid * m).astype(int), m - 1)
    return (np.abs(sa[ia] - sb[ib]) * du[:, None]).sum(axis=0)


def sliced_w1(a, b, n_projections=512, seed=0, return_se=False):
    """Sliced W1 with seed-fixed projection directions.

    With ``return_se`` also returns the Monte-Carlo standard error
    (std over projections / sqrt(n_projections)).
    """
    a, b = _as_matrix(a), _as_matrix(b)
    d = a.shape[1]
    theta = rng_for(seed, "projections", d, n_projections).standard_normal((n_projections, d))
    theta /= np.linalg.norm(theta, axis=1, keepdims=True)
    per_proj = _w1_1d(a @ theta.T, b @ theta.T)
    value = float(per_proj.mean())
    if return_se:
        se = float(per_proj.std(ddof=1) / np.sqrt(n_projections)) if n_projections > 1 else float("inf")
        return value, se
    return value


def _sinkhorn_potentials(c, epsilon, f, g, log_a, log_b, max_iter, tol):
    n = c.shape[0]
    err = np.inf
    for it in range(1, max_iter + 1):
        f = epsilon * (log_a - logsumexp((g[None, :] - c) / epsilon, axis=1))
        g = epsilon * (log_b - logsumexp((f[:, None] - c) / epsilon, axis=0))
        if it % 10 == 0 or it == max_iter:
            row = np.exp(logsumexp((f[:, None] + g[None, :] - c) / epsilon, axis=1))
            err = float(np.abs(row - 1.0 / n).sum())
            if not np.isfinite(err) or err < tol:
                return f, g, it, err
    return f, g, max_iter, err


def entropic_w1(a, b, epsilon=0.05, cost="euclidean", max_iter=10000, tol=1e-5) -> float:
    """Transport cost of the entropy-regularized optimal plan (log-domain Sinkhorn).

    The regularization is annealed from the largest cost down to ``epsilon``,
    warm-starting the dual potentials at each stage; only the final stage is
    held to ``tol`` (L1 error of the row marginals).
    """
    a, b = _as_matrix(a), _as_matrix(b)
    c = cost_matrix(a, b, cost)
    n, m = c.shape
    log_a, log_b = np.full(n, -np.log(n)), np.full(m, -np.log(m))
    f, g = np.zeros(n), np.zeros(m)
    stage_eps = max(float(c.max()), epsilon)
    used = 0
    while stage_eps > epsilon:
        f, g, it, _ = _sinkhorn_potentials(c, stage_eps, f, g, log_a, log_b, 200, 1e-3)
        used += it
        stage_eps = max(stage_eps / 4.0, epsilon)
    f, g, it, err = _sinkhorn_potentials(c, epsilon, f, g, log_a, log_b, max_iter, tol)
    used += it
    if np.isfinite(err) and err < tol:
        return float(np.sum(np.exp((f[:, None] + g[None, :] - c) / epsilon) * c))
    raise NumericalError(
        "Sinkhorn did not converge",
        {"iterations": used, "final_stage_iterations": it, "marginal_error": err,
         "epsilon": epsilon, "tol": tol},
    )


def wasserstein(a, b, cfg: TransportConfig | None = None) -> float:
    """Approximate 1-Wasserstein distance between two embedding sets under ``cfg``."""
    cfg = cfg or TransportConfig()
    a, b = _as_matrix(a), _as_matrix(b)
    if a.shape[1] != b.shape[1]:
        raise ValidationError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    a = _subsample(a, cfg.max_samples, cfg.seed)
    b = _subsample(b, cfg.max_samples, cfg.seed)
    if cfg.method == "exact":
        return exact_w1(a, b, cfg.cost)
    if cfg.method == "entropic":
        return entropic_w1(a, b, cfg.epsilon, cfg.cost, cfg.max_iter, cfg.tol)
    if cfg.cost == "cosine":
        a = a / np.linalg.norm(a, axis=1, keepdims=True)
        b = b / np.linalg.norm(b, axis=1, keepdims=True)
    return sliced_w1(a, b, cfg.n_projections, cfg.seed)


# ---------------------------------------------------------------------------
# ranking and pair selection


def rank_transforms(identity, transformed: dict, cfg: TransportConfig | None = None,
                    class_id: str | None = None) -> TransformRanking:
    """Distance from the original set to each transformed set, ascending."""
    cfg = cfg or TransportConfig()
    if class_id is None:
        class_id = identity.class_id if isinstance(identity, EmbeddingSet) else ""
    entries = []
    for tid in sorted(transformed):
        if tid == IDENTITY:
            continue
        entries.append((tid, wasserstein(identity, transformed[tid], cfg)))
    return TransformRanking(class_id, entries)


def select_pairs(ranking: TransformRanking, K: int) -> PairPolicy:
    """The K closest transforms become positives, the K farthest negatives."""
    n = len(ranking.entries)
    if not isinstance(K, (int, np.integer)) or K < 1 or K > 5 or 2 * K > n:
        raise ValidationError(f"K must satisfy 1 <= K <= 5 and 2K <= {n}, got {K}")
    ids = ranking.transform_ids
    return PairPolicy(ranking.class_id, int(K), tuple(ids[:K]), tuple(ids[n - K:]))


def ranking_document(ranking: TransformRanking, policy: PairPolicy | None, encoder_id: str,
                     severity: int, **extra) -> dict:
    doc = {
        "class_id": ranking.class_id,
        "encoder_id": encoder_id,
        "severity": int(severity),
        "entries": [{"transform": t, "distance": d} for t, d in ranking.entries],
    }
    if policy is not None:
        doc["policy"] = {"K": policy.K, "positives": list(policy.positives),
                         "negatives": list(policy.negatives)}
    doc.update(extra)
    return doc


def write_ranking(path, ranking, policy, encoder_id, severity, **extra):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = ranking_document(ranking, policy, encoder_id, severity, **extra)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def parse_ranking(doc: dict):
    """Inverse of :func:`ranking_document`: returns ``(ranking, policy_or_None)``."""
    ranking = TransformRanking(doc["class_id"],
                               [(e["transform"], e["distance"]) for e in doc["entries"]])
    policy = None
    if "policy" in doc:
        p = doc["policy"]
        policy = PairPolicy(doc["class_id"], int(p["K"]), tuple(p["positives"]), tuple(p["negatives"]))
    return ranking, policy


def read_ranking(path):
    return parse_ranking(json.loads(Path(path).read_text()))
