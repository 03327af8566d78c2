"""AUROC, per-class report tables and per-transform distance histograms."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .errors import ValidationError

# Mean AUROC (%) reported for the full-scale method (ResNet-18, 50 epochs, full
# datasets).  Rendered next to local results as annotations; never recomputed.
REFERENCE_MEANS = {
    "cifar10": {"SAD": 91.16, "SPA": 88.16, "SSA": 54.75},
    "cifar100": {"SAD": 88.35, "SPA": 88.21, "SSA": 44.11},
    "svhn": {"SAD": 90.82, "SPA": 86.47, "SSA": 50.94},
}


def _binary_labels(labels) -> np.ndarray:
    lab = np.asarray(labels)
    if lab.dtype.kind in "US" or lab.dtype == object:
        if not set(lab.tolist()) <= {"normal", "anomaly"}:
            raise ValidationError("string labels must be 'normal' or 'anomaly'")
        return (lab == "anomaly").astype(int)
    lab = lab.astype(int)
    if not set(np.unique(lab).tolist()) <= {0, 1}:
        raise ValidationError("numeric labels must be 0 (normal) or 1 (anomaly)")
    return lab


def auroc(scores, labels) -> float:
    """P(anomaly score > normal score) + 0.5 P(tie), via midranks.

    ``scores`` are oriented so that higher means more anomalous; ``labels``
    are 1/"anomaly" or 0/"normal".
    """
    s = np.asarray(scores, dtype=np.float64)
    y = _binary_labels(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise ValidationError("scores and labels must be 1-D of equal length")
    if not np.isfinite(s).all():
        raise ValidationError("scores must be finite")
    n1 = int(y.sum())
    n0 = len(y) - n1
    if n1 == 0 or n0 == 0:
        raise ValidationError("AUROC needs at least one normal and one anomaly")
    ranks = rankdata(s)  # average ranks for ties
    u = ranks[y == 1].sum() - n1 * (n1 + 1) / 2.0
    return float(u / (n1 * n0))


@dataclass
class ClassResult:
    auroc: float
    n_normal: int
    n_anomaly: int


@dataclass
class EvalReport:
    setup: str
    per_class: dict  # class_id -> ClassResult, in dataset class order
    fingerprint: dict = field(default_factory=dict)
    reference_mean: float | None = None

    @property
    def mean(self) -> float:
        return float(np.mean([r.auroc for r in self.per_class.values()]))

    def to_dict(self) -> dict:
        return {
            "setup": self.setup,
            "per_class": {c: {"auroc": r.auroc, "n_normal": r.n_normal, "n_anomaly": r.n_anomaly}
                          for c, r in self.per_class.items()},
            "class_order": list(self.per_class),
            "mean_auroc": self.mean,
            "fingerprint": self.fingerprint,
            "reference_mean_percent": self.reference_mean,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "EvalReport":
        order = doc.get("class_order", list(doc["per_class"]))
        per = {c: ClassResult(float(doc["per_class"][c]["auroc"]), int(doc["per_class"][c]["n_normal"]),
                              int(doc["per_class"][c]["n_anomaly"])) for c in order}
        return cls(doc["setup"], per, doc.get("fingerprint", {}), doc.get("reference_mean_percent"))


def per_class_table(results: dict, setup: str, class_order, fingerprint=None,
                    dataset_key: str | None = None) -> EvalReport:
    """Assemble per-class results (class -> ClassResult) into an ordered report.

    Raises if any class of ``class_order`` is missing from ``results``.
    """
    missing = [c for c in class_order if c not in results]
    if missing:
        raise ValidationError(f"missing results for classes {missing}")
    for c in class_order:
        a = results[c].auroc
        if not 0.0 <= a <= 1.0:
            raise ValidationError(f"AUROC for {c!r} outside [0, 1]: {a}")
    ref = REFERENCE_MEANS.get(dataset_key or "", {}).get(setup)
    return EvalReport(setup, {c: results[c] for c in class_order}, dict(fingerprint or {}), ref)


CSV_FIELDS = ("setup", "class_id", "auroc", "n_normal", "n_anomaly")


def render_csv(report: EvalReport) -> str:
    """Per-class rows then a ``mean`` row; AUROC written with full float precision."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for c, r in report.per_class.items():
        w.writerow([report.setup, c, repr(r.auroc), r.n_normal, r.n_anomaly])
    w.writerow([report.setup, "mean", repr(report.mean),
                sum(r.n_normal for r in report.per_class.values()),
                sum(r.n_anomaly for r in report.per_class.values())])
    if report.reference_mean is not None:
        w.writerow([report.setup, "reference_mean_percent", repr(report.reference_mean), "", ""])
    return buf.getvalue()


def parse_csv(text: str, setup: str | None = None) -> EvalReport:
    """Read one setup's table back (the first setup in the file by default)."""
    rows = list(csv.DictReader(io.StringIO(text)))
    if not rows:
        raise ValidationError("empty report table")
    setup = setup or rows[0]["setup"]
    rows = [r for r in rows if r["setup"] == setup]
    if not rows:
        raise ValidationError(f"no rows for setup {setup!r}")
    per = {}
    ref = None
    for row in rows:
        cid = row["class_id"]
        if cid == "mean":
            continue
        if cid == "reference_mean_percent":
            ref = float(row["auroc"])
            continue
        per[cid] = ClassResult(float(row["auroc"]), int(row["n_normal"]), int(row["n_anomaly"]))
    return EvalReport(setup, per, {}, ref)


def render_text(report: EvalReport) -> str:
    """Fixed-width table in percent, for terminals and READMEs."""
    lines = [f"{report.setup:<6} {'class':<12} {'AUROC %':>8} {'normal':>7} {'anomaly':>8}"]
    for c, r in report.per_class.items():
        lines.append(f"{'':<6} {c:<12} {100 * r.auroc:8.2f} {r.n_normal:7d} {r.n_anomaly:8d}")
    lines.append(f"{'':<6} {'mean':<12} {100 * report.mean:8.2f}")
    if report.reference_mean is not None:
        lines.append(f"{'':<6} {'reference':<12} {report.reference_mean:8.2f}  (full-scale published mean)")
    return "\n".join(lines)


def write_report(out_dir, reports: list, extra: dict | None = None):
    """Write ``report.json`` and ``report.csv``; contents depend only on the inputs."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = {"schema_version": 1, "reports": [r.to_dict() for r in reports]}
    if extra:
        doc.update(extra)
    (out_dir / "report.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    tables = [render_csv(r) for r in reports]
    # one header for the whole file
    (out_dir / "report.csv").write_text("".join(t if i == 0 else t.split("\n", 1)[1] for i, t in enumerate(tables)))
    return out_dir / "report.json"


def read_report(path) -> list:
    doc = json.loads(Path(path).read_text())
    return [EvalReport.from_dict(d) for d in doc["reports"]]


# ---------------------------------------------------------------------------
# distance histograms


def centroid_distances(reference, features) -> np.ndarray:
    """Euclidean distance of each (L2-normalized) row of ``features`` to the
    centroid of the L2-normalized ``reference`` rows."""
    ref = np.asarray(reference, dtype=np.float64)
    x = np.asarray(features, dtype=np.float64)
    ref = ref / np.linalg.norm(ref, axis=1, keepdims=True)
    x = x / np.linalg.norm(x, axis=1, keepdims=True)
    return np.linalg.norm(x - ref.mean(axis=0), axis=1)


def distance_histograms(normal_features, transformed_features: dict, bins: int = 30,
                        out_dir=None, title: str = "", min_images: int = 50) -> dict:
    """Histogram of per-sample distances to the normal centroid, per transform.

    Parameters
    ----------
    normal_features : (N, D) array
        Features of the untransformed class images.
    transformed_features : dict
        transform_id -> (N, D) features of the transformed images.
    out_dir : path, optional
        If given, writes ``histograms.png`` and ``histograms.json``.

    Returns
    -------
    dict
        transform_id -> {"edges", "counts", "mean"}; all transforms share edges.
    """
    normal_features = np.asarray(normal_features)
    if normal_features.shape[0] < min_images:
        raise ValidationError(f"need at least {min_images} images, got {normal_features.shape[0]}")
    dists = {t: centroid_distances(normal_features, f) for t, f in transformed_features.items()}
    hi = max(float(d.max()) for d in dists.values())
    edges = np.linspace(0.0, hi if hi > 0 else 1.0, bins + 1)
    out = {}
    for t, d in dists.items():
        counts, _ = np.histogram(d, bins=edges)
        out[t] = {"edges": edges.tolist(), "counts": counts.astype(int).tolist(), "mean": float(d.mean())}
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "histograms.json").write_text(json.dumps(out, indent=2, sort_keys=True) + "\n")
        _plot_histograms(out, out_dir / "histograms.png", title)
    return out


def _plot_histograms(hists: dict, path, title=""):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    for t, h in hists.items():
        edges = np.asarray(h["edges"])
        ax.stairs(h["counts"], edges, label=f"{t} (mean {h['mean']:.3f})", fill=False)
    ax.set_xlabel("distance to normal centroid")
    ax.set_ylabel("count")
    if title:
        ax.set_title(title)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
