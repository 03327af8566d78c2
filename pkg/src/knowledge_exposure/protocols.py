"""Evaluation protocol manifests: SAD, SPA and SSA.

SAD
    One-vs-rest on the untouched test split.
SPA
    Every test sample gets either no transform or one uniformly drawn bank
    transform; labels depend on the class only.
SSA
    As SPA, but a normal-class sample carrying a transform that the semantic
    map marks ``shifting`` becomes an anomaly.  Default severity is 6.

Manifests are plain JSON and fully determined by (dataset, setup, class,
severity, seed, semantic map).
"""

from __future__ import annotations

import json
import os
import tempfile
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, ParseError, ValidationError
from .seeding import derive_seed, rng_for
from .transforms import ImageBatch, apply_by_id, transform_ids
from .transport import TransformRanking

SCHEMA_VERSION = 1
GENERATOR_VERSION = "protocols/1"
SETUPS = ("SAD", "SPA", "SSA")
VERDICTS = ("preserving", "shifting")
NORMAL, ANOMALY = "normal", "anomaly"


# ---------------------------------------------------------------------------
# semantic map


@dataclass
class SemanticMap:
    """``class_id -> transform_id -> (verdict, provenance)``."""

    entries: dict = field(default_factory=dict)

    def verdict(self, class_id: str, transform_id: str) -> str:
        return self.entries[class_id][transform_id][0]

    def provenance(self, class_id: str, transform_id: str) -> str:
        return self.entries[class_id][transform_id][1]

    def set(self, class_id, transform_id, verdict, provenance):
        if verdict not in VERDICTS:
            raise ValidationError(f"verdict must be one of {VERDICTS}, got {verdict!r}")
        self.entries.setdefault(class_id, {})[transform_id] = (verdict, provenance)

    def missing(self, class_id: str, bank=None) -> list[str]:
        bank = tuple(bank) if bank is not None else transform_ids()
        have = self.entries.get(class_id, {})
        return [t for t in bank if t not in have]

    def shifting(self, class_id: str) -> list[str]:
        return sorted(t for t, (v, _) in self.entries.get(class_id, {}).items() if v == "shifting")

    def to_dict(self) -> dict:
        return {c: {t: {"verdict": v, "provenance": p} for t, (v, p) in sorted(m.items())}
                for c, m in sorted(self.entries.items())}

    @classmethod
    def from_dict(cls, doc: dict) -> "SemanticMap":
        sm = cls()
        for c, m in doc.items():
            for t, e in m.items():
                sm.set(c, t, e["verdict"], e["provenance"])
        return sm

    def merged(self, other: "SemanticMap") -> "SemanticMap":
        out = SemanticMap.from_dict(self.to_dict())
        for c, m in other.entries.items():
            for t, (v, p) in m.items():
                out.set(c, t, v, p)
        return out


def parse_overrides(text: str, bank=None) -> list[tuple]:
    """Parse ``class transform verdict`` lines; ``#`` starts a comment.

    Returns a list of ``(class_id, transform_id, verdict, line_number)``.
    """
    bank = set(bank) if bank is not None else set(transform_ids())
    out = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 3:
            raise ParseError(f"expected 'class transform verdict', got {raw.strip()!r}", lineno)
        cls_id, tid, verdict = parts
        if tid not in bank:
            raise ParseError(f"unknown transform {tid!r}", lineno)
        if verdict not in VERDICTS:
            raise ParseError(f"verdict must be one of {VERDICTS}, got {verdict!r}", lineno)
        out.append((cls_id, tid, verdict, lineno))
    return out


def derive_semantic_map(ranking: TransformRanking, K: int, overrides=None, bank=None) -> SemanticMap:
    """Top-K (farthest) transforms are ``shifting``, everything else ``preserving``.

    ``overrides`` may be a path, a string of override lines, or a parsed
    list; override entries win and are tagged ``human_override``.
    """
    bank = tuple(bank) if bank is not None else transform_ids()
    if not ranking.covers(bank):
        raise ValidationError("ranking does not cover the transform bank")
    n = len(ranking.entries)
    if K < 1 or 2 * K > n:
        raise ValidationError(f"K must satisfy 1 <= K and 2K <= {n}, got {K}")
    sm = SemanticMap()
    ids = ranking.transform_ids
    for i, tid in enumerate(ids):
        sm.set(ranking.class_id, tid, "shifting" if i >= n - K else "preserving", "ke_ranking")
    for cls_id, tid, verdict, _ in _resolve_overrides(overrides, bank):
        sm.set(cls_id, tid, verdict, "human_override")
    return sm


def _resolve_overrides(overrides, bank):
    if overrides is None:
        return []
    if isinstance(overrides, (list, tuple)):
        return overrides
    if isinstance(overrides, Path) or (isinstance(overrides, str) and "\n" not in overrides
                                       and os.path.exists(overrides)):
        return parse_overrides(Path(overrides).read_text(), bank)
    return parse_overrides(str(overrides), bank)


# ---------------------------------------------------------------------------
# manifests


@dataclass(frozen=True)
class ManifestRecord:
    sample_id: str
    class_id: str
    transform_id: str | None
    ground_truth: str


@dataclass
class ProtocolManifest:
    setup: str
    dataset_id: str
    normal_class: str
    severity: int
    seed: int
    records: list
    semantic_map: dict | None = None
    generator_version: str = GENERATOR_VERSION

    def __post_init__(self):
        if self.setup not in SETUPS:
            raise ValidationError(f"setup must be one of {SETUPS}")

    def labels(self) -> np.ndarray:
        """1 for anomaly, 0 for normal, in record order."""
        return np.array([r.ground_truth == ANOMALY for r in self.records], dtype=int)

    def counts(self) -> dict:
        out = {NORMAL: 0, ANOMALY: 0}
        for r in self.records:
            out[r.ground_truth] += 1
        return out

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "generator_version": self.generator_version,
            "setup": self.setup,
            "dataset_id": self.dataset_id,
            "normal_class": self.normal_class,
            "severity": self.severity,
            "seed": self.seed,
            "semantic_map": self.semantic_map,
            "records": [[r.sample_id, r.class_id, r.transform_id, r.ground_truth] for r in self.records],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ProtocolManifest":
        if doc.get("schema_version") != SCHEMA_VERSION:
            raise ValidationError(f"unsupported manifest schema_version {doc.get('schema_version')!r}")
        return cls(doc["setup"], doc["dataset_id"], doc["normal_class"], int(doc["severity"]),
                   int(doc["seed"]), [ManifestRecord(*r) for r in doc["records"]],
                   doc.get("semantic_map"), doc.get("generator_version", GENERATOR_VERSION))

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")) + "\n"


def write_manifest(path, manifest: ProtocolManifest):
    """Atomic write (temp file in the same directory, then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as f:
            f.write(manifest.dumps())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def read_manifest(path) -> ProtocolManifest:
    return ProtocolManifest.from_dict(json.loads(Path(path).read_text()))


def _check_class(dataset, normal_class):
    if normal_class not in dataset.classes:
        raise ValidationError(f"unknown class {normal_class!r}; dataset has {list(dataset.classes)}")


def _check_severity(severity):
    if not 1 <= int(severity) <= 6:
        raise ValidationError(f"severity must be in [1, 6], got {severity}")


def draw_transform(seed: int, sample_id: str, bank) -> str | None:
    """Uniform draw over ``[None] + bank`` for one sample."""
    k = int(rng_for(seed, "protocol-transform", sample_id).integers(0, len(bank) + 1))
    return None if k == 0 else bank[k - 1]


def build_sad(dataset, normal_class: str, seed: int = 0) -> ProtocolManifest:
    _check_class(dataset, normal_class)
    test = dataset.test
    records = [ManifestRecord(sid, c, None, NORMAL if c == normal_class else ANOMALY)
               for sid, c in zip(test.batch.sample_ids, test.labels)]
    return ProtocolManifest("SAD", dataset.dataset_id, normal_class, 0, int(seed), records)


def build_spa(dataset, normal_class: str, bank=None, severity: int = 1, seed: int = 0) -> ProtocolManifest:
    _check_class(dataset, normal_class)
    _check_severity(severity)
    bank = tuple(bank) if bank is not None else transform_ids()
    test = dataset.test
    records = [ManifestRecord(sid, c, draw_transform(seed, sid, bank),
                              NORMAL if c == normal_class else ANOMALY)
               for sid, c in zip(test.batch.sample_ids, test.labels)]
    return ProtocolManifest("SPA", dataset.dataset_id, normal_class, int(severity), int(seed), records)


def build_ssa(dataset, normal_class: str, semantic_map: SemanticMap, bank=None, severity: int = 6,
              seed: int = 0) -> ProtocolManifest:
    _check_class(dataset, normal_class)
    _check_severity(severity)
    bank = tuple(bank) if bank is not None else transform_ids()
    missing = semantic_map.missing(normal_class, bank)
    if missing:
        raise ValidationError(f"semantic map lacks verdicts for class {normal_class!r}: {missing}")
    test = dataset.test
    records = []
    for sid, c in zip(test.batch.sample_ids, test.labels):
        tid = draw_transform(seed, sid, bank)
        if c != normal_class:
            gt = ANOMALY
        elif tid is None or semantic_map.verdict(normal_class, tid) == "preserving":
            gt = NORMAL
        else:
            gt = ANOMALY
        records.append(ManifestRecord(sid, c, tid, gt))
    class_map = {normal_class: semantic_map.to_dict()[normal_class]}
    return ProtocolManifest("SSA", dataset.dataset_id, normal_class, int(severity), int(seed), records,
                            semantic_map=class_map)


def build_protocol(setup: str, dataset, normal_class: str, *, semantic_map=None, bank=None,
                   severity: int | None = None, seed: int = 0) -> ProtocolManifest:
    if setup == "SAD":
        return build_sad(dataset, normal_class, seed)
    if setup == "SPA":
        return build_spa(dataset, normal_class, bank, 1 if severity is None else severity, seed)
    if setup == "SSA":
        if semantic_map is None:
            raise ConfigurationError("SSA needs a semantic map")
        return build_ssa(dataset, normal_class, semantic_map, bank, 6 if severity is None else severity, seed)
    raise ConfigurationError(f"unknown setup {setup!r}")


def materialize(manifest: ProtocolManifest, dataset) -> ImageBatch:
    """Test images with each record's transform applied, in record order."""
    if manifest.dataset_id != dataset.dataset_id:
        raise ValidationError(f"manifest is for dataset {manifest.dataset_id!r}, got {dataset.dataset_id!r}")
    ids = [r.sample_id for r in manifest.records]
    try:
        pixels = dataset.pixels_of(ids)
    except KeyError as e:
        raise ValidationError(f"manifest sample {e.args[0]!r} not found in dataset") from None
    groups = defaultdict(list)
    for i, r in enumerate(manifest.records):
        if r.transform_id is not None:
            groups[r.transform_id].append(i)
    apply_seed = derive_seed(manifest.seed, "protocol-apply")
    sev = max(manifest.severity, 1)
    for tid, rows in sorted(groups.items()):
        sub = ImageBatch(pixels[rows], tuple(ids[i] for i in rows))
        pixels[rows] = apply_by_id(tid, sub, apply_seed, sev).pixels
    return ImageBatch(pixels, tuple(ids))
