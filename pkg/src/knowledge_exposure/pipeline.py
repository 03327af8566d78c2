"""End-to-end orchestration: embed -> rank -> build protocols -> train -> score -> eval.

A run is described by one JSON config.  All stage seeds derive from the
top-level ``seed``; the fully resolved config is written into the run
directory as ``config.resolved.json`` and can be fed back in to reproduce the
run.
"""

from __future__ import annotations

import copy
import csv
import dataclasses
import json
import logging
import os
import traceback
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cache import EmbeddingCache
from .contrastive import FeatureModel, TrainConfig, extract_features, train
from .datasets import PROCEDURAL_CLASSES, Dataset, load_dataset
from .encoders import IDENTITY, check_backend_id, embed, embed_all_transforms, make_backend
from .errors import ConfigurationError, KnowledgeExposureError, ParseError
from .evaluation import ClassResult, auroc, distance_histograms, per_class_table, write_report
from .protocols import (SETUPS, ProtocolManifest, SemanticMap, build_protocol, derive_semantic_map,
                        materialize, parse_overrides, write_manifest)
from .scoring import ScorerConfig, fit_scorer, score
from .seeding import derive_seed
from .transforms import apply_by_id, transform_ids
from .transport import PairPolicy, TransportConfig, rank_transforms, select_pairs, write_ranking

logger = logging.getLogger(__name__)

DATA_ENV = "KE_DATA_ROOT"
LOADERS = ("procedural", "image-folder", "cifar10")
SEED_MODULUS = 2 ** 31 - 1

DEFAULT_CONFIG = {
    "seed": 0,
    "output_dir": "runs/default",
    "cache_dir": None,
    "dataset": {
        "loader": "procedural",
        "path": None,
        "classes": None,
        "train_per_class": None,
        "test_per_class": None,
        "n_train": 200,
        "n_test": 100,
        "image_size": 32,
    },
    "normal_classes": None,
    "encoder": {"backend": "random-resnet:16", "batch_size": 256},
    "transport": {},
    "train": {},
    "scorer": {},
    "protocol": {
        "setups": ["SAD", "SPA", "SSA"],
        "rank_severity": 1,
        "spa_severity": 1,
        "ssa_severity": 6,
        "overrides": None,
    },
    "histograms": True,
    "embed_seed": None,
}


@dataclass
class Diagnostic:
    field: str
    message: str
    hint: str = ""

    def __str__(self):
        return f"{self.field}: {self.message}" + (f" (hint: {self.hint})" if self.hint else "")


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in (override or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(path) -> dict:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ParseError(f"{path}: {e.msg}", e.lineno) from None
    if not isinstance(doc, dict):
        raise ParseError(f"{path}: top level must be an object")
    return doc


def _unchecked(cls, values: dict):
    """Instance of a config dataclass without running its validation."""
    obj = cls.__new__(cls)
    for f in dataclasses.fields(cls):
        setattr(obj, f.name, values.get(f.name, f.default))
    return obj


def _dataclass_problems(cls, section: str, values, diags):
    if not isinstance(values, dict):
        diags.append(Diagnostic(section, "must be an object"))
        return
    names = {f.name for f in dataclasses.fields(cls)}
    for k in values:
        if k not in names:
            diags.append(Diagnostic(f"{section}.{k}", "unknown field", f"valid fields: {sorted(names)}"))
    try:
        probs = _unchecked(cls, {k: v for k, v in values.items() if k in names}).problems()
    except TypeError as e:
        probs = [f"wrong value type ({e})"]
    for p in probs:
        # problem messages lead with the offending field ("2K ..." is about K)
        head = p.split()[0].lstrip("2")
        where = f"{section}.{head}" if head in names else section
        diags.append(Diagnostic(where, p, _HINTS.get(p, "")))


_HINTS = {
    "2K exceeds transform bank size": f"use K <= {len(transform_ids()) // 2}",
    "temperature must be > 0": "the default is 0.2",
    "nu must be in (0, 1]": "the default is 0.1",
}


def validate_config(config: dict) -> list[Diagnostic]:
    """Every invalid or missing field, with a remedy hint.  Empty list means valid."""
    diags: list[Diagnostic] = []
    known = set(DEFAULT_CONFIG)
    for k in config:
        if k not in known:
            diags.append(Diagnostic(k, "unknown top-level field", f"valid fields: {sorted(known)}"))
    cfg = _merge(DEFAULT_CONFIG, config)
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        diags.append(Diagnostic("seed", "must be a non-negative integer"))
    if not cfg["output_dir"]:
        diags.append(Diagnostic("output_dir", "missing", "set a directory for run artifacts"))

    ds = cfg["dataset"]
    loader = ds.get("loader")
    if loader not in LOADERS:
        diags.append(Diagnostic("dataset.loader", f"unknown loader {loader!r}", f"one of {LOADERS}"))
    elif loader != "procedural":
        path = ds.get("path") or os.environ.get(DATA_ENV)
        if not path:
            diags.append(Diagnostic("dataset.path", "missing", f"set dataset.path or ${DATA_ENV}"))
        elif not Path(path).exists():
            diags.append(Diagnostic("dataset.path", f"{path} does not exist", "check the dataset location"))
    else:
        for c in ds.get("classes") or []:
            if c not in PROCEDURAL_CLASSES:
                diags.append(Diagnostic("dataset.classes", f"unknown procedural class {c!r}",
                                        f"one of {PROCEDURAL_CLASSES}"))
    for key in ("train_per_class", "test_per_class"):
        v = ds.get(key)
        if v is not None and (not isinstance(v, int) or v < 1):
            diags.append(Diagnostic(f"dataset.{key}", "must be a positive integer or null"))

    enc = cfg["encoder"]
    msg = check_backend_id(enc.get("backend", ""))
    if msg:
        diags.append(Diagnostic("encoder.backend", msg, "e.g. 'pixels', 'random-resnet:16', "
                                "'torchvision:resnet18@weights.pth', 'open_clip:ViT-B-32/openai'"))

    _dataclass_problems(TransportConfig, "transport", cfg["transport"], diags)
    _dataclass_problems(TrainConfig, "train", cfg["train"], diags)
    _dataclass_problems(ScorerConfig, "scorer", cfg["scorer"], diags)

    proto = cfg["protocol"]
    for s in proto.get("setups", []):
        if s not in SETUPS:
            diags.append(Diagnostic("protocol.setups", f"unknown setup {s!r}", f"one of {SETUPS}"))
    for key in ("rank_severity", "spa_severity", "ssa_severity"):
        v = proto.get(key)
        if not isinstance(v, int) or not 1 <= v <= 6:
            diags.append(Diagnostic(f"protocol.{key}", "must be an integer in [1, 6]"))
    ov = proto.get("overrides")
    if ov:
        if not Path(ov).exists():
            diags.append(Diagnostic("protocol.overrides", f"{ov} does not exist"))
        else:
            try:
                parse_overrides(Path(ov).read_text())
            except ParseError as e:
                diags.append(Diagnostic("protocol.overrides", str(e), "format: 'class transform verdict'"))
    return diags


def resolve_config(config: dict) -> dict:
    """Fill defaults and pin every stage seed to a function of the top-level seed."""
    cfg = _merge(DEFAULT_CONFIG, config)
    seed = cfg["seed"]
    cfg["transport"] = dataclasses.asdict(TransportConfig(**{
        **cfg["transport"], "seed": derive_seed(seed, "transport") % SEED_MODULUS}))
    cfg["train"] = dataclasses.asdict(TrainConfig(**{
        **cfg["train"], "seed": derive_seed(seed, "train") % SEED_MODULUS}))
    cfg["scorer"] = dataclasses.asdict(ScorerConfig(**cfg["scorer"]))
    cfg["protocol"]["seed"] = derive_seed(seed, "protocol") % SEED_MODULUS
    cfg["embed_seed"] = derive_seed(seed, "embed") % SEED_MODULUS
    if cfg["dataset"]["loader"] == "procedural":
        cfg["dataset"]["seed"] = derive_seed(seed, "data") % SEED_MODULUS
    elif not cfg["dataset"].get("path"):
        cfg["dataset"]["path"] = os.environ.get(DATA_ENV)
    return cfg


# ---------------------------------------------------------------------------
# stages


class StageError(KnowledgeExposureError):
    def __init__(self, stage, cause):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


def _write_json(path, doc):
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _dataset(cfg) -> Dataset:
    spec = dict(cfg["dataset"])
    return load_dataset(spec)


def stage_rank(backend, dataset, class_id, cfg, cache, out_dir):
    images = dataset.class_images(class_id, "train")
    sets = embed_all_transforms(backend, images, severity=cfg["protocol"]["rank_severity"],
                                seed=cfg["embed_seed"], cache=cache, dataset_id=dataset.dataset_id,
                                class_id=class_id, batch_size=cfg["encoder"]["batch_size"])
    ranking = rank_transforms(sets[IDENTITY], sets, TransportConfig(**cfg["transport"]), class_id=class_id)
    policy = select_pairs(ranking, cfg["train"]["K"])
    write_ranking(out_dir / f"ranking_{class_id}.json", ranking, policy, backend.backend_id,
                  cfg["protocol"]["rank_severity"], estimator=cfg["transport"]["method"])
    return ranking, policy


def stage_protocols(dataset, class_id, ranking, cfg, out_dir):
    proto = cfg["protocol"]
    sm = derive_semantic_map(ranking, cfg["train"]["K"], proto.get("overrides"))
    _write_json(out_dir / f"semantic_map_{class_id}.json", sm.to_dict())
    manifests = {}
    for setup in proto["setups"]:
        sev = {"SAD": None, "SPA": proto["spa_severity"], "SSA": proto["ssa_severity"]}[setup]
        m = build_protocol(setup, dataset, class_id, semantic_map=sm, severity=sev, seed=proto["seed"])
        write_manifest(out_dir / f"manifest_{setup}_{class_id}.json", m)
        manifests[setup] = m
    return manifests


def write_scores_csv(path, manifest: ProtocolManifest, scores):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["sample_id", "transform_id", "true_label", "decision_value", "anomaly_score", "binary_label"])
        for r, s in zip(manifest.records, scores):
            w.writerow([r.sample_id, r.transform_id or "none", r.ground_truth,
                        repr(s.decision_value), repr(s.anomaly_score), s.binary_label])


def read_scores_csv(path):
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return np.array([float(r["anomaly_score"]) for r in rows]), [r["true_label"] for r in rows]


def _featurizer(model, backend, cfg):
    if model is not None:
        return lambda batch: extract_features(model, batch)
    return lambda batch: embed(backend, batch, normalize=False, batch_size=cfg["encoder"]["batch_size"]).matrix


def stage_score(featurize, dataset, class_id, manifests, cfg, out_dir, policy=None):
    sc = ScorerConfig(**cfg["scorer"])
    train_images = dataset.class_images(class_id, "train")
    feats = [featurize(train_images)]
    if sc.include_positives and policy is not None:
        for t in policy.positives:
            feats.append(featurize(apply_by_id(t, train_images, cfg["embed_seed"], cfg["train"]["severity"])))
    scorer = fit_scorer(np.concatenate(feats), sc)
    results = {}
    for setup, m in manifests.items():
        batch = materialize(m, dataset)
        scores = score(scorer, featurize(batch), batch.sample_ids)
        write_scores_csv(out_dir / f"scores_{setup}_{class_id}.csv", m, scores)
        y = m.labels()
        results[setup] = ClassResult(auroc([s.anomaly_score for s in scores], y),
                                     int((y == 0).sum()), int((y == 1).sum()))
    return results


def stage_histograms(featurize, dataset, class_id, policy, cfg, out_dir):
    images = dataset.class_images(class_id, "train")
    if len(images) < 50:
        logger.warning("class %s: %d training images, too few for distance histograms (need 50)",
                       class_id, len(images))
        return None
    chosen = sorted(set(policy.positives) | set(policy.negatives) | {"flip", "rot90"})
    normal = featurize(images)
    feats = {IDENTITY: normal}
    for t in chosen:
        feats[t] = featurize(apply_by_id(t, images, cfg["embed_seed"], cfg["protocol"]["rank_severity"]))
    return distance_histograms(normal, feats, out_dir=out_dir / "plots" / class_id, title=class_id)


def _mark(run_dir, status, stage=None, error=None, diagnostics=None):
    doc = {"status": status, "stage": stage}
    if error is not None:
        doc["error"] = error
    if diagnostics:
        doc["diagnostics"] = diagnostics
    _write_json(run_dir / "status.json", doc)


def run_pipeline(config: dict, output_dir=None) -> Path:
    """Run every stage; returns the run directory.

    On failure the run directory's ``status.json`` records the failing stage
    and its diagnostics, later stages are skipped, and the error is re-raised.
    """
    diags = validate_config(config)
    if diags:
        raise ConfigurationError("invalid config:\n  " + "\n  ".join(map(str, diags)))
    cfg = resolve_config(config)
    if output_dir is not None:
        cfg["output_dir"] = str(output_dir)
    run_dir = Path(cfg["output_dir"])
    run_dir.mkdir(parents=True, exist_ok=True)
    snapshot = {k: v for k, v in cfg.items() if k != "output_dir"}
    _write_json(run_dir / "config.resolved.json", snapshot)
    stage = "init"
    _mark(run_dir, "running", stage)
    try:
        stage = "encoder"
        backend = make_backend(cfg["encoder"]["backend"])
        stage = "dataset"
        dataset = _dataset(cfg)
        classes = cfg["normal_classes"] or list(dataset.classes)
        cache = EmbeddingCache(cfg["cache_dir"]) if cfg["cache_dir"] else EmbeddingCache()
        raw = cfg["scorer"]["feature_source"] == "raw_backend"
        per_setup = {s: {} for s in cfg["protocol"]["setups"]}
        policies = {}
        for c in classes:
            stage = f"rank:{c}"
            ranking, policy = stage_rank(backend, dataset, c, cfg, cache, run_dir)
            policies[c] = {"positives": list(policy.positives), "negatives": list(policy.negatives)}
            stage = f"build-protocol:{c}"
            manifests = stage_protocols(dataset, c, ranking, cfg, run_dir)
            model = None
            if not raw:
                stage = f"train:{c}"
                tc = TrainConfig(**{**cfg["train"], "seed": derive_seed(cfg["train"]["seed"], c) % SEED_MODULUS})
                model = train(dataset.class_images(c, "train"), policy, tc, class_id=c)
                model.save(run_dir / "checkpoints" / f"model_{c}.pt")
                policies[c]["loss_history"] = model.history
            featurize = _featurizer(model, backend, cfg)
            stage = f"score:{c}"
            results = stage_score(featurize, dataset, c, manifests, cfg, run_dir, policy)
            for s, r in results.items():
                per_setup[s][c] = r
            if cfg["histograms"]:
                stage = f"histograms:{c}"
                stage_histograms(featurize, dataset, c, policy, cfg, run_dir)
        stage = "eval"
        fingerprint = {
            "seed": cfg["seed"], "K": cfg["train"]["K"], "encoder": backend.backend_id,
            "estimator": cfg["transport"]["method"], "rank_severity": cfg["protocol"]["rank_severity"],
            "spa_severity": cfg["protocol"]["spa_severity"], "ssa_severity": cfg["protocol"]["ssa_severity"],
            "feature_source": cfg["scorer"]["feature_source"], "dataset": dataset.dataset_id,
        }
        ref_key = cfg["dataset"]["loader"] if cfg["dataset"]["loader"] == "cifar10" else None
        reports = [per_class_table(per_setup[s], s, classes, fingerprint, ref_key) for s in per_setup]
        write_report(run_dir, reports, {"policies": policies})
    except Exception as e:
        diagnostics = getattr(e, "diagnostics", None) or {"traceback": traceback.format_exc(limit=5)}
        _mark(run_dir, "failed", stage, f"{type(e).__name__}: {e}", diagnostics)
        raise
    _mark(run_dir, "complete", None)
    return run_dir
