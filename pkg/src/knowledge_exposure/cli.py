"""Command-line entry point: one subcommand per pipeline stage plus ``run``.

Datasets are named with ``--dataset``: ``procedural`` or
``procedural:car,fruit`` for generated scenes, or a directory holding either
an image folder with ``labels.csv`` or the CIFAR-10 python batches.  When
omitted, ``$KE_DATA_ROOT`` is used.  The embedding cache lives in
``$KE_CACHE_DIR`` (default ``~/.cache/knowledge_exposure``).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import protocols as proto
from .cache import EmbeddingCache
from .contrastive import FeatureModel, TrainConfig, extract_features, train
from .datasets import load_dataset
from .encoders import IDENTITY, EmbeddingSet, embed, embed_all_transforms, make_backend
from .errors import KnowledgeExposureError
from .evaluation import ClassResult, auroc, per_class_table, read_report, render_csv, render_text, write_report
from .pipeline import DATA_ENV, load_config, read_scores_csv, run_pipeline, validate_config, write_scores_csv
from .scoring import ScorerConfig, fit_scorer, score
from .transforms import format_param_table, list_transforms
from .transport import (TransportConfig, parse_ranking, rank_transforms, read_ranking, select_pairs,
                        write_ranking)

logger = logging.getLogger("knowledge_exposure")


# ---------------------------------------------------------------------------
# argument helpers


def _global_flags(parser, suppress):
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--seed", type=int, default=default if suppress else 0, help="top-level seed")
    parser.add_argument("--severity", type=int, default=default, help="transform severity (1-6)")
    parser.add_argument("--k", type=int, default=default if suppress else 2,
                        help="number of positive and of negative transforms")
    parser.add_argument("-v", "--verbose", action="store_true", default=default if suppress else False)


def _dataset_flags(p):
    p.add_argument("--dataset", default=None,
                   help="'procedural[:class,...]' or a directory (image folder or CIFAR-10)")
    p.add_argument("--data-seed", type=int, default=0, help="seed of the procedural generator")
    p.add_argument("--train-per-class", type=int, default=None)
    p.add_argument("--test-per-class", type=int, default=None)


def dataset_spec(arg, data_seed=0, train_per_class=None, test_per_class=None) -> dict:
    arg = arg or os.environ.get(DATA_ENV)
    if not arg:
        raise KnowledgeExposureError(f"no dataset given; pass --dataset or set ${DATA_ENV}")
    spec = {"train_per_class": train_per_class, "test_per_class": test_per_class}
    if arg == "procedural" or arg.startswith("procedural:"):
        classes = arg.partition(":")[2]
        spec.update(loader="procedural", seed=data_seed,
                    classes=classes.split(",") if classes else None,
                    n_train=train_per_class or 200, n_test=test_per_class or 100)
        return spec
    root = Path(arg)
    if (root / "labels.csv").exists():
        spec.update(loader="image-folder", path=str(root))
    else:
        spec.update(loader="cifar10", path=str(root))
    return spec


def _load_dataset(args):
    return load_dataset(dataset_spec(args.dataset, args.data_seed, args.train_per_class, args.test_per_class))


def _severity(args, default):
    s = getattr(args, "severity", None)
    return default if s is None else s


def _cache(args):
    return EmbeddingCache(args.cache_dir) if getattr(args, "cache_dir", None) else EmbeddingCache()


# ---------------------------------------------------------------------------
# subcommands


def cmd_transforms(args):
    if args.severity is None:
        print(format_param_table())
    else:
        for spec in list_transforms(args.severity):
            body = ", ".join(f"{k}={v}" for k, v in spec.params.items())
            print(f"{spec.id:<17} {spec.kind:<12} {body}")
    return 0


def cmd_embed(args):
    ds = _load_dataset(args)
    backend = make_backend(args.encoder)
    images = ds.class_images(args.class_id, "train")
    sets = embed_all_transforms(backend, images, severity=_severity(args, 1), seed=args.seed,
                                cache=_cache(args), dataset_id=ds.dataset_id, class_id=args.class_id)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    meta = {"encoder_id": backend.backend_id, "dataset_id": ds.dataset_id, "class_id": args.class_id,
            "severity": _severity(args, 1), "seed": args.seed}
    np.savez(out, sample_ids=np.array(images.sample_ids), meta=json.dumps(meta),
             **{tid: es.matrix for tid, es in sets.items()})
    print(f"wrote {len(sets)} embedding sets of shape {sets[IDENTITY].matrix.shape} to {out}")
    return 0


def _sets_from_npz(path):
    z = np.load(path, allow_pickle=False)
    meta = json.loads(str(z["meta"]))
    ids = tuple(z["sample_ids"].tolist())
    sets = {}
    for k in z.files:
        if k in ("meta", "sample_ids"):
            continue
        m = z[k]
        sets[k] = EmbeddingSet(meta["encoder_id"], meta["dataset_id"], meta["class_id"], k,
                               meta["severity"], m, False, ids)
    return sets, meta


def cmd_rank(args):
    if args.embeddings:
        sets, meta = _sets_from_npz(args.embeddings)
        encoder_id, class_id, severity = meta["encoder_id"], meta["class_id"], meta["severity"]
    else:
        if not args.class_id:
            raise KnowledgeExposureError("rank needs --embeddings or --class with --dataset")
        ds = _load_dataset(args)
        backend = make_backend(args.encoder)
        severity = _severity(args, 1)
        sets = embed_all_transforms(backend, ds.class_images(args.class_id, "train"), severity=severity,
                                    seed=args.seed, cache=_cache(args), dataset_id=ds.dataset_id,
                                    class_id=args.class_id)
        encoder_id, class_id = backend.backend_id, args.class_id
    cfg = TransportConfig(method=args.method, cost=args.cost, n_projections=args.projections,
                          epsilon=args.epsilon, seed=args.seed)
    ranking = rank_transforms(sets[IDENTITY], sets, cfg, class_id=class_id)
    policy = select_pairs(ranking, args.k)
    write_ranking(args.out, ranking, policy, encoder_id, severity, estimator=cfg.method)
    for t, d in ranking.entries:
        tag = "+" if t in policy.positives else "-" if t in policy.negatives else " "
        print(f"{tag} {t:<17} {d:.6f}")
    return 0


def cmd_build_protocol(args):
    ds = _load_dataset(args)
    sm = None
    if args.setup == "SSA":
        if not args.semantic_map:
            raise KnowledgeExposureError("SSA needs --semantic-map (a ranking or semantic map JSON)")
        doc = json.loads(Path(args.semantic_map).read_text())
        if "entries" in doc:
            ranking, _ = parse_ranking(doc)
            sm = proto.derive_semantic_map(ranking, args.k, args.overrides)
        else:
            sm = proto.SemanticMap.from_dict(doc)
            if args.overrides:
                for c, t, v, _ in proto.parse_overrides(Path(args.overrides).read_text()):
                    sm.set(c, t, v, "human_override")
    m = proto.build_protocol(args.setup, ds, args.class_id, semantic_map=sm,
                             severity=getattr(args, "severity", None), seed=args.seed)
    proto.write_manifest(args.out, m)
    counts = m.counts()
    print(f"{args.setup} manifest for {args.class_id}: {counts['normal']} normal, "
          f"{counts['anomaly']} anomaly -> {args.out}")
    return 0


def cmd_train(args):
    ds = _load_dataset(args)
    ranking, policy = read_ranking(args.policy)
    if policy is None or policy.K != args.k:
        policy = select_pairs(ranking, args.k)
    class_id = args.class_id or ranking.class_id
    cfg = TrainConfig(epochs=args.epochs, K=args.k, seed=args.seed, feature_dim=args.feature_dim,
                      batch_size=args.batch_size, severity=_severity(args, 1))
    model = train(ds.class_images(class_id, "train"), policy, cfg, class_id=class_id,
                  callback=lambda e, loss: print(f"epoch {e + 1}: loss {loss:.5f}"))
    model.save(args.out)
    print(f"saved checkpoint to {args.out}")
    return 0


def cmd_score(args):
    ds = _load_dataset(args)
    manifest = proto.read_manifest(args.manifest)
    if args.model:
        model = FeatureModel.load(args.model)
        featurize = lambda b: extract_features(model, b)  # noqa: E731
        cfg = ScorerConfig(nu=args.nu)
    else:
        backend = make_backend(args.raw_backend)
        featurize = lambda b: embed(backend, b, normalize=False).matrix  # noqa: E731
        cfg = ScorerConfig(nu=args.nu, feature_source="raw_backend")
    scorer = fit_scorer(featurize(ds.class_images(manifest.normal_class, "train")), cfg)
    batch = proto.materialize(manifest, ds)
    scores = score(scorer, featurize(batch), batch.sample_ids)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_scores_csv(args.out, manifest, scores)
    s, y = read_scores_csv(args.out)
    print(f"{manifest.setup} {manifest.normal_class}: AUROC {auroc(s, y):.4f} -> {args.out}")
    return 0


def cmd_eval(args):
    results, order = {}, []
    for item in args.scores:
        cls, sep, path = item.partition("=")
        if not sep:
            raise KnowledgeExposureError(f"expected CLASS=PATH, got {item!r}")
        s, y = read_scores_csv(path)
        y = np.array([v == "anomaly" for v in y], dtype=int)
        results[cls] = ClassResult(auroc(s, y), int((y == 0).sum()), int((y == 1).sum()))
        order.append(cls)
    report = per_class_table(results, args.setup, order, dataset_key=args.reference)
    write_report(args.out, [report])
    print(render_text(report))
    return 0


def cmd_report(args):
    path = Path(args.run)
    if path.is_dir():
        path = path / "report.json"
    for r in read_report(path):
        print(render_csv(r) if args.csv else render_text(r))
        print()
    return 0


def cmd_run(args):
    config = load_config(args.config)
    if args.seed_given:
        config["seed"] = args.seed
    if getattr(args, "k", None) is not None and args.k_given:
        config.setdefault("train", {})["K"] = args.k
    run_dir = run_pipeline(config, args.out)
    for r in read_report(run_dir / "report.json"):
        print(render_text(r))
    print(f"run directory: {run_dir}")
    return 0


def cmd_validate(args):
    diags = validate_config(load_config(args.config))
    for d in diags:
        print(f"error: {d}")
    if not diags:
        print("config is valid")
    return 1 if diags else 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kexp", description=__doc__.splitlines()[0])
    _global_flags(parser, suppress=False)
    parser.add_argument("--cache-dir", default=None, help="embedding cache directory")
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)

    p = sub.add_parser("transforms", parents=[common], help="list the transform bank")
    p.add_argument("action", nargs="?", default="list", choices=["list"])
    p.set_defaults(func=cmd_transforms)

    p = sub.add_parser("embed", parents=[common], help="embed a class under every transform")
    _dataset_flags(p)
    p.add_argument("--class", dest="class_id", required=True)
    p.add_argument("--encoder", default="random-resnet:16",
                   help="random-resnet:W, pixels:R, torchvision:ARCH@WEIGHTS or open_clip:ARCH/PRETRAINED")
    p.add_argument("--out", required=True, help="output .npz")
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("rank", parents=[common], help="rank transforms by Wasserstein distance")
    _dataset_flags(p)
    p.add_argument("--embeddings", help=".npz written by 'embed'")
    p.add_argument("--class", dest="class_id")
    p.add_argument("--encoder", default="random-resnet:16",
                   help="random-resnet:W, pixels:R, torchvision:ARCH@WEIGHTS or open_clip:ARCH/PRETRAINED")
    p.add_argument("--method", default="sliced", choices=["sliced", "exact", "entropic"])
    p.add_argument("--cost", default="euclidean", choices=["euclidean", "cosine"])
    p.add_argument("--projections", type=int, default=512)
    p.add_argument("--epsilon", type=float, default=0.05)
    p.add_argument("--out", required=True, help="ranking JSON")
    p.set_defaults(func=cmd_rank)

    p = sub.add_parser("build-protocol", parents=[common], help="write an SAD/SPA/SSA manifest")
    _dataset_flags(p)
    p.add_argument("--setup", required=True, choices=list(proto.SETUPS))
    p.add_argument("--class", dest="class_id", required=True)
    p.add_argument("--semantic-map", help="ranking JSON or semantic map JSON (SSA)")
    p.add_argument("--overrides", help="text file of 'class transform verdict' lines")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_protocol)

    p = sub.add_parser("train", parents=[common], help="contrastive training for one class")
    _dataset_flags(p)
    p.add_argument("--policy", required=True, help="ranking JSON")
    p.add_argument("--class", dest="class_id")
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--feature-dim", type=int, default=512)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("score", parents=[common], help="one-class SVM scores for a manifest")
    _dataset_flags(p)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--model", help="checkpoint from 'train'")
    src.add_argument("--raw-backend", help="encoder id for the raw-feature baseline")
    p.add_argument("--manifest", required=True)
    p.add_argument("--nu", type=float, default=0.1)
    p.add_argument("--out", required=True, help="scores CSV")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("eval", parents=[common], help="AUROC table from score files")
    p.add_argument("--setup", required=True, choices=list(proto.SETUPS))
    p.add_argument("--scores", nargs="+", required=True, metavar="CLASS=PATH")
    p.add_argument("--reference", choices=["cifar10", "cifar100", "svhn"], default=None,
                   help="annotate with the published full-scale mean for this dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", parents=[common], help="print a report.json")
    p.add_argument("run", help="run directory or report.json")
    p.add_argument("--csv", action="store_true")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("run", parents=[common], help="run the whole pipeline from a config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None, help="run directory (overrides output_dir)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("validate", parents=[common], help="check a pipeline config")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_validate)
    return parser


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    args = build_parser().parse_args(argv)
    args.seed_given = any(a == "--seed" or a.startswith("--seed=") for a in argv)
    args.k_given = any(a == "--k" or a.startswith("--k=") for a in argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (KnowledgeExposureError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
