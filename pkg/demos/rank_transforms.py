"""Rank the transform bank for one class and show the chosen pairs.

    python demos/rank_transforms.py --class car --backend random-resnet:16

Prints the Wasserstein distance of every transform to the untouched class
embeddings (closest first), the K positive / K negative transforms, and
writes centroid-distance histograms for flip and rot90 to ``--out``.
"""

import argparse
from pathlib import Path

from knowledge_exposure.datasets import make_procedural_dataset
from knowledge_exposure.encoders import IDENTITY, embed_all_transforms, make_backend
from knowledge_exposure.evaluation import distance_histograms
from knowledge_exposure.transport import TransportConfig, rank_transforms, select_pairs


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--class", dest="class_id", default="car")
    ap.add_argument("--backend", default="random-resnet:16")
    ap.add_argument("--n", type=int, default=500)
    ap.add_argument("--k", type=int, default=2)
    ap.add_argument("--method", default="sliced", choices=["sliced", "exact", "entropic"])
    ap.add_argument("--out", default="demo_out")
    args = ap.parse_args()

    ds = make_procedural_dataset([args.class_id], n_train=args.n, n_test=1)
    images = ds.class_images(args.class_id)
    backend = make_backend(args.backend)
    sets = embed_all_transforms(backend, images, dataset_id=ds.dataset_id, class_id=args.class_id)

    ranking = rank_transforms(sets[IDENTITY], sets, TransportConfig(method=args.method), args.class_id)
    policy = select_pairs(ranking, args.k)
    print(f"{backend.backend_id}, {len(images)} {args.class_id} images, {args.method} W1")
    for tid, d in ranking.entries:
        tag = "+" if tid in policy.positives else "-" if tid in policy.negatives else " "
        print(f"  {tag} {tid:<18} {d:.5f}")

    hist = distance_histograms(sets[IDENTITY].matrix, {t: sets[t].matrix for t in (IDENTITY, "flip", "rot90")},
                               out_dir=Path(args.out), title=args.class_id)
    for t, h in hist.items():
        print(f"mean distance to class centroid, {t}: {h['mean']:.4f}")
    print(f"histograms written to {Path(args.out) / 'histograms.png'}")


if __name__ == "__main__":
    main()
