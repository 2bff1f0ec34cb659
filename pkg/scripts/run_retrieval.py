"""Train on 16 synthetic pairs with all three objectives and report retrieval
metrics, the untrained baseline and feature-spread statistics as JSON."""

import argparse
import json
import time

import numpy as np

from dynrsl.alignment import DynRslModel
from dynrsl.config import DESK_PATCH
from dynrsl.data import model_inputs, retrieval_corpus
from dynrsl.encoders import EncoderConfig, tokenize
from dynrsl.train import TrainConfig, collapse_stats, evaluate_retrieval, pooled_image_features, train
from dynrsl.vocab import DEFAULT_VOCAB


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--pairs", type=int, default=16)
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--lr", type=float, default=1e-4)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--baseline-seeds", type=int, default=50)
    ap.add_argument("--out", help="also write the JSON report here")
    args = ap.parse_args()

    scenes = retrieval_corpus(args.pairs, seed=args.seed)
    inputs = model_inputs(scenes, DESK_PATCH)
    captions = [tokenize(s.caption, DEFAULT_VOCAB) for s in scenes]

    baseline = [
        evaluate_retrieval(DynRslModel(EncoderConfig(seed=s), DESK_PATCH), inputs, captions).recall_at_1
        for s in range(args.baseline_seeds)
    ]
    model = DynRslModel(EncoderConfig(seed=args.seed), DESK_PATCH)
    curve = []

    def probe(step, report):
        if step % 100 == 0 or step == args.steps - 1:
            r1 = evaluate_retrieval(model, inputs, captions).recall_at_1
            curve.append({"step": step, **report.as_dict(), "recall_at_1": r1})

    start = time.perf_counter()
    train(model, inputs, captions, TrainConfig(lr=args.lr, steps=args.steps, batch_size=args.pairs, seed=args.seed), probe)
    report = {
        "seconds": time.perf_counter() - start,
        "metrics": evaluate_retrieval(model, inputs, captions).to_dict(),
        "untrained_recall_at_1_mean": float(np.mean(baseline)),
        "collapse": collapse_stats(pooled_image_features(model, inputs)),
        "curve": curve,
    }
    text = json.dumps(report, indent=1)
    print(text)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")


if __name__ == "__main__":
    main()
