#!/usr/bin/env python3
"""Train on the 50-patch toy set until it is fit perfectly and report the history.

    python scripts/overfit_toy.py [--seed 0] [--epochs 200] [--checkpoint toy.ckpt]
"""

import argparse
import time

import numpy as np

from midiseg.evaluation import per_measure_eval
from midiseg.model import ModelConfig, TrainConfig, save_checkpoint, train
from midiseg.synth import toy_patch_set


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0, help="toy data and init seed")
    ap.add_argument("--epochs", type=int, default=200)
    ap.add_argument("--checkpoint")
    args = ap.parse_args()

    data = toy_patch_set(seed=args.seed)
    start = time.perf_counter()
    model = train(data, data, ModelConfig(seed=args.seed), TrainConfig(max_epochs=args.epochs, seed=args.seed))
    for h in model.history:
        print(f"epoch {h['epoch']:3d}  loss {h['train_loss']:.4f}  F1 {h['val_f1']:.3f}")
    f1 = per_measure_eval(model.predict_proba(data.x), np.flatnonzero(data.y)).f1
    print(f"best epoch {model.best_epoch}, train F1 {f1:.3f}, {time.perf_counter() - start:.1f} s")
    if args.checkpoint:
        save_checkpoint(model, args.checkpoint)


if __name__ == "__main__":
    main()
