"""Best video AP any model can reach when masks live on the stride-4 grid.

Masks are predicted at 16x16 and upsampled by nearest neighbour, so every
predicted mask is a union of 4x4 blocks. This script scores the best such
mask for every ground-truth instance (blocks more than half covered) with
perfect detection and identities, which bounds what training can achieve.

    python3 demos/mask_ceiling.py --videos 48 --seed 1000
"""
import argparse

import numpy as np

from stgvis.metrics import Tube, evaluate
from stgvis.pipeline import ground_truth_tubes
from stgvis.synth import make_dataset


def best_block_mask(mask: np.ndarray, stride: int = 4) -> np.ndarray:
    h, w = mask.shape
    cover = mask.reshape(h // stride, stride, w // stride, stride).mean(axis=(1, 3))
    return np.kron(cover > 0.5, np.ones((stride, stride), dtype=bool))


def block_oracle(dataset):
    gts = {v.name: ground_truth_tubes(v) for v in dataset}
    preds = {name: [Tube(t.track_id, t.class_id, {f: best_block_mask(m) for f, m in t.masks.items()}, 1.0)
                    for t in tubes] for name, tubes in gts.items()}
    return evaluate(preds, gts)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--videos", type=int, default=48)
    ap.add_argument("--seed", type=int, default=1000)
    ap.add_argument("--preset", default="easy")
    args = ap.parse_args()
    print(block_oracle(make_dataset(args.videos, args.seed, args.preset)).to_text())


if __name__ == "__main__":
    main()
