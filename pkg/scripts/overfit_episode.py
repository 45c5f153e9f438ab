"""Overfit one fixed synthetic 1-shot episode and report the query mIoU.

    python scripts/overfit_episode.py --iterations 500 --lr 0.05
"""
import argparse
import time

import torch

from cracknex.experiments import overfit_run


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--iterations", type=int, default=500)
    ap.add_argument("--lr", type=float, default=0.05)
    ap.add_argument("--width", type=int, default=16)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--every", type=int, default=50)
    args = ap.parse_args()
    torch.set_num_threads(1)

    for seed in args.seeds:
        start = time.time()
        r = overfit_run(seed, args.iterations, args.lr, width=args.width)
        for i in range(0, len(r.history), args.every):
            print(f"seed={seed} iter={i} loss={r.history[i]:.4f}")
        print(f"seed={seed} final loss={r.history[-1]:.4f} mIoU={r.miou:.4f} fg={r.fg_iou:.4f} "
              f"bg={r.bg_iou:.4f} time={time.time() - start:.1f}s", flush=True)


if __name__ == "__main__":
    main()
