"""Train on synthetic normal-light cracks, evaluate on synthetic low-light cracks.

Compares the full model against the bare baseline (all components off) for
several seeds and prints one line per seed.

    python scripts/transfer_sanity.py --seeds 0 1 2 3 4
"""
import argparse
import time

import torch

from cracknex.experiments import transfer_run


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--iterations", type=int, default=600)
    ap.add_argument("--lr", type=float, default=0.01)
    ap.add_argument("--episodes", type=int, default=200)
    args = ap.parse_args()
    torch.set_num_threads(1)
    wins = 0
    for seed in args.seeds:
        start = time.time()
        r = transfer_run(seed, args.iterations, args.lr, episodes=args.episodes)
        wins += r["full"] > r["none"]
        print(f"seed={seed} full={r['full']:.4f} none={r['none']:.4f} "
              f"time={time.time() - start:.0f}s", flush=True)
    print(f"full > none in {wins}/{len(args.seeds)} seeds")


if __name__ == "__main__":
    main()
