#!/usr/bin/env python3
"""Meta-train a small GRU optimizer on 2 s synthetic scenes and compare it
with the best LMS step size on a held-out set.

    python scripts/desk_train.py --out desk.bin --epochs 8
"""
import argparse
import logging

from autoaf.filters import MDFConfig
from autoaf.metatrain import TrainConfig, outer_loop
from autoaf.metrics import evaluate
from autoaf.optimizers import LMS
from autoaf.scenes import SceneDistribution, cached_scene


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", default="desk.bin")
    ap.add_argument("--epochs", type=int, default=8)
    ap.add_argument("--hidden", type=int, default=8)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--second-order", action="store_true")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--budget", type=float, default=7200.0, help="wall-clock seconds")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    mdf = MDFConfig(M=1, N=64, R="1/2")
    dist = SceneDistribution(duration=2.0, rir_length=32)
    cfg = TrainConfig(H=args.hidden, mdf=mdf, batch_size=8, batches_per_epoch=10,
                      max_epochs=args.epochs, meta_lr=args.lr, out_scale=0.01,
                      second_order=args.second_order, seed=args.seed, threads=args.threads,
                      shard_size=2 if args.threads > 1 else None, time_budget_s=args.budget)
    val = [cached_scene(s) for s in dist.sample(16, 12345)][:8]
    ck = outer_loop(cfg, dist, val, checkpoint_path=args.out)

    test = [cached_scene(s) for s in dist.sample(32, 777)]
    learned = evaluate(ck.optimizer(), test, mdf, threads=args.threads).mean()
    lms = {mu: evaluate(LMS(mu=mu), test, mdf, threads=args.threads).mean()
           for mu in (50, 100, 200, 300, 400, 600, 1000)}
    best = max(lms, key=lms.get)
    print(f"learned: {learned:.2f} dB")
    print(f"best LMS: {lms[best]:.2f} dB at mu={best}")


if __name__ == "__main__":
    main()
