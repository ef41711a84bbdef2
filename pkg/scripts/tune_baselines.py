#!/usr/bin/env python3
"""Grid-search NLMS and RMSprop step sizes on linear, noise-free 10 s scenes
(256-tap echo paths).

    python scripts/tune_baselines.py --scenes 4
"""
import argparse

from autoaf.filters import MDFConfig
from autoaf.metrics import evaluate
from autoaf.optimizers import NLMS, RMSprop
from autoaf.scenes import SceneSpec, cached_scene


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--scenes", type=int, default=4)
    ap.add_argument("--seed", type=int, default=1000)
    ap.add_argument("--M", type=int, default=16)
    ap.add_argument("--N", type=int, default=32)
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args()

    mdf = MDFConfig(M=args.M, N=args.N, R="1/2")
    if mdf.effective_length < 256:
        ap.error(f"filter covers {mdf.effective_length} taps, need 256")
    scenes = [cached_scene(SceneSpec(duration=10.0, rir_length=256, snr_db=float("inf"), seed=args.seed + i))
              for i in range(args.scenes)]
    scale = mdf.N * mdf.hop
    rows = [("nlms", f, NLMS(mu=f * scale, beta=0.99)) for f in (0.05, 0.1, 0.15, 0.2, 0.3)]
    rows += [("rmsprop", m, RMSprop(mu=m)) for m in (0.003, 0.01, 0.03, 0.1)]
    print("optimizer,mu,mean_erle_db")
    for name, mu, opt in rows:
        print(f"{name},{mu},{evaluate(opt, scenes, mdf, threads=args.threads).mean():.3f}", flush=True)


if __name__ == "__main__":
    main()
