#!/usr/bin/env python3
"""Segmental ERLE around an abrupt echo-path change.

Pairs of 2 s scenes are concatenated; the report directory gets
``curves.csv`` (per-scene curves with the change time) and, with
matplotlib installed, ``recovery.svg`` comparing the optimizers.

    python scripts/scene_change_demo.py --checkpoint desk.bin --out change/
"""
import argparse
from pathlib import Path

import numpy as np

from autoaf.metatrain import load_checkpoint
from autoaf.metrics import evaluate
from autoaf.optimizers import LMS, NLMS
from autoaf.scenes import SceneDistribution, cached_scene, concat_scene_change


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--checkpoint", required=True)
    ap.add_argument("--out", default="scene_change")
    ap.add_argument("--pairs", type=int, default=8)
    ap.add_argument("--seed", type=int, default=2024)
    args = ap.parse_args()

    ck = load_checkpoint(args.checkpoint)
    mdf = ck.mdf
    specs = SceneDistribution(duration=2.0, rir_length=mdf.effective_length).sample(2 * args.pairs, args.seed)
    scenes = [concat_scene_change(cached_scene(a), cached_scene(b)) for a, b in zip(specs[::2], specs[1::2])]
    sr = scenes[0].sample_rate
    window, hop = sr // 10, sr // 40
    boundary = scenes[0].meta["boundary"] / sr

    curves = {}
    for name, opt in (("learned", ck.optimizer()), ("lms", LMS(mu=300.0)),
                      ("nlms", NLMS(mu=0.3 * mdf.N * mdf.hop, beta=0.9))):
        rep = evaluate(opt, scenes, mdf, window=window, hop=hop)
        rep.write(Path(args.out) / name)
        mean, _ = rep.mean_curve()
        t = (np.arange(len(mean)) * hop + window / 2) / sr
        curves[name] = (t, mean)
        pre = mean[(t > boundary - 0.5) & (t < boundary)]
        print(f"{name:8s} overall {rep.mean():6.2f} dB, pre-change {np.nanmean(pre):6.2f} dB")

    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        return
    fig, ax = plt.subplots(figsize=(7, 3.5))
    for name, (t, m) in curves.items():
        ax.plot(t, m, label=name)
    ax.axvline(boundary, color="k", ls="--", lw=0.8)
    ax.set_xlabel("time (s)")
    ax.set_ylabel("segmental ERLE (dB)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(Path(args.out) / "recovery.svg")


if __name__ == "__main__":
    main()
