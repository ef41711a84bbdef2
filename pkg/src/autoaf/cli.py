"""``autoaf`` command-line interface.

Subcommands: ``scene-gen``, ``train``, ``eval``, ``tune-baseline`` and
``compare``. Exit codes: 0 success, 2 config error, 3 data error,
4 numerical divergence.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .filters import MDFConfig, SizingError
from .loop import SignalTooShortError
from .metatrain import (
    CheckpointError, DivergenceError, ShapeMismatchError, TrainConfig, load_checkpoint, outer_loop,
)
from .metrics import ERLEReport, MetricError, evaluate
from .optimizers import Optimizer, make_baseline
from .scenes import (
    Scene, SceneDistribution, cached_scene, concat_scene_change, load_scene_set, write_scene_set,
)
from .wavio import UnsupportedRateError, WavError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4

log = logging.getLogger("autoaf")


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


# --- run configuration ---------------------------------------------------------

@dataclass
class ValSet:
    count: int = 16
    seed: int = 12345


@dataclass
class RunConfig:
    """Everything a run needs, loaded from one YAML file.

    ``train`` holds :class:`TrainConfig` fields (except ``mdf``),
    ``scenes`` holds :class:`SceneDistribution` fields.
    """

    mdf: MDFConfig = field(default_factory=MDFConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    scenes: SceneDistribution = field(default_factory=SceneDistribution)
    val: ValSet = field(default_factory=ValSet)
    seed: int = 0
    threads: int | None = None


def _check_keys(section: str, d, cls) -> dict:
    if d is None:
        return {}
    if not isinstance(d, dict):
        raise ConfigError(f"section {section!r} must be a mapping")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {section!r}: {', '.join(unknown)}")
    return dict(d)


def parse_run_config(raw: dict | None) -> RunConfig:
    """Validate a parsed YAML document; raises :class:`ConfigError`."""
    raw = _check_keys("<top>", raw or {}, RunConfig)
    try:
        mdf = MDFConfig.from_dict({**MDFConfig().to_dict(), **_check_keys("mdf", raw.get("mdf"), MDFConfig)})
        tr = _check_keys("train", raw.get("train"), TrainConfig)
        if "mdf" in tr:
            raise ConfigError("put optimizee settings in the top-level 'mdf' section")
        seed = int(raw.get("seed", 0))
        train = TrainConfig(**{"seed": seed, **tr, "mdf": mdf})
        scenes = SceneDistribution.from_dict(_check_keys("scenes", raw.get("scenes"), SceneDistribution))
        val = ValSet(**_check_keys("val", raw.get("val"), ValSet))
        threads = raw.get("threads")
        cfg = RunConfig(mdf=mdf, train=train, scenes=scenes, val=val, seed=seed,
                        threads=None if threads is None else int(threads))
    except ConfigError:
        raise
    except (TypeError, ValueError, SizingError) as exc:
        raise ConfigError(str(exc)) from exc
    validate_run_config(cfg)
    return cfg


def validate_run_config(cfg: RunConfig) -> None:
    try:
        cfg.train.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if cfg.val.count < 0:
        raise ConfigError("val.count must be >= 0")
    if cfg.threads is not None and cfg.threads < 1:
        raise ConfigError("threads must be >= 1")
    if not 0.0 <= cfg.scenes.nonlinear_fraction <= 1.0:
        raise ConfigError("scenes.nonlinear_fraction must be in [0, 1]")
    if not cfg.scenes.duration > 0:
        raise ConfigError("scenes.duration must be positive")


def load_run_config(path: str | None) -> RunConfig:
    if path is None:
        return parse_run_config({})
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML: {exc}") from exc
    return parse_run_config(raw)


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    train = cfg.train
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
        train = dataclasses.replace(train, seed=args.seed)
    threads = getattr(args, "threads", None) or cfg.threads or os.cpu_count() or 1
    train = dataclasses.replace(train, threads=threads)
    if getattr(args, "time_budget", None) is not None:
        train = dataclasses.replace(train, time_budget_s=args.time_budget)
    if getattr(args, "max_epochs", None) is not None:
        train = dataclasses.replace(train, max_epochs=args.max_epochs)
    cfg = dataclasses.replace(cfg, train=train, threads=threads)
    validate_run_config(cfg)
    return cfg


# --- helpers -------------------------------------------------------------------

def _load_scenes(data_dir, scene_change: bool = False) -> list[Scene]:
    path = Path(data_dir)
    if not path.is_dir():
        raise DataError(f"data directory not found: {path}")
    scenes = load_scene_set(path)
    if not scenes:
        raise DataError(f"no scenes in {path}")
    if scene_change:
        if len(scenes) < 2:
            raise DataError("--scene-change needs at least two scenes")
        scenes = [concat_scene_change(scenes[i], scenes[i + 1]) for i in range(0, len(scenes) - 1, 2)]
    return scenes


def _parse_kv(items: list[str] | None) -> dict:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"expected key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = float(v)
    return out


def parse_optimizer(spec: str, mdf: MDFConfig | None = None) -> tuple[str, Optimizer, MDFConfig | None]:
    """``nlms:mu=0.5,beta=0.99`` / ``rmsprop:mu=0.01`` / ``lms:mu=100`` /
    ``zero`` / ``ckpt:path``. Returns ``(label, optimizer, mdf)``."""
    kind, _, rest = spec.partition(":")
    if kind == "ckpt":
        ck = load_checkpoint(rest)
        if mdf is not None:
            ck.check_compatible(mdf=mdf)
        return f"gru-H{ck.H}", ck.optimizer(), ck.mdf
    kw = _parse_kv([p for p in rest.split(",") if p]) if rest else {}
    try:
        return spec, make_baseline(kind, **kw), mdf
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad optimizer spec {spec!r}: {exc}") from exc


def _write_svg(report: ERLEReport, path: Path, title: str) -> bool:
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        log.warning("matplotlib not installed; skipping SVG")
        return False
    mean, std = report.mean_curve()
    t = (np.arange(len(mean)) * report.hop + report.window / 2) / report.sample_rate
    fig, ax = plt.subplots(figsize=(6, 3))
    ax.plot(t, mean, lw=1.2)
    ax.fill_between(t, mean - std / 2, mean + std / 2, alpha=0.3)
    bounds = {s.boundary for s in report.scenes if s.boundary is not None}
    for b in bounds:
        ax.axvline(b / report.sample_rate, color="k", ls="--", lw=0.8)
    ax.set_xlabel("time (s)")
    ax.set_ylabel("segmental ERLE (dB)")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
    return True


# --- commands ------------------------------------------------------------------

def cmd_scene_gen(args) -> int:
    cfg = _apply_overrides(load_run_config(args.config), args)
    if args.count < 0:
        raise ConfigError("count must be >= 0")
    specs = cfg.scenes.sample(args.count, cfg.seed)
    manifest = write_scene_set(specs, args.out)
    tags = [e["tag"] for e in manifest["scenes"]]
    print(json.dumps({"count": len(tags), "nonlinear": tags.count("nonlinear"),
                      "linear": tags.count("linear"), "out": str(args.out)}))
    return EXIT_OK


def _val_scenes(cfg: RunConfig) -> list[Scene]:
    return [cached_scene(s) for s in cfg.scenes.sample(cfg.val.count, cfg.val.seed)]


def cmd_train(args) -> int:
    cfg = _apply_overrides(load_run_config(args.config), args)
    train_src = _load_scenes(args.data) if args.data else cfg.scenes
    val = _load_scenes(args.val_data) if args.val_data else _val_scenes(cfg)
    if not val:
        raise ConfigError("empty validation set (val.count = 0 and no --val-data)")
    resume = None
    out = Path(args.out)
    if args.resume:
        if not out.exists():
            raise DataError(f"--resume given but {out} does not exist")
        resume = load_checkpoint(out)
        if resume.train_state and resume.train_state.get("config", {}).get("H", cfg.train.H) != cfg.train.H:
            raise ConfigError("checkpoint was trained with a different H")
    out.parent.mkdir(parents=True, exist_ok=True)
    log_path = out.with_suffix(".log.jsonl")
    mode = "a" if resume is not None else "w"
    with open(log_path, mode) as lf:
        def on_epoch(rec):
            lf.write(json.dumps(rec) + "\n")
            lf.flush()
            if not args.quiet:
                print(json.dumps(rec), flush=True)
        ck = outer_loop(cfg.train, train_src, val, checkpoint_path=out, resume=resume,
                        epoch_callback=on_epoch)
    if resume is not None and ck is resume:
        print(json.dumps({"status": "already finished", "checkpoint": str(out)}))
    else:
        best = max((r["val_erle"] for r in ck.log), default=float("nan"))
        print(json.dumps({"status": "done", "epochs": len(ck.log), "best_val_erle": best,
                          "checkpoint": str(out)}))
    return EXIT_OK


def _resolve_mdf(args) -> MDFConfig:
    if args.config:
        return load_run_config(args.config).mdf
    return MDFConfig(M=args.M, N=args.N, R=args.R, nonlinear=args.nonlinear)


def _optimizer_from_args(args, mdf: MDFConfig):
    if args.checkpoint:
        ck = load_checkpoint(args.checkpoint)
        if args.config or args.explicit_mdf:
            ck.check_compatible(mdf=mdf)
        return f"gru-H{ck.H}", ck.optimizer(), ck.mdf
    if not args.baseline:
        raise ConfigError("give --checkpoint or --baseline")
    kw = {"mu": args.mu} if args.mu is not None else {}
    if args.beta is not None:
        kw["beta"] = args.beta
    try:
        return args.baseline, make_baseline(args.baseline, **kw), mdf
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def cmd_eval(args) -> int:
    mdf = _resolve_mdf(args)
    label, opt, mdf = _optimizer_from_args(args, mdf)
    scenes = _load_scenes(args.data, args.scene_change)
    rep = evaluate(opt, scenes, mdf, threads=args.threads or os.cpu_count() or 1)
    out = Path(args.out)
    rep.write(out)
    if args.svg:
        _write_svg(rep, out / "curves.svg", label)
    print(json.dumps(rep.summary()["all"]))
    return EXIT_OK


def cmd_tune_baseline(args) -> int:
    mdf = _resolve_mdf(args)
    grid = [float(v) for v in args.grid.split(",") if v.strip()]
    if not grid:
        raise ConfigError("empty grid")
    scenes = _load_scenes(args.data)
    rows = []
    for mu in grid:
        kw = {"mu": mu}
        if args.beta is not None:
            kw["beta"] = args.beta
        try:
            opt = make_baseline(args.baseline, **kw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        rep = evaluate(opt, scenes, mdf, threads=args.threads or os.cpu_count() or 1)
        rows.append({"mu": mu, "mean_erle_db": rep.mean(), "std_erle_db": rep.std()})
    rows.sort(key=lambda r: (-r["mean_erle_db"] if np.isfinite(r["mean_erle_db"]) else np.inf))
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        with open(out, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=["rank", "mu", "mean_erle_db", "std_erle_db"])
            w.writeheader()
            for i, r in enumerate(rows):
                w.writerow({"rank": i + 1, **r})
    for i, r in enumerate(rows):
        print(f"{i + 1:3d}  mu={r['mu']:<12g} {r['mean_erle_db']:8.3f} dB  (std {r['std_erle_db']:.3f})")
    print(json.dumps({"best": {"baseline": args.baseline, "beta": args.beta, **rows[0]}}))
    return EXIT_OK


def cmd_compare(args) -> int:
    mdf = _resolve_mdf(args)
    scenes = _load_scenes(args.data, args.scene_change)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    reports = []
    for i, spec in enumerate(args.opt):
        label, opt, omdf = parse_optimizer(spec, mdf if (args.config or args.explicit_mdf) else None)
        rep = evaluate(opt, scenes, omdf or mdf, threads=args.threads or os.cpu_count() or 1)
        rep.write(out / f"opt{i}")
        if args.svg:
            _write_svg(rep, out / f"opt{i}" / "curves.svg", label)
        reports.append((label, rep))
    with open(out / "comparison.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["id", "tag"] + [label for label, _ in reports])
        for k, s in enumerate(reports[0][1].scenes):
            w.writerow([s.id, s.tag] + [f"{rep.scenes[k].erle_db:.6f}" for _, rep in reports])
    summary = {label: rep.summary() for label, rep in reports}
    (out / "comparison.json").write_text(json.dumps(summary, indent=2))
    for label, rep in reports:
        print(f"{label:40s} {rep.mean():8.3f} dB  (std {rep.std():.3f})")
    return EXIT_OK


# --- argument parsing ------------------------------------------------------------

def _add_mdf_args(p):
    p.add_argument("--config", help="YAML run config (its 'mdf' section is used)")
    p.add_argument("--M", type=int, default=None)
    p.add_argument("--N", type=int, default=None)
    p.add_argument("--R", default=None)
    p.add_argument("--nonlinear", action="store_true", default=None)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="autoaf",
                                 description="Meta-learned adaptive filters for echo cancellation")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("scene-gen", help="write synthetic scenes as WAV pairs plus a manifest")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_scene_gen)

    p = sub.add_parser("train", help="meta-train a learned optimizer")
    p.add_argument("--config")
    p.add_argument("--data", help="training scene directory (default: sample from the config distribution)")
    p.add_argument("--val-data", help="validation scene directory (default: sampled from config)")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--resume", action="store_true")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--time-budget", type=float, help="seconds")
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(fn=cmd_train)

    for name, fn, hlp in (("eval", cmd_eval, "evaluate one optimizer"),
                          ("tune-baseline", cmd_tune_baseline, "grid-search a baseline step size"),
                          ("compare", cmd_compare, "evaluate several optimizers on one scene set")):
        p = sub.add_parser(name, help=hlp)
        _add_mdf_args(p)
        p.add_argument("--data", required=True)
        p.add_argument("--threads", type=int)
        p.add_argument("--seed", type=int, help="accepted for uniformity; evaluation is deterministic")
        if name == "eval":
            p.add_argument("--checkpoint")
            p.add_argument("--baseline", choices=["lms", "nlms", "rmsprop", "zero"])
            p.add_argument("--mu", type=float)
            p.add_argument("--beta", type=float)
        if name == "tune-baseline":
            p.add_argument("--baseline", required=True, choices=["lms", "nlms", "rmsprop"])
            p.add_argument("--grid", required=True, help="comma-separated step sizes")
            p.add_argument("--beta", type=float)
            p.add_argument("--out", help="CSV table path")
        else:
            p.add_argument("--out", required=True, help="output directory")
            p.add_argument("--scene-change", action="store_true",
                           help="concatenate consecutive scene pairs to create echo-path changes")
            p.add_argument("--svg", action="store_true", help="also write an SVG plot of segmental ERLE")
        if name == "compare":
            p.add_argument("--opt", action="append", required=True,
                           help="optimizer spec, e.g. nlms:mu=600,beta=0.99 or ckpt:model.bin")
        p.set_defaults(fn=fn)
    return ap


def _finish_mdf_args(args) -> None:
    if not hasattr(args, "M"):
        return
    d = MDFConfig()
    args.explicit_mdf = any(getattr(args, k) is not None for k in ("M", "N", "R", "nonlinear"))
    args.M = d.M if args.M is None else args.M
    args.N = d.N if args.N is None else args.N
    args.R = str(d.R) if args.R is None else args.R
    args.nonlinear = bool(args.nonlinear)


def main(argv: list[str] | None = None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _finish_mdf_args(args)
        return args.fn(args)
    except (ConfigError, SizingError, ShapeMismatchError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        print(json.dumps(exc.diagnostic, default=str), file=sys.stderr)
        return EXIT_DIVERGED
    except (DataError, CheckpointError, WavError, UnsupportedRateError, SignalTooShortError,
            MetricError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
