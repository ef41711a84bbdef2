"""Meta-training of the learned optimizer with truncated BPTT.

Each training batch is a set of scenes adapted from a fresh filter. The
scene is cut into consecutive windows of ``n_inner`` online steps; after
every window the accumulated optimizee loss is backpropagated to the
optimizer weights, the gradient is clipped and an Adam step is taken.
Filter parameters and GRU hidden states carry over into the next window
with their history cut.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .core import tape as ad
from .core.tape import Tape
from .filters import MDFConfig, init_state
from .loop import as_blocks, inner_loop
from .metrics import evaluate
from .optimizers import DEFAULT_P, PARAM_NAMES, LearnedGRU, gru_init_params, param_shapes
from .scenes import Scene, SceneDistribution, cached_scene, rng_for

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    """Non-finite meta-loss or meta-gradient."""

    def __init__(self, msg: str, diagnostic: dict):
        super().__init__(msg)
        self.diagnostic = diagnostic


@dataclass
class TrainConfig:
    n_inner: int = 10
    batch_size: int = 8
    batches_per_epoch: int = 200
    max_epochs: int = 1000
    meta_lr: float = 1e-4
    clip_norm: float = 1.0
    lr_patience: int = 10
    stop_patience: int = 25
    seed: int = 0
    mdf: MDFConfig = field(default_factory=MDFConfig)
    H: int = 24
    p: float = DEFAULT_P
    output_relu: bool = False
    out_scale: float = 1.0
    # None: N * hop, undoing the 1/N inverse FFT and the 1/hop of the MSE
    grad_scale: float | None = None
    second_order: bool = True
    shard_size: int | None = None
    threads: int = 1
    time_budget_s: float | None = None

    def validate(self) -> None:
        if self.n_inner < 1:
            raise ValueError("n_inner must be >= 1")
        if not 5 <= self.n_inner <= 20:
            warnings.warn(f"n_inner={self.n_inner} outside [5, 20]; meta-training may not converge well")
        if self.batch_size < 1 or self.batches_per_epoch < 1 or self.max_epochs < 1:
            raise ValueError("batch_size, batches_per_epoch and max_epochs must be >= 1")
        if not self.meta_lr > 0 or not self.clip_norm > 0:
            raise ValueError("meta_lr and clip_norm must be positive")
        if self.H < 1:
            raise ValueError("H must be >= 1")
        if self.shard_size is not None and self.shard_size < 1:
            raise ValueError("shard_size must be >= 1")

    @property
    def feature_scale(self) -> float:
        if self.grad_scale is not None:
            return float(self.grad_scale)
        return float(self.mdf.N * self.mdf.hop)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mdf"] = self.mdf.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "mdf" in d and isinstance(d["mdf"], dict):
            d["mdf"] = MDFConfig.from_dict(d["mdf"])
        return cls(**d)

    def hash(self) -> str:
        d = self.to_dict()
        for k in ("threads", "time_budget_s", "max_epochs"):
            d.pop(k)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


# --- Adam over real/imaginary parts --------------------------------------------

@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(phi: dict) -> AdamState:
    return AdamState(
        m={k: np.zeros_like(v, dtype=np.complex128) for k, v in phi.items()},
        v={k: np.zeros_like(v, dtype=np.complex128) for k, v in phi.items()},
    )


def _parts_sq(g: np.ndarray) -> np.ndarray:
    return g.real**2 + 1j * g.imag**2


def global_norm(grads: dict) -> float:
    return float(np.sqrt(sum(np.sum(np.abs(g) ** 2) for g in grads.values())))


def clip_by_global_norm(grads: dict, max_norm: float) -> tuple[dict, float]:
    norm = global_norm(grads)
    if norm > max_norm:
        scale = max_norm / norm
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm


def adam_meta_step(adam: AdamState, phi: dict, grads: dict, lr: float,
                   clip_norm: float | None = None) -> tuple[dict, AdamState]:
    """One Adam step on complex weights, treating real and imaginary parts
    as independent coordinates.

    ``grads`` holds ordinary real-coordinate gradients packed as
    ``dL/dRe + 1j * dL/dIm`` (twice the conjugate Wirtinger gradient).
    """
    if clip_norm is not None:
        grads, _ = clip_by_global_norm(grads, clip_norm)
    t = adam.step + 1
    b1, b2 = adam.beta1, adam.beta2
    m, v, new_phi = {}, {}, {}
    for k in phi:
        g = grads[k]
        m[k] = b1 * adam.m[k] + (1 - b1) * g
        v[k] = b2 * adam.v[k] + (1 - b2) * _parts_sq(g)
        mh = m[k] / (1 - b1**t)
        vh = v[k] / (1 - b2**t)
        upd = mh.real / (np.sqrt(vh.real) + adam.eps) + 1j * mh.imag / (np.sqrt(vh.imag) + adam.eps)
        new_phi[k] = phi[k] - lr * upd
    return new_phi, AdamState(m, v, t, b1, b2, adam.eps)


# --- learning-rate schedule -----------------------------------------------------

@dataclass
class PlateauSchedule:
    """Halve the LR after ``lr_patience`` epochs without a new best
    validation metric; stop after ``stop_patience`` such epochs."""

    lr: float
    lr_patience: int = 10
    stop_patience: int = 25
    factor: float = 0.5
    best: float = -math.inf
    since_best: int = 0
    since_lr: int = 0
    epoch: int = 0

    def update(self, metric: float) -> bool:
        """Record one epoch's metric; returns True when training should stop."""
        self.epoch += 1
        if metric > self.best:
            self.best = metric
            self.since_best = 0
            self.since_lr = 0
        else:
            self.since_best += 1
            self.since_lr += 1
            if self.since_lr >= self.lr_patience:
                self.lr *= self.factor
                self.since_lr = 0
        return self.since_best >= self.stop_patience


# --- checkpoints ------------------------------------------------------------------

MAGIC = b"AUTOAFCK"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    H: int
    p: float
    mdf: MDFConfig
    phi: dict
    output_relu: bool = False
    grad_scale: float = 1.0
    log: list = field(default_factory=list)
    config_hash: str = ""
    train_state: dict | None = None
    train_arrays: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    def optimizer(self) -> LearnedGRU:
        return LearnedGRU(phi={k: ad.const(v) for k, v in self.phi.items()}, H=self.H, p=self.p,
                          output_relu=self.output_relu, grad_scale=self.grad_scale)

    def check_compatible(self, H: int | None = None, mdf: MDFConfig | None = None) -> None:
        if H is not None and H != self.H:
            raise ShapeMismatchError(f"checkpoint has H={self.H}, requested H={H}")
        if mdf is not None and mdf != self.mdf:
            raise ShapeMismatchError(
                f"checkpoint optimizee {self.mdf.to_dict()} != requested {mdf.to_dict()}")


_DTYPES = {b"c": np.dtype("<c16"), b"f": np.dtype("<f8")}


def _write_array(out: list, name: str, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    tag = b"c" if np.iscomplexobj(arr) else b"f"
    nb = name.encode()
    out.append(len(nb).to_bytes(2, "little") + nb + tag + bytes([arr.ndim]))
    out.append(b"".join(int(s).to_bytes(4, "little") for s in arr.shape))
    out.append(np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes())


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    meta = {
        "H": ckpt.H, "p": ckpt.p, "mdf": ckpt.mdf.to_dict(), "output_relu": ckpt.output_relu,
        "grad_scale": ckpt.grad_scale, "log": ckpt.log, "config_hash": ckpt.config_hash,
        "train_state": ckpt.train_state,
    }
    mb = json.dumps(meta, sort_keys=True).encode()
    arrays = {f"phi.{k}": v for k, v in ckpt.phi.items()}
    arrays.update(ckpt.train_arrays)
    parts = [MAGIC, FORMAT_VERSION.to_bytes(4, "little"), len(mb).to_bytes(4, "little"), mb,
             len(arrays).to_bytes(4, "little")]
    for name in sorted(arrays):
        _write_array(parts, name, arrays[name])
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedCheckpointError(
                f"checkpoint truncated at byte {len(self.buf)} (needed {self.pos + n})")
        b = self.buf[self.pos : self.pos + n]
        self.pos += n
        return b

    def u(self, n: int) -> int:
        return int.from_bytes(self.take(n), "little")


def load_checkpoint(path) -> Checkpoint:
    r = _Reader(Path(path).read_bytes())
    if len(r.buf) < len(MAGIC) or r.buf[: len(MAGIC)] != MAGIC:
        raise BadMagicError("not an autoaf checkpoint (bad magic bytes)")
    r.take(len(MAGIC))
    version = r.u(4)
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"checkpoint format {version}, expected {FORMAT_VERSION}")
    meta = json.loads(r.take(r.u(4)).decode())
    arrays = {}
    for _ in range(r.u(4)):
        name = r.take(r.u(2)).decode()
        tag = r.take(1)
        if tag not in _DTYPES:
            raise CheckpointError(f"unknown dtype tag {tag!r}")
        ndim = r.u(1)
        shape = tuple(r.u(4) for _ in range(ndim))
        dt = _DTYPES[tag]
        n = int(np.prod(shape)) if shape else 1
        arrays[name] = np.frombuffer(r.take(n * dt.itemsize), dtype=dt).reshape(shape).copy()
    if r.pos != len(r.buf):
        raise CheckpointError("trailing bytes after last array")
    phi = {k[4:]: v for k, v in arrays.items() if k.startswith("phi.")}
    H = int(meta["H"])
    for k, shp in param_shapes(H).items():
        if k not in phi or phi[k].shape != shp:
            raise ShapeMismatchError(f"array phi.{k} missing or wrong shape for H={H}")
    return Checkpoint(
        H=H, p=float(meta["p"]), mdf=MDFConfig.from_dict(meta["mdf"]),
        phi={k: phi[k] for k in PARAM_NAMES}, output_relu=bool(meta.get("output_relu", False)),
        grad_scale=float(meta.get("grad_scale", 1.0)), log=meta.get("log", []),
        config_hash=meta.get("config_hash", ""),
        train_state=meta.get("train_state"),
        train_arrays={k: v for k, v in arrays.items() if not k.startswith("phi.")},
        version=version,
    )


# --- data sources -------------------------------------------------------------------

class SceneSampler:
    """Deterministic batches keyed by ``(seed, epoch, batch)``.

    Draws fresh synthetic scenes from a :class:`SceneDistribution`, or
    samples with replacement from a fixed scene list.
    """

    def __init__(self, source: SceneDistribution | Sequence[Scene], seed: int = 0):
        self.source = source
        self.seed = seed
        if not isinstance(source, SceneDistribution) and len(source) == 0:
            raise ValueError("empty training set")

    def batch(self, epoch: int, index: int, size: int) -> list[Scene]:
        key = (self.seed * 1_000_003 + epoch) * 100_003 + index
        if isinstance(self.source, SceneDistribution):
            return [cached_scene(s) for s in self.source.sample(size, key)]
        rng = rng_for(key, 7)
        pick = rng.integers(0, len(self.source), size=size)
        return [self.source[i] for i in pick]


def _stack(scenes: Sequence[Scene]) -> tuple[np.ndarray, np.ndarray]:
    n = min(len(s.far) for s in scenes)
    return np.stack([s.far[:n] for s in scenes]), np.stack([s.near[:n] for s in scenes])


# --- training ------------------------------------------------------------------------

def _learned(phi: dict, cfg: TrainConfig) -> LearnedGRU:
    return LearnedGRU(phi=phi, H=cfg.H, p=cfg.p, output_relu=cfg.output_relu,
                      grad_scale=cfg.feature_scale)


def _window_grads(phi_vals: dict, cfg: TrainConfig, state, h, fb, nb):
    """Meta-loss and real-coordinate gradient for one window of one shard.

    Floating-point warnings are silenced; non-finite results are caught by
    the caller and reported with the batch seed.
    """
    with np.errstate(all="ignore"):
        return _window_grads_impl(phi_vals, cfg, state, h, fb, nb)


def _window_grads_impl(phi_vals, cfg, state, h, fb, nb):
    tape = Tape()
    leaves = {k: tape.leaf(v, name=k) for k, v in phi_vals.items()}
    opt = _learned(leaves, cfg)
    L, state, h, _ = inner_loop(tape, opt, h, state, fb, nb, cfg.n_inner, create_graph=cfg.second_order)
    gs = ad.grad(L, [leaves[k] for k in PARAM_NAMES])
    grads = {k: 2.0 * g.value for k, g in zip(PARAM_NAMES, gs)}
    return float(np.real(L.value)), grads, state.detached(), ad.detach(h)


def meta_train_batch(phi: dict, adam: AdamState, lr: float, cfg: TrainConfig,
                     scenes: Sequence[Scene], pool: ThreadPoolExecutor | None = None,
                     batch_seed: int | None = None):
    """Optimize one batch of scenes end to end; returns ``(phi, adam, mean window loss)``."""
    far, near = _stack(scenes)
    fb, nb = as_blocks(far, cfg.mdf.hop), as_blocks(near, cfg.mdf.hop)
    B = fb.shape[0]
    shard = cfg.shard_size or B
    shards = [slice(i, min(i + shard, B)) for i in range(0, B, shard)]
    states = [init_state(cfg.mdf, (s.stop - s.start,)) for s in shards]
    hs = [ad.const(np.zeros((s.stop - s.start, cfg.mdf.num_theta, cfg.H), dtype=np.complex128))
          for s in shards]
    n_windows = fb.shape[1] // cfg.n_inner
    losses = []
    for w in range(n_windows):
        sl = slice(w * cfg.n_inner, (w + 1) * cfg.n_inner)
        jobs = [(phi, cfg, states[i], hs[i], fb[s, sl], nb[s, sl]) for i, s in enumerate(shards)]
        if pool is not None and len(jobs) > 1:
            results = list(pool.map(lambda a: _window_grads(*a), jobs))
        else:
            results = [_window_grads(*a) for a in jobs]
        total = 0.0
        grads = {k: np.zeros_like(v) for k, v in phi.items()}
        for (loss, g, st, h), s, i in zip(results, shards, range(len(shards))):
            wgt = 1.0 / B
            total += wgt * loss
            for k in grads:
                grads[k] = grads[k] + wgt * g[k]
            states[i], hs[i] = st, h
        if not np.isfinite(total) or not all(np.all(np.isfinite(g)) for g in grads.values()):
            raise DivergenceError(
                f"non-finite meta-loss in window {w}",
                {"batch_seed": batch_seed, "window": w, "loss": total,
                 "scene_ids": [s.id for s in scenes]},
            )
        phi, adam = adam_meta_step(adam, phi, grads, lr, cfg.clip_norm)
        losses.append(total)
    return phi, adam, float(np.mean(losses)) if losses else 0.0


def validation_erle(phi: dict, cfg: TrainConfig, val_scenes: Sequence[Scene]) -> float:
    opt = _learned({k: ad.const(v) for k, v in phi.items()}, cfg)
    rep = evaluate(opt, list(val_scenes), cfg.mdf, threads=cfg.threads)
    return rep.mean()


def probe_loss(phi: dict, cfg: TrainConfig, scenes: Sequence[Scene]) -> float:
    """Summed optimizee loss over a whole batch with fixed ``phi`` (no updates)."""
    far, near = _stack(scenes)
    fb, nb = as_blocks(far, cfg.mdf.hop), as_blocks(near, cfg.mdf.hop)
    state = init_state(cfg.mdf, (fb.shape[0],))
    h = ad.const(np.zeros((fb.shape[0], cfg.mdf.num_theta, cfg.H), dtype=np.complex128))
    opt = _learned({k: ad.const(v) for k, v in phi.items()}, cfg)
    total = 0.0
    for w in range(fb.shape[1] // cfg.n_inner):
        sl = slice(w * cfg.n_inner, (w + 1) * cfg.n_inner)
        L, state, h, _ = inner_loop(Tape(), opt, h, state, fb[:, sl], nb[:, sl], cfg.n_inner,
                                    create_graph=False)
        total += float(np.real(L.value))
        state = state.detached()
    return total


def _persisted_config(cfg: TrainConfig) -> dict:
    d = cfg.to_dict()
    d.pop("threads")
    return d


def _train_arrays(phi: dict, adam: AdamState) -> dict:
    out = {f"train.phi.{k}": v for k, v in phi.items()}
    out.update({f"train.adam.m.{k}": v for k, v in adam.m.items()})
    out.update({f"train.adam.v.{k}": v for k, v in adam.v.items()})
    return out


def outer_loop(cfg: TrainConfig, train: SceneSampler | Sequence[Scene] | SceneDistribution,
               val_scenes: Sequence[Scene], checkpoint_path=None, resume: Checkpoint | None = None,
               epoch_callback: Callable[[dict], None] | None = None,
               val_metric: Callable[[dict, int], float] | None = None) -> Checkpoint:
    """Meta-train a GRU optimizer; returns a checkpoint holding the weights
    with the best validation ERLE.

    ``val_metric(phi, epoch)`` overrides the validation ERLE (used to test
    the schedule).
    """
    cfg.validate()
    if not isinstance(train, SceneSampler):
        train = SceneSampler(train, cfg.seed)
    if not val_scenes and val_metric is None:
        raise ValueError("empty validation set")
    val_metric = val_metric or (lambda phi, epoch: validation_erle(phi, cfg, val_scenes))

    if resume is not None and resume.train_state is not None:
        resume.check_compatible(cfg.H, cfg.mdf)
        ts = resume.train_state
        # runs that hit early stopping are complete; runs cut by the epoch
        # cap or the time budget continue up to this config's cap
        if ts.get("early_stopped") or ts["schedule"]["epoch"] >= cfg.max_epochs:
            return resume
        ta = resume.train_arrays
        phi = {k: ta[f"train.phi.{k}"] for k in PARAM_NAMES}
        adam = AdamState(m={k: ta[f"train.adam.m.{k}"] for k in PARAM_NAMES},
                         v={k: ta[f"train.adam.v.{k}"] for k in PARAM_NAMES}, step=int(ts["adam_step"]))
        sched = PlateauSchedule(**ts["schedule"])
        best_phi = dict(resume.phi)
        history = list(resume.log)
    else:
        phi = gru_init_params(cfg.H, cfg.seed, cfg.out_scale)
        adam = adam_init(phi)
        sched = PlateauSchedule(cfg.meta_lr, cfg.lr_patience, cfg.stop_patience)
        best_phi = dict(phi)
        history = []

    early_stopped = False

    def snapshot(finished: bool) -> Checkpoint:
        return Checkpoint(
            H=cfg.H, p=cfg.p, mdf=cfg.mdf, phi=best_phi, output_relu=cfg.output_relu,
            grad_scale=cfg.feature_scale,
            log=history, config_hash=cfg.hash(),
            train_state={"finished": finished, "early_stopped": early_stopped,
                         "adam_step": adam.step, "schedule": asdict(sched),
                         "config": _persisted_config(cfg)},
            train_arrays=_train_arrays(phi, adam),
        )

    start = time.monotonic()
    pool = ThreadPoolExecutor(max_workers=cfg.threads) if cfg.threads > 1 else None
    finished = False
    try:
        while sched.epoch < cfg.max_epochs:
            epoch = sched.epoch
            t0 = time.monotonic()
            losses = []
            for b in range(cfg.batches_per_epoch):
                scenes = train.batch(epoch, b, cfg.batch_size)
                phi, adam, loss = meta_train_batch(phi, adam, sched.lr, cfg, scenes, pool,
                                                   batch_seed=(cfg.seed, epoch, b))
                losses.append(loss)
            val = float(val_metric(phi, epoch))
            lr_used = sched.lr
            improved = val > sched.best
            stop = sched.update(val)
            if improved:
                best_phi = dict(phi)
            rec = {"epoch": sched.epoch, "meta_loss": float(np.mean(losses)), "val_erle": val,
                   "lr": lr_used, "next_lr": sched.lr, "seconds": round(time.monotonic() - t0, 3)}
            # wall-clock time is reported to the callback but not persisted,
            # so checkpoints are reproducible byte for byte
            history.append({k: v for k, v in rec.items() if k != "seconds"})
            log.info("epoch %(epoch)d loss %(meta_loss).4g val %(val_erle).3f dB lr %(lr).2g", rec)
            if epoch_callback:
                epoch_callback(rec)
            early_stopped = stop
            finished = stop or sched.epoch >= cfg.max_epochs
            if cfg.time_budget_s is not None and time.monotonic() - start > cfg.time_budget_s:
                finished = True
            if checkpoint_path is not None:
                save_checkpoint(snapshot(finished), checkpoint_path)
            if finished:
                break
    finally:
        if pool is not None:
            pool.shutdown()
    return snapshot(True)
