"""Synthetic single-talk echo scenes.

A scene pairs a far-end reference with a near-end microphone signal that
holds only echo plus noise:

    near = rir * distort(far) + noise

The loudspeaker distortion here corrupts the data. It is unrelated to the
parametric sigmoid that a nonlinear MDF optimizee adapts.

Randomness comes from numpy's counter-based Philox generator, so a seed
gives the same scene on every platform.
"""
from __future__ import annotations

import hashlib
import json
import math
import os
import threading
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import wavio

SAMPLE_RATE = 8000
DISTORTIONS = ("none", "clip", "sigmoid")


def rng_for(seed: int, stream: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=[seed & 0xFFFFFFFFFFFFFFFF, stream]))


@dataclass
class Scene:
    far: np.ndarray
    near: np.ndarray
    sample_rate: int = SAMPLE_RATE
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.far) != len(self.near):
            raise ValueError("far and near signals differ in length")

    @property
    def id(self) -> str:
        return str(self.meta.get("id", self.meta.get("seed", "scene")))

    @property
    def tag(self) -> str:
        return self.meta.get("tag", "linear")

    def __len__(self) -> int:
        return len(self.far)


@dataclass(frozen=True)
class SceneSpec:
    duration: float = 10.0
    rir_length: int = 256
    rir_t60: float = 0.05
    echo_gain: float = 1.0
    snr_db: float = 30.0
    distortion: str = "none"
    clip_threshold: float = 0.1
    sigmoid_drive: float = 4.0
    source: str = "noise"
    level_db: float = -20.0
    seed: int = 0

    def __post_init__(self):
        if not self.duration > 0:
            raise ValueError("duration must be positive")
        if math.isnan(self.snr_db) or self.snr_db == -math.inf:
            raise ValueError("snr_db must be finite or +inf")
        if self.distortion not in DISTORTIONS:
            raise ValueError(f"distortion must be one of {DISTORTIONS}")
        if self.rir_length < 1:
            raise ValueError("rir_length must be >= 1")

    @property
    def tag(self) -> str:
        return "linear" if self.distortion == "none" else "nonlinear"

    def to_dict(self) -> dict:
        d = asdict(self)
        if math.isinf(d["snr_db"]):
            d["snr_db"] = "inf"
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        if "snr_db" in d:
            d["snr_db"] = float(d["snr_db"])
        return cls(**d)

    def key(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def make_rir(length: int, t60: float, rng: np.random.Generator, gain: float = 1.0) -> np.ndarray:
    """Exponentially decaying noise with a dominant direct-path tap."""
    if length == 1:
        return np.array([gain])
    n = np.arange(length)
    decay = np.exp(-6.9 * n / max(t60 * SAMPLE_RATE, 1e-9))
    h = 0.5 * rng.standard_normal(length) * decay
    h[0] = 1.0
    return gain * h / np.linalg.norm(h)


def _source(spec: SceneSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    t = np.arange(n) / SAMPLE_RATE
    if spec.source == "noise":
        # AR(1)-colored noise with a slow syllable-rate envelope
        a = rng.uniform(0.0, 0.9)
        w = rng.standard_normal(n)
        from scipy.signal import lfilter

        x = lfilter([1.0], [1.0, -a], w)
        rate = rng.uniform(2.0, 6.0)
        env = 0.6 + 0.4 * np.sin(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi))
        x = x * env
    elif spec.source == "tones":
        x = np.zeros(n)
        for _ in range(4):
            f = rng.uniform(100.0, 3500.0)
            am = 1.0 + 0.5 * np.sin(2 * np.pi * rng.uniform(0.5, 5.0) * t)
            x += am * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
        x += 0.01 * rng.standard_normal(n)
    else:
        path = Path(spec.source)
        if not path.exists():
            raise FileNotFoundError(f"far-end WAV not found: {path}")
        x, rate = wavio.load_wav(path)
        x = wavio.resample_to_8k(x, rate)
        reps = int(np.ceil(n / max(len(x), 1)))
        x = np.tile(x, reps)[:n]
    rms = np.sqrt(np.mean(x**2))
    if rms > 0:
        x = x * (10 ** (spec.level_db / 20) / rms)
    return x


def distort(x: np.ndarray, spec: SceneSpec) -> np.ndarray:
    if spec.distortion == "clip":
        return np.clip(x, -spec.clip_threshold, spec.clip_threshold)
    if spec.distortion == "sigmoid":
        return np.tanh(spec.sigmoid_drive * x) / spec.sigmoid_drive
    return x


def generate_scene(spec: SceneSpec) -> Scene:
    """Deterministic scene for ``spec`` (seed included)."""
    n = int(round(spec.duration * SAMPLE_RATE))
    rng_src, rng_rir, rng_noise = (rng_for(spec.seed, s) for s in range(3))
    far = _source(spec, n, rng_src)
    rir = make_rir(spec.rir_length, spec.rir_t60, rng_rir, spec.echo_gain)
    echo = np.convolve(distort(far, spec), rir)[:n]
    near = echo.copy()
    if not math.isinf(spec.snr_db):
        noise = rng_noise.standard_normal(n)
        pe, pn = np.sum(echo**2), np.sum(noise**2)
        if pe > 0:
            noise *= np.sqrt(pe / (pn * 10 ** (spec.snr_db / 10)))
        near = near + noise
    peak = max(np.max(np.abs(far)), np.max(np.abs(near)))
    scale = 0.99 / peak if peak > 0.99 else 1.0
    meta = {
        "seed": spec.seed,
        "id": f"s{spec.seed}",
        "tag": spec.tag,
        "snr_db": spec.snr_db,
        "distortion": spec.distortion,
        "rir_length": spec.rir_length,
        "scale": scale,
    }
    return Scene(far=far * scale, near=near * scale, sample_rate=SAMPLE_RATE, meta=meta)


def echo_and_noise(spec: SceneSpec) -> tuple[np.ndarray, np.ndarray]:
    """Separate echo and noise components of a generated scene (pre-scaling)."""
    n = int(round(spec.duration * SAMPLE_RATE))
    rng_src, rng_rir, rng_noise = (rng_for(spec.seed, s) for s in range(3))
    far = _source(spec, n, rng_src)
    rir = make_rir(spec.rir_length, spec.rir_t60, rng_rir, spec.echo_gain)
    echo = np.convolve(distort(far, spec), rir)[:n]
    scene = generate_scene(spec)
    noise = scene.near / scene.meta["scale"] - echo
    return echo, noise


@dataclass(frozen=True)
class SceneDistribution:
    """Randomized collection of scene specs (levels, paths, SNR, distortion)."""

    duration: float = 10.0
    rir_length: int = 256
    rir_t60: tuple[float, float] = (0.02, 0.08)
    echo_gain: tuple[float, float] = (0.3, 1.0)
    snr_db: tuple[float, float] = (20.0, 40.0)
    level_db: tuple[float, float] = (-30.0, -15.0)
    nonlinear_fraction: float = 0.8
    source: str = "noise"

    def sample(self, count: int, seed: int) -> list[SceneSpec]:
        """``count`` specs; exactly ``round(count * nonlinear_fraction)`` are nonlinear."""
        rng = rng_for(seed, 99)
        n_nl = int(round(count * self.nonlinear_fraction))
        kinds = np.array(["clip", "sigmoid"] * count)[:n_nl].tolist() + ["none"] * (count - n_nl)
        order = rng.permutation(count)
        specs = []
        for i in range(count):
            kind = kinds[order[i]]
            specs.append(
                SceneSpec(
                    duration=self.duration,
                    rir_length=self.rir_length,
                    rir_t60=float(rng.uniform(*self.rir_t60)),
                    echo_gain=float(rng.uniform(*self.echo_gain)),
                    snr_db=float(rng.uniform(*self.snr_db)),
                    distortion=kind,
                    clip_threshold=float(rng.uniform(0.05, 0.2)),
                    sigmoid_drive=float(rng.uniform(2.0, 8.0)),
                    source=self.source,
                    level_db=float(rng.uniform(*self.level_db)),
                    seed=int(rng.integers(0, 2**31 - 1)),
                )
            )
        return specs

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneDistribution":
        d = dict(d)
        for k in ("rir_t60", "echo_gain", "snr_db", "level_db"):
            if k in d:
                d[k] = tuple(float(v) for v in d[k])
        return cls(**d)


def concat_scene_change(a: Scene, b: Scene) -> Scene:
    """Join two scenes; ``meta['boundary']`` is the first sample of ``b``."""
    if a.sample_rate != b.sample_rate:
        raise ValueError("sample rate mismatch")
    meta = {
        "id": f"{a.id}+{b.id}",
        "tag": "nonlinear" if "nonlinear" in (a.tag, b.tag) else "linear",
        "boundary": len(a.far),
        "parts": [a.meta, b.meta],
    }
    return Scene(
        far=np.concatenate([a.far, b.far]),
        near=np.concatenate([a.near, b.near]),
        sample_rate=a.sample_rate,
        meta=meta,
    )


# --- caching and manifests -----------------------------------------------------

def cache_dir() -> Path | None:
    d = os.environ.get("AUTOAF_CACHE")
    return Path(d) if d else None


def cached_scene(spec: SceneSpec) -> Scene:
    """:func:`generate_scene`, memoized on disk under ``$AUTOAF_CACHE``."""
    root = cache_dir()
    if root is None:
        return generate_scene(spec)
    path = root / f"{spec.key()}.npz"
    if path.exists():
        z = np.load(path, allow_pickle=False)
        return Scene(far=z["far"], near=z["near"], meta=json.loads(str(z["meta"])))
    scene = generate_scene(spec)
    root.mkdir(parents=True, exist_ok=True)
    tmp = root / f"{spec.key()}.{os.getpid()}.{threading.get_ident()}.tmp.npz"
    np.savez(tmp, far=scene.far, near=scene.near, meta=json.dumps(scene.meta))
    os.replace(tmp, path)
    return scene


def write_scene_set(specs: list[SceneSpec], out_dir) -> dict:
    """Write scenes as paired WAVs plus ``manifest.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for spec in specs:
        scene = cached_scene(spec)
        sid = f"s{spec.seed}"
        wavio.write_wav(out / f"{sid}_far.wav", scene.far)
        wavio.write_wav(out / f"{sid}_near.wav", scene.near)
        entries.append({
            "id": sid,
            "tag": spec.tag,
            "far": f"{sid}_far.wav",
            "near": f"{sid}_near.wav",
            "spec": spec.to_dict(),
        })
    manifest = {"sample_rate": SAMPLE_RATE, "scenes": entries}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return manifest


def load_scene_set(data_dir) -> list[Scene]:
    """Load scenes listed in ``manifest.json``, or every ``*_far.wav`` /
    ``*_near.wav`` pair when no manifest exists."""
    root = Path(data_dir)
    mpath = root / "manifest.json"
    if mpath.exists():
        manifest = json.loads(mpath.read_text())
        entries = manifest["scenes"]
    else:
        entries = [
            {"id": p.name[: -len("_far.wav")], "far": p.name,
             "near": p.name.replace("_far.wav", "_near.wav"), "tag": "unknown"}
            for p in sorted(root.glob("*_far.wav"))
        ]
    scenes = []
    for e in entries:
        far, rf = wavio.load_wav(root / e["far"])
        near, rn = wavio.load_wav(root / e["near"])
        far, near = wavio.resample_to_8k(far, rf), wavio.resample_to_8k(near, rn)
        n = min(len(far), len(near))
        meta = {"id": e["id"], "tag": e.get("tag", "unknown")}
        if "spec" in e:
            meta["seed"] = e["spec"].get("seed")
        scenes.append(Scene(far=far[:n], near=near[:n], meta=meta))
    return scenes
