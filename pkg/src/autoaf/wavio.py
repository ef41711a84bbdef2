"""RIFF/WAVE PCM16 reading and writing, plus resampling to 8 kHz."""
from __future__ import annotations

import struct
import wave
from pathlib import Path

import numpy as np
from scipy.signal import resample_poly

TARGET_RATE = 8000
SUPPORTED_RATES = (8000, 16000, 48000)

_PCM = 1
_EXTENSIBLE = 0xFFFE


class WavError(ValueError):
    """Base class for WAV parsing failures."""


class MalformedWavError(WavError):
    pass


class UnsupportedEncodingError(WavError):
    pass


class UnsupportedRateError(ValueError):
    pass


def _chunks(buf: bytes):
    pos = 12
    while pos + 8 <= len(buf):
        cid, size = struct.unpack_from("<4sI", buf, pos)
        body = buf[pos + 8 : pos + 8 + size]
        if len(body) < size:
            raise MalformedWavError(f"chunk {cid!r} truncated ({len(body)} of {size} bytes)")
        yield cid, body
        pos += 8 + size + (size & 1)


def parse_wav(buf: bytes) -> tuple[np.ndarray, int]:
    if len(buf) < 12 or buf[:4] != b"RIFF" or buf[8:12] != b"WAVE":
        raise MalformedWavError("missing RIFF/WAVE header")
    fmt = None
    data = None
    for cid, body in _chunks(buf):
        if cid == b"fmt ":
            if len(body) < 16:
                raise MalformedWavError("fmt chunk too short")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
            if fmt[0] == _EXTENSIBLE and len(body) >= 26:
                sub = struct.unpack_from("<H", body, 24)[0]
                fmt = (sub,) + fmt[1:]
        elif cid == b"data":
            data = body
    if fmt is None:
        raise MalformedWavError("no fmt chunk")
    if data is None:
        raise MalformedWavError("no data chunk")
    tag, channels, rate, _, _, bits = fmt
    if tag != _PCM or bits != 16:
        raise UnsupportedEncodingError(f"only 16-bit PCM is supported (format tag {tag}, {bits} bits)")
    if channels not in (1, 2):
        raise UnsupportedEncodingError(f"unsupported channel count {channels}")
    n = len(data) // (2 * channels)
    x = np.frombuffer(data[: n * 2 * channels], dtype="<i2").astype(np.float64) / 32768.0
    x = x.reshape(n, channels).mean(axis=1)
    return x, rate


def load_wav(path) -> tuple[np.ndarray, int]:
    """Read a mono or stereo PCM16 file; samples scaled to [-1, 1)."""
    return parse_wav(Path(path).read_bytes())


def write_wav(path, x: np.ndarray, rate: int = TARGET_RATE) -> None:
    """Write mono PCM16; values are clipped to the representable range."""
    q = np.clip(np.round(np.asarray(x) * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(rate)
        w.writeframes(q.tobytes())


def resample_to_8k(x: np.ndarray, from_rate: int) -> np.ndarray:
    """Windowed-sinc polyphase decimation to 8 kHz."""
    if from_rate not in SUPPORTED_RATES:
        raise UnsupportedRateError(f"cannot resample from {from_rate} Hz")
    x = np.asarray(x, dtype=np.float64)
    if from_rate == TARGET_RATE:
        return x
    return resample_poly(x, 1, from_rate // TARGET_RATE, window=("kaiser", 10.0), padtype="line")
