"""Differentiable optimizees: the multidelay block frequency-domain (MDF)
filter with an optional parametric sigmoid front end, a plain FIR filter,
and the MSE loss.

All functions accept :class:`~autoaf.core.tape.Var` or plain arrays and
support leading batch dimensions. The filter input is the far-end
reference; the desired signal is the near-end microphone.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from fractions import Fraction

import numpy as np

from .core import tape as ad
from .core.fft import is_power_of_two
from .core.tape import Var

ALPHA_INIT = (1.0, -2.0, 0.0, 1.0)


class SizingError(ValueError):
    """Raised when array lengths do not match the filter configuration."""


def _fraction(r) -> Fraction:
    if isinstance(r, str):
        return Fraction(r)
    return Fraction(r).limit_denominator(1024)


@dataclass(frozen=True)
class MDFConfig:
    """MDF layout: ``M`` blocks, FFT size ``N``, overlap fraction ``R``."""

    M: int = 1
    N: int = 64
    R: Fraction = Fraction(1, 2)
    nonlinear: bool = False

    def __post_init__(self):
        object.__setattr__(self, "R", _fraction(self.R))
        if self.M < 1:
            raise SizingError(f"M must be >= 1, got {self.M}")
        if not is_power_of_two(self.N) or self.N < 2:
            raise SizingError(f"N must be a power of two >= 2, got {self.N}")
        hop = self.N * (1 - self.R)
        if hop.denominator != 1 or hop <= 0 or hop > self.N // 2:
            raise SizingError(f"hop N*(1-R) = {hop} must be an integer in [1, N/2]")

    @property
    def hop(self) -> int:
        return int(self.N * (1 - self.R))

    @property
    def taps_per_block(self) -> int:
        return self.N // 2

    @property
    def num_params(self) -> int:
        """P = M*N/2 nonzero time-domain taps."""
        return self.M * self.N // 2

    @property
    def effective_length(self) -> int:
        """Span in samples of the equivalent direct-form FIR filter."""
        return (self.M - 1) * self.hop + self.N // 2

    @property
    def num_theta(self) -> int:
        """Number of complex scalars the optimizer tracks."""
        return self.M * self.N + (4 if self.nonlinear else 0)

    def to_dict(self) -> dict:
        return {"M": self.M, "N": self.N, "R": str(self.R), "nonlinear": self.nonlinear}

    @classmethod
    def from_dict(cls, d: dict) -> "MDFConfig":
        return cls(M=int(d["M"]), N=int(d["N"]), R=d["R"], nonlinear=bool(d.get("nonlinear", False)))


@dataclass(frozen=True)
class MDFState:
    """Optimizee parameters plus the streaming input buffers.

    ``W`` and ``U`` have shape ``(..., M, N)``, ``buffer`` ``(..., N)`` and
    ``alpha`` ``(..., 4)`` (complex with zero imaginary part) or ``None``.
    """

    W: Var
    U: Var
    buffer: Var
    alpha: Var | None = None
    config: MDFConfig = field(default_factory=MDFConfig)

    def detached(self) -> "MDFState":
        return replace(
            self,
            W=ad.detach(self.W),
            U=ad.detach(self.U),
            buffer=ad.detach(self.buffer),
            alpha=None if self.alpha is None else ad.detach(self.alpha),
        )


def init_state(config: MDFConfig, batch: tuple[int, ...] = ()) -> MDFState:
    """Zero filter, zero buffers, near-identity nonlinearity."""
    M, N = config.M, config.N
    alpha = None
    if config.nonlinear:
        alpha = ad.const(np.broadcast_to(np.array(ALPHA_INIT, dtype=np.complex128), batch + (4,)).copy())
    return MDFState(
        W=ad.const(np.zeros(batch + (M, N), dtype=np.complex128)),
        U=ad.const(np.zeros(batch + (M, N), dtype=np.complex128)),
        buffer=ad.const(np.zeros(batch + (N,))),
        alpha=alpha,
        config=config,
    )


def mdf_ingest(state: MDFState, far_block) -> MDFState:
    """Shift one hop of far-end samples into the buffer and the block stack."""
    cfg = state.config
    far_block = ad.as_var(far_block)
    if far_block.shape[-1] != cfg.hop:
        raise SizingError(f"expected a block of {cfg.hop} samples, got {far_block.shape[-1]}")
    buf = ad.concatenate([state.buffer[..., cfg.hop:], far_block], axis=-1)
    newest = ad.fft(buf)
    newest = ad.reshape(newest, newest.shape[:-1] + (1, cfg.N))
    U = ad.concatenate([state.U[..., 1:, :], newest], axis=-2)
    return replace(state, U=U, buffer=buf)


def mdf_filter(state: MDFState) -> Var:
    """Newest ``hop`` output samples of the overlap-save block convolution."""
    cfg = state.config
    acc = ad.sum_(state.W * state.U, axis=-2)
    v = ad.ifft(acc)
    return ad.real(v[..., cfg.N - cfg.hop:])


def antialias(W):
    """Project each block onto filters with zero in the last N/2 time taps."""
    W = ad.as_var(W)
    N = W.shape[-1]
    mask = np.zeros(N)
    mask[: N // 2] = 1.0
    return ad.fft(ad.ifft(W) * ad.const(mask))


def sigmoid_distort(u, alpha):
    """Parametric sigmoid nonlinearity applied sample-wise.

    ``alpha`` has shape ``(..., 4)`` and broadcasts against the trailing
    sample axis of ``u``. Only the real part of ``alpha`` is used.
    """
    u = ad.as_var(u)
    a = ad.real(ad.as_var(alpha))
    a1, a2, a3, a4 = (a[..., k : k + 1] for k in range(4))
    den = ad.sqrt(ad.square(u) + ad.square(a1))
    # u = 0 with a vanishing alpha_1 underflows to 0/0; the limit is 0
    den = ad.where(den.value > 0, den, ad.const(1.0))
    uh = u * a1 / den
    s = a2 * uh + a3 * ad.square(uh)
    # 2/(1+exp(s)) - 1 == -tanh(s/2), without overflow
    return -(a4 * ad.tanh(s * 0.5))


def mse_loss(y, d) -> Var:
    """Mean squared error over all elements."""
    y, d = ad.as_var(y), ad.as_var(d)
    if y.shape != d.shape:
        raise SizingError(f"shape mismatch {y.shape} vs {d.shape}")
    e = y - d
    if e.is_complex:
        return ad.mean(ad.abs2(e))
    return ad.mean(ad.square(e))


def scene_loss(y, d) -> Var:
    """Per-scene MSE over the last axis, summed over leading (scene) axes.

    Summing rather than averaging across scenes keeps each scene's
    gradient equal to the gradient of its own MSE, independent of how many
    scenes are stacked together.
    """
    y, d = ad.as_var(y), ad.as_var(d)
    if y.shape != d.shape:
        raise SizingError(f"shape mismatch {y.shape} vs {d.shape}")
    e = y - d
    return ad.sum_(e * e) * (1.0 / y.shape[-1])


def fir_optimizee(w, u, d):
    """Inner product output ``w^H u`` and its squared error against ``d``."""
    w, u = ad.as_var(w), ad.as_var(u)
    if w.shape[-1] != u.shape[-1]:
        raise SizingError("filter and input window lengths differ")
    y = ad.sum_(ad.conj(w) * u, axis=-1)
    return y, ad.mean(ad.abs2(y - ad.as_var(d)))


# --- parameter packing -------------------------------------------------------

def theta_of(state: MDFState) -> Var:
    """Flatten optimizee parameters to ``(..., num_theta)``."""
    W = state.W
    flat = ad.reshape(W, W.shape[:-2] + (W.shape[-2] * W.shape[-1],))
    if state.alpha is None:
        return flat
    return ad.concatenate([flat, state.alpha], axis=-1)


def with_theta(state: MDFState, theta: Var) -> MDFState:
    """Inverse of :func:`theta_of` (no projection applied)."""
    cfg = state.config
    mn = cfg.M * cfg.N
    lead = theta.shape[:-1]
    W = ad.reshape(theta[..., :mn], lead + (cfg.M, cfg.N))
    alpha = theta[..., mn:] if state.alpha is not None else None
    return replace(state, W=W, alpha=alpha)


def apply_update(state: MDFState, delta) -> MDFState:
    """``theta <- theta + delta`` followed by the antialias projection on W
    and projection of alpha onto the reals."""
    new = with_theta(state, theta_of(state) + ad.as_var(delta))
    W = antialias(new.W)
    alpha = new.alpha
    if alpha is not None:
        alpha = ad.make_complex(ad.real(alpha), ad.const(np.zeros(alpha.shape)))
    return replace(new, W=W, alpha=alpha)


def mdf_step(state: MDFState, far_block, near_block):
    """One online step: distort (if enabled), ingest, filter, loss.

    Returns ``(state', y, loss)`` with ``loss`` summed over stacked
    scenes (see :func:`scene_loss`); the caller computes gradients of ``loss``
    with respect to ``theta_of(state')`` and applies an update.
    """
    far_block = ad.as_var(far_block)
    if state.config.nonlinear:
        far_block = sigmoid_distort(far_block, state.alpha)
    state = mdf_ingest(state, far_block)
    y = mdf_filter(state)
    return state, y, scene_loss(y, near_block)


def block_taps_to_W(taps: np.ndarray, N: int) -> np.ndarray:
    """Frequency-domain blocks from ``(..., M, N/2)`` time-domain taps."""
    taps = np.asarray(taps)
    pad = np.zeros(taps.shape[:-1] + (N,), dtype=np.complex128)
    pad[..., : N // 2] = taps
    from .core.fft import fft

    return fft(pad)


def equivalent_fir(taps: np.ndarray, config: MDFConfig) -> np.ndarray:
    """Direct-form FIR equal to an MDF filter with block taps ``(M, N/2)``.

    Block ``m`` (0 = oldest) acts with delay ``(M-1-m) * hop``.
    """
    M, hop, half = config.M, config.hop, config.N // 2
    h = np.zeros(config.effective_length, dtype=np.asarray(taps).dtype)
    for m in range(M):
        d = (M - 1 - m) * hop
        h[d : d + half] += taps[m]
    return h


def grad_theta(loss: Var, state: MDFState, create_graph: bool = False) -> Var:
    """Gradient of ``loss`` w.r.t. the current parameters, packed like
    :func:`theta_of`."""
    params = [state.W] if state.alpha is None else [state.W, state.alpha]
    gs = ad.grad(loss, params, create_graph=create_graph)
    gW = gs[0]
    flat = ad.reshape(gW, gW.shape[:-2] + (gW.shape[-2] * gW.shape[-1],))
    if state.alpha is None:
        return flat
    return ad.concatenate([flat, gs[1]], axis=-1)
