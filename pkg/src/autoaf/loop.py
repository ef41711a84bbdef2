"""The online adaptation loop shared by meta-training and evaluation.

One step is: ingest a far-end hop, filter, score against the near-end hop,
differentiate the loss w.r.t. the current parameters, ask the optimizer for
an update, apply it and re-project.
"""
from __future__ import annotations

from dataclasses import replace

import numpy as np

from .core import tape as ad
from .core.tape import Tape, Var
from .filters import MDFConfig, MDFState, apply_update, grad_theta, init_state, mdf_step
from .optimizers import Optimizer


class SignalTooShortError(ValueError):
    pass


def input_power(state: MDFState) -> np.ndarray:
    """Per-parameter input power for normalized updates.

    Filter bins get the per-frequency power summed over the M delayed
    blocks (the usual MDF normalization); alpha entries get 1.
    """
    u = np.abs(state.U.value) ** 2
    p = np.broadcast_to(u.sum(axis=-2, keepdims=True), u.shape)
    p = p.reshape(p.shape[:-2] + (-1,))
    if state.alpha is not None:
        p = np.concatenate([p, np.ones(p.shape[:-1] + (4,))], axis=-1)
    return p


def as_blocks(x: np.ndarray, hop: int) -> np.ndarray:
    """Reshape ``(..., T)`` into ``(..., T // hop, hop)``, dropping the tail."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[-1] // hop
    return x[..., : n * hop].reshape(x.shape[:-1] + (n, hop))


def leafify(state: MDFState, tape: Tape) -> MDFState:
    """Detach buffers and register W (and alpha) as fresh leaves on ``tape``."""
    alpha = None if state.alpha is None else tape.leaf(state.alpha.value, name="alpha")
    return replace(
        state,
        W=tape.leaf(state.W.value, name="W"),
        U=ad.detach(state.U),
        buffer=ad.detach(state.buffer),
        alpha=alpha,
    )


def online_step(optimizer: Optimizer, opt_state, state: MDFState, far_block, near_block,
                create_graph: bool = False):
    """Returns ``(state', opt_state', y, loss)``. ``state.W`` must be on a tape."""
    state, y, loss = mdf_step(state, far_block, near_block)
    g = grad_theta(loss, state, create_graph=create_graph)
    delta, opt_state = optimizer.step(g, opt_state, input_power(state))
    state = apply_update(state, delta)
    return state, opt_state, y, loss


def inner_loop(tape: Tape, optimizer: Optimizer, opt_state, state: MDFState,
               far_blocks: np.ndarray, near_blocks: np.ndarray, n_steps: int,
               create_graph: bool = True):
    """Run ``n_steps`` online steps on one tape and accumulate the loss.

    ``far_blocks``/``near_blocks`` have shape ``(..., S, hop)`` with
    ``S >= n_steps``. Incoming parameters and optimizer state are detached,
    so the returned loss only depends on what happens inside this window
    (and on any optimizer weights registered on ``tape``).

    Returns ``(loss, state', opt_state', ys)`` with ``ys`` of shape
    ``(..., n_steps, hop)``.
    """
    far_blocks = np.asarray(far_blocks)
    if far_blocks.shape[-2] < n_steps or np.asarray(near_blocks).shape[-2] < n_steps:
        raise SignalTooShortError(f"need {n_steps} hops, got {far_blocks.shape[-2]}")
    state = leafify(state, tape)
    opt_state = _detach_opt_state(opt_state)
    total: Var = ad.const(0.0)
    ys = []
    for n in range(n_steps):
        state, opt_state, y, loss = online_step(
            optimizer, opt_state, state, far_blocks[..., n, :], near_blocks[..., n, :],
            create_graph=create_graph,
        )
        total = total + loss
        ys.append(y.value)
    y_out = np.stack(ys, axis=-2) if ys else np.zeros(far_blocks.shape[:-2] + (0, far_blocks.shape[-1]))
    return total, state, opt_state, y_out


def _detach_opt_state(s):
    if isinstance(s, Var):
        return ad.detach(s)
    return s


def run_online(optimizer: Optimizer, config: MDFConfig, far: np.ndarray, near: np.ndarray,
               return_state: bool = False):
    """Adapt a fresh filter over whole signals (no meta-learning).

    ``far``/``near`` have shape ``(..., T)``; scenes stacked along leading
    axes run in lock-step. Returns the filter output ``y`` of shape
    ``(..., T')`` with ``T'`` the whole-hop prefix of ``T``.
    """
    hop = config.hop
    fb, nb = as_blocks(far, hop), as_blocks(near, hop)
    batch = fb.shape[:-2]
    state = init_state(config, batch)
    opt_state = optimizer.init_state(batch + (config.num_theta,))
    ys = np.empty(fb.shape)
    with np.errstate(all="ignore"):
        state, opt_state = _adapt(optimizer, state, opt_state, fb, nb, ys)
    y = ys.reshape(batch + (-1,))
    if return_state:
        return y, state, opt_state
    return y


def _adapt(optimizer, state, opt_state, fb, nb, ys):
    for n in range(fb.shape[-2]):
        tape = Tape()
        st = leafify(state, tape)
        st, y, loss = mdf_step(st, fb[..., n, :], nb[..., n, :])
        g = grad_theta(loss, st)
        with ad.no_grad():
            delta, opt_state = optimizer.step(g, opt_state, input_power(st))
            st = apply_update(st, delta)
        state = st
        opt_state = _detach_opt_state(opt_state)
        ys[..., n, :] = y.value
    return state, opt_state
