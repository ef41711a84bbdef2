"""Online update rules for optimizee parameters.

Every optimizer maps a per-parameter gradient (conjugate Wirtinger
convention, shape ``(..., P)``) plus its own per-parameter state to an
update ``delta`` that the caller adds to ``theta``. Updates are
element-wise: parameter ``i`` only sees gradient ``i`` and state ``i``.

The learned optimizer is a small complex GRU shared across all parameters,
fed with log-compressed gradient magnitudes.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .core import tape as ad
from .core.tape import Var

DEFAULT_P = 10.0


def extract_features(grad, p: float = DEFAULT_P) -> Var:
    """Clip and log-compress gradient magnitudes into ``[0, 2]``, keeping phase.

    A zero gradient maps to zero.
    """
    if p <= 0:
        raise ValueError("p must be positive")
    g = ad.as_var(grad)
    mag = ad.abs_(g)
    clipped = ad.clip(mag, np.exp(-p), np.exp(p))
    scaled = (ad.log(clipped) + p) * (1.0 / p)
    # unit phasor with 0 at the origin
    nz = (mag.value > 0).astype(np.float64)
    phase = g / (mag + ad.const(1.0 - nz))
    return scaled * phase


# --- learned complex GRU -------------------------------------------------------

PARAM_NAMES = ("in_w", "in_b", "cell_wx", "cell_wh", "cell_b", "out_w", "out_b")


def param_shapes(H: int) -> dict[str, tuple[int, ...]]:
    return {
        "in_w": (H,),
        "in_b": (H,),
        "cell_wx": (H, 3 * H),
        "cell_wh": (H, 3 * H),
        "cell_b": (3 * H,),
        "out_w": (H,),
        "out_b": (1,),
    }


def param_count(H: int) -> int:
    """Number of complex weights for hidden size ``H``."""
    return sum(int(np.prod(s)) for s in param_shapes(H).values())


def _polar_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int, scale: float = 1.0):
    # modulus ~ U(0, a) with E|w|^2 = 2 / (fan_in + fan_out); phase ~ U(-pi, pi)
    a = scale * np.sqrt(6.0 / (fan_in + fan_out))
    mod = rng.uniform(0.0, a, size=shape)
    ph = rng.uniform(-np.pi, np.pi, size=shape)
    return mod * np.exp(1j * ph)


def gru_init_params(H: int, seed: int, out_scale: float = 1.0) -> dict[str, np.ndarray]:
    """Deterministic complex initialization; biases start at zero."""
    if H < 1:
        raise ValueError("H must be >= 1")
    rng = np.random.Generator(np.random.Philox(seed))
    shapes = param_shapes(H)
    phi = {
        "in_w": _polar_uniform(rng, shapes["in_w"], 1, H),
        "cell_wx": _polar_uniform(rng, shapes["cell_wx"], H, H),
        "cell_wh": _polar_uniform(rng, shapes["cell_wh"], H, H),
        "out_w": _polar_uniform(rng, shapes["out_w"], H, 1, scale=out_scale),
    }
    for name in ("in_b", "cell_b", "out_b"):
        phi[name] = np.zeros(shapes[name], dtype=np.complex128)
    return {k: phi[k] for k in PARAM_NAMES}


def gru_cell(phi: dict, x: Var, h: Var) -> Var:
    """Complex GRU cell with split sigmoid/tanh and componentwise gating."""
    H = h.shape[-1]
    gx = x @ phi["cell_wx"]
    gh = h @ phi["cell_wh"]
    b = phi["cell_b"]
    r = ad.csigmoid(gx[..., :H] + gh[..., :H] + b[:H])
    z = ad.csigmoid(gx[..., H:2 * H] + gh[..., H:2 * H] + b[H:2 * H])
    n = ad.ctanh(gx[..., 2 * H:] + b[2 * H:] + ad.smul(r, gh[..., 2 * H:]))
    return ad.smul(1.0 - z, n) + ad.smul(z, h)


def gru_forward(phi: dict, h: Var, features, output_relu: bool = False):
    """One optimizer step for every tracked parameter.

    ``features`` has shape ``(..., P)`` and ``h`` ``(..., P, H)``. Returns
    ``(delta, h')``.
    """
    f = ad.as_var(features)
    h = ad.as_var(h)
    if h.shape[:-1] != f.shape:
        raise ValueError(f"hidden state {h.shape} does not match features {f.shape}")
    fe = ad.reshape(f, f.shape + (1,))
    x = ad.crelu(fe * phi["in_w"] + phi["in_b"])
    h1 = gru_cell(phi, x, h)
    h2 = gru_cell(phi, ad.crelu(h1), h1)
    out = ad.sum_(ad.crelu(h2) * phi["out_w"], axis=-1) + phi["out_b"][0]
    if output_relu:
        out = ad.crelu(out)
    return out, h2


# --- optimizer objects -------------------------------------------------------

class Optimizer:
    """Common interface. ``step`` returns ``(delta, new_state)``."""

    name = "base"

    def init_state(self, theta_shape: tuple[int, ...]):
        return None

    def step(self, grad: Var, state, input_power: np.ndarray | None = None):
        raise NotImplementedError

    def describe(self) -> dict:
        return {"name": self.name}


class ZeroUpdate(Optimizer):
    name = "zero"

    def step(self, grad, state, input_power=None):
        return ad.const(np.zeros(grad.shape, dtype=np.complex128)), state


def lms_update(mu: float, grad):
    """``delta = -mu * grad``."""
    if mu <= 0:
        raise ValueError("mu must be positive")
    return ad.as_var(grad) * (-mu)


@dataclass
class LMS(Optimizer):
    mu: float = 1e-2
    name = "lms"

    def step(self, grad, state, input_power=None):
        return lms_update(self.mu, grad), state

    def describe(self):
        return {"name": self.name, "mu": self.mu}


@dataclass
class BaselineState:
    mu: float
    beta: float
    eps: float
    accum: np.ndarray | None


def nlms_update(state: BaselineState, grad, input_power):
    """Power-normalized step with an exponentially smoothed power estimate.

    A ``None`` accumulator is seeded with the first observed power.
    """
    power = np.asarray(input_power, dtype=np.float64)
    prev = power if state.accum is None else state.accum
    accum = state.beta * prev + (1.0 - state.beta) * power
    g = ad.as_var(grad)
    delta = g * ad.const(-state.mu / (accum + state.eps))
    return delta, replace(state, accum=accum)


def rmsprop_update(state: BaselineState, grad):
    g = ad.as_var(grad)
    accum = state.beta * state.accum + (1.0 - state.beta) * np.abs(g.value) ** 2
    delta = g * ad.const(-state.mu / (np.sqrt(accum) + state.eps))
    return delta, replace(state, accum=accum)


@dataclass
class NLMS(Optimizer):
    mu: float = 0.5
    beta: float = 0.99
    eps: float = 1e-8
    name = "nlms"

    def init_state(self, theta_shape):
        return BaselineState(self.mu, self.beta, self.eps, None)

    def step(self, grad, state, input_power=None):
        if input_power is None:
            raise ValueError("NLMS needs the per-bin input power")
        return nlms_update(state, grad, input_power)

    def describe(self):
        return {"name": self.name, "mu": self.mu, "beta": self.beta}


@dataclass
class RMSprop(Optimizer):
    mu: float = 1e-3
    beta: float = 0.9
    eps: float = 1e-8
    name = "rmsprop"

    def init_state(self, theta_shape):
        return BaselineState(self.mu, self.beta, self.eps, np.zeros(theta_shape))

    def step(self, grad, state, input_power=None):
        return rmsprop_update(state, grad)

    def describe(self):
        return {"name": self.name, "mu": self.mu, "beta": self.beta}


@dataclass
class GRUOptState:
    """Learned-optimizer weights plus per-parameter hidden state."""

    phi: dict
    H: int
    p: float = DEFAULT_P
    output_relu: bool = False
    h: Var | None = None


def gru_init(H: int, seed: int, out_scale: float = 1.0, output_relu: bool = False) -> GRUOptState:
    phi = {k: ad.const(v) for k, v in gru_init_params(H, seed, out_scale).items()}
    return GRUOptState(phi=phi, H=H, output_relu=output_relu)


def gru_step(state: GRUOptState, grad_features) -> tuple[Var, GRUOptState]:
    f = ad.as_var(grad_features)
    h = state.h
    if h is None:
        h = ad.const(np.zeros(f.shape + (state.H,), dtype=np.complex128))
    delta, h2 = gru_forward(state.phi, h, f, state.output_relu)
    return delta, replace(state, h=h2)


@dataclass
class LearnedGRU(Optimizer):
    """Element-wise complex GRU optimizer; ``phi`` values may be tape leaves.

    ``grad_scale`` multiplies the raw gradient before feature extraction so
    that typical magnitudes land inside the ``[e^-p, e^p]`` clipping range.
    """

    phi: dict = field(default_factory=dict)
    H: int = 8
    p: float = DEFAULT_P
    output_relu: bool = False
    grad_scale: float = 1.0
    name = "gru"

    def init_state(self, theta_shape):
        return ad.const(np.zeros(tuple(theta_shape) + (self.H,), dtype=np.complex128))

    def step(self, grad, state, input_power=None):
        feats = extract_features(ad.as_var(grad) * self.grad_scale, self.p)
        return gru_forward(self.phi, state, feats, self.output_relu)

    def describe(self):
        return {"name": self.name, "H": self.H, "p": self.p, "grad_scale": self.grad_scale}


def make_baseline(name: str, **kw) -> Optimizer:
    table = {"lms": LMS, "nlms": NLMS, "rmsprop": RMSprop, "zero": ZeroUpdate}
    if name not in table:
        raise ValueError(f"unknown baseline {name!r}")
    return table[name](**kw)
