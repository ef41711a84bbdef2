import numpy as np
import pytest

from autoaf.core import tape as ad


def numeric_wirtinger(fn, args, i, h=1e-6):
    """Central-difference conjugate-Wirtinger gradient of a real scalar ``fn``
    w.r.t. ``args[i]``, perturbing real and imaginary parts independently."""
    x = np.asarray(args[i])
    cplx = np.iscomplexobj(x)
    out = np.zeros(x.shape, dtype=np.complex128)
    for idx in np.ndindex(x.shape):
        for unit in ((1.0, 1j) if cplx else (1.0,)):
            xp = x.astype(np.complex128 if cplx else np.float64).copy()
            xm = xp.copy()
            xp[idx] += unit * h
            xm[idx] -= unit * h
            a = list(args)
            a[i] = xp
            fp = float(np.real(fn(*a)))
            a[i] = xm
            fm = float(np.real(fn(*a)))
            out[idx] += unit * (fp - fm) / (2 * h) / 2
    return out if cplx else out.real


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def crandn(rng, *shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def const_fn(fn):
    """Wrap a Var-level function so it evaluates on plain arrays."""
    def f(*arrays):
        with ad.no_grad():
            return fn(*[ad.const(a) for a in arrays]).value
    return f
