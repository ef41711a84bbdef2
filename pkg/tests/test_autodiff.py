import numpy as np
import pytest

from autoaf.core import tape as ad
from autoaf.core.tape import ContractError, Tape

from conftest import const_fn, crandn, numeric_wirtinger, rel_err


def test_abs2_gradient_is_w():
    t = Tape()
    w = t.leaf(np.array(3 + 4j))
    (g,) = ad.grad(ad.abs2(w), [w])
    assert g.value == pytest.approx(3 + 4j)


def test_lms_gradient_single_tap():
    # J = |w^H u - d|^2 -> dJ/dw* = u (w^H u - d)^*
    w0, u, d = 0.3 - 0.2j, 1.1 + 0.7j, 0.4 - 0.1j
    t = Tape()
    w = t.leaf(np.array(w0))
    J = ad.abs2(ad.conj(w) * u - d)
    (g,) = ad.grad(J, [w])
    assert g.value == pytest.approx(u * np.conj(np.conj(w0) * u - d))


def test_detach_blocks_one_path():
    t = Tape()
    x = t.leaf(np.array(1.5 - 0.5j))
    L = ad.real(ad.detach(x) * ad.conj(x))
    (g,) = ad.grad(L, [x])
    # only the conj(x) path: d(c x*)/dx* = c, with real part taken of c x*
    full_t = Tape()
    x2 = full_t.leaf(np.array(1.5 - 0.5j))
    (g_full,) = ad.grad(ad.abs2(x2), [x2])
    assert g.value == pytest.approx(x.value / 2)
    assert g_full.value == pytest.approx(x.value)


def test_detach_real_square_gives_x_not_2x():
    t = Tape()
    x = t.leaf(np.array(2.0))
    (g,) = ad.grad(ad.detach(x) * x, [x])
    # half-derivative convention for real leaves: d(cx)/dx / 2 with c = x
    assert 2 * g.value == pytest.approx(2.0)
    (g2,) = ad.grad(x * x, [x])
    assert 2 * g2.value == pytest.approx(4.0)


def test_detach_constant():
    c = ad.const(np.array([1.0, 2.0]))
    d = ad.detach(c)
    np.testing.assert_array_equal(d.value, c.value)
    assert not d.requires_grad


def test_loss_must_be_scalar():
    t = Tape()
    x = t.leaf(np.ones(3))
    with pytest.raises(ContractError):
        ad.grad(x * 2.0, [x])


def test_loss_must_be_real():
    t = Tape()
    x = t.leaf(np.array(1.0 + 1.0j))
    with pytest.raises(ContractError):
        ad.grad(x * 1j, [x])


def test_grad_of_constant_param_rejected():
    t = Tape()
    x = t.leaf(np.array(1.0))
    with pytest.raises(ContractError):
        ad.grad(x * x, [ad.const(1.0)])


def test_unused_param_gets_zero():
    t = Tape()
    x = t.leaf(np.array(1.0))
    y = t.leaf(np.array([1.0, 2.0]))
    gx, gy = ad.grad(x * x, [x, y])
    np.testing.assert_array_equal(gy.value, [0.0, 0.0])


def test_mixing_tapes_rejected():
    a = Tape().leaf(np.array(1.0))
    b = Tape().leaf(np.array(1.0))
    with pytest.raises(ContractError):
        a + b


def test_nodes_reference_earlier_nodes(rng):
    t = Tape()
    x = t.leaf(crandn(rng, 4, 8))
    ad.sum_(ad.abs2(ad.fft(x) * x + 1.0))
    for node in t.nodes:
        for inp in node.inputs:
            if inp.tape is t:
                assert inp.index < node.index


def test_replay_is_bit_identical(rng):
    t = Tape()
    x = t.leaf(crandn(rng, 2, 16))
    W = t.leaf(crandn(rng, 16, 16))
    y = ad.ctanh(ad.ifft(ad.fft(x) @ W)) * ad.csigmoid(x)
    L = ad.mean(ad.abs2(y))
    ad.grad(L, [x, W], create_graph=True)
    values = t.replay()
    for node, v in zip(t.nodes, values):
        assert np.array_equal(node.value, v)


# every primitive against central differences, real and imaginary parts
# treated as independent real variables

def _check(fn, *arrays, tol=1e-6):
    t = Tape()
    leaves = [t.leaf(a) for a in arrays]
    gs = ad.grad(fn(*leaves), leaves)
    f = const_fn(fn)
    for i, g in enumerate(gs):
        num = numeric_wirtinger(f, arrays, i)
        assert rel_err(g.value, num) < tol, (i, rel_err(g.value, num))


U = lambda x: ad.sum_(ad.abs2(x))  # noqa: E731
R = lambda x: ad.sum_(ad.square(x))  # noqa: E731

PRIMITIVES = {
    "add": (lambda a, b: U(a + b), 2, True),
    "sub": (lambda a, b: U(a - b * 2.0), 2, True),
    "mul": (lambda a, b: U(a * b), 2, True),
    "div": (lambda a, b: U(a / (b + 3.0)), 2, True),
    "neg_conj": (lambda a: ad.sum_(ad.real(ad.conj(-a) * (1 + 2j))), 1, True),
    "real_imag": (lambda a: R(ad.real(a)) + R(ad.imag(a) * 3.0) + ad.sum_(ad.imag(a)), 1, True),
    "make_complex": (lambda a, b: U(ad.make_complex(a, b) * (0.5 - 1j)), 2, False),
    "square": (lambda a: U(ad.square(a)), 1, True),
    "abs": (lambda a: ad.sum_(ad.abs_(a)), 1, True),
    "exp": (lambda a: U(ad.exp(a * 0.3)), 1, True),
    "log": (lambda a: U(ad.log(a + 4.0)), 1, True),
    "sqrt": (lambda a: U(ad.sqrt(a + 4.0)), 1, True),
    "tanh": (lambda a: R(ad.tanh(a)), 1, False),
    "sigmoid": (lambda a: R(ad.sigmoid(a)), 1, False),
    "relu": (lambda a: R(ad.relu(a) * (a + 2.0)), 1, False),
    "clip": (lambda a: R(ad.clip(a, -0.5, 0.7) * a), 1, False),
    "csigmoid": (lambda a: U(ad.csigmoid(a) * a), 1, True),
    "ctanh": (lambda a: U(ad.ctanh(a) * a), 1, True),
    "crelu": (lambda a: U(ad.crelu(a) * a), 1, True),
    "smul": (lambda a, b: U(ad.smul(a, b) * a), 2, True),
    "matmul": (lambda a, b: U(ad.reshape(a, (2, 3)) @ ad.reshape(b, (3, 2))), 2, True),
    "sum_axis": (lambda a: U(ad.sum_(ad.reshape(a, (2, 3)), axis=0) * (1 + 1j)), 1, True),
    "mean": (lambda a: ad.abs2(ad.mean(a)), 1, True),
    "getitem": (lambda a: U(a[1:4] * a[np.array([0, 0, 5, 2])][:3]), 1, True),
    "concat_stack": (lambda a, b: U(ad.concatenate([a, b * 2.0]) + ad.stack([b, a]).reshape(12)), 2, True),
    "broadcast": (lambda a, b: U(ad.reshape(a, (6, 1)) * ad.reshape(b, (1, 6))), 2, True),
    "fft": (lambda a: U(ad.fft(ad.reshape(a, (3, 2))) * (1 + 2j)), 1, True),
    "ifft": (lambda a: U(ad.ifft(ad.reshape(a, (3, 2))) * (2 - 1j)), 1, True),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_matches_finite_differences(name, rng):
    fn, arity, cplx = PRIMITIVES[name]
    arrays = [crandn(rng, 6) if cplx else rng.standard_normal(6) for _ in range(arity)]
    _check(fn, *arrays)


def test_where_gradient(rng):
    mask = np.array([True, False, True, False])
    a, b = crandn(rng, 4), crandn(rng, 4)
    _check(lambda x, y: U(ad.where(mask, x, y) * x), a, b)


def test_second_order_through_create_graph(rng):
    # d/dw of |grad_x f(x, w)|^2 where the inner gradient depends on w
    x0, w0 = crandn(rng, 4), crandn(rng, 4)

    def outer(x, w):
        t = Tape()
        xl, wl = t.leaf(x), t.leaf(w)
        inner = ad.sum_(ad.abs2(ad.fft(xl * wl) - 1.0))
        (gx,) = ad.grad(inner, [xl], create_graph=True)
        L = ad.sum_(ad.abs2(gx))
        (gw,) = ad.grad(L, [wl])
        return L.value, gw.value

    _, gw = outer(x0, w0)
    num = numeric_wirtinger(lambda x, w: outer(x, w)[0], [x0, w0], 1)
    assert rel_err(gw, num) < 1e-6
