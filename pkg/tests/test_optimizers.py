import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from autoaf.core import tape as ad
from autoaf.core.tape import Tape
from autoaf.optimizers import (
    LMS, NLMS, BaselineState, LearnedGRU, RMSprop, ZeroUpdate, extract_features,
    gru_forward, gru_init, gru_init_params, gru_step, lms_update, make_baseline,
    nlms_update, param_count, param_shapes, rmsprop_update,
)

from conftest import crandn, numeric_wirtinger, rel_err

P = 10.0


# --- features ----------------------------------------------------------------

def test_feature_unit_magnitude_keeps_phase():
    g = np.exp(1j * np.array([0.3, -2.0, 3.1]))
    f = extract_features(g, P).value
    np.testing.assert_allclose(np.abs(f), 1.0, atol=1e-15)
    np.testing.assert_array_equal(np.angle(f), np.angle(g))


def test_feature_saturation():
    g = np.array([math.exp(P), 5 * math.exp(P), math.exp(-P), 1e-9, 0.0]) * np.exp(0.7j)
    m = np.abs(extract_features(g, P).value)
    np.testing.assert_allclose(m[:2], 2.0, rtol=1e-15)
    assert m[2] == 0.0 and m[3] == 0.0 and m[4] == 0.0
    # on the real axis the saturated values are exact
    r = extract_features(np.array([math.exp(P) * 3, -math.exp(-P) / 3]), P).value
    assert r.tolist() == [2.0, 0.0]


def test_feature_two():
    f = extract_features(np.array([2.0 + 0j]), P).value[0]
    assert f.real == pytest.approx((math.log(2) + 10) / 10, abs=1e-15) and f.imag == 0


def test_feature_zero_gradient_is_zero():
    assert extract_features(np.zeros(3, dtype=complex), P).value.tolist() == [0, 0, 0]


def test_feature_rejects_bad_p():
    with pytest.raises(ValueError):
        extract_features(np.ones(2), 0.0)


@settings(max_examples=100, deadline=None)
@given(mag=st.floats(1e-300, 1e300), phase=st.floats(-math.pi, math.pi))
def test_feature_range_and_phase(mag, phase):
    g = np.array([mag * np.exp(1j * phase)])
    f = extract_features(g, P).value[0]
    assert 0.0 <= abs(f) <= 2.0 + 1e-15
    if abs(f) > 0:
        assert np.angle(f) == pytest.approx(np.angle(g[0]), abs=1e-15)


# --- GRU ---------------------------------------------------------------------

def test_param_counts():
    assert param_count(24) == 6 * 24 * 24 + 6 * 24 + 1 == 3601
    assert param_count(48) == 14113
    shapes = param_shapes(5)
    assert sum(int(np.prod(s)) for s in shapes.values()) == param_count(5)


def test_init_deterministic():
    a, b = gru_init_params(8, 3), gru_init_params(8, 3)
    c = gru_init_params(8, 4)
    for k in a:
        assert np.array_equal(a[k], b[k])
    assert not np.array_equal(a["cell_wx"], c["cell_wx"])


def test_init_biases_zero_and_moduli_bounded():
    H = 16
    phi = gru_init_params(H, 0)
    assert not np.any(phi["cell_b"]) and not np.any(phi["in_b"]) and not np.any(phi["out_b"])
    assert np.max(np.abs(phi["cell_wh"])) <= np.sqrt(6 / (2 * H))


def test_init_rejects_zero_hidden():
    with pytest.raises(ValueError):
        gru_init_params(0, 0)


def test_zero_weights_give_zero_update(rng):
    phi = {k: np.zeros_like(v) for k, v in gru_init_params(4, 0).items()}
    st = gru_init(4, 0)
    st.phi = {k: ad.const(v) for k, v in phi.items()}
    delta, st2 = gru_step(st, crandn(rng, 7))
    assert not np.any(delta.value)
    h = st2.h.value
    assert np.all(h == h.flat[0])


def test_hidden_shape_mismatch(rng):
    phi = {k: ad.const(v) for k, v in gru_init_params(3, 0).items()}
    with pytest.raises(ValueError):
        gru_forward(phi, np.zeros((5, 3), complex), crandn(rng, 4))


def test_permutation_equivariance(rng):
    phi = {k: ad.const(v) for k, v in gru_init_params(6, 1).items()}
    f, h = crandn(rng, 9), crandn(rng, 9, 6) * 0.3
    perm = rng.permutation(9)
    d1, h1 = gru_forward(phi, h, f)
    d2, h2 = gru_forward(phi, h[perm], f[perm])
    np.testing.assert_array_equal(d1.value[perm], d2.value)
    np.testing.assert_array_equal(h1.value[perm], h2.value)


def test_hidden_bounded_on_zero_input():
    st = gru_init(24, 0)
    st.phi["in_b"] = ad.const(np.full(24, 0.5 - 0.5j))
    for _ in range(100):
        _, st = gru_step(st, np.zeros(5, complex))
    assert np.max(np.abs(st.h.value)) < 10


def _scalar_reference(phi, f, h, output_relu=False):
    """Cell equations spelled out one complex scalar at a time."""
    def sig(z):
        return complex(1 / (1 + math.exp(-z.real)), 1 / (1 + math.exp(-z.imag)))

    def tanh(z):
        return complex(math.tanh(z.real), math.tanh(z.imag))

    def relu(z):
        return complex(max(z.real, 0.0), max(z.imag, 0.0))

    def smul(a, b):
        return complex(a.real * b.real, a.imag * b.imag)

    H = len(h)
    wx, wh, b = phi["cell_wx"], phi["cell_wh"], phi["cell_b"]

    def cell(x, h):
        out = []
        for j in range(H):
            def pre(g, src, w):
                return sum(src[i] * w[i, g * H + j] for i in range(H))
            r = sig(pre(0, x, wx) + pre(0, h, wh) + b[j])
            z = sig(pre(1, x, wx) + pre(1, h, wh) + b[H + j])
            n = tanh(pre(2, x, wx) + b[2 * H + j] + smul(r, pre(2, h, wh)))
            out.append(smul(1 - z, n) + smul(z, h[j]))
        return out

    x = [relu(f * phi["in_w"][j] + phi["in_b"][j]) for j in range(H)]
    h1 = cell(x, list(h))
    h2 = cell([relu(v) for v in h1], h1)
    out = sum(relu(h2[j]) * phi["out_w"][j] for j in range(H)) + phi["out_b"][0]
    return (relu(out) if output_relu else out), h2


@pytest.mark.parametrize("output_relu", [False, True])
def test_gru_matches_scalar_oracle(output_relu):
    rng = np.random.default_rng(5)
    phi = {k: crandn(rng, *v.shape) * 0.7 for k, v in gru_init_params(2, 0).items()}
    f = 0.4 - 0.9j
    h = crandn(rng, 2) * 0.5
    d, h2 = gru_forward({k: ad.const(v) for k, v in phi.items()}, h[None], np.array([f]), output_relu)
    d_ref, h_ref = _scalar_reference(phi, f, h, output_relu)
    assert d.value[0] == pytest.approx(d_ref, abs=1e-13)
    np.testing.assert_allclose(h2.value[0], h_ref, atol=1e-13)


def test_gru_phi_gradient_matches_fd():
    rng = np.random.default_rng(9)
    base = {k: crandn(rng, *v.shape) * 0.5 for k, v in gru_init_params(2, 0).items()}
    feats = [crandn(rng, 3) * 0.5, crandn(rng, 3) * 0.5]
    names = sorted(base)

    def run(*arrays):
        phi = dict(zip(names, arrays))
        h = ad.const(np.zeros((3, 2), complex))
        total = ad.const(0.0)
        for f in feats:
            d, h = gru_forward(phi, h, f)
            total = total + ad.sum_(ad.abs2(d - 0.1))
        return total

    t = Tape()
    leaves = [t.leaf(base[k]) for k in names]
    gs = ad.grad(run(*leaves), leaves)

    def f_np(*arrays):
        with ad.no_grad():
            return run(*[ad.const(a) for a in arrays]).value

    for i, g in enumerate(gs):
        num = numeric_wirtinger(f_np, [base[k] for k in names], i)
        assert rel_err(g.value, num) < 1e-5, names[i]


def test_learned_gru_scales_gradient(rng):
    phi = {k: ad.const(v) for k, v in gru_init_params(4, 0).items()}
    g = crandn(rng, 5) * 1e-6
    a = LearnedGRU(phi=phi, H=4, grad_scale=1e3)
    b = LearnedGRU(phi=phi, H=4, grad_scale=1.0)
    da, _ = a.step(ad.const(g), a.init_state((5,)))
    db, _ = b.step(ad.const(g * 1e3), b.init_state((5,)))
    np.testing.assert_allclose(da.value, db.value, rtol=1e-12)


# --- baselines ---------------------------------------------------------------

def test_lms_examples():
    assert lms_update(0.5, np.array([2 + 2j])).value[0] == -1 - 1j
    assert not np.any(lms_update(0.5, np.zeros(3)).value)
    with pytest.raises(ValueError):
        lms_update(0.0, np.zeros(1))


def test_nlms_zero_gradient_updates_accum():
    s = BaselineState(mu=0.1, beta=0.9, eps=1e-8, accum=np.ones(3))
    d, s2 = nlms_update(s, np.zeros(3, complex), np.full(3, 2.0))
    assert not np.any(d.value)
    np.testing.assert_allclose(s2.accum, 1.1)


def test_nlms_fixed_point_is_scaled_lms(rng):
    c, mu = 4.0, 0.2
    s = BaselineState(mu=mu, beta=0.99, eps=1e-8, accum=np.full(3, c))
    g = crandn(rng, 3)
    d, _ = nlms_update(s, g, np.full(3, c))
    np.testing.assert_allclose(d.value, -(mu / (c + 1e-8)) * g, rtol=1e-14)


def test_nlms_seeds_accumulator_from_first_power():
    opt = NLMS(mu=1.0, beta=0.99)
    d, s = opt.step(ad.const(np.ones(2, complex)), opt.init_state((2,)), np.array([2.0, 4.0]))
    np.testing.assert_allclose(s.accum, [2.0, 4.0])
    np.testing.assert_allclose(d.value, [-0.5, -0.25], rtol=1e-7)


def test_nlms_requires_power():
    opt = NLMS()
    with pytest.raises(ValueError):
        opt.step(ad.const(np.ones(2)), opt.init_state((2,)))


def test_rmsprop_zero_gradient():
    opt = RMSprop(mu=0.1)
    s = opt.init_state((4,))
    for _ in range(3):
        d, s = opt.step(ad.const(np.zeros(4, complex)), s)
        assert not np.any(d.value)


def test_rmsprop_steady_state_magnitude_is_mu():
    opt = RMSprop(mu=0.01, beta=0.9)
    s = opt.init_state((1,))
    for _ in range(500):
        d, s = opt.step(ad.const(np.array([0.3 + 0j])), s)
    assert abs(d.value[0]) == pytest.approx(0.01, rel=1e-6)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), beta=st.floats(0.0, 0.999))
def test_accumulators_nonnegative(seed, beta):
    rng = np.random.default_rng(seed)
    sn = BaselineState(0.1, beta, 1e-8, None)
    sr = BaselineState(0.1, beta, 1e-8, np.zeros(4))
    for _ in range(5):
        g = crandn(rng, 4) * 10.0 ** rng.uniform(-8, 3)
        _, sn = nlms_update(sn, g, np.abs(crandn(rng, 4)) ** 2)
        _, sr = rmsprop_update(sr, g)
        assert np.all(sn.accum >= 0) and np.all(sr.accum >= 0)


@pytest.mark.parametrize("name", ["lms", "nlms", "rmsprop", "zero", "gru"])
def test_elementwise_concatenation(name, rng):
    if name == "gru":
        opt = LearnedGRU(phi={k: ad.const(v) for k, v in gru_init_params(3, 2).items()}, H=3)
    else:
        opt = make_baseline(name) if name != "lms" else LMS(mu=0.3)
    g1, g2 = crandn(rng, 3), crandn(rng, 5)
    p1, p2 = np.abs(crandn(rng, 3)), np.abs(crandn(rng, 5))
    s1, s2, s = opt.init_state((3,)), opt.init_state((5,)), opt.init_state((8,))
    for _ in range(3):
        d1, s1 = opt.step(ad.const(g1), s1, p1)
        d2, s2 = opt.step(ad.const(g2), s2, p2)
        d, s = opt.step(ad.const(np.concatenate([g1, g2])), s, np.concatenate([p1, p2]))
        np.testing.assert_allclose(d.value, np.concatenate([d1.value, d2.value]), rtol=1e-14, atol=0)


def test_zero_update():
    d, _ = ZeroUpdate().step(ad.const(np.ones(3)), None)
    assert not np.any(d.value)


def test_unknown_baseline():
    with pytest.raises(ValueError):
        make_baseline("adam")


# --- system identification ---------------------------------------------------

@pytest.fixture(scope="module")
def sysid():
    from autoaf.filters import MDFConfig
    from autoaf.scenes import SceneSpec, generate_scene
    scene = generate_scene(SceneSpec(duration=2.0, rir_length=32, snr_db=float("inf"), seed=7))
    return [scene], MDFConfig(M=1, N=64)


def _best(make, grid, scenes, cfg):
    from autoaf.metrics import evaluate
    return max(evaluate(make(v), scenes, cfg).mean() for v in grid)


def test_nlms_identifies_echo_path(sysid):
    scenes, cfg = sysid
    scale = cfg.N * cfg.hop
    assert _best(lambda f: NLMS(mu=f * scale), (1e-3, 1e-2, 0.1, 1.0), scenes, cfg) > 20.0


def test_rmsprop_identifies_echo_path(sysid):
    scenes, cfg = sysid
    assert _best(lambda m: RMSprop(mu=m), (1e-3, 1e-2, 3e-2), scenes, cfg) > 15.0
