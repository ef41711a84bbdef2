import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from autoaf.filters import MDFConfig
from autoaf.metrics import MetricError, erle, evaluate, segmental_erle
from autoaf.optimizers import NLMS, ZeroUpdate
from autoaf.scenes import SceneSpec, concat_scene_change, generate_scene


def test_erle_examples(rng):
    d = rng.standard_normal(100)
    assert erle(d, d) == pytest.approx(0.0, abs=1e-12)
    assert erle(d, d / 10) == pytest.approx(20.0, abs=1e-12)
    assert erle(d, np.zeros(100)) == 80.0
    assert erle(d, 1e9 * d) == -80.0
    assert erle(d, np.full(100, np.nan)) == -80.0


def test_erle_errors():
    with pytest.raises(MetricError):
        erle(np.zeros(3), np.ones(3))
    with pytest.raises(MetricError):
        erle(np.ones(3), np.ones(4))


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), c=st.floats(1e-5, 1e5), neg=st.booleans())
def test_erle_scale_invariant(seed, c, neg):
    rng = np.random.default_rng(seed)
    d, e = rng.standard_normal(64), rng.standard_normal(64) * 0.3
    c = -c if neg else c
    assert erle(c * d, c * e) == pytest.approx(erle(d, e), abs=1e-10)


def test_segmental_length(rng):
    d = rng.standard_normal(1000)
    for w, h in [(64, 32), (100, 7), (1000, 1)]:
        assert len(segmental_erle(d, d, w, h)) == (1000 - w) // h + 1


def test_segmental_errors(rng):
    d = rng.standard_normal(10)
    with pytest.raises(MetricError):
        segmental_erle(d, d, 0)
    with pytest.raises(MetricError):
        segmental_erle(d, d, 11)


def test_segmental_step():
    d = np.random.default_rng(0).standard_normal(512)
    e = np.concatenate([d[:256], np.zeros(256)])
    c = segmental_erle(d, e, 64, 64)
    np.testing.assert_allclose(c[:4], 0.0, atol=1e-12)
    assert np.all(c[4:] == 80.0)


def test_segmental_silence_sentinel(rng):
    d = np.concatenate([np.zeros(128), rng.standard_normal(128)])
    c = segmental_erle(d, d * 0.1, 64, 64)
    assert np.isnan(c[0]) and np.isnan(c[1]) and c[2] == pytest.approx(20.0)


def test_segmental_stationary_matches_global(rng):
    d = rng.standard_normal(8000)
    e = 0.05 * rng.standard_normal(8000)
    c = segmental_erle(d, e, 512, 256)
    g = erle(d, e)
    assert np.all(np.abs(c - g) < 1.0)
    assert abs(np.nanmean(c) - g) < 1.0


SPECS = [SceneSpec(duration=0.5, rir_length=1, snr_db=math.inf, seed=i) for i in range(3)]


def test_zero_update_gives_zero_db():
    rep = evaluate(ZeroUpdate(), [generate_scene(s) for s in SPECS], MDFConfig(M=1, N=16))
    np.testing.assert_allclose(rep.values(), 0.0, atol=1e-12)


def test_report_statistics_and_files(tmp_path):
    scenes = [generate_scene(SceneSpec(duration=0.5, rir_length=16, snr_db=40, seed=i,
                                       distortion="clip" if i % 2 else "none")) for i in range(4)]
    scenes.append(concat_scene_change(scenes[0], scenes[1]))
    rep = evaluate(NLMS(mu=300.0, beta=0.9), scenes, MDFConfig(M=1, N=32))
    v = rep.values()
    assert rep.mean() == pytest.approx(float(np.mean(v)), abs=0) and rep.std() >= 0
    assert set(rep.summary()) >= {"all", "linear", "nonlinear"}
    assert rep.summary()["nonlinear"]["count"] == 3
    assert rep.window == 32 and rep.hop == 16
    rep.write(tmp_path)
    rows = list(csv.DictReader(open(tmp_path / "scenes.csv")))
    assert [r["id"] for r in rows] == [s.id for s in scenes]
    curves = list(csv.DictReader(open(tmp_path / "curves.csv")))
    assert set(curves[0]) == {"id", "window", "time_s", "erle_db", "boundary_s"}
    last = [r for r in curves if r["id"] == scenes[-1].id]
    assert float(last[0]["boundary_s"]) == pytest.approx(0.5)
    assert json.loads((tmp_path / "summary.json").read_text())["all"]["count"] == 5
    for s in rep.scenes[:4]:
        assert len(s.curve) == (4000 - 32) // 16 + 1


def test_evaluate_pure_and_thread_independent():
    scenes = [generate_scene(SceneSpec(duration=0.5, rir_length=16, seed=i)) for i in range(5)]
    cfg = MDFConfig(M=2, N=32)
    a = evaluate(NLMS(mu=300.0), scenes, cfg, chunk=2)
    b = evaluate(NLMS(mu=300.0), scenes, cfg, chunk=2, threads=3)
    assert np.array_equal(a.values(), b.values())
    for x, y in zip(a.scenes, b.scenes):
        assert np.array_equal(x.curve, y.curve, equal_nan=True)


def test_evaluate_independent_of_stacking():
    scenes = [generate_scene(SceneSpec(duration=0.5, rir_length=16, seed=i)) for i in range(4)]
    cfg = MDFConfig(M=1, N=32)
    a = evaluate(NLMS(mu=300.0), scenes, cfg, chunk=1)
    b = evaluate(NLMS(mu=300.0), scenes, cfg, chunk=4)
    np.testing.assert_allclose(a.values(), b.values(), rtol=1e-12)
