import sys

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from iqadefbench.core import (Image, MetricModel, build_toy_metric, clone_metric, constant_metric,
                              gradient, linear_metric, load_png, metric_from_id, normalized_score,
                              random_images, register_external_metric, save_png, score)
from iqadefbench.errors import AdapterError, CapabilityError, ConfigurationError, ModelInputError

from oracles import central_difference

pixels = arrays(np.float64, (8, 9, 3), elements=st.floats(-0.5, 1.5, allow_nan=False))


@given(pixels)
@settings(max_examples=50, deadline=None)
def test_image_clamps_and_roundtrips_through_8bit(arr):
    x = Image(arr)
    assert x.pixels.min() >= 0.0 and x.pixels.max() <= 1.0
    back = Image.from_uint8(x.to_uint8())
    assert np.max(np.abs(back.pixels - x.pixels)) <= 1 / 510 + 1e-12


def test_image_rejects_small_and_nonfinite():
    with pytest.raises(ModelInputError):
        Image(np.zeros((7, 8, 3)))
    with pytest.raises(ModelInputError):
        Image(np.full((8, 8, 3), np.nan))
    with pytest.raises(ModelInputError):
        Image(np.zeros((8, 8)))


def test_image_pixels_read_only():
    x = Image(np.zeros((8, 8, 3)))
    with pytest.raises(ValueError):
        x.pixels[0, 0, 0] = 1.0


def test_png_roundtrip(tmp_path, tex):
    p = save_png(tex, tmp_path / "a.png")
    y = load_png(p)
    assert np.max(np.abs(y.pixels - tex.pixels)) <= 1 / 510 + 1e-12
    assert load_png(save_png(y, tmp_path / "b.png")) == y


def test_toy_score_deterministic(toy, tex):
    vals = [score(toy, tex) for _ in range(10)]
    assert max(vals) - min(vals) <= 1e-12
    assert build_toy_metric(7).score(tex) == vals[0]


def test_constant_metric():
    m = constant_metric(42.0)
    assert m.score(Image(np.random.default_rng(0).random((16, 16, 3)))) == 42.0
    assert np.all(m.gradient(Image(np.full((8, 8, 3), 0.3))).values == 0.0)


def test_linear_metric_matches_elementwise_sum():
    r = np.random.default_rng(3)
    w = r.standard_normal((10, 12, 3))
    x = Image(r.random((10, 12, 3)))
    m = linear_metric(w)
    expected = 0.0
    for i in range(10):
        for j in range(12):
            for c in range(3):
                expected += w[i, j, c] * x.pixels[i, j, c]
    assert score(m, x) == pytest.approx(expected, abs=1e-12)
    assert np.array_equal(gradient(m, x).values, w)


def test_normalized_score():
    half = MetricModel("c", 0.0, 100.0, forward=lambda t: torch.full((t.shape[0],), 50.0, dtype=t.dtype))
    full = MetricModel("c", 0.0, 100.0, forward=lambda t: torch.full((t.shape[0],), 100.0, dtype=t.dtype))
    x = Image(np.zeros((8, 8, 3)))
    assert normalized_score(half, x) == 0.5
    assert normalized_score(full, x) == 1.0


def test_toy_normalized_score_by_division(toy, tex):
    assert normalized_score(toy, tex) == score(toy, tex) / (toy.range_high - toy.range_low)


@given(st.floats(0.1, 100.0))
@settings(max_examples=25, deadline=None)
def test_normalized_score_affine_invariant(k):
    x = Image(np.full((8, 8, 3), 0.25))
    a = MetricModel("a", 1.0, 5.0, forward=lambda t: t.mean(dim=(1, 2, 3)) * 3.0)
    b = MetricModel("b", k * 1.0, k * 5.0, forward=lambda t: t.mean(dim=(1, 2, 3)) * 3.0 * k)
    assert normalized_score(b, x) == pytest.approx(normalized_score(a, x), rel=1e-12)


def test_range_validation():
    with pytest.raises(ConfigurationError):
        MetricModel("bad", 1.0, 1.0, forward=lambda t: t.sum())


def test_toy_gradient_matches_finite_differences(toy):
    imgs = random_images(5, 16, seed=11)
    coords = np.random.default_rng(0).choice(16 * 16 * 3, size=20, replace=False)
    for arr in imgs:
        x = Image(np.clip(arr, 0.01, 0.99))
        g = toy.gradient(x).values.ravel()[coords]
        fd = central_difference(lambda a: toy.score_batch(a[None])[0], x.pixels, coords, h=1e-3)
        assert np.all(np.abs(g - fd) <= 1e-3 * (1 + np.abs(g)))


def test_gradient_needs_capability():
    m = MetricModel("s", 0.0, 1.0, score_fn=lambda a: a.mean(axis=(1, 2, 3)))
    with pytest.raises(CapabilityError):
        m.gradient(Image(np.zeros((8, 8, 3))))


def test_toy_seeds_differ_and_range_covers_fresh_images():
    a, b = build_toy_metric(7), build_toy_metric(8)
    fixtures = random_images(10, 32, seed=99)
    assert np.any(a.score_batch(fixtures) != b.score_batch(fixtures))
    fresh = a.score_batch(random_images(100, 32, seed=12345))
    assert fresh.min() >= a.range_low and fresh.max() <= a.range_high
    assert a.range_estimated and a.gradient_capable and a.trainable


def test_toy_parameter_count(toy):
    n = sum(p.numel() for p in toy.module.parameters())
    assert 5_000 <= n <= 20_000


def test_clone_is_independent(toy, tex):
    c = clone_metric(toy)
    with torch.no_grad():
        for p in c.module.parameters():
            p.add_(0.1)
    assert c.score(tex) != toy.score(tex)


def test_metric_from_id():
    assert metric_from_id("toy-7").identifier == "toy-7"
    assert metric_from_id("mean").score(Image(np.full((8, 8, 3), 0.5))) == 0.5
    with pytest.raises(ConfigurationError):
        metric_from_id("nope")


def test_wrong_batch_shape():
    with pytest.raises(ModelInputError):
        build_toy_metric(7).score_batch(np.zeros((8, 8, 3)))


# external adapter ---------------------------------------------------------

ENDPOINT = [sys.executable, "-m", "iqadefbench.toy_endpoint", "--seed", "7"]


def test_external_adapter_round_trip(toy, tex):
    ext = register_external_metric({"identifier": "toy-ext", "range_low": toy.range_low,
                                    "range_high": toy.range_high}, ENDPOINT)
    assert not ext.gradient_capable
    x8 = Image.from_uint8(tex.to_uint8())
    other = Image.from_uint8(Image(np.random.default_rng(2).random((32, 32, 3))).to_uint8())
    got = ext.score_batch(np.stack([x8.pixels, other.pixels]))
    assert got == pytest.approx([toy.score(x8), toy.score(other)], abs=1e-6)


def test_external_adapter_from_descriptor_file(tmp_path, toy, tex):
    d = tmp_path / "desc.json"
    d.write_text('{"identifier": "e", "range_low": 0, "range_high": 100}')
    ext = register_external_metric(str(d), ENDPOINT)
    assert ext.diam == 100


def test_external_adapter_errors(tex):
    with pytest.raises(ConfigurationError) as e:
        register_external_metric({"identifier": "e"}, ENDPOINT)
    assert "range_low" in e.value.fields
    with pytest.raises(ConfigurationError):
        register_external_metric({"identifier": "e", "range_low": 0, "range_high": 1,
                                  "gradient_capable": True}, ENDPOINT)
    bad = register_external_metric({"identifier": "e", "range_low": 0, "range_high": 1},
                                   [sys.executable, "-c", "print('abc')"])
    with pytest.raises(AdapterError):
        bad.score(tex)
    crash = register_external_metric({"identifier": "e", "range_low": 0, "range_high": 1},
                                     [sys.executable, "-c", "import sys; sys.stderr.write('boom'); sys.exit(3)"])
    with pytest.raises(AdapterError) as e:
        crash.score(tex)
    assert "boom" in e.value.diagnostics
