import sys

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from iqadefbench.core import Image
from iqadefbench.errors import AdapterError, CapabilityError, ConfigurationError
from iqadefbench.measures import psnr
from iqadefbench.purification import (DEFAULT_GRIDS, DEFENSES, DIFFERENTIABLE, STOCHASTIC, DefenseSpec,
                                      color_quantize, compose, defense_grid, diffjpeg_defend, diffjpeg_torch,
                                      filter_defend, geometric_defend, jpeg_defend, purify, purify_batch,
                                      random_noise_defend, register_external_purifier, scaled_qtable,
                                      LUMA_QTABLE)

from conftest import textured
from oracles import central_difference


def smooth_gradient(size=32):
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    return Image(np.stack([0.2 + 0.6 * xx, 0.2 + 0.6 * yy, 0.5 * (xx + yy) * 0.8 + 0.1], axis=2))


def photo(seed=0, size=64):
    from iqadefbench.dataset import synthetic_image
    return Image(synthetic_image(np.random.default_rng(seed), size))


ALL_SPECS = [s for n in DEFENSES if n != "external" for s in defense_grid(n)]


def test_flags():
    assert DIFFERENTIABLE == {"none", "diffjpeg", "resize", "bilinear_upscale", "rotate", "crop", "flip",
                              "gaussian_blur", "unsharp", "random_noise"}
    assert STOCHASTIC == {"rotate", "crop", "random_noise"}
    assert not DefenseSpec("jpeg", 50).differentiable
    assert DefenseSpec("rotate", 4.0).stochastic


def test_five_params_per_parameterized_defense():
    for name, grid in DEFAULT_GRIDS.items():
        assert len(grid) == 5, name


@pytest.mark.parametrize("spec", ALL_SPECS, ids=lambda s: s.identifier)
def test_shape_range_and_determinism(spec):
    x = textured(64, 1)
    a = purify(spec, x, seed=9)
    assert a.shape == x.shape
    assert a.pixels.min() >= 0.0 and a.pixels.max() <= 1.0
    assert purify(spec, x, seed=9) == a


def test_param_validation():
    for name, bad in (("jpeg", 0), ("jpeg", 101), ("color_quant", 1), ("gaussian_blur", 4),
                      ("median_blur", 0), ("resize", 0.0), ("rotate", -1.0), ("random_noise", -0.1)):
        with pytest.raises(ConfigurationError):
            DefenseSpec(name, bad)
    with pytest.raises(ConfigurationError):
        DefenseSpec("nope")
    with pytest.raises(ConfigurationError):
        purify(DefenseSpec("crop", 100), textured(32))


def test_flip_involution(tex):
    once = purify(DefenseSpec("flip"), tex)
    assert once != tex
    assert purify(DefenseSpec("flip"), once) == tex


def test_jpeg_high_quality_and_ordering():
    g = smooth_gradient()
    assert psnr(jpeg_defend(g, 100), g) >= 40.0
    p = photo(2)
    assert psnr(jpeg_defend(p, 10), p) < psnr(jpeg_defend(p, 90), p)
    assert psnr(diffjpeg_defend(p, 10), p) < psnr(diffjpeg_defend(p, 90), p)


def test_jpeg_uniform_gray():
    g = Image(np.full((16, 16, 3), 128 / 255))
    for q in (10, 50, 90):
        assert np.max(np.abs(jpeg_defend(g, q).pixels - g.pixels)) <= 1 / 255 + 1e-12
        assert np.max(np.abs(diffjpeg_defend(g, q).pixels - g.pixels)) <= 1 / 255 + 1e-12


def test_diffjpeg_tracks_real_codec():
    for seed in range(3):
        p = photo(seed)
        for q in (50, 75, 95):
            assert np.mean(np.abs(diffjpeg_defend(p, q).pixels - jpeg_defend(p, q).pixels)) <= 0.02


def test_scaled_qtable():
    assert np.array_equal(scaled_qtable(LUMA_QTABLE, 50), LUMA_QTABLE)
    # libjpeg: scale 5000/q for q < 50, table entries floor((t*s + 50)/100) clipped to >= 1
    assert scaled_qtable(LUMA_QTABLE, 10)[0, 0] == 80
    assert scaled_qtable(LUMA_QTABLE, 100).max() == 1


def test_diffjpeg_gradient_8x8():
    x = np.random.default_rng(3).uniform(0.2, 0.8, (1, 3, 8, 8))
    w = np.random.default_rng(4).standard_normal((1, 3, 8, 8))

    def f(a):
        with torch.no_grad():
            return float((diffjpeg_torch(torch.from_numpy(a), 50) * torch.from_numpy(w)).sum())

    t = torch.from_numpy(x.copy()).requires_grad_(True)
    (diffjpeg_torch(t, 50) * torch.from_numpy(w)).sum().backward()
    coords = np.arange(0, x.size, 7)
    fd = central_difference(f, x, coords, h=1e-5)
    g = t.grad.numpy().ravel()[coords]
    assert np.linalg.norm(g - fd) <= 1e-2 * np.linalg.norm(fd)


def test_color_quantize():
    x = textured(16, 2)
    assert np.max(np.abs(color_quantize(x, 256).pixels - x.pixels)) <= 1 / 510 + 1e-12
    two = color_quantize(x, 2).pixels
    assert set(np.unique(two)) <= {0.0, 1.0}
    probe = Image(np.full((8, 8, 3), 0.49))
    assert np.all(color_quantize(probe, 2).pixels == 0.0)
    assert np.all(color_quantize(Image(np.full((8, 8, 3), 0.5)), 2).pixels == 0.0)


@given(st.integers(2, 256))
@settings(max_examples=30, deadline=None)
def test_color_quantize_on_lattice(npp):
    out = color_quantize(textured(8, npp), npp).pixels * (npp - 1)
    assert np.allclose(out, np.round(out), atol=1e-9)


def test_filters(tex):
    assert filter_defend(tex, "median_blur", 1) == tex
    assert np.allclose(filter_defend(tex, "gaussian_blur", 1).pixels, tex.pixels, atol=1e-12)
    flat = Image(np.full((16, 16, 3), 0.3))
    assert np.allclose(filter_defend(flat, "gaussian_blur", 7).pixels, 0.3, atol=1e-12)
    imp = np.full((16, 16, 3), 0.3)
    imp[8, 8, :] = 1.0
    assert np.array_equal(filter_defend(Image(imp), "median_blur", 3).pixels, np.full((16, 16, 3), 0.3))
    sharp = filter_defend(tex, "unsharp", 5)
    blurred = filter_defend(tex, "gaussian_blur", 5)
    assert np.allclose(sharp.pixels, np.clip(2 * tex.pixels - blurred.pixels, 0, 1), atol=1e-12)
    with pytest.raises(ConfigurationError):
        filter_defend(tex, "gaussian_blur", 2)


def test_random_noise():
    x = Image(np.full((512, 512, 3), 0.5))
    assert random_noise_defend(x, 0.0, 1) == x
    out = random_noise_defend(x, 0.05, 1)
    assert abs(np.std(out.pixels - 0.5) - 0.05) <= 0.05 * 0.05
    assert random_noise_defend(x, 0.05, 1) == out
    assert random_noise_defend(x, 0.05, 2) != out


def test_geometric(tex):
    assert np.max(np.abs(geometric_defend(tex, "rotate", 0.0, 5).pixels - tex.pixels)) <= 1e-6
    yy, xx = np.mgrid[0:32, 0:32]
    board = Image(np.repeat(((yy + xx) % 2).astype(float)[..., None], 3, axis=2))
    up = geometric_defend(board, "bilinear_upscale", 0.5)
    assert np.var(up.pixels) < 0.25 * np.var(board.pixels)
    assert geometric_defend(tex, "crop", 32, 0) == tex
    c1, c2 = geometric_defend(tex, "crop", 20, 1), geometric_defend(tex, "crop", 20, 2)
    assert c1.shape == tex.shape and c1 != c2


def test_external_purifier(tex):
    ident = register_external_purifier({"identifier": "ident"}, lambda a: a)
    assert ident.identifier == "ident"
    assert purify(ident, tex) == tex
    wild = register_external_purifier({"identifier": "wild"}, lambda a: 3 * a - 1)
    out = purify(wild, tex).pixels
    assert out.min() >= 0 and out.max() <= 1
    bad = register_external_purifier({"identifier": "bad"}, lambda a: a[:-1])
    with pytest.raises(AdapterError):
        purify(bad, tex)
    with pytest.raises(ConfigurationError):
        register_external_purifier({}, lambda a: a)


def test_external_purifier_subprocess(tex):
    copy = [sys.executable, "-c", "import shutil, sys; shutil.copy(sys.argv[1], sys.argv[2])"]
    spec = register_external_purifier({"identifier": "copy"}, copy)
    x8 = Image.from_uint8(tex.to_uint8())
    assert purify(spec, x8) == x8
    fail = register_external_purifier({"identifier": "f"}, [sys.executable, "-c", "import sys; sys.exit(1)"])
    with pytest.raises(AdapterError):
        purify(fail, tex)


def test_compose_rejects_non_differentiable(toy):
    with pytest.raises(CapabilityError):
        compose(toy, DefenseSpec("jpeg", 50))


def test_compose_matches_purify_then_score(toy, tex):
    for spec in (DefenseSpec("flip"), DefenseSpec("rotate", 4.0), DefenseSpec("random_noise", 0.03)):
        g = compose(toy, spec, seed=11)
        assert g.score(tex) == pytest.approx(toy.score(purify(spec, tex, seed=11)), abs=1e-9)


def test_compose_resample_varies(toy, tex):
    g = compose(toy, DefenseSpec("random_noise", 0.05), seed=1, resample=True)
    assert g.score(tex) != g.score(tex)
    fixed = compose(toy, DefenseSpec("random_noise", 0.05), seed=1)
    assert fixed.score(tex) == fixed.score(tex)


def test_purify_batch_matches_single(tex):
    arr = np.stack([tex.pixels, 1 - tex.pixels])
    for spec in (DefenseSpec("gaussian_blur", 3), DefenseSpec("median_blur", 3)):
        out = purify_batch(spec, arr)
        assert np.allclose(out[1], purify(spec, Image(arr[1])).pixels, atol=1e-12)


def _fd_param(name):
    if name == "crop":
        return 24
    if name in DEFAULT_GRIDS:
        return DEFAULT_GRIDS[name][2]
    from iqadefbench.purification import DEFAULT_PARAMS
    return DEFAULT_PARAMS.get(name)


@pytest.mark.parametrize("name", sorted(DIFFERENTIABLE))
def test_composed_gradient_matches_finite_differences(toy, name):
    # unit directions keep central steps off the kinks of clipping and soft rounding
    g = compose(toy, DefenseSpec(name, _fd_param(name)), seed=3)
    r = np.random.default_rng(0)
    h = 1e-4
    f = lambda a: g.score_batch(a[None])[0]
    for _ in range(2):
        x = Image(r.uniform(0.05, 0.95, (32, 32, 3)))
        grad = g.gradient(x).values
        for _ in range(2):
            v = r.standard_normal(x.shape)
            v /= np.linalg.norm(v)
            fd = (f(x.pixels + h * v) - f(x.pixels - h * v)) / (2 * h)
            assert abs(np.sum(grad * v) - fd) <= 1e-2 * abs(fd)
        coords = r.choice(x.pixels.size, 30, replace=False)
        fd = central_difference(f, x.pixels, coords, h=h)
        assert np.linalg.norm(grad.ravel()[coords] - fd) <= 1e-2 * np.linalg.norm(fd)
