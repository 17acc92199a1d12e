import numpy as np
import pytest
import torch

from iqadefbench.attacks import (ATTACKS, AttackSpec, StrengthPresets, apply_uap, attack_ifgsm, attack_korhonen,
                                 attack_madc, attack_nes, attack_onepixel, attack_patch_rs, attack_square,
                                 attack_stadv, attack_zhang, calibrate_strengths, default_presets, default_spec,
                                 l0_pixels, linf_norm, madc_direction, nes_gradient, run_attack, sobel_mask,
                                 train_uap, warp)
from iqadefbench.core import Image, MetricModel, linear_metric
from iqadefbench.errors import CapabilityError, ConfigurationError, ModelInputError
from iqadefbench.measures import psnr, ssim

from conftest import textured


def interior(shape, seed=0):
    return Image(np.random.default_rng(seed).uniform(0.3, 0.7, shape))


def lin(shape=(16, 16, 3), seed=0):
    w = np.random.default_rng(seed + 100).standard_normal(shape)
    return linear_metric(w, -100.0, 100.0), w


def counting(m):
    calls = {"n": 0}

    def score_fn(arr):
        calls["n"] += arr.shape[0]
        return m.score_batch(arr)

    return MetricModel("counted", m.range_low, m.range_high, score_fn=score_fn), calls


def test_spec_validation():
    with pytest.raises(ConfigurationError):
        AttackSpec("nope", 1.0)
    with pytest.raises(ConfigurationError):
        AttackSpec("ifgsm", 1.0, steps=-1)
    with pytest.raises(ConfigurationError):
        AttackSpec("ifgsm", 1.0, epsilon=0.0)


def test_ifgsm_linear_closed_form():
    m, w = lin()
    x = interior(w.shape)
    eps = 8 / 255
    r = attack_ifgsm(m, x, eps, 1, eps)
    assert r.score_after - r.score_before == pytest.approx(eps * np.abs(w).sum(), rel=1e-9)
    for steps, lr in ((3, 1 / 255), (20, 1 / 255), (5, 4 / 255)):
        r = attack_ifgsm(m, x, lr, steps, eps)
        assert r.score_after - r.score_before == pytest.approx(min(steps * lr, eps) * np.abs(w).sum(), rel=1e-9)


def test_ifgsm_toy_budget_and_gain(toy, tex):
    r = attack_ifgsm(toy, tex, 1 / 255, 10, 4 / 255)
    assert linf_norm(r.adversarial, tex) <= 4 / 255 + 1e-12
    assert toy.score(r.adversarial) == pytest.approx(r.score_after, abs=1e-9)
    assert r.score_after >= r.score_before


@pytest.mark.parametrize("fn", [
    lambda m, x: attack_ifgsm(m, x, 1 / 255, 0, 4 / 255),
    lambda m, x: attack_korhonen(m, x, 1 / 255, 0, 4 / 255),
    lambda m, x: attack_zhang(m, x, 1 / 255, 0),
    lambda m, x: attack_madc(m, x, 1 / 255, 0),
    lambda m, x: attack_stadv(m, x, 0.05, 0),
    lambda m, x: attack_nes(m, x, 1 / 255, 0, 4 / 255),
    lambda m, x: attack_square(m, x, 4 / 255, 0),
    lambda m, x: attack_patch_rs(m, x, 4, 0),
    lambda m, x: apply_uap(x, np.zeros(x.shape), 0.0, m),
])
def test_zero_effort_identity(toy, tex, fn):
    assert fn(toy, tex).adversarial == tex


def test_white_box_needs_gradients(tex):
    m = MetricModel("bb", 0.0, 1.0, score_fn=lambda a: a.mean(axis=(1, 2, 3)))
    for fn in (attack_ifgsm, attack_korhonen, attack_madc):
        with pytest.raises(CapabilityError):
            fn(m, tex, 1 / 255, 1, 4 / 255)
    with pytest.raises(CapabilityError):
        attack_zhang(m, tex, 1 / 255, 1)
    with pytest.raises(CapabilityError):
        attack_stadv(m, tex, 0.05, 1)


def test_uap_linear_converges_to_sign():
    m, w = lin((12, 12, 3))
    xs = [interior(w.shape, s) for s in range(3)]
    amp = 4 / 255
    p = train_uap(m, xs, amp, epochs=20, seed=0)
    assert np.allclose(p, amp * np.sign(w), atol=1e-12)
    assert np.all(np.abs(p) <= amp)


def test_uap_zero_amplitude_and_empty(toy, tex):
    assert np.all(train_uap(toy, [tex], 0.0) == 0)
    with pytest.raises(ModelInputError):
        train_uap(toy, [], 0.1)


def test_uap_raises_held_out_scores(toy):
    train = [textured(32, s) for s in range(4)]
    held = [textured(32, s) for s in range(10, 14)]
    amp = 8 / 255
    p = train_uap(toy, train, amp, epochs=20, seed=1)
    before = np.mean([toy.score(x) for x in held])
    after = np.mean([apply_uap(x, p, amp, toy).score_after for x in held])
    assert after > before


def test_korhonen_flat_image_untouched(toy):
    flat = Image(np.full((16, 16, 3), 0.5))
    assert np.all(sobel_mask(flat) == 0)
    assert attack_korhonen(toy, flat, 1 / 255, 5, 8 / 255).adversarial == flat


def test_korhonen_energy_on_edges(toy):
    x = textured(32, 3)
    r = attack_korhonen(toy, x, 1 / 255, 10, 8 / 255)
    energy = np.sum((r.adversarial.pixels - x.pixels) ** 2, axis=2).ravel()
    mask = sobel_mask(x).ravel()
    order = np.argsort(mask)
    k = len(order) // 10
    assert energy[order[-k:]].sum() > energy[order[:k]].sum()


def test_zhang_fr_weight(toy, tex):
    tight = attack_zhang(toy, tex, 1 / 255, 10, fr_weight=1e6, eps=8 / 255)
    assert ssim(tight.adversarial, tex) >= 0.99
    free = attack_zhang(toy, tex, 1 / 255, 10, fr_weight=0.0, eps=8 / 255)
    mid = attack_zhang(toy, tex, 1 / 255, 10, fr_weight=10.0, eps=8 / 255)
    assert free.score_after >= mid.score_after
    assert free.extra["fr_value"] == pytest.approx(ssim(free.adversarial, tex), abs=1e-12)


def test_madc_direction_orthogonal():
    r = np.random.default_rng(4)
    g = torch.from_numpy(r.standard_normal((1, 3, 8, 8)))
    diff = torch.from_numpy(r.standard_normal((1, 3, 8, 8)))
    step = madc_direction(g, diff)
    inner = float((step * diff).sum())
    assert abs(inner) <= 1e-8 * float(step.norm()) * float(diff.norm())
    zero = torch.zeros_like(diff)
    assert torch.allclose(madc_direction(g, zero), g / g.abs().max())


def test_madc_budget(toy, tex):
    r = attack_madc(toy, tex, 1 / 255, 10, 4 / 255)
    assert linf_norm(r.adversarial, tex) <= 4 / 255 + 1e-12
    assert r.score_after >= r.score_before


def test_warp_uniform_flow_translates():
    t = torch.from_numpy(np.random.default_rng(0).random((1, 3, 8, 10)))
    flow = torch.zeros(1, 8, 10, 2, dtype=t.dtype)
    flow[..., 0] = 1.0
    out = warp(t, flow)
    expected = torch.cat([t[..., 1:], t[..., -1:]], dim=-1)
    assert torch.allclose(out, expected, atol=1e-12)
    assert torch.allclose(warp(t, torch.zeros_like(flow)), t, atol=1e-12)


def test_stadv_regularizer_limits_flow(toy, tex):
    r = attack_stadv(toy, tex, 0.05, 10, flow_reg=1e6)
    assert r.extra["max_displacement"] < 0.05


def test_stadv_raises_score(toy, tex):
    r = attack_stadv(toy, tex, 0.05, 10)
    assert r.score_after >= r.score_before


def test_nes_gradient_cosine():
    m, w = lin((8, 8, 3))
    x = interior(w.shape)
    g = nes_gradient(m, x.pixels, 200, 0.001, np.random.default_rng(0))
    cos = float(np.sum(g * w) / (np.linalg.norm(g) * np.linalg.norm(w)))
    assert cos >= 0.7


def test_nes_query_accounting(tex):
    m, _ = lin((32, 32, 3))
    cm, calls = counting(m)
    r = attack_nes(cm, tex, 1 / 255, 3, 4 / 255, samples=7)
    assert r.queries == 1 + 2 * 7 * 3
    assert calls["n"] == r.queries + 1  # plus the uncounted reporting score
    assert linf_norm(r.adversarial, tex) <= 4 / 255 + 1e-12
    with pytest.raises(ConfigurationError):
        attack_nes(cm, tex, 1 / 255, 1, 4 / 255, samples=0)


def test_square_monotone_and_budget(toy, tex):
    r = attack_square(toy, tex, 4 / 255, 100, seed=3)
    assert all(b >= a for a, b in zip(r.trajectory, r.trajectory[1:]))
    assert max(r.extra["norm_trajectory"]) <= 4 / 255 + 1e-12
    assert linf_norm(r.adversarial, tex) <= 4 / 255 + 1e-12
    assert toy.score(r.adversarial) == pytest.approx(r.score_after, abs=1e-9)


def test_square_query_accounting(tex):
    m, _ = lin((32, 32, 3))
    cm, calls = counting(m)
    r = attack_square(cm, tex, 4 / 255, 25, seed=0)
    assert r.queries == calls["n"] == 26


def test_onepixel_support(toy, tex):
    r = attack_onepixel(toy, tex, 5, pop=10, iters=5, seed=0)
    assert l0_pixels(r.adversarial, tex) <= 5
    assert r.score_after >= r.score_before
    r0 = attack_onepixel(toy, tex, 5, pop=10, iters=0, seed=0)
    assert r0.score_after >= r0.score_before
    with pytest.raises(ConfigurationError):
        attack_onepixel(toy, tex, 32 * 32 + 1)


def test_onepixel_full_support():
    m, w = lin((8, 8, 3))
    x = interior(w.shape)
    r = attack_onepixel(m, x, 64, pop=8, iters=3, seed=1)
    assert r.score_after >= r.score_before
    assert m.score(r.adversarial) == pytest.approx(r.score_after, abs=1e-9)


def test_patch_rs_support_and_monotone(toy, tex):
    r = attack_patch_rs(toy, tex, 6, 60, seed=2)
    assert all(b >= a for a, b in zip(r.trajectory, r.trajectory[1:]))
    rows, cols = np.nonzero(np.any(r.adversarial.pixels != tex.pixels, axis=2))
    if rows.size:
        assert rows.max() - rows.min() < 6 and cols.max() - cols.min() < 6
        r0, c0 = r.extra["patch_origin"]
        assert rows.min() >= r0 and cols.min() >= c0
    assert r.perturbation_norm == pytest.approx(psnr(r.adversarial, tex))
    with pytest.raises(ConfigurationError):
        attack_patch_rs(toy, tex, 33, 5)


@pytest.mark.parametrize("name", ATTACKS)
def test_default_specs_budget_and_determinism(toy, tex, name):
    spec = default_spec(name, steps=3 if name != "square" else 20, seed=5)
    pert = train_uap(toy, [tex], spec.varied_param_value, 3) if name == "uap" else None
    a = run_attack(spec, toy, tex, pert)
    b = run_attack(spec, toy, tex, pert)
    assert a.adversarial == b.adversarial
    assert a.adversarial.pixels.min() >= 0 and a.adversarial.pixels.max() <= 1
    if spec.constraint == "linf" and name not in ("stadv", "uap"):
        bound = spec.varied_param_value if name in ("nes", "square") else spec.epsilon
        assert linf_norm(a.adversarial, tex) <= bound + 1e-6
    if name == "uap":
        assert linf_norm(a.adversarial, tex) <= spec.varied_param_value + 1e-6
    if name == "onepixel":
        assert l0_pixels(a.adversarial, tex) <= spec.varied_param_value


def test_presets_roundtrip(tmp_path):
    p = default_presets("ifgsm")
    p.save(tmp_path / "p.json")
    q = StrengthPresets.load(tmp_path / "p.json")
    assert q == p
    assert q.weak.varied_param_value < q.medium.varied_param_value < q.strong.varied_param_value
    assert p.to_dict()["varied_param"]["medium"] == 1 / 255


@pytest.mark.filterwarnings("ignore:ifgsm. distortion is not monotone")
def test_calibration_orders_presets(toy, tex):
    grid = [v / 255 for v in (1, 2, 4, 8, 16)]
    p = calibrate_strengths("ifgsm", toy, [tex], grid, base=default_spec("ifgsm", epsilon=16 / 255))
    vals = [p.weak.varied_param_value, p.medium.varied_param_value, p.strong.varied_param_value]
    assert len(set(vals)) == 3
    assert p.distortion["weak"] < p.distortion["medium"] < p.distortion["strong"]


def test_calibration_errors(toy, tex):
    with pytest.raises(ConfigurationError):
        calibrate_strengths("ifgsm", toy, [tex], [1 / 255] * 4)
    with pytest.raises(ConfigurationError):
        calibrate_strengths("ifgsm", toy, [tex], [1 / 255, 2 / 255])
    with pytest.raises(ConfigurationError):
        calibrate_strengths("ifgsm", toy, [tex], [3 / 255, 2 / 255, 1 / 255])
