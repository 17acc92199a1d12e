"""Attacks that push a metric's score up, plus strength calibration.

Every attack starts from the clean image and keeps the best iterate it has
seen, so ``score_after >= score_before`` and zero effort returns the input.
Attacks maximize the normalized score ``f / diam``. Where the objective is
the score alone, the raw score is ascended instead: sign steps and argmax are
identical since ``diam > 0``.
"""
from __future__ import annotations

import itertools
import json
import logging
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .core import Image, MetricModel, tensor_to_hwc
from .errors import CapabilityError, ConfigurationError, ModelInputError
from .measures import luma, psnr, sobel_magnitude, ssim, ssim_torch

log = logging.getLogger(__name__)

ATTACKS = ("ifgsm", "uap", "korhonen", "zhang", "madc", "stadv", "nes", "square", "onepixel", "patchrs")
WHITE_BOX = frozenset({"ifgsm", "uap", "korhonen", "zhang", "madc", "stadv"})
CONSTRAINTS = ("linf", "l0", "psnr", "ssim-budget")
DEFAULT_TARGETS = (0.01, 0.05, 0.15)
MASK_FLOOR = 1e-9


@dataclass(frozen=True)
class AttackSpec:
    name: str
    varied_param_value: float
    steps: int = 10
    constraint: str = "linf"
    epsilon: float = 8 / 255
    seed: int = 0
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        bad = []
        if self.name not in ATTACKS:
            bad.append("name")
        if self.constraint not in CONSTRAINTS:
            bad.append("constraint")
        if self.steps < 0:
            bad.append("steps")
        if self.constraint == "linf" and not self.epsilon > 0:
            bad.append("epsilon")
        if bad:
            raise ConfigurationError(f"invalid attack spec {self.name!r}: {bad}", fields=bad)

    @property
    def white_box(self) -> bool:
        return self.name in WHITE_BOX

    def with_value(self, value) -> "AttackSpec":
        return replace(self, varied_param_value=value)


@dataclass
class AttackResult:
    adversarial: Image
    score_before: Optional[float]
    score_after: Optional[float]
    queries: int = 0
    perturbation_norm: float = 0.0
    trajectory: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)


def linf_norm(a: Image, b: Image) -> float:
    return float(np.max(np.abs(a.pixels - b.pixels)))


def l0_pixels(a: Image, b: Image) -> int:
    """Number of pixel positions where any channel differs."""
    return int(np.count_nonzero(np.any(a.pixels != b.pixels, axis=2)))


def _forward(m: MetricModel) -> Callable:
    if not m.gradient_capable or m.forward is None:
        raise CapabilityError(f"white-box attack needs a differentiable metric, {m.identifier!r} is not")
    return m.forward


def _value_and_grad(objective, t):
    t = t.detach().requires_grad_(True)
    val = objective(t).sum()
    (g,) = torch.autograd.grad(val, t)
    return float(val.detach()), g


def _project(xa, x0, eps):
    if eps is not None:
        xa = torch.max(torch.min(xa, x0 + eps), x0 - eps)
    return xa.clamp(0.0, 1.0)


def _result(m, x, best_t, s0, s_best, queries=0, traj=None, norm=None, **extra) -> AttackResult:
    adv = x if best_t is None else Image(tensor_to_hwc(best_t))
    if norm is None:
        norm = linf_norm(adv, x)
    return AttackResult(adv, s0, s_best if best_t is not None else s0, queries, norm, traj or [], extra)


def _signed_ascent(m, x, objective, lr, steps, eps, step_dir=None):
    """Shared loop: sign-gradient steps on ``objective`` with l-inf projection.

    Returns (best tensor or None, best objective, objective trajectory).
    """
    x0 = x.to_tensor()
    xa = x0.clone()
    traj = []
    best_t, best_val = None, None
    for k in range(steps + 1):
        val, g = _value_and_grad(objective, xa)
        traj.append(val)
        if best_val is None or val > best_val:
            best_val, best_t = val, (None if k == 0 else xa.clone())
        if k == steps:
            break
        direction = g.sign() if step_dir is None else step_dir(g, xa, x0)
        xa = _project(xa + lr * direction, x0, eps)
    return best_t, best_val, traj


# ---------------------------------------------------------------------------
# white-box


def attack_ifgsm(m: MetricModel, x: Image, lr: float, steps: int, eps: float) -> AttackResult:
    f = _forward(m)
    best_t, best, traj = _signed_ascent(m, x, f, lr, steps, eps)
    return _result(m, x, best_t, traj[0], best, traj=traj)


def train_uap(m: MetricModel, xs: Sequence[Image], amplitude: float, epochs: int = 20,
              seed: int = 0, lr: Optional[float] = None) -> np.ndarray:
    """Universal perturbation raster (H, W, 3) with ``|p| <= amplitude``."""
    if len(xs) == 0:
        raise ModelInputError("UAP training needs at least one image")
    f = _forward(m)
    if amplitude == 0:
        return np.zeros(xs[0].shape)
    batch = torch.cat([x.to_tensor() for x in xs])
    lr = amplitude / 8 if lr is None else lr
    # random sign start breaks symmetry; fixed by seed
    gen = torch.Generator().manual_seed(int(seed))
    p = (torch.rand(batch.shape[1:], generator=gen, dtype=batch.dtype) * 2 - 1) * (amplitude * 0.01)
    for _ in range(epochs):
        p = p.detach().requires_grad_(True)
        val = f((batch + p).clamp(0.0, 1.0)).sum() / m.diam
        (g,) = torch.autograd.grad(val, p)
        p = (p + lr * g.sign()).clamp(-amplitude, amplitude)
    return tensor_to_hwc(p.detach().unsqueeze(0))


def apply_uap(x: Image, perturbation: np.ndarray, amplitude: float,
              m: Optional[MetricModel] = None) -> AttackResult:
    p = np.asarray(perturbation, dtype=np.float64)
    if p.shape != x.shape:
        raise ModelInputError(f"perturbation shape {p.shape} does not match image {x.shape}")
    p = np.clip(p, -amplitude, amplitude)
    adv = Image(x.pixels + p)
    s0 = m.score(x) if m is not None else None
    s1 = m.score(adv) if m is not None else None
    return AttackResult(adv, s0, s1, 0, linf_norm(adv, x))


def sobel_mask(x: Image) -> np.ndarray:
    """Per-pixel Sobel magnitude of the luma plane scaled to [0, 1]; all zero on flat images."""
    mag = sobel_magnitude(luma(x), mode="same")
    mag[mag < MASK_FLOOR] = 0.0  # round-off on flat regions
    top = mag.max()
    return mag / top if top > 0 else np.zeros_like(mag)


def attack_korhonen(m: MetricModel, x: Image, lr: float, steps: int, eps: float) -> AttackResult:
    f = _forward(m)
    mask = torch.from_numpy(sobel_mask(x)).view(1, 1, x.height, x.width)
    best_t, best, traj = _signed_ascent(m, x, f, lr, steps, eps,
                                        step_dir=lambda g, xa, x0: mask * g.sign())
    return _result(m, x, best_t, traj[0], best, traj=traj)


def attack_zhang(m: MetricModel, x: Image, lr: float, steps: int, fr_weight: float = 10.0,
                 fr_measure=ssim_torch, eps: Optional[float] = None) -> AttackResult:
    """Ascend ``f/diam - fr_weight * (1 - FR(x', x))``; FR defaults to SSIM."""
    f = _forward(m)
    diam = m.diam
    x0 = x.to_tensor()

    def objective(t):
        return f(t) / diam - fr_weight * (1.0 - fr_measure(t, x0))

    best_t, _, traj = _signed_ascent(m, x, objective, lr, steps, eps)
    adv = x if best_t is None else Image(tensor_to_hwc(best_t))
    res = AttackResult(adv, m.score(x), m.score(adv), 0, linf_norm(adv, x), traj)
    with torch.no_grad():
        res.extra["fr_value"] = float(fr_measure(adv.to_tensor(), x0))
    return res


def madc_direction(g: torch.Tensor, diff: torch.Tensor) -> torch.Tensor:
    """Component of ``g`` orthogonal to the MSE gradient (proportional to ``diff``), max-abs scaled to 1.

    At ``diff == 0`` the projection is undefined and ``g`` itself is used.
    """
    dd = float((diff * diff).sum())
    if dd > 0:
        g = g - (float((g * diff).sum()) / dd) * diff
    top = float(g.abs().max())
    return g / top if top > 0 else torch.zeros_like(g)


def attack_madc(m: MetricModel, x: Image, lr: float, steps: int, eps: Optional[float] = None) -> AttackResult:
    f = _forward(m)
    best_t, best, traj = _signed_ascent(m, x, f, lr, steps, eps,
                                        step_dir=lambda g, xa, x0: madc_direction(g, xa - x0))
    return _result(m, x, best_t, traj[0], best, traj=traj)


def warp(t: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Bilinear resampling: out[i, j] = t at (i + flow[..., 1], j + flow[..., 0]), edge-clamped."""
    n, _, h, w = t.shape
    ii, jj = torch.meshgrid(torch.arange(h, dtype=t.dtype), torch.arange(w, dtype=t.dtype), indexing="ij")
    gx = 2 * (jj + flow[..., 0]) / max(w - 1, 1) - 1
    gy = 2 * (ii + flow[..., 1]) / max(h - 1, 1) - 1
    grid = torch.stack([gx, gy], dim=-1).expand(n, h, w, 2)
    return F.grid_sample(t, grid, mode="bilinear", padding_mode="border", align_corners=True)


def flow_tv(flow: torch.Tensor) -> torch.Tensor:
    du = flow[:, 1:, :, :] - flow[:, :-1, :, :]
    dv = flow[:, :, 1:, :] - flow[:, :, :-1, :]
    return torch.sqrt((du**2).sum(-1) + 1e-12).sum() + torch.sqrt((dv**2).sum(-1) + 1e-12).sum()


def attack_stadv(m: MetricModel, x: Image, lr: float, steps: int, flow_reg: float = 1e-5,
                 eps: Optional[float] = None) -> AttackResult:
    """Spatial attack over a per-pixel displacement field (pixels) with a TV penalty."""
    f = _forward(m)
    diam = m.diam
    x0 = x.to_tensor()
    flow = torch.zeros(1, x.height, x.width, 2, dtype=x0.dtype)
    base_tv = float(flow_tv(flow))

    def image_of(fl):
        return _project(warp(x0, fl), x0, eps)

    def objective(fl):
        return f(image_of(fl)) / diam - flow_reg * (flow_tv(fl) - base_tv)

    best_flow, best_val, traj = None, None, []
    for k in range(steps + 1):
        val, g = _value_and_grad(objective, flow)
        traj.append(val)
        if best_val is None or val > best_val:
            best_val, best_flow = val, (None if k == 0 else flow.clone())
        if k == steps:
            break
        flow = flow + lr * g.sign()
    if best_flow is None:
        adv = x
        disp = 0.0
    else:
        with torch.no_grad():
            adv = Image(tensor_to_hwc(image_of(best_flow)))
        disp = float(best_flow.norm(dim=-1).max())
    return AttackResult(adv, m.score(x), m.score(adv), 0, linf_norm(adv, x), traj,
                        {"max_displacement": disp})


# ---------------------------------------------------------------------------
# black-box


def nes_gradient(m: MetricModel, x: np.ndarray, samples: int, sigma: float,
                 rng: np.random.Generator) -> np.ndarray:
    """Antithetic Gaussian estimate of the score gradient (2 * samples queries)."""
    u = rng.standard_normal((samples,) + x.shape)
    batch = np.concatenate([x + sigma * u, x - sigma * u])
    s = m.score_batch(batch)
    diff = s[:samples] - s[samples:]
    return np.tensordot(diff, u, axes=1) / (2 * sigma * samples)


def attack_nes(m: MetricModel, x: Image, lr: float, steps: int, eps: float, samples: int = 50,
               sigma_est: float = 0.001, seed: int = 0) -> AttackResult:
    """NES estimate then signed l-inf step.

    ``queries`` counts the search: one clean query plus ``2 * samples`` per step.
    The final ``score_after`` is a reporting evaluation and is not counted.
    """
    if samples < 1:
        raise ConfigurationError("NES needs samples >= 1", fields=["samples"])
    rng = np.random.default_rng(seed)
    x0 = x.pixels
    xa = x0.copy()
    s0 = m.score(x)
    queries = 1
    for _ in range(steps):
        g = nes_gradient(m, xa, samples, sigma_est, rng)
        queries += 2 * samples
        xa = np.clip(np.clip(xa + lr * np.sign(g), x0 - eps, x0 + eps), 0.0, 1.0)
    adv = Image(xa) if steps else x
    return AttackResult(adv, s0, m.score(adv) if steps else s0, queries, linf_norm(adv, x))


def square_p_selection(p_init: float, it: int, n_iters: int) -> float:
    """Square Attack's piecewise-constant schedule for the window fraction."""
    it = int(it / max(n_iters, 1) * 10000)
    for bound, div in ((10, 1), (50, 2), (200, 4), (500, 8), (1000, 16), (2000, 32), (4000, 64),
                       (6000, 128), (8000, 256)):
        if it <= bound:
            return p_init / div
    return p_init / 512


def attack_square(m: MetricModel, x: Image, eps: float, steps: int, p_init: float = 0.1,
                  seed: int = 0) -> AttackResult:
    """Random search over +-eps square windows, accepting strict score increases."""
    rng = np.random.default_rng(seed)
    x0 = x.pixels
    h, w, c = x0.shape
    delta = np.zeros_like(x0)
    cur = m.score(x)
    s0 = cur
    queries = 1
    traj, norms = [cur], [0.0]
    for it in range(steps):
        p = square_p_selection(p_init, it, steps)
        side = int(min(max(round(np.sqrt(p * h * w)), 1), min(h, w) - 1))
        r = int(rng.integers(0, h - side + 1))
        col = int(rng.integers(0, w - side + 1))
        cand = delta.copy()
        cand[r:r + side, col:col + side, :] = rng.choice([-eps, eps], size=(1, 1, c))
        adv = np.clip(x0 + cand, 0.0, 1.0)
        s = float(m.score_batch(adv[None])[0])
        queries += 1
        if s > cur:
            cur, delta = s, adv - x0
        traj.append(cur)
        norms.append(float(np.abs(delta).max()))
    adv = x if not np.any(delta) else Image(x0 + delta)
    return AttackResult(adv, s0, cur, queries, linf_norm(adv, x), traj, {"norm_trajectory": norms})


def _decode_pixels(cand: np.ndarray, h: int, w: int):
    genes = cand.reshape(-1, 5)
    rows = np.clip(np.floor(genes[:, 0]), 0, h - 1).astype(int)
    cols = np.clip(np.floor(genes[:, 1]), 0, w - 1).astype(int)
    return rows, cols, np.clip(genes[:, 2:], 0.0, 1.0)


def _paint(x0: np.ndarray, cand: np.ndarray) -> np.ndarray:
    h, w, _ = x0.shape
    out = x0.copy()
    rows, cols, colors = _decode_pixels(cand, h, w)
    out[rows, cols, :] = colors
    return out


def attack_onepixel(m: MetricModel, x: Image, pixel_count: int, pop: int = 20, iters: int = 10,
                    seed: int = 0, mutation: float = 0.5) -> AttackResult:
    """Differential evolution over (row, col, r, g, b) tuples for ``pixel_count`` pixels."""
    h, w, _ = x.shape
    if pixel_count < 1 or pixel_count > h * w:
        raise ConfigurationError(f"pixel_count must lie in [1, {h * w}], got {pixel_count}",
                                 fields=["pixel_count"])
    if pop < 4:
        raise ConfigurationError("differential evolution needs pop >= 4", fields=["pop"])
    rng = np.random.default_rng(seed)
    x0 = x.pixels
    lo = np.tile([0.0, 0.0, 0.0, 0.0, 0.0], pixel_count)
    hi = np.tile([h - 1e-9, w - 1e-9, 1.0, 1.0, 1.0], pixel_count)
    population = lo + rng.random((pop, lo.size)) * (hi - lo)
    s0 = m.score(x)
    fitness = m.score_batch(np.stack([_paint(x0, c) for c in population]))
    queries = 1 + pop
    traj = [max(s0, float(fitness.max()))]
    for _ in range(iters):
        trials = np.empty_like(population)
        for i in range(pop):
            r1, r2, r3 = rng.choice([j for j in range(pop) if j != i], size=3, replace=False)
            trials[i] = np.clip(population[r1] + mutation * (population[r2] - population[r3]), lo, hi)
        tf = m.score_batch(np.stack([_paint(x0, c) for c in trials]))
        queries += pop
        better = tf > fitness
        population[better] = trials[better]
        fitness[better] = tf[better]
        traj.append(max(s0, float(fitness.max())))
    best = int(np.argmax(fitness))
    if fitness[best] <= s0:
        return AttackResult(x, s0, s0, queries, 0, traj)
    adv = Image(_paint(x0, population[best]))
    return AttackResult(adv, s0, float(fitness[best]), queries, l0_pixels(adv, x), traj)


def attack_patch_rs(m: MetricModel, x: Image, patch_size: int, iters: int, seed: int = 0) -> AttackResult:
    """Random search over one square patch's location and content (strict-improvement acceptance)."""
    h, w, c = x.shape
    if patch_size < 1 or patch_size > min(h, w):
        raise ConfigurationError(f"patch_size {patch_size} must lie in [1, {min(h, w)}]", fields=["patch_size"])
    rng = np.random.default_rng(seed)
    x0 = x.pixels
    s = patch_size
    cur = m.score(x)
    s0 = cur
    queries = 1
    traj = [cur]
    state = None  # (row, col, content) of the accepted patch

    def render(row, col, content):
        out = x0.copy()
        out[row:row + s, col:col + s, :] = content
        return out

    def fresh_content():
        content = np.empty((s, s, c))
        stripes = rng.integers(0, 2, size=(s, c)).astype(float)
        content[:] = stripes[None, :, :]
        return content

    for it in range(iters):
        if state is None:
            row, col = int(rng.integers(0, h - s + 1)), int(rng.integers(0, w - s + 1))
            content = fresh_content()
        elif it % 2 == 0:
            row, col = int(rng.integers(0, h - s + 1)), int(rng.integers(0, w - s + 1))
            content = state[2]
        else:
            row, col, content = state
            content = content.copy()
            side = max(1, int(round(s * 0.5 ** (1 + 4 * it / max(iters, 1)))))
            r, q = int(rng.integers(0, s - side + 1)), int(rng.integers(0, s - side + 1))
            content[r:r + side, q:q + side, :] = rng.integers(0, 2, size=c).astype(float)
        cand = render(row, col, content)
        val = float(m.score_batch(cand[None])[0])
        queries += 1
        if val > cur:
            cur, state = val, (row, col, content)
        traj.append(cur)
    if state is None:
        return AttackResult(x, s0, s0, queries, psnr(x, x), traj)
    adv = Image(render(*state))
    return AttackResult(adv, s0, cur, queries, psnr(adv, x), traj,
                        {"patch_origin": (state[0], state[1])})


# ---------------------------------------------------------------------------
# dispatch, presets, calibration

DEFAULT_SPECS = {
    "ifgsm": AttackSpec("ifgsm", 1 / 255, steps=10, epsilon=8 / 255),
    "uap": AttackSpec("uap", 4 / 255, steps=20, epsilon=8 / 255),
    "korhonen": AttackSpec("korhonen", 1 / 255, steps=10, epsilon=8 / 255),
    "zhang": AttackSpec("zhang", 1 / 255, steps=10, epsilon=8 / 255, params={"fr_weight": 10.0}),
    "madc": AttackSpec("madc", 1 / 255, steps=10, epsilon=8 / 255),
    "stadv": AttackSpec("stadv", 0.05, steps=10, epsilon=8 / 255, params={"flow_reg": 1e-5}),
    "nes": AttackSpec("nes", 4 / 255, steps=5, epsilon=4 / 255,
                      params={"lr": 1 / 255, "samples": 20, "sigma_est": 0.001}),
    "square": AttackSpec("square", 4 / 255, steps=100, epsilon=4 / 255, params={"p_init": 0.1}),
    "onepixel": AttackSpec("onepixel", 10, steps=10, constraint="l0", epsilon=10,
                           params={"pop": 20}),
    "patchrs": AttackSpec("patchrs", 8, steps=100, constraint="psnr", epsilon=1.0),
}


# weak / medium / strong values of the varied parameter used when no calibration has run
DEFAULT_STRENGTHS = {
    "ifgsm": (0.5 / 255, 1 / 255, 2 / 255),
    "uap": (2 / 255, 4 / 255, 8 / 255),
    "korhonen": (0.5 / 255, 1 / 255, 2 / 255),
    "zhang": (0.5 / 255, 1 / 255, 2 / 255),
    "madc": (0.5 / 255, 1 / 255, 2 / 255),
    "stadv": (0.02, 0.05, 0.1),
    "nes": (2 / 255, 4 / 255, 8 / 255),
    "square": (2 / 255, 4 / 255, 8 / 255),
    "onepixel": (5, 10, 20),
    "patchrs": (4, 8, 12),
}


def default_presets(name: str, **overrides) -> "StrengthPresets":
    base = default_spec(name, **overrides)
    weak, medium, strong = DEFAULT_STRENGTHS[name]
    return StrengthPresets(name, base.with_value(weak), base.with_value(medium), base.with_value(strong))


def default_spec(name: str, **overrides) -> AttackSpec:
    if name not in DEFAULT_SPECS:
        raise ConfigurationError(f"unknown attack {name!r}", fields=["attack"])
    return replace(DEFAULT_SPECS[name], **overrides)


def run_attack(spec: AttackSpec, m: MetricModel, x: Image,
               uap_perturbation: Optional[np.ndarray] = None) -> AttackResult:
    v, p = spec.varied_param_value, spec.params
    name = spec.name
    if name == "ifgsm":
        return attack_ifgsm(m, x, v, spec.steps, spec.epsilon)
    if name == "uap":
        if uap_perturbation is None:
            raise ConfigurationError("UAP application needs a trained perturbation", fields=["uap"])
        return apply_uap(x, uap_perturbation, v, m)
    if name == "korhonen":
        return attack_korhonen(m, x, v, spec.steps, spec.epsilon)
    if name == "zhang":
        return attack_zhang(m, x, v, spec.steps, p.get("fr_weight", 10.0), eps=spec.epsilon)
    if name == "madc":
        return attack_madc(m, x, v, spec.steps, spec.epsilon)
    if name == "stadv":
        return attack_stadv(m, x, v, spec.steps, p.get("flow_reg", 1e-5), spec.epsilon)
    if name == "nes":
        return attack_nes(m, x, p.get("lr", v / 4), spec.steps, v, p.get("samples", 20),
                          p.get("sigma_est", 0.001), spec.seed)
    if name == "square":
        return attack_square(m, x, v, spec.steps, p.get("p_init", 0.1), spec.seed)
    if name == "onepixel":
        return attack_onepixel(m, x, int(v), p.get("pop", 20), spec.steps, spec.seed)
    if name == "patchrs":
        return attack_patch_rs(m, x, int(v), spec.steps, spec.seed)
    raise AssertionError(name)


@dataclass
class StrengthPresets:
    attack: str
    weak: AttackSpec
    medium: AttackSpec
    strong: AttackSpec
    distortion: dict = field(default_factory=dict)

    def get(self, strength: str) -> AttackSpec:
        if strength not in ("weak", "medium", "strong"):
            raise ConfigurationError(f"unknown strength {strength!r}", fields=["strength"])
        return getattr(self, strength)

    def to_dict(self) -> dict:
        base = asdict(self.medium)
        base.pop("varied_param_value")
        return {
            "attack": self.attack,
            "varied_param": {s: getattr(self, s).varied_param_value for s in ("weak", "medium", "strong")},
            "fixed": base,
            "distortion": self.distortion,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StrengthPresets":
        fixed = dict(d["fixed"])
        specs = {s: AttackSpec(varied_param_value=d["varied_param"][s], **fixed)
                 for s in ("weak", "medium", "strong")}
        return cls(d["attack"], specs["weak"], specs["medium"], specs["strong"], dict(d.get("distortion", {})))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "StrengthPresets":
        return cls.from_dict(json.loads(Path(path).read_text()))


def measure_distortion(spec: AttackSpec, m: MetricModel, images: Sequence[Image], uap_epochs: int = 10) -> float:
    """Mean 1 - SSIM(adv, x) over ``images``."""
    pert = None
    if spec.name == "uap":
        pert = train_uap(m, images, spec.varied_param_value, uap_epochs, spec.seed)
    vals = [1.0 - ssim(run_attack(spec, m, x, pert).adversarial, x) for x in images]
    return float(np.mean(vals))


def calibrate_strengths(attack: str, m: MetricModel, calibration_images: Sequence[Image],
                        grid: Sequence[float], targets: Sequence[float] = DEFAULT_TARGETS,
                        base: Optional[AttackSpec] = None) -> StrengthPresets:
    """Pick weak/medium/strong grid values whose measured distortion is nearest the targets.

    Among all grid triples with strictly increasing distortion, the one with
    the smallest total distance to the targets wins.
    """
    grid = [float(g) for g in grid]
    if len(grid) < 3:
        raise ConfigurationError("calibration grid needs at least 3 values", fields=["grid"])
    if any(b < a for a, b in zip(grid, grid[1:])):
        raise ConfigurationError("calibration grid must be sorted ascending", fields=["grid"])
    base = base or default_spec(attack)
    dist = [measure_distortion(base.with_value(v), m, calibration_images) for v in grid]
    if any(b < a for a, b in zip(dist, dist[1:])):
        warnings.warn(f"{attack}: distortion is not monotone over the grid {dist}", RuntimeWarning)
    best, best_cost = None, np.inf
    for i, j, k in itertools.combinations(range(len(grid)), 3):
        if not (dist[i] < dist[j] < dist[k]):
            continue
        cost = abs(dist[i] - targets[0]) + abs(dist[j] - targets[1]) + abs(dist[k] - targets[2])
        if cost < best_cost:
            best, best_cost = (i, j, k), cost
    if best is None:
        raise ConfigurationError(f"{attack}: cannot order presets, grid distortions {dist}", fields=["grid"])
    i, j, k = best
    log.info("%s presets: %s -> %s", attack, [grid[i], grid[j], grid[k]], [dist[i], dist[j], dist[k]])
    return StrengthPresets(
        attack,
        base.with_value(grid[i]),
        base.with_value(grid[j]),
        base.with_value(grid[k]),
        {"weak": dist[i], "medium": dist[j], "strong": dist[k]},
    )
