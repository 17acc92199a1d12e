"""Min-max robust training of a differentiable metric with quality-penalized labels."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .core import Image, MetricModel, clone_metric, tensor_to_hwc
from .errors import CapabilityError, ConfigurationError, ModelInputError
from .measures import ssim

APGD_MOMENTUM = 0.75
CHECKPOINT_VERSION = 1
PAPER_EPSILONS = (2 / 255, 4 / 255, 8 / 255)


@dataclass(frozen=True)
class TrainingConfig:
    epsilon: float = 2 / 255
    penalty: str = "ssim"
    inner_steps: int = 2
    epochs: int = 1
    batch_size: int = 8
    learning_rate: float = 1e-3
    loss: str = "mse"
    label_low: float = 1.0
    label_high: float = 5.0
    seed: int = 0

    def __post_init__(self):
        bad = []
        if not self.epsilon > 0:
            bad.append("epsilon")
        if self.penalty not in ("ssim", "lpips-adapter"):
            bad.append("penalty")
        if self.inner_steps < 1:
            bad.append("inner_steps")
        if self.epochs < 0:
            bad.append("epochs")
        if self.batch_size < 1:
            bad.append("batch_size")
        if self.loss not in ("mse", "l1"):
            bad.append("loss")
        if not self.label_high > self.label_low:
            bad.append("label_high")
        if bad:
            raise ConfigurationError(f"invalid training config: {bad}", fields=bad)


@dataclass
class LabeledSample:
    image: Image
    mos: float


def apgd2_attack(m: MetricModel, x: Image, epsilon: float, seed: int = 0, steps: int = 2,
                 trajectory: Optional[list] = None) -> Image:
    """Short APGD ascent on the score inside the l-inf ball.

    Uniform random start, step sizes 2*eps then eps, momentum 0.75, best
    iterate returned (the start point included).
    """
    if m.forward is None:
        raise CapabilityError(f"APGD needs a differentiable metric, {m.identifier!r} is not")
    if epsilon == 0:
        return x
    f = m.forward
    x0 = x.to_tensor()
    gen = torch.Generator().manual_seed(int(seed))

    def proj(t):
        return torch.max(torch.min(t, x0 + epsilon), x0 - epsilon).clamp(0.0, 1.0)

    def value_grad(t):
        t = t.detach().requires_grad_(True)
        v = f(t).sum()
        (g,) = torch.autograd.grad(v, t)
        return float(v.detach()), g

    cur = proj(x0 + epsilon * (2 * torch.rand(x0.shape, generator=gen, dtype=x0.dtype) - 1))
    prev = cur
    val, g = value_grad(cur)
    best_val, best = val, cur
    if trajectory is not None:
        trajectory.append((val, Image(tensor_to_hwc(cur))))
    sizes = [2 * epsilon, epsilon] + [epsilon / 2] * max(0, steps - 2)
    for k in range(steps):
        z = proj(cur + sizes[k] * g.sign())
        if k == 0:
            nxt = z
        else:
            nxt = proj(cur + APGD_MOMENTUM * (z - cur) + (1 - APGD_MOMENTUM) * (cur - prev))
        prev, cur = cur, nxt
        val, g = value_grad(cur)
        if trajectory is not None:
            trajectory.append((val, Image(tensor_to_hwc(cur))))
        if val > best_val:
            best_val, best = val, cur
    return Image(tensor_to_hwc(best))


def penalized_label(y: float, x: Image, x_adv: Image, penalty: str = "ssim",
                    label_range=(1.0, 5.0), lpips: Optional[Callable[[Image, Image], float]] = None) -> float:
    """Shrink the label in proportion to visible damage: y * SSIM or y * (1 - LPIPS), clipped."""
    if not math.isfinite(y):
        raise ValueError("label must be finite")
    if penalty == "ssim":
        factor = ssim(x, x_adv)
    elif penalty == "lpips-adapter":
        if lpips is None:
            raise CapabilityError("LPIPS penalty requested but no LPIPS adapter supplied")
        factor = 1.0 - float(lpips(x, x_adv))
    else:
        raise ConfigurationError(f"unknown penalty {penalty!r}", fields=["penalty"])
    return float(np.clip(y * factor, label_range[0], label_range[1]))


def _loss(kind, pred, target):
    if kind == "mse":
        return torch.mean((pred - target) ** 2)
    return torch.mean(torch.abs(pred - target))


def adversarial_train(m: MetricModel, dataset: Sequence[LabeledSample], cfg: TrainingConfig,
                      lpips: Optional[Callable[[Image, Image], float]] = None,
                      log: Optional[list] = None) -> MetricModel:
    """Train a copy of ``m`` on clean and APGD-perturbed samples; ``m`` is left untouched.

    Scores and labels are compared after mapping each onto [0, 1] by its own range.
    """
    if not m.trainable:
        raise CapabilityError(f"metric {m.identifier!r} is not trainable")
    if len(dataset) == 0:
        raise ModelInputError("training set is empty")
    tag = f"adv-{cfg.penalty}-{round(cfg.epsilon * 255):g}"
    model = clone_metric(m, identifier=f"{m.identifier}+{tag}")
    if cfg.epochs == 0:
        return model
    net = model.module
    params = list(net.parameters())
    for p in params:
        p.requires_grad_(True)
    opt = torch.optim.Adam(params, lr=cfg.learning_rate)
    rng = np.random.default_rng(cfg.seed)
    lab_lo, lab_hi = cfg.label_low, cfg.label_high
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(dataset))
        for start in range(0, len(order), cfg.batch_size):
            batch = [dataset[i] for i in order[start:start + cfg.batch_size]]
            for p in params:
                p.requires_grad_(False)
            advs = [apgd2_attack(model, s.image, cfg.epsilon, seed=int(rng.integers(1 << 31)),
                                 steps=cfg.inner_steps) for s in batch]
            for p in params:
                p.requires_grad_(True)
            ys = [s.mos for s in batch]
            ys_adv = [penalized_label(s.mos, s.image, a, cfg.penalty, (lab_lo, lab_hi), lpips)
                      for s, a in zip(batch, advs)]
            inputs = torch.cat([s.image.to_tensor() for s in batch] + [a.to_tensor() for a in advs])
            target = (torch.tensor(ys + ys_adv, dtype=inputs.dtype) - lab_lo) / (lab_hi - lab_lo)
            pred = (net(inputs) - model.range_low) / model.diam
            loss = _loss(cfg.loss, pred, target)
            opt.zero_grad()
            loss.backward()
            opt.step()
            if log is not None:
                log.append({"epoch": epoch, "step": step, "loss": float(loss.detach())})
            step += 1
    for p in params:
        p.requires_grad_(False)
    net.eval()
    return model


def save_checkpoint(model: MetricModel, cfg: TrainingConfig, path) -> Path:
    """Weights (torch state dict) plus a JSON echo of the config, versioned."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "version": CHECKPOINT_VERSION,
        "identifier": model.identifier,
        "range": [model.range_low, model.range_high],
        "metadata": model.metadata,
        "config": asdict(cfg),
        "state_dict": model.module.state_dict(),
    }, path)
    path.with_suffix(".json").write_text(json.dumps({"version": CHECKPOINT_VERSION, "identifier": model.identifier,
                                                     "config": asdict(cfg)}, indent=2, sort_keys=True) + "\n")
    return path


def load_checkpoint(path, base: MetricModel) -> MetricModel:
    blob = torch.load(path, weights_only=False)
    if blob.get("version") != CHECKPOINT_VERSION:
        raise ConfigurationError(f"unsupported checkpoint version {blob.get('version')}", fields=["version"])
    model = clone_metric(base, identifier=blob["identifier"])
    model.module.load_state_dict(blob["state_dict"])
    model.range_low, model.range_high = blob["range"]
    return model
