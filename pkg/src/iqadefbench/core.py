"""Images, metric models and the external-metric adapter.

Pixels live in [0, 1] as float64 ``(H, W, 3)`` arrays. Differentiable metrics
carry a torch ``forward`` over NCHW batches; gradients come from autograd.
"""
from __future__ import annotations

import copy
import json
import subprocess
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from PIL import Image as PILImage

from .errors import AdapterError, CapabilityError, ConfigurationError, ModelInputError

MIN_SIDE = 8
RANGE_SAMPLES = 1000
RANGE_PAD = 0.10


@dataclass(frozen=True, eq=False)
class Image:
    """RGB raster with values clamped to [0, 1] on construction."""

    pixels: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.pixels, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ModelInputError(f"expected (H, W, 3) pixels, got shape {arr.shape}")
        if arr.shape[0] < MIN_SIDE or arr.shape[1] < MIN_SIDE:
            raise ModelInputError(f"image must be at least {MIN_SIDE}x{MIN_SIDE}, got {arr.shape[:2]}")
        if not np.all(np.isfinite(arr)):
            raise ModelInputError("image contains non-finite values")
        arr = np.clip(arr, 0.0, 1.0)
        arr.setflags(write=False)
        object.__setattr__(self, "pixels", arr)

    @property
    def shape(self):
        return self.pixels.shape

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def to_tensor(self) -> torch.Tensor:
        return hwc_to_tensor(self.pixels)

    @classmethod
    def from_tensor(cls, t: torch.Tensor) -> "Image":
        return cls(tensor_to_hwc(t))

    def to_uint8(self) -> np.ndarray:
        return np.round(self.pixels * 255.0).astype(np.uint8)

    @classmethod
    def from_uint8(cls, arr: np.ndarray) -> "Image":
        return cls(np.asarray(arr, dtype=np.float64) / 255.0)

    def __eq__(self, other):
        if not isinstance(other, Image):
            return NotImplemented
        return self.shape == other.shape and bool(np.array_equal(self.pixels, other.pixels))

    __hash__ = None


def hwc_to_tensor(arr: np.ndarray) -> torch.Tensor:
    """(H, W, 3) or (N, H, W, 3) array -> float64 NCHW tensor."""
    t = torch.from_numpy(np.array(arr, dtype=np.float64))
    if t.ndim == 3:
        t = t.unsqueeze(0)
    return t.permute(0, 3, 1, 2).contiguous()


def tensor_to_hwc(t: torch.Tensor) -> np.ndarray:
    t = t.detach()
    if t.ndim == 4:
        if t.shape[0] != 1:
            raise ModelInputError("expected a single-image batch")
        t = t[0]
    return t.permute(1, 2, 0).cpu().numpy().astype(np.float64)


def save_png(image: Image, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(image.to_uint8(), mode="RGB").save(path, format="PNG")
    return path


def load_png(path) -> Image:
    with PILImage.open(path) as im:
        return Image.from_uint8(np.asarray(im.convert("RGB")))


@dataclass(frozen=True)
class GradientField:
    """Score gradient with respect to the pixels, same (H, W, 3) layout as the image."""

    values: np.ndarray

    @property
    def shape(self):
        return self.values.shape


@dataclass(eq=False)
class MetricModel:
    """A no-reference quality scorer with a declared value range.

    Exactly one of ``forward`` (differentiable, NCHW batch -> (N,) scores) or
    ``score_fn`` ((N, H, W, 3) array -> (N,) scores) must be supplied.
    """

    identifier: str
    range_low: float
    range_high: float
    forward: Optional[Callable[[torch.Tensor], torch.Tensor]] = None
    score_fn: Optional[Callable[[np.ndarray], np.ndarray]] = None
    gradient_fn: Optional[Callable[[np.ndarray], np.ndarray]] = None
    module: Optional[nn.Module] = None
    range_estimated: bool = False
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.range_high > self.range_low:
            raise ConfigurationError(
                f"metric {self.identifier!r}: range_high must exceed range_low",
                fields=["range_low", "range_high"],
            )
        if (self.forward is None) == (self.score_fn is None):
            raise ConfigurationError("supply exactly one of forward or score_fn", fields=["forward", "score_fn"])

    @property
    def diam(self) -> float:
        return float(self.range_high - self.range_low)

    @property
    def gradient_capable(self) -> bool:
        return self.forward is not None or self.gradient_fn is not None

    @property
    def trainable(self) -> bool:
        return self.module is not None

    def score_batch(self, arr: np.ndarray) -> np.ndarray:
        """Score raw (N, H, W, 3) arrays. No clamping: smoothing noise may leave [0, 1]."""
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim != 4 or arr.shape[-1] != 3:
            raise ModelInputError(f"expected (N, H, W, 3) batch, got {arr.shape}")
        if self.forward is not None:
            with torch.no_grad():
                out = self.forward(hwc_to_tensor(arr))
            out = out.reshape(-1).cpu().numpy().astype(np.float64)
        else:
            out = np.asarray(self.score_fn(arr), dtype=np.float64).reshape(-1)
        if out.shape[0] != arr.shape[0]:
            raise ModelInputError(f"model returned {out.shape[0]} scores for {arr.shape[0]} images")
        if not np.all(np.isfinite(out)):
            raise ModelInputError(f"metric {self.identifier!r} produced a non-finite score")
        return out

    def score(self, x: Image) -> float:
        return float(self.score_batch(x.pixels[None])[0])

    def normalized_score(self, x: Image) -> float:
        return self.score(x) / self.diam

    def gradient(self, x: Image) -> GradientField:
        if self.forward is not None:
            t = x.to_tensor().requires_grad_(True)
            out = self.forward(t).sum()
            (g,) = torch.autograd.grad(out, t)
            return GradientField(tensor_to_hwc(g))
        if self.gradient_fn is not None:
            g = np.asarray(self.gradient_fn(x.pixels), dtype=np.float64)
            if g.shape != x.shape:
                raise AdapterError(f"gradient shape {g.shape} does not match image {x.shape}")
            return GradientField(g)
        raise CapabilityError(f"metric {self.identifier!r} does not expose gradients")

    def require_forward(self) -> Callable[[torch.Tensor], torch.Tensor]:
        if self.forward is None:
            raise CapabilityError(f"metric {self.identifier!r} is not differentiable")
        return self.forward


def score(m: MetricModel, x: Image) -> float:
    return m.score(x)


def normalized_score(m: MetricModel, x: Image) -> float:
    return m.normalized_score(x)


def gradient(m: MetricModel, x: Image) -> GradientField:
    return m.gradient(x)


# ---------------------------------------------------------------------------
# Built-in metrics


class ToyIQA(nn.Module):
    """Three strided conv layers, global average pool and a linear head (~9.7k weights)."""

    def __init__(self, seed: int):
        super().__init__()
        self.conv1 = nn.Conv2d(3, 16, 3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(16, 32, 3, stride=2, padding=1)
        self.conv3 = nn.Conv2d(32, 16, 3, stride=1, padding=1)
        self.head = nn.Linear(16, 1)
        gen = torch.Generator().manual_seed(int(seed))
        with torch.no_grad():
            for p in self.parameters():
                fan_in = p[0].numel() if p.ndim > 1 else 4
                p.copy_(torch.randn(p.shape, generator=gen) * (1.5 / np.sqrt(fan_in)))
        self.double()

    def forward(self, x):
        h = (x - 0.5) * 4.0
        h = F.softplus(self.conv1(h))
        h = F.softplus(self.conv2(h))
        h = torch.tanh(self.conv3(h))
        h = h.mean(dim=(2, 3))
        return 50.0 + 20.0 * self.head(h).squeeze(-1)


def random_images(n: int, size: int = 32, seed: int = 0) -> np.ndarray:
    """Mixed batch of noise, smooth fields and flat colours, shape (n, size, size, 3)."""
    rng = np.random.default_rng(seed)
    out = np.empty((n, size, size, 3))
    for i in range(n):
        kind = i % 4
        if kind == 0:
            img = rng.random((size, size, 3))
        elif kind == 1:
            coarse = torch.as_tensor(rng.random((1, 3, 4, 4)))
            img = F.interpolate(coarse, size=(size, size), mode="bilinear", align_corners=False)[0]
            img = img.permute(1, 2, 0).numpy()
        elif kind == 2:
            img = np.broadcast_to(rng.random(3), (size, size, 3)).copy()
        else:
            base = rng.random(3)
            img = base + rng.uniform(0.0, 0.5) * (rng.random((size, size, 3)) - 0.5)
        out[i] = np.clip(img, 0.0, 1.0)
    return out


def estimate_range(forward, n: int = RANGE_SAMPLES, size: int = 32, seed: int = 0):
    """Sampled (low, high) score range padded by 10% of the spread on each side."""
    batch = hwc_to_tensor(random_images(n, size, seed))
    with torch.no_grad():
        s = forward(batch).reshape(-1).numpy()
    lo, hi = float(s.min()), float(s.max())
    pad = RANGE_PAD * max(hi - lo, 1e-12)
    return lo - pad, hi + pad


def build_toy_metric(seed: int) -> MetricModel:
    net = ToyIQA(seed).eval()
    for p in net.parameters():
        p.requires_grad_(False)
    lo, hi = estimate_range(net, seed=seed + 1)
    return MetricModel(
        identifier=f"toy-{seed}",
        range_low=lo,
        range_high=hi,
        forward=net,
        module=net,
        range_estimated=True,
        metadata={"kind": "toy", "seed": int(seed)},
    )


def clone_metric(m: MetricModel, identifier: Optional[str] = None) -> MetricModel:
    """Deep copy of a trainable metric; the copy owns its own weights."""
    if m.module is None:
        raise CapabilityError(f"metric {m.identifier!r} has no trainable module")
    net = copy.deepcopy(m.module)
    return MetricModel(
        identifier=identifier or m.identifier,
        range_low=m.range_low,
        range_high=m.range_high,
        forward=net,
        module=net,
        range_estimated=m.range_estimated,
        metadata=dict(m.metadata),
    )


def linear_metric(weights: np.ndarray, range_low: float = -1.0, range_high: float = 1.0,
                  identifier: str = "linear") -> MetricModel:
    """f(x) = <w, x> for a fixed (H, W, 3) weight raster."""
    w = hwc_to_tensor(np.asarray(weights, dtype=np.float64))

    def forward(t):
        return (t * w).sum(dim=(1, 2, 3))

    return MetricModel(identifier, range_low, range_high, forward=forward,
                       metadata={"kind": "linear"})


def constant_metric(c: float, range_low: float = 0.0, range_high: float = 100.0,
                    identifier: str = "constant") -> MetricModel:
    def forward(t):
        return torch.full((t.shape[0],), float(c), dtype=t.dtype) + 0.0 * t.sum(dim=(1, 2, 3))

    return MetricModel(identifier, range_low, range_high, forward=forward,
                       metadata={"kind": "constant", "value": float(c)})


def mean_metric(range_low: float = 0.0, range_high: float = 1.0, identifier: str = "mean") -> MetricModel:
    def forward(t):
        return t.mean(dim=(1, 2, 3))

    return MetricModel(identifier, range_low, range_high, forward=forward, metadata={"kind": "mean"})


def pixel_threshold_metric(row: int, col: int, channel: int, threshold: float,
                           below: float, above: float, range_low: float = 0.0,
                           range_high: float = 1.0, identifier: str = "threshold") -> MetricModel:
    """Step function of a single pixel: ``below`` if x[row, col, channel] < threshold else ``above``."""

    def score_fn(arr):
        v = arr[:, row, col, channel]
        return np.where(v < threshold, below, above)

    return MetricModel(identifier, range_low, range_high, score_fn=score_fn,
                       metadata={"kind": "threshold"})


# ---------------------------------------------------------------------------
# External adapter


def _load_descriptor(descriptor) -> dict:
    if isinstance(descriptor, (str, Path)):
        descriptor = json.loads(Path(descriptor).read_text())
    if not isinstance(descriptor, dict):
        raise ConfigurationError("descriptor must be a mapping or a JSON file path", fields=["descriptor"])
    return descriptor


def _run_endpoint(command: Sequence[str], args: Sequence[str], timeout: float) -> str:
    try:
        proc = subprocess.run(list(command) + list(args), capture_output=True, text=True, timeout=timeout)
    except (OSError, subprocess.TimeoutExpired) as exc:
        raise AdapterError(f"endpoint {command[0]!r} could not run: {exc}", diagnostics=str(exc)) from exc
    if proc.returncode != 0:
        raise AdapterError(f"endpoint exited with status {proc.returncode}",
                           diagnostics=proc.stderr.strip())
    return proc.stdout


def parse_scores(text: str, expected: int, diagnostics: str = "") -> np.ndarray:
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if len(lines) != expected:
        raise AdapterError(f"endpoint emitted {len(lines)} scores for {expected} images",
                           diagnostics=diagnostics or text[:500])
    try:
        vals = np.array([float(ln) for ln in lines])
    except ValueError as exc:
        raise AdapterError(f"endpoint emitted non-numeric output: {exc}", diagnostics=text[:500]) from exc
    if not np.all(np.isfinite(vals)):
        raise AdapterError("endpoint emitted non-finite score", diagnostics=text[:500])
    return vals


def register_external_metric(descriptor, endpoint: Sequence[str],
                             gradient_endpoint: Optional[Sequence[str]] = None,
                             timeout: float = 300.0) -> MetricModel:
    """Wrap a command-line scorer.

    ``endpoint`` is an argv prefix; image paths (lossless 8-bit PNG) are appended
    and the command must print one decimal score per line, in order. The optional
    ``gradient_endpoint`` receives ``image.png out.npy`` and writes an (H, W, 3)
    float array.
    """
    desc = _load_descriptor(descriptor)
    missing = [k for k in ("identifier", "range_low", "range_high") if k not in desc]
    if missing:
        raise ConfigurationError(f"metric descriptor missing {missing}", fields=missing)
    wants_grad = bool(desc.get("gradient_capable", False))
    if wants_grad and gradient_endpoint is None:
        raise ConfigurationError("descriptor declares gradient_capable but no gradient endpoint was given",
                                 fields=["gradient_capable"])
    command = list(endpoint)

    def score_fn(arr):
        with tempfile.TemporaryDirectory() as tmp:
            paths = []
            for i, a in enumerate(arr):
                p = Path(tmp) / f"img_{i:05d}.png"
                save_png(Image(a), p)
                paths.append(str(p))
            out = _run_endpoint(command, paths, timeout)
        return parse_scores(out, len(paths))

    gradient_fn = None
    if wants_grad:
        gcommand = list(gradient_endpoint)

        def gradient_fn(pixels):
            with tempfile.TemporaryDirectory() as tmp:
                src = Path(tmp) / "img.png"
                dst = Path(tmp) / "grad.npy"
                save_png(Image(pixels), src)
                _run_endpoint(gcommand, [str(src), str(dst)], timeout)
                if not dst.exists():
                    raise AdapterError("gradient endpoint wrote no output")
                return np.load(dst)

    return MetricModel(
        identifier=str(desc["identifier"]),
        range_low=float(desc["range_low"]),
        range_high=float(desc["range_high"]),
        score_fn=score_fn,
        gradient_fn=gradient_fn,
        metadata={"kind": "external", "endpoint": command},
    )


def metric_from_id(metric_id: str) -> MetricModel:
    """Resolve built-in identifiers: ``toy-<seed>``, ``mean``, ``constant-<value>``."""
    try:
        if metric_id.startswith("toy-"):
            return build_toy_metric(int(metric_id.split("-", 1)[1]))
        if metric_id.startswith("constant-"):
            return constant_metric(float(metric_id.split("-", 1)[1]), identifier=metric_id)
    except ValueError:
        pass
    if metric_id == "mean":
        return mean_metric()
    raise ConfigurationError(f"unknown built-in metric {metric_id!r}", fields=["metrics"])
