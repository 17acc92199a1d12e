"""Input-transformation defenses.

Differentiable defenses are written as torch functions over NCHW float64
batches so they can be composed with a metric for adaptive attacks. The rest
(real JPEG, colour quantization, median blur, external purifiers) run on numpy.
"""
from __future__ import annotations

import io
import math
import subprocess
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image as PILImage
from scipy.ndimage import median_filter

from .core import Image, MetricModel, hwc_to_tensor, load_png, save_png, tensor_to_hwc
from .errors import AdapterError, CapabilityError, ConfigurationError

DEFENSES = (
    "none", "jpeg", "diffjpeg", "color_quant", "resize", "bilinear_upscale", "rotate",
    "crop", "flip", "gaussian_blur", "median_blur", "unsharp", "random_noise", "external",
)
DIFFERENTIABLE = frozenset({
    "none", "diffjpeg", "resize", "bilinear_upscale", "rotate", "crop", "flip",
    "gaussian_blur", "unsharp", "random_noise",
})
STOCHASTIC = frozenset({"rotate", "crop", "random_noise"})
UNSHARP_AMOUNT = 1.0

# Five strengths per parameterized defense; flip/none/external take no parameter.
DEFAULT_GRIDS = {
    "jpeg": [90, 70, 50, 30, 10],
    "diffjpeg": [90, 70, 50, 30, 10],
    "color_quant": [128, 64, 32, 16, 8],
    "resize": [0.9, 0.75, 0.6, 0.5, 0.4],
    "bilinear_upscale": [0.9, 0.75, 0.6, 0.5, 0.4],
    "rotate": [1.0, 2.0, 4.0, 8.0, 15.0],
    "crop": [60, 56, 52, 48, 40],
    "gaussian_blur": [3, 5, 7, 9, 11],
    "median_blur": [3, 5, 7, 9, 11],
    "unsharp": [3, 5, 7, 9, 11],
    "random_noise": [0.01, 0.02, 0.03, 0.05, 0.08],
}
DEFAULT_PARAMS = {"flip": None, "none": None, "random_noise": 0.03}


@dataclass(frozen=True)
class DefenseSpec:
    name: str
    param: Optional[float] = None
    seed: int = 0
    adapter: Optional[Callable[[np.ndarray], np.ndarray]] = field(default=None, compare=False, repr=False)
    label: Optional[str] = None

    def __post_init__(self):
        if self.name not in DEFENSES:
            raise ConfigurationError(f"unknown defense {self.name!r}", fields=["name"])
        if self.name == "external" and self.adapter is None:
            raise ConfigurationError("external defense requires an adapter", fields=["adapter"])
        _validate_param(self.name, self.param)

    @property
    def differentiable(self) -> bool:
        return self.name in DIFFERENTIABLE

    @property
    def stochastic(self) -> bool:
        return self.name in STOCHASTIC

    @property
    def identifier(self) -> str:
        if self.label:
            return self.label
        return self.name if self.param is None else f"{self.name}@{_fmt(self.param)}"

    def with_seed(self, seed: int) -> "DefenseSpec":
        return DefenseSpec(self.name, self.param, int(seed), self.adapter, self.label)


def _fmt(v) -> str:
    return f"{v:g}" if isinstance(v, float) else str(v)


def _validate_param(name, p):
    def bad(msg):
        raise ConfigurationError(f"{name}: {msg}", fields=["param"])

    if name in ("jpeg", "diffjpeg"):
        if p is None or not (1 <= p <= 100) or int(p) != p:
            bad(f"quality must be an integer in [1, 100], got {p}")
    elif name == "color_quant":
        if p is None or int(p) != p or not (2 <= p <= 256):
            bad(f"npp must be an integer in [2, 256], got {p}")
    elif name in ("resize", "bilinear_upscale"):
        if p is None or p <= 0:
            bad(f"scale must be positive, got {p}")
    elif name == "rotate":
        if p is None or p < 0:
            bad(f"angle limit must be >= 0, got {p}")
    elif name == "crop":
        if p is None or int(p) != p or p < 1:
            bad(f"crop size must be a positive integer, got {p}")
    elif name in ("gaussian_blur", "median_blur", "unsharp"):
        if p is None or int(p) != p or p < 1 or int(p) % 2 == 0:
            bad(f"kernel size must be a positive odd integer, got {p}")
    elif name == "random_noise":
        if p is None or p < 0:
            bad(f"sigma must be >= 0, got {p}")


# ---------------------------------------------------------------------------
# JPEG

LUMA_QTABLE = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.float64)

CHROMA_QTABLE = np.full((8, 8), 99.0)
CHROMA_QTABLE[:4, :4] = [
    [17, 18, 24, 47],
    [18, 21, 26, 66],
    [24, 26, 56, 99],
    [47, 66, 99, 99],
]


def scaled_qtable(base: np.ndarray, quality: int) -> np.ndarray:
    """libjpeg quality scaling of a base quantization table."""
    q = int(quality)
    scale = 5000 // q if q < 50 else 200 - 2 * q
    return np.clip((base * scale + 50) // 100, 1, 255)


def _dct_matrix() -> torch.Tensor:
    d = torch.zeros(8, 8, dtype=torch.float64)
    for k in range(8):
        a = math.sqrt(1 / 8) if k == 0 else math.sqrt(2 / 8)
        for n in range(8):
            d[k, n] = a * math.cos(math.pi * (2 * n + 1) * k / 16)
    return d


_DCT = _dct_matrix()
_RGB2YCC = torch.tensor([
    [0.299, 0.587, 0.114],
    [-0.168735892, -0.331264108, 0.5],
    [0.5, -0.418687589, -0.081312411],
], dtype=torch.float64)
_YCC2RGB = torch.linalg.inv(_RGB2YCC)


def soft_round(x: torch.Tensor, passes: int = 3) -> torch.Tensor:
    """Smooth surrogate for rounding: repeated x - sin(2 pi x) / (2 pi).

    Integers are super-attracting fixed points, so a few passes land close to
    ``round`` while staying infinitely differentiable.
    """
    for _ in range(passes):
        x = x - torch.sin(2 * math.pi * x) / (2 * math.pi)
    return x


def diffjpeg_torch(t: torch.Tensor, quality: int, rounding=soft_round) -> torch.Tensor:
    n, c, h, w = t.shape
    ph, pw = (-h) % 8, (-w) % 8
    x = t * 255.0
    if ph or pw:
        x = F.pad(x, (0, pw, 0, ph), mode="replicate")
    ycc = torch.einsum("ij,njhw->nihw", _RGB2YCC.to(x.dtype), x)
    ycc = ycc + torch.tensor([0.0, 128.0, 128.0], dtype=x.dtype).view(1, 3, 1, 1) - 128.0
    H, W = ycc.shape[-2:]
    blocks = ycc.reshape(n, 3, H // 8, 8, W // 8, 8).permute(0, 1, 2, 4, 3, 5)
    d = _DCT.to(x.dtype)
    coef = d @ blocks @ d.T
    tables = torch.stack([
        torch.from_numpy(scaled_qtable(LUMA_QTABLE, quality)),
        torch.from_numpy(scaled_qtable(CHROMA_QTABLE, quality)),
        torch.from_numpy(scaled_qtable(CHROMA_QTABLE, quality)),
    ]).to(x.dtype).view(1, 3, 1, 1, 8, 8)
    coef = rounding(coef / tables) * tables
    blocks = d.T @ coef @ d
    ycc = blocks.permute(0, 1, 2, 4, 3, 5).reshape(n, 3, H, W) + 128.0
    ycc = ycc - torch.tensor([0.0, 128.0, 128.0], dtype=x.dtype).view(1, 3, 1, 1)
    rgb = torch.einsum("ij,njhw->nihw", _YCC2RGB.to(x.dtype), ycc)
    rgb = rgb[..., :h, :w] / 255.0
    return rgb.clamp(0.0, 1.0)


def jpeg_defend(x: Image, q: int) -> Image:
    """Real codec round trip (libjpeg via Pillow, 4:4:4 chroma)."""
    _validate_param("jpeg", q)
    buf = io.BytesIO()
    PILImage.fromarray(x.to_uint8(), mode="RGB").save(buf, format="JPEG", quality=int(q), subsampling=0)
    buf.seek(0)
    with PILImage.open(buf) as im:
        return Image.from_uint8(np.asarray(im.convert("RGB")))


def diffjpeg_defend(x: Image, q: int) -> Image:
    _validate_param("diffjpeg", q)
    return Image.from_tensor(diffjpeg_torch(x.to_tensor(), int(q)))


# ---------------------------------------------------------------------------
# colour quantization, filters, noise


def color_quantize(x: Image, npp: int) -> Image:
    """Per-channel uniform quantization to ``npp`` levels; ties go to the lower level."""
    _validate_param("color_quant", npp)
    k = int(npp) - 1
    return Image(np.ceil(x.pixels * k - 0.5) / k)


def _gaussian_kernel1d(k: int, dtype=torch.float64) -> torch.Tensor:
    sigma = 0.3 * ((k - 1) * 0.5 - 1) + 0.8
    ax = torch.arange(k, dtype=dtype) - (k - 1) / 2.0
    g = torch.exp(-(ax**2) / (2 * sigma**2))
    return g / g.sum()


def gaussian_blur_torch(t: torch.Tensor, k: int) -> torch.Tensor:
    k = int(k)
    if k == 1:
        return t
    c = t.shape[1]
    g = _gaussian_kernel1d(k, t.dtype)
    r = k // 2
    out = F.pad(t, (r, r, 0, 0), mode="reflect")
    out = F.conv2d(out, g.view(1, 1, 1, k).expand(c, 1, 1, k), groups=c)
    out = F.pad(out, (0, 0, r, r), mode="reflect")
    return F.conv2d(out, g.view(1, 1, k, 1).expand(c, 1, k, 1), groups=c)


def unsharp_torch(t: torch.Tensor, k: int) -> torch.Tensor:
    return (t + UNSHARP_AMOUNT * (t - gaussian_blur_torch(t, k))).clamp(0.0, 1.0)


def median_blur(x: Image, k: int) -> Image:
    _validate_param("median_blur", k)
    if int(k) == 1:
        return x
    return Image(median_filter(x.pixels, size=(int(k), int(k), 1), mode="reflect"))


def filter_defend(x: Image, kind: str, kernel_size: int) -> Image:
    if kind not in ("gaussian_blur", "median_blur", "unsharp"):
        raise ConfigurationError(f"unknown filter {kind!r}", fields=["kind"])
    return purify(DefenseSpec(kind, kernel_size), x)


def random_noise_torch(t: torch.Tensor, sigma: float, seed: int) -> torch.Tensor:
    if sigma == 0:
        return t
    gen = torch.Generator().manual_seed(int(seed))
    noise = torch.randn(t.shape, generator=gen, dtype=t.dtype)
    return (t + sigma * noise).clamp(0.0, 1.0)


def random_noise_defend(x: Image, sigma: float, seed: int) -> Image:
    return purify(DefenseSpec("random_noise", sigma, seed), x)


# ---------------------------------------------------------------------------
# geometric


def _target_size(h, w, scale):
    return max(1, int(round(h * scale))), max(1, int(round(w * scale)))


def resize_torch(t: torch.Tensor, scale: float) -> torch.Tensor:
    h, w = t.shape[-2:]
    small = F.interpolate(t, size=_target_size(h, w, scale), mode="bicubic", align_corners=False,
                          antialias=scale < 1)
    return F.interpolate(small, size=(h, w), mode="bicubic", align_corners=False,
                         antialias=scale > 1).clamp(0.0, 1.0)


def bilinear_upscale_torch(t: torch.Tensor, scale: float) -> torch.Tensor:
    h, w = t.shape[-2:]
    small = F.interpolate(t, size=_target_size(h, w, scale), mode="bilinear", align_corners=False)
    return F.interpolate(small, size=(h, w), mode="bilinear", align_corners=False)


def rotation_angle(angle_limit: float, seed: int) -> float:
    """Angle in degrees drawn uniformly from [-limit, limit]."""
    return float(np.random.default_rng(seed).uniform(-angle_limit, angle_limit))


def rotate_torch(t: torch.Tensor, angle_deg: float) -> torch.Tensor:
    n, _, h, w = t.shape
    a = math.radians(angle_deg)
    cos, sin = math.cos(a), math.sin(a)
    theta = torch.tensor([[cos, -sin * h / w, 0.0], [sin * w / h, cos, 0.0]], dtype=t.dtype)
    grid = F.affine_grid(theta.expand(n, 2, 3), list(t.shape), align_corners=False)
    return F.grid_sample(t, grid, mode="bilinear", padding_mode="reflection", align_corners=False)


def crop_window(h: int, w: int, size: int, seed: int):
    rng = np.random.default_rng(seed)
    return int(rng.integers(0, h - size + 1)), int(rng.integers(0, w - size + 1))


def crop_torch(t: torch.Tensor, size: int, seed: int) -> torch.Tensor:
    h, w = t.shape[-2:]
    size = int(size)
    if size > min(h, w):
        raise ConfigurationError(f"crop size {size} exceeds image side {min(h, w)}", fields=["param"])
    top, left = crop_window(h, w, size, seed)
    window = t[..., top:top + size, left:left + size]
    if size == h == w:
        return window
    return F.interpolate(window, size=(h, w), mode="bilinear", align_corners=False)


def flip_torch(t: torch.Tensor) -> torch.Tensor:
    return torch.flip(t, dims=[3])


def geometric_defend(x: Image, kind: str, param=None, seed: int = 0) -> Image:
    if kind not in ("resize", "bilinear_upscale", "rotate", "crop", "flip"):
        raise ConfigurationError(f"unknown geometric defense {kind!r}", fields=["kind"])
    return purify(DefenseSpec(kind, param, seed), x)


# ---------------------------------------------------------------------------
# dispatch


def torch_transform(spec: DefenseSpec, seed: Optional[int] = None) -> Callable[[torch.Tensor], torch.Tensor]:
    """Differentiable NCHW -> NCHW function for ``spec`` with randomness fixed by ``seed``."""
    if not spec.differentiable:
        raise CapabilityError(f"defense {spec.name!r} is not differentiable")
    seed = spec.seed if seed is None else int(seed)
    name, p = spec.name, spec.param
    if name == "none":
        return lambda t: t
    if name == "diffjpeg":
        return lambda t: diffjpeg_torch(t, int(p))
    if name == "resize":
        return lambda t: resize_torch(t, float(p))
    if name == "bilinear_upscale":
        return lambda t: bilinear_upscale_torch(t, float(p))
    if name == "rotate":
        angle = rotation_angle(float(p), seed)
        return lambda t: rotate_torch(t, angle)
    if name == "crop":
        return lambda t: crop_torch(t, int(p), seed)
    if name == "flip":
        return flip_torch
    if name == "gaussian_blur":
        return lambda t: gaussian_blur_torch(t, int(p))
    if name == "unsharp":
        return lambda t: unsharp_torch(t, int(p))
    if name == "random_noise":
        return lambda t: random_noise_torch(t, float(p), seed)
    raise AssertionError(name)


def purify(spec: DefenseSpec, x: Image, seed: Optional[int] = None) -> Image:
    """Apply ``spec`` to ``x``; output has the input's shape and lies in [0, 1]."""
    if spec.name == "jpeg":
        return jpeg_defend(x, int(spec.param))
    if spec.name == "color_quant":
        return color_quantize(x, int(spec.param))
    if spec.name == "median_blur":
        return median_blur(x, int(spec.param))
    if spec.name == "external":
        out = np.asarray(spec.adapter(x.pixels), dtype=np.float64)
        if out.shape != x.shape:
            raise AdapterError(f"purifier returned shape {out.shape}, expected {x.shape}")
        return Image(out)
    fn = torch_transform(spec, seed)
    with torch.no_grad():
        return Image(tensor_to_hwc(fn(x.to_tensor())))


def compose(metric: MetricModel, spec: DefenseSpec, seed: Optional[int] = None,
            resample: bool = False) -> MetricModel:
    """Metric g = f o P with gradients through the defense.

    With ``resample`` each forward call draws a fresh realization of a
    stochastic defense (expectation over transformation); otherwise the
    realization fixed by ``seed`` is reused for every query.
    """
    fwd = metric.require_forward()
    base_seed = spec.seed if seed is None else int(seed)
    if resample and spec.stochastic:
        counter = iter(range(1 << 62))

        def forward(t):
            s = int(np.random.SeedSequence([base_seed, next(counter)]).generate_state(1)[0])
            return fwd(torch_transform(spec, s)(t))
    else:
        transform = torch_transform(spec, base_seed)

        def forward(t):
            return fwd(transform(t))

    return MetricModel(
        identifier=f"{metric.identifier}|{spec.identifier}",
        range_low=metric.range_low,
        range_high=metric.range_high,
        forward=forward,
        range_estimated=metric.range_estimated,
        metadata={"kind": "composed", "defense": spec.identifier},
    )


def register_external_purifier(descriptor, endpoint, timeout: float = 300.0) -> DefenseSpec:
    """Wrap an image-to-image endpoint.

    ``endpoint`` is either a callable on (H, W, 3) arrays or an argv prefix that
    receives ``in.png out.png``; images travel as lossless 8-bit PNG.
    """
    from .core import _load_descriptor

    desc = _load_descriptor(descriptor)
    if "identifier" not in desc:
        raise ConfigurationError("purifier descriptor missing identifier", fields=["identifier"])

    if callable(endpoint):
        call = endpoint
    else:
        command = list(endpoint)

        def call(pixels):
            with tempfile.TemporaryDirectory() as tmp:
                src, dst = Path(tmp) / "in.png", Path(tmp) / "out.png"
                save_png(Image(pixels), src)
                try:
                    proc = subprocess.run(command + [str(src), str(dst)], capture_output=True,
                                          text=True, timeout=timeout)
                except (OSError, subprocess.TimeoutExpired) as exc:
                    raise AdapterError(f"purifier could not run: {exc}", diagnostics=str(exc)) from exc
                if proc.returncode != 0:
                    raise AdapterError(f"purifier exited with status {proc.returncode}",
                                       diagnostics=proc.stderr.strip())
                if not dst.exists():
                    raise AdapterError("purifier wrote no output image", diagnostics=proc.stderr.strip())
                return load_png(dst).pixels

    def adapter(pixels):
        out = np.asarray(call(pixels), dtype=np.float64)
        if out.shape != np.shape(pixels):
            raise AdapterError(f"purifier returned shape {out.shape}, expected {np.shape(pixels)}")
        return np.clip(out, 0.0, 1.0)

    return DefenseSpec("external", None, 0, adapter, label=str(desc["identifier"]))


def defense_grid(name: str, params: Optional[Sequence] = None) -> list:
    """Specs for every parameter value of ``name`` (default grid when ``params`` is None)."""
    if params is None:
        params = DEFAULT_GRIDS.get(name, [DEFAULT_PARAMS.get(name)])
    return [DefenseSpec(name, p) for p in params]


def as_batch_hwc(t: torch.Tensor) -> np.ndarray:
    return t.detach().permute(0, 2, 3, 1).cpu().numpy()


def purify_batch(spec: DefenseSpec, arr: np.ndarray, seed: Optional[int] = None) -> np.ndarray:
    """Purify an (N, H, W, 3) batch without clamping the inputs (used by smoothing denoisers)."""
    if spec.differentiable:
        with torch.no_grad():
            return as_batch_hwc(torch_transform(spec, seed)(hwc_to_tensor(arr)))
    return np.stack([purify(spec, Image(a), seed).pixels for a in arr])
