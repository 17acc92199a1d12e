"""Smoothing-based certified defenses.

Classification smoothing bins the metric's score range into quality classes
and certifies an l2 radius from a Clopper-Pearson bound on the majority class
(RS; with a denoiser in front, DRS/DDRS/DensePure). Median smoothing reports
the median of noisy scores and certifies an interval for it (MS/DMS).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy.stats import beta, binom, norm

from .core import Image, MetricModel
from .errors import ConfigurationError, InsufficientSamplesError
from .purification import DefenseSpec, purify_batch

DEFAULT_ALPHA = 0.001


@dataclass(frozen=True)
class SmoothingConfig:
    sigma: float
    n0: int = 100
    n: int = 1000
    alpha: float = DEFAULT_ALPHA
    epsilon_cert: float = 0.0
    denoiser: Optional[DefenseSpec] = None
    seed: int = 0
    batch_size: int = 250

    def __post_init__(self):
        bad = []
        if not self.sigma > 0:
            bad.append("sigma")
        if not (1 <= self.n0 <= self.n):
            bad.append("n0" if self.n0 < 1 else "n")
        if not (0 < self.alpha <= 0.5):
            bad.append("alpha")
        if self.epsilon_cert < 0:
            bad.append("epsilon_cert")
        if self.batch_size < 1:
            bad.append("batch_size")
        if bad:
            raise ConfigurationError(f"invalid smoothing config: {bad}", fields=bad)


@dataclass(frozen=True)
class QualityClassBinning:
    """``segments`` equal-width classes over [low, high) plus one class below and one at/above."""

    range_low: float
    range_high: float
    segments: int = 10

    def __post_init__(self):
        if not self.range_high > self.range_low or self.segments < 1:
            raise ConfigurationError("binning needs range_high > range_low and segments >= 1",
                                     fields=["range_low", "range_high", "segments"])

    @classmethod
    def for_metric(cls, m: MetricModel, segments: int = 10) -> "QualityClassBinning":
        return cls(m.range_low, m.range_high, segments)

    @property
    def n_classes(self) -> int:
        return self.segments + 2

    @property
    def edges(self) -> np.ndarray:
        e = self.range_low + (self.range_high - self.range_low) * np.arange(self.segments + 1) / self.segments
        e[0], e[-1] = self.range_low, self.range_high
        return e

    def classify(self, scores) -> np.ndarray:
        # left-closed segments: a score on an interior edge belongs to the upper class
        return np.searchsorted(self.edges, np.asarray(scores, dtype=np.float64), side="right")

    def class_score(self, c: int) -> float:
        """Representative score of a class: segment midpoint, or the range end for the outer classes."""
        e = self.edges
        if c <= 0:
            return float(e[0])
        if c >= self.segments + 1:
            return float(e[-1])
        return float(0.5 * (e[c - 1] + e[c]))


def bin_score(s: float, b: QualityClassBinning) -> int:
    return int(b.classify([s])[0])


def lower_conf_bound(k: int, n: int, alpha: float) -> float:
    """One-sided (1 - alpha) Clopper-Pearson lower bound on a binomial proportion."""
    if not 0 <= k <= n:
        raise ValueError(f"need 0 <= k <= n, got k={k}, n={n}")
    if k == 0:
        return 0.0
    return float(beta.ppf(alpha, k, n - k + 1))


@dataclass
class CertificationResult:
    kind: str
    class_or_score: float
    certified_radius: Optional[float] = None
    certified_delta: Optional[float] = None
    certified_relative_delta: Optional[float] = None
    abstained: bool = False
    samples_used: int = 0
    sigma: float = 0.0
    alpha: float = DEFAULT_ALPHA
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def noisy_scores(m: MetricModel, x: Image, cfg: SmoothingConfig, count: int,
                 stream: np.random.SeedSequence) -> np.ndarray:
    """Scores of ``count`` Gaussian-noised copies (denoised first when configured).

    Noise for chunk ``i`` comes from ``stream.spawn`` child ``i``, so results do
    not depend on how chunks are scheduled.
    """
    out = []
    children = stream.spawn((count + cfg.batch_size - 1) // cfg.batch_size)
    done = 0
    for child in children:
        size = min(cfg.batch_size, count - done)
        rng = np.random.default_rng(child)
        batch = x.pixels[None] + cfg.sigma * rng.standard_normal((size,) + x.shape)
        if cfg.denoiser is not None:
            batch = purify_batch(cfg.denoiser, batch)
        out.append(m.score_batch(batch))
        done += size
    return np.concatenate(out) if out else np.empty(0)


def _streams(cfg: SmoothingConfig):
    return np.random.SeedSequence(cfg.seed).spawn(2)


def smooth_classify_certify(m: MetricModel, x: Image, b: QualityClassBinning,
                            cfg: SmoothingConfig) -> CertificationResult:
    select_stream, estimate_stream = _streams(cfg)
    counts0 = np.bincount(b.classify(noisy_scores(m, x, cfg, cfg.n0, select_stream)), minlength=b.n_classes)
    top = int(np.argmax(counts0))  # ties resolve to the lower class index
    tie = int(np.sum(counts0 == counts0[top])) > 1
    counts = np.bincount(b.classify(noisy_scores(m, x, cfg, cfg.n, estimate_stream)), minlength=b.n_classes)
    k = int(counts[top])
    p_lower = lower_conf_bound(k, cfg.n, cfg.alpha)
    meta = {"count": k, "p_lower": p_lower, "selection_tie": tie, "counts": counts.tolist()}
    if p_lower <= 0.5:
        return CertificationResult("classification", top, None, None, None, True,
                                   cfg.n0 + cfg.n, cfg.sigma, cfg.alpha, meta)
    radius = float(cfg.sigma * norm.ppf(p_lower))
    return CertificationResult("classification", top, radius, None, None, False,
                               cfg.n0 + cfg.n, cfg.sigma, cfg.alpha, meta)


def median_smooth(m: MetricModel, x: Image, cfg: SmoothingConfig) -> float:
    _, stream = _streams(cfg)
    return float(np.median(noisy_scores(m, x, cfg, cfg.n, stream)))


def order_statistic_indices(n: int, p_low: float, p_high: float, alpha: float):
    """1-based (k_lower, k_upper) with P(s_(k_lower) <= Q(p_low)) >= 1 - alpha and
    P(s_(k_upper) >= Q(p_high)) >= 1 - alpha; ``None`` entries when ``n`` is too small."""
    ks = np.arange(1, n + 1)
    lower_ok = binom.sf(ks - 1, n, p_low) >= 1 - alpha
    upper_ok = binom.cdf(ks - 1, n, p_high) >= 1 - alpha
    k_lower = int(ks[lower_ok].max()) if lower_ok.any() else None
    k_upper = int(ks[upper_ok].min()) if upper_ok.any() else None
    return k_lower, k_upper


def minimum_samples(p_low: float, p_high: float, alpha: float, limit: int = 1 << 20) -> int:
    def ok(n):
        kl, ku = order_statistic_indices(n, p_low, p_high, alpha)
        return kl is not None and ku is not None

    hi = 1
    while not ok(hi):
        hi *= 2
        if hi > limit:
            return limit
    lo = hi // 2
    while lo + 1 < hi:
        mid = (lo + hi) // 2
        if ok(mid):
            hi = mid
        else:
            lo = mid
    return hi


def certify_median_delta(m: MetricModel, x: Image, cfg: SmoothingConfig) -> CertificationResult:
    """Median smoothing with a certified score interval over the l2 ball of radius ``epsilon_cert``.

    The smoothed median at any x + d, ||d|| <= eps, lies between the
    Phi(-eps/sigma) and Phi(eps/sigma) quantiles of the noisy scores at x;
    order statistics bound those quantiles with confidence 1 - alpha each.
    """
    p_low = float(norm.cdf(-cfg.epsilon_cert / cfg.sigma))
    p_high = float(norm.cdf(cfg.epsilon_cert / cfg.sigma))
    k_lower, k_upper = order_statistic_indices(cfg.n, p_low, p_high, cfg.alpha)
    if k_lower is None or k_upper is None:
        need = minimum_samples(p_low, p_high, cfg.alpha)
        raise InsufficientSamplesError(
            f"n={cfg.n} is too small for the order-statistic bounds; need n >= {need}", need)
    _, stream = _streams(cfg)
    s = np.sort(noisy_scores(m, x, cfg, cfg.n, stream))
    lo, hi = float(s[k_lower - 1]), float(s[k_upper - 1])
    delta = hi - lo
    return CertificationResult(
        "regression", float(np.median(s)), None, delta, delta / m.diam, False, cfg.n, cfg.sigma, cfg.alpha,
        {"lower": lo, "upper": hi, "k_lower": k_lower, "k_upper": k_upper,
         "p_low": p_low, "p_high": p_high, "epsilon_cert": cfg.epsilon_cert},
    )
