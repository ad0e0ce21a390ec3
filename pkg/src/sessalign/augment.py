"""Training-time augmentations for (T, c) feature matrices.

Temporal stretch resamples a trial along time by a factor r >= 1 with linear
interpolation; labels are never touched.  The remaining transforms are the
usual noise, offset, smoothing and masking perturbations.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

# order in which train-time transforms are applied; echoed into run metadata
PIPELINE_ORDER = ("tsa", "white_noise", "baseline_shift", "random_cut", "gaussian_smooth", "time_mask")


@dataclass
class AugmentPolicy:
    tsa: bool = True
    stretch_range: tuple = (1.5, 5.0)
    white_noise: bool = True
    white_noise_sd: float = 0.2
    baseline: bool = True
    baseline_shift: float = 0.05
    random_cut: int = 0
    smooth: bool = True
    gaussian_smooth_width: float = 2.0
    masks: bool = True
    max_mask_pct: float = 0.075
    num_masks: int = 20

    def validate(self):
        r_min, r_max = self.stretch_range
        if r_min < 1.0:
            raise ValueError("stretch_range minimum must be >= 1 so CTC stays feasible")
        if r_min > r_max:
            raise ValueError("stretch_range must satisfy r_min <= r_max")
        if self.white_noise_sd < 0 or self.baseline_shift < 0:
            raise ValueError("noise standard deviations must be >= 0")
        if not 0.0 <= self.max_mask_pct < 1.0:
            raise ValueError("max_mask_pct must lie in [0, 1)")
        if self.smooth and self.gaussian_smooth_width < 1e-3:
            raise ValueError("gaussian_smooth_width must be >= 1e-3")
        return self


def tsa_stretch(features: np.ndarray, r: float) -> np.ndarray:
    """Resample to floor(r*T) rows; output row j sits at input position j*(T-1)/(T'-1)."""
    x = np.asarray(features, dtype=np.float64)
    T = x.shape[0]
    if T < 2:
        raise ValueError(f"tsa_stretch needs at least 2 frames, got {T}")
    if r < 1.0:
        raise ValueError(f"stretch factor must be >= 1, got {r}")
    Tn = int(math.floor(r * T))
    j = np.arange(Tn, dtype=np.float64)
    pos = j * (T - 1) / (Tn - 1)
    i0 = np.minimum(np.floor(pos).astype(np.int64), T - 2)
    w = (pos - i0)[:, None]
    return (1.0 - w) * x[i0] + w * x[i0 + 1]


def sample_stretch(policy: AugmentPolicy, rng: np.random.Generator) -> float:
    lo, hi = policy.stretch_range
    return float(rng.uniform(lo, hi))


def expand_with_tsa(trial, policy: AugmentPolicy, rng: np.random.Generator) -> list:
    """``[trial]``, or ``[trial, stretched copy]`` when TSA is enabled."""
    if not policy.tsa:
        return [trial]
    r = sample_stretch(policy, rng)
    return [trial, dataclasses.replace(trial, features=tsa_stretch(trial.features, r))]


def add_white_noise(features, sd: float, rng: np.random.Generator) -> np.ndarray:
    if sd < 0:
        raise ValueError("sd must be >= 0")
    if sd == 0:
        return features
    return features + rng.normal(0.0, sd, size=features.shape)


def add_baseline_shift(features, sd: float, rng: np.random.Generator) -> np.ndarray:
    """One constant offset per channel, shared by every frame."""
    if sd < 0:
        raise ValueError("sd must be >= 0")
    if sd == 0:
        return features
    return features + rng.normal(0.0, sd, size=(1, features.shape[1]))


def gaussian_kernel(width: float) -> np.ndarray:
    radius = int(math.ceil(3.0 * width))
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (t / width) ** 2)
    return k / k.sum()


def gaussian_smooth(features, width: float) -> np.ndarray:
    """Per-channel convolution with a +-3 sigma normalized Gaussian, reflect-padded."""
    if width < 1e-3:
        raise ValueError(f"smoothing width must be >= 1e-3, got {width}")
    x = np.asarray(features, dtype=np.float64)
    k = gaussian_kernel(width)
    radius = (k.size - 1) // 2
    padded = np.pad(x, ((radius, radius), (0, 0)), mode="reflect") if x.shape[0] > 1 \
        else np.repeat(x, 2 * radius + 1, axis=0)
    T = x.shape[0]
    out = np.zeros_like(x)
    for i, w in enumerate(k):
        out += w * padded[i:i + T]
    return out


def random_time_masks(features, max_pct: float, n_masks: int, rng: np.random.Generator) -> np.ndarray:
    """Zero ``n_masks`` contiguous spans, each at most ceil(max_pct*T) frames long."""
    if not 0.0 <= max_pct < 1.0:
        raise ValueError("max_pct must lie in [0, 1)")
    T = features.shape[0]
    max_len = int(math.ceil(max_pct * T))
    if max_len == 0 or n_masks == 0:
        return features
    out = features.copy()
    for _ in range(n_masks):
        length = int(rng.integers(0, max_len + 1))
        start = int(rng.integers(0, T - length + 1))
        out[start:start + length] = 0.0
    return out


def random_cut(features, max_cut: int, rng: np.random.Generator) -> np.ndarray:
    """Drop up to ``max_cut`` leading frames (always keeps at least one)."""
    if max_cut <= 0:
        return features
    k = min(int(rng.integers(0, max_cut + 1)), features.shape[0] - 1)
    return features[k:]


def preprocess(features, policy: AugmentPolicy) -> np.ndarray:
    """Deterministic part of the input pipeline, applied at train and test time."""
    if policy.smooth:
        return gaussian_smooth(features, policy.gaussian_smooth_width)
    return np.asarray(features, dtype=np.float64)


def train_transform(features, policy: AugmentPolicy, rng: np.random.Generator) -> np.ndarray:
    """Stochastic train-time pipeline following ``PIPELINE_ORDER`` (TSA excluded)."""
    x = np.asarray(features, dtype=np.float64)
    if policy.white_noise:
        x = add_white_noise(x, policy.white_noise_sd, rng)
    if policy.baseline:
        x = add_baseline_shift(x, policy.baseline_shift, rng)
    x = random_cut(x, policy.random_cut, rng)
    x = preprocess(x, policy)
    if policy.masks:
        x = random_time_masks(x, policy.max_mask_pct, policy.num_masks, rng)
    return x
