"""Pixel corruptions with five-step severity ladders, sized for 32x32 images.

Severity parameter tables (severity 0 is the identity, for tests):

    kind            parameter                 s1     s2     s3     s4     s5
    gaussian_noise  sigma                     0.04   0.06   0.09   0.13   0.19
    shot_noise      photon rate (lower=worse) 500    250    120    60     30
    impulse_noise   salt/pepper fraction      0.01   0.02   0.04   0.06   0.09
    defocus_blur    disk radius (px)          0.8    1.2    1.7    2.3    3.0
    contrast        scale about the mean      0.75   0.60   0.45   0.30   0.20
    brightness      additive offset           0.10   0.18   0.26   0.34   0.42

Outputs are clamped to [0,1]. (image, spec) fully determines the result: all
randomness comes from a generator seeded by (spec.seed, kind, severity).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ConfigError

GAUSSIAN_SIGMA = (0.04, 0.06, 0.09, 0.13, 0.19)
SHOT_RATE = (500.0, 250.0, 120.0, 60.0, 30.0)
IMPULSE_FRACTION = (0.01, 0.02, 0.04, 0.06, 0.09)
DEFOCUS_RADIUS = (0.8, 1.2, 1.7, 2.3, 3.0)
CONTRAST_SCALE = (0.75, 0.60, 0.45, 0.30, 0.20)
BRIGHTNESS_OFFSET = (0.10, 0.18, 0.26, 0.34, 0.42)

KINDS = ("gaussian_noise", "shot_noise", "impulse_noise",
         "defocus_blur", "contrast", "brightness")
_KIND_CODES = {kind: i + 1 for i, kind in enumerate(KINDS)}


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    severity: int
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown corruption kind {self.kind!r}; choose from {KINDS}")
        if not 0 <= self.severity <= 5:
            raise ConfigError(f"severity must be in 0..5, got {self.severity}")

    @property
    def domain_label(self) -> str:
        return f"{self.kind}-s{self.severity}"


def _rng(spec: CorruptionSpec) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence([spec.seed, _KIND_CODES[spec.kind], spec.severity])
    )


def _disk_kernel(radius: float) -> np.ndarray:
    size = int(np.ceil(radius)) * 2 + 1
    yy, xx = np.mgrid[0:size, 0:size] - size // 2
    dist = np.sqrt(yy * yy + xx * xx)
    kernel = np.clip(radius + 0.5 - dist, 0.0, 1.0)  # antialiased disk edge
    return (kernel / kernel.sum()).astype(np.float32)


def corrupt(image: np.ndarray, spec: CorruptionSpec) -> np.ndarray:
    """Corrupt one [3,S,S] image in [0,1]; returns a new array in [0,1]."""
    img = np.asarray(image, dtype=np.float32)
    if spec.severity == 0:
        return img.copy()
    level = spec.severity - 1
    if spec.kind == "gaussian_noise":
        out = img + _rng(spec).normal(0.0, GAUSSIAN_SIGMA[level], size=img.shape)
    elif spec.kind == "shot_noise":
        rate = SHOT_RATE[level]
        out = _rng(spec).poisson(img * rate) / rate
    elif spec.kind == "impulse_noise":
        rng = _rng(spec)
        frac = IMPULSE_FRACTION[level]
        rolls = rng.random(img.shape)
        out = img.copy()
        out[rolls < frac / 2] = 0.0
        out[rolls > 1.0 - frac / 2] = 1.0
    elif spec.kind == "defocus_blur":
        kernel = _disk_kernel(DEFOCUS_RADIUS[level])
        out = np.stack([
            ndimage.convolve(channel, kernel, mode="reflect") for channel in img
        ])
    elif spec.kind == "contrast":
        means = img.mean(axis=(1, 2), keepdims=True)
        out = (img - means) * CONTRAST_SCALE[level] + means
    elif spec.kind == "brightness":
        out = img + BRIGHTNESS_OFFSET[level]
    else:  # unreachable thanks to the spec validator
        raise ConfigError(f"unknown corruption kind {spec.kind!r}")
    return np.clip(out, 0.0, 1.0).astype(np.float32)
