"""Magnitude-scaled stochastic augmentation for small grayscale images.

A RandAugment-style policy restricted to six ops that stay meaningful on
8x8 synthetic shapes. Each call picks ``ops_per_call`` ops uniformly (with
replacement) and applies them at effective magnitude ``rho * M``. Magnitudes
live on RandAugment's 0..10 scale, so ``level = rho * M / 10`` and every op
maps ``level`` linearly into its own range. All ops are the identity at
level 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidConfigError

OPS = ("horizontal-flip", "translate", "brightness", "contrast", "additive-gaussian", "cutout")
MAX_MAGNITUDE = 10.0

# Op ranges at level 1.
BRIGHTNESS_MAX = 0.5
CONTRAST_MAX = 0.9
NOISE_STD_MAX = 0.2
SHIFT_FRAC_MAX = 0.5
CUTOUT_FRAC_MAX = 0.5


@dataclass(frozen=True)
class AugmentConfig:
    magnitude: int = 3
    ops_per_call: int = 2
    enabled_ops: tuple[str, ...] = field(default=OPS)

    def __post_init__(self):
        object.__setattr__(self, "enabled_ops", tuple(self.enabled_ops))
        if self.magnitude < 1:
            raise InvalidConfigError("magnitude must be at least 1")
        if self.ops_per_call < 1:
            raise InvalidConfigError("ops_per_call must be at least 1")
        if not self.enabled_ops:
            raise InvalidConfigError("enabled_ops must be non-empty")
        unknown = set(self.enabled_ops) - set(OPS)
        if unknown:
            raise InvalidConfigError(f"unknown augmentation ops {sorted(unknown)}")

    def to_dict(self) -> dict:
        return {"magnitude": self.magnitude, "ops_per_call": self.ops_per_call,
                "enabled_ops": list(self.enabled_ops)}

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentConfig":
        return cls(**d)


def _side(x: np.ndarray) -> int:
    H = int(round(np.sqrt(x.size)))
    if H * H != x.size:
        raise InvalidConfigError(f"image of {x.size} pixels is not square")
    return H


def horizontal_flip(x: np.ndarray, level: float, rng: np.random.Generator) -> np.ndarray:
    """Mirror left-right with probability ``level``."""
    if level <= 0 or rng.random() >= level:
        return x.copy()
    H = _side(x)
    return x.reshape(H, H)[:, ::-1].ravel().copy()


def translate(x: np.ndarray, level: float, rng: np.random.Generator) -> np.ndarray:
    """Shift by ``round(level * H / 2)`` pixels along a random axis and sign; edges repeat."""
    H = _side(x)
    k = int(round(level * SHIFT_FRAC_MAX * H))
    if k == 0:
        return x.copy()
    axis = int(rng.integers(0, 2))
    k = k if rng.random() < 0.5 else -k
    img = x.reshape(H, H)
    idx = np.clip(np.arange(H) - k, 0, H - 1)
    out = img[idx, :] if axis == 0 else img[:, idx]
    return out.ravel().copy()


def brightness(x: np.ndarray, delta: float) -> np.ndarray:
    return np.clip(x + delta, 0.0, 1.0)


def contrast(x: np.ndarray, factor: float) -> np.ndarray:
    m = x.mean()
    return np.clip(m + factor * (x - m), 0.0, 1.0)


def _brightness_op(x, level, rng):
    if level <= 0:
        return x.copy()
    sign = 1.0 if rng.random() < 0.5 else -1.0
    return brightness(x, sign * level * BRIGHTNESS_MAX)


def _contrast_op(x, level, rng):
    if level <= 0:
        return x.copy()
    sign = 1.0 if rng.random() < 0.5 else -1.0
    return contrast(x, 1.0 + sign * level * CONTRAST_MAX)


def _gaussian_op(x, level, rng):
    if level <= 0:
        return x.copy()
    return np.clip(x + level * NOISE_STD_MAX * rng.standard_normal(x.shape), 0.0, 1.0)


def _cutout_op(x, level, rng):
    H = _side(x)
    s = int(round(level * CUTOUT_FRAC_MAX * H))
    if s == 0:
        return x.copy()
    r0, c0 = rng.integers(0, H - s + 1, size=2)
    img = x.reshape(H, H).copy()
    img[r0:r0 + s, c0:c0 + s] = 0.0
    return img.ravel()


_DISPATCH = {
    "horizontal-flip": horizontal_flip,
    "translate": translate,
    "brightness": _brightness_op,
    "contrast": _contrast_op,
    "additive-gaussian": _gaussian_op,
    "cutout": _cutout_op,
}


def apply_op(name: str, x: np.ndarray, level: float, rng: np.random.Generator) -> np.ndarray:
    """Apply a single named op at ``level`` in [0, 1]."""
    if name not in _DISPATCH:
        raise InvalidConfigError(f"unknown augmentation op {name!r}")
    return _DISPATCH[name](np.asarray(x, dtype=np.float64), float(level), rng)


def augment(x: np.ndarray, rho: float, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Augment one flattened image at strength ``rho`` in (0, 1]."""
    if not 0.0 <= rho <= 1.0:
        raise InvalidConfigError(f"strength must lie in [0, 1], got {rho}")
    level = min(rho * cfg.magnitude / MAX_MAGNITUDE, 1.0)
    out = np.asarray(x, dtype=np.float64)
    picks = rng.integers(0, len(cfg.enabled_ops), size=cfg.ops_per_call)
    for k in picks:
        out = apply_op(cfg.enabled_ops[k], out, level, rng)
    return np.clip(out, 0.0, 1.0)
