"""Loss-ratio control: per-timestep memory bank, skip and augment decisions.

A sample whose loss is much lower than the running average at its timestep is
likely memorized. Below ``lam`` times that average it is skipped (no gradient).
Up to ``R * lam`` it is augmented with a strength that decays away from the
threshold. Above that it trains normally.

Bank indices are zero based: training timestep ``t`` in ``1..T`` lives in
``losses[t - 1]``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .augment import AugmentConfig, augment
from .diffusion import (AdamConfig, DenoiserParams, NoiseSchedule, loss_and_grad,
                        optimizer_step, per_sample_loss)
from .errors import InvalidConfigError, NumericError


class Verdict(str, enum.Enum):
    SKIP = "skip"
    AUGMENT = "augment"
    KEEP = "keep"


class _NotCalibrated:
    """Ratio placeholder for a timestep whose bank entry is still zero."""

    _inst = None

    def __new__(cls):
        if cls._inst is None:
            cls._inst = super().__new__(cls)
        return cls._inst

    def __repr__(self):
        return "NOT_CALIBRATED"

    def __reduce__(self):
        return (_NotCalibrated, ())


NOT_CALIBRATED = _NotCalibrated()


@dataclass
class MemoryBank:
    losses: np.ndarray
    eta: float = 0.8

    def __post_init__(self):
        self.losses = np.asarray(self.losses, dtype=np.float64)
        if not 0.0 < self.eta <= 1.0:
            raise InvalidConfigError(f"eta must lie in (0, 1], got {self.eta}")
        if np.any(self.losses < 0) or not np.all(np.isfinite(self.losses)):
            raise InvalidConfigError("bank losses must be finite and non-negative")

    @classmethod
    def zeros(cls, T: int, eta: float = 0.8) -> "MemoryBank":
        return cls(np.zeros(T), eta)

    @property
    def T(self) -> int:
        return self.losses.shape[0]

    def update(self, t: int, raw_loss: float) -> None:
        """In-place EMA update of entry ``t``."""
        if not (math.isfinite(raw_loss) and raw_loss >= 0):
            raise NumericError(f"bank update with invalid loss {raw_loss!r}")
        if not 0 <= t < self.T:
            raise IndexError(f"bank index {t} out of range [0, {self.T})")
        self.losses[t] = self.eta * self.losses[t] + (1.0 - self.eta) * raw_loss

    def copy(self) -> "MemoryBank":
        return MemoryBank(self.losses.copy(), self.eta)

    def to_dict(self) -> dict:
        return {"eta": self.eta, "losses": [float(v) for v in self.losses]}

    @classmethod
    def from_dict(cls, d: dict) -> "MemoryBank":
        return cls(np.array(d["losses"], dtype=np.float64), float(d["eta"]))


def bank_update(bank: MemoryBank, t: int, raw_loss: float) -> MemoryBank:
    """Return a copy of ``bank`` with entry ``t`` smoothed toward ``raw_loss``."""
    out = bank.copy()
    out.update(t, raw_loss)
    return out


def loss_ratio(bank: MemoryBank, t: int, raw_loss: float):
    """``raw_loss / losses[t]``, or ``NOT_CALIBRATED`` while the entry is zero."""
    lt = bank.losses[t]
    if lt == 0.0:
        return NOT_CALIBRATED
    return raw_loss / lt


@dataclass(frozen=True)
class ControlConfig:
    lam: float = 0.5
    R: float = 1.7
    A: float = 5.0
    warmup_steps: int = 500
    eta: float = 0.8

    def __post_init__(self):
        if not self.lam > 0:
            raise InvalidConfigError("lambda must be positive")
        if not self.R > 1:
            raise InvalidConfigError("R must exceed 1")
        if not self.A > 0:
            raise InvalidConfigError("A must be positive")
        if self.warmup_steps < 0:
            raise InvalidConfigError("warmup_steps must be non-negative")
        if not 0.0 < self.eta <= 1.0:
            raise InvalidConfigError("eta must lie in (0, 1]")

    def to_dict(self) -> dict:
        return {"lambda": self.lam, "R": "inf" if math.isinf(self.R) else self.R, "A": self.A,
                "warmup_steps": self.warmup_steps, "eta": self.eta}

    @classmethod
    def from_dict(cls, d: dict) -> "ControlConfig":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        if "R" in d:
            d["R"] = float(d["R"])
        return cls(**d)


@dataclass(frozen=True)
class SampleDecision:
    verdict: Verdict
    ratio: object  # float or NOT_CALIBRATED
    strength: float | None = None
    t: int | None = None
    raw_loss: float | None = None


def aug_strength(r: float, lam: float, A: float = 5.0) -> float:
    """``exp(-A * |r - lam| / lam)``."""
    return math.exp(-A * abs((r - lam) / lam))


def classify(r, cfg: ControlConfig) -> SampleDecision:
    if r is NOT_CALIBRATED:
        return SampleDecision(Verdict.KEEP, r)
    if r < cfg.lam:
        return SampleDecision(Verdict.SKIP, r)
    if r < cfg.R * cfg.lam:
        return SampleDecision(Verdict.AUGMENT, r, aug_strength(r, cfg.lam, cfg.A))
    return SampleDecision(Verdict.KEEP, r)


@dataclass
class BatchResult:
    params: DenoiserParams
    bank: MemoryBank
    decisions: list[SampleDecision] = field(default_factory=list)
    raw_losses: np.ndarray | None = None
    stepped: bool = False


def draw_timesteps_and_noise(rng: np.random.Generator, B: int, D: int, T: int):
    """Per-sample ``t`` on ``1..T`` then ``eps``, in that order from one stream."""
    t = rng.integers(1, T + 1, size=B)
    eps = rng.standard_normal((B, D))
    return t, eps


def controlled_batch_step(batch: np.ndarray, params: DenoiserParams, sched: NoiseSchedule,
                          bank: MemoryBank, cfg: ControlConfig, augmenter: AugmentConfig | None,
                          rng: np.random.Generator, *, step: int = 0, agc: bool = True,
                          aug_rng: np.random.Generator | None = None,
                          adam: AdamConfig = AdamConfig()) -> BatchResult:
    """One training step with loss-ratio control.

    ``step`` is the warmup clock (batch steps taken so far); nothing is skipped
    or augmented while ``step < cfg.warmup_steps``. ``agc=False`` turns all
    treatment off, and ``augmenter=None`` turns Augment verdicts into Keep. The
    bank is updated in place with raw losses, classification of each sample
    reading the entry before its own update. ``aug_rng`` (default ``rng``)
    drives augmentation so the timestep and noise draws stay aligned across
    ablations that pass separate streams.
    """
    batch = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    B, D = batch.shape
    if B == 0:
        raise InvalidConfigError("empty batch")
    t, eps = draw_timesteps_and_noise(rng, B, D, sched.T)
    aug_rng = rng if aug_rng is None else aug_rng
    treat = agc and step >= cfg.warmup_steps

    raw = per_sample_loss(batch, t, eps, params, sched)
    decisions = []
    for i in range(B):
        k = int(t[i]) - 1
        if treat:
            d = classify(loss_ratio(bank, k, float(raw[i])), cfg)
            if d.verdict is Verdict.AUGMENT and augmenter is None:
                d = SampleDecision(Verdict.KEEP, d.ratio)
        else:
            d = SampleDecision(Verdict.KEEP, loss_ratio(bank, k, float(raw[i])))
        bank.update(k, float(raw[i]))
        decisions.append(SampleDecision(d.verdict, d.ratio, d.strength, int(t[i]), float(raw[i])))

    keep = np.array([d.verdict is not Verdict.SKIP for d in decisions])
    if not keep.any():
        return BatchResult(params, bank, decisions, raw, False)
    x = batch.copy()
    for i, d in enumerate(decisions):
        if d.verdict is Verdict.AUGMENT:
            x[i] = augment(batch[i], d.strength, augmenter, aug_rng)
    idx = np.flatnonzero(keep)
    _, g = loss_and_grad(x[idx], t[idx], eps[idx], params, sched)
    new = optimizer_step(params, g / len(idx), adam)
    return BatchResult(new, bank, decisions, raw, True)


def plain_batch_step(batch: np.ndarray, params: DenoiserParams, sched: NoiseSchedule,
                     rng: np.random.Generator, adam: AdamConfig = AdamConfig()):
    """Uncontrolled step; same draw order as :func:`controlled_batch_step`.

    Returns ``(params, raw_losses)``.
    """
    batch = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    t, eps = draw_timesteps_and_noise(rng, batch.shape[0], batch.shape[1], sched.T)
    losses, g = loss_and_grad(batch, t, eps, params, sched)
    return optimizer_step(params, g / batch.shape[0], adam), losses

