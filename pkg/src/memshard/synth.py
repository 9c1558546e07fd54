"""Procedural toy images with planted duplicate groups.

Each class is a shape family rendered at a random position, size and
intensity on a dim background, plus per-pixel Gaussian noise. Duplicate groups
repeat one base image ``n_copies`` times (optionally jittered); they are the
desk-scale ground truth for memorization-prone samples.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .data import Dataset, config_hash
from .errors import InvalidConfigError

SHAPES = ("disc", "bar", "cross", "checker", "ring", "square", "diagonal", "corner")


@dataclass(frozen=True)
class DuplicateGroup:
    n_copies: int
    jitter_std: float = 0.0


@dataclass(frozen=True)
class SynthSpec:
    n_total: int = 2048
    H: int = 8
    n_classes: int = 8
    duplicate_groups: tuple[DuplicateGroup, ...] = field(
        default_factory=lambda: tuple(DuplicateGroup(32, 0.0) for _ in range(4)))
    noise_floor_std: float = 0.1
    seed: int = 0

    def __post_init__(self):
        groups = tuple(g if isinstance(g, DuplicateGroup) else DuplicateGroup(**g)
                       for g in self.duplicate_groups)
        object.__setattr__(self, "duplicate_groups", groups)
        if self.H < 2:
            raise InvalidConfigError("image side H must be at least 2")
        if not 1 <= self.n_classes <= len(SHAPES):
            raise InvalidConfigError(f"n_classes must be in [1, {len(SHAPES)}]")
        if self.n_total < 1:
            raise InvalidConfigError("n_total must be positive")
        if sum(g.n_copies for g in groups) > self.n_total:
            raise InvalidConfigError("duplicate copies exceed n_total")
        for g in groups:
            if g.n_copies < 1 or g.jitter_std < 0:
                raise InvalidConfigError(f"invalid duplicate group {g}")
            per_class = -(-self.n_total // self.n_classes)
            if g.n_copies > per_class:
                raise InvalidConfigError("a duplicate group cannot exceed its class size")
        if self.noise_floor_std < 0:
            raise InvalidConfigError("noise_floor_std must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        d = dict(d)
        d["duplicate_groups"] = tuple(DuplicateGroup(**g) for g in d.get("duplicate_groups", ()))
        return cls(**d)


def render_shape(kind: str, H: int, rng: np.random.Generator) -> np.ndarray:
    """One noiseless ``H x H`` image of the given shape family."""
    yy, xx = np.mgrid[0:H, 0:H].astype(np.float64)
    cy, cx = rng.uniform(0.2 * H, 0.8 * H - 1, size=2)
    size = rng.uniform(0.15 * H, 0.35 * H)
    fg = rng.uniform(0.6, 1.0)
    bg = rng.uniform(0.0, 0.2)
    dy, dx = yy - cy, xx - cx
    if kind == "disc":
        mask = dy ** 2 + dx ** 2 <= size ** 2
    elif kind == "bar":
        half = max(0.5, size / 3)
        mask = np.abs(dy) <= half if rng.random() < 0.5 else np.abs(dx) <= half
    elif kind == "cross":
        mask = (np.abs(dy) <= 0.5) | (np.abs(dx) <= 0.5)
        mask &= (np.abs(dy) <= size + 0.5) & (np.abs(dx) <= size + 0.5)
    elif kind == "checker":
        period = int(rng.integers(1, max(2, H // 4) + 1))
        phase = int(rng.integers(0, 2))
        mask = ((yy // period + xx // period + phase) % 2) == 0
    elif kind == "ring":
        r = np.sqrt(dy ** 2 + dx ** 2)
        mask = np.abs(r - size) <= 0.7
    elif kind == "square":
        mask = (np.abs(dy) <= size) & (np.abs(dx) <= size)
    elif kind == "diagonal":
        offset = rng.uniform(-H / 4, H / 4)
        sign = 1.0 if rng.random() < 0.5 else -1.0
        mask = np.abs(yy - sign * xx - offset + (0 if sign > 0 else H - 1)) <= 0.8
    elif kind == "corner":
        mask = ((np.abs(dy) <= 0.5) & (dx >= 0) & (dx <= 2 * size)) | \
               ((np.abs(dx) <= 0.5) & (dy >= 0) & (dy <= 2 * size))
    else:
        raise InvalidConfigError(f"unknown shape {kind!r}")
    return np.where(mask, fg, bg)


def synth_dataset(spec: SynthSpec) -> Dataset:
    """Render the dataset described by ``spec``.

    Class labels are assigned round-robin by id; duplicate copies take ids of
    their group's class so class balance is untouched.
    """
    rng = np.random.default_rng([spec.seed, 0xDA7A])
    N, H, C = spec.n_total, spec.H, spec.n_classes
    ids = np.arange(N, dtype=np.int64)
    labels = ids % C
    dup = np.full(N, -1, dtype=np.int64)

    free = {c: list(ids[labels == c]) for c in range(C)}
    for g, grp in enumerate(spec.duplicate_groups):
        c = g % C
        if len(free[c]) < grp.n_copies:
            raise InvalidConfigError(f"class {c} has too few free slots for duplicate group {g}")
        pick = rng.choice(len(free[c]), size=grp.n_copies, replace=False)
        chosen = sorted(free[c][i] for i in pick)
        dup[chosen] = g
        taken = set(chosen)
        free[c] = [i for i in free[c] if i not in taken]

    pixels = np.empty((N, H * H))
    for i in range(N):
        if dup[i] < 0:
            img = render_shape(SHAPES[labels[i]], H, rng) + spec.noise_floor_std * rng.standard_normal((H, H))
            pixels[i] = np.clip(img, 0.0, 1.0).ravel()
    for g, grp in enumerate(spec.duplicate_groups):
        members = np.flatnonzero(dup == g)
        base = render_shape(SHAPES[g % C], H, rng) + spec.noise_floor_std * rng.standard_normal((H, H))
        base = base.ravel()
        for i in members:
            img = base + grp.jitter_std * rng.standard_normal(H * H) if grp.jitter_std > 0 else base
            pixels[i] = np.clip(img, 0.0, 1.0)

    header = {
        "n": N, "H": H, "classes": C, "seed": spec.seed,
        "config_hash": config_hash(spec.to_dict()),
    }
    return Dataset(pixels, ids, H, labels, dup, header)
