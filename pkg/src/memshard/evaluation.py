"""Memorization and quality measurements.

The nearest-neighbour distance ratio rates a generation by how much closer it
sits to its nearest training image than that image's own neighbours do. A
small ratio flags a near copy. Alongside it: MQ counts, a sliced Wasserstein
quality proxy, per-timestep loss curves, spectral energy and the
nearest-neighbour / skip-count diagnostics.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from .data import Dataset
from .diffusion import DenoiserParams, NoiseSchedule, per_sample_loss, sample_images

DEFAULT_THRESHOLDS = (0.4, 0.5, 0.6)
DEFAULT_NEIGHBORS = 50
_CHUNK = 512


def _neighbor_scale(train: np.ndarray, n: int) -> np.ndarray:
    """Mean distance from each training row to its ``n`` nearest other rows."""
    N = train.shape[0]
    if N < n + 1:
        raise ValueError(f"need at least n+1={n + 1} training points, got {N}")
    out = np.empty(N)
    for s in range(0, N, _CHUNK):
        d = cdist(train[s:s + _CHUNK], train)
        d[np.arange(d.shape[0]), np.arange(s, s + d.shape[0])] = np.inf
        out[s:s + _CHUNK] = np.sort(d, axis=1)[:, :n].mean(axis=1)
    return out


def _ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        r = num / den
    r = np.where(den == 0, np.where(num == 0, 0.0, np.inf), r)
    return r


def nearest_train(gen: np.ndarray, train: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Index of and distance to the nearest training row (ties: lowest index)."""
    gen = np.atleast_2d(gen)
    idx = np.empty(gen.shape[0], dtype=np.int64)
    dist = np.empty(gen.shape[0])
    for s in range(0, gen.shape[0], _CHUNK):
        d = cdist(gen[s:s + _CHUNK], train)
        j = d.argmin(axis=1)
        idx[s:s + _CHUNK] = j
        dist[s:s + _CHUNK] = d[np.arange(len(j)), j]
    return idx, dist


def ell_ratios(gen: np.ndarray, train: np.ndarray, n: int = DEFAULT_NEIGHBORS,
               scale: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Ratios and nearest training indices for every row of ``gen``."""
    train = np.asarray(train, dtype=np.float64)
    if scale is None:
        scale = _neighbor_scale(train, n)
    idx, dist = nearest_train(np.asarray(gen, dtype=np.float64), train)
    return _ratio(dist, scale[idx]), idx


def ell_ratio(x: np.ndarray, train: np.ndarray, n: int = DEFAULT_NEIGHBORS) -> float:
    """``d(x, xbar) / mean_{y in S_n(xbar)} d(xbar, y)`` for one generation.

    ``xbar`` is the nearest training row and ``S_n(xbar)`` its ``n`` nearest
    other training rows. A zero denominator gives 0 for a zero numerator and
    ``inf`` otherwise.
    """
    train = np.asarray(train, dtype=np.float64)
    if train.shape[0] < n + 1:
        raise ValueError(f"need at least n+1={n + 1} training points, got {train.shape[0]}")
    idx, dist = nearest_train(np.asarray(x, dtype=np.float64)[None, :], train)
    j = int(idx[0])
    d = cdist(train[j:j + 1], train)[0]
    d[j] = np.inf
    den = np.sort(d)[:n].mean()
    return float(_ratio(dist, np.array([den]))[0])


def mq_count(ells, thresholds=DEFAULT_THRESHOLDS) -> dict[float, int]:
    """Number of ratios ``<= delta`` for each threshold."""
    ells = np.asarray(ells, dtype=np.float64)
    return {float(d): int(np.count_nonzero(ells <= d)) for d in thresholds}


def _w2_1d(a: np.ndarray, b: np.ndarray) -> float:
    """Exact W2 between two 1-D empirical distributions via the quantile coupling."""
    a, b = np.sort(a), np.sort(b)
    if len(a) == len(b):
        return float(np.sqrt(np.mean((a - b) ** 2)))
    u = np.union1d(np.arange(1, len(a) + 1) / len(a), np.arange(1, len(b) + 1) / len(b))
    w = np.diff(np.concatenate([[0.0], u]))
    mid = u - w / 2
    qa = a[np.minimum((mid * len(a)).astype(np.int64), len(a) - 1)]
    qb = b[np.minimum((mid * len(b)).astype(np.int64), len(b) - 1)]
    return float(np.sqrt(np.sum(w * (qa - qb) ** 2)))


def quality_proxy(gen: np.ndarray, real: np.ndarray, n_projections: int = 128, seed: int = 0) -> float:
    """Mean 1-D W2 distance over random unit projections of the pixel vectors."""
    gen, real = np.atleast_2d(gen), np.atleast_2d(real)
    if gen.shape[0] == 0 or real.shape[0] == 0 or gen.shape[1] != real.shape[1]:
        raise ValueError("quality_proxy needs two non-empty sets of equal dimension")
    rng = np.random.default_rng([int(seed), 0x5D])
    P = rng.standard_normal((gen.shape[1], n_projections))
    P /= np.linalg.norm(P, axis=0)
    ga, ra = gen @ P, real @ P
    return float(np.mean([_w2_1d(ga[:, k], ra[:, k]) for k in range(n_projections)]))


@dataclass
class MemorizationReport:
    n_generated: int
    ell_values: np.ndarray
    mq: dict[float, int]
    quality_proxy: float
    nearest_ids: np.ndarray
    header: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "header": self.header,
            "n_generated": self.n_generated,
            "mq": {format(k, "g"): v for k, v in self.mq.items()},
            "quality_proxy": self.quality_proxy,
            "ell_values": [v if math.isfinite(v) else "inf" for v in map(float, self.ell_values)],
            "nearest_ids": [int(i) for i in self.nearest_ids],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    def ell_csv(self) -> str:
        return "".join(format(float(v), ".17g") + "\n" for v in self.ell_values)


def evaluate_model(params: DenoiserParams, sched: NoiseSchedule, train: Dataset, n_gen: int = 4096,
                   seed: int = 0, thresholds=DEFAULT_THRESHOLDS, n_neighbors: int = DEFAULT_NEIGHBORS,
                   n_projections: int = 128, generated: np.ndarray | None = None) -> MemorizationReport:
    """Sample ``n_gen`` images (or score ``generated``) against ``train``."""
    if generated is None:
        if n_gen < 1:
            raise ValueError("n_gen must be at least 1")
        generated = sample_images(params, sched, n_gen, seed)
    ells, idx = ell_ratios(generated, train.pixels, n_neighbors)
    q = quality_proxy(generated, train.pixels, n_projections, seed=0)
    return MemorizationReport(len(generated), ells, mq_count(ells, sorted(thresholds)), q,
                              train.ids[idx], {"seed": seed})


def loss_gap_curves(params: DenoiserParams, sched: NoiseSchedule, set_a: np.ndarray, set_b: np.ndarray,
                    reps: int = 4, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Mean loss per timestep ``1..T`` for two sets of images.

    Noise for timestep ``t`` and repetition ``k`` comes from a stream keyed by
    ``(seed, t)``, so equal sets get equal draws and identical curves.
    """
    if reps < 1:
        raise ValueError("reps must be at least 1")

    def curve(X):
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        out = np.empty(sched.T)
        rows = np.tile(X, (reps, 1))
        for t in range(1, sched.T + 1):
            eps = np.random.default_rng([int(seed), t]).standard_normal(rows.shape)
            out[t - 1] = per_sample_loss(rows, np.full(len(rows), t), eps, params, sched).mean()
        return out

    return curve(set_a), curve(set_b)


def gap_fraction(curve_dup: np.ndarray, curve_uniq: np.ndarray, lo: float = 0.2, hi: float = 0.8) -> float:
    """Share of timesteps in ``[lo T, hi T]`` where the first curve is lower."""
    T = len(curve_dup)
    t = np.arange(1, T + 1)
    sel = (t >= lo * T) & (t <= hi * T)
    return float(np.mean(curve_dup[sel] < curve_uniq[sel]))


def top_memorized(report: MemorizationReport, k: int = 256) -> np.ndarray:
    """Training ids most closely reproduced by generations (lowest ratio first)."""
    best: dict[int, float] = {}
    for i, e in zip(report.nearest_ids, report.ell_values):
        i = int(i)
        if e < best.get(i, np.inf):
            best[i] = float(e)
    ranked = sorted(best.items(), key=lambda kv: (kv[1], kv[0]))
    return np.array([i for i, _ in ranked[:k]], dtype=np.int64)


def spectral_energy(x: np.ndarray, H: int | None = None) -> float:
    """Non-DC energy of the 2-D DFT of the mean-subtracted image, over ``D``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        H = int(round(math.sqrt(x.size))) if H is None else H
        x = x.reshape(H, -1)
    F = np.fft.fft2(x - x.mean())
    mag = np.abs(F) ** 2
    mag[0, 0] = 0.0
    return float(mag.sum() / x.size)


def nn_distances(rows: np.ndarray, pixels: np.ndarray) -> np.ndarray:
    """Distance from each ``pixels[rows[i]]`` to its nearest other row of ``pixels``."""
    rows = np.asarray(rows, dtype=np.int64)
    out = np.empty(len(rows))
    for s in range(0, len(rows), _CHUNK):
        r = rows[s:s + _CHUNK]
        d = cdist(pixels[r], pixels)
        d[np.arange(len(r)), r] = np.inf
        out[s:s + _CHUNK] = d.min(axis=1)
    return out


def nn_distance_histogram(rows: np.ndarray, pixels: np.ndarray, bins=None):
    """Nearest-other-member distances, and their histogram when ``bins`` is given."""
    d = nn_distances(rows, pixels)
    if bins is None:
        return d
    return d, np.histogram(d, bins=bins)


def skip_count_histogram(skip_totals: dict[int, int], bins=10):
    """Histogram ``(counts, edges)`` of per-sample cumulative skip totals."""
    vals = np.array([skip_totals[k] for k in sorted(skip_totals)], dtype=np.float64)
    if vals.size == 0:
        vals = np.zeros(0)
    return np.histogram(vals, bins=bins)
