"""Sharded ensemble training with memory-sample redistribution.

The control plane splits the data into ``K`` shards and trains one proxy model
per shard for ``E`` epochs per round. After even rounds the proxies are
averaged into a new shared model. After odd rounds every shard hands its
most-skipped samples to the next shard, and each proxy continues from its own
weights. Baselines (plain training, DP-SGD) run through the same loop with
``K = 1``.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np

from .augment import AugmentConfig
from .control import (ControlConfig, MemoryBank, Verdict, controlled_batch_step,
                      draw_timesteps_and_noise)
from .data import Dataset, config_hash
from .diffusion import (AdamConfig, Arch, DenoiserParams, NoiseSchedule, build_schedule,
                        init_params, optimizer_step, per_sample_gradients)
from .errors import InvalidConfigError, NumericError

SPLIT_KINDS = ("iid-stratified", "equal-random", "dirichlet")
TRAINER_KINDS = ("default", "dp-sgd", "iet-agc-plus")
TOGGLES = ("agc", "iet", "taa", "msr")


@dataclass(frozen=True)
class ExperimentConfig:
    K: int = 8
    M: int = 12
    E: int = 5
    P: float = 0.25
    split_kind: str = "iid-stratified"
    dirichlet_alpha: float = 1.0
    control: ControlConfig = field(default_factory=ControlConfig)
    aug: AugmentConfig = field(default_factory=AugmentConfig)
    batch_size: int = 64
    seed: int = 0
    trainer_kind: str = "iet-agc-plus"
    agc: bool = True
    iet: bool = True
    taa: bool = True
    msr: bool = True
    dp_tau: float = 0.0005
    dp_clip_norm: float = 1.0
    T: int = 100
    schedule_kind: str = "cosine"
    hidden: tuple[int, ...] = (128, 128)
    E_t: int = 32
    output: str = "x0"
    lr: float = 1e-3

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if isinstance(self.control, dict):
            object.__setattr__(self, "control", ControlConfig.from_dict(self.control))
        if isinstance(self.aug, dict):
            object.__setattr__(self, "aug", AugmentConfig.from_dict(self.aug))
        if self.K < 1:
            raise InvalidConfigError("K must be at least 1")
        if self.M < 0 or self.E < 0:
            raise InvalidConfigError("M and E must be non-negative")
        if not 0.0 <= self.P < 1.0:
            raise InvalidConfigError("P must lie in [0, 1)")
        if self.split_kind not in SPLIT_KINDS:
            raise InvalidConfigError(f"unknown split_kind {self.split_kind!r}")
        if self.split_kind == "dirichlet" and not self.dirichlet_alpha > 0:
            raise InvalidConfigError("dirichlet_alpha must be positive")
        if self.trainer_kind not in TRAINER_KINDS:
            raise InvalidConfigError(f"unknown trainer_kind {self.trainer_kind!r}")
        if self.batch_size < 1:
            raise InvalidConfigError("batch_size must be positive")
        if (self.msr or self.taa) and not self.agc:
            raise InvalidConfigError("msr and taa require agc")
        if self.msr and not self.iet:
            raise InvalidConfigError("msr requires iet")
        if self.trainer_kind != "iet-agc-plus" and self.agc:
            raise InvalidConfigError(f"trainer_kind {self.trainer_kind!r} does not support agc/taa/msr")
        if self.trainer_kind == "dp-sgd" and not self.dp_clip_norm > 0:
            raise InvalidConfigError("dp_clip_norm must be positive")
        if self.dp_tau < 0 or self.lr <= 0:
            raise InvalidConfigError("dp_tau must be non-negative and lr positive")

    @property
    def n_shards(self) -> int:
        """Shard count actually used: ``K`` with iet on, else 1."""
        return self.K if self.iet else 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["control"] = self.control.to_dict()
        d["aug"] = self.aug.to_dict()
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidConfigError(f"unknown config fields {sorted(unknown)}")
        return cls(**d)

    def hash(self) -> str:
        return config_hash(self.to_dict())


def baseline_config(**overrides) -> ExperimentConfig:
    """Plain single-model training with every treatment off."""
    kw = dict(trainer_kind="default", agc=False, iet=False, taa=False, msr=False)
    kw.update(overrides)
    return ExperimentConfig(**kw)


def ablation_config(components: str, **overrides) -> ExperimentConfig:
    """Config enabling a ``+``-joined subset of ``agc, iet, taa, msr`` (or ``none``)."""
    on = set() if components in ("", "none") else set(components.split("+"))
    if on - set(TOGGLES):
        raise InvalidConfigError(f"unknown components {sorted(on - set(TOGGLES))}")
    kw = {k: k in on for k in TOGGLES}
    kw["trainer_kind"] = "iet-agc-plus" if on else "default"
    kw.update(overrides)
    return ExperimentConfig(**kw)


# ---------------------------------------------------------------------------
# Shards


@dataclass
class ShardState:
    shard_id: int
    sample_ids: np.ndarray
    skip_counts: np.ndarray | None = None  # aligned with sample_ids
    bank: MemoryBank | None = None
    rng: np.random.Generator | None = None
    aug_rng: np.random.Generator | None = None
    params: DenoiserParams | None = None
    n_steps: int = 0

    def __post_init__(self):
        self.sample_ids = np.asarray(self.sample_ids, dtype=np.int64)
        if self.skip_counts is None:
            self.skip_counts = np.zeros(len(self.sample_ids), dtype=np.int64)
        if len(self.skip_counts) != len(self.sample_ids):
            raise ValueError("skip_counts must align with sample_ids")

    @property
    def skip_map(self) -> dict[int, int]:
        return {int(i): int(c) for i, c in zip(self.sample_ids, self.skip_counts)}

    def __len__(self) -> int:
        return len(self.sample_ids)


def shard_split(dataset: Dataset, K: int, split_kind: str, rng: np.random.Generator,
                alpha: float = 1.0) -> list[ShardState]:
    """Partition ``dataset.ids`` into ``K`` shards; ids sorted inside each shard."""
    N = len(dataset)
    if not 1 <= K <= N:
        raise InvalidConfigError(f"K={K} must lie in [1, N={N}]")
    ids = np.sort(dataset.ids)
    if split_kind == "iid-stratified":
        if dataset.labels is None:
            raise InvalidConfigError("iid-stratified split needs class labels; use equal-random")
        labels = dataset.labels[dataset.rows(ids)]
        order = np.concatenate([rng.permutation(ids[labels == c]) for c in np.unique(labels)])
        parts = [order[k::K] for k in range(K)]
    elif split_kind == "equal-random":
        perm = rng.permutation(ids)
        parts = [perm[k::K] for k in range(K)]
    elif split_kind == "dirichlet":
        if not alpha > 0:
            raise InvalidConfigError("dirichlet split needs alpha > 0")
        labels = np.zeros(N, dtype=np.int64) if dataset.labels is None else dataset.labels[dataset.rows(ids)]
        buckets: list[list[np.ndarray]] = [[] for _ in range(K)]
        for c in np.unique(labels):
            members = rng.permutation(ids[labels == c])
            p = rng.dirichlet(np.full(K, float(alpha)))
            counts = rng.multinomial(len(members), p)
            for k, chunk in enumerate(np.split(members, np.cumsum(counts)[:-1])):
                buckets[k].append(chunk)
        parts = [np.concatenate(b) if b else np.zeros(0, dtype=np.int64) for b in buckets]
    else:
        raise InvalidConfigError(f"unknown split_kind {split_kind!r}")
    return [ShardState(k + 1, np.sort(p)) for k, p in enumerate(parts)]


def aggregate(models: list[DenoiserParams]) -> DenoiserParams:
    """Elementwise mean of parameters and Adam moments; step is the max.

    Each coordinate is computed as ``min + sum(sorted(v - min)) / K`` so the
    result does not depend on the order of ``models`` and equals the common
    value exactly when all inputs agree.
    """
    if not models:
        raise ValueError("nothing to aggregate")
    arch = models[0].arch
    for p in models:
        if p.arch != arch or p.theta.shape != models[0].theta.shape:
            raise ValueError("cannot aggregate models of different shapes")

    def mean(stack):
        lo, hi = stack.min(axis=0), stack.max(axis=0)
        s = np.sort(stack - lo, axis=0).sum(axis=0)
        return np.where(lo == hi, lo, lo + s / stack.shape[0])

    return DenoiserParams(
        arch,
        mean(np.stack([p.theta for p in models])),
        mean(np.stack([p.m for p in models])),
        mean(np.stack([p.v for p in models])),
        max(p.step for p in models),
    )


def _n_moved(P: float, n: int) -> int:
    # round() guards against products like 0.1 * 30 = 3.0000000000000004
    return int(math.ceil(round(P * n, 9)))


def msr_redistribute(shards: list[ShardState], P: float) -> tuple[list[ShardState], list[tuple[int, int, int]]]:
    """Move each shard's top ``ceil(P |D_i|)`` most-skipped samples to the next shard.

    Selections are made from the pre-move state; ties go to the smaller id.
    Every skip counter is zero afterwards. Returns the new shards and a list of
    ``(sample_id, from_shard, to_shard)`` moves.
    """
    K = len(shards)
    out = [replace(s, sample_ids=s.sample_ids.copy(), skip_counts=s.skip_counts.copy()) for s in shards]
    if K < 2:
        for s in out:
            s.skip_counts[:] = 0
        return out, []
    outgoing = []
    for s in shards:
        n = min(_n_moved(P, len(s)), len(s))
        order = np.lexsort((s.sample_ids, -s.skip_counts))
        outgoing.append(s.sample_ids[order[:n]])
    moves = []
    for k, s in enumerate(out):
        src = (k - 1) % K
        keep = np.setdiff1d(shards[k].sample_ids, outgoing[k], assume_unique=True)
        s.sample_ids = np.sort(np.concatenate([keep, outgoing[src]]))
        s.skip_counts = np.zeros(len(s.sample_ids), dtype=np.int64)
        moves += [(int(i), shards[src].shard_id, s.shard_id) for i in outgoing[src]]
    moves.sort()
    return out, moves


# ---------------------------------------------------------------------------
# DP-SGD


def clip_and_noise(per_sample: np.ndarray, tau: float, clip_norm: float,
                   rng: np.random.Generator) -> np.ndarray:
    """Clip each row to L2 <= ``clip_norm``, average, add ``N(0, (tau C)^2)`` per coordinate."""
    norms = np.linalg.norm(per_sample, axis=1)
    scale = np.minimum(1.0, clip_norm / np.maximum(norms, 1e-300))
    g = (per_sample * scale[:, None]).mean(axis=0)
    return g + tau * clip_norm * rng.standard_normal(g.shape)


def dp_sgd_step(batch: np.ndarray, params: DenoiserParams, sched: NoiseSchedule, tau: float,
                clip_norm: float, rng: np.random.Generator, adam: AdamConfig = AdamConfig()):
    """Returns ``(params, raw_losses)``. Draws ``t, eps`` then the privacy noise."""
    if not clip_norm > 0:
        raise InvalidConfigError("clip_norm must be positive")
    batch = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    t, eps = draw_timesteps_and_noise(rng, batch.shape[0], batch.shape[1], sched.T)
    losses, G = per_sample_gradients(batch, t, eps, params, sched)
    return optimizer_step(params, clip_and_noise(G, tau, clip_norm, rng), adam), losses


# ---------------------------------------------------------------------------
# Training loop


def model_setup(cfg: ExperimentConfig, D: int) -> tuple[NoiseSchedule, DenoiserParams]:
    sched = build_schedule(cfg.T, cfg.schedule_kind)
    arch = Arch(D=D, E_t=cfg.E_t, hidden=cfg.hidden, output=cfg.output)
    return sched, init_params(arch, cfg.seed)


def shard_rngs(seed: int, shard_id: int) -> tuple[np.random.Generator, np.random.Generator]:
    """Training stream (order, timesteps, noise) and augmentation stream of a shard."""
    return (np.random.default_rng([int(seed), int(shard_id), 1]),
            np.random.default_rng([int(seed), int(shard_id), 2]))


@dataclass
class RoundStats:
    shard: int
    shard_size: int
    mean_loss: float
    n_skipped: int
    n_augmented: int
    n_kept: int
    n_steps: int
    skip_increments: dict[int, int]
    decisions: list | None = None


def train_shard(shard: ShardState, pixels_of: Callable[[np.ndarray], np.ndarray],
                cfg: ExperimentConfig, sched: NoiseSchedule, step_offset: int,
                log_decisions: bool = False) -> tuple[ShardState, RoundStats]:
    """Run ``E`` epochs on one shard. ``shard`` is updated in place and returned.

    The warmup clock of local step ``j`` is ``step_offset + j * n_shards``, an
    estimate of the ensemble-wide batch count so that warmup lasts the same
    wall of training whatever ``K`` is.
    """
    adam = AdamConfig(lr=cfg.lr)
    ids = shard.sample_ids
    X = pixels_of(ids)
    pos = {int(i): r for r, i in enumerate(ids)}
    losses, n_skip, n_aug, n_keep, local = [], 0, 0, 0, 0
    inc: dict[int, int] = {}
    log = [] if log_decisions else None
    params = shard.params
    augmenter = cfg.aug if cfg.taa else None
    for _ in range(cfg.E):
        perm = shard.rng.permutation(len(ids))
        for s in range(0, len(ids), cfg.batch_size):
            rows = perm[s:s + cfg.batch_size]
            if cfg.trainer_kind == "dp-sgd":
                params, raw = dp_sgd_step(X[rows], params, sched, cfg.dp_tau, cfg.dp_clip_norm,
                                          shard.rng, adam)
                n_keep += len(rows)
            else:
                res = controlled_batch_step(
                    X[rows], params, sched, shard.bank, cfg.control, augmenter, shard.rng,
                    step=step_offset + local * cfg.n_shards, agc=cfg.agc,
                    aug_rng=shard.aug_rng, adam=adam)
                params, raw = res.params, res.raw_losses
                for r, d in zip(rows, res.decisions):
                    if d.verdict is Verdict.SKIP:
                        n_skip += 1
                        sid = int(ids[r])
                        inc[sid] = inc.get(sid, 0) + 1
                    elif d.verdict is Verdict.AUGMENT:
                        n_aug += 1
                    else:
                        n_keep += 1
                if log is not None:
                    log.append([(int(ids[r]), d.verdict.value, d.t) for r, d in zip(rows, res.decisions)])
            losses.append(raw)
            local += 1
    for sid, c in inc.items():
        shard.skip_counts[pos[sid]] += c
    shard.params = params
    shard.n_steps += local
    mean_loss = float(np.concatenate(losses).mean()) if losses else float("nan")
    return shard, RoundStats(shard.shard_id, len(ids), mean_loss, n_skip, n_aug, n_keep,
                             local, inc, log)


_WORKER_DATA: dict = {}


def _worker_init(pixels, ids):
    _WORKER_DATA["pixels"] = pixels
    _WORKER_DATA["row"] = {int(i): r for r, i in enumerate(ids)}


def _worker_pixels(sample_ids):
    row = _WORKER_DATA["row"]
    return _WORKER_DATA["pixels"][[row[int(i)] for i in sample_ids]]


def _worker_train(args):
    shard, cfg, step_offset, log_decisions = args
    sched = build_schedule(cfg.T, cfg.schedule_kind)
    return train_shard(shard, _worker_pixels, cfg, sched, step_offset, log_decisions)


def resolve_workers(workers: int | None) -> int:
    if workers is None:
        env = os.environ.get("MEMSHARD_WORKERS")
        workers = int(env) if env else 1
    if workers < 1:
        raise InvalidConfigError("workers must be at least 1")
    return workers


@dataclass
class ExperimentResult:
    params: DenoiserParams
    sched: NoiseSchedule
    metrics: list[dict]
    history: list[dict]
    skip_totals: dict[int, int]
    shards: list[ShardState]
    decision_log: list | None = None


def run_experiment(cfg: ExperimentConfig, dataset: Dataset, workers: int | None = None,
                   on_interaction: Callable | None = None,
                   log_decisions: bool = False) -> ExperimentResult:
    """Train per the round schedule and return the final model plus logs.

    ``on_interaction(m, event, global_params_or_None, shards)`` is called after
    each round's interaction phase (for checkpointing). ``event`` is
    ``aggregate`` on even rounds, ``redistribute`` on odd rounds with MSR on,
    ``none`` otherwise, and ``final-aggregate`` once after an odd last round.
    """
    K = cfg.n_shards
    if K > len(dataset):
        raise InvalidConfigError(f"K={K} exceeds dataset size {len(dataset)}")
    workers = resolve_workers(workers)
    sched, theta0 = model_setup(cfg, dataset.D)
    shards = shard_split(dataset, K, cfg.split_kind, np.random.default_rng([cfg.seed, 0x5917]),
                         cfg.dirichlet_alpha)
    for s in shards:
        s.bank = MemoryBank.zeros(cfg.T, cfg.control.eta)
        s.rng, s.aug_rng = shard_rngs(cfg.seed, s.shard_id)
        s.params = theta0

    metrics, history = [], []
    totals = {int(i): 0 for i in dataset.ids}
    decision_log = [] if log_decisions else None
    global_params = theta0
    steps_done = 0
    pool = None
    if workers > 1 and K > 1:
        pool = ProcessPoolExecutor(max_workers=min(workers, K), initializer=_worker_init,
                                   initargs=(dataset.pixels, dataset.ids))
    try:
        for m in range(1, cfg.M + 1):
            if (m - 1) % 2 == 0:
                for s in shards:
                    s.params = global_params
            jobs = [(s, cfg, steps_done, log_decisions) for s in shards]
            if pool is not None:
                results = list(pool.map(_worker_train, jobs))
            else:
                results = [train_shard(s, dataset.pixels_of, cfg, sched, steps_done, log_decisions)
                           for s in shards]
            shards = [r[0] for r in results]
            stats = [r[1] for r in results]
            steps_done += sum(st.n_steps for st in stats)
            for st in stats:
                metrics.append({"round": m, "shard": st.shard, "mean_loss": st.mean_loss,
                                "n_skipped": st.n_skipped, "n_augmented": st.n_augmented,
                                "n_kept": st.n_kept, "shard_size": st.shard_size})
                for sid, c in st.skip_increments.items():
                    totals[sid] += c
                if decision_log is not None:
                    decision_log.append({"round": m, "shard": st.shard, "steps": st.decisions})

            entry = {"round": m, "shards": [
                {"shard": s.shard_id, "sample_ids": s.sample_ids.tolist(),
                 "skip_counts": s.skip_counts.tolist()} for s in shards]}
            if m % 2 == 0:
                global_params = aggregate([s.params for s in shards])
                entry["event"] = "aggregate"
            elif cfg.msr and K > 1:
                shards, moves = msr_redistribute(shards, cfg.P)
                entry["event"] = "redistribute"
                entry["moves"] = [list(mv) for mv in moves]
            else:
                entry["event"] = "none"
            entry["shard_sizes_after"] = [len(s) for s in shards]
            history.append(entry)
            if on_interaction is not None:
                on_interaction(m, entry["event"], global_params if m % 2 == 0 else None, shards)
    finally:
        if pool is not None:
            pool.shutdown()

    if cfg.M % 2 == 1:
        global_params = aggregate([s.params for s in shards])
        history.append({"round": cfg.M, "event": "final-aggregate",
                        "shard_sizes_after": [len(s) for s in shards]})
        if on_interaction is not None:
            on_interaction(cfg.M, "final-aggregate", global_params, shards)
    if not np.all(np.isfinite(global_params.theta)):
        raise NumericError("non-finite parameters after training")
    return ExperimentResult(global_params, sched, metrics, history, totals, shards, decision_log)


def train_baseline(cfg: ExperimentConfig, dataset: Dataset) -> DenoiserParams:
    """Standalone single-model loop for ``M * E`` epochs with no treatment.

    Uses the same streams as shard 1 of :func:`run_experiment`, so the two
    agree bit for bit when the experiment has every toggle off.
    """
    from .control import plain_batch_step
    sched, params = model_setup(cfg, dataset.D)
    rng, _ = shard_rngs(cfg.seed, 1)
    X = dataset.pixels_of(np.sort(dataset.ids))
    adam = AdamConfig(lr=cfg.lr)
    for _ in range(cfg.M * cfg.E):
        perm = rng.permutation(len(X))
        for s in range(0, len(X), cfg.batch_size):
            params, _ = plain_batch_step(X[perm[s:s + cfg.batch_size]], params, sched, rng, adam)
    return params


def metrics_csv(metrics: list[dict], header: dict | None = None) -> str:
    cols = ["round", "shard", "mean_loss", "n_skipped", "n_augmented", "n_kept", "shard_size"]
    lines = []
    if header:
        lines.append("# " + ",".join(f"{k}={v}" for k, v in sorted(header.items())))
    lines.append(",".join(cols))
    for row in metrics:
        lines.append(",".join(format(row[c], ".17g") if isinstance(row[c], float) else str(row[c])
                              for c in cols))
    return "\n".join(lines) + "\n"


def shard_checkpoint_extra(shard: ShardState) -> dict:
    return {"shard": shard.shard_id, "bank": shard.bank.to_dict(),
            "skip_counts": {str(k): v for k, v in shard.skip_map.items()},
            "sample_ids": shard.sample_ids.tolist()}
