"""Built-in invariant suite and artifact header checks behind ``memshard verify``."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .control import ControlConfig, MemoryBank, controlled_batch_step
from .data import Dataset
from .diffusion import Arch, build_schedule, init_params, loss_gradient, per_sample_loss
from .ensemble import ShardState, aggregate, msr_redistribute
from .evaluation import ell_ratio, spectral_energy


def fd_max_rel_error(n_draws: int = 20, seed: int = 0, h: float = 1e-5, floor: float = 1e-6,
                     coords_per_draw: int = 8, output: str = "x0") -> float:
    """Worst relative error of the analytic gradient against central differences.

    Relative error is ``|fd - g| / max(|fd|, |g|, floor)``.
    """
    rng = np.random.default_rng([seed, 0xFD])
    sched = build_schedule(20, "cosine")
    arch = Arch(D=5, E_t=4, hidden=(6, 4), output=output)
    worst = 0.0
    for k in range(n_draws):
        p = init_params(arch, seed * 1000 + k)
        p.theta[...] += 0.1 * rng.standard_normal(p.theta.shape)
        x = rng.random(arch.D)
        t = int(rng.integers(1, sched.T + 1))
        eps = rng.standard_normal(arch.D)
        g = loss_gradient(x, t, eps, p, sched)
        for j in rng.choice(arch.n_params, size=coords_per_draw, replace=False):
            q = p.copy()
            q.theta[j] += h
            lp = per_sample_loss(x, t, eps, q, sched)
            q.theta[j] -= 2 * h
            lm = per_sample_loss(x, t, eps, q, sched)
            fd = (lp - lm) / (2 * h)
            worst = max(worst, abs(fd - g[j]) / max(abs(fd), abs(g[j]), floor))
    return worst


def _check_gradient():
    err = fd_max_rel_error()
    return err < 1e-4, f"max relative error {err:.2e}"


def _check_ema():
    worst = 0.0
    for k in (1, 5, 50):
        b = MemoryBank.zeros(3, 0.8)
        for _ in range(k):
            b.update(1, 0.7)
        worst = max(worst, abs(b.losses[1] - 0.7 * (1 - 0.8 ** k)))
    return worst < 1e-12, f"max deviation {worst:.1e}"


def _check_skip_invariance():
    sched = build_schedule(10, "cosine")
    p = init_params(Arch(D=4, E_t=4, hidden=(5,)), 0)
    bank = MemoryBank(np.full(10, 1e9), 0.8)
    res = controlled_batch_step(np.full((3, 4), 0.5), p, sched, bank, ControlConfig(warmup_steps=0),
                                None, np.random.default_rng(0))
    return res.params.equal(p) and not res.stepped, "all-skip batch left parameters unchanged"


def _check_aggregation():
    rng = np.random.default_rng(1)
    arch = Arch(D=3, E_t=2, hidden=(3,))
    models = [init_params(arch, i) for i in range(4)]
    for m in models:
        m.m[...] = rng.standard_normal(m.m.shape)
    a = aggregate(models)
    b = aggregate(models[::-1])
    same = aggregate([models[0]] * 5)
    ok = a.equal(b) and same.equal(models[0])
    return ok, "permutation invariant and idempotent"


def _check_msr():
    shards = [ShardState(k + 1, np.arange(k * 8, k * 8 + 8), np.arange(8)[::-1].copy()) for k in range(3)]
    out, moves = msr_redistribute(shards, 0.25)
    ids = np.sort(np.concatenate([s.sample_ids for s in out]))
    ok = np.array_equal(ids, np.arange(24)) and len(moves) == 6
    ok = ok and all(np.all(s.skip_counts == 0) for s in out)
    return ok, "samples conserved, counters reset"


def _check_ell():
    rng = np.random.default_rng(2)
    train = rng.random((20, 3))
    x = rng.random(3)
    j = int(np.argmin([np.linalg.norm(x - y) for y in train]))
    d = sorted(np.linalg.norm(train[j] - train[i]) for i in range(20) if i != j)
    want = np.linalg.norm(x - train[j]) / np.mean(d[:5])
    got = ell_ratio(x, train, 5)
    return abs(got - want) < 1e-12, f"deviation {abs(got - want):.1e}"


def _check_parseval():
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(50):
        img = rng.random((8, 8))
        worst = max(worst, abs(spectral_energy(img) - img.size * img.var()))
    return worst < 1e-10, f"max deviation {worst:.1e}"


CHECKS = {
    "gradient-oracle": _check_gradient,
    "ema-closed-form": _check_ema,
    "skip-invariance": _check_skip_invariance,
    "aggregation-algebra": _check_aggregation,
    "msr-conservation": _check_msr,
    "ell-ratio-oracle": _check_ell,
    "parseval": _check_parseval,
}


def run_invariants() -> list[tuple[str, bool, str]]:
    out = []
    for name, fn in CHECKS.items():
        try:
            ok, detail = fn()
        except Exception as exc:  # a crash is a failure, reported by name
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        out.append((name, bool(ok), detail))
    return out


def read_header(path: Path) -> dict:
    """Header of any artifact: JSON ``header`` key or a leading ``# k=v,...`` CSV line."""
    path = Path(path)
    text = path.read_text()
    if path.suffix == ".csv":
        first = text.split("\n", 1)[0]
        if not first.startswith("# "):
            return {}
        return dict(kv.split("=", 1) for kv in first[2:].split(","))
    obj = json.loads(text)
    return obj.get("header", {}) if isinstance(obj, dict) else {}


def check_pairs(dataset_path: Path | None = None, others: list[Path] = ()) -> list[tuple[str, bool, str]]:
    """Every artifact derived from the dataset must name its config hash and seed."""
    out = []
    if dataset_path is None:
        return out
    dh = read_header(dataset_path)
    want = (str(dh.get("config_hash")), str(dh.get("seed")))
    for p in others:
        h = read_header(p)
        if "data_hash" in h:
            got = (str(h.get("data_hash")), str(h.get("data_seed")))
        else:
            got = (str(h.get("config_hash")), str(h.get("seed")))
        out.append((f"header:{Path(p).name}", got == want,
                    f"data (hash, seed) {got} vs dataset {want}"))
    return out


def dataset_ok(ds: Dataset) -> tuple[bool, str]:
    ok = bool(np.all((ds.pixels >= 0) & (ds.pixels <= 1)))
    return ok, "pixels within [0, 1]"
