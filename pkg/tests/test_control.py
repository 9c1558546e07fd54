import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from memshard.augment import AugmentConfig
from memshard.control import (NOT_CALIBRATED, ControlConfig, MemoryBank, Verdict, aug_strength,
                              bank_update, classify, controlled_batch_step, loss_ratio)
from memshard.diffusion import Arch, build_schedule, init_params, loss_gradient, optimizer_step
from memshard.errors import InvalidConfigError, NumericError


def cfg(**kw):
    kw.setdefault("warmup_steps", 0)
    return ControlConfig(**kw)


# -- memory bank --------------------------------------------------------------

def test_eta_one_leaves_bank_unchanged():
    b = MemoryBank(np.array([0.3, 0.7]), eta=1.0)
    assert np.array_equal(bank_update(b, 1, 5.0).losses, [0.3, 0.7])


def test_bank_update_hand_value():
    b = MemoryBank(np.array([0.0, 1.0, 0.0]), 0.8)
    out = bank_update(b, 1, 0.5)
    assert out.losses[1] == pytest.approx(0.9, abs=1e-15)
    assert out.losses[0] == 0.0 and out.losses[2] == 0.0
    assert b.losses[1] == 1.0  # functional form leaves the input alone


@pytest.mark.parametrize("k", [1, 2, 5, 50])
def test_bank_geometric_closed_form(k):
    b = MemoryBank.zeros(4, 0.8)
    for _ in range(k):
        b = bank_update(b, 2, 1.7)
    assert abs(b.losses[2] - 1.7 * (1 - 0.8 ** k)) <= 1e-12


@pytest.mark.parametrize("bad", [-0.1, math.inf, math.nan])
def test_bank_rejects_invalid_loss(bad):
    with pytest.raises(NumericError):
        bank_update(MemoryBank.zeros(3), 0, bad)


def test_bank_serialization():
    b = MemoryBank(np.array([0.1, 0.25]), 0.8)
    assert MemoryBank.from_dict(b.to_dict()).losses.tolist() == [0.1, 0.25]


# -- ratio and classification -------------------------------------------------

def test_self_ratio_is_one():
    assert loss_ratio(MemoryBank(np.array([0.37])), 0, 0.37) == 1.0


def test_ratio_hand_value():
    assert loss_ratio(MemoryBank(np.array([0.5])), 0, 0.2) == pytest.approx(0.4)


def test_uncalibrated_sentinel_forces_keep():
    r = loss_ratio(MemoryBank.zeros(2), 1, 0.3)
    assert r is NOT_CALIBRATED
    assert classify(r, ControlConfig()).verdict is Verdict.KEEP


@pytest.mark.parametrize("r,verdict", [(0.4, Verdict.SKIP), (0.6, Verdict.AUGMENT), (1.0, Verdict.KEEP),
                                       (0.5, Verdict.AUGMENT), (0.85, Verdict.KEEP)])
def test_classify_default_thresholds(r, verdict):
    d = classify(r, ControlConfig(lam=0.5, R=1.7))
    assert d.verdict is verdict
    assert (d.strength is not None) == (verdict is Verdict.AUGMENT)


def test_infinite_range_augments_everything_above_threshold():
    d = classify(50.0, ControlConfig(lam=0.5, R=math.inf))
    assert d.verdict is Verdict.AUGMENT


def test_strength_hand_values():
    assert aug_strength(0.5, 0.5, 5) == 1.0
    assert aug_strength(0.6, 0.5, 5) == pytest.approx(0.36787944117144233, rel=1e-12)
    assert aug_strength(0.85, 0.5, 5) == pytest.approx(0.0301973834223185, rel=1e-12)


@pytest.mark.parametrize("kw", [{"lam": 0}, {"R": 1.0}, {"A": 0}, {"warmup_steps": -1}, {"eta": 0}])
def test_control_config_invariants(kw):
    with pytest.raises(InvalidConfigError):
        ControlConfig(**kw)


def test_control_config_json_names():
    c = ControlConfig(lam=0.4, R=math.inf)
    assert c.to_dict()["lambda"] == 0.4
    assert ControlConfig.from_dict(c.to_dict()) == c


_ORDER = {Verdict.SKIP: 0, Verdict.AUGMENT: 1, Verdict.KEEP: 2}


@given(lt=st.floats(1e-6, 1e3), a=st.floats(0, 1e4), b=st.floats(0, 1e4),
       lam=st.floats(0.05, 2.0), R=st.floats(1.01, 5.0))
def test_verdict_monotone_in_loss(lt, a, b, lam, R):
    bank = MemoryBank(np.array([lt]))
    c = ControlConfig(lam=lam, R=R)
    lo, hi = sorted((a, b))
    assert _ORDER[classify(loss_ratio(bank, 0, lo), c).verdict] <= _ORDER[classify(loss_ratio(bank, 0, hi), c).verdict]


@given(r1=st.floats(0, 20), r2=st.floats(0, 20), lam=st.floats(0.05, 3))
def test_strength_bounds_and_decay(r1, r2, lam):
    s1, s2 = aug_strength(r1, lam), aug_strength(r2, lam)
    assert 0.0 <= s1 <= 1.0
    if abs(r1 - lam) < abs(r2 - lam):
        assert s1 >= s2
    if abs(r1 - lam) < abs(r2 - lam) and s2 > 0:
        assert s1 > s2 or s1 == s2 == 1.0 or abs(abs(r1 - lam) - abs(r2 - lam)) < 1e-12 * lam


def test_strength_positive_in_augment_band():
    c = ControlConfig()
    for r in np.linspace(c.lam, c.R * c.lam, 50, endpoint=False):
        assert 0 < aug_strength(r, c.lam, c.A) <= 1


# -- controlled batch step ----------------------------------------------------

@pytest.fixture
def setup():
    sched = build_schedule(10, "cosine")
    p = init_params(Arch(D=4, E_t=4, hidden=(6,)), 3)
    X = np.random.default_rng(1).random((5, 4))
    return sched, p, X


def test_all_skip_batch_leaves_params_and_optimizer_untouched(setup):
    sched, p, X = setup
    bank = MemoryBank(np.full(sched.T, 1e9))
    res = controlled_batch_step(X, p, sched, bank, cfg(), AugmentConfig(), np.random.default_rng(0))
    assert all(d.verdict is Verdict.SKIP for d in res.decisions)
    assert res.params.equal(p) and not res.stepped


def test_warmup_keeps_everything(setup):
    sched, p, X = setup
    bank = MemoryBank(np.full(sched.T, 1e9))
    res = controlled_batch_step(X, p, sched, bank, ControlConfig(warmup_steps=10), AugmentConfig(),
                                np.random.default_rng(0), step=9)
    assert all(d.verdict is Verdict.KEEP for d in res.decisions)
    assert res.stepped


def test_single_keep_sample_equals_plain_optimizer_step(setup):
    sched, p, X = setup
    rng = np.random.default_rng(7)
    probe = np.random.default_rng(7)
    t = probe.integers(1, sched.T + 1, size=1)
    eps = probe.standard_normal((1, 4))
    res = controlled_batch_step(X[:1], p, sched, MemoryBank.zeros(sched.T), cfg(), AugmentConfig(), rng)
    assert res.decisions[0].verdict is Verdict.KEEP
    want = optimizer_step(p, loss_gradient(X[:1], t, eps, p, sched))
    assert res.params.equal(want)


def test_bank_reads_value_before_own_update(setup):
    sched, p, X = setup
    rng = np.random.default_rng(0)
    # draw once to learn the timesteps, then force all samples onto one timestep
    batch = np.repeat(X[:1], 4, axis=0)

    class FixedT:
        def __init__(self, g):
            self.g = g

        def integers(self, lo, hi, size):
            return np.full(size, 3)

        def standard_normal(self, shape):
            return np.zeros(shape) + 0.5

        def __getattr__(self, name):
            return getattr(self.g, name)

    bank = MemoryBank.zeros(sched.T)
    res = controlled_batch_step(batch, p, sched, bank, cfg(), None, FixedT(rng))
    raw = res.decisions[0].raw_loss
    assert res.decisions[0].ratio is NOT_CALIBRATED
    # second sample sees exactly one update with the same loss
    assert res.decisions[1].ratio == pytest.approx(raw / (0.2 * raw), rel=1e-12)
    expected = 0.0
    for d in res.decisions:
        expected = 0.8 * expected + 0.2 * d.raw_loss
    assert bank.losses[2] == pytest.approx(expected, rel=1e-14)


def test_raw_losses_enter_the_bank_regardless_of_treatment(setup):
    sched, p, X = setup
    base = MemoryBank(np.full(sched.T, 1.0))
    banks = []
    for agc, aug in [(True, AugmentConfig(magnitude=10)), (True, None), (False, None)]:
        b = base.copy()
        controlled_batch_step(X, p, sched, b, cfg(R=1e6, lam=1e-3), aug, np.random.default_rng(4), agc=agc)
        banks.append(b.losses)
    assert np.array_equal(banks[0], banks[1]) and np.array_equal(banks[1], banks[2])


def test_taa_off_turns_augment_into_keep(setup):
    sched, p, X = setup
    c = cfg(lam=1e-3, R=1e9, A=1e-9)
    bank = MemoryBank(np.full(sched.T, 1.0))
    on = controlled_batch_step(X, p, sched, bank.copy(), c, AugmentConfig(magnitude=10), np.random.default_rng(2))
    off = controlled_batch_step(X, p, sched, bank.copy(), c, None, np.random.default_rng(2))
    assert {d.verdict for d in on.decisions} == {Verdict.AUGMENT}
    assert {d.verdict for d in off.decisions} == {Verdict.KEEP}
    assert [d.raw_loss for d in on.decisions] == [d.raw_loss for d in off.decisions]
    assert not on.params.equal(off.params)


def test_empty_batch_rejected(setup):
    sched, p, _ = setup
    with pytest.raises(InvalidConfigError):
        controlled_batch_step(np.zeros((0, 4)), p, sched, MemoryBank.zeros(sched.T), cfg(), None,
                              np.random.default_rng(0))


@settings(max_examples=25, deadline=None)
@given(level=st.floats(0.0, 3.0), seed=st.integers(0, 10_000))
def test_skipped_samples_contribute_no_gradient(level, seed):
    sched = build_schedule(10, "cosine")
    p = init_params(Arch(D=4, E_t=4, hidden=(6,)), 0)
    X = np.random.default_rng(seed).random((6, 4))
    bank = MemoryBank(np.full(sched.T, 3.0 + level))
    res = controlled_batch_step(X, p, sched, bank, cfg(R=1e9), None, np.random.default_rng(seed))
    kept = [i for i, d in enumerate(res.decisions) if d.verdict is not Verdict.SKIP]
    probe = np.random.default_rng(seed)
    t = probe.integers(1, sched.T + 1, size=6)
    eps = probe.standard_normal((6, 4))
    if kept:
        g = loss_gradient(X[kept], t[kept], eps[kept], p, sched) / len(kept)
        assert res.params.equal(optimizer_step(p, g))
    else:
        assert res.params.equal(p)
