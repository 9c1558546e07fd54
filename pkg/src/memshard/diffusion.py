"""Minimal DDPM machinery on flat pixel vectors.

Noise schedule, forward noising, the epsilon-prediction loss with exact
backpropagation through a small MLP, an Adam optimizer and the ancestral
sampler.

The noise predictor has two output heads. ``eps`` returns the raw MLP output.
``x0`` (the default) feeds the MLP a variance-normalized ``x_t``, reads its
output ``F`` as a clean-image estimate ``x0 = mu + s * F`` and converts that to
``eps_hat = (x_t - sqrt(ab) * x0) / sqrt(1 - ab)``. Both heads are trained on
the same epsilon loss; the second is far easier for a small MLP to fit at low
noise levels, where an epsilon head must represent a ``1/sigma`` gain. Everything runs in float64 numpy and is a pure function of its
arguments; randomness always comes in through an explicit generator or seed.

Timestep convention: ``alpha_bar[0] == 1`` is clean data and training draws
``t`` from ``{1, ..., T}``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Any

import numpy as np

from .errors import InvalidConfigError, NumericError

SCHEDULE_KINDS = ("linear-beta", "cosine")
OUTPUT_HEADS = ("x0", "eps")

# Pixel statistics assumed by the x0 head: data roughly in [0, 1].
DATA_MEAN = 0.5
DATA_STD = 0.5
_SIGMA_FLOOR = 1e-12

# Terminal alpha_bar must not exceed this; a larger final beta is forced otherwise.
ALPHA_BAR_TERMINAL_MAX = 1e-4
_ALPHA_BAR_TERMINAL_TARGET = 0.5e-4
_BETA_MAX = 0.9999


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    kind: str
    beta: np.ndarray  # beta[s - 1] is the variance of step s, s in 1..T
    alpha_bar: np.ndarray  # length T + 1, alpha_bar[0] == 1

    @property
    def alpha(self) -> np.ndarray:
        """Per-step ``1 - beta``, aligned with ``beta``."""
        return 1.0 - self.beta


def build_schedule(T: int = 100, schedule_kind: str = "linear-beta",
                   beta_start: float = 1e-4, beta_end: float | None = None) -> NoiseSchedule:
    """Build the cumulative noise table for ``T`` steps.

    ``linear-beta`` interpolates beta from ``beta_start`` to ``beta_end``; the
    default end point is ``0.02 * 1000 / T`` so that T=1000 reproduces the usual
    DDPM table and T=100 runs from 1e-4 to 0.2. ``cosine`` is the squared-cosine
    schedule of improved DDPM. In both cases the last beta is raised if needed
    so that ``alpha_bar[T] <= 1e-4``.
    """
    if not isinstance(T, (int, np.integer)) or T < 1:
        raise InvalidConfigError(f"T must be a positive integer, got {T!r}")
    T = int(T)
    if schedule_kind == "linear-beta":
        if beta_end is None:
            beta_end = min(0.02 * 1000.0 / T, _BETA_MAX)
        beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    elif schedule_kind == "cosine":
        s = 0.008
        grid = np.arange(T + 1, dtype=np.float64) / T
        f = np.cos((grid + s) / (1.0 + s) * math.pi / 2.0) ** 2
        ab = f / f[0]
        beta = 1.0 - ab[1:] / ab[:-1]
    else:
        raise InvalidConfigError(f"unknown schedule kind {schedule_kind!r}; expected one of {SCHEDULE_KINDS}")

    beta = np.clip(beta, 1e-8, _BETA_MAX)
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - beta)])
    if alpha_bar[T] > ALPHA_BAR_TERMINAL_MAX:
        beta[T - 1] = 1.0 - _ALPHA_BAR_TERMINAL_TARGET / alpha_bar[T - 1]
        alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - beta)])
    beta.setflags(write=False)
    alpha_bar.setflags(write=False)
    return NoiseSchedule(T=T, kind=schedule_kind, beta=beta, alpha_bar=alpha_bar)


def forward_noise(x: np.ndarray, t, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Return ``sqrt(alpha_bar_t) * x + sqrt(1 - alpha_bar_t) * eps``.

    ``x`` and ``eps`` are ``(D,)`` or ``(B, D)``; ``t`` is a scalar or ``(B,)``.
    """
    t = np.asarray(t)
    if np.any(t < 0) or np.any(t > sched.T):
        raise IndexError(f"timestep out of range [0, {sched.T}]: {t}")
    ab = sched.alpha_bar[t]
    if ab.ndim == 1:
        ab = ab[:, None]
    return np.sqrt(ab) * x + np.sqrt(1.0 - ab) * eps


# ---------------------------------------------------------------------------
# Network


@dataclass(frozen=True)
class Arch:
    D: int
    E_t: int = 32
    hidden: tuple[int, ...] = (128, 128)
    output: str = "x0"

    def __post_init__(self):
        if self.D < 1 or self.E_t < 2 or self.E_t % 2:
            raise InvalidConfigError(f"invalid architecture {self}")
        if self.output not in OUTPUT_HEADS:
            raise InvalidConfigError(f"unknown output head {self.output!r}; expected one of {OUTPUT_HEADS}")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.D + self.E_t, *self.hidden, self.D)

    def layer_shapes(self) -> list[tuple[int, int]]:
        w = self.widths
        return [(w[i], w[i + 1]) for i in range(len(w) - 1)]

    @property
    def n_params(self) -> int:
        return sum(a * b + b for a, b in self.layer_shapes())

    def to_dict(self) -> dict:
        return {"D": self.D, "E_t": self.E_t, "hidden": list(self.hidden), "output": self.output}


@dataclass
class DenoiserParams:
    """Flat MLP parameter vector plus Adam moment buffers.

    Layout is ``W1, b1, W2, b2, ...`` with each ``W`` stored row-major as
    ``(fan_in, fan_out)``.
    """

    arch: Arch
    theta: np.ndarray
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    def __post_init__(self):
        n = self.arch.n_params
        for name in ("theta", "m", "v"):
            arr = getattr(self, name)
            if arr.shape != (n,):
                raise ValueError(f"{name} has shape {arr.shape}, expected ({n},)")

    def layers(self, vec: np.ndarray | None = None) -> list[tuple[np.ndarray, np.ndarray]]:
        """Views ``(W, b)`` into ``vec`` (default: ``theta``)."""
        vec = self.theta if vec is None else vec
        out, off = [], 0
        for a, b in self.arch.layer_shapes():
            W = vec[off:off + a * b].reshape(a, b)
            off += a * b
            out.append((W, vec[off:off + b]))
            off += b
        return out

    def copy(self) -> "DenoiserParams":
        return DenoiserParams(self.arch, self.theta.copy(), self.m.copy(), self.v.copy(), self.step)

    def equal(self, other: "DenoiserParams") -> bool:
        """Bit-exact equality of parameters, optimizer state and step counter."""
        return (self.arch == other.arch and self.step == other.step
                and np.array_equal(self.theta, other.theta)
                and np.array_equal(self.m, other.m)
                and np.array_equal(self.v, other.v))


def init_params(arch: Arch, seed: int) -> DenoiserParams:
    """Gaussian fan-in scaled weights, zero biases, fresh moments."""
    rng = np.random.default_rng([int(seed), 0x5EED])
    theta = np.zeros(arch.n_params)
    p = DenoiserParams(arch, theta, np.zeros_like(theta), np.zeros_like(theta), 0)
    for W, _ in p.layers():
        W[...] = rng.standard_normal(W.shape) / math.sqrt(W.shape[0])
    return p


def time_embedding(t, width: int) -> np.ndarray:
    """Sinusoidal embedding ``[sin(t f_k), cos(t f_k)]`` with geometric frequencies."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = width // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _head(arch: Arch, x_t: np.ndarray, t: np.ndarray, sched: NoiseSchedule | None):
    """Input scaling and the affine map ``eps_hat = a + c * F`` of the output head."""
    if arch.output == "eps":
        return x_t, 0.0, 1.0
    if sched is None:
        raise InvalidConfigError("the x0 output head needs the noise schedule")
    ab = sched.alpha_bar[t][:, None]
    root_ab = np.sqrt(ab)
    sigma = np.maximum(np.sqrt(1.0 - ab), _SIGMA_FLOOR)
    x_in = (x_t - root_ab * DATA_MEAN) / np.sqrt(ab * DATA_STD ** 2 + 1.0 - ab)
    return x_in, (x_t - root_ab * DATA_MEAN) / sigma, -root_ab * DATA_STD / sigma


def _forward(params: DenoiserParams, x_t: np.ndarray, t: np.ndarray, sched: NoiseSchedule | None):
    x_in, a, c = _head(params.arch, x_t, t, sched)
    h = np.concatenate([x_in, time_embedding(t, params.arch.E_t)], axis=1)
    inputs, pre = [], []
    layers = params.layers()
    for i, (W, b) in enumerate(layers):
        with np.errstate(over="ignore", invalid="ignore"):
            z = h @ W + b
        if not np.all(np.isfinite(z)):
            raise NumericError(f"non-finite activations in layer {i}", layer=i)
        inputs.append(h)
        pre.append(z)
        h = z if i == len(layers) - 1 else z * _sigmoid(z)
    return a + c * h, c, (inputs, pre)


def predict_noise(params: DenoiserParams, x_t: np.ndarray, t, sched: NoiseSchedule | None = None) -> np.ndarray:
    """Noise estimate for a batch ``(B, D)`` (or a single ``(D,)`` vector)."""
    single = x_t.ndim == 1
    x_t = np.atleast_2d(x_t)
    t = np.broadcast_to(np.asarray(t, dtype=np.int64), (x_t.shape[0],))
    out, _, _ = _forward(params, x_t, t, sched)
    return out[0] if single else out


def _as_batch(x, t, eps):
    single = np.ndim(x) == 1
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    eps = np.atleast_2d(np.asarray(eps, dtype=np.float64))
    t = np.broadcast_to(np.asarray(t, dtype=np.int64), (x.shape[0],))
    return single, x, t, eps


def per_sample_loss(x, t, eps, params: DenoiserParams, sched: NoiseSchedule):
    """``||eps - eps_theta(x_t, t)||^2`` per sample (scalar for a single sample)."""
    single, x, t, eps = _as_batch(x, t, eps)
    out, _, _ = _forward(params, forward_noise(x, t, eps, sched), t, sched)
    losses = np.sum((eps - out) ** 2, axis=1)
    return float(losses[0]) if single else losses


def loss_and_grad(x, t, eps, params: DenoiserParams, sched: NoiseSchedule,
                  weights: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample losses and the gradient of ``sum_i weights_i * loss_i``.

    With ``weights=None`` every sample has weight 1.
    """
    _, x, t, eps = _as_batch(x, t, eps)
    out, c, (inputs, pre) = _forward(params, forward_noise(x, t, eps, sched), t, sched)
    resid = eps - out
    losses = np.sum(resid ** 2, axis=1)
    dz = -2.0 * resid * c
    if weights is not None:
        dz = dz * np.asarray(weights, dtype=np.float64)[:, None]
    grad = np.empty_like(params.theta)
    layers = params.layers()
    grads = params.layers(grad)
    for i in range(len(layers) - 1, -1, -1):
        W, _ = layers[i]
        gW, gb = grads[i]
        np.matmul(inputs[i].T, dz, out=gW)
        gb[...] = dz.sum(axis=0)
        if i:
            z = pre[i - 1]
            s = _sigmoid(z)
            dz = (dz @ W.T) * (s * (1.0 + z * (1.0 - s)))
    if not np.all(np.isfinite(grad)):
        raise NumericError("non-finite gradient")
    return losses, grad


def loss_gradient(x, t, eps, params: DenoiserParams, sched: NoiseSchedule) -> np.ndarray:
    """Exact gradient of the loss w.r.t. the flat parameter vector.

    For a batch this is the gradient of the summed loss.
    """
    return loss_and_grad(x, t, eps, params, sched)[1]


def per_sample_gradients(x, t, eps, params: DenoiserParams, sched: NoiseSchedule):
    """Losses ``(B,)`` and per-sample gradients ``(B, n_params)``."""
    _, x, t, eps = _as_batch(x, t, eps)
    out, c, (inputs, pre) = _forward(params, forward_noise(x, t, eps, sched), t, sched)
    resid = eps - out
    losses = np.sum(resid ** 2, axis=1)
    B = x.shape[0]
    grads = np.empty((B, params.theta.size))
    layers = params.layers()
    dz = -2.0 * resid * c
    off_end = params.theta.size
    for i in range(len(layers) - 1, -1, -1):
        W, b = layers[i]
        fan_in, fan_out = W.shape
        b_off = off_end - fan_out
        w_off = b_off - fan_in * fan_out
        grads[:, b_off:off_end] = dz
        grads[:, w_off:b_off] = np.einsum("bi,bj->bij", inputs[i], dz).reshape(B, -1)
        off_end = w_off
        if i:
            z = pre[i - 1]
            s = _sigmoid(z)
            dz = (dz @ W.T) * (s * (1.0 + z * (1.0 - s)))
    if not np.all(np.isfinite(grads)):
        raise NumericError("non-finite gradient")
    return losses, grads


# ---------------------------------------------------------------------------
# Optimizer


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_opt: float = 1e-8


def optimizer_step(params: DenoiserParams, mean_gradient: np.ndarray,
                   hyper: AdamConfig = AdamConfig()) -> DenoiserParams:
    """One bias-corrected Adam update. Returns a new ``DenoiserParams``."""
    g = np.asarray(mean_gradient, dtype=np.float64)
    if g.shape != params.theta.shape:
        raise ValueError(f"gradient shape {g.shape} does not match parameters {params.theta.shape}")
    if not np.all(np.isfinite(g)):
        raise NumericError("non-finite gradient passed to optimizer")
    step = params.step + 1
    m = hyper.beta1 * params.m + (1.0 - hyper.beta1) * g
    v = hyper.beta2 * params.v + (1.0 - hyper.beta2) * (g * g)
    m_hat = m / (1.0 - hyper.beta1 ** step)
    v_hat = v / (1.0 - hyper.beta2 ** step)
    theta = params.theta - hyper.lr * m_hat / (np.sqrt(v_hat) + hyper.eps_opt)
    return DenoiserParams(params.arch, theta, m, v, step)


# ---------------------------------------------------------------------------
# Sampling


def sample_images(params: DenoiserParams, sched: NoiseSchedule, n: int, rng_seed,
                  x_init: np.ndarray | None = None) -> np.ndarray:
    """Ancestral DDPM sampling with the posterior variance ``beta_tilde``.

    Returns an ``(n, D)`` array clipped to [0, 1] after the final step only.
    ``x_init`` overrides the starting noise ``x_T``.
    """
    D = params.arch.D
    if n <= 0:
        return np.zeros((0, D))
    rng = np.random.default_rng(rng_seed)
    x = rng.standard_normal((n, D)) if x_init is None else np.array(x_init, dtype=np.float64)
    ab = sched.alpha_bar
    for t in range(sched.T, 0, -1):
        beta_t = sched.beta[t - 1]
        eps_hat, _, _ = _forward(params, x, np.full(n, t), sched)
        x = (x - beta_t / math.sqrt(1.0 - ab[t]) * eps_hat) / math.sqrt(1.0 - beta_t)
        if t > 1:
            var = beta_t * (1.0 - ab[t - 1]) / (1.0 - ab[t])
            x = x + math.sqrt(var) * rng.standard_normal((n, D))
    return np.clip(x, 0.0, 1.0)


# ---------------------------------------------------------------------------
# Checkpoints


def _fmt_floats(arr: np.ndarray) -> str:
    return "[" + ",".join(format(float(v), ".17g") for v in arr) + "]"


def checkpoint_dict(params: DenoiserParams, sched: NoiseSchedule) -> dict[str, Any]:
    return {
        "version": 1,
        "arch": params.arch.to_dict(),
        "sched": {"T": sched.T, "kind": sched.kind},
        "params": params.theta,
        "opt_m": params.m,
        "opt_v": params.v,
        "step": params.step,
    }


def dumps_checkpoint(params: DenoiserParams, sched: NoiseSchedule, extra: dict | None = None) -> str:
    """Serialize to JSON with 17 significant digits per float."""
    obj = checkpoint_dict(params, sched)
    if extra:
        obj.update(extra)
    parts = []
    for key, val in obj.items():
        if isinstance(val, np.ndarray):
            body = _fmt_floats(val)
        else:
            body = json.dumps(val, sort_keys=True)
        parts.append(f"{json.dumps(key)}:{body}")
    return "{" + ",".join(parts) + "}\n"


def loads_checkpoint(text: str) -> tuple[DenoiserParams, NoiseSchedule, dict]:
    """Inverse of :func:`dumps_checkpoint`; returns the unknown keys as a dict."""
    obj = json.loads(text)
    if obj.get("version") != 1:
        raise InvalidConfigError(f"unsupported checkpoint version {obj.get('version')!r}")
    a = obj["arch"]
    arch = Arch(D=int(a["D"]), E_t=int(a["E_t"]), hidden=tuple(a["hidden"]), output=a.get("output", "eps"))
    sched = build_schedule(int(obj["sched"]["T"]), obj["sched"]["kind"])
    params = DenoiserParams(
        arch,
        np.array(obj["params"], dtype=np.float64),
        np.array(obj["opt_m"], dtype=np.float64),
        np.array(obj["opt_v"], dtype=np.float64),
        int(obj["step"]),
    )
    known = {"version", "arch", "sched", "params", "opt_m", "opt_v", "step"}
    return params, sched, {k: v for k, v in obj.items() if k not in known}
