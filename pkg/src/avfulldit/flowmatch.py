"""Linear-path flow matching: noising, velocity targets, loss, AdamW, Euler sampling.

Time runs from t=0 (clean latent) to t=1 (pure noise).  The model regresses
the constant velocity ``eps - x0`` of the straight path; sampling integrates
from t=1 down to t=0 with ``x <- x - dt * v``.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .model import ModelWeights, null_condition, predict

DEFAULT_T_GRID = tuple(round(0.1 * k, 1) for k in range(1, 10))


@dataclass
class NoisySample:
    x0: np.ndarray
    eps: np.ndarray
    t: np.ndarray
    x_t: np.ndarray
    v_target: np.ndarray


@dataclass(frozen=True)
class LossWeights:
    lambda_v: float = 1.0
    lambda_a: float = 1.0

    def __post_init__(self):
        if self.lambda_v < 0 or self.lambda_a < 0:
            raise ValueError(f"loss weights must be non-negative, got {self}")
        if self.lambda_v == 0 and self.lambda_a == 0:
            raise ValueError("at least one loss weight must be positive")


@dataclass(frozen=True)
class GuidanceSpec:
    scale_video: float = 5.0
    scale_audio: float = 4.5

    def __post_init__(self):
        if self.scale_video < 0 or self.scale_audio < 0:
            raise ValueError(f"guidance scales must be >= 0, got {self}")


@dataclass
class Batch:
    x_v: np.ndarray
    x_a: np.ndarray
    c_v: np.ndarray
    c_a: np.ndarray

    def __len__(self):
        return self.x_v.shape[0]

    def take(self, idx) -> "Batch":
        return Batch(self.x_v[idx], self.x_a[idx], self.c_v[idx], self.c_a[idx])


def _expand_t(t, x: np.ndarray) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 0:
        return t
    return t.reshape(t.shape + (1,) * (x.ndim - t.ndim))


def make_noisy(x0, eps, t) -> NoisySample:
    """``x_t = (1 - t) x0 + t eps`` and ``v = eps - x0``; ``t`` is a scalar or one per row."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ValueError(f"x0 {x0.shape} and eps {eps.shape} differ in shape")
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 0) or np.any(t_arr > 1):
        raise ValueError("t must lie in [0, 1]")
    tb = _expand_t(t_arr, x0)
    return NoisySample(x0, eps, t_arr, (1.0 - tb) * x0 + tb * eps, eps - x0)


def joint_loss(pred_v, pred_a, target_v, target_a, w: LossWeights) -> tuple[T.Tensor, float, float]:
    """Weighted sum of per-modality mean squared errors.

    Returns the total as a tensor plus both components as floats; a missing
    modality (``pred_a is None``) contributes nothing and reports NaN.
    """
    total = None
    loss_v = loss_a = float("nan")
    if pred_v is not None:
        lv = T.mse(pred_v, target_v)
        loss_v = float(lv.data)
        total = T.scale(lv, w.lambda_v)
    if pred_a is not None:
        la = T.mse(pred_a, target_a)
        loss_a = float(la.data)
        term = T.scale(la, w.lambda_a)
        total = term if total is None else T.add(total, term)
    if total is None:
        raise ValueError("no predictions to score")
    return total, loss_v, loss_a


class AdamW:
    """Adaptive moments with decoupled weight decay (decay skips 1-d parameters)."""

    def __init__(self, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, T.Tensor]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name in sorted(params):
            p = params[name]
            if p.grad is None:
                continue
            g = p.grad
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if p.data.ndim >= 2 and self.weight_decay:
                p.data -= self.lr * self.weight_decay * p.data
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class LossRecord:
    step: int
    loss_v: float
    loss_a: float
    loss: float
    wall_ms: int = 0

    def format(self) -> str:
        """Deterministic log line; wall time is kept out so reruns compare bitwise."""
        return f"step={self.step} loss_v={self.loss_v!r} loss_a={self.loss_a!r} loss={self.loss!r}"

    @classmethod
    def parse(cls, line: str) -> "LossRecord":
        kv = dict(part.split("=", 1) for part in line.split())
        return cls(int(kv["step"]), float(kv["loss_v"]), float(kv["loss_a"]), float(kv["loss"]))


def uniform_t(rng: np.random.Generator, n: int) -> np.ndarray:
    return rng.uniform(0.0, 1.0, size=n)


def loss_on(weights: ModelWeights, batch: Batch, noisy_v: NoisySample, noisy_a: NoisySample,
            w: LossWeights) -> tuple[T.Tensor, float, float]:
    pred_v, pred_a = predict(weights, noisy_v.x_t, noisy_a.x_t, batch.c_v, batch.c_a, noisy_v.t)
    return joint_loss(pred_v, pred_a, noisy_v.v_target, noisy_a.v_target, w)


def draw_noisy(batch: Batch, rng: np.random.Generator,
               t_sampler: Callable = uniform_t) -> tuple[NoisySample, NoisySample]:
    t = t_sampler(rng, len(batch))
    eps_v = rng.standard_normal(batch.x_v.shape)
    eps_a = rng.standard_normal(batch.x_a.shape)
    return make_noisy(batch.x_v, eps_v, t), make_noisy(batch.x_a, eps_a, t)


def train_step(
    weights: ModelWeights,
    batch: Batch,
    rng: np.random.Generator,
    w: LossWeights,
    opt: AdamW,
    step: int = 0,
    t_sampler: Callable = uniform_t,
) -> LossRecord:
    """One optimiser update on ``batch``; ``weights`` are updated in place."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    start = time.perf_counter()
    noisy_v, noisy_a = draw_noisy(batch, rng, t_sampler)
    for p in weights.params.values():
        p.grad = None
    total, loss_v, loss_a = loss_on(weights, batch, noisy_v, noisy_a, w)
    T.backward(total)
    opt.step(weights.params)
    wall = int(round((time.perf_counter() - start) * 1000))
    return LossRecord(step, loss_v, loss_a, float(total.data), wall)


# ------------------------------------------------------------------ sampling


def cfg_combine(v_pos: np.ndarray, v_neg: np.ndarray | None, s: float) -> np.ndarray:
    """``v_neg + s (v_pos - v_neg)``; s == 1 returns the conditional branch untouched."""
    if s == 1.0 or v_neg is None:
        return v_pos
    if s == 0.0:
        return v_neg
    return v_neg + s * (v_pos - v_neg)


def euler_sample(velocity_fn: Callable, x_v: np.ndarray | None, x_a: np.ndarray | None,
                 steps: int) -> tuple[np.ndarray | None, np.ndarray | None]:
    """Integrate ``dx/dt = v`` from t=1 to t=0 in ``steps`` uniform Euler steps."""
    if steps < 1:
        raise ValueError("need at least one sampling step")
    grid = np.linspace(1.0, 0.0, steps + 1)
    for i in range(steps):
        t, dt = grid[i], grid[i] - grid[i + 1]
        v_v, v_a = velocity_fn(x_v, x_a, t)
        if x_v is not None:
            x_v = x_v - dt * v_v
        if x_a is not None:
            x_a = x_a - dt * v_a
    return x_v, x_a


def initial_noise(weights: ModelWeights, batch: int, seed) -> tuple[np.ndarray, np.ndarray]:
    """Starting noise; ``seed`` is an int (one stream) or one seed per batch row.

    Video noise is drawn before audio noise from each stream, so a video-only
    model and a joint model given the same seed start from the same video noise.
    """
    cfg = weights.config
    shape_v, shape_a = (cfg.frames_v, cfg.lat_v), (cfg.frames_a, cfg.lat_a)
    if np.ndim(seed) == 0:
        rng = np.random.default_rng(seed)
        return rng.standard_normal((batch,) + shape_v), rng.standard_normal((batch,) + shape_a)
    seeds = list(seed)
    if len(seeds) != batch:
        raise ValueError(f"{len(seeds)} seeds for a batch of {batch}")
    xs_v, xs_a = [], []
    for s in seeds:
        rng = np.random.default_rng(s)
        xs_v.append(rng.standard_normal(shape_v))
        xs_a.append(rng.standard_normal(shape_a))
    return np.stack(xs_v), np.stack(xs_a)


def guided_velocity(weights: ModelWeights, c_v, c_a, guidance: GuidanceSpec,
                    neg_v=None, neg_a=None) -> Callable:
    c_v = np.asarray(c_v, dtype=np.int64)
    c_a = np.asarray(c_a, dtype=np.int64)
    b = c_v.shape[0]
    nv, na = null_condition(weights.config, b)
    neg_v = nv if neg_v is None else np.asarray(neg_v, dtype=np.int64)
    neg_a = na if neg_a is None else np.asarray(neg_a, dtype=np.int64)
    s_v = guidance.scale_video if weights.kind != "audio" else 1.0
    s_a = guidance.scale_audio if weights.kind != "video" else 1.0
    need_neg = s_v != 1.0 or s_a != 1.0

    def fn(x_v, x_a, t):
        with T.no_grad():
            pv, pa = predict(weights, x_v, x_a, c_v, c_a, t)
            pv = None if pv is None else pv.data
            pa = None if pa is None else pa.data
            qv = qa = None
            if need_neg:
                qv, qa = predict(weights, x_v, x_a, neg_v, neg_a, t)
                qv = None if qv is None else qv.data
                qa = None if qa is None else qa.data
        out_v = None if pv is None else cfg_combine(pv, qv, s_v)
        out_a = None if pa is None else cfg_combine(pa, qa, s_a)
        return out_v, out_a

    return fn


def sample(weights: ModelWeights, c_v, c_a, guidance: GuidanceSpec = GuidanceSpec(), steps: int = 50,
           seed=0, neg_v=None, neg_a=None) -> tuple[np.ndarray | None, np.ndarray | None]:
    """Generate latents for each row of the descriptor id arrays ``c_v``/``c_a``."""
    b = np.asarray(c_v).shape[0]
    x_v, x_a = initial_noise(weights, b, seed)
    if weights.kind == "video":
        x_a = None
    elif weights.kind == "audio":
        x_v = None
    fn = guided_velocity(weights, c_v, c_a, guidance, neg_v, neg_a)
    return euler_sample(fn, x_v, x_a, steps)


# ---------------------------------------------------------------- validation


def validation_pairs(clip_ids: Sequence[int], x_v: np.ndarray, x_a: np.ndarray,
                     t_grid: Sequence[float] = DEFAULT_T_GRID) -> tuple[NoisySample, NoisySample, np.ndarray]:
    """Fixed noisy inputs for every (clip, t) pair; noise depends only on clip id and t index."""
    rows, eps_v, eps_a, ts = [], [], [], []
    for i, cid in enumerate(clip_ids):
        for k, t in enumerate(t_grid):
            rng = np.random.default_rng([int(cid), k, 7919])
            eps_v.append(rng.standard_normal(x_v.shape[1:]))
            eps_a.append(rng.standard_normal(x_a.shape[1:]))
            rows.append(i)
            ts.append(t)
    rows = np.array(rows)
    t = np.array(ts)
    return make_noisy(x_v[rows], np.stack(eps_v), t), make_noisy(x_a[rows], np.stack(eps_a), t), rows


def validation_errors(model, clip_ids, batch: Batch, t_grid=DEFAULT_T_GRID,
                      chunk: int = 288) -> tuple[np.ndarray, np.ndarray]:
    """Per-clip velocity MSE averaged over the fixed t grid, for video and audio.

    ``model`` is a ``ModelWeights`` or a callable ``(x_v, x_a, c_v, c_a, t) ->
    (v_v, v_a)`` on numpy arrays.  A modality the model lacks yields NaN.
    """
    if len(batch) == 0:
        raise ValueError("empty evaluation set")
    nv, na, rows = validation_pairs(clip_ids, batch.x_v, batch.x_a, t_grid)
    c_v, c_a = batch.c_v[rows], batch.c_a[rows]
    if isinstance(model, ModelWeights):
        outs_v, outs_a = [], []
        with T.no_grad():
            for s in range(0, len(rows), chunk):
                sl = slice(s, s + chunk)
                ov, oa = predict(model, nv.x_t[sl], na.x_t[sl], c_v[sl], c_a[sl], nv.t[sl])
                outs_v.append(None if ov is None else ov.data)
                outs_a.append(None if oa is None else oa.data)
        pv = None if outs_v[0] is None else np.concatenate(outs_v)
        pa = None if outs_a[0] is None else np.concatenate(outs_a)
    else:
        pv, pa = model(nv.x_t, na.x_t, c_v, c_a, nv.t)
    n_clips, n_t = len(batch), len(t_grid)

    def per_clip(pred, target):
        if pred is None:
            return np.full(n_clips, np.nan)
        err = np.mean((pred - target) ** 2, axis=tuple(range(1, target.ndim)))
        return err.reshape(n_clips, n_t).mean(axis=1)

    return per_clip(pv, nv.v_target), per_clip(pa, na.v_target)


def validation_loss(model, clip_ids, batch: Batch, t_grid=DEFAULT_T_GRID, chunk: int = 288) -> tuple[float, float]:
    """Mean video and audio velocity MSE over every (clip, t) pair."""
    err_v, err_a = validation_errors(model, clip_ids, batch, t_grid, chunk)
    return float(np.mean(err_v)), float(np.mean(err_a))
