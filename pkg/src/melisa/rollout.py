"""One-call-per-block autoregressive forecasting with a sliding context."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from .backbone import DenoiserNet, assemble_input


@dataclass(frozen=True)
class RolloutConfig:
    context: int = 2
    horizon: int = 40
    ensemble: int = 1
    seed: int = 42
    t: float = 1.0
    r: float = 0.0

    def check(self, window: int) -> int:
        """Validate against a network window; returns the block size S."""
        if not 1 <= self.context < window:
            raise ValueError(f"context {self.context} must be in [1, {window - 1}]")
        if self.horizon < 1 or self.ensemble < 1:
            raise ValueError("horizon and ensemble must be >= 1")
        if not 0.0 <= self.r <= self.t <= 1.0:
            raise ValueError("need 0 <= r <= t <= 1")
        return window - self.context


def head(seq, q: int):
    if not 0 <= q <= len(seq):
        raise ValueError(f"q={q} outside [0, {len(seq)}]")
    return seq[:q]


def tail(seq, q: int):
    if not 0 <= q <= len(seq):
        raise ValueError(f"q={q} outside [0, {len(seq)}]")
    return seq[len(seq) - q:]


def block_count(horizon: int, block: int) -> int:
    return math.ceil(horizon / block)


def generate_block(net: DenoiserNet, context: np.ndarray, rng: np.random.Generator,
                   t: float = 1.0, r: float = 0.0, eps: np.ndarray | None = None) -> np.ndarray:
    """Predict the S frames that follow ``context`` (W_ctx, C, H, W).

    The window [context; zeros] is fed with its last S frames masked and the
    noisy slot filled with fresh Gaussian noise; exactly one network call.
    """
    cfg = net.config
    context = np.asarray(context, dtype=np.float64)
    k = context.shape[0]
    if not 1 <= k < cfg.window or context.shape[1:] != (cfg.channels, cfg.height, cfg.width_s):
        raise ValueError(f"context shape {context.shape} does not fit the network")
    s = cfg.window - k
    shape = (cfg.window,) + context.shape[1:]
    if eps is None:
        eps = rng.standard_normal(shape)
    clean = np.zeros(shape)
    clean[:k] = context / cfg.data_scale
    mask = np.arange(cfg.window) >= k
    out = net.forward(assemble_input(eps, clean, mask), t, r)
    pred = out.data.reshape(shape) * cfg.data_scale
    return pred[k:k + s]


def rollout(net: DenoiserNet, observed: np.ndarray, horizon: int, rng: np.random.Generator,
            context: int = 2, t: float = 1.0, r: float = 0.0) -> np.ndarray:
    """Forecast ``horizon`` frames after ``observed`` (W_in, C, H, W)."""
    observed = np.asarray(observed, dtype=np.float64)
    RolloutConfig(context, horizon, 1, 0, t, r).check(net.config.window)
    if observed.shape[0] < context:
        raise ValueError(f"need at least {context} observed frames, got {observed.shape[0]}")
    s = net.config.window - context
    buf = tail(observed, context)
    frames = []
    remaining = horizon
    while remaining > 0:
        block = generate_block(net, buf, rng, t, r)
        q = min(s, remaining)
        frames.append(head(block, q))
        # newest W_ctx frames of (buffer | accepted block)
        buf = tail(np.concatenate([buf, block[:q]]), context)
        remaining -= q
    return np.concatenate(frames)


def member_seed(base: int, m: int) -> int:
    return base + 10 * m


def ensemble_rollout(net: DenoiserNet, observed: np.ndarray, horizon: int, members: int,
                     base_seed: int = 42, context: int = 2) -> np.ndarray:
    """(M, horizon, C, H, W) forecasts; member m is seeded with base + 10 m."""
    if members < 1:
        raise ValueError("ensemble size must be >= 1")
    return np.stack([
        rollout(net, observed, horizon, np.random.default_rng(member_seed(base_seed, m)), context)
        for m in range(members)
    ])


def timed_rollout(net: DenoiserNet, observed: np.ndarray, horizon: int, seed: int,
                  context: int = 2) -> tuple[np.ndarray, dict]:
    """Rollout plus a cost record (seed, context, block, NFE, seconds)."""
    calls0 = net.calls
    start = time.perf_counter()
    pred = rollout(net, observed, horizon, np.random.default_rng(seed), context)
    elapsed = time.perf_counter() - start
    return pred, {
        "seed": seed,
        "context": context,
        "block": net.config.window - context,
        "nfe": net.calls - calls0,
        "seconds": elapsed,
    }
