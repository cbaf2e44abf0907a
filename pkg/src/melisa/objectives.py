"""Window-conditioned MeanFlow and time-increment losses.

Windows are arrays of shape (B, W, C, H, Ws); per-sample diffusion times
``t`` and ``r`` have shape (B,) and are shared by every frame of a window.
Masks are (B, W) booleans where True marks a hidden frame; frame 0 is
always visible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Tensor
from .backbone import DenoiserNet, assemble_input

T_MIN = 1e-3
TIC_WEIGHTS = (0.4, 0.5, 0.8, 1.1, 1.2)


@dataclass(frozen=True)
class TimeSampler:
    """Logit-normal t; with probability ``p_neq`` a second draw sets r < t."""

    mu: float = 0.8
    sigma: float = 0.8
    p_neq: float = 0.5


@dataclass
class WindowBatch:
    x: np.ndarray
    eps: np.ndarray
    t: np.ndarray
    r: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.t = np.atleast_1d(np.asarray(self.t, dtype=np.float64))
        self.r = np.atleast_1d(np.asarray(self.r, dtype=np.float64))
        self.mask = np.asarray(self.mask, dtype=bool)
        b = self.x.shape[0]
        if self.eps.shape != self.x.shape:
            raise ValueError(f"noise shape {self.eps.shape} != window shape {self.x.shape}")
        if self.t.shape != (b,) or self.r.shape != (b,) or self.mask.shape != self.x.shape[:2]:
            raise ValueError("t, r and mask must be per-sample")
        if self.mask[:, 0].any():
            raise ValueError("the first frame of a window must stay observed")
        if np.any(self.r > self.t) or np.any(self.r < 0) or np.any(self.t > 1):
            raise ValueError("need 0 <= r <= t <= 1")


def _per_sample(t, ndim: int):
    """Reshape per-sample times (B,) so they broadcast against (B, ...)."""
    if isinstance(t, (ad.Dual, Tensor)):
        return ad.reshape(t, (-1,) + (1,) * (ndim - 1))
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 0:
        return t
    return t.reshape((-1,) + (1,) * (ndim - 1))


def interpolate(x, eps, t):
    """Noisy state on the linear path: (1 - t) x + t eps."""
    x = np.asarray(x, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x.shape != eps.shape:
        raise ValueError(f"x {x.shape} and eps {eps.shape} differ")
    tt = _per_sample(t, x.ndim)
    return (1.0 - tt) * x + tt * eps


def velocity_target(x, eps):
    return np.asarray(eps, dtype=np.float64) - np.asarray(x, dtype=np.float64)


def avg_velocity(z, d_out, t, t_min: float = T_MIN):
    """Average velocity implied by a clean prediction: (z - D) / t."""
    if np.any(ad.value(t) < t_min):
        raise ValueError(f"t below t_min={t_min}")
    ndim = ad.value(z).ndim
    return ad.div(ad.sub(z, d_out), _per_sample(t, ndim))


def sample_times(sampler: TimeSampler, rng: np.random.Generator, size: int | None = None):
    """Draw (t, r) with r <= t; r == t with probability 1 - p_neq."""
    n = 1 if size is None else size
    sig = lambda s: 1.0 / (1.0 + np.exp(-s))
    t = sig(sampler.mu + sampler.sigma * rng.standard_normal(n))
    other = sig(sampler.mu + sampler.sigma * rng.standard_normal(n))
    neq = rng.random(n) < sampler.p_neq
    t_out = np.where(neq, np.maximum(t, other), t)
    r_out = np.where(neq, np.minimum(t, other), t)
    if size is None:
        return float(t_out[0]), float(r_out[0])
    return t_out, r_out


def sample_mask(window: int, rate: float, rng: np.random.Generator, size: int | None = None):
    """Bernoulli(rate) masking of frames 1..W-1; frame 0 always observed."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError("masking rate must be in [0, 1]")
    n = 1 if size is None else size
    mask = rng.random((n, window)) < rate
    mask[:, 0] = False
    return mask[0] if size is None else mask


# ---------------------------------------------------------------------------


def _clamped_times(batch: WindowBatch):
    t = np.maximum(batch.t, T_MIN)
    return t, np.minimum(batch.r, t)


def _window_output(net: DenoiserNet, inp, t, r, shape):
    return ad.reshape(net.forward(inp, t, r), shape)


def _mean_velocity_fn(net: DenoiserNet, x: np.ndarray, mask: np.ndarray, r: np.ndarray):
    def u_fn(z, t):
        d_out = _window_output(net, assemble_input(z, x, mask), t, r, x.shape)
        return avg_velocity(z, d_out, t)
    return u_fn


def flow_jvp(net: DenoiserNet, batch: WindowBatch) -> np.ndarray:
    """Total derivative of the average velocity along (dz, dt, dr) = (v, 1, 0).

    Samples with t == r get zeros: their JVP is multiplied by t - r = 0.
    """
    t, r = _clamped_times(batch)
    z = interpolate(batch.x, batch.eps, t)
    v = velocity_target(batch.x, batch.eps)
    jac = np.zeros_like(z)
    idx = np.flatnonzero(t > r)
    if idx.size:
        u_fn = _mean_velocity_fn(net, batch.x[idx], batch.mask[idx], r[idx])
        _, jac[idx] = ad.jvp(u_fn, (z[idx], t[idx]), (v[idx], np.ones(idx.size)))
    return jac


def _winc_from_u(u, batch: WindowBatch, jac: np.ndarray, t, r):
    v = velocity_target(batch.x, batch.eps)
    corr = _per_sample(t - r, v.ndim) * ad.stop_gradient(jac).data
    V = ad.add(u, corr)
    loss = ad.mean(ad.square(ad.sub(V, v)))
    if not np.isfinite(ad.value(loss)).all():
        raise NonFiniteError("WinC-MF loss is not finite")
    return loss


def winc_mf_loss(net: DenoiserNet, batch: WindowBatch, jac: np.ndarray | None = None) -> Tensor:
    """Mean squared error between the instantaneous-velocity estimate and eps - x.

    ``u + (t - r) * sg(du/dt along the flow)`` regressed on ``v``; only the
    direct path through ``u`` carries gradients. ``jac`` may be supplied to
    reuse a precomputed (frozen) JVP.
    """
    t, r = _clamped_times(batch)
    z = interpolate(batch.x, batch.eps, t)
    u = _mean_velocity_fn(net, batch.x, batch.mask, r)(Tensor(z), t)
    if jac is None:
        jac = flow_jvp(net, batch)
    return _winc_from_u(u, batch, jac, t, r)


def reconstruct(net: DenoiserNet, clean: np.ndarray, mask: np.ndarray, eps: np.ndarray):
    """One network call at (r, t) = (0, 1) from pure noise plus visible frames."""
    clean = np.asarray(clean, dtype=np.float64)
    single = clean.ndim == 4
    if single:
        clean, mask, eps = clean[None], np.asarray(mask)[None], np.asarray(eps)[None]
    b = clean.shape[0]
    out = _window_output(net, assemble_input(np.asarray(eps, dtype=np.float64), clean, mask),
                         np.ones(b), np.zeros(b), clean.shape)
    if single:
        out = ad.reshape(out, clean.shape[1:])
    return out


def tic_loss(x, x_hat, weights) -> Tensor:
    """Weighted anchored-increment error: sum_w k_w * mean|dx_w - dx_hat_w|^2.

    ``x`` and ``x_hat`` are windows with the frame axis at -4, i.e.
    (W, C, H, Ws) or (B, W, C, H, Ws). The anchor is frame 0.
    """
    x = np.asarray(x, dtype=np.float64)
    w_len = x.shape[-4]
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (w_len - 1,):
        raise ValueError(f"need {w_len - 1} lag weights, got {weights.shape}")
    if np.any(weights < 0):
        raise ValueError("lag weights must be non-negative")
    if ad.value(x_hat).shape != x.shape:
        raise ValueError("window shapes differ")
    # increments relative to the anchor for every lag at once
    anchor = (Ellipsis, slice(0, 1), slice(None), slice(None), slice(None))
    later = (Ellipsis, slice(1, None), slice(None), slice(None), slice(None))
    dx = x[later] - x[anchor]
    dx_hat = ad.sub(ad.take(x_hat, later), ad.take(x_hat, anchor))
    err = ad.square(ad.sub(dx_hat, dx))
    axes = tuple(i for i in range(x.ndim) if i != x.ndim - 4)
    per_lag = ad.mean(err, axis=axes)
    return ad.sum(ad.mul(per_lag, weights))


def melisa_loss(net: DenoiserNet, batch: WindowBatch, weights=TIC_WEIGHTS):
    """Total loss and its two parts, ``(total, winc, tic)``.

    The WinC-MF and reconstruction evaluations share one batched network
    call; the JVP runs separately in forward mode.
    """
    t, r = _clamped_times(batch)
    x, mask = batch.x, batch.mask
    b = x.shape[0]
    z = interpolate(x, batch.eps, t)
    z_in = Tensor(z)
    inp = ad.concat([assemble_input(z_in, x, mask), assemble_input(batch.eps, x, mask)], axis=0)
    both = net.forward(inp, np.concatenate([t, np.ones(b)]), np.concatenate([r, np.zeros(b)]))
    both = ad.reshape(both, (2 * b,) + x.shape[1:])
    d_noisy = ad.take(both, slice(0, b))
    x_hat = ad.take(both, slice(b, 2 * b))

    u = avg_velocity(z_in, d_noisy, t)
    winc = _winc_from_u(u, batch, flow_jvp(net, batch), t, r)
    tic = tic_loss(x, x_hat, weights)
    return ad.add(winc, tic), winc, tic


# ---------------------------------------------------------------------------
# increment statistics


def increment_energy(traj: np.ndarray, lag: int) -> float:
    """Empirical E|X(tau + lag) - X(tau)|^2 over a (T, ...) trajectory."""
    traj = np.asarray(traj, dtype=np.float64)
    d = traj[lag:] - traj[:-lag]
    return float(np.mean(np.sum(d.reshape(d.shape[0], -1) ** 2, axis=1)))


def covariance_trace(traj: np.ndarray, lag: int) -> float:
    """Empirical tr Gamma(lag) of a stationary (T, ...) trajectory."""
    traj = np.asarray(traj, dtype=np.float64)
    flat = traj.reshape(traj.shape[0], -1)
    c = flat - flat.mean(axis=0)
    n = c.shape[0] - lag
    return float(np.sum(c[lag:lag + n] * c[:n]) / n)
