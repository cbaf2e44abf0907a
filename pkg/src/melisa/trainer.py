"""Training loop: window sampling, Adam/Muon updates, schedules, loss log."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError
from .backbone import DenoiserNet, NetConfig, save_checkpoint
from .io import atomic_write_bytes
from .objectives import TIC_WEIGHTS, TimeSampler, WindowBatch, melisa_loss, sample_mask, sample_times

log = logging.getLogger(__name__)

SCHEDULES = ("constant", "linear", "cosine")
OPTIMIZERS = ("adam", "muon")
LOG_HEADER = ("step", "winc_mf", "tic", "total", "lr")


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, detail: str = ""):
        super().__init__(f"non-finite loss at step {step}" + (f": {detail}" if detail else ""))
        self.step = step


@dataclass(frozen=True)
class TrainConfig:
    window: int = 6
    mask_rate: float = 0.8
    batch_size: int = 4
    steps: int = 5000
    lr: float = 1e-4
    schedule: str = "linear"
    optimizer: str = "adam"
    seed: int = 42
    grad_clip: float = 1.0
    checkpoint_every: int = 0
    tic_weights: tuple = TIC_WEIGHTS
    t_mu: float = 0.8
    t_sigma: float = 0.8
    p_neq: float = 0.5

    def __post_init__(self):
        if self.window < 2:
            raise ValueError("window must be >= 2")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"unknown schedule {self.schedule!r}; choose from {SCHEDULES}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}; choose from {OPTIMIZERS}")
        if self.batch_size < 1 or self.steps < 1:
            raise ValueError("batch_size and steps must be >= 1")
        if not 0.0 <= self.mask_rate <= 1.0:
            raise ValueError("mask_rate must be in [0, 1]")
        if len(self.tic_weights) != self.window - 1:
            raise ValueError(f"need {self.window - 1} TIC weights, got {len(self.tic_weights)}")

    @property
    def sampler(self) -> TimeSampler:
        return TimeSampler(self.t_mu, self.t_sigma, self.p_neq)

    def as_dict(self) -> dict:
        return asdict(self)


# -- data ------------------------------------------------------------------------


def sample_window(dataset: np.ndarray, window: int, rng: np.random.Generator,
                  size: int | None = None) -> np.ndarray:
    """Windows drawn uniformly over (trajectory, start) pairs.

    ``dataset`` is (N, T, C, H, W); returns (size, window, C, H, W), or a
    single window when ``size`` is None.
    """
    n, t = dataset.shape[:2]
    if t < window:
        raise ValueError(f"trajectories of length {t} are shorter than the window {window}")
    starts_per = t - window + 1
    flat = rng.integers(0, n * starts_per, size=1 if size is None else size)
    traj, start = np.divmod(flat, starts_per)
    out = np.stack([dataset[i, s:s + window] for i, s in zip(traj, start)])
    return out[0] if size is None else out


def data_scale(dataset: np.ndarray) -> float:
    """Global standard deviation used to normalize fields to unit scale."""
    s = float(np.std(dataset))
    return s if s > 0 else 1.0


# -- optimizers --------------------------------------------------------------------

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
MUON_MOMENTUM = 0.95
NS_COEFFS = (15.0 / 8.0, -10.0 / 8.0, 3.0 / 8.0)


@dataclass
class OptimizerState:
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    step: int = 0

    @classmethod
    def zeros_like(cls, params) -> "OptimizerState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0)


def adam_step(params: list, grads: list, state: OptimizerState, lr: float,
              betas=ADAM_BETAS, eps: float = ADAM_EPS, only=None) -> None:
    """Bias-corrected Adam, updating ``params`` arrays in place.

    ``only`` optionally restricts the update to a set of parameter indices
    (the state step still advances once per call).
    """
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        if only is not None and i not in only:
            continue
        if p.shape != g.shape:
            raise ValueError(f"parameter {i}: grad shape {g.shape} != {p.shape}")
        m, v = state.m[i], state.v[i]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def newton_schulz(g: np.ndarray, iters: int = 5) -> np.ndarray:
    """Approximate orthogonal polar factor of a matrix by a quintic iteration.

    Uses p(x) = (15x - 10x^3 + 3x^5) / 8 on the singular values after
    Frobenius normalization; 1 is a superattracting fixed point.
    """
    a, b, c = NS_COEFFS
    norm = np.linalg.norm(g)
    if norm == 0:
        return np.zeros_like(g)
    tall = g.shape[0] > g.shape[1]
    x = (g.T if tall else g) / norm
    for _ in range(iters):
        s = x @ x.T
        x = a * x + (b * s + c * s @ s) @ x
    return x.T if tall else x


def muon_step(params: list, grads: list, state: OptimizerState, lr: float,
              momentum: float = MUON_MOMENTUM, adam_lr: float | None = None) -> None:
    """Muon for parameters with >= 2 dims, Adam for the rest (in place).

    Nesterov momentum is orthogonalized with 5 Newton-Schulz steps and
    rescaled by sqrt(max(1, rows/cols)).
    """
    matrix = [i for i, p in enumerate(params) if p.ndim >= 2]
    rest = {i for i in range(len(params)) if params[i].ndim < 2}
    adam_step(params, grads, state, lr if adam_lr is None else adam_lr, only=rest)
    for i in matrix:
        p, g = params[i], grads[i]
        buf = state.m[i]
        buf *= momentum
        buf += g
        upd = (g + momentum * buf).reshape(p.shape[0], -1)
        o = newton_schulz(upd)
        o *= math.sqrt(max(1.0, o.shape[0] / o.shape[1]))
        p -= lr * o.reshape(p.shape)


def lr_at(schedule: str, base: float, step: int, total: int) -> float:
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    frac = step / total
    if schedule == "constant":
        return base
    if schedule == "linear":
        return base * (1.0 - frac)
    if schedule == "cosine":
        return base * 0.5 * (1.0 + math.cos(math.pi * frac))
    raise ValueError(f"unknown schedule {schedule!r}")


def clip_by_global_norm(grads: list, max_norm: float) -> float:
    """Scale grads in place so their joint L2 norm is at most ``max_norm``."""
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if max_norm > 0 and total > max_norm:
        s = max_norm / total
        for g in grads:
            g *= s
    return total


# -- loop -------------------------------------------------------------------------


def draw_batch(dataset: np.ndarray, cfg: TrainConfig, rng: np.random.Generator) -> WindowBatch:
    """Algorithm-1 draws for one step, in a fixed order: windows, eps, (t, r), mask."""
    x = sample_window(dataset, cfg.window, rng, cfg.batch_size)
    eps = rng.standard_normal(x.shape)
    t, r = sample_times(cfg.sampler, rng, cfg.batch_size)
    mask = sample_mask(cfg.window, cfg.mask_rate, rng, cfg.batch_size)
    return WindowBatch(x, eps, t, r, mask)


def loss_and_grads(net: DenoiserNet, batch: WindowBatch, weights):
    total, winc, tic = melisa_loss(net, batch, weights)
    grads = ad.grad(total, net.parameters)
    return (float(total.data), float(winc.data), float(tic.data)), grads


def log_csv(rows) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_HEADER)
    for step, winc, tic, total, lr in rows:
        w.writerow([step, repr(winc), repr(tic), repr(total), repr(lr)])
    return buf.getvalue().encode()


def train(dataset: np.ndarray, cfg: TrainConfig, net_config: NetConfig | None = None,
          out_dir: str | Path | None = None, net: DenoiserNet | None = None,
          callback=None):
    """Run ``cfg.steps`` optimizer steps; returns (net, loss rows).

    ``dataset`` is (N, T, C, H, W) in physical units. Fields are divided by
    the network's ``data_scale`` (set from the data when a fresh network is
    built). With ``out_dir`` the loss log goes to ``loss.csv`` and
    checkpoints to ``checkpoint.mlsa`` (plus ``checkpoint_<step>.mlsa``
    every ``checkpoint_every`` steps). ``callback(step, net)`` runs after
    each update.
    """
    dataset = np.asarray(dataset, dtype=np.float64)
    if dataset.ndim != 5 or dataset.shape[0] == 0:
        raise ValueError(f"dataset must be a nonempty (N, T, C, H, W) array, got {dataset.shape}")
    n, t, c, h, w = dataset.shape
    if net is None:
        base = net_config or NetConfig()
        net_config = replace(base, window=cfg.window, channels=c, height=h, width_s=w,
                             data_scale=data_scale(dataset))
        net = DenoiserNet(net_config, seed=cfg.seed)
    elif net.config.window != cfg.window:
        raise ValueError("network window differs from the training window")
    data = dataset / net.config.data_scale
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(cfg.seed)
    names = list(net.params)
    state = OptimizerState.zeros_like([net.params[k].data for k in names])
    step_fn = adam_step if cfg.optimizer == "adam" else muon_step
    rows = []
    try:
        for k in range(cfg.steps):
            batch = draw_batch(data, cfg, rng)
            lr = lr_at(cfg.schedule, cfg.lr, k, cfg.steps)
            try:
                (total, winc, tic), grads = loss_and_grads(net, batch, cfg.tic_weights)
            except NonFiniteError as exc:
                raise TrainingDiverged(k, str(exc)) from exc
            if not math.isfinite(total):
                raise TrainingDiverged(k)
            if not all(np.isfinite(g).all() for g in grads):
                raise TrainingDiverged(k, "non-finite gradient")
            clip_by_global_norm(grads, cfg.grad_clip)
            step_fn([net.params[name].data for name in names], grads, state, lr)
            rows.append((k, winc, tic, total, lr))
            if k % 100 == 0:
                log.info("step %d total %.5f winc %.5f tic %.5f lr %.2e", k, total, winc, tic, lr)
            if callback is not None:
                callback(k, net)
            if out is not None and cfg.checkpoint_every and (k + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(net, out / f"checkpoint_{k + 1}.mlsa")
    finally:
        if out is not None:
            atomic_write_bytes(out / "loss.csv", log_csv(rows))
    if out is not None:
        save_checkpoint(net, out / "checkpoint.mlsa")
    return net, rows
