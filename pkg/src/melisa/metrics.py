"""Forecast evaluation: RL2, SSIM, PSDD, TKED, mixing rate, CRPS.

Trajectory arrays are (B, T, C, H, W) unless noted; single frames are 2D.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

EPS = 1e-12
SHORT_HORIZON = 40
SSIM_WINDOW = 7
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03
LAMBDA_MAX = 10.0
MAX_LAGS = 20
METRIC_ORDER = ("RL2", "SSIM", "PSDD", "TKED", "MRD", "CRPS")


def _as5d(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 4:
        x = x[None]
    if x.ndim != 5:
        raise ValueError(f"expected (B, T, C, H, W) trajectories, got shape {x.shape}")
    return x


def _same_shape(pred, ref):
    if pred.shape != ref.shape:
        raise ValueError(f"prediction shape {pred.shape} != reference shape {ref.shape}")


def short_horizon(t: int) -> int:
    return min(SHORT_HORIZON, t)


# -- RL2 -----------------------------------------------------------------------


def rl2_per_traj(pred, ref, t_eval: int | None = None) -> np.ndarray:
    pred, ref = _as5d(pred), _as5d(ref)
    _same_shape(pred, ref)
    t_eval = pred.shape[1] if t_eval is None else t_eval
    if not 1 <= t_eval <= pred.shape[1]:
        raise ValueError(f"T_eval={t_eval} outside [1, {pred.shape[1]}]")
    b = pred.shape[0]
    e = (pred[:, :t_eval] - ref[:, :t_eval]).reshape(b, -1)
    r = ref[:, :t_eval].reshape(b, -1)
    return np.linalg.norm(e, axis=1) / (np.linalg.norm(r, axis=1) + EPS)


def rl2(pred, ref, t_eval: int | None = None) -> float:
    """Trajectory-level relative L2 error averaged over trajectories."""
    return float(np.mean(rl2_per_traj(pred, ref, t_eval)))


# -- SSIM ----------------------------------------------------------------------


def gaussian_kernel(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _smooth(img: np.ndarray, k1d: np.ndarray) -> np.ndarray:
    """Separable correlation with zero 'same' padding."""
    p = len(k1d) // 2
    h, w = img.shape
    padded = np.pad(img, p)
    rows = sum(k1d[i] * padded[i:i + h, :] for i in range(len(k1d)))
    return sum(k1d[j] * rows[:, j:j + w] for j in range(len(k1d)))


def ssim_map(ref, pred, window: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA,
             data_range: float | None = None) -> np.ndarray:
    ref = np.asarray(ref, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    if ref.ndim != 2:
        raise ValueError("SSIM expects 2D frames")
    _same_shape(pred, ref)
    L = float(ref.max() - ref.min()) if data_range is None else float(data_range)
    k = gaussian_kernel(window, sigma)
    c1, c2 = (SSIM_K1 * L) ** 2, (SSIM_K2 * L) ** 2
    mx, my = _smooth(ref, k), _smooth(pred, k)
    sxx = _smooth(ref * ref, k) - mx * mx
    syy = _smooth(pred * pred, k) - my * my
    sxy = _smooth(ref * pred, k) - mx * my
    return ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))


def ssim(ref, pred, window: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA,
         data_range: float | None = None, atol: float = 1e-12) -> float:
    """Mean SSIM of one frame; the range L comes from ``ref`` unless given."""
    ref = np.asarray(ref, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    L = float(ref.max() - ref.min()) if data_range is None else float(data_range)
    if L == 0.0:
        return 1.0 if np.allclose(pred, ref, rtol=0.0, atol=atol) else 0.0
    return float(np.mean(ssim_map(ref, pred, window, sigma, L)))


def ssim_trajectories(pred, ref, t_eval: int | None = None) -> np.ndarray:
    """Per-trajectory SSIM averaged over frames and channels."""
    pred, ref = _as5d(pred), _as5d(ref)
    _same_shape(pred, ref)
    t_eval = pred.shape[1] if t_eval is None else t_eval
    b, _, c = pred.shape[:3]
    return np.array([
        np.mean([ssim(ref[i, j, ch], pred[i, j, ch]) for j in range(t_eval) for ch in range(c)])
        for i in range(b)
    ])


# -- spectra -------------------------------------------------------------------


@dataclass
class SpectrumProfile:
    power: np.ndarray
    counts: np.ndarray

    @property
    def bins(self) -> int:
        return len(self.power)


def radial_bins(h: int, w: int) -> np.ndarray:
    i = np.arange(h)[:, None] - h // 2
    j = np.arange(w)[None, :] - w // 2
    return np.floor(np.sqrt(i * i + j * j)).astype(int)


def radial_spectrum(frame) -> SpectrumProfile:
    """Radially averaged |F|^2 of the shifted spectrum.

    A 3D input (C, H, W) sums channel power before averaging.
    """
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim == 2:
        frame = frame[None]
    if frame.ndim != 3:
        raise ValueError("radial_spectrum expects a 2D frame or (C, H, W)")
    _, h, w = frame.shape
    power = np.sum(np.abs(np.fft.fftshift(np.fft.fft2(frame), axes=(-2, -1))) ** 2, axis=0)
    bins = radial_bins(h, w).ravel()
    counts = np.bincount(bins)
    sums = np.bincount(bins, weights=power.ravel())
    return SpectrumProfile(sums / counts, counts)


def default_bins(h: int, w: int) -> int:
    n = int(radial_bins(h, w).max()) + 1
    return min(220, n) if (h, w) == (256, 256) else n


def normalized_profile(power, k_r: int) -> np.ndarray:
    p = np.asarray(power, dtype=np.float64)[:k_r]
    return p / (p.sum() + EPS)


def profile_distance(px, py) -> float:
    """Mean |log(px + eps) - log(py + eps)| over bins."""
    return float(np.mean(np.abs(np.log(np.asarray(px) + EPS) - np.log(np.asarray(py) + EPS))))


def psdd(pred, ref, k_r: int | None = None) -> float:
    """Log-spectral distance of normalized radial spectra, averaged over frames.

    Inputs are stacks of frames (..., H, W); leading axes are flattened, with
    the channel axis kept when the input is (B, T, C, H, W).
    """
    pred = np.asarray(pred, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    _same_shape(pred, ref)
    h, w = ref.shape[-2:]
    k_r = default_bins(h, w) if k_r is None else k_r
    if ref.ndim == 5:
        frames_p = pred.reshape((-1,) + pred.shape[2:])
        frames_r = ref.reshape((-1,) + ref.shape[2:])
    else:
        frames_p = pred.reshape(-1, 1, h, w)
        frames_r = ref.reshape(-1, 1, h, w)
    scores = [
        profile_distance(normalized_profile(radial_spectrum(a).power, k_r),
                         normalized_profile(radial_spectrum(b).power, k_r))
        for a, b in zip(frames_p, frames_r)
    ]
    return float(np.mean(scores))


def psdd_per_traj(pred, ref, t_eval: int | None = None, k_r: int | None = None) -> np.ndarray:
    pred, ref = _as5d(pred), _as5d(ref)
    t_eval = pred.shape[1] if t_eval is None else t_eval
    return np.array([psdd(pred[i:i + 1, :t_eval], ref[i:i + 1, :t_eval], k_r)
                     for i in range(pred.shape[0])])


# -- TKE -----------------------------------------------------------------------


def tke_map(traj) -> np.ndarray:
    """Batch mean of the per-trajectory temporal variance, shape (C, H, W)."""
    traj = _as5d(traj)
    fluct = traj - traj.mean(axis=1, keepdims=True)
    return np.mean(np.mean(fluct * fluct, axis=1), axis=0)


def tked(pred, ref) -> float:
    """Mean squared TKE-map difference over the mean reference TKE."""
    pred, ref = _as5d(pred), _as5d(ref)
    _same_shape(pred, ref)
    tp, tr = tke_map(pred), tke_map(ref)
    return float(np.mean((tp - tr) ** 2) / (np.mean(tr) + EPS))


# -- mixing rate ---------------------------------------------------------------


def default_lags(t: int) -> int:
    """K = 20 lags, reduced to (T - 1) // 2 for short trajectories."""
    return min(MAX_LAGS, (t - 1) // 2)


def autocovariance(traj, k: int, center=None) -> np.ndarray:
    """C(l) for l = 0..K with m_l = T - K - l products per trajectory.

    Centered by ``center`` (default: global mean over everything).
    """
    traj = _as5d(traj)
    b, t = traj.shape[:2]
    if t <= 2 * k:
        raise ValueError(f"need T > 2K, got T={t}, K={k}")
    mu = traj.mean() if center is None else center
    x = (traj - mu).reshape(b, t, -1)
    out = np.empty(k + 1)
    for lag in range(k + 1):
        m = t - k - lag
        out[lag] = np.mean(np.sum(x[:, lag:lag + m] * x[:, :m], axis=2)) / x.shape[2]
    return out


def autocorrelation(traj, k: int | None = None) -> np.ndarray:
    traj = _as5d(traj)
    k = default_lags(traj.shape[1]) if k is None else k
    c = autocovariance(traj, k)
    if c[0] <= 0:
        raise ValueError("zero-variance data has no autocorrelation")
    return c / c[0]


def fit_decay(curve, lam_max: float = LAMBDA_MAX, tol: float = 1e-12) -> float:
    """argmin over lam in [0, lam_max] of sum_l (curve[l] - exp(-lam l))^2."""
    curve = np.asarray(curve, dtype=np.float64)
    lags = np.arange(len(curve))

    def loss(lam):
        return float(np.sum((curve - np.exp(-lam * lags)) ** 2))

    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = 0.0, lam_max
    c, d = b - invphi * (b - a), a + invphi * (b - a)
    fc, fd = loss(c), loss(d)
    while b - a > tol:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = loss(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = loss(d)
    lam = 0.5 * (a + b)
    # the bracket never evaluates the bounds themselves
    for edge in (0.0, lam_max):
        if loss(edge) < loss(lam):
            lam = edge
    return lam


def mixing_rate(traj, k: int | None = None) -> float:
    return fit_decay(autocorrelation(traj, k))


def mrd(lam_pred: float, lam_ref: float) -> float:
    if lam_ref <= 0:
        raise ValueError("reference mixing rate must be positive")
    return abs(lam_pred - lam_ref) / lam_ref


# -- CRPS ----------------------------------------------------------------------


def crps(ensemble, y) -> np.ndarray:
    """Empirical CRPS per point; ``ensemble`` has members on axis 0.

    The spread term uses the sorted-member identity
    sum_ij |x_i - x_j| = 2 sum_k (2k - M + 1) x_(k).
    """
    ens = np.asarray(ensemble, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if ens.shape[1:] != y.shape:
        raise ValueError(f"ensemble shape {ens.shape} does not match target {y.shape}")
    m = ens.shape[0]
    skill = np.mean(np.abs(ens - y), axis=0)
    s = np.sort(ens, axis=0)
    w = (2.0 * np.arange(m) - m + 1.0).reshape((m,) + (1,) * y.ndim)
    spread = 2.0 * np.sum(w * s, axis=0) / (2.0 * m * m)
    return skill - spread


def crps_brute(ensemble, y) -> np.ndarray:
    ens = np.asarray(ensemble, dtype=np.float64)
    m = ens.shape[0]
    skill = np.mean(np.abs(ens - y), axis=0)
    spread = np.abs(ens[:, None] - ens[None, :]).sum(axis=(0, 1)) / (2.0 * m * m)
    return skill - spread


def ensemble_mae(ensemble, y) -> float:
    return float(np.mean(np.abs(np.asarray(ensemble) - np.asarray(y))))


# -- report --------------------------------------------------------------------


@dataclass
class MetricReport:
    """Per-trajectory values for one horizon; CRPS may be absent."""

    horizon: str
    frames: int
    values: dict = field(default_factory=dict)
    notes: dict = field(default_factory=dict)

    def columns(self):
        return [m for m in METRIC_ORDER]

    def summary(self, name: str):
        v = self.values.get(name)
        if v is None:
            return None
        v = np.asarray(v, dtype=np.float64)
        err = float(np.std(v, ddof=1) / math.sqrt(len(v))) if len(v) > 1 else 0.0
        return float(np.mean(v)), err

    def to_csv(self) -> str:
        n = max(len(v) for v in self.values.values() if v is not None)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["horizon", "frames", "row"] + list(METRIC_ORDER))
        for i in range(n):
            w.writerow([self.horizon, self.frames, i] + [self._cell(m, i) for m in METRIC_ORDER])
        w.writerow([self.horizon, self.frames, "mean"] + [self._mean_cell(m) for m in METRIC_ORDER])
        w.writerow([self.horizon, self.frames, "stderr"] + [self._err_cell(m) for m in METRIC_ORDER])
        return buf.getvalue()

    def _cell(self, name, i):
        v = self.values.get(name)
        if v is None:
            return "absent"
        return repr(float(v[i])) if len(v) > i else ""

    def _mean_cell(self, name):
        s = self.summary(name)
        return "absent" if s is None else repr(s[0])

    def _err_cell(self, name):
        s = self.summary(name)
        return "absent" if s is None else repr(s[1])

    def to_table(self) -> str:
        head = f"{'horizon':<10}" + "".join(f"{m:>22}" for m in METRIC_ORDER)
        cells = []
        for m in METRIC_ORDER:
            s = self.summary(m)
            cells.append("absent" if s is None else f"{s[0]:.4g} ± {s[1]:.2g}")
        row = f"{self.horizon + '(' + str(self.frames) + ')':<10}" + "".join(f"{c:>22}" for c in cells)
        return head + "\n" + row + "\n(± is the standard error over test trajectories)\n"


def evaluate(pred, ref, t_eval: int | None = None, ensemble=None, label: str | None = None,
             k_lags: int | None = None) -> MetricReport:
    """All metrics on the first ``t_eval`` frames (default: everything).

    MRD needs a positive reference mixing rate per trajectory; it is fitted
    on each trajectory separately with K = default_lags(T_eval).
    ``ensemble`` (M, B, T, C, H, W) enables CRPS.
    """
    pred, ref = _as5d(pred), _as5d(ref)
    _same_shape(pred, ref)
    t_eval = pred.shape[1] if t_eval is None else t_eval
    p, r = pred[:, :t_eval], ref[:, :t_eval]
    b = p.shape[0]
    k = default_lags(t_eval) if k_lags is None else k_lags
    values = {
        "RL2": rl2_per_traj(p, r),
        "SSIM": ssim_trajectories(p, r),
        "PSDD": psdd_per_traj(p, r),
        "TKED": np.array([tked(p[i:i + 1], r[i:i + 1]) for i in range(b)]),
        "MRD": np.array([mrd(mixing_rate(p[i:i + 1], k), mixing_rate(r[i:i + 1], k))
                         for i in range(b)]) if k >= 1 else None,
        "CRPS": None,
    }
    if ensemble is not None:
        ens = np.asarray(ensemble, dtype=np.float64)[:, :, :t_eval]
        scores = []
        for i in range(b):
            c = float(np.mean(crps(ens[:, i], r[i])))
            mae = ensemble_mae(ens[:, i], r[i])
            if c > mae + 1e-12:
                raise AssertionError(f"CRPS {c} exceeds ensemble MAE {mae}")
            scores.append(c)
        values["CRPS"] = np.array(scores)
    horizon = label or ("short" if t_eval == short_horizon(pred.shape[1]) else "full")
    notes = {"ssim_window": SSIM_WINDOW, "ssim_sigma": SSIM_SIGMA, "mixing_lags": k,
             "mixing_fit": "least squares in linear space, golden-section on [0, 10]"}
    return MetricReport(horizon, t_eval, values, notes)
