"""Compact periodic UNet denoiser with FiLM conditioning on (t, r).

Frames of a window are stacked on the channel axis and processed jointly as
one image. Input channel layout is ``[noisy window | masked clean window |
mask indicators]`` (``2*W*C + W`` channels); the output is the predicted
clean window (``W*C`` channels).
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .io import atomic_write_bytes
from .solver import band_mask

MAGIC = b"MLSA"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class NetConfig:
    depth: int = 2
    width: int = 16
    window: int = 6
    channels: int = 1
    height: int = 64
    width_s: int = 64
    embed_dim: int = 64
    groups: int = 8
    circular: bool = True
    band_limit: bool = False
    data_scale: float = 1.0

    def __post_init__(self):
        if self.window < 2:
            raise ValueError("window must be >= 2")
        if self.embed_dim % 2:
            raise ValueError("embed_dim must be even")
        f = 2 ** self.depth
        if self.height % f or self.width_s % f:
            raise ShapeError(
                f"spatial size {self.height}x{self.width_s} not divisible by 2^depth={f}")
        if self.band_limit and self.height != self.width_s:
            raise ValueError("band_limit needs a square grid")
        if self.data_scale <= 0:
            raise ValueError("data_scale must be positive")

    @property
    def in_channels(self) -> int:
        return 2 * self.window * self.channels + self.window

    @property
    def out_channels(self) -> int:
        return self.window * self.channels

    def stage_channels(self, level: int) -> int:
        return self.width * min(2 ** level, 4)

    def group_count(self, ch: int) -> int:
        g = min(self.groups, ch)
        while ch % g:
            g -= 1
        return g


def time_embedding(t, r, dim: int, max_freq: float = 100.0):
    """Sinusoidal features of t and r, each ``dim`` long, concatenated.

    Inputs are per-sample arrays (or Duals) of shape (B,). The first half of
    each block holds sines, the second half cosines.
    """
    tv, rv = ad.value(t), ad.value(r)
    if np.any(rv > tv + 1e-15):
        raise ValueError("time embedding requires r <= t")
    if dim % 2:
        raise ValueError("embedding dim must be even")
    half = dim // 2
    freqs = np.exp(np.linspace(0.0, math.log(max_freq), half))

    def feats(s):
        phase = ad.mul(ad.reshape(s, (-1, 1)), freqs[None, :])
        return ad.concat([ad.sin(phase), ad.cos(phase)], axis=1)

    return ad.concat([feats(t), feats(r)], axis=1)


def assemble_input(noisy, clean: np.ndarray, mask: np.ndarray):
    """Build the conditioned network input.

    noisy: (B, W, C, H, Ws) Tensor, Dual or array (gradients/tangents kept).
    clean: (B, W, C, H, Ws) array. mask: (B, W) booleans, True = masked.
    Unbatched inputs (W, C, H, Ws) with mask (W,) are accepted too.
    """
    clean = np.asarray(clean, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    single = clean.ndim == 4
    if single:
        clean, mask = clean[None], mask[None]
        noisy = ad.reshape(noisy, (1,) + tuple(ad.value(noisy).shape))
    if ad.value(noisy).shape != clean.shape:
        raise ShapeError(f"noisy {ad.value(noisy).shape} and clean {clean.shape} differ")
    b, w, c, h, ws = clean.shape
    if mask.shape != (b, w):
        raise ShapeError(f"mask shape {mask.shape} != {(b, w)}")
    observed = (~mask).astype(np.float64)
    masked_clean = clean * observed[:, :, None, None, None]
    indicator = np.broadcast_to(observed[:, :, None, None], (b, w, h, ws))
    out = ad.concat([
        ad.reshape(noisy, (b, w * c, h, ws)),
        masked_clean.reshape(b, w * c, h, ws),
        np.ascontiguousarray(indicator),
    ], axis=1)
    return out


class DenoiserNet:
    """UNet ``D(input, t, r)`` returning a clean-window prediction."""

    def __init__(self, config: NetConfig, seed: int = 42):
        self.config = config
        self.params: dict[str, Tensor] = {}
        self._rng = np.random.default_rng(seed)
        self._build()
        del self._rng
        self._keep = band_mask(config.height) if config.band_limit else None
        self.calls = 0

    # -- construction ---------------------------------------------------------

    def _add(self, name: str, array: np.ndarray) -> None:
        self.params[name] = Tensor(array, requires_grad=True, name=name)

    def _conv(self, name: str, cin: int, cout: int, k: int, zero: bool = False) -> None:
        if zero:
            w = np.zeros((cout, cin, k, k))
        else:
            bound = math.sqrt(3.0 / (cin * k * k))
            w = self._rng.uniform(-bound, bound, (cout, cin, k, k))
        self._add(f"{name}.w", w)
        self._add(f"{name}.b", np.zeros(cout))

    def _linear(self, name: str, fin: int, fout: int, scale: float = 1.0) -> None:
        bound = scale * math.sqrt(3.0 / fin)
        self._add(f"{name}.w", self._rng.uniform(-bound, bound, (fin, fout)))
        self._add(f"{name}.b", np.zeros(fout))

    def _norm(self, name: str, ch: int) -> None:
        self._add(f"{name}.g", np.ones(ch))
        self._add(f"{name}.b", np.zeros(ch))

    def _resblock(self, name: str, cin: int, cout: int, temb: int) -> None:
        self._norm(f"{name}.n1", cin)
        self._conv(f"{name}.c1", cin, cout, 3)
        self._linear(f"{name}.film", temb, 2 * cout, scale=0.1)
        self._norm(f"{name}.n2", cout)
        self._conv(f"{name}.c2", cout, cout, 3)
        if cin != cout:
            self._conv(f"{name}.skip", cin, cout, 1)

    def _build(self) -> None:
        c = self.config
        temb = 4 * c.width
        self._linear("temb.0", 2 * c.embed_dim, temb)
        self._linear("temb.1", temb, temb)
        self._conv("in", c.in_channels, c.width, 3)
        ch = c.width
        for i in range(c.depth):
            out = c.stage_channels(i)
            self._resblock(f"down{i}", ch, out, temb)
            ch = out
        self._resblock("mid", ch, ch, temb)
        for i in reversed(range(c.depth)):
            skip = c.stage_channels(i)
            self._resblock(f"up{i}", ch + skip, skip, temb)
            ch = skip
        self._norm("out.n", ch)
        self._conv("out", ch, c.out_channels, 3, zero=True)

    # -- evaluation ---------------------------------------------------------

    @property
    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def _p(self, name: str) -> Tensor:
        return self.params[name]

    def _gn(self, name: str, x):
        ch = ad.value(x).shape[1]
        return ad.group_norm(x, self._p(f"{name}.g"), self._p(f"{name}.b"),
                             self.config.group_count(ch))

    def _cv(self, name: str, x):
        pad = "circular" if self.config.circular else "zeros"
        return ad.conv2d(x, self._p(f"{name}.w"), self._p(f"{name}.b"), padding=pad)

    def _res(self, name: str, x, emb):
        h = self._cv(f"{name}.c1", ad.silu(self._gn(f"{name}.n1", x)))
        film = ad.linear(emb, self._p(f"{name}.film.w"), self._p(f"{name}.film.b"))
        cout = ad.value(h).shape[1]
        scale = ad.reshape(film[:, :cout], (-1, cout, 1, 1))
        shift = ad.reshape(film[:, cout:], (-1, cout, 1, 1))
        h = self._gn(f"{name}.n2", h)
        h = ad.add(ad.mul(h, ad.add(scale, 1.0)), shift)
        h = self._cv(f"{name}.c2", ad.silu(h))
        skip = self._cv(f"{name}.skip", x) if f"{name}.skip.w" in self.params else x
        return ad.add(skip, h)

    def forward(self, x, t, r):
        """Predicted clean window, shape (B, W*C, H, Ws).

        ``t`` and ``r`` are per-sample values of shape (B,) (scalars are
        broadcast); they may be Duals when computing a JVP in t.
        """
        c = self.config
        xv = ad.value(x)
        single = xv.ndim == 3
        if single:
            x = ad.reshape(x, (1,) + xv.shape)
            xv = ad.value(x)
        if xv.shape[1] != c.in_channels:
            raise ShapeError(f"expected {c.in_channels} input channels, got {xv.shape[1]}")
        f = 2 ** c.depth
        if xv.shape[2] % f or xv.shape[3] % f:
            raise ShapeError(f"spatial size {xv.shape[2:]} not divisible by 2^depth={f}")
        b = xv.shape[0]
        t = _per_sample(t, b)
        r = _per_sample(r, b)
        self.calls += 1

        emb = time_embedding(t, r, c.embed_dim)
        emb = ad.silu(ad.linear(emb, self._p("temb.0.w"), self._p("temb.0.b")))
        emb = ad.linear(emb, self._p("temb.1.w"), self._p("temb.1.b"))
        emb = ad.silu(emb)

        h = self._cv("in", x)
        skips = []
        for i in range(c.depth):
            h = self._res(f"down{i}", h, emb)
            skips.append(h)
            h = ad.downsample2(h)
        h = self._res("mid", h, emb)
        for i in reversed(range(c.depth)):
            h = ad.concat([ad.upsample2(h), skips[i]], axis=1)
            h = self._res(f"up{i}", h, emb)
        out = self._cv("out", ad.silu(self._gn("out.n", h)))
        if self._keep is not None:
            out = ad.spectral_project(out, self._keep)
        if single:
            out = ad.reshape(out, ad.value(out).shape[1:])
        return out

    __call__ = forward

    # -- persistence ----------------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            a = np.asarray(arrays[k], dtype=np.float64)
            if a.shape != p.shape:
                raise ShapeError(f"parameter {k}: shape {a.shape} != {p.shape}")
            self.params[k] = Tensor(a, requires_grad=True, name=k)


def _per_sample(s, b: int):
    if isinstance(s, (ad.Dual, Tensor)):
        if ad.value(s).shape == (b,):
            return s
        return ad.mul(s, np.ones(b))
    return np.broadcast_to(np.asarray(s, dtype=np.float64), (b,)).copy()


# -- checkpoint format ----------------------------------------------------------
#
# "MLSA" | u16 version | NetConfig fields (declaration order; ints as u32,
# bools as u8, floats as f64) | u32 parameter count | per parameter:
# u32 name length, UTF-8 name, u64 element count, little-endian f64 data.


def _config_codec():
    for f in fields(NetConfig):
        if f.type in ("bool", bool):
            yield f.name, "<B"
        elif f.type in ("float", float):
            yield f.name, "<d"
        else:
            yield f.name, "<I"


def checkpoint_bytes(net: DenoiserNet) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<H", FORMAT_VERSION))
    cfg = asdict(net.config)
    for name, fmt in _config_codec():
        buf.write(struct.pack(fmt, cfg[name]))
    buf.write(struct.pack("<I", len(net.params)))
    for name, p in net.params.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<Q", p.size))
        buf.write(p.data.astype("<f8").tobytes())
    return buf.getvalue()


def net_from_bytes(blob: bytes) -> DenoiserNet:
    try:
        return _parse_checkpoint(memoryview(blob), len(blob))
    except struct.error as exc:
        raise ValueError(f"truncated checkpoint ({len(blob)} bytes)") from exc


def _parse_checkpoint(view: memoryview, size: int) -> DenoiserNet:
    if bytes(view[:4]) != MAGIC:
        raise ValueError("not a MeLISA checkpoint (bad magic)")
    (version,) = struct.unpack_from("<H", view, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off = 6
    kw = {}
    for name, fmt in _config_codec():
        (val,) = struct.unpack_from(fmt, view, off)
        off += struct.calcsize(fmt)
        kw[name] = bool(val) if fmt == "<B" else val
    net = DenoiserNet(NetConfig(**kw))
    (count,) = struct.unpack_from("<I", view, off)
    off += 4
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", view, off)
        off += 4
        name = bytes(view[off:off + nlen]).decode("utf-8")
        off += nlen
        (n,) = struct.unpack_from("<Q", view, off)
        off += 8
        arrays[name] = np.frombuffer(view[off:off + 8 * n], dtype="<f8").astype(np.float64)
        off += 8 * n
    if off > size:
        raise ValueError(f"truncated checkpoint ({size} bytes)")
    if off != size:
        raise ValueError(f"trailing bytes in checkpoint ({size - off})")
    if set(arrays) != set(net.params):
        raise ValueError("checkpoint parameter names do not match its config")
    net.load_arrays({k: arrays[k].reshape(net.params[k].shape) for k in net.params})
    return net


def save_checkpoint(net: DenoiserNet, path) -> None:
    atomic_write_bytes(Path(path), checkpoint_bytes(net))


def load_checkpoint(path) -> DenoiserNet:
    return net_from_bytes(Path(path).read_bytes())
