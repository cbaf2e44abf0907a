"""Files: trajectory container, manifests, key=value configs, atomic writes.

Trajectory layout (little-endian)::

    "MLTR" | u16 version | u32 B, T, C, H, W | u8 dtype tag (1 = f64)
    | payload, row-major f64 | u32 CRC32 of payload
"""

from __future__ import annotations

import dataclasses
import json
import os
import struct
import tempfile
import zlib
from pathlib import Path

import numpy as np

TRAJ_MAGIC = b"MLTR"
TRAJ_VERSION = 1
DTYPE_F64 = 1
_HEADER = struct.Struct("<4sH5IB")


class DataFormatError(ValueError):
    """A data file is missing, truncated or corrupt."""


class ConfigError(ValueError):
    """A configuration file or value is invalid."""


def atomic_write_bytes(path, data: bytes) -> None:
    """Write via a temporary file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


# -- trajectories ------------------------------------------------------------------


def trajectory_bytes(data: np.ndarray) -> bytes:
    data = np.asarray(data)
    if data.ndim != 5:
        raise ValueError(f"trajectory arrays are (B, T, C, H, W), got shape {data.shape}")
    payload = np.ascontiguousarray(data, dtype="<f8").tobytes()
    head = _HEADER.pack(TRAJ_MAGIC, TRAJ_VERSION, *data.shape, DTYPE_F64)
    return head + payload + struct.pack("<I", zlib.crc32(payload))


def trajectory_from_bytes(blob: bytes, name: str = "<bytes>") -> np.ndarray:
    if len(blob) < _HEADER.size + 4:
        raise DataFormatError(f"{name}: truncated header ({len(blob)} bytes)")
    magic, version, b, t, c, h, w, tag = _HEADER.unpack_from(blob, 0)
    if magic != TRAJ_MAGIC:
        raise DataFormatError(f"{name}: bad magic {magic!r} at offset 0")
    if version != TRAJ_VERSION:
        raise DataFormatError(f"{name}: unsupported version {version} at offset 4")
    if tag != DTYPE_F64:
        raise DataFormatError(f"{name}: unknown dtype tag {tag} at offset {_HEADER.size - 1}")
    n = b * t * c * h * w * 8
    end = _HEADER.size + n
    if len(blob) != end + 4:
        raise DataFormatError(
            f"{name}: expected {end + 4} bytes for shape {(b, t, c, h, w)}, found {len(blob)}")
    payload = blob[_HEADER.size:end]
    (crc,) = struct.unpack_from("<I", blob, end)
    if zlib.crc32(payload) != crc:
        raise DataFormatError(f"{name}: CRC mismatch for payload at offset {_HEADER.size} "
                              f"(checksum stored at offset {end})")
    return np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(b, t, c, h, w)


def write_trajectories(path, data: np.ndarray) -> int:
    """Write and return the payload CRC32."""
    blob = trajectory_bytes(data)
    atomic_write_bytes(path, blob)
    return struct.unpack("<I", blob[-4:])[0]


def read_trajectories(path) -> np.ndarray:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise DataFormatError(f"{path}: cannot read ({exc.strerror})") from exc
    return trajectory_from_bytes(blob, str(path))


# -- manifests ---------------------------------------------------------------------


def write_manifest(path, record: dict) -> None:
    atomic_write_text(path, json.dumps(record, indent=2, sort_keys=True) + "\n")


def read_manifest(path) -> dict:
    path = Path(path)
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise DataFormatError(f"manifest not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{path}: invalid manifest ({exc.msg} at line {exc.lineno})") from exc


# -- configs -------------------------------------------------------------------------


def parse_config(text: str, source: str = "<config>") -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def load_config(path) -> dict[str, str]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    return parse_config(text, str(path))


def _convert(value: str, kind, key: str):
    kind = kind if isinstance(kind, str) else getattr(kind, "__name__", str(kind))
    try:
        if kind == "bool":
            low = value.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return low in ("true", "1", "yes")
        if kind == "int":
            return int(value)
        if kind == "float":
            if "/" in value:
                num, den = value.split("/", 1)
                return float(num) / float(den)
            return float(value)
        if kind == "tuple":
            return tuple(float(v) for v in value.replace(",", " ").split())
        return value
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot read {value!r} as {kind}") from exc


def bind(cls, raw: dict[str, str], prefix: str = ""):
    """Build dataclass ``cls`` from the ``raw`` keys naming its fields.

    Returns (instance, consumed keys). Keys are ``prefix + field name``.
    """
    kwargs = {}
    used = set()
    for f in dataclasses.fields(cls):
        key = prefix + f.name
        if key in raw:
            kwargs[f.name] = _convert(raw[key], f.type, key)
            used.add(key)
    try:
        return cls(**kwargs), used
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {cls.__name__}: {exc}") from exc
