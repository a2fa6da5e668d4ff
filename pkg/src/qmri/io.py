"""On-disk formats: QMV1 volume files, JSON sidecars, CSV reports and PGM maps.

QMV1 layout, all integers little-endian u32::

    b"QMV1" | version | ndim | dims[ndim] | channels | dtype | mask_flag
    payload: channels rasters, channel-major, each row-major (x fastest),
             little-endian float32 (dtype 0) or float64 (dtype 1)
    mask:    prod(dims) bytes of 0/1, present when mask_flag == 1

For 2D rasters ``dims = (width, height)``.
"""

from __future__ import annotations

import csv
import io as _io
import json
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable

import numpy as np

from .core import ContrastStack, PropertyMap, Protocol

VOLUME_MAGIC = b"QMV1"
VOLUME_VERSION = 1
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}


class FormatError(ValueError):
    pass


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    """Write to a temporary file in the target directory, then rename over ``path``."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def write_json(path: str | os.PathLike, obj: Any) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path: str | os.PathLike) -> Any:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


# --------------------------------------------------------------------------
# Volumes


@dataclass(eq=False)
class Volume:
    """Raw volume contents: ``data`` has shape (channels, *reversed(dims))."""

    data: np.ndarray
    mask: np.ndarray | None = None


def encode_volume(data: np.ndarray, mask: np.ndarray | None = None, dtype: str = "float64") -> bytes:
    """Encode a (channels, height, width) array (or (channels, *spatial)) as QMV1 bytes."""
    dt = np.dtype(dtype).newbyteorder("<")
    if dt not in DTYPE_CODES:
        raise FormatError(f"unsupported dtype {dtype}")
    arr = np.asarray(data)
    if arr.ndim < 2:
        raise FormatError("volume data needs a channel axis and at least one spatial axis")
    spatial = arr.shape[1:]
    dims = tuple(reversed(spatial))
    head = struct.pack(f"<4sII{len(dims)}IIII", VOLUME_MAGIC, VOLUME_VERSION, len(dims), *dims,
                       arr.shape[0], DTYPE_CODES[dt], 0 if mask is None else 1)
    payload = np.ascontiguousarray(arr, dtype=dt).tobytes()
    tail = b""
    if mask is not None:
        m = np.asarray(mask, dtype=bool)
        if m.shape != spatial:
            raise FormatError(f"mask shape {m.shape} differs from raster shape {spatial}")
        tail = np.ascontiguousarray(m, dtype=np.uint8).tobytes()
    return head + payload + tail


def decode_volume(blob: bytes) -> Volume:
    if len(blob) < 12 or blob[:4] != VOLUME_MAGIC:
        raise FormatError("not a QMV1 volume (bad magic)")
    version, ndim = struct.unpack_from("<II", blob, 4)
    if version != VOLUME_VERSION:
        raise FormatError(f"unsupported volume version {version}")
    off = 12
    dims = struct.unpack_from(f"<{ndim}I", blob, off)
    off += 4 * ndim
    channels, code, has_mask = struct.unpack_from("<III", blob, off)
    off += 12
    if code not in DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    dt = DTYPES[code]
    spatial = tuple(reversed(dims))
    n = int(np.prod(spatial)) if spatial else 0
    expected = off + channels * n * dt.itemsize + (n if has_mask else 0)
    if len(blob) != expected:
        raise FormatError(f"volume has {len(blob)} bytes, header implies {expected}")
    data = np.frombuffer(blob, dtype=dt, count=channels * n, offset=off).reshape((channels, *spatial))
    mask = None
    if has_mask:
        mask = np.frombuffer(blob, dtype=np.uint8, count=n, offset=off + channels * n * dt.itemsize)
        mask = mask.reshape(spatial).astype(bool)
    return Volume(data.copy(), mask)


def write_volume(path, data, mask=None, dtype: str = "float64") -> None:
    atomic_write_bytes(path, encode_volume(data, mask, dtype))


def read_volume(path) -> Volume:
    with open(path, "rb") as fh:
        return decode_volume(fh.read())


def _sidecar(path) -> Path:
    return Path(str(path) + ".json")


def write_property_map(path, props: PropertyMap, extra: dict | None = None) -> None:
    """Three float64 channels (T1 ms, T2* ms, PD) plus the foreground mask if any."""
    data = np.stack([props.t1_ms, props.t2s_ms, props.pd])
    write_volume(path, data, props.mask, "float64")
    meta = {"kind": "property_map", "channels": ["t1_ms", "t2s_ms", "pd"]}
    meta.update(extra or {})
    write_json(_sidecar(path), meta)


def read_property_map(path) -> PropertyMap:
    vol = read_volume(path)
    if vol.data.shape[0] != 3 or vol.data.ndim != 3:
        raise FormatError(f"{path}: a property map needs 3 channels of 2D rasters")
    return PropertyMap(vol.data[0], vol.data[1], vol.data[2], vol.mask)


def write_stack(path, stack: ContrastStack, dtype: str = "float64", extra: dict | None = None) -> None:
    write_volume(path, stack.intensities, None, dtype)
    meta = {"kind": "contrast_stack", "protocol": stack.protocol.to_dict(), "noisy": stack.noisy}
    meta.update(extra or {})
    write_json(_sidecar(path), meta)


def read_stack(path) -> ContrastStack:
    vol = read_volume(path)
    side = _sidecar(path)
    if not side.exists():
        raise FileNotFoundError(f"missing protocol sidecar {side}")
    meta = read_json(side)
    return ContrastStack(vol.data.astype(np.float64), Protocol.from_dict(meta["protocol"]), bool(meta.get("noisy")))


# --------------------------------------------------------------------------
# Reports


def csv_text(rows: Iterable[Iterable[Any]], header: Iterable[str]) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(list(header))
    for row in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return buf.getvalue()


def write_csv(path, rows, header) -> None:
    atomic_write_text(path, csv_text(rows, header))


def encode_pgm(image: np.ndarray, vmin: float | None = None, vmax: float | None = None) -> tuple[bytes, dict]:
    """8-bit binary PGM; the window used for scaling is returned for the sidecar."""
    img = np.asarray(image, dtype=np.float64)
    lo = float(img.min()) if vmin is None else float(vmin)
    hi = float(img.max()) if vmax is None else float(vmax)
    span = hi - lo if hi > lo else 1.0
    q = np.clip(np.round((img - lo) / span * 255.0), 0, 255).astype(np.uint8)
    h, w = q.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + q.tobytes(), {"min": lo, "max": hi}


def write_pgm(path, image, vmin=None, vmax=None) -> None:
    blob, window = encode_pgm(image, vmin, vmax)
    atomic_write_bytes(path, blob)
    write_json(_sidecar(path), {"window": window, "levels": 255})


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    parts = blob.split(b"\n", 3)
    if parts[0] != b"P5":
        raise FormatError("not a binary PGM")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8, count=w * h).reshape(h, w)
