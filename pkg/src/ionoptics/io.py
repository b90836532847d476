"""Frame files: 16-bit binary PGM (or .npy) plus a JSON sidecar."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .diffraction import Frame
from .errors import ConfigurationError

__all__ = ["write_frame", "read_frame", "sidecar_path", "write_pgm16", "read_pgm16", "dump_json"]

MAXVAL = 65535


def sidecar_path(path) -> Path:
    return Path(path).with_suffix(".json")


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def write_pgm16(path, data: np.ndarray):
    data = np.asarray(data)
    h, w = data.shape
    header = f"P5\n{w} {h}\n{MAXVAL}\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(data.astype(">u2").tobytes())


def _tokens(buf: bytes, count: int):
    out, pos = [], 0
    while len(out) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ConfigurationError("truncated PGM header")
        out.append(buf[start:pos])
    return out, pos + 1


def read_pgm16(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    (magic, w, h, maxval), offset = _tokens(buf, 4)
    if magic != b"P5":
        raise ConfigurationError(f"{path}: not a binary PGM (magic {magic!r})")
    w, h, maxval = int(w), int(h), int(maxval)
    dtype = ">u2" if maxval > 255 else "u1"
    n = w * h * np.dtype(dtype).itemsize
    if len(buf) - offset < n:
        raise ConfigurationError(f"{path}: PGM payload is truncated")
    return np.frombuffer(buf, dtype=dtype, count=w * h, offset=offset).reshape(h, w).astype(float)


def _is_counts(values: np.ndarray) -> bool:
    return bool(np.all(values == np.rint(values)) and values.max(initial=0) <= MAXVAL)


def write_frame(frame: Frame, path) -> Path:
    """Write a frame and its sidecar; returns the sidecar path.

    ``.pgm`` stores intensities scaled so the maximum maps to 65535, except
    integer detector counts which are stored as-is. ``.npy`` is lossless.
    """
    path = Path(path)
    v = frame.values
    if path.suffix == ".npy":
        with open(path, "wb") as fh:
            np.save(fh, np.ascontiguousarray(v, dtype="<f8"))
        fmt, scale = "npy", 1.0
    else:
        if frame.plane == "detector" and _is_counts(v):
            scale = 1.0
        else:
            peak = float(v.max())
            scale = peak / MAXVAL if peak > 0 else 1.0
        write_pgm16(path, np.clip(np.rint(v / scale), 0, MAXVAL))
        fmt = "pgm16"
    side = {
        "format": fmt,
        "width": frame.width,
        "height": frame.height,
        "pixel_pitch_um": frame.pixel_pitch_um,
        "plane": frame.plane,
        "magnification": frame.magnification,
        "scale": scale,
        "meta": frame.meta,
    }
    sp = sidecar_path(path)
    sp.write_text(dump_json(side))
    return sp


def read_frame(path) -> Frame:
    path = Path(path)
    sp = sidecar_path(path)
    try:
        side = json.loads(sp.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{sp}: malformed sidecar at line {exc.lineno}: {exc.msg}") from exc
    required = {"pixel_pitch_um", "plane", "scale"}
    if not required <= set(side):
        raise ConfigurationError(f"{sp}: sidecar missing keys {sorted(required - set(side))}")
    if path.suffix == ".npy":
        values = np.load(path, allow_pickle=False)
    else:
        values = read_pgm16(path) * float(side["scale"])
    return Frame(values, float(side["pixel_pitch_um"]), plane=side["plane"],
                 magnification=float(side.get("magnification", 1.0)), meta=side.get("meta", {}))
