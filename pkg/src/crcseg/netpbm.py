"""Binary PPM (P6) / PGM (P5) readers and writers.

Dependency-free interchange: images quantize to 8-bit RGB, masks store
foreground as 255. Parse failures report the offending file and byte offset.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np


class NetpbmError(ValueError):
    pass


def _quantize(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)


def write_ppm(path: Path | str, image: np.ndarray) -> None:
    """Write a 3×H×W float image in [0,1] as binary P6."""
    if image.ndim != 3 or image.shape[0] != 3:
        raise NetpbmError(f"expected 3xHxW image, got {image.shape}")
    h, w = image.shape[1:]
    payload = _quantize(image).transpose(1, 2, 0).tobytes()
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(payload)


def write_pgm(path: Path | str, mask: np.ndarray) -> None:
    """Write an H×W binary mask as P5 with foreground=255."""
    if mask.ndim != 2:
        raise NetpbmError(f"expected HxW mask, got {mask.shape}")
    h, w = mask.shape
    payload = (np.where(mask > 0, 255, 0).astype(np.uint8)).tobytes()
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (w, h))
        f.write(payload)


def _read_tokens(data: bytes, path: str, count: int) -> tuple[list[bytes], int]:
    """First `count` whitespace-separated header tokens, skipping # comments."""
    tokens: list[bytes] = []
    i = 0
    while len(tokens) < count:
        if i >= len(data):
            raise NetpbmError(f"{path}: truncated header at byte {i}")
        c = data[i:i + 1]
        if c == b"#":
            while i < len(data) and data[i:i + 1] != b"\n":
                i += 1
        elif c.isspace():
            i += 1
        else:
            start = i
            while i < len(data) and not data[i:i + 1].isspace():
                i += 1
            tokens.append(data[start:i])
    return tokens, i + 1  # payload starts after the single whitespace byte


def _read_raw(path: Path | str, magic: bytes) -> tuple[int, int, bytes]:
    path = str(path)
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise NetpbmError(f"{path}: cannot read ({e})") from e
    tokens, offset = _read_tokens(data, path, 4)
    if tokens[0] != magic:
        raise NetpbmError(
            f"{path}: bad magic {tokens[0]!r} at byte 0, expected {magic!r}")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise NetpbmError(f"{path}: non-numeric header field before byte {offset}")
    if maxval != 255:
        raise NetpbmError(f"{path}: unsupported maxval {maxval}")
    channels = 3 if magic == b"P6" else 1
    need = w * h * channels
    payload = data[offset:offset + need]
    if len(payload) != need:
        raise NetpbmError(
            f"{path}: truncated payload at byte {offset + len(payload)}"
            f" (need {need} bytes)")
    return w, h, payload


def read_ppm(path: Path | str) -> np.ndarray:
    """Read binary P6 into a 3×H×W float image in [0,1]."""
    w, h, payload = _read_raw(path, b"P6")
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3)
    return arr.transpose(2, 0, 1).astype(np.float64) / 255.0


def read_pgm(path: Path | str) -> np.ndarray:
    """Read binary P5 into an H×W uint8 mask with values {0,1}."""
    w, h, payload = _read_raw(path, b"P5")
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(h, w)
    return (arr >= 128).astype(np.uint8)
