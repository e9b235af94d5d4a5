"""Binary PGM images/masks, heatmaps, raw CSV fields and the dataset directory layout."""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .data import LabeledSample


class PGMError(ValueError):
    pass


def write_pgm(path, array: np.ndarray, maxval: int | None = None) -> None:
    """Write a P5 file.

    Float arrays are treated as images in [0,1] (quantised to round(x*255));
    integer arrays are written raw with ``maxval`` (default: their maximum, at least 1).
    """
    arr = np.asarray(array)
    if arr.ndim != 2:
        raise PGMError(f"PGM needs a 2-D array, got shape {arr.shape}")
    if np.issubdtype(arr.dtype, np.floating):
        maxval = 255 if maxval is None else maxval
        raw = np.rint(np.clip(arr, 0.0, 1.0) * maxval).astype(np.int64)
    else:
        raw = arr.astype(np.int64)
        maxval = max(int(raw.max(initial=0)), 1) if maxval is None else maxval
    if not 1 <= maxval <= 65535:
        raise PGMError(f"maxval must be in 1..65535, got {maxval}")
    if raw.size and (raw.min() < 0 or raw.max() > maxval):
        raise PGMError(f"values {raw.min()}..{raw.max()} exceed maxval {maxval}")
    dtype = ">u2" if maxval > 255 else "u1"
    header = f"P5\n{arr.shape[1]} {arr.shape[0]}\n{maxval}\n".encode("ascii")
    Path(path).write_bytes(header + raw.astype(dtype).tobytes())


def _tokens(data: bytes, count: int):
    """Read ``count`` whitespace-separated header tokens, skipping # comments."""
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos >= len(data):
            raise PGMError("truncated PGM header")
        if data[pos:pos + 1] == b"#":
            end = data.find(b"\n", pos)
            pos = len(data) if end < 0 else end + 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    return tokens, pos + 1


def read_pgm(path, expected_maxval: int | None = None) -> tuple[np.ndarray, int]:
    """Return ``(raw integer array, maxval)`` from a P5 file."""
    data = Path(path).read_bytes()
    tokens, pos = _tokens(data, 4)
    if tokens[0] != b"P5":
        raise PGMError(f"{path}: expected magic P5, got {tokens[0]!r}")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise PGMError(f"{path}: malformed header {tokens[1:]!r}") from None
    if width < 1 or height < 1 or not 1 <= maxval <= 65535:
        raise PGMError(f"{path}: invalid header values width={width} height={height} maxval={maxval}")
    if expected_maxval is not None and maxval != expected_maxval:
        raise PGMError(f"{path}: maxval {maxval} differs from expected {expected_maxval}")
    dtype = ">u2" if maxval > 255 else "u1"
    n = width * height * np.dtype(dtype).itemsize
    if len(data) - pos < n:
        raise PGMError(f"{path}: pixel data truncated ({len(data) - pos} of {n} bytes)")
    raw = np.frombuffer(data, dtype=dtype, count=width * height, offset=pos)
    return raw.reshape(height, width).astype(np.int64), maxval


def read_image(path) -> np.ndarray:
    raw, maxval = read_pgm(path)
    return (raw / maxval).astype(np.float32)


def read_mask(path, num_classes: int | None = None) -> np.ndarray:
    raw, maxval = read_pgm(path, None if num_classes is None else num_classes - 1)
    return raw


def _sidecar(path) -> Path:
    return Path(str(path) + ".txt")


def write_heatmap(path, field: np.ndarray, channel: str = "combined") -> tuple[float, float]:
    """Min-max normalise ``field`` to 0..255; (min, max) go to ``<path>.txt``."""
    field = np.asarray(field, dtype=np.float64)
    lo, hi = float(field.min()), float(field.max())
    if hi > lo:
        scaled = np.rint((field - lo) / (hi - lo) * 255)
    else:
        scaled = np.zeros(field.shape)
    write_pgm(path, scaled.astype(np.int64), maxval=255)
    _sidecar(path).write_text(f"channel={channel}\nmin={lo:.9g}\nmax={hi:.9g}\n")
    return lo, hi


def read_heatmap_range(path) -> tuple[float, float]:
    items = dict(line.split("=", 1) for line in _sidecar(path).read_text().splitlines() if "=" in line)
    return float(items["min"]), float(items["max"])


def write_field_csv(path, field: np.ndarray) -> None:
    field = np.atleast_2d(np.asarray(field, dtype=np.float64))
    lines = (",".join(f"{x:.9g}" for x in row) for row in field)
    Path(path).write_text("\n".join(lines) + "\n")


def read_field_csv(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", ndmin=2)


MANIFEST = "manifest.txt"


def write_dataset(directory, samples, num_classes: int, force: bool = False) -> Path:
    """Write ``images/NNNN.pgm``, ``masks/NNNN.pgm`` and ``manifest.txt``."""
    directory = Path(directory)
    if directory.exists() and any(directory.iterdir()) and not force:
        raise FileExistsError(f"{directory} exists and is not empty (use force to overwrite)")
    (directory / "images").mkdir(parents=True, exist_ok=True)
    (directory / "masks").mkdir(parents=True, exist_ok=True)
    lines = []
    for i, sample in enumerate(samples):
        if isinstance(sample, tuple):
            sample = sample[0]
        img_rel, mask_rel = f"images/{i:04d}.pgm", f"masks/{i:04d}.pgm"
        write_pgm(directory / img_rel, sample.image)
        write_pgm(directory / mask_rel, sample.mask, maxval=num_classes - 1)
        lines.append(f"{img_rel}\t{mask_rel}\n")
    manifest = directory / MANIFEST
    manifest.write_text("".join(lines))
    return manifest


def read_dataset(directory) -> tuple[list[LabeledSample], int]:
    """Load a dataset directory; the class count is taken from the mask maxval."""
    directory = Path(directory)
    manifest = directory / MANIFEST
    if not manifest.is_file():
        raise FileNotFoundError(f"missing manifest: {manifest}")
    samples, num_classes = [], None
    for lineno, line in enumerate(manifest.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ValueError(f"{manifest}:{lineno}: expected image_path<TAB>mask_path")
        img_path, mask_path = (directory / p if not os.path.isabs(p) else Path(p) for p in parts)
        for p in (img_path, mask_path):
            if not p.is_file():
                raise FileNotFoundError(f"{manifest}:{lineno}: missing file {p}")
        raw, maxval = read_pgm(mask_path, None if num_classes is None else num_classes - 1)
        num_classes = maxval + 1
        samples.append(LabeledSample(read_image(img_path), raw))
    return samples, (num_classes or 0)
