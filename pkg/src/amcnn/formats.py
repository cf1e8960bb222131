"""Readers and writers for the on-disk formats.

* density maps: ``DMAP v1 <H> <W> <scale>`` header line, then little-endian float64, row-major
* perspective maps: ``PMAP v1 <H> <W>`` header line, then little-endian float64
* annotations and ROI polygons: one ``x,y`` pair per line
* images: binary PGM (P5) / PPM (P6), 8 or 16 bit
"""

from __future__ import annotations

import os
import re

import numpy as np

from .errors import AnnotationFormatError, DataError

_LE_F64 = np.dtype("<f8")


def _write_float_grid(path, header, grid):
    grid = np.ascontiguousarray(grid, dtype=_LE_F64)
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii") + b"\n")
        fh.write(grid.tobytes())


def _read_float_grid(path, magic, n_fields):
    with open(path, "rb") as fh:
        raw = fh.read()
    nl = raw.find(b"\n")
    if nl < 0:
        raise DataError(f"{path}: missing {magic} header line")
    fields = raw[:nl].decode("ascii", errors="replace").split()
    if len(fields) != n_fields or fields[0] != magic or fields[1] != "v1":
        raise DataError(f"{path}: expected '{magic} v1' header, got {raw[:nl][:40]!r}")
    try:
        dims = [int(f) for f in fields[2:]]
    except ValueError:
        raise DataError(f"{path}: non-integer field in header {fields}") from None
    h, w = dims[0], dims[1]
    body = raw[nl + 1:]
    if len(body) != h * w * 8:
        raise DataError(f"{path}: expected {h * w * 8} payload bytes for {h}x{w}, found {len(body)}")
    grid = np.frombuffer(body, dtype=_LE_F64).astype(np.float64).reshape(h, w)
    return grid, dims


def write_dmap(path, grid, scale=1):
    grid = np.asarray(grid)
    _write_float_grid(path, f"DMAP v1 {grid.shape[0]} {grid.shape[1]} {int(scale)}", grid)


def read_dmap(path):
    """Return ``(grid, scale)``."""
    grid, dims = _read_float_grid(path, "DMAP", 5)
    return grid, dims[2]


def write_pmap(path, grid):
    grid = np.asarray(grid)
    _write_float_grid(path, f"PMAP v1 {grid.shape[0]} {grid.shape[1]}", grid)


def read_pmap(path):
    grid, _ = _read_float_grid(path, "PMAP", 4)
    return grid


def read_points(path):
    """Parse ``x,y`` lines into an (n, 2) float array.  Blank lines and ``#`` comments are skipped."""
    pts = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(",")
            if len(parts) != 2:
                raise AnnotationFormatError(path, lineno, f"expected 'x,y', got {line!r}")
            try:
                x, y = float(parts[0]), float(parts[1])
            except ValueError:
                raise AnnotationFormatError(path, lineno, f"non-numeric coordinate in {line!r}") from None
            if not (np.isfinite(x) and np.isfinite(y)):
                raise AnnotationFormatError(path, lineno, f"non-finite coordinate in {line!r}")
            pts.append((x, y))
    return np.array(pts, dtype=np.float64).reshape(-1, 2)


def write_points(path, points):
    with open(path, "w") as fh:
        for x, y in np.asarray(points, dtype=np.float64).reshape(-1, 2):
            fh.write(f"{float(x)!r},{float(y)!r}\n")


_PNM_TOKEN = re.compile(rb"(?:\s*(?:#[^\n]*\n)?)*\s*(\S+)")


def read_pnm(path):
    """Read a binary PGM/PPM.  Returns float array in [0, 1], shape (H, W) or (H, W, 3)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    pos = 0
    tokens = []
    for _ in range(4):
        m = _PNM_TOKEN.match(raw, pos)
        if m is None:
            raise DataError(f"{path}: truncated PNM header")
        tokens.append(m.group(1))
        pos = m.end()
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise DataError(f"{path}: unsupported image type {magic!r}; expected binary PGM (P5) or PPM (P6)")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise DataError(f"{path}: malformed PNM header") from None
    if not 0 < maxval < 65536:
        raise DataError(f"{path}: bad maxval {maxval}")
    pos += 1  # single whitespace byte before the raster
    channels = 3 if magic == b"P6" else 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    n = w * h * channels
    data = raw[pos:pos + n * dtype.itemsize]
    if len(data) != n * dtype.itemsize:
        raise DataError(f"{path}: truncated raster, expected {n * dtype.itemsize} bytes, found {len(data)}")
    img = np.frombuffer(data, dtype=dtype).astype(np.float64) / maxval
    return img.reshape(h, w, 3) if channels == 3 else img.reshape(h, w)


def write_pgm(path, image, maxval=255):
    """Write a [0,1] grayscale array as 8-bit binary PGM."""
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    q = np.rint(img * maxval).astype(np.uint8)
    h, w = q.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n{maxval}\n".encode("ascii"))
        fh.write(q.tobytes())


def write_ppm(path, image, maxval=255):
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    q = np.rint(img * maxval).astype(np.uint8)
    h, w, _ = q.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n{maxval}\n".encode("ascii"))
        fh.write(q.tobytes())


def luminance(rgb):
    rgb = np.asarray(rgb, dtype=np.float64)
    # integer weights keep pure white at exactly 1.0
    return (299.0 * rgb[..., 0] + 587.0 * rgb[..., 1] + 114.0 * rgb[..., 2]) / 1000.0


def stem(path):
    return os.path.splitext(os.path.basename(path))[0]
