"""Dense matrix files: CSV and a fixed-layout binary format.

Both formats round-trip float64 matrices exactly.  CSV uses repr-precision
decimal text, one row per line, and is locale independent.  The binary
layout is a 16-byte header (8-byte magic ``MADMMBIN``, uint32 row count,
uint32 column count, both little endian) followed by the entries as
little-endian float64 in row-major order.  Writers go through a temporary
file in the destination directory and an atomic rename, so a crashed or
failed write never leaves a partial file behind.
"""

from __future__ import annotations

import os
import struct
import tempfile

import numpy as np

MAGIC = b"MADMMBIN"
_HEADER = struct.Struct("<8sII")


def _as_matrix(values) -> np.ndarray:
    M = np.asarray(values, dtype=float)
    if M.ndim == 1:
        M = M.reshape(1, -1)
    if M.ndim != 2:
        raise ValueError(f"expected a matrix, got {M.ndim} dimensions")
    return M


def _atomic_write(path: str, payload: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".madmm-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def save_matrix(path: str, values) -> None:
    """Write a matrix as .csv or .bin, decided by the file extension."""
    M = _as_matrix(values)
    ext = os.path.splitext(path)[1].lower()
    if ext == ".csv":
        lines = [",".join(repr(float(x)) for x in row) for row in M]
        payload = ("\n".join(lines) + "\n").encode("ascii")
    elif ext == ".bin":
        payload = (_HEADER.pack(MAGIC, M.shape[0], M.shape[1])
                   + np.ascontiguousarray(M, dtype="<f8").tobytes())
    else:
        raise ValueError(f"unsupported matrix extension {ext!r}; "
                         "use .csv or .bin")
    _atomic_write(path, payload)


def load_matrix(path: str) -> np.ndarray:
    """Read a matrix written by save_matrix; always returns a 2-D array."""
    ext = os.path.splitext(path)[1].lower()
    if ext not in (".csv", ".bin"):
        raise ValueError(
            f"unsupported matrix extension {ext!r}; use .csv or .bin")
    with open(path, "rb") as fh:
        raw = fh.read()
    if ext == ".csv":
        rows = []
        for ln, line in enumerate(raw.decode("ascii").splitlines(), start=1):
            if not line.strip():
                continue
            try:
                rows.append([float(tok) for tok in line.split(",")])
            except ValueError:
                raise ValueError(f"{path}: line {ln} is not numeric CSV")
        if not rows:
            raise ValueError(f"{path}: no rows")
        width = len(rows[0])
        if any(len(r) != width for r in rows):
            raise ValueError(f"{path}: rows have inconsistent lengths")
        return np.array(rows, dtype=float)
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated header")
    magic, nrows, ncols = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    body = raw[_HEADER.size:]
    expected = 8 * nrows * ncols
    if len(body) != expected:
        raise ValueError(f"{path}: expected {expected} payload bytes, "
                         f"found {len(body)}")
    return np.frombuffer(body, dtype="<f8").astype(float).reshape(
        nrows, ncols)


def save_text(path: str, text: str) -> None:
    """Write text (CSV, JSON) with the same atomic discipline."""
    _atomic_write(path, text.encode("utf-8"))
