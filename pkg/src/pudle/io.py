"""File formats: the two-file matrix pair, long-form CSV, and atomic JSON.

A matrix ``name`` is stored as ``name.bin`` (raw little-endian float64,
row-major) and ``name.meta.json`` with ``rows``, ``cols``, ``dtype``,
``layout`` and the ``sha256`` of the ``.bin`` bytes.
"""

import csv
import hashlib
import json
import os
import tempfile
from pathlib import Path

import numpy as np

_DTYPE = np.dtype("<f8")


class ChecksumMismatch(ValueError):
    pass


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _atomic_write_bytes(path, data: bytes):
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json_atomic(path, obj):
    _atomic_write_bytes(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())


def save_matrix(directory, name, a):
    """Write ``a`` (1-D arrays become a single column) and return the meta dict."""
    a = np.asarray(a, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2:
        raise ValueError("only vectors and matrices can be saved")
    directory = Path(directory)
    data = np.ascontiguousarray(a, dtype=_DTYPE).tobytes(order="C")
    _atomic_write_bytes(directory / f"{name}.bin", data)
    meta = {"rows": int(a.shape[0]), "cols": int(a.shape[1]), "dtype": "f64",
            "layout": "row-major", "sha256": hashlib.sha256(data).hexdigest()}
    write_json_atomic(directory / f"{name}.meta.json", meta)
    return meta


def load_matrix(directory, name, verify=True):
    directory = Path(directory)
    with open(directory / f"{name}.meta.json") as fh:
        meta = json.load(fh)
    if meta.get("dtype") != "f64" or meta.get("layout") != "row-major":
        raise ValueError(f"unsupported matrix encoding in {name}.meta.json: {meta}")
    raw = (directory / f"{name}.bin").read_bytes()
    if verify and hashlib.sha256(raw).hexdigest() != meta["sha256"]:
        raise ChecksumMismatch(f"sha256 of {name}.bin does not match its metadata")
    rows, cols = int(meta["rows"]), int(meta["cols"])
    if len(raw) != rows * cols * 8:
        raise ValueError(f"{name}.bin holds {len(raw)} bytes, expected {rows * cols * 8}")
    return np.frombuffer(raw, dtype=_DTYPE).reshape(rows, cols).astype(float)


def matrix_exists(directory, name):
    directory = Path(directory)
    return (directory / f"{name}.bin").exists() or (directory / f"{name}.meta.json").exists()


def matrix_to_csv(path, a):
    """Long-form ``r,c,value`` export for small matrices."""
    a = np.asarray(a, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["r", "c", "value"])
        for r in range(a.shape[0]):
            for c in range(a.shape[1]):
                w.writerow([r, c, repr(float(a[r, c]))])


def write_rows_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])
