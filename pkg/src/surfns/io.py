"""Snapshots, CSV tables and run manifests."""

from __future__ import annotations

import csv
import hashlib
import json
import platform
import sys
from pathlib import Path

import numpy as np

from .fields import Field, ScalarField, SymTensorField, TangentField

MAGIC = "SURFNS1"
_KINDS = {1: ScalarField, 3: TangentField, 9: SymTensorField}


class SnapshotError(ValueError):
    """A snapshot file does not match the expected format or atlas."""


def write_snapshot(path, field: Field) -> Path:
    """Header line ``SURFNS1 <kind> <nchart> <n1> <n2> <ncomp>`` then little-endian float64 values."""
    atlas = field.atlas
    n1, n2 = atlas.charts[0].shape
    ncomp = int(np.prod(field.value_shape, dtype=int))
    header = f"{MAGIC} {atlas.kind} {len(atlas.charts)} {n1} {n2} {ncomp}\n"
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(np.ascontiguousarray(field.values, dtype="<f8").tobytes())
    return path


def read_snapshot(path, atlas) -> Field:
    """Inverse of ``write_snapshot``; values are restored bit-exactly (no re-exchange)."""
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii", errors="replace").split()
        payload = fh.read()
    if len(header) != 6 or header[0] != MAGIC:
        raise SnapshotError(f"{path}: not a {MAGIC} snapshot")
    kind, nchart, n1, n2, ncomp = header[1], int(header[2]), int(header[3]), int(header[4]), int(header[5])
    if kind != atlas.kind or nchart != len(atlas.charts) or (n1, n2) != atlas.charts[0].shape:
        raise SnapshotError(f"{path}: snapshot of {kind} {nchart}x{n1}x{n2} does not match atlas")
    if ncomp not in _KINDS:
        raise SnapshotError(f"{path}: unsupported component count {ncomp}")
    cls = _KINDS[ncomp]
    vals = np.frombuffer(payload, dtype="<f8")
    expected = atlas.n_nodes * ncomp
    if vals.size != expected:
        raise SnapshotError(f"{path}: expected {expected} values, found {vals.size}")
    vals = vals.astype(float).reshape((atlas.n_nodes,) + cls.value_shape)
    out = object.__new__(cls)
    out.atlas = atlas
    out.values = vals
    return out


def format_float(x) -> str:
    """Shortest round-trip representation (bit-exact when parsed back)."""
    return repr(float(x))


def write_csv(path, rows, columns) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            w.writerow([format_float(r[c]) if isinstance(r[c], (float, np.floating)) else r[c]
                        for c in columns])
    return path


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(path, config: dict, inputs=(), outputs=(), extra=None) -> Path:
    """JSON manifest: config echo, content hash of config and input files, versions."""
    import scipy

    from . import __version__

    canonical = json.dumps(config, sort_keys=True)
    h = hashlib.sha256(canonical.encode())
    input_hashes = {}
    for p in inputs:
        digest = file_sha256(p)
        input_hashes[str(p)] = digest
        h.update(digest.encode())
    manifest = {
        "config": config,
        "content_hash": h.hexdigest(),
        "inputs": input_hashes,
        "outputs": {str(Path(p).name): file_sha256(p) for p in outputs if Path(p).exists()},
        "versions": {
            "surfns": __version__,
            "python": sys.version.split()[0],
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "platform": platform.platform(),
        },
    }
    if extra:
        manifest.update(extra)
    path = Path(path)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path
