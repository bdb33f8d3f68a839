"""On-disk formats: dataset binary/CSV files and trajectory CSV.

Binary dataset layout (little-endian)::

    magic    4 bytes   b"RSDS"
    version  uint16    1
    family   uint8     0 classification, 1 robust-regression, 2 gmm2
    response uint8     0 none, 1 binary, 2 real
    n        uint64
    d        uint64
    body     n rows of float64, row-major; each row is the d features
             followed by the response when the response kind is not none

The CSV form has one row per sample with the response in the last column
and a header ``x0,...,x{d-1}[,y]``.
"""
from __future__ import annotations

import csv
import struct
from pathlib import Path

import numpy as np

from .errors import InvalidInput
from .models import Dataset

MAGIC = b"RSDS"
VERSION = 1
_HEADER = struct.Struct("<4sHBBQQ")
FAMILY_TAGS = {"classification": 0, "robust-regression": 1, "gmm2": 2}
RESPONSE_KINDS = {"classification": 1, "robust-regression": 2, "gmm2": 0}


def dataset_to_bytes(data: Dataset) -> bytes:
    header = _HEADER.pack(MAGIC, VERSION, FAMILY_TAGS[data.family], RESPONSE_KINDS[data.family], data.n, data.d)
    body = data.features
    if data.responses is not None:
        body = np.column_stack([body, data.responses])
    return header + np.ascontiguousarray(body, dtype="<f8").tobytes()


def dataset_from_bytes(buf: bytes) -> Dataset:
    if len(buf) < _HEADER.size:
        raise InvalidInput("truncated dataset header")
    magic, version, family_tag, kind, n, d = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise InvalidInput(f"bad magic {magic!r}")
    if version != VERSION:
        raise InvalidInput(f"unsupported dataset version {version}")
    families = {v: k for k, v in FAMILY_TAGS.items()}
    if family_tag not in families:
        raise InvalidInput(f"unknown family tag {family_tag}")
    family = families[family_tag]
    if kind != RESPONSE_KINDS[family]:
        raise InvalidInput(f"response kind {kind} inconsistent with family {family}")
    width = d + (kind != 0)
    expected = _HEADER.size + 8 * n * width
    if len(buf) != expected:
        raise InvalidInput(f"dataset body has {len(buf)} bytes, expected {expected}")
    body = np.frombuffer(buf, dtype="<f8", offset=_HEADER.size).reshape(n, width)
    if kind == 0:
        return Dataset(body.copy(), None, family)
    return Dataset(body[:, :d].copy(), body[:, d].copy(), family)


def _is_binary_path(path) -> bool:
    return Path(path).suffix.lower() not in (".csv", ".txt")


def save_dataset(data: Dataset, path) -> None:
    """Write a dataset; ``.csv`` paths get CSV, anything else the binary form."""
    path = Path(path)
    if _is_binary_path(path):
        path.write_bytes(dataset_to_bytes(data))
        return
    header = [f"x{j}" for j in range(data.d)]
    rows = data.features
    if data.responses is not None:
        header.append("y")
        rows = np.column_stack([rows, data.responses])
    with path.open("w", newline="") as fh:
        fh.write(f"# family={data.family}\n")
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(float(v)) for v in row])


def load_dataset(path, family: str | None = None) -> Dataset:
    path = Path(path)
    if _is_binary_path(path):
        data = dataset_from_bytes(path.read_bytes())
        if family is not None and family != data.family:
            raise InvalidInput(f"file holds a {data.family} dataset, not {family}")
        return data
    with path.open(newline="") as fh:
        lines = fh.read().splitlines()
    if lines and lines[0].startswith("# family="):
        family = family or lines[0].split("=", 1)[1].strip()
        lines = lines[1:]
    if family is None:
        raise InvalidInput("CSV dataset has no family comment; pass family explicitly")
    reader = csv.reader(lines)
    header = next(reader, None)
    if header is None:
        raise InvalidInput("empty CSV dataset")
    rows = np.array([[float(v) for v in row] for row in reader if row], dtype=float)
    if rows.size == 0:
        rows = rows.reshape(0, len(header))
    has_y = header[-1] == "y"
    if has_y:
        return Dataset(rows[:, :-1], rows[:, -1], family)
    return Dataset(rows, None, family)


def save_trajectory_csv(traj, path, reference=None) -> None:
    """Columns ``k, risk, grad_norm, dist_to_reference``.

    The distance column is filled only at iterations whose iterate was stored
    and only when a reference point is given; it is empty otherwise.
    """
    dists = {}
    if reference is not None:
        reference = np.asarray(reference, dtype=float)
        dists = {k: float(np.linalg.norm(x - reference)) for k, x in zip(traj.ks, traj.iterates)}
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["k", "risk", "grad_norm", "dist_to_reference"])
        for k, (rk, gk) in enumerate(zip(traj.risks, traj.grad_norms)):
            dist = dists.get(k)
            writer.writerow([k, repr(float(rk)), repr(float(gk)), "" if dist is None else repr(dist)])
