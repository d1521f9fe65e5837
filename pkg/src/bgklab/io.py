"""CSV and binary serialization of trajectories and density snapshots.

Binary trajectory layout (all little-endian):

    header  <8s I I I I Q I I>  magic b"BGKTRJ01", version, N, d, manifold code,
                               seed, coordinate width, number of records
    record  float64 replica, float64 t, then N rows of d position values
            followed by the orientation coordinates (row-major)

``d = 0`` marks orientation-only (space-homogeneous) trajectories.
"""
from __future__ import annotations

import csv
import struct

import numpy as np

from .geometry import KINDS

MAGIC = b"BGKTRJ01"
VERSION = 1
HEADER = struct.Struct("<8sIIIIQII")
MANIFOLD_CODES = {kind: code for code, kind in enumerate(KINDS)}


def _fmt(v):
    return repr(float(v))


def trajectory_rows(replica, t, positions, coords):
    n = len(coords)
    coords = np.asarray(coords, dtype=float).reshape(n, -1)
    pos = np.zeros((n, 0)) if positions is None else np.asarray(positions, dtype=float).reshape(n, -1)
    for i in range(n):
        yield [int(replica), _fmt(t), i, *map(_fmt, pos[i]), *map(_fmt, coords[i])]


def write_trajectory_csv(path, records, d, coord_dim):
    """``records`` yields (replica, t, positions or None, coords)."""
    header = ["replica", "t", "agent", *[f"x{k}" for k in range(d)], *[f"m{k}" for k in range(coord_dim)]]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for replica, t, positions, coords in records:
            w.writerows(trajectory_rows(replica, t, positions, coords))


def read_trajectory_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        r = csv.reader(fh)
        header = next(r)
        data = np.array([[float(v) for v in row] for row in r])
    return header, data


def write_trajectory_binary(path, records, n, d, kind, seed, coord_dim):
    records = list(records)
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, VERSION, n, d, MANIFOLD_CODES[kind], int(seed), coord_dim, len(records)))
        for replica, t, positions, coords in records:
            coords = np.asarray(coords, dtype="<f8").reshape(n, coord_dim)
            if d:
                block = np.concatenate([np.asarray(positions, dtype="<f8").reshape(n, d), coords], axis=1)
            else:
                block = coords
            fh.write(np.array([replica, t], dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(block, dtype="<f8").tobytes())


def read_trajectory_binary(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    magic, version, n, d, code, seed, coord_dim, count = HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise ValueError("not a trajectory record file")
    header = {
        "version": version,
        "N": n,
        "d": d,
        "manifold": KINDS[code],
        "seed": seed,
        "coord_dim": coord_dim,
        "n_records": count,
    }
    width = 2 + n * (d + coord_dim)
    body = np.frombuffer(raw, dtype="<f8", offset=HEADER.size)
    if body.size != width * count:
        raise ValueError("truncated trajectory record file")
    body = body.reshape(count, width)
    rows = body[:, 2:].reshape(count, n, d + coord_dim)
    return header, body[:, 0], body[:, 1], rows[..., :d], rows[..., d:]


def write_density_csv(path, f):
    """Columns: cell indices i0.., node index, value."""
    d = f.d
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([*[f"i{k}" for k in range(d)], "node", "value"])
        for idx in np.ndindex(*f.values.shape):
            w.writerow([*idx, _fmt(f.values[idx])])


def read_density_csv(path, shape):
    with open(path, newline="", encoding="utf-8") as fh:
        r = csv.reader(fh)
        next(r)
        out = np.empty(shape)
        for row in r:
            out[tuple(int(v) for v in row[:-1])] = float(row[-1])
    return out
