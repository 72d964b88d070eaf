"""Versioned binary container for models, splits and covariance caches.

Layout: 8-byte magic, uint32 format version, uint64 header length, a JSON
header describing metadata and array records (dtype/shape/offset), then
the raw little-endian array payloads. Writing the same content twice
produces identical bytes, which the determinism contract relies on.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .core import HyperParams, SymmetricSparse

MAGIC = b"PRMFBIN\x00"
FORMAT_VERSION = 1

_ALLOWED_DTYPES = {"<f8", "<i8"}


def write_container(path, kind, meta, arrays):
    """Write metadata plus named float64/int64 arrays to ``path``."""
    records = {}
    payload = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype == np.float64:
            dtype = "<f8"
        elif arr.dtype == np.int64:
            dtype = "<i8"
        else:
            raise ValueError(f"unsupported array dtype {arr.dtype} for {name!r}")
        blob = arr.astype(dtype, copy=False).tobytes()
        records[name] = {"dtype": dtype, "shape": list(arr.shape), "offset": offset,
                         "nbytes": len(blob)}
        payload.append(blob)
        offset += len(blob)
    header = json.dumps(
        {"kind": kind, "meta": meta, "arrays": records},
        sort_keys=True, separators=(",", ":"),
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in payload:
            fh.write(blob)


def read_container(path, kind=None):
    """Read a container; rejects wrong magic, version or kind loudly."""
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise ValueError(f"{path}: not a model container (bad magic)")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != FORMAT_VERSION:
            raise ValueError(
                f"{path}: container format version {version} is not supported "
                f"(expected {FORMAT_VERSION}); refusing to migrate silently"
            )
        (header_len,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        if kind is not None and header.get("kind") != kind:
            raise ValueError(
                f"{path}: container holds {header.get('kind')!r}, expected {kind!r}"
            )
        body = fh.read()
    arrays = {}
    for name, rec in header["arrays"].items():
        if rec["dtype"] not in _ALLOWED_DTYPES:
            raise ValueError(f"{path}: unsupported dtype {rec['dtype']!r}")
        raw = body[rec["offset"]:rec["offset"] + rec["nbytes"]]
        arrays[name] = np.frombuffer(raw, dtype=rec["dtype"]).reshape(rec["shape"]).copy()
    return header["meta"], arrays


@dataclass
class TrainedModel:
    U: np.ndarray
    V: np.ndarray
    theta: SymmetricSparse
    user_ids: list
    item_ids: list
    params: HyperParams
    fingerprint: str


def save_checkpoint(path, model):
    meta = {
        "m": int(model.U.shape[0]),
        "n": int(model.V.shape[0]),
        "d": int(model.U.shape[1]),
        "user_ids": list(model.user_ids),
        "item_ids": list(model.item_ids),
        "hyperparams": model.params.to_dict(),
        "fingerprint": model.fingerprint,
    }
    arrays = {
        "U": model.U.astype(np.float64),
        "V": model.V.astype(np.float64),
        "theta_rows": model.theta.rows,
        "theta_cols": model.theta.cols,
        "theta_vals": model.theta.vals,
    }
    write_container(path, "checkpoint", meta, arrays)


def load_checkpoint(path):
    meta, arrays = read_container(path, kind="checkpoint")
    theta = SymmetricSparse(
        meta["m"], arrays["theta_rows"], arrays["theta_cols"], arrays["theta_vals"]
    )
    return TrainedModel(
        U=arrays["U"],
        V=arrays["V"],
        theta=theta,
        user_ids=meta["user_ids"],
        item_ids=meta["item_ids"],
        params=HyperParams(**meta["hyperparams"]),
        fingerprint=meta["fingerprint"],
    )
