"""Standalone MPFT writer.

Implements the byte layout from the trainer's docs/format.md
independently, so this package only couples to the format contract:
30-byte packed little-endian header (magic "MPFT", version 1), u32
labels, then f32 features [sample x rows x dim] with the CLS token as
row 0 when present.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"MPFT"
VERSION = 1
DTYPE_F32 = 0
_HEADER = struct.Struct("<4sIQIIBBI")


def write_mpft(path, labels: np.ndarray, features: np.ndarray,
               tokens_per_sample: int, has_cls: bool, class_count: int) -> None:
    labels = np.ascontiguousarray(labels, dtype="<u4")
    features = np.ascontiguousarray(features, dtype="<f4")
    rows = tokens_per_sample + (1 if has_cls else 0)
    n, got_rows, dim = features.shape
    if got_rows != rows or len(labels) != n:
        raise ValueError(f"features {features.shape} inconsistent with "
                         f"{len(labels)} labels and {rows} rows per sample")
    if not np.all(np.isfinite(features)):
        raise ValueError("features contain NaN or Inf")
    if n and labels.max() >= class_count:
        raise ValueError("label outside class count")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, n, tokens_per_sample, dim,
                              1 if has_cls else 0, DTYPE_F32, class_count))
        fh.write(labels.tobytes())
        fh.write(features.tobytes())
