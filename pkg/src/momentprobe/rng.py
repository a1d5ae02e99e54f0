"""Deterministic random streams.

Everything random in this package draws from the counter-based Philox
(4x64) generator keyed by a 128-bit value composed of a stream id, the
user seed, and a substream index. Fixing the generator and the key
layout makes datasets and initializations reproducible across
implementations; docs/format.md documents the layout for third parties.
"""

from __future__ import annotations

import numpy as np

STREAM_SYNTH = 1
STREAM_SPLIT = 2
STREAM_BACKBONE = 3
STREAM_PSRP = 4
STREAM_HEAD = 5
STREAM_BATCH = 6


def stream_key(stream: int, seed: int, sub: int = 0) -> int:
    """128-bit Philox key: [stream id | 64-bit seed | 32-bit substream]."""
    return (stream << 96) | ((seed & 0xFFFFFFFFFFFFFFFF) << 32) | (sub & 0xFFFFFFFF)


def generator(stream: int, seed: int, sub: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=stream_key(stream, seed, sub)))
