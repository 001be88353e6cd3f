"""Keyed random streams: one independent generator per (seed, purpose, step, worker)."""

from __future__ import annotations

import zlib

import numpy as np


def rng_stream(seed: int, purpose: str, step: int = 0, worker: int = 0) -> np.random.Generator:
    key = zlib.crc32(purpose.encode())
    return np.random.default_rng(np.random.SeedSequence([seed, key, step, worker]))
