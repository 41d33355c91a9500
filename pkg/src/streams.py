"""Labelled random sub-streams so that every experiment draws from a single seed"""

import zlib

import numpy as np


def derive_stream(seed: int, label: str) -> np.random.Generator:
    """Return a generator keyed by (seed, label); adding a new label never shifts an existing stream"""
    return np.random.default_rng([int(seed), zlib.crc32(label.encode("UTF-8"))])
