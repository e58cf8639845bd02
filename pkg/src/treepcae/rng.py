"""Deterministic random streams.

All randomness in the package flows from one integer seed through named
sub-streams so that sampling, initialization, augmentation, and cropping can
each be re-seeded independently. A sub-stream is a PCG64 generator keyed by
the SHA-256 of "<seed>:<name>", which is stable across platforms and runs.
"""

import hashlib

import numpy as np


def derive_seed(seed: int, name: str) -> int:
    """Stable 63-bit integer seed for the sub-stream `name` of `seed`."""
    digest = hashlib.sha256(f"{seed}:{name}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def substream(seed: int, name: str) -> np.random.Generator:
    """PCG64 generator for the named sub-stream of `seed`."""
    return np.random.Generator(np.random.PCG64(derive_seed(seed, name)))
