"""Deterministic derivation of independent RNG streams from one master seed."""
import hashlib

import numpy as np


def derive_seed(seed, *keys):
    """64-bit seed from ``seed`` and any mix of str/int keys."""
    h = hashlib.sha256(str(int(seed)).encode())
    for k in keys:
        h.update(b"\x00")
        h.update(str(k).encode())
    return int.from_bytes(h.digest()[:8], "little")


def stream(seed, *keys):
    return np.random.default_rng(derive_seed(seed, *keys))
