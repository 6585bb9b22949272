"""Small shared utilities."""

import hashlib

import numpy as np


def rng_stream(seed, label):
    """Deterministic, label-addressed random stream.

    All randomness in a run flows from one seed; independent consumers get
    independent Philox streams keyed by a stable hash of their label, so
    adding a consumer never perturbs the others.
    """
    digest = hashlib.sha256(label.encode()).digest()
    key = int.from_bytes(digest[:8], "little")
    return np.random.Generator(np.random.Philox(key=[seed & 0xFFFFFFFFFFFFFFFF, key]))
