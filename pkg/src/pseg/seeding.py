import hashlib

import numpy as np


def derive_seed(seed, *purpose):
    """Named sub-seed: a stable 63-bit hash of the parent seed and a purpose path."""
    key = ":".join([str(int(seed))] + [str(p) for p in purpose])
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def rng_for(seed, *purpose):
    return np.random.default_rng(derive_seed(seed, *purpose))
