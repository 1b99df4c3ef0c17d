"""Deterministic seed derivation.

One root seed expands into independent per-role streams through a SHA-256
mix, so every component (dataset, init, each client, each round, each
channel) gets its own reproducible generator:

    sub_seed = derive_seed(parent_seed, role_tag, *indices)

The mix hashes the little-endian 64-bit parent seed, the UTF-8 role tag,
and each index as a signed 64-bit value, then takes the first 8 digest
bytes (little-endian) as the derived seed.  Generators are PCG64 streams.
"""

import hashlib
import struct

import numpy as np

__all__ = ["derive_seed", "rng_for"]

_U64 = (1 << 64) - 1


def derive_seed(parent: int, role: str, *indices: int) -> int:
    h = hashlib.sha256()
    h.update(struct.pack("<Q", int(parent) & _U64))
    h.update(role.encode("utf-8"))
    for ix in indices:
        h.update(struct.pack("<q", int(ix)))
    return int.from_bytes(h.digest()[:8], "little")


def rng_for(parent: int, role: str, *indices: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(parent, role, *indices)))
