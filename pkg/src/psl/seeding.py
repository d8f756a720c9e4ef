"""Stable seed derivation: one base seed, a key path per stochastic component."""

import hashlib


def derive_seed(base: int, *key) -> int:
    """63-bit seed from SHA-256 of ``base`` and the ``repr`` of each key part.

    Numeric key parts are normalised so that ``4`` and ``4.0`` derive the
    same seed.
    """
    parts = [str(int(base))]
    for k in key:
        if isinstance(k, float) and k.is_integer():
            k = int(k)
        parts.append(repr(k))
    digest = hashlib.sha256("/".join(parts).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") >> 1
