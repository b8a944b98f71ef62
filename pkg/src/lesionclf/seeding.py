"""Stable seed derivation so nested randomness stays reproducible across
platforms and process restarts."""

from __future__ import annotations

import hashlib


def derive_seed(*parts) -> int:
    """Map an arbitrary tuple of parts to a 64-bit seed, deterministically."""
    key = ":".join(str(p) for p in parts).encode()
    return int.from_bytes(hashlib.blake2s(key, digest_size=8).digest(), "big")
