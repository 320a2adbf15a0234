"""Shared helpers: seeded RNG derivation, stable hashing, small file utilities."""

import hashlib

import numpy as np


def stable_digest(*parts) -> bytes:
    """16-byte digest of a tuple of printable parts, stable across runs and platforms."""
    h = hashlib.blake2b(digest_size=16)
    for p in parts:
        h.update(repr(p).encode("utf-8"))
        h.update(b"\x1f")
    return h.digest()


def spawn_rng(seed: int, *path) -> np.random.Generator:
    """Derive an independent counter-based generator from a global seed and a label path.

    Every stochastic draw in the pipeline goes through here, so any component
    can be re-run in isolation and reproduce exactly the stream it saw inside
    the full pipeline.
    """
    key = int.from_bytes(stable_digest(int(seed), *path), "little")
    return np.random.Generator(np.random.Philox(key=key))


def checksum64(data: bytes) -> int:
    """64-bit content checksum used by the binary file formats."""
    return int.from_bytes(hashlib.blake2b(data, digest_size=8).digest(), "little")


def file_id(path) -> str:
    """Short hex id of a file's content; used to stamp provenance metadata."""
    h = hashlib.blake2b(digest_size=8)
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
