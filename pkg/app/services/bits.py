"""
Binary Descriptors
==================
Bit-string helpers: hex codec, packing and exact Hamming distances.

Descriptors live in two shapes: packed ``bytes`` on keypoints (immutable,
hashable) and ``uint8`` 0/1 matrices for vectorised work.
"""

import numpy as np

from app.core.errors import DescriptorLengthError


def bits_from_hex(text: str, n_bits: int | None = None) -> np.ndarray:
    """Decode a hex string into a 0/1 ``uint8`` vector."""
    try:
        raw = bytes.fromhex(text)
    except ValueError as e:
        raise DescriptorLengthError(f"invalid hex descriptor: {e}") from e
    bits = np.unpackbits(np.frombuffer(raw, dtype=np.uint8))
    if n_bits is not None and bits.size != n_bits:
        raise DescriptorLengthError(f"descriptor has {bits.size} bits, expected {n_bits}")
    return bits


def bits_to_hex(bits: np.ndarray) -> str:
    return np.packbits(np.asarray(bits, dtype=np.uint8)).tobytes().hex()


def pack_bits(bits: np.ndarray) -> bytes:
    return np.packbits(np.asarray(bits, dtype=np.uint8)).tobytes()


def unpack_bits(packed: bytes) -> np.ndarray:
    return np.unpackbits(np.frombuffer(packed, dtype=np.uint8))


def unpack_many(packed: list[bytes] | tuple[bytes, ...], n_bits: int) -> np.ndarray:
    """Stack packed descriptors into an ``(n, n_bits)`` 0/1 matrix."""
    if not packed:
        return np.zeros((0, n_bits), dtype=np.uint8)
    raw = np.frombuffer(b"".join(packed), dtype=np.uint8).reshape(len(packed), -1)
    out = np.unpackbits(raw, axis=1)
    if out.shape[1] != n_bits:
        raise DescriptorLengthError(f"descriptors have {out.shape[1]} bits, expected {n_bits}")
    return out


def random_bits(rng: np.random.Generator, n: int, n_bits: int) -> np.ndarray:
    return rng.integers(0, 2, size=(n, n_bits), dtype=np.uint8)


def hamming_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """
    All pairwise Hamming distances between the rows of two bit matrices.

    Computed as ``a·(1-b)ᵀ + (1-a)·bᵀ`` in float32, which is exact for any
    realistic descriptor length.

    Returns:
        ``(len(a), len(b))`` int32 matrix
    """
    a = np.atleast_2d(a)
    b = np.atleast_2d(b)
    if a.shape[1] != b.shape[1]:
        raise DescriptorLengthError(f"bit lengths differ: {a.shape[1]} vs {b.shape[1]}")
    af = a.astype(np.float32)
    bf = b.astype(np.float32)
    d = af @ (1.0 - bf).T + (1.0 - af) @ bf.T
    return np.rint(d).astype(np.int32)


def save_descriptors(bits: np.ndarray, path) -> None:
    """One hex descriptor per line."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for row in np.atleast_2d(bits):
            fh.write(bits_to_hex(row) + "\n")


def load_descriptors(path, n_bits: int | None = None) -> np.ndarray:
    with open(path, "r", encoding="utf-8") as fh:
        rows = [bits_from_hex(line.strip(), n_bits) for line in fh if line.strip()]
    if not rows:
        return np.zeros((0, n_bits or 0), dtype=np.uint8)
    if len({r.size for r in rows}) != 1:
        raise DescriptorLengthError(f"{path}: descriptors of mixed length")
    return np.vstack(rows)
