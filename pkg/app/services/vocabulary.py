"""
Visual Vocabulary
=================
k-medians clustering of binary descriptors, the quantizer, and the
inverted file from visual words to candidate landmark classes.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from app.core.config import DEFAULT_VOCAB_ITERS
from app.core.errors import DescriptorLengthError, ModelFormatError, TooFewDescriptorsError
from app.models.records import VocabularyRecord
from app.services.bits import bits_from_hex, bits_to_hex, hamming_matrix
from app.services.map_model import ClassTable, SfMMap, map_fingerprint

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class Vocabulary:
    centroids: np.ndarray
    seed: int = 0
    distortion_history: tuple[int, ...] = field(default=(), repr=False)

    def __post_init__(self):
        object.__setattr__(self, "centroids", np.asarray(self.centroids, dtype=np.uint8))

    def __eq__(self, other) -> bool:
        if not isinstance(other, Vocabulary):
            return NotImplemented
        return self.seed == other.seed and np.array_equal(self.centroids, other.centroids)

    __hash__ = None

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    @property
    def bits(self) -> int:
        return self.centroids.shape[1]

    def quantize_many(self, descriptors: np.ndarray) -> np.ndarray:
        """Word index per row; ties resolve to the lowest word index."""
        descriptors = np.atleast_2d(descriptors)
        if descriptors.shape[0] == 0:
            return np.zeros(0, dtype=np.int64)
        if descriptors.shape[1] != self.bits:
            raise DescriptorLengthError(f"descriptor has {descriptors.shape[1]} bits, vocabulary uses {self.bits}")
        return np.argmin(hamming_matrix(descriptors, self.centroids), axis=1).astype(np.int64)

    def to_record(self) -> VocabularyRecord:
        return VocabularyRecord(
            k=self.k, bits=self.bits, seed=self.seed,
            centroids=[bits_to_hex(c) for c in self.centroids],
        )

    @classmethod
    def from_record(cls, record: VocabularyRecord) -> "Vocabulary":
        if len(record.centroids) != record.k:
            raise ModelFormatError(f"vocabulary declares k={record.k} but lists {len(record.centroids)} centroids")
        try:
            centroids = np.array([bits_from_hex(c, record.bits) for c in record.centroids], dtype=np.uint8)
        except DescriptorLengthError as e:
            raise ModelFormatError(f"vocabulary centroid: {e}") from e
        return cls(centroids.reshape(record.k, record.bits), seed=record.seed)


# ============================================================
# TRAINING
# ============================================================

def _farthest_first(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    chosen = [int(rng.integers(X.shape[0]))]
    min_dist = hamming_matrix(X, X[chosen[0]])[:, 0]
    while len(chosen) < k:
        nxt = int(np.argmax(min_dist))
        chosen.append(nxt)
        min_dist = np.minimum(min_dist, hamming_matrix(X, X[nxt])[:, 0])
    return X[chosen].copy()


def _reseed(centroids: np.ndarray, j: int, X: np.ndarray, spread: np.ndarray) -> None:
    """Replace centroid j by the descriptor farthest from its own centroid that duplicates no other centroid."""
    others = np.delete(centroids, j, axis=0)
    for i in np.argsort(-spread, kind="stable"):
        if others.shape[0] == 0 or hamming_matrix(X[i], others).min() > 0:
            centroids[j] = X[i]
            return


def train_vocabulary(
    descriptors: np.ndarray,
    k: int,
    seed: int,
    max_iters: int = DEFAULT_VOCAB_ITERS,
) -> Vocabulary:
    """
    Cluster binary descriptors into k visual words.

    Farthest-first seeding from a seeded random start, then alternating
    nearest-centroid assignment and bitwise-majority updates (ties -> 0).
    Empty and duplicated clusters are reseeded with the descriptor farthest
    from its centroid. Stops when assignments stop changing.

    Args:
        descriptors: ``(n, bits)`` 0/1 matrix
        k: Word count
        seed: Seed of the initialization
        max_iters: Assignment passes at most

    Returns:
        Vocabulary with k pairwise distinct centroids
    """
    X = np.asarray(descriptors, dtype=np.uint8)
    if X.ndim != 2:
        raise DescriptorLengthError("descriptors must be a 2-D bit matrix")
    if k < 1:
        raise TooFewDescriptorsError("k must be at least 1")
    n_distinct = np.unique(X, axis=0).shape[0] if X.shape[0] else 0
    if X.shape[0] < k or n_distinct < k:
        raise TooFewDescriptorsError(f"{n_distinct} distinct descriptors cannot seed {k} words")

    rng = np.random.default_rng(seed)
    centroids = _farthest_first(X, k, rng)
    history: list[int] = []
    prev_labels = None

    for it in range(max_iters):
        dist = hamming_matrix(X, centroids)
        labels = np.argmin(dist, axis=1)
        spread = dist[np.arange(X.shape[0]), labels]
        history.append(int(spread.sum()))
        if prev_labels is not None and np.array_equal(labels, prev_labels):
            break
        prev_labels = labels

        onehot = np.zeros((X.shape[0], k), dtype=np.float64)
        onehot[np.arange(X.shape[0]), labels] = 1.0
        counts = onehot.T @ X
        sizes = onehot.sum(axis=0)
        centroids = (2 * counts > sizes[:, None]).astype(np.uint8)

        for j in range(k):
            if sizes[j] == 0:
                _reseed(centroids, j, X, spread)
        for j in range(1, k):
            if hamming_matrix(centroids[j], centroids[:j]).min() == 0:
                _reseed(centroids, j, X, spread)

    logger.info("Trained vocabulary k=%d on %d descriptors in %d passes (distortion %d)",
                k, X.shape[0], len(history), history[-1] if history else 0)
    return Vocabulary(centroids, seed=seed, distortion_history=tuple(history))


def quantize(descriptor: np.ndarray, vocab: Vocabulary) -> int:
    """Word of one descriptor: Hamming argmin over centroids, lowest index on ties."""
    descriptor = np.asarray(descriptor, dtype=np.uint8)
    if descriptor.ndim != 1 or descriptor.size != vocab.bits:
        raise DescriptorLengthError(f"descriptor has {descriptor.size} bits, vocabulary uses {vocab.bits}")
    return int(vocab.quantize_many(descriptor[None, :])[0])


# ============================================================
# PERSISTENCE
# ============================================================

def save_vocabulary(vocab: Vocabulary, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"{vocab.k} {vocab.bits} {vocab.seed}\n")
        for c in vocab.centroids:
            fh.write(bits_to_hex(c) + "\n")


def load_vocabulary(path: str | Path) -> Vocabulary:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [line.strip() for line in fh if line.strip()]
    if not lines:
        raise ModelFormatError(f"{path}: empty vocabulary file")
    try:
        k, bits, seed = (int(x) for x in lines[0].split())
    except ValueError as e:
        raise ModelFormatError(f"{path}: header must be 'k bits seed'") from e
    return Vocabulary.from_record(VocabularyRecord(k=k, bits=bits, seed=seed, centroids=lines[1:]))


# ============================================================
# INVERTED FILE
# ============================================================

@dataclass(frozen=True)
class InvertedFile:
    word_to_classes: tuple[tuple[int, ...], ...]
    map_fingerprint: str = ""

    @property
    def k(self) -> int:
        return len(self.word_to_classes)


def build_inverted_file(sfm: SfMMap, vocab: Vocabulary, class_table: ClassTable) -> InvertedFile:
    """
    Index every class under the words its observations quantize to.

    Args:
        sfm: Map holding the class landmarks
        vocab: Quantizer
        class_table: Classes to index (background excluded)

    Returns:
        Inverted file; class c is in bucket w iff an observation of c quantizes to w
    """
    buckets: list[set[int]] = [set() for _ in range(vocab.k)]
    for class_id, lm_id in enumerate(class_table.landmark_ids, start=1):
        words = np.unique(vocab.quantize_many(sfm.landmark_descriptors(lm_id)))
        for w in words:
            buckets[int(w)].add(class_id)
    inv = InvertedFile(tuple(tuple(sorted(b)) for b in buckets), map_fingerprint(sfm))
    sizes = [len(b) for b in inv.word_to_classes]
    logger.info("Inverted file: %d words, mean bucket %.1f classes", vocab.k, float(np.mean(sizes)) if sizes else 0.0)
    return inv


def candidate_classes(descriptor: np.ndarray, vocab: Vocabulary, inv: InvertedFile) -> tuple[int, ...]:
    """Classes sharing the descriptor's word, always including the background 0."""
    return words_to_candidates(quantize(descriptor, vocab), inv)


def words_to_candidates(word: int, inv: InvertedFile) -> tuple[int, ...]:
    return (0,) + tuple(c for c in inv.word_to_classes[word] if c != 0)
