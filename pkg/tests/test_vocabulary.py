"""
Tests for the visual vocabulary and the inverted file
"""

import numpy as np
import pytest

from app.core.errors import DescriptorLengthError, ModelFormatError, TooFewDescriptorsError
from app.services.bits import hamming_matrix
from app.services.map_model import ClassTable
from app.services.vocabulary import (
    build_inverted_file,
    candidate_classes,
    load_vocabulary,
    quantize,
    save_vocabulary,
    train_vocabulary,
)


def _clustered(n_per=40, k=5, bits=64, flip=0.05, seed=0):
    rng = np.random.default_rng(seed)
    centres = rng.integers(0, 2, (k, bits), dtype=np.uint8)
    rows = []
    for c in centres:
        noise = rng.random((n_per, bits)) < flip
        rows.append(np.where(noise, 1 - c, c))
    return centres, np.vstack(rows).astype(np.uint8)


class TestTraining:
    """k-medians clustering"""

    def test_centroids_distinct(self):
        _, X = _clustered()
        vocab = train_vocabulary(X, 8, seed=3)
        assert vocab.k == 8
        assert vocab.bits == 64
        assert len({c.tobytes() for c in vocab.centroids}) == 8

    def test_recovers_clusters(self):
        centres, X = _clustered(flip=0.02)
        vocab = train_vocabulary(X, 5, seed=1)
        d = hamming_matrix(centres, vocab.centroids)
        assert d.min(axis=1).max() <= 2

    def test_deterministic(self):
        _, X = _clustered()
        assert train_vocabulary(X, 6, seed=4) == train_vocabulary(X, 6, seed=4)

    def test_too_few_distinct(self):
        X = np.zeros((50, 16), dtype=np.uint8)
        X[:10, 0] = 1
        with pytest.raises(TooFewDescriptorsError):
            train_vocabulary(X, 3, seed=0)

    def test_k_equals_distinct(self):
        X = np.repeat(np.eye(4, 16, dtype=np.uint8), 5, axis=0)
        vocab = train_vocabulary(X, 4, seed=0)
        assert sorted(c.tobytes() for c in vocab.centroids) == sorted(r.tobytes() for r in np.eye(4, 16, dtype=np.uint8))


class TestQuantize:
    """Nearest-word assignment"""

    def test_matches_brute_force(self):
        _, X = _clustered()
        vocab = train_vocabulary(X, 7, seed=2)
        rng = np.random.default_rng(8)
        queries = rng.integers(0, 2, (100, 64), dtype=np.uint8)
        for q in queries:
            dists = [int(np.sum(q != c)) for c in vocab.centroids]
            assert quantize(q, vocab) == dists.index(min(dists))

    def test_ties_go_to_lowest_index(self):
        X = np.array([[0, 0, 0, 0, 0, 0, 0, 0], [1, 1, 0, 0, 0, 0, 0, 0]], dtype=np.uint8)
        vocab = train_vocabulary(X, 2, seed=0)
        midway = np.array([1, 0, 0, 0, 0, 0, 0, 0], dtype=np.uint8)
        assert quantize(midway, vocab) == 0

    def test_wrong_length(self):
        _, X = _clustered()
        vocab = train_vocabulary(X, 4, seed=0)
        with pytest.raises(DescriptorLengthError):
            quantize(np.zeros(32, dtype=np.uint8), vocab)


class TestPersistence:
    """Vocabulary files"""

    def test_save_load(self, tmp_path):
        _, X = _clustered()
        vocab = train_vocabulary(X, 5, seed=9)
        path = tmp_path / "vocab.txt"
        save_vocabulary(vocab, path)
        assert load_vocabulary(path) == vocab

    def test_truncated_file(self, tmp_path):
        path = tmp_path / "vocab.txt"
        path.write_text("3 64 0\n" + "00" * 8 + "\n", encoding="utf-8")
        with pytest.raises(ModelFormatError):
            load_vocabulary(path)


class TestInvertedFile:
    """Word -> candidate classes"""

    def test_buckets_match_observations(self, train_map, small_vocab):
        lm_ids = sorted(train_map.landmarks)[:20]
        table = ClassTable.from_map(train_map, lm_ids)
        inv = build_inverted_file(train_map, small_vocab, table)
        assert inv.k == small_vocab.k
        for class_id, lm in enumerate(lm_ids, start=1):
            words = set(small_vocab.quantize_many(train_map.landmark_descriptors(lm)).tolist())
            for w in range(inv.k):
                assert (class_id in inv.word_to_classes[w]) == (w in words)

    def test_candidates_include_background(self, train_map, small_vocab):
        lm_ids = sorted(train_map.landmarks)[:10]
        table = ClassTable.from_map(train_map, lm_ids)
        inv = build_inverted_file(train_map, small_vocab, table)
        d = train_map.landmark_descriptors(lm_ids[0])[0]
        cands = candidate_classes(d, small_vocab, inv)
        assert cands[0] == 0
        assert 1 in cands
