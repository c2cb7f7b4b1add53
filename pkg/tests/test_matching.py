"""
Tests for classifier matching and the nearest-neighbour baselines
"""

from dataclasses import replace

import numpy as np
import pytest

from app.models.configs import MatchConfig
from app.services.boosting import fit_model
from app.services.context import build_feature_vector
from app.services.matching import (
    DescriptorIndex,
    ProjectedIndex,
    RankedCandidates,
    accept,
    classify,
    classify_with_inverted_file,
    make_projection,
    match_frame,
    match_hamming_baseline,
    match_projected_baseline,
    project_descriptors,
    rank_frame,
    rank_hamming_baseline,
    rank_projected_baseline,
    ranked_landmarks,
    score,
    score_matrix,
)
from app.services.synthworld import generate_world
from app.services.vocabulary import build_inverted_file, candidate_classes
from tests.conftest import SMALL_TRAINING, SMALL_WORLD


def _naive_per_landmark(query, sfm, ids, metric):
    out = {}
    for lm in ids:
        rows = sfm.landmark_descriptors(lm)
        out[lm] = min(metric(query, r) for r in rows)
    return out


class TestAcceptRule:
    """Head acceptance"""

    def _ranked(self, classes, scores, background):
        return RankedCandidates(tuple(classes), tuple(scores), background, len(classes))

    def test_accepts_head_above_background_and_margin(self):
        assert accept(self._ranked([3, 0], [1.5, -0.2], -0.2), margin=0.0)

    def test_rejects_background_head(self):
        assert not accept(self._ranked([0, 3], [0.9, 0.1], 0.9), margin=0.0)

    def test_rejects_below_margin(self):
        assert not accept(self._ranked([3, 0], [0.4, -1.0], -1.0), margin=0.5)

    def test_rejects_negative_head_at_zero_margin(self):
        assert not accept(self._ranked([3, 0], [-0.1, -0.4], -0.4), margin=0.0)

    def test_rejects_empty(self):
        assert not accept(self._ranked([], [], 0.0), margin=0.0)


class TestClassifier:
    """Scoring and ranking with a trained model"""

    def test_ranking_order(self, small_model, eval_map):
        frame = eval_map.frames[0]
        cam = eval_map.camera_of(frame)
        ranked = rank_frame(frame, small_model, cam, top_k=small_model.n_classes)
        for r in ranked:
            pairs = list(zip(r.scores, r.classes))
            assert pairs == sorted(pairs, key=lambda p: (-p[0], p[1]))
            assert r.evaluated == small_model.n_classes
            assert r.background_score == pytest.approx(dict(zip(r.classes, r.scores))[0])

    def test_single_vector_matches_frame(self, small_model, eval_map):
        frame = eval_map.frames[1]
        cam = eval_map.camera_of(frame)
        v = build_feature_vector(2, frame, small_model.bank, small_model.vocab, cam,
                                 small_model.reference_scale, small_model.descriptor_bits, small_model.feature_mode)
        top = classify(small_model, v, top_k=3)
        assert top.classes == rank_frame(frame, small_model, cam, top_k=3)[2].classes
        assert score(small_model, v, top.classes[0]) == pytest.approx(top.scores[0])

    def test_inverted_file_scores_are_identical(self, small_model, train_map, eval_map):
        inv = build_inverted_file(train_map, small_model.vocab, small_model.class_table)
        for frame in eval_map.frames[:2]:
            cam = eval_map.camera_of(frame)
            full = rank_frame(frame, small_model, cam, top_k=small_model.n_classes)
            restricted = rank_frame(frame, small_model, cam, inv, top_k=small_model.n_classes)
            for f, r in zip(full, restricted):
                lookup = dict(zip(f.classes, f.scores))
                assert 0 in r.classes
                assert r.evaluated <= f.evaluated
                for c, s in zip(r.classes, r.scores):
                    assert s == lookup[c]

    def test_inverted_file_evaluates_fewer_classes_on_average(self, small_model, train_map, eval_map):
        inv = build_inverted_file(train_map, small_model.vocab, small_model.class_table)
        evaluated = [
            r.evaluated
            for frame in eval_map.frames
            for r in rank_frame(frame, small_model, eval_map.camera_of(frame), inv, top_k=small_model.n_classes)
        ]
        assert evaluated
        assert np.mean(evaluated) < small_model.n_classes

    def test_single_vector_inverted_file(self, small_model, train_map, eval_map):
        inv = build_inverted_file(train_map, small_model.vocab, small_model.class_table)
        frame = eval_map.frames[0]
        cam = eval_map.camera_of(frame)
        descriptor = frame.descriptor_matrix(small_model.descriptor_bits)[0]
        v = build_feature_vector(0, frame, small_model.bank, small_model.vocab, cam,
                                 small_model.reference_scale, small_model.descriptor_bits, small_model.feature_mode)
        ranked = classify_with_inverted_file(small_model, v, descriptor, small_model.vocab, inv,
                                             top_k=small_model.n_classes)
        allowed = candidate_classes(descriptor, small_model.vocab, inv)
        assert set(ranked.classes) == set(allowed)
        assert ranked.evaluated == len(allowed)
        for c, s in zip(ranked.classes, ranked.scores):
            assert s == pytest.approx(score(small_model, v, c))

    def test_matches_never_background(self, small_model, eval_map):
        frame = eval_map.frames[0]
        matches = match_frame(frame, small_model, eval_map.camera_of(frame), config=MatchConfig(margin=0.0))
        known = set(small_model.class_table.landmark_ids)
        assert all(m.landmark_id in known and m.matcher == "boost" for m in matches)
        assert [m.keypoint_index for m in matches] == sorted(m.keypoint_index for m in matches)

    def test_ranked_landmarks_marks_background(self, small_model, eval_map):
        frame = eval_map.frames[0]
        ranked = rank_frame(frame, small_model, eval_map.camera_of(frame), top_k=small_model.n_classes)[0]
        ids = ranked_landmarks(ranked, small_model)
        assert ids.count(-1) == 1
        assert ids[ranked.classes.index(0)] == -1

    def test_empty_model_scores_zero(self, small_model):
        empty = replace(small_model, learners=[])
        assert not score_matrix(empty, np.zeros((2, small_model.layout.dims))).any()


@pytest.fixture(scope="module")
def replay_setup(small_bank, small_vocab):
    world = generate_world(SMALL_WORLD.model_copy(update={
        "landmark_count": 12, "room_count": 1, "aliased_fraction": 0.0,
        "train_frames": 12, "eval_frames": 1, "clutter_per_frame": 4, "seed": 5,
    }))
    config = SMALL_TRAINING.model_copy(update={
        "rounds": 300, "candidate_features": 10_000, "landmark_budget": 12, "background_cap": 40,
        "holdout_fraction": 0.0, "exclusion_radius": 0.0, "mining_period": 0,
    })
    return world.train_map, fit_model(world.train_map, small_bank, small_vocab, config)


@pytest.mark.slow
class TestTrainingReplay:
    """Classifying the frames the model was trained on"""

    def test_replayed_frames_match_tracked_keypoints(self, replay_setup):
        sfm, model = replay_setup
        known = set(model.class_table.landmark_ids)
        tracked = correct = 0
        for frame in sfm.frames:
            truth = {i: kp.landmark_id for i, kp in enumerate(frame.keypoints) if kp.landmark_id in known}
            matches = match_frame(frame, model, sfm.camera_of(frame), config=MatchConfig(margin=0.0))
            tracked += len(truth)
            correct += sum(1 for m in matches if truth.get(m.keypoint_index) == m.landmark_id)
        assert tracked > 0
        assert correct >= 0.8 * tracked


class TestBaselines:
    """Exact nearest-neighbour rankings"""

    def test_hamming_matches_naive_scan(self, train_map, eval_map):
        ids = sorted(train_map.landmarks)[:30]
        index = DescriptorIndex.from_map(train_map, ids)
        frame = eval_map.frames[0]
        lists = rank_hamming_baseline(frame, index, train_map.descriptor_bits, top_k=5)
        Q = frame.descriptor_matrix(train_map.descriptor_bits)
        for i, nl in enumerate(lists[:10]):
            naive = _naive_per_landmark(Q[i], train_map, ids, lambda a, b: int(np.sum(a != b)))
            expected = sorted(naive, key=lambda lm: (naive[lm], lm))[:5]
            assert list(nl.landmark_ids) == expected
            assert list(nl.distances) == [naive[lm] for lm in expected]

    def test_projected_matches_naive_scan(self, train_map, eval_map):
        ids = sorted(train_map.landmarks)[:30]
        pindex = ProjectedIndex.build(DescriptorIndex.from_map(train_map, ids), train_map.descriptor_bits, seed=4)
        frame = eval_map.frames[0]
        lists = rank_projected_baseline(frame, pindex, train_map.descriptor_bits, top_k=5)
        Q = project_descriptors(frame.descriptor_matrix(train_map.descriptor_bits), pindex.projection)
        for i, nl in enumerate(lists[:10]):
            naive = {
                lm: float(np.min(np.linalg.norm(
                    project_descriptors(train_map.landmark_descriptors(lm), pindex.projection) - Q[i], axis=1)))
                for lm in ids
            }
            expected = sorted(naive.values())[:5]
            assert np.allclose(nl.distances, expected, atol=1e-6)
            for lm, d in zip(nl.landmark_ids, nl.distances):
                assert naive[lm] == pytest.approx(d, abs=1e-6)

    def test_baseline_heads(self, train_map, eval_map):
        frame = eval_map.frames[0]
        index = DescriptorIndex.from_map(train_map)
        hamming = match_hamming_baseline(frame, train_map, top_k=3, index=index)
        lists = rank_hamming_baseline(frame, index, train_map.descriptor_bits, top_k=3)
        assert len(hamming) == len(frame.keypoints)
        assert [m.landmark_id for m in hamming] == [nl.landmark_ids[0] for nl in lists]
        assert all(m.matcher == "hamming" and m.score == nl.distances[0] for m, nl in zip(hamming, lists))

        projected = match_projected_baseline(frame, train_map, top_k=3)
        assert len(projected) == len(frame.keypoints)
        assert all(m.matcher == "projected" and m.landmark_id in train_map.landmarks for m in projected)

    def test_projection_rows_orthonormal(self):
        P = make_projection(64, 16, seed=2)
        assert P.shape == (16, 64)
        assert np.allclose(P @ P.T, np.eye(16), atol=1e-12)
        assert np.array_equal(P, make_projection(64, 16, seed=2))
