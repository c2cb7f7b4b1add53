"""
Tests for shared-stump boosting
"""

import itertools
import math

import numpy as np
import pytest

from app.core.errors import ModelFormatError
from app.models.configs import TrainingConfig
from app.services.boosting import (
    SampleSets,
    TrainingSet,
    boost_round,
    bootstrap_negatives,
    build_sample_sets,
    build_training_set,
    fit_class_constant,
    fit_stump,
    incremental_update_b,
    init_sharing_set,
    init_state,
    load_model,
    mine_hard_negatives,
    model_to_record,
    save_model,
    select_landmarks,
    update_weights,
)
from app.services.context import FeatureLayout, frame_features
from app.services.map_model import ClassTable
from app.services.matching import score_matrix


def _training_set(features, class_ids, positions=None) -> TrainingSet:
    features = np.asarray(features, dtype=np.float32)
    n, D = features.shape
    return TrainingSet(
        features=features,
        class_ids=np.asarray(class_ids, dtype=np.int64),
        sources=np.zeros((n, 2), dtype=np.int64),
        words=np.zeros(n, dtype=np.int64),
        landmark_positions=np.zeros((n, 3)) if positions is None else np.asarray(positions, dtype=np.float64),
        layout=FeatureLayout(0, 1, D, "descriptor"),
    )


def _one_vs_rest(class_ids: np.ndarray, n_classes: int) -> SampleSets:
    return SampleSets(
        positives=[np.flatnonzero(class_ids == c) for c in range(n_classes)],
        negatives=[np.flatnonzero(class_ids != c) for c in range(n_classes)],
    )


def _random_problem(seed: int, n: int = 24, D: int = 3, n_classes: int = 3):
    rng = np.random.default_rng(seed)
    features = rng.integers(0, 4, (n, D)).astype(np.float32)
    class_ids = np.arange(n) % n_classes
    samples = _training_set(features, class_ids)
    state = init_state(_one_vs_rest(class_ids, n_classes), seed=seed, candidate_count=D)
    state.weights = rng.uniform(0.1, 1.0, state.weights.size)
    return samples, state


def _brute_force_cost(samples: TrainingSet, state) -> float:
    """Lowest total weighted squared error over every feature, midpoint threshold and sharing set."""
    best = math.inf
    n_classes = state.n_classes
    constants = {}
    for c in range(n_classes):
        mask = state.pair_class == c
        w, z = state.weights[mask], state.pair_z[mask]
        k = np.sum(w * z) / np.sum(w)
        constants[c] = float(np.sum(w * (z - k) ** 2))
    for f in range(samples.layout.dims):
        values = np.unique(samples.column(f))
        for theta in 0.5 * (values[:-1] + values[1:]):
            for size in range(1, n_classes + 1):
                for S in itertools.combinations(range(n_classes), size):
                    _, _, cost_s = fit_stump(f, theta, S, state, samples)
                    rest = sum(constants[c] for c in range(n_classes) if c not in S)
                    best = min(best, cost_s + rest)
    return best


class TestStumpFitting:
    """Weighted least-squares stumps"""

    @pytest.mark.parametrize("seed", [0, 1, 2, 3, 4])
    def test_round_matches_brute_force(self, seed):
        samples, state = _random_problem(seed)
        config = TrainingConfig(candidate_features=3, threshold_cap=1000, exhaustive_max_classes=6)
        learner, cost = boost_round(state, samples, config)
        assert cost == pytest.approx(_brute_force_cost(samples, state), abs=1e-9)
        _, _, cost_s = fit_stump(learner.feature, learner.threshold, learner.sharing, state, samples)
        assert cost_s <= cost + 1e-12

    @pytest.mark.parametrize("search", ["prefix", "greedy"])
    def test_heuristic_search_never_beats_exhaustive(self, search):
        samples, state = _random_problem(7, n=40, D=4, n_classes=5)
        exhaustive = TrainingConfig(candidate_features=4, threshold_cap=1000, exhaustive_max_classes=6)
        heuristic = TrainingConfig(candidate_features=4, threshold_cap=1000, exhaustive_max_classes=0,
                                   sharing_search=search)
        _, best = boost_round(state, samples, exhaustive)
        state.rng = np.random.default_rng(7)
        _, cost = boost_round(state, samples, heuristic)
        assert cost >= best - 1e-12

    def test_stump_values_are_weighted_means(self):
        samples, state = _random_problem(11)
        a, b, _ = fit_stump(0, 1.5, (0, 2), state, samples)
        in_s = np.isin(state.pair_class, [0, 2])
        x = samples.column(0)[state.pair_sample[in_s]] > 1.5
        w, z = state.weights[in_s], state.pair_z[in_s]
        assert b == pytest.approx(np.sum(w[~x] * z[~x]) / np.sum(w[~x]))
        assert a + b == pytest.approx(np.sum(w[x] * z[x]) / np.sum(w[x]))

    def test_class_constant_is_weighted_mean(self):
        samples, state = _random_problem(13)
        for c in range(state.n_classes):
            mask = state.pair_class == c
            w, z = state.weights[mask], state.pair_z[mask]
            assert fit_class_constant(c, state) == pytest.approx(np.sum(w * z) / np.sum(w), abs=1e-12)

    def test_incremental_update_matches_refit(self):
        rng = np.random.default_rng(5)
        n_classes = 6
        class_ids = np.repeat(np.arange(n_classes), 6)
        # every class has samples on both sides of theta = 0.5
        features = np.tile([0, 0, 0, 1, 1, 1], n_classes)[:, None].astype(np.float32)
        samples = _training_set(features, class_ids)
        state = init_state(_one_vs_rest(class_ids, n_classes))
        state.weights = rng.uniform(0.1, 1.0, state.weights.size)
        x = samples.column(0)[state.pair_sample] > 0.5

        for _ in range(5):
            order = rng.permutation(n_classes)
            b_num = b_den = ab_num = ab_den = 0.0
            S: list[int] = []
            for c in order:
                c = int(c)
                mask = state.pair_class == c
                w, z, above = state.weights[mask], state.pair_z[mask], x[mask]
                w_below, w_above = float(np.sum(w[~above])), float(np.sum(w[above]))
                b_c = float(np.sum(w[~above] * z[~above])) / w_below
                ab_c = float(np.sum(w[above] * z[above])) / w_above
                b_new = incremental_update_b(b_num, b_den, b_c, w_below)
                ab_new = incremental_update_b(ab_num, ab_den, ab_c, w_above)
                S.append(c)
                a, b, _ = fit_stump(0, 0.5, S, state, samples)
                assert b_new == pytest.approx(b, abs=1e-9)
                assert ab_new - b_new == pytest.approx(a, abs=1e-9)
                b_num, b_den = b_num + b_c * w_below, b_den + w_below
                ab_num, ab_den = ab_num + ab_c * w_above, ab_den + w_above

    def test_sharing_order_by_response(self):
        class_ids = np.array([0, 0, 1, 1, 2, 2])
        features = np.array([[0], [1], [1], [1], [0], [0]], dtype=np.float32)
        samples = _training_set(features, class_ids)
        state = init_state(_one_vs_rest(class_ids, 3))
        assert init_sharing_set(0, 0.5, state, samples) == [1, 0, 2]

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_prefix_search_walks_the_sharing_order(self, seed):
        samples, state = _random_problem(seed, n=40, D=3, n_classes=5)
        constants = {}
        for c in range(state.n_classes):
            _, _, constants[c] = fit_stump(0, math.inf, (c,), state, samples)
        expected = math.inf
        for f in range(samples.layout.dims):
            values = np.unique(samples.column(f))
            for theta in 0.5 * (values[:-1] + values[1:]):
                order = init_sharing_set(f, theta, state, samples)
                for seq in (order, order[::-1]):
                    b_num = b_den = ab_num = ab_den = 0.0
                    for i, c in enumerate(seq):
                        a_c, b_c, _ = fit_stump(f, theta, (c,), state, samples)
                        mask = state.pair_class == c
                        above = samples.column(f)[state.pair_sample[mask]] > theta
                        w_below = float(np.sum(state.weights[mask][~above]))
                        w_above = float(np.sum(state.weights[mask][above]))
                        b = incremental_update_b(b_num, b_den, b_c, w_below)
                        ab = incremental_update_b(ab_num, ab_den, a_c + b_c, w_above)
                        a_fit, b_fit, cost_s = fit_stump(f, theta, seq[: i + 1], state, samples)
                        assert b == pytest.approx(b_fit, abs=1e-9)
                        assert ab - b == pytest.approx(a_fit, abs=1e-9)
                        rest = sum(constants[k] for k in range(state.n_classes) if k not in seq[: i + 1])
                        expected = min(expected, cost_s + rest)
                        b_num, b_den = b_num + b_c * w_below, b_den + w_below
                        ab_num, ab_den = ab_num + (a_c + b_c) * w_above, ab_den + w_above

        config = TrainingConfig(candidate_features=3, threshold_cap=1000, exhaustive_max_classes=0,
                                sharing_search="prefix")
        learner, cost = boost_round(state, samples, config)
        assert cost == pytest.approx(expected, abs=1e-9)
        order = init_sharing_set(learner.feature, learner.threshold, state, samples)
        m = len(learner.sharing)
        assert set(learner.sharing) in (set(order[:m]), set(order[-m:]))

    def test_learner_values_come_from_the_fits(self):
        samples, state = _random_problem(21, n=30, D=3, n_classes=4)
        config = TrainingConfig(candidate_features=3, threshold_cap=1000, exhaustive_max_classes=0,
                                sharing_search="greedy")
        learner, _ = boost_round(state, samples, config)
        a, b, _ = fit_stump(learner.feature, learner.threshold, learner.sharing, state, samples)
        assert (learner.a, learner.b) == (a, b)
        for c in range(state.n_classes):
            expected = 0.0 if c in learner.sharing else fit_class_constant(c, state)
            assert learner.k[c] == expected
        assert np.allclose(fit_class_constant(np.arange(state.n_classes), state),
                           [fit_class_constant(c, state) for c in range(state.n_classes)])

    def test_incremental_update_of_empty_set(self):
        assert incremental_update_b(0.0, 0.0, 0.4, 0.0) == 0.0
        assert np.allclose(incremental_update_b(1.0, 2.0, np.array([0.5, -1.0]), np.array([2.0, 0.0])),
                           [0.5, 0.5])

    def test_constant_features_give_constant_learner(self):
        class_ids = np.array([0, 0, 1, 1])
        samples = _training_set(np.ones((4, 2)), class_ids)
        state = init_state(_one_vs_rest(class_ids, 2), candidate_count=2)
        learner, cost = boost_round(state, samples, TrainingConfig(candidate_features=2))
        assert learner.a == 0.0
        assert cost == pytest.approx(2.0)


class TestWeights:
    """Reweighting and the objective"""

    def test_update_renormalizes_per_class(self):
        samples, state = _random_problem(2)
        learner, _ = boost_round(state, samples, TrainingConfig(candidate_features=3, exhaustive_max_classes=6))
        step = update_weights(state, learner, samples)
        assert step <= 0.0
        assert np.allclose(state.class_weight(), 1.0)

    def test_weights_stay_positive_over_long_runs(self):
        samples, state = _random_problem(8, n=18, D=2, n_classes=3)
        config = TrainingConfig(candidate_features=2, threshold_cap=4, exhaustive_max_classes=6)
        for _ in range(1000):
            learner, _ = boost_round(state, samples, config)
            assert update_weights(state, learner, samples) <= 0.0
            assert np.all(state.weights > 0.0) and np.all(np.isfinite(state.weights))
        assert np.allclose(state.class_weight(), 1.0)
        assert np.isfinite(state.log_objective)

    def test_training_log_monotone(self, small_model):
        log = small_model.training_log
        assert len(log) == len(small_model.learners) == 15
        J = [row.J for row in log]
        assert J[0] <= 1.0
        assert all(b <= a + 1e-12 for a, b in zip(J, J[1:]))
        assert all(row.sharing_set_size >= 1 for row in log)
        assert {row.chosen_feature_kind for row in log} <= {"context", "descriptor"}


class TestNegatives:
    """Bootstrapped and mined negative sets"""

    def _mining_setup(self, dup_position):
        # classes: 0 background, 1 victim, 2 its duplicate, 3 unrelated
        class_ids = np.repeat([0, 1, 2, 3], 4)
        x0 = np.array([0] * 4 + [1] * 4 + [1] * 4 + [0] * 4, dtype=np.float32)
        features = np.column_stack([x0, np.zeros(16, dtype=np.float32)])
        positions = np.vstack([
            np.full((4, 3), np.nan),
            np.tile([0.0, 0.0, 0.0], (4, 1)),
            np.tile(dup_position, (4, 1)),
            np.tile([20.0, 0.0, 0.0], (4, 1)),
        ])
        samples = _training_set(features, class_ids, positions)
        member = [np.flatnonzero(class_ids == c) for c in range(4)]
        sets = SampleSets(positives=member, negatives=[member[3], member[3], member[3], member[1]])
        table = ClassTable((101, 102, 103), np.array([[0.0, 0.0, 0.0], dup_position, [20.0, 0.0, 0.0]]))
        config = TrainingConfig(candidate_features=2, exhaustive_max_classes=6, mining_growth=1.0,
                                exclusion_radius=1.0)
        state = init_state(sets, candidate_count=2)
        learner, _ = boost_round(state, samples, config)
        update_weights(state, learner, samples)
        state.learners.append(learner)
        return samples, state, table, config, member

    def test_mining_adds_confusable_duplicates(self):
        samples, state, table, config, member = self._mining_setup([10.0, 0.0, 0.0])
        added = mine_hard_negatives(state, samples, table, config)
        assert added == 8
        assert set(member[2]) <= set(state.sets.negatives[1])
        assert set(member[1]) <= set(state.sets.negatives[2])
        assert np.allclose(state.class_weight(), 1.0)

    def test_mining_respects_exclusion_radius(self):
        samples, state, table, config, member = self._mining_setup([0.5, 0.0, 0.0])
        assert mine_hard_negatives(state, samples, table, config) == 0
        assert not set(member[2]) & set(state.sets.negatives[1])

    def test_bootstrap_prefers_same_word(self):
        class_ids = np.array([1, 1, 2, 2, 2, 0, 0, 0])
        samples = _training_set(np.zeros((8, 1)), class_ids)
        samples.words = np.array([5, 5, 5, 9, 9, 5, 9, 9])
        samples.landmark_positions = np.array([[0, 0, 0]] * 2 + [[5, 0, 0]] * 3 + [[np.nan] * 3] * 3, dtype=float)
        table = ClassTable((1, 2), np.array([[0.0, 0.0, 0.0], [5.0, 0.0, 0.0]]))
        neg = bootstrap_negatives(1, samples, table, 0.5, target=2, seed=0)
        assert neg.tolist() == [2, 5]
        topped_up = bootstrap_negatives(1, samples, table, 0.5, target=4, seed=0)
        assert {2, 5} <= set(topped_up.tolist()) and len(topped_up) == 4
        assert not {0, 1} & set(topped_up.tolist())

    def test_sample_set_invariants(self, train_map, small_bank, small_vocab):
        config = TrainingConfig(landmark_budget=30, background_cap=80, exclusion_radius=0.5)
        samples, table = build_training_set(train_map, small_bank, small_vocab, 30, 80)
        sets = build_sample_sets(samples, table, config)
        for c in range(1, table.n_classes):
            neg = sets.negatives[c]
            assert not np.any(samples.class_ids[neg] == c)
            assert not np.any(samples.heldout[neg])
            assert not np.any(samples.heldout[sets.positives[c]])
            dist = np.linalg.norm(samples.landmark_positions[neg] - table.position_of(c), axis=1)
            assert not np.any(dist <= 0.5)

    def test_select_landmarks(self, train_map):
        chosen = select_landmarks(train_map, 10)
        assert chosen == sorted(chosen) and len(chosen) == 10
        worst_chosen = min(len(train_map.landmarks[lm].observations) for lm in chosen)
        others = [len(lm.observations) for i, lm in train_map.landmarks.items() if i not in chosen]
        assert all(n <= worst_chosen for n in others)


class TestModelFile:
    """Model persistence"""

    def test_save_load_preserves_scores(self, small_model, eval_map, tmp_path):
        path = tmp_path / "model.json"
        save_model(small_model, path)
        loaded = load_model(path)
        assert model_to_record(loaded) == model_to_record(small_model)
        frame = eval_map.frames[0]
        V = frame_features(frame, eval_map.camera_of(frame), small_model.bank, small_model.vocab,
                           small_model.reference_scale, small_model.descriptor_bits, small_model.feature_mode)
        assert np.array_equal(score_matrix(loaded, V), score_matrix(small_model, V))

    def test_malformed_model(self, tmp_path):
        path = tmp_path / "model.json"
        path.write_text('{"format": "context-boost-model"}', encoding="utf-8")
        with pytest.raises(ModelFormatError):
            load_model(path)

    def test_missing_model(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_model(tmp_path / "absent.json")
