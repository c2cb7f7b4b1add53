"""
Shared-Stump Boosting
=====================
Multi-class boosted classifier whose weak learners are decision stumps
shared by a subset of classes (the sharing set); classes outside the set
get a per-class constant. One class per map landmark plus the background
class 0 for untracked keypoints.

Training follows the gentleboost recipe: every round fits a weighted
least-squares stump over per-(sample, class) weights, then reweights with
``w <- w * exp(-z * h)`` and renormalizes per class. Every class keeps its
own negative set, seeded from same-word samples of other landmarks and grown
by periodic hard-negative mining.
"""

import itertools
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property, lru_cache
from pathlib import Path
from typing import Optional

import numpy as np
from pydantic import ValidationError
from tqdm import tqdm

from app.core.config import SHOW_PROGRESS
from app.core.errors import ModelFormatError
from app.models.configs import FeatureMode, TrainingConfig
from app.models.records import ClassTableRecord, ModelRecord, StumpRecord
from app.services.context import FeatureLayout, RegionBank, frame_features, reference_scale
from app.services.map_model import ClassTable, SfMMap, map_fingerprint
from app.services.vocabulary import Vocabulary

logger = logging.getLogger(__name__)

_TINY = np.finfo(np.float64).tiny
_NEVER = float(np.finfo(np.float64).max)


# ============================================================
# TYPES
# ============================================================

@dataclass(eq=False)
class TrainingSet:
    """Feature matrix of all training samples plus per-sample bookkeeping."""
    features: np.ndarray              # (n, D) float32, column major
    class_ids: np.ndarray             # (n,) 0 = background
    sources: np.ndarray               # (n, 2) frame_id, keypoint index
    words: np.ndarray                 # (n,) visual word of the raw descriptor
    landmark_positions: np.ndarray    # (n, 3), nan for untracked keypoints
    layout: FeatureLayout
    heldout: Optional[np.ndarray] = None   # (n,) excluded from fitting

    def __post_init__(self):
        self.features = np.asfortranarray(self.features, dtype=np.float32)
        if self.heldout is None:
            self.heldout = np.zeros(len(self.class_ids), dtype=bool)

    def __len__(self) -> int:
        return len(self.class_ids)

    def column(self, f: int) -> np.ndarray:
        return self.features[:, f].astype(np.float64)


@dataclass
class SampleSets:
    positives: list[np.ndarray]
    negatives: list[np.ndarray]

    @property
    def n_classes(self) -> int:
        return len(self.positives)


@dataclass(eq=False)
class WeakLearner:
    feature: int
    threshold: float
    a: float
    b: float
    sharing: tuple[int, ...]
    k: np.ndarray

    def below_values(self) -> np.ndarray:
        values = np.array(self.k, dtype=np.float64)
        values[list(self.sharing)] = self.b
        return values

    def above_values(self) -> np.ndarray:
        values = np.array(self.k, dtype=np.float64)
        values[list(self.sharing)] = self.a + self.b
        return values

    def __call__(self, v: np.ndarray, c: int) -> float:
        if c in self.sharing:
            return self.a * float(float(v[self.feature]) > self.threshold) + self.b
        return float(self.k[c])

    def to_record(self) -> StumpRecord:
        return StumpRecord(
            feature=self.feature, threshold=self.threshold, a=self.a, b=self.b,
            sharing=list(self.sharing), k=[float(x) for x in self.k],
        )

    @classmethod
    def from_record(cls, record: StumpRecord) -> "WeakLearner":
        return cls(record.feature, record.threshold, record.a, record.b,
                   tuple(record.sharing), np.array(record.k, dtype=np.float64))


@dataclass(frozen=True)
class TrainingLogRow:
    round: int
    J: float
    heldout_precision_at_1: Optional[float]
    sharing_set_size: int
    chosen_feature_kind: str
    stump_cost: float


@dataclass(eq=False)
class BoostedModel:
    learners: list[WeakLearner]
    class_table: ClassTable
    bank: RegionBank
    vocab: Vocabulary
    reference_scale: float
    descriptor_bits: int
    feature_mode: FeatureMode = "full"
    config: TrainingConfig = field(default_factory=TrainingConfig)
    seed: int = 0
    map_fingerprint: str = ""
    training_log: list[TrainingLogRow] = field(default_factory=list, repr=False)

    @property
    def n_classes(self) -> int:
        return self.class_table.n_classes

    @property
    def layout(self) -> FeatureLayout:
        return FeatureLayout(len(self.bank), self.vocab.k, self.descriptor_bits, self.feature_mode)

    @cached_property
    def tables(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Learners stacked as (features, thresholds, below, above) arrays."""
        n = self.n_classes
        if not self.learners:
            return (np.zeros(0, dtype=np.int64), np.zeros(0), np.zeros((0, n)), np.zeros((0, n)))
        return (
            np.array([h.feature for h in self.learners], dtype=np.int64),
            np.array([h.threshold for h in self.learners], dtype=np.float64),
            np.stack([h.below_values() for h in self.learners]),
            np.stack([h.above_values() for h in self.learners]),
        )

    def feature_usage(self) -> dict:
        layout = self.layout
        feats = [h.feature for h in self.learners]
        kinds = [layout.kind_of(f) for f in feats]
        distinct = set(feats)
        return {
            "context_learners": kinds.count("context"),
            "descriptor_learners": kinds.count("descriptor"),
            "distinct_context_dims": sum(1 for f in distinct if layout.kind_of(f) == "context"),
            "distinct_descriptor_dims": sum(1 for f in distinct if layout.kind_of(f) == "descriptor"),
            "learners_on_shared_dims": len(feats) - len(distinct),
        }


# ============================================================
# TRAINING DATA
# ============================================================

def select_landmarks(sfm: SfMMap, budget: int) -> list[int]:
    """Top ``budget`` landmarks by observation count (ties by id), returned in id order."""
    ranked = sorted(sfm.landmarks.values(), key=lambda lm: (-len(lm.observations), lm.landmark_id))
    if budget > len(ranked):
        logger.warning("Landmark budget %d exceeds the %d map landmarks; using all", budget, len(ranked))
    return sorted(lm.landmark_id for lm in ranked[:budget])


def build_training_set(
    sfm: SfMMap,
    bank: RegionBank,
    vocab: Vocabulary,
    landmark_budget: int,
    background_cap: int,
    ref_scale: float | None = None,
    mode: FeatureMode = "full",
    seed: int = 0,
) -> tuple[TrainingSet, ClassTable]:
    """
    Turn map observations into training samples.

    The best ``landmark_budget`` landmarks become classes 1..K and every
    observation of them a positive sample. Untracked keypoints and
    observations of the remaining landmarks form the background class,
    subsampled to ``background_cap``.

    Returns:
        (training set, class table)
    """
    table = ClassTable.from_map(sfm, select_landmarks(sfm, landmark_budget))
    ref_scale = reference_scale(sfm) if ref_scale is None else ref_scale
    n_bits = sfm.descriptor_bits

    positive_refs, background_refs = [], []
    for frame in sfm.frames:
        for idx, kp in enumerate(frame.keypoints):
            (positive_refs if table.class_of(kp.landmark_id) else background_refs).append((frame.frame_id, idx))
    if len(background_refs) > background_cap:
        rng = np.random.default_rng(seed)
        keep = np.sort(rng.choice(len(background_refs), size=background_cap, replace=False))
        background_refs = [background_refs[i] for i in keep]

    wanted: dict[int, list[int]] = {}
    for frame_id, idx in sorted(positive_refs + background_refs):
        wanted.setdefault(frame_id, []).append(idx)

    layout = FeatureLayout(len(bank), vocab.k, n_bits, mode)
    blocks, class_ids, sources, words, positions = [], [], [], [], []
    for frame_id in tqdm(sorted(wanted), desc="features", disable=not SHOW_PROGRESS):
        frame = sfm.frame(frame_id)
        indices = wanted[frame_id]
        blocks.append(frame_features(frame, sfm.camera_of(frame), bank, vocab, ref_scale, n_bits, mode, indices))
        frame_words = vocab.quantize_many(frame.descriptor_matrix(n_bits)[indices])
        for idx, word in zip(indices, frame_words):
            lm_id = frame.keypoints[idx].landmark_id
            class_ids.append(table.class_of(lm_id))
            sources.append((frame_id, idx))
            words.append(int(word))
            positions.append(sfm.landmarks[lm_id].position if lm_id is not None else (np.nan,) * 3)

    features = np.vstack(blocks) if blocks else np.zeros((0, layout.dims), dtype=np.float32)
    samples = TrainingSet(
        features=features,
        class_ids=np.array(class_ids, dtype=np.int64),
        sources=np.array(sources, dtype=np.int64).reshape(-1, 2),
        words=np.array(words, dtype=np.int64),
        landmark_positions=np.array(positions, dtype=np.float64).reshape(-1, 3),
        layout=layout,
    )
    logger.info(
        "Training set: %d classes, %d positive and %d background samples, %d dims",
        table.n_classes - 1, int((samples.class_ids > 0).sum()), int((samples.class_ids == 0).sum()), layout.dims,
    )
    return samples, table


def split_holdout(samples: TrainingSet, fraction: float, seed: int) -> np.ndarray:
    """Mark ``floor(fraction * n_c)`` samples of every class as held out."""
    heldout = np.zeros(len(samples), dtype=bool)
    for c in np.unique(samples.class_ids):
        members = np.flatnonzero(samples.class_ids == c)
        n_hold = int(math.floor(fraction * members.size))
        if n_hold:
            rng = np.random.default_rng([seed, int(c), 1])
            heldout[rng.choice(members, size=n_hold, replace=False)] = True
    return heldout


def _outside_radius(samples: TrainingSet, c: int, class_table: ClassTable, radius: float) -> np.ndarray:
    if c == 0:
        return np.ones(len(samples), dtype=bool)
    dist = np.linalg.norm(samples.landmark_positions - class_table.position_of(c), axis=1)
    return ~(dist <= radius)


def bootstrap_pool(
    c: int,
    samples: TrainingSet,
    class_table: ClassTable,
    exclusion_radius: float,
    positives: np.ndarray | None = None,
) -> np.ndarray:
    """Other-class training samples sharing a visual word with the positives of c, outside the exclusion radius."""
    positives = np.flatnonzero((samples.class_ids == c) & ~samples.heldout) if positives is None else positives
    same_word = np.isin(samples.words, np.unique(samples.words[positives]))
    eligible = (samples.class_ids != c) & ~samples.heldout & _outside_radius(samples, c, class_table, exclusion_radius)
    return np.flatnonzero(eligible & same_word)


def bootstrap_negatives(
    c: int,
    samples: TrainingSet,
    class_table: ClassTable,
    exclusion_radius: float,
    target: int,
    seed: int = 0,
    positives: np.ndarray | None = None,
) -> np.ndarray:
    """
    Negative set of one class.

    Draws from the same-word pool first and tops up with uniformly drawn
    other-class samples when the pool holds fewer than ``target``.

    Returns:
        Sorted sample indices
    """
    rng = np.random.default_rng([seed, c])
    pool = bootstrap_pool(c, samples, class_table, exclusion_radius, positives)
    if pool.size >= target:
        return np.sort(rng.choice(pool, size=target, replace=False))
    eligible = (samples.class_ids != c) & ~samples.heldout & _outside_radius(samples, c, class_table, exclusion_radius)
    eligible[pool] = False
    rest = np.flatnonzero(eligible)
    extra = rng.choice(rest, size=min(target - pool.size, rest.size), replace=False)
    return np.sort(np.concatenate([pool, extra]).astype(np.int64))


def build_sample_sets(samples: TrainingSet, class_table: ClassTable, config: TrainingConfig) -> SampleSets:
    """Held-out split plus per-class positive and bootstrapped negative sets."""
    samples.heldout = split_holdout(samples, config.holdout_fraction, config.seed)
    positives, negatives = [], []
    for c in range(class_table.n_classes):
        pos = np.flatnonzero((samples.class_ids == c) & ~samples.heldout)
        target = min(config.negative_ratio * pos.size, config.negative_cap)
        neg = (bootstrap_negatives(c, samples, class_table, config.exclusion_radius, target, config.seed, pos)
               if pos.size else np.zeros(0, dtype=np.int64))
        positives.append(pos)
        negatives.append(neg)
    logger.info("Sample sets: %d positives, %d negatives, %d held out",
                sum(p.size for p in positives), sum(n.size for n in negatives), int(samples.heldout.sum()))
    return SampleSets(positives, negatives)


# ============================================================
# TRAINER STATE
# ============================================================

@dataclass(eq=False)
class TrainerState:
    sets: SampleSets
    pair_sample: np.ndarray
    pair_class: np.ndarray
    pair_z: np.ndarray
    weights: np.ndarray
    n_classes: int
    rng: np.random.Generator
    round: int = 0
    candidate_count: int = 0
    log_objective: float = 0.0
    learners: list[WeakLearner] = field(default_factory=list)
    active_samples: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        self.refresh_active()

    def refresh_active(self) -> None:
        self.active_samples = np.unique(self.pair_sample)

    def class_weight(self) -> np.ndarray:
        return np.bincount(self.pair_class, weights=self.weights, minlength=self.n_classes)


def init_state(sets: SampleSets, seed: int = 0, candidate_count: int = 0) -> TrainerState:
    """Uniform weights ``1 / |active pairs of c|`` for every class."""
    samples, classes, labels, weights = [], [], [], []
    for c in range(sets.n_classes):
        pos, neg = sets.positives[c], sets.negatives[c]
        n = pos.size + neg.size
        if n == 0:
            continue
        samples.extend([pos, neg])
        classes.append(np.full(n, c, dtype=np.int64))
        labels.extend([np.ones(pos.size), -np.ones(neg.size)])
        weights.append(np.full(n, 1.0 / n))
    cat = lambda parts, dtype: np.concatenate(parts).astype(dtype) if parts else np.zeros(0, dtype=dtype)
    return TrainerState(
        sets=sets,
        pair_sample=cat(samples, np.int64),
        pair_class=cat(classes, np.int64),
        pair_z=cat(labels, np.float64),
        weights=cat(weights, np.float64),
        n_classes=sets.n_classes,
        rng=np.random.default_rng(seed),
        candidate_count=candidate_count,
    )


# ============================================================
# STUMP FITTING
# ============================================================

def _ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    num = np.asarray(num, dtype=np.float64)
    return np.divide(num, den, out=np.zeros(np.broadcast(num, den).shape), where=np.asarray(den) > 0)


def fit_stump(f: int, theta: float, S, state: TrainerState, samples: TrainingSet) -> tuple[float, float, float]:
    """
    Weighted least-squares stump values for a fixed (f, θ, S).

    Returns:
        (a, b, weighted squared error of the pairs of classes in S)
    """
    in_s = np.isin(state.pair_class, list(S))
    x = samples.column(f)[state.pair_sample[in_s]] > theta
    w, z = state.weights[in_s], state.pair_z[in_s]
    b = float(_ratio(np.sum(w[~x] * z[~x]), np.sum(w[~x])))
    ab = float(_ratio(np.sum(w[x] * z[x]), np.sum(w[x])))
    h = np.where(x, ab, b)
    return ab - b, b, float(np.sum(w * (z - h) ** 2))


def fit_class_constant(c, state: TrainerState):
    """
    Weighted mean of z over the active pairs of class c.

    ``c`` may also be an array of classes, in which case an array of means is returned.
    """
    W = state.class_weight()
    S = np.bincount(state.pair_class, weights=state.weights * state.pair_z, minlength=state.n_classes)
    k = _ratio(S, W)[c]
    return float(k) if np.ndim(k) == 0 else k


def incremental_update_b(b_num, b_den, b_c, w_c):
    """
    Regression value after adding one class with mean ``b_c`` over weight ``w_c`` to a sharing set.

    Works elementwise on arrays of candidate classes; an empty set yields 0.
    """
    value = _ratio(np.asarray(b_num) + np.asarray(b_c) * w_c, np.asarray(b_den) + w_c)
    return float(value) if value.ndim == 0 else value


@dataclass
class _SplitStats:
    thresholds: np.ndarray
    Sa: np.ndarray   # (nC, T) weighted sum of z above θ
    Wa: np.ndarray
    Sb: np.ndarray
    Wb: np.ndarray
    q: np.ndarray    # (nC,) S_c^2 / W_c
    const: float     # J with every class on its constant

    def response(self) -> np.ndarray:
        """Per-class above-threshold weighted mean of z."""
        return _ratio(self.Sa, self.Wa)


def _thresholds(x_active: np.ndarray, cap: int) -> np.ndarray:
    uniq = np.unique(x_active)
    if uniq.size < 2:
        return np.zeros(0)
    mids = 0.5 * (uniq[:-1] + uniq[1:])
    if mids.size > cap:
        mids = mids[np.unique(np.round(np.linspace(0, mids.size - 1, cap)).astype(np.int64))]
    return mids


def _split_stats(x: np.ndarray, state: TrainerState, cap: int, thresholds=None) -> Optional[_SplitStats]:
    thr = _thresholds(x[state.active_samples], cap) if thresholds is None else np.asarray(thresholds, dtype=np.float64)
    if thr.size == 0:
        return None
    T, nC = thr.size, state.n_classes
    bins = np.searchsorted(thr, x, side="left")[state.pair_sample]
    key = state.pair_class * (T + 1) + bins
    W = np.bincount(key, weights=state.weights, minlength=nC * (T + 1)).reshape(nC, T + 1)
    S = np.bincount(key, weights=state.weights * state.pair_z, minlength=nC * (T + 1)).reshape(nC, T + 1)
    Wb = np.cumsum(W, axis=1)[:, :T]
    Sb = np.cumsum(S, axis=1)[:, :T]
    Wa = np.cumsum(W[:, ::-1], axis=1)[:, ::-1][:, 1:]
    Sa = np.cumsum(S[:, ::-1], axis=1)[:, ::-1][:, 1:]
    Wt, St = W.sum(axis=1), S.sum(axis=1)
    q = _ratio(St * St, Wt)
    return _SplitStats(thr, Sa, Wa, Sb, Wb, q, float(np.sum(Wt) - np.sum(q)))


def _set_gain(SaS, WaS, SbS, WbS, qS):
    return _ratio(SaS * SaS, WaS) + _ratio(SbS * SbS, WbS) - qS


def _response_order(stats: _SplitStats) -> np.ndarray:
    """Per threshold column, classes by descending above-threshold response; ties by class index."""
    return np.argsort(-stats.response(), axis=0, kind="stable")


def init_sharing_set(f: int, theta: float, state: TrainerState, samples: TrainingSet) -> list[int]:
    """Classes ordered by their individual above-threshold response, descending; ties by class index."""
    stats = _split_stats(samples.column(f), state, 1, thresholds=[theta])
    if stats is None:
        return list(range(state.n_classes))
    return [int(c) for c in _response_order(stats)[:, 0]]


def _prefix_values(stats: _SplitStats, seq: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """
    Regression values of every prefix of the class sequences ``seq`` (nC, T).

    Row i holds the set of the first i + 1 classes of each column, obtained
    from the set of the first i by ``incremental_update_b``.

    Returns:
        (a + b, b, weight above θ, weight below θ) per prefix
    """
    take = lambda a: np.take_along_axis(a, seq, axis=0)
    Sa, Wa, Sb, Wb = take(stats.Sa), take(stats.Wa), take(stats.Sb), take(stats.Wb)
    before = lambda a: np.cumsum(a, axis=0) - a
    ab = incremental_update_b(before(Sa), before(Wa), _ratio(Sa, Wa), Wa)
    b = incremental_update_b(before(Sb), before(Wb), _ratio(Sb, Wb), Wb)
    return ab, b, np.cumsum(Wa, axis=0), np.cumsum(Wb, axis=0)


def _search_ordered(stats: _SplitStats) -> tuple[np.ndarray, np.ndarray]:
    """Best prefix or suffix of the response order per threshold."""
    order = _response_order(stats)
    gains = []
    for seq in (order, order[::-1]):
        ab, b, WaS, WbS = _prefix_values(stats, seq)
        gains.append(ab * ab * WaS + b * b * WbS - np.cumsum(stats.q[seq], axis=0))
    gain = np.vstack(gains)                   # (2 nC, T): prefixes then suffixes
    best_row = np.argmax(gain, axis=0)
    return gain[best_row, np.arange(gain.shape[1])], best_row


def _ordered_members(stats: _SplitStats, row: int, t: int) -> tuple[int, ...]:
    order = _response_order(stats)[:, t]
    nC = order.size
    chosen = order[: row + 1] if row < nC else order[::-1][: row - nC + 1]
    return tuple(sorted(int(c) for c in chosen))


@lru_cache(maxsize=16)
def _subset_masks(n: int) -> np.ndarray:
    rows = [
        [1.0 if c in combo else 0.0 for c in range(n)]
        for size in range(1, n + 1)
        for combo in itertools.combinations(range(n), size)
    ]
    return np.array(rows)


def _search_exhaustive(stats: _SplitStats) -> tuple[np.ndarray, np.ndarray]:
    masks = _subset_masks(stats.q.size)
    gain = _set_gain(masks @ stats.Sa, masks @ stats.Wa, masks @ stats.Sb, masks @ stats.Wb, (masks @ stats.q)[:, None])
    best_row = np.argmax(gain, axis=0)
    return gain[best_row, np.arange(gain.shape[1])], best_row


def greedy_sharing_set(stats: _SplitStats, t: int) -> tuple[float, tuple[int, ...]]:
    """
    Greedy forward selection of a sharing set for threshold column t.

    Adds the class that maximizes the set gain at every step, updating the
    set's regression values incrementally, and keeps the best set seen.
    """
    Sa, Wa, Sb, Wb = stats.Sa[:, t], stats.Wa[:, t], stats.Sb[:, t], stats.Wb[:, t]
    chosen: list[int] = []
    remaining = list(range(stats.q.size))
    sums = np.zeros(5)
    best_gain, best_set = -np.inf, ()
    while remaining:
        cand = np.array(remaining)
        ab = incremental_update_b(sums[0], sums[1], _ratio(Sa[cand], Wa[cand]), Wa[cand])
        b = incremental_update_b(sums[2], sums[3], _ratio(Sb[cand], Wb[cand]), Wb[cand])
        g = ab * ab * (sums[1] + Wa[cand]) + b * b * (sums[3] + Wb[cand]) - (sums[4] + stats.q[cand])
        j = int(np.argmax(g))
        c = remaining.pop(j)
        chosen.append(c)
        sums += (Sa[c], Wa[c], Sb[c], Wb[c], stats.q[c])
        if g[j] > best_gain:
            best_gain, best_set = float(g[j]), tuple(sorted(chosen))
    return best_gain, best_set


@dataclass
class _Candidate:
    gain: float
    feature: int
    threshold_index: int
    stats: _SplitStats
    members: tuple[int, ...]


def _best_for_feature(f: int, samples: TrainingSet, state: TrainerState, config: TrainingConfig) -> Optional[_Candidate]:
    stats = _split_stats(samples.column(f), state, config.threshold_cap)
    if stats is None:
        return None
    if state.n_classes <= config.exhaustive_max_classes:
        gains, rows = _search_exhaustive(stats)
        t = int(np.argmax(gains))
        mask = _subset_masks(state.n_classes)[rows[t]]
        members = tuple(int(c) for c in np.flatnonzero(mask))
        return _Candidate(float(gains[t]), f, t, stats, members)
    if config.sharing_search == "greedy":
        results = [greedy_sharing_set(stats, t) for t in range(stats.thresholds.size)]
        t = int(np.argmax([g for g, _ in results]))
        return _Candidate(results[t][0], f, t, stats, results[t][1])
    gains, rows = _search_ordered(stats)
    t = int(np.argmax(gains))
    return _Candidate(float(gains[t]), f, t, stats, _ordered_members(stats, int(rows[t]), t))


def _learner_from(cand: _Candidate, state: TrainerState, samples: TrainingSet) -> WeakLearner:
    theta = float(cand.stats.thresholds[cand.threshold_index])
    a, b, _ = fit_stump(cand.feature, theta, cand.members, state, samples)
    k = fit_class_constant(np.arange(state.n_classes), state)
    k[list(cand.members)] = 0.0
    return WeakLearner(cand.feature, theta, a, b, tuple(cand.members), k)


def boost_round(state: TrainerState, samples: TrainingSet, config: TrainingConfig) -> tuple[WeakLearner, float]:
    """
    Fit one shared stump.

    Samples ``candidate_features`` dimensions, searches thresholds and sharing
    sets for each and keeps the lowest weighted squared error. Ties go to the
    lowest feature index, then the lowest threshold.

    Returns:
        (learner, its weighted squared error)
    """
    D = samples.layout.dims
    count = min(state.candidate_count or config.candidate_features, D)
    features = np.sort(state.rng.choice(D, size=count, replace=False))

    if config.workers > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            candidates = list(pool.map(lambda f: _best_for_feature(int(f), samples, state, config), features))
    else:
        candidates = [_best_for_feature(int(f), samples, state, config) for f in features]

    best: Optional[_Candidate] = None
    for cand in candidates:
        if cand is not None and (best is None or cand.gain > best.gain):
            best = cand
    if best is None:
        # no candidate varies: every class on its constant, background carried as the shared below value
        W = state.class_weight()
        k = fit_class_constant(np.arange(state.n_classes), state)
        learner = WeakLearner(int(features[0]), _NEVER, 0.0, float(k[0]), (0,), k)
        learner.k[0] = 0.0
        return learner, float(np.sum(W) - np.sum(W * k * k))
    return _learner_from(best, state, samples), best.stats.const - best.gain


# ============================================================
# WEIGHTS AND MINING
# ============================================================

def learner_response(learner: WeakLearner, x: np.ndarray, classes: np.ndarray) -> np.ndarray:
    """h(v, c) for feature values x (float64) of samples of the given classes."""
    return np.where(x > learner.threshold, learner.above_values()[classes], learner.below_values()[classes])


def update_weights(state: TrainerState, learner: WeakLearner, samples: TrainingSet) -> float:
    """
    Gentleboost reweighting ``w <- w * exp(-z * h)``, renormalized per class.

    Returns:
        Mean over classes of the log loss ratio of this round, at most 0
    """
    if state.weights.size == 0:
        return 0.0
    x = samples.column(learner.feature)[state.pair_sample]
    h = learner_response(learner, x, state.pair_class)
    w = np.maximum(state.weights * np.exp(-state.pair_z * h), _TINY)
    ratio = np.bincount(state.pair_class, weights=w, minlength=state.n_classes)
    active = np.bincount(state.pair_class, minlength=state.n_classes) > 0
    # bounded by 0 analytically; clamp rounding noise
    step = min(0.0, float(np.mean(np.log(ratio[active]))))
    state.weights = np.maximum(w / ratio[state.pair_class], _TINY)
    state.log_objective += step
    return step


def score_samples(learners: list[WeakLearner], samples: TrainingSet, rows: np.ndarray, classes: np.ndarray) -> np.ndarray:
    """Scores H(v_i, c) of the given sample rows for the given classes."""
    H = np.zeros((rows.size, classes.size))
    if not learners:
        return H
    below = np.stack([h.below_values()[classes] for h in learners])
    above = np.stack([h.above_values()[classes] for h in learners])
    B = np.column_stack([samples.column(h.feature)[rows] > h.threshold for h in learners]).astype(np.float64)
    return B @ (above - below) + below.sum(axis=0)


def mine_hard_negatives(
    state: TrainerState,
    samples: TrainingSet,
    class_table: ClassTable,
    config: TrainingConfig,
    class_chunk: int = 256,
) -> int:
    """
    Add misranked samples to the negative sets.

    A training sample outside class c's sets whose score H(v, c) is positive
    is an offender. The top offenders, at most ``floor(growth * |L_c^-|)``,
    join L_c^- with the class's mean negative weight; weights are then
    renormalized.

    Returns:
        Number of pairs added
    """
    rows = np.flatnonzero(~samples.heldout)
    added_samples, added_classes, added_weights = [], [], []
    for start in range(0, state.n_classes, class_chunk):
        classes = np.arange(start, min(start + class_chunk, state.n_classes))
        H = score_samples(state.learners, samples, rows, classes)
        for j, c in enumerate(classes):
            c = int(c)
            pos, neg = state.sets.positives[c], state.sets.negatives[c]
            cap = int(math.floor(config.mining_growth * neg.size))
            if cap == 0:
                continue
            member = np.zeros(len(samples), dtype=bool)
            member[pos] = True
            member[neg] = True
            eligible = (H[:, j] > 0) & ~member[rows] & (samples.class_ids[rows] != c)
            eligible &= _outside_radius(samples, c, class_table, config.exclusion_radius)[rows]
            offenders = np.flatnonzero(eligible)
            if offenders.size == 0:
                continue
            top = offenders[np.argsort(-H[offenders, j], kind="stable")[:cap]]
            new = np.sort(rows[top])
            mask = (state.pair_class == c) & (state.pair_z < 0)
            mean_w = float(state.weights[mask].mean()) if mask.any() else float(state.weights[state.pair_class == c].mean())
            state.sets.negatives[c] = np.sort(np.concatenate([neg, new]))
            added_samples.append(new)
            added_classes.append(np.full(new.size, c, dtype=np.int64))
            added_weights.append(np.full(new.size, mean_w))

    if not added_samples:
        return 0
    n_added = sum(a.size for a in added_samples)
    state.pair_sample = np.concatenate([state.pair_sample, *added_samples])
    state.pair_class = np.concatenate([state.pair_class, *added_classes])
    state.pair_z = np.concatenate([state.pair_z, -np.ones(n_added)])
    state.weights = np.concatenate([state.weights, *added_weights])
    state.weights = state.weights / state.class_weight()[state.pair_class]
    state.refresh_active()
    logger.debug("Mining added %d negative pairs", n_added)
    return n_added


# ============================================================
# TRAINING LOOP
# ============================================================

def _heldout_precision(scores: np.ndarray, truth: np.ndarray) -> Optional[float]:
    if truth.size == 0:
        return None
    return float(np.mean(np.argmax(scores, axis=1) == truth))


def train(
    config: TrainingConfig,
    samples: TrainingSet,
    sets: SampleSets,
    class_table: ClassTable,
    bank: RegionBank,
    vocab: Vocabulary,
    ref_scale: float,
    fingerprint: str = "",
) -> BoostedModel:
    """
    Run the boosting rounds.

    Each round fits a shared stump, reweights, and every ``mining_period``
    rounds mines hard negatives. The per-round training log holds the
    monotone objective J, held-out precision@1, the sharing-set size and the
    stump's weighted squared error.

    Returns:
        Trained model with its training log attached
    """
    state = init_state(sets, config.seed, config.candidate_features)
    held = np.flatnonzero(samples.heldout & (samples.class_ids > 0))
    held_truth = samples.class_ids[held]
    held_scores = np.zeros((held.size, state.n_classes))
    log: list[TrainingLogRow] = []

    for m in tqdm(range(config.rounds), desc="boosting", disable=not SHOW_PROGRESS):
        learner, cost = boost_round(state, samples, config)
        update_weights(state, learner, samples)
        state.learners.append(learner)
        state.round = m + 1
        if held.size:
            x = samples.column(learner.feature)[held][:, None]
            held_scores += np.where(x > learner.threshold, learner.above_values()[None, :], learner.below_values()[None, :])
        row = TrainingLogRow(
            round=m + 1,
            J=math.exp(state.log_objective),
            heldout_precision_at_1=_heldout_precision(held_scores, held_truth),
            sharing_set_size=len(learner.sharing),
            chosen_feature_kind=samples.layout.kind_of(learner.feature),
            stump_cost=cost,
        )
        log.append(row)
        logger.debug("round %d: J=%.6g cost=%.6g |S|=%d", row.round, row.J, cost, row.sharing_set_size)
        if row.round % 50 == 0:
            logger.info("round %d/%d: J=%.6g held-out p@1=%s", row.round, config.rounds, row.J, row.heldout_precision_at_1)
        if config.mining_period and (m + 1) % config.mining_period == 0 and m + 1 < config.rounds:
            mine_hard_negatives(state, samples, class_table, config)

    model = BoostedModel(
        learners=state.learners,
        class_table=class_table,
        bank=bank,
        vocab=vocab,
        reference_scale=ref_scale,
        descriptor_bits=samples.layout.descriptor_bits,
        feature_mode=samples.layout.mode,
        config=config,
        seed=config.seed,
        map_fingerprint=fingerprint,
        training_log=log,
    )
    logger.info("Trained %d learners, feature usage %s", len(model.learners), model.feature_usage())
    return model


def fit_model(sfm: SfMMap, bank: RegionBank, vocab: Vocabulary, config: TrainingConfig) -> BoostedModel:
    """Training set, sample sets and boosting in one call."""
    ref_scale = reference_scale(sfm)
    samples, table = build_training_set(
        sfm, bank, vocab, config.landmark_budget, config.background_cap,
        ref_scale=ref_scale, mode=config.feature_mode, seed=config.seed,
    )
    sets = build_sample_sets(samples, table, config)
    return train(config, samples, sets, table, bank, vocab, ref_scale, map_fingerprint(sfm))


# ============================================================
# PERSISTENCE
# ============================================================

def model_to_record(model: BoostedModel) -> ModelRecord:
    return ModelRecord(
        feature_mode=model.feature_mode,
        descriptor_bits=model.descriptor_bits,
        reference_scale=model.reference_scale,
        class_table=ClassTableRecord(
            landmark_ids=list(model.class_table.landmark_ids),
            positions=[tuple(float(x) for x in p) for p in model.class_table.positions],
        ),
        regions=model.bank.to_record(),
        vocabulary=model.vocab.to_record(),
        learners=[h.to_record() for h in model.learners],
        config=model.config,
        seed=model.seed,
        map_fingerprint=model.map_fingerprint,
    )


def model_from_record(record: ModelRecord) -> BoostedModel:
    table = ClassTable(tuple(record.class_table.landmark_ids), np.array(record.class_table.positions).reshape(-1, 3))
    learners = [WeakLearner.from_record(r) for r in record.learners]
    layout_dims = FeatureLayout(len(record.regions.regions), record.vocabulary.k,
                                record.descriptor_bits, record.feature_mode).dims
    for h in learners:
        if not 0 <= h.feature < layout_dims or h.k.size != table.n_classes:
            raise ModelFormatError(f"learner on feature {h.feature} does not fit the model layout")
    return BoostedModel(
        learners=learners,
        class_table=table,
        bank=RegionBank.from_record(record.regions),
        vocab=Vocabulary.from_record(record.vocabulary),
        reference_scale=record.reference_scale,
        descriptor_bits=record.descriptor_bits,
        feature_mode=record.feature_mode,
        config=record.config,
        seed=record.seed,
        map_fingerprint=record.map_fingerprint,
    )


def save_model(model: BoostedModel, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(model_to_record(model).model_dump_json())
        fh.write("\n")
    logger.info("Saved model with %d learners to %s", len(model.learners), path)


def load_model(path: str | Path) -> BoostedModel:
    """
    Read a model file.

    Raises:
        FileNotFoundError: path does not exist
        ModelFormatError: the file is not a valid model
    """
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    try:
        record = ModelRecord.model_validate_json(text)
    except ValidationError as e:
        raise ModelFormatError(f"{path}: {e.errors()[0]['msg']}") from e
    return model_from_record(record)
