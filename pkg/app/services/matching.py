"""
Matching
========
Query keypoints to ranked landmark candidates and accepted 2D-3D
correspondences, by classifier evaluation (optionally restricted through
the inverted file) or by one of the two exact nearest-neighbour baselines.
"""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.spatial.distance import cdist

from app.core.config import DEFAULT_TOP_K, PROJECTED_DIMS
from app.core.errors import DescriptorLengthError
from app.models.configs import MatchConfig
from app.services.bits import hamming_matrix
from app.services.boosting import BoostedModel
from app.services.context import frame_features
from app.services.map_model import CameraIntrinsics, Frame, SfMMap
from app.services.vocabulary import InvertedFile, Vocabulary, candidate_classes, words_to_candidates

logger = logging.getLogger(__name__)


# ============================================================
# TYPES
# ============================================================

@dataclass(frozen=True)
class RankedCandidates:
    """Classes ordered by (score desc, class asc), truncated to top_k."""
    classes: tuple[int, ...]
    scores: tuple[float, ...]
    background_score: float
    evaluated: int
    frame_id: Optional[int] = None
    keypoint_index: Optional[int] = None

    @property
    def head(self) -> Optional[int]:
        return self.classes[0] if self.classes else None

    @property
    def head_score(self) -> float:
        return self.scores[0] if self.scores else float("-inf")


@dataclass(frozen=True)
class NeighborList:
    """Landmarks ordered by (distance asc, landmark id asc), truncated to top_k."""
    landmark_ids: tuple[int, ...]
    distances: tuple[float, ...]
    frame_id: Optional[int] = None
    keypoint_index: Optional[int] = None


@dataclass(frozen=True)
class Correspondence2D3D:
    frame_id: int
    keypoint_index: int
    landmark_id: int
    score: float
    matcher: str


# ============================================================
# CLASSIFIER SCORING
# ============================================================

def score_matrix(model: BoostedModel, V: np.ndarray, classes=None) -> np.ndarray:
    """
    H(v, c) for every row of V and every requested class.

    Learner contributions are accumulated one learner at a time, so any
    column subset gives bit-identical scores to the full evaluation.
    """
    V = np.atleast_2d(V)
    features, thresholds, below, above = model.tables
    cols = np.arange(model.n_classes) if classes is None else np.asarray(classes, dtype=np.int64)
    acc = np.zeros((V.shape[0], cols.size))
    if features.size == 0:
        return acc
    if V.shape[1] != model.layout.dims:
        raise DescriptorLengthError(f"feature vector has {V.shape[1]} dims, model expects {model.layout.dims}")
    B = V[:, features].astype(np.float64) > thresholds
    below, above = below[:, cols], above[:, cols]
    for m in range(features.size):
        acc += np.where(B[:, m:m + 1], above[m], below[m])
    return acc


def score(model: BoostedModel, v: np.ndarray, c: int) -> float:
    """H(v, c): sum over learners of a·[v_f > θ] + b for c in S, else k^c."""
    return float(score_matrix(model, v, [c])[0, 0])


def rank_scores(scores: np.ndarray, classes: np.ndarray, top_k: int) -> tuple[tuple[int, ...], tuple[float, ...]]:
    order = np.lexsort((classes, -scores))[:top_k]
    return tuple(int(c) for c in classes[order]), tuple(float(s) for s in scores[order])


def classify(model: BoostedModel, v: np.ndarray, top_k: int = DEFAULT_TOP_K) -> RankedCandidates:
    """Rank all classes, background included."""
    scores = score_matrix(model, v)[0]
    classes, ranked = rank_scores(scores, np.arange(model.n_classes), top_k)
    return RankedCandidates(classes, ranked, float(scores[0]), model.n_classes)


def classify_with_inverted_file(
    model: BoostedModel,
    v: np.ndarray,
    descriptor: np.ndarray,
    vocab: Vocabulary,
    inv: InvertedFile,
    top_k: int = DEFAULT_TOP_K,
) -> RankedCandidates:
    """Rank only the classes sharing the descriptor's visual word, plus the background."""
    cands = np.array(candidate_classes(descriptor, vocab, inv), dtype=np.int64)
    scores = score_matrix(model, v, cands)[0]
    classes, ranked = rank_scores(scores, cands, top_k)
    return RankedCandidates(classes, ranked, float(scores[0]), int(cands.size))


def rank_frame(
    frame: Frame,
    model: BoostedModel,
    cam: CameraIntrinsics,
    inv: Optional[InvertedFile] = None,
    top_k: int = DEFAULT_TOP_K,
    vocab: Optional[Vocabulary] = None,
) -> list[RankedCandidates]:
    """
    Ranked candidates for every keypoint of a frame, in keypoint order.

    With an inverted file, keypoints are grouped by visual word and each
    group is scored against its bucket only.
    """
    if not frame.keypoints:
        return []
    V = frame_features(frame, cam, model.bank, model.vocab, model.reference_scale,
                       model.descriptor_bits, model.feature_mode)
    results: list[Optional[RankedCandidates]] = [None] * len(frame.keypoints)

    if inv is None:
        scores = score_matrix(model, V)
        all_classes = np.arange(model.n_classes)
        for i in range(len(frame.keypoints)):
            classes, ranked = rank_scores(scores[i], all_classes, top_k)
            results[i] = RankedCandidates(classes, ranked, float(scores[i, 0]), model.n_classes, frame.frame_id, i)
        return results

    vocab = vocab or model.vocab
    words = vocab.quantize_many(frame.descriptor_matrix(model.descriptor_bits))
    for word in np.unique(words):
        rows = np.flatnonzero(words == word)
        cands = np.array(words_to_candidates(int(word), inv), dtype=np.int64)
        scores = score_matrix(model, V[rows], cands)
        for r, i in enumerate(rows):
            classes, ranked = rank_scores(scores[r], cands, top_k)
            results[i] = RankedCandidates(classes, ranked, float(scores[r, 0]), int(cands.size), frame.frame_id, int(i))
    return results


def accept(ranked: RankedCandidates, margin: float) -> bool:
    """Head must be a landmark class scoring above the background and above the margin."""
    return (
        ranked.head not in (None, 0)
        and ranked.head_score > ranked.background_score
        and ranked.head_score > margin
    )


def match_frame(
    frame: Frame,
    model: BoostedModel,
    cam: CameraIntrinsics,
    inv: Optional[InvertedFile] = None,
    config: Optional[MatchConfig] = None,
    vocab: Optional[Vocabulary] = None,
) -> list[Correspondence2D3D]:
    """
    Accepted head matches of a frame's keypoints.

    Args:
        frame: Query frame
        model: Trained classifier
        cam: Camera of the frame
        inv: Inverted file; full classification when omitted
        config: Accept margin and ranking depth
        vocab: Quantizer for the inverted file, the model's by default

    Returns:
        Correspondences ordered by keypoint index, never on the background
    """
    config = config or MatchConfig()
    tag = "boost" if inv is None else "boost-inv"
    return accepted_correspondences(rank_frame(frame, model, cam, inv, config.top_k, vocab), model, config.margin, tag)


def accepted_correspondences(
    ranked: list[RankedCandidates],
    model: BoostedModel,
    margin: float,
    tag: str,
) -> list[Correspondence2D3D]:
    return [
        Correspondence2D3D(r.frame_id, r.keypoint_index, model.class_table.landmark_of(r.head), r.head_score, tag)
        for r in ranked if accept(r, margin)
    ]


def ranked_landmarks(ranked: RankedCandidates, model: BoostedModel) -> tuple[int, ...]:
    """Candidate classes as landmark ids, the background written as -1."""
    table = model.class_table
    return tuple(-1 if c == 0 else table.landmark_of(c) for c in ranked.classes)


# ============================================================
# BASELINES
# ============================================================

@dataclass(frozen=True, eq=False)
class DescriptorIndex:
    """Observation descriptors of the database landmarks, grouped by landmark id."""
    descriptors: np.ndarray      # (n, bits) 0/1
    landmark_ids: np.ndarray     # (n,) sorted
    group_starts: np.ndarray     # first row of every landmark
    group_ids: np.ndarray        # landmark id of every group

    @classmethod
    def from_map(cls, sfm: SfMMap, landmark_ids=None) -> "DescriptorIndex":
        ids = sorted(sfm.landmarks) if landmark_ids is None else sorted(landmark_ids)
        blocks = [sfm.landmark_descriptors(lm) for lm in ids]
        counts = np.array([b.shape[0] for b in blocks], dtype=np.int64)
        descriptors = np.vstack(blocks) if blocks else np.zeros((0, sfm.descriptor_bits), dtype=np.uint8)
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]]).astype(np.int64) if ids else np.zeros(0, dtype=np.int64)
        return cls(descriptors, np.repeat(np.array(ids, dtype=np.int64), counts), starts, np.array(ids, dtype=np.int64))

    def per_landmark_min(self, distances: np.ndarray) -> np.ndarray:
        """Reduce (queries, rows) distances to (queries, landmarks) minima."""
        if self.group_ids.size == 0:
            return np.zeros((distances.shape[0], 0))
        return np.minimum.reduceat(distances, self.group_starts, axis=1)


def _neighbor_lists(frame: Frame, index: DescriptorIndex, per_landmark: np.ndarray, top_k: int) -> list[NeighborList]:
    out = []
    for i in range(per_landmark.shape[0]):
        order = np.lexsort((index.group_ids, per_landmark[i]))[:top_k]
        out.append(NeighborList(
            tuple(int(x) for x in index.group_ids[order]),
            tuple(float(x) for x in per_landmark[i, order]),
            frame.frame_id, i,
        ))
    return out


def rank_hamming_baseline(frame: Frame, index: DescriptorIndex, n_bits: int, top_k: int = DEFAULT_TOP_K) -> list[NeighborList]:
    """Exact Hamming nearest landmarks per keypoint; ties by landmark id."""
    if not frame.keypoints:
        return []
    Q = frame.descriptor_matrix(n_bits)
    if Q.shape[1] != index.descriptors.shape[1]:
        raise DescriptorLengthError("query and database descriptor lengths differ")
    return _neighbor_lists(frame, index, index.per_landmark_min(hamming_matrix(Q, index.descriptors)), top_k)


def make_projection(n_bits: int, dims: int = PROJECTED_DIMS, seed: int = 0) -> np.ndarray:
    """Seeded random ±1 matrix with orthonormalized rows, shape (dims, n_bits)."""
    rng = np.random.default_rng(seed)
    signs = rng.choice(np.array([-1.0, 1.0]), size=(dims, n_bits))
    q, _ = np.linalg.qr(signs.T)
    return q.T


def project_descriptors(bits: np.ndarray, projection: np.ndarray) -> np.ndarray:
    return (2.0 * np.asarray(bits, dtype=np.float64) - 1.0) @ projection.T


@dataclass(frozen=True, eq=False)
class ProjectedIndex:
    index: DescriptorIndex
    projection: np.ndarray
    projected: np.ndarray

    @classmethod
    def build(cls, index: DescriptorIndex, n_bits: int, dims: int = PROJECTED_DIMS, seed: int = 0) -> "ProjectedIndex":
        projection = make_projection(n_bits, dims, seed)
        return cls(index, projection, project_descriptors(index.descriptors, projection))


def rank_projected_baseline(frame: Frame, pindex: ProjectedIndex, n_bits: int, top_k: int = DEFAULT_TOP_K) -> list[NeighborList]:
    """Exact Euclidean nearest landmarks in the projected space; ties by landmark id."""
    if not frame.keypoints:
        return []
    Q = project_descriptors(frame.descriptor_matrix(n_bits), pindex.projection)
    distances = cdist(Q, pindex.projected, metric="sqeuclidean") if pindex.projected.shape[0] else np.zeros((Q.shape[0], 0))
    per_landmark = np.sqrt(pindex.index.per_landmark_min(distances))
    return _neighbor_lists(frame, pindex.index, per_landmark, top_k)


def head_correspondences(lists: list[NeighborList], tag: str) -> list[Correspondence2D3D]:
    """Nearest landmark of every list as a correspondence scored by its distance."""
    return [
        Correspondence2D3D(nl.frame_id, nl.keypoint_index, nl.landmark_ids[0], nl.distances[0], tag)
        for nl in lists if nl.landmark_ids
    ]


def match_hamming_baseline(frame: Frame, sfm: SfMMap, top_k: int = DEFAULT_TOP_K, index: Optional[DescriptorIndex] = None) -> list[Correspondence2D3D]:
    """Head of the exact Hamming ranking per keypoint; the score is the distance."""
    index = index or DescriptorIndex.from_map(sfm)
    return head_correspondences(rank_hamming_baseline(frame, index, sfm.descriptor_bits, top_k), "hamming")


def match_projected_baseline(frame: Frame, sfm: SfMMap, projection: Optional[ProjectedIndex] = None, top_k: int = DEFAULT_TOP_K) -> list[Correspondence2D3D]:
    """Head of the exact projected-space ranking per keypoint; the score is the distance."""
    projection = projection or ProjectedIndex.build(DescriptorIndex.from_map(sfm), sfm.descriptor_bits)
    return head_correspondences(rank_projected_baseline(frame, projection, sfm.descriptor_bits, top_k), "projected")
