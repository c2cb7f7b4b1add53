"""
Metrics Service
===============
Retrieval and pose metrics over per-query records: precision@1, mean
reciprocal rank, miss rate against false positives per query, the pose
precision-recall curve with its AUC, and the runtime/inlier table.

Ranked lists hold landmark ids; the background class is written as -1.
Untracked queries (true landmark -1) stay out of the precision@1 and MRR
denominators and are reported on their own.
"""

import logging
from collections import defaultdict
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.integrate import trapezoid

from app.core.config import POSE_THRESHOLD_DEG, POSE_THRESHOLD_M
from app.core.errors import InvalidConfigError, UndefinedMetricError
from app.services.map_model import Pose
from app.services.pose import pose_error

logger = logging.getLogger(__name__)

BACKGROUND = -1


# ============================================================
# RECORDS
# ============================================================

@dataclass(frozen=True)
class RetrievalRecord:
    frame_id: int
    keypoint_index: int
    true_landmark: int
    ranked: tuple[int, ...]
    matcher: str = ""
    match_ms: float = 0.0

    @property
    def tracked(self) -> bool:
        return self.true_landmark != BACKGROUND

    @property
    def rank(self) -> Optional[int]:
        """1-based rank of the true landmark, None when absent."""
        try:
            return self.ranked.index(self.true_landmark) + 1
        except ValueError:
            return None


@dataclass(frozen=True, eq=False)
class PoseRecord:
    frame_id: int
    estimate: Optional[Pose]
    truth: Pose
    inliers: int = 0
    correspondences: int = 0
    inlier_ratio: float = 0.0
    matcher: str = ""
    match_ms: float = 0.0
    ransac_ms: float = 0.0

    @property
    def confidence(self) -> int:
        return self.inliers

    def errors(self) -> Optional[tuple[float, float]]:
        """(translation m, rotation deg) against ground truth; None without an estimate."""
        if self.estimate is None:
            return None
        return pose_error(self.estimate, self.truth)

    def is_correct(self, max_m: float = POSE_THRESHOLD_M, max_deg: float = POSE_THRESHOLD_DEG) -> bool:
        err = self.errors()
        return err is not None and err[0] <= max_m and err[1] <= max_deg


@dataclass(frozen=True)
class MissRatePoint:
    budget: int
    fppq: float
    miss_rate: float


@dataclass(frozen=True)
class PRPoint:
    threshold: float
    precision: float
    recall: float


@dataclass(frozen=True)
class PRCurve:
    points: tuple[PRPoint, ...]
    auc: float


@dataclass(frozen=True)
class RuntimeRow:
    matcher: str
    frames: int
    mean_match_ms: float
    mean_ransac_ms: float
    mean_inlier_ratio: float
    success_rate: float


# ============================================================
# RETRIEVAL
# ============================================================

def _tracked(records: list[RetrievalRecord]) -> list[RetrievalRecord]:
    tracked = [r for r in records if r.tracked]
    if not tracked:
        raise UndefinedMetricError("no tracked queries to score")
    return tracked


def precision_at_1(records: list[RetrievalRecord]) -> float:
    """
    Fraction of tracked queries whose first candidate is the true landmark.

    A background head counts as a miss.

    Raises:
        UndefinedMetricError: no tracked query in ``records``
    """
    tracked = _tracked(records)
    hits = sum(1 for r in tracked if r.ranked and r.ranked[0] == r.true_landmark)
    return hits / len(tracked)


def mean_reciprocal_rank(records: list[RetrievalRecord]) -> float:
    """Mean of 1/rank of the true landmark over tracked queries; 0 when it is not listed."""
    tracked = _tracked(records)
    return sum(1.0 / r.rank for r in tracked if r.rank is not None) / len(tracked)


def miss_rate_curve(records: list[RetrievalRecord], budgets: list[int]) -> list[MissRatePoint]:
    """
    Miss rate and false positives per query at each candidate budget.

    At budget k a query misses when its true landmark is not within the
    first k candidates. Its false positives are the candidates ranked above
    the true one, or every candidate it returned within the budget on a miss.

    Args:
        records: Retrieval records; untracked ones are ignored
        budgets: Candidate budgets, positive and strictly increasing

    Returns:
        One point per budget; empty when no tracked query exists

    Raises:
        InvalidConfigError: a budget is not positive or the budgets are not strictly increasing
    """
    if any(k <= 0 for k in budgets) or any(b <= a for a, b in zip(budgets, budgets[1:])):
        raise InvalidConfigError(f"budgets must be positive and strictly increasing, got {list(budgets)}")
    tracked = [r for r in records if r.tracked]
    if not tracked:
        return []
    ranks = np.array([r.rank or 0 for r in tracked], dtype=np.int64)
    lengths = np.array([len(r.ranked) for r in tracked], dtype=np.int64)
    curve = []
    for k in budgets:
        hit = (ranks > 0) & (ranks <= k)
        fp = np.where(hit, ranks - 1, np.minimum(k, lengths))
        curve.append(MissRatePoint(int(k), float(fp.mean()), float(1.0 - hit.mean())))
    return curve


def untracked_rejection_rate(records: list[RetrievalRecord]) -> Optional[float]:
    """Share of untracked queries whose head is the background; None when there are none."""
    untracked = [r for r in records if not r.tracked]
    if not untracked:
        return None
    rejected = sum(1 for r in untracked if not r.ranked or r.ranked[0] == BACKGROUND)
    return rejected / len(untracked)


# ============================================================
# POSE
# ============================================================

def pose_pr_auc(
    records: list[PoseRecord],
    max_m: float = POSE_THRESHOLD_M,
    max_deg: float = POSE_THRESHOLD_DEG,
) -> PRCurve:
    """
    Precision-recall of returned poses, sweeping the inlier-count confidence.

    The curve starts at recall 0 with precision 1. Each distinct confidence
    of a returned pose, from high to low, adds one point where precision is
    correct/returned and recall is correct/total frames. The AUC integrates
    precision over recall with the trapezoid rule.

    Args:
        records: One record per query frame, with or without an estimate
        max_m: Translation threshold in metres
        max_deg: Rotation threshold in degrees

    Returns:
        PRCurve with points in sweep order
    """
    points = [PRPoint(float("inf"), 1.0, 0.0)]
    total = len(records)
    returned = [r for r in records if r.estimate is not None]
    if total == 0 or not returned:
        return PRCurve(tuple(points), 0.0)

    conf = np.array([r.confidence for r in returned], dtype=np.float64)
    correct = np.array([r.is_correct(max_m, max_deg) for r in returned], dtype=bool)
    for tau in np.unique(conf)[::-1]:
        mask = conf >= tau
        n_correct = int(correct[mask].sum())
        points.append(PRPoint(float(tau), n_correct / int(mask.sum()), n_correct / total))

    auc = float(trapezoid([p.precision for p in points], [p.recall for p in points]))
    return PRCurve(tuple(points), auc)


def pose_success_rate(records: list[PoseRecord], max_m: float = POSE_THRESHOLD_M,
                      max_deg: float = POSE_THRESHOLD_DEG) -> float:
    if not records:
        raise UndefinedMetricError("no pose records")
    return sum(r.is_correct(max_m, max_deg) for r in records) / len(records)


def runtime_inlier_report(records_by_matcher: dict[str, list[PoseRecord]]) -> tuple[list[RuntimeRow], list[dict]]:
    """
    Per-matcher runtime and inlier means plus the per-frame scatter.

    Returns:
        (rows in matcher order, scatter rows sorted by matcher then frame id)
    """
    rows, scatter = [], []
    for matcher, records in records_by_matcher.items():
        if not records:
            logger.warning("No pose records for matcher %s; left out of the runtime table", matcher)
            continue
        ordered = sorted(records, key=lambda r: r.frame_id)
        rows.append(RuntimeRow(
            matcher=matcher,
            frames=len(ordered),
            mean_match_ms=float(np.mean([r.match_ms for r in ordered])),
            mean_ransac_ms=float(np.mean([r.ransac_ms for r in ordered])),
            mean_inlier_ratio=float(np.mean([r.inlier_ratio for r in ordered])),
            success_rate=sum(r.estimate is not None for r in ordered) / len(ordered),
        ))
        scatter.extend(
            {
                "matcher": matcher,
                "frame_id": r.frame_id,
                "match_ms": r.match_ms,
                "ransac_ms": r.ransac_ms,
                "inlier_ratio": r.inlier_ratio,
                "inliers": r.inliers,
                "correspondences": r.correspondences,
            }
            for r in ordered
        )
    return rows, scatter


# ============================================================
# SUMMARY
# ============================================================

def retrieval_summary(records: list[RetrievalRecord], budgets: list[int]) -> dict:
    """All retrieval numbers of one matcher, None where a metric is undefined."""
    try:
        p1, mrr = precision_at_1(records), mean_reciprocal_rank(records)
    except UndefinedMetricError:
        p1 = mrr = None
    return {
        "queries": len(records),
        "tracked": sum(1 for r in records if r.tracked),
        "precision_at_1": p1,
        "mrr": mrr,
        "untracked_rejection": untracked_rejection_rate(records),
        "miss_rate": miss_rate_curve(records, budgets),
    }


def _fmt(value: Optional[float]) -> str:
    return "n/a" if value is None else f"{value:.4f}"


def generate_summary(
    name: str,
    retrieval: dict[str, dict],
    pose: dict[str, PRCurve],
    runtime: list[RuntimeRow],
    extra: Optional[dict[str, str]] = None,
) -> str:
    """
    Human-readable experiment summary.

    Args:
        name: Experiment name
        retrieval: ``retrieval_summary`` output per matcher
        pose: PR curve per matcher
        runtime: Runtime table rows
        extra: Additional ``key: value`` lines, printed last in sorted order

    Returns:
        Summary text ending with a newline
    """
    lines = [f"EXPERIMENT SUMMARY - {name}", "=" * 40, "", "RETRIEVAL:"]
    for matcher, stats in retrieval.items():
        lines.append(
            f"  {matcher}: precision@1={_fmt(stats['precision_at_1'])} mrr={_fmt(stats['mrr'])} "
            f"untracked_rejected={_fmt(stats['untracked_rejection'])} "
            f"queries={stats['queries']} tracked={stats['tracked']}"
        )

    lines += ["", "POSE:"]
    for matcher, curve in pose.items():
        lines.append(f"  {matcher}: auc={curve.auc:.4f} points={len(curve.points)}")

    lines += ["", "RUNTIME:"]
    for row in runtime:
        lines.append(
            f"  {row.matcher}: match_ms={row.mean_match_ms:.3f} ransac_ms={row.mean_ransac_ms:.3f} "
            f"inlier_ratio={row.mean_inlier_ratio:.4f} localized={row.success_rate:.4f}"
        )

    if extra:
        lines += ["", "NOTES:"]
        lines += [f"  {key}: {value}" for key, value in sorted(extra.items())]

    best = _best_matcher(retrieval)
    if best is not None:
        lines += ["", f"Best precision@1: {best}"]
    return "\n".join(lines) + "\n"


def _best_matcher(retrieval: dict[str, dict]) -> Optional[str]:
    scored = defaultdict(list)
    for matcher, stats in retrieval.items():
        if stats["precision_at_1"] is not None:
            scored[stats["precision_at_1"]].append(matcher)
    if not scored:
        return None
    return ", ".join(scored[max(scored)])
