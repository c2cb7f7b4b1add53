"""
Localization API Router
=======================
Query-frame matching and localization against the served model, metrics
over posted records, and report downloads.
"""

import io
import math
import time
from functools import lru_cache
from typing import Optional

import numpy as np
from fastapi import APIRouter, Depends, HTTPException
from fastapi.responses import StreamingResponse

from app.core import config
from app.core.errors import LocalizerError
from app.models.schemas import (
    CandidateOut,
    CorrespondenceOut,
    ExportRequest,
    LocalizeRequest,
    LocalizeResponse,
    MatchRequest,
    MatchResponse,
    MissRatePointOut,
    PoseIn,
    PoseMetricsRequest,
    PoseMetricsResponse,
    PoseOut,
    PRPointOut,
    QueryFrame,
    RetrievalMetricsRequest,
    RetrievalMetricsResponse,
)
from app.services import metrics
from app.services.bits import bits_from_hex, pack_bits
from app.services.boosting import BoostedModel, load_model
from app.services.export import export_to_csv, export_to_excel
from app.services.map_model import CameraIntrinsics, Frame, Keypoint, Pose, SfMMap, load_map
from app.services.matching import accept, accepted_correspondences, rank_frame, ranked_landmarks
from app.services.pose import localize_correspondences, pose_quaternion
from app.services.vocabulary import InvertedFile, build_inverted_file

router = APIRouter(tags=["Localization"])


# ============================================================
# SERVED ARTIFACTS
# ============================================================

@lru_cache(maxsize=1)
def _load_model(path: str) -> BoostedModel:
    return load_model(path)


@lru_cache(maxsize=1)
def _load_inverted_file(map_path: str, model_path: str) -> InvertedFile:
    model = _load_model(model_path)
    sfm: SfMMap = load_map(map_path)
    return build_inverted_file(sfm, model.vocab, model.class_table)


def get_model() -> BoostedModel:
    """Served classifier, loaded once from LOCALIZER_MODEL_PATH."""
    if not config.MODEL_PATH:
        raise HTTPException(status_code=503, detail="No model configured (set LOCALIZER_MODEL_PATH)")
    try:
        return _load_model(config.MODEL_PATH)
    except FileNotFoundError:
        raise HTTPException(status_code=503, detail=f"Model file not found: {config.MODEL_PATH}")
    except LocalizerError as e:
        raise HTTPException(status_code=503, detail=f"Model cannot be loaded: {e}")


def get_inverted_file(model: BoostedModel = Depends(get_model)) -> Optional[InvertedFile]:
    """Inverted file over the served map; None when no map is configured."""
    if not config.MAP_PATH:
        return None
    try:
        return _load_inverted_file(config.MAP_PATH, config.MODEL_PATH)
    except FileNotFoundError as e:
        raise HTTPException(status_code=503, detail=f"Map or model file not found: {e.filename or e}")
    except LocalizerError as e:
        raise HTTPException(status_code=503, detail=f"Inverted file cannot be built: {e}")


def _error(e: Exception) -> HTTPException:
    if isinstance(e, HTTPException):
        return e
    if isinstance(e, (LocalizerError, ValueError)):
        return HTTPException(status_code=422, detail=str(e))
    return HTTPException(status_code=500, detail=str(e))


# ============================================================
# CONVERSIONS
# ============================================================

def _frame_from_query(query: QueryFrame, n_bits: int) -> tuple[Frame, CameraIntrinsics]:
    g = np.asarray(query.gravity, dtype=np.float64)
    norm = float(np.linalg.norm(g))
    if not math.isfinite(norm) or norm == 0.0:
        raise ValueError("gravity must be a non-zero vector")
    cam = CameraIntrinsics(query.camera.fx, query.camera.fy, query.camera.cx, query.camera.cy,
                           query.camera.width, query.camera.height)
    keypoints = tuple(
        Keypoint(kp.u, kp.v, kp.scale, pack_bits(bits_from_hex(kp.descriptor, n_bits)))
        for kp in query.keypoints
    )
    gravity = tuple(float(x) for x in g / norm)
    return Frame(query.frame_id, cam.camera_id, Pose.identity(), gravity, keypoints), cam


def _pose(p: PoseIn) -> Pose:
    pose = Pose(np.array(p.rotation, dtype=np.float64), np.array(p.translation, dtype=np.float64))
    if not pose.is_valid(1e-6):
        raise ValueError("rotation must be a proper 3x3 rotation matrix")
    return pose


def _correspondences(matches) -> list[CorrespondenceOut]:
    return [
        CorrespondenceOut(frame_id=m.frame_id, keypoint_index=m.keypoint_index,
                          landmark_id=m.landmark_id, score=m.score, matcher=m.matcher)
        for m in matches
    ]


def _rank(request: MatchRequest, model: BoostedModel, inv: Optional[InvertedFile]):
    if request.matcher == "boost-inv" and inv is None:
        raise HTTPException(status_code=503, detail="boost-inv needs a served map (set LOCALIZER_MAP_PATH)")
    frame, cam = _frame_from_query(request.frame, model.descriptor_bits)
    ranked = rank_frame(frame, model, cam, inv if request.matcher == "boost-inv" else None, request.match.top_k)
    return frame, cam, ranked


# ============================================================
# MATCHING / LOCALIZATION
# ============================================================

@router.post("/localization/match", response_model=MatchResponse)
def match_query(
    request: MatchRequest,
    model: BoostedModel = Depends(get_model),
    inv: Optional[InvertedFile] = Depends(get_inverted_file),
):
    """
    Rank landmark candidates for every query keypoint.

    Accepted heads (above the background and the margin) become 2D-3D
    correspondences.
    """
    try:
        frame, _, ranked = _rank(request, model, inv)
        candidates = [
            CandidateOut(
                keypoint_index=r.keypoint_index,
                landmarks=list(ranked_landmarks(r, model)),
                scores=list(r.scores),
                background_score=r.background_score,
                evaluated=r.evaluated,
                accepted=accept(r, request.match.margin),
            )
            for r in ranked
        ]
        matches = accepted_correspondences(ranked, model, request.match.margin, request.matcher)
        return MatchResponse(success=True, frame_id=frame.frame_id, candidates=candidates,
                             correspondences=_correspondences(matches))
    except Exception as e:
        raise _error(e)


@router.post("/localization/localize", response_model=LocalizeResponse)
def localize_query(
    request: LocalizeRequest,
    model: BoostedModel = Depends(get_model),
    inv: Optional[InvertedFile] = Depends(get_inverted_file),
):
    """
    Estimate the camera pose of a query frame.
    """
    try:
        start = time.perf_counter()
        frame, cam, ranked = _rank(request, model, inv)
        matches = accepted_correspondences(ranked, model, request.match.margin, request.matcher)
        match_ms = 1000.0 * (time.perf_counter() - start)
        table = model.class_table
        result = localize_correspondences(
            matches, frame, cam, lambda lm: table.position_of(table.class_of(lm)), request.ransac, match_ms,
        )
        pose = None
        if result.pose is not None:
            pose = PoseOut(
                rotation=result.pose.rotation.tolist(),
                translation=result.pose.translation.tolist(),
                quaternion=list(pose_quaternion(result.pose)),
            )
        return LocalizeResponse(
            success=result.success,
            frame_id=frame.frame_id,
            pose=pose,
            inliers=list(result.inliers),
            inlier_ratio=result.inlier_ratio,
            iterations=result.iterations,
            correspondences=_correspondences(result.matches),
            match_ms=result.match_ms,
            ransac_ms=result.ransac_ms,
        )
    except Exception as e:
        raise _error(e)


# ============================================================
# METRICS
# ============================================================

@router.post("/metrics/retrieval", response_model=RetrievalMetricsResponse)
def retrieval_metrics(request: RetrievalMetricsRequest):
    """
    Precision@1, MRR, untracked rejection and the miss-rate curve.
    """
    try:
        records = [
            metrics.RetrievalRecord(r.frame_id, r.keypoint_index, r.true_landmark, tuple(r.ranked))
            for r in request.records
        ]
        summary = metrics.retrieval_summary(records, request.budgets)
        return RetrievalMetricsResponse(
            queries=summary["queries"],
            tracked=summary["tracked"],
            precision_at_1=summary["precision_at_1"],
            mrr=summary["mrr"],
            untracked_rejection=summary["untracked_rejection"],
            miss_rate=[MissRatePointOut(budget=p.budget, fppq=p.fppq, miss_rate=p.miss_rate)
                       for p in summary["miss_rate"]],
        )
    except Exception as e:
        raise _error(e)


@router.post("/metrics/pose", response_model=PoseMetricsResponse)
def pose_metrics(request: PoseMetricsRequest):
    """
    Pose precision-recall curve and its AUC.
    """
    try:
        records = [
            metrics.PoseRecord(
                frame_id=r.frame_id,
                estimate=_pose(r.estimate) if r.estimate is not None else None,
                truth=_pose(r.truth),
                inliers=r.inliers,
            )
            for r in request.records
        ]
        curve = metrics.pose_pr_auc(records, request.threshold_m, request.threshold_deg)
        # inf is not valid JSON; the sweep's opening point gets the top confidence + 1
        top = max((p.threshold for p in curve.points[1:]), default=0.0)
        points = [
            PRPointOut(threshold=p.threshold if math.isfinite(p.threshold) else top + 1.0,
                       precision=p.precision, recall=p.recall)
            for p in curve.points
        ]
        return PoseMetricsResponse(frames=len(records), auc=curve.auc, points=points)
    except Exception as e:
        raise _error(e)


# ============================================================
# EXPORT
# ============================================================

@router.post("/export/csv")
def export_csv(request: ExportRequest):
    """
    Download the first sheet's rows as CSV.
    """
    try:
        name, rows = next(iter(request.sheets.items()), ("report", []))
        return StreamingResponse(
            io.StringIO(export_to_csv(rows)),
            media_type="text/csv",
            headers={"Content-Disposition": f"attachment; filename={name}.csv"},
        )
    except Exception as e:
        raise _error(e)


@router.post("/export/excel")
def export_excel(request: ExportRequest):
    """
    Download every sheet as one formatted Excel workbook.
    """
    try:
        excel_bytes = export_to_excel(request.sheets, title=request.title)
        return StreamingResponse(
            io.BytesIO(excel_bytes),
            media_type="application/vnd.openxmlformats-officedocument.spreadsheetml.sheet",
            headers={"Content-Disposition": f"attachment; filename={request.title.replace(' ', '_')}.xlsx"},
        )
    except Exception as e:
        raise _error(e)
