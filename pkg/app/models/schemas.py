from typing import Literal, Optional

from pydantic import BaseModel, Field

from app.core.config import MISS_RATE_BUDGETS, POSE_THRESHOLD_DEG, POSE_THRESHOLD_M
from app.models.configs import MatchConfig, RansacConfig


# ============================================================
# REQUEST MODELS
# ============================================================

class CameraIn(BaseModel):
    fx: float = Field(..., gt=0)
    fy: float = Field(..., gt=0)
    cx: float
    cy: float
    width: int = Field(..., gt=0)
    height: int = Field(..., gt=0)


class KeypointIn(BaseModel):
    u: float
    v: float
    scale: float = Field(..., gt=0)
    descriptor: str = Field(..., description="Hex-encoded binary descriptor")


class QueryFrame(BaseModel):
    """A query image: keypoints, intrinsics and gravity in camera coordinates"""
    frame_id: int = 0
    camera: CameraIn
    gravity: tuple[float, float, float] = Field((0.0, 1.0, 0.0), description="Unit gravity in camera coordinates")
    keypoints: list[KeypointIn] = Field(default_factory=list)

    model_config = {
        "json_schema_extra": {
            "examples": [
                {
                    "frame_id": 7,
                    "camera": {"fx": 400, "fy": 400, "cx": 320, "cy": 240, "width": 640, "height": 480},
                    "gravity": [0.0, 1.0, 0.0],
                    "keypoints": [{"u": 120.5, "v": 88.0, "scale": 6.0, "descriptor": "00ff" * 24}],
                }
            ]
        }
    }


class MatchRequest(BaseModel):
    """Rank and match the keypoints of one query frame"""
    frame: QueryFrame
    matcher: Literal["boost", "boost-inv"] = "boost"
    match: MatchConfig = MatchConfig()


class LocalizeRequest(MatchRequest):
    """Match, then estimate the camera pose"""
    ransac: RansacConfig = RansacConfig()


class PoseIn(BaseModel):
    rotation: list[list[float]] = Field(..., description="World-from-camera rotation, 3x3 row-major")
    translation: tuple[float, float, float]


class RetrievalRecordIn(BaseModel):
    frame_id: int = 0
    keypoint_index: int = 0
    true_landmark: int = Field(..., description="-1 for an untracked query")
    ranked: list[int] = Field(..., description="Candidate landmark ids, -1 for the background")


class RetrievalMetricsRequest(BaseModel):
    records: list[RetrievalRecordIn]
    budgets: list[int] = Field(default_factory=lambda: list(MISS_RATE_BUDGETS))


class PoseRecordIn(BaseModel):
    frame_id: int
    estimate: Optional[PoseIn] = None
    truth: PoseIn
    inliers: int = Field(0, ge=0, description="Confidence used by the PR sweep")


class PoseMetricsRequest(BaseModel):
    records: list[PoseRecordIn]
    threshold_m: float = Field(POSE_THRESHOLD_M, gt=0)
    threshold_deg: float = Field(POSE_THRESHOLD_DEG, gt=0)


class ExportRequest(BaseModel):
    """Report rows to download"""
    sheets: dict[str, list[dict]] = Field(..., description="Sheet (or file) name to rows")
    title: str = "Localization Report"


# ============================================================
# RESPONSE MODELS
# ============================================================

class CandidateOut(BaseModel):
    keypoint_index: int
    landmarks: list[int] = Field(..., description="Ranked landmark ids, -1 for the background")
    scores: list[float]
    background_score: float
    evaluated: int
    accepted: bool


class CorrespondenceOut(BaseModel):
    frame_id: int
    keypoint_index: int
    landmark_id: int
    score: float
    matcher: str


class MatchResponse(BaseModel):
    success: bool
    frame_id: int
    candidates: list[CandidateOut] = Field(default_factory=list)
    correspondences: list[CorrespondenceOut] = Field(default_factory=list)


class PoseOut(BaseModel):
    rotation: list[list[float]]
    translation: list[float]
    quaternion: list[float] = Field(..., description="(qw, qx, qy, qz)")


class LocalizeResponse(BaseModel):
    success: bool
    frame_id: int
    pose: Optional[PoseOut] = None
    inliers: list[int] = Field(default_factory=list)
    inlier_ratio: float = 0.0
    iterations: int = 0
    correspondences: list[CorrespondenceOut] = Field(default_factory=list)
    match_ms: float = 0.0
    ransac_ms: float = 0.0


class MissRatePointOut(BaseModel):
    budget: int
    fppq: float
    miss_rate: float


class RetrievalMetricsResponse(BaseModel):
    queries: int
    tracked: int
    precision_at_1: Optional[float] = None
    mrr: Optional[float] = None
    untracked_rejection: Optional[float] = None
    miss_rate: list[MissRatePointOut] = Field(default_factory=list)


class PRPointOut(BaseModel):
    threshold: float
    precision: float
    recall: float


class PoseMetricsResponse(BaseModel):
    frames: int
    auc: float
    points: list[PRPointOut]
