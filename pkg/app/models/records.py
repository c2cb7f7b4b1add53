from typing import Annotated, Any, Literal, Optional, Union

from pydantic import BaseModel, Field, TypeAdapter

from app.core.config import DEFAULT_DESCRIPTOR_BITS
from app.models.configs import FeatureMode, TrainingConfig


# ============================================================
# MAP FILE (newline-delimited JSON)
# ============================================================

class MapHeaderRecord(BaseModel):
    kind: Literal["map"] = "map"
    descriptor_bits: int = Field(DEFAULT_DESCRIPTOR_BITS, gt=0, multiple_of=8)
    metadata: dict[str, Any] = Field(default_factory=dict)


class CameraRecord(BaseModel):
    kind: Literal["camera"] = "camera"
    camera_id: int
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int


class FrameRecord(BaseModel):
    kind: Literal["frame"] = "frame"
    frame_id: int
    camera_id: int
    rotation: list[list[float]] = Field(..., description="World-from-camera rotation, row major 3x3")
    translation: list[float] = Field(..., min_length=3, max_length=3, description="Camera centre in world (m)")
    gravity: list[float] = Field(..., min_length=3, max_length=3, description="Unit gravity in camera frame")


class KeypointRecord(BaseModel):
    kind: Literal["keypoint"] = "keypoint"
    frame_id: int
    index: int = Field(..., ge=0)
    u: float
    v: float
    scale: float
    descriptor: str = Field(..., description="Hex-encoded descriptor bits, most significant bit first")
    landmark_id: Optional[int] = None


class LandmarkRecord(BaseModel):
    kind: Literal["landmark"] = "landmark"
    landmark_id: int
    position: list[float] = Field(..., min_length=3, max_length=3)
    observations: list[tuple[int, int]] = Field(..., description="(frame_id, keypoint index) pairs")


MapRecord = Annotated[
    Union[MapHeaderRecord, CameraRecord, FrameRecord, KeypointRecord, LandmarkRecord],
    Field(discriminator="kind"),
]
map_record_adapter = TypeAdapter(MapRecord)


# ============================================================
# MODEL FILE (JSON)
# ============================================================

class RegionBankRecord(BaseModel):
    seed: int
    area_min: float
    area_max: float
    aspect_min: float
    aspect_max: float
    offset_radius: float
    regions: list[tuple[float, float, float, float]] = Field(
        ..., description="(offset_x, offset_y, half_width, half_height) per region"
    )


class VocabularyRecord(BaseModel):
    k: int
    bits: int
    seed: int
    centroids: list[str]


class ClassTableRecord(BaseModel):
    landmark_ids: list[int] = Field(..., description="Landmark id of class i+1; class 0 is background")
    positions: list[tuple[float, float, float]]


class StumpRecord(BaseModel):
    feature: int
    threshold: float
    a: float
    b: float
    sharing: list[int]
    k: list[float] = Field(..., description="Per-class constants, 0 for classes in the sharing set")


class ModelRecord(BaseModel):
    format: Literal["context-boost-model"] = "context-boost-model"
    version: int = 1
    feature_mode: FeatureMode
    descriptor_bits: int
    reference_scale: float
    class_table: ClassTableRecord
    regions: RegionBankRecord
    vocabulary: VocabularyRecord
    learners: list[StumpRecord]
    config: TrainingConfig
    seed: int
    map_fingerprint: str
