from typing import Literal, Optional

from pydantic import BaseModel, Field, model_validator

from app.core.config import (
    DEFAULT_ACCEPT_MARGIN,
    DEFAULT_AREA_MAX,
    DEFAULT_AREA_MIN,
    DEFAULT_ASPECT_MAX,
    DEFAULT_ASPECT_MIN,
    DEFAULT_BACKGROUND_CAP,
    DEFAULT_CANDIDATE_FEATURES,
    DEFAULT_DESCRIPTOR_BITS,
    DEFAULT_EXCLUSION_RADIUS,
    DEFAULT_EXHAUSTIVE_MAX_CLASSES,
    DEFAULT_HOLDOUT_FRACTION,
    DEFAULT_INLIER_THRESHOLD_PX,
    DEFAULT_LANDMARK_BUDGET,
    DEFAULT_MIN_INLIERS,
    DEFAULT_MINING_GROWTH,
    DEFAULT_MINING_PERIOD,
    DEFAULT_NEGATIVE_CAP,
    DEFAULT_NEGATIVE_RATIO,
    DEFAULT_OFFSET_RADIUS,
    DEFAULT_RANSAC_CONFIDENCE,
    DEFAULT_RANSAC_ITERS,
    DEFAULT_REFINE_EVALS,
    DEFAULT_REGION_COUNT,
    DEFAULT_ROUNDS,
    DEFAULT_THRESHOLD_CAP,
    DEFAULT_TOP_K,
    DEFAULT_VOCAB_ITERS,
    DEFAULT_VOCAB_SIZE,
    MATCHERS,
    MISS_RATE_BUDGETS,
    WORKERS,
    POSE_THRESHOLD_DEG,
    POSE_THRESHOLD_M,
)

FeatureMode = Literal["full", "context", "descriptor"]
SharingSearch = Literal["prefix", "greedy"]
MatcherName = Literal["boost", "boost-inv", "hamming", "projected"]


# ============================================================
# WORLD
# ============================================================

class WorldConfig(BaseModel):
    """Synthetic corridor world with repeated rooms"""
    landmark_count: int = Field(600, ge=0, description="Total landmarks, rounded down to a multiple of room_count")
    room_count: int = Field(4, ge=1, description="Rooms along the corridor")
    room_length: float = Field(6.0, gt=0, description="Room extent along the corridor (m); the room spacing")
    room_width: float = Field(4.0, gt=0, description="Distance between side walls (m)")
    room_height: float = Field(3.0, gt=0, description="Wall height (m)")
    corridor_gap: float = Field(1.0, ge=0, description="Gap between consecutive rooms (m)")
    aliasing_factor: int = Field(2, ge=1, description="Rooms sharing one aliased template")
    aliased_fraction: float = Field(0.6, ge=0, le=1, description="Fraction of a room's landmarks copied from its template")

    train_frames: int = Field(120, ge=0)
    eval_frames: int = Field(60, ge=0)
    camera_height: float = Field(1.5, gt=0)
    yaw_amplitude_deg: float = Field(35.0, ge=0)
    yaw_cycles: float = Field(3.0, ge=0, description="Yaw oscillations along the walk")
    roll_sigma_deg: float = Field(5.0, ge=0)
    eval_lateral_offset: float = Field(0.4, description="Sideways shift of the eval walk (m)")
    eval_yaw_phase_deg: float = Field(40.0)
    max_range: float = Field(12.0, gt=0)

    fx: float = Field(400.0, gt=0)
    fy: float = Field(400.0, gt=0)
    width: int = Field(640, gt=0)
    height: int = Field(480, gt=0)
    base_scale: float = Field(8.0, gt=0, description="Keypoint scale (px) at 3 m depth")

    descriptor_bits: int = Field(DEFAULT_DESCRIPTOR_BITS, gt=0, multiple_of=8)
    descriptor_prototypes: int = Field(32, ge=1, description="Prototype count of the descriptor family")
    prototype_spread: float = Field(0.15, ge=0, le=1, description="Bit-flip probability around a prototype")
    descriptor_family_seed: int = Field(7, description="Seed of the descriptor family, shared with descriptor pools")

    bit_flip_prob: float = Field(0.05, ge=0, le=1)
    pixel_jitter: float = Field(0.5, ge=0, description="Gaussian pixel noise sigma, clipped at 3 sigma")
    dropout_prob: float = Field(0.1, ge=0, le=1)
    clutter_per_frame: int = Field(20, ge=0, description="Untracked keypoints per frame")
    seed: int = 0


# ============================================================
# CONTEXT / VOCABULARY
# ============================================================

class RegionConfig(BaseModel):
    """Bounds of the randomized context regions"""
    count: int = Field(DEFAULT_REGION_COUNT, ge=1)
    area_min: float = Field(DEFAULT_AREA_MIN, description="Smallest region area, normalized plane units")
    area_max: float = Field(DEFAULT_AREA_MAX)
    aspect_min: float = Field(DEFAULT_ASPECT_MIN)
    aspect_max: float = Field(DEFAULT_ASPECT_MAX)
    offset_radius: float = Field(DEFAULT_OFFSET_RADIUS)
    seed: int = 0


class VocabularyConfig(BaseModel):
    """k-medians vocabulary over binary descriptors"""
    k: int = Field(DEFAULT_VOCAB_SIZE, ge=1)
    max_iters: int = Field(DEFAULT_VOCAB_ITERS, ge=1)
    pool_size: int = Field(20000, ge=1, description="Descriptors drawn from the unrelated pool")
    seed: int = 1


# ============================================================
# BOOSTING
# ============================================================

class TrainingConfig(BaseModel):
    """Shared-stump boosting"""
    rounds: int = Field(DEFAULT_ROUNDS, ge=0, description="Weak learners M")
    candidate_features: int = Field(DEFAULT_CANDIDATE_FEATURES, ge=1, description="|F_m| per round")
    threshold_cap: int = Field(DEFAULT_THRESHOLD_CAP, ge=1)
    landmark_budget: int = Field(DEFAULT_LANDMARK_BUDGET, ge=1)
    background_cap: int = Field(DEFAULT_BACKGROUND_CAP, ge=0)
    negative_ratio: int = Field(DEFAULT_NEGATIVE_RATIO, ge=0)
    negative_cap: int = Field(DEFAULT_NEGATIVE_CAP, ge=0)
    exclusion_radius: float = Field(DEFAULT_EXCLUSION_RADIUS, ge=0)
    mining_period: int = Field(DEFAULT_MINING_PERIOD, ge=0, description="0 disables hard-negative mining")
    mining_growth: float = Field(DEFAULT_MINING_GROWTH, ge=0, le=1)
    holdout_fraction: float = Field(DEFAULT_HOLDOUT_FRACTION, ge=0, lt=1)
    feature_mode: FeatureMode = "full"
    sharing_search: SharingSearch = "prefix"
    exhaustive_max_classes: int = Field(DEFAULT_EXHAUSTIVE_MAX_CLASSES, ge=0)
    workers: int = Field(WORKERS, ge=1, description="Threads scoring candidate features")
    seed: int = 0


# ============================================================
# MATCHING / POSE
# ============================================================

class MatchConfig(BaseModel):
    """Accept rule and retrieval depth"""
    top_k: int = Field(DEFAULT_TOP_K, ge=1)
    margin: float = Field(DEFAULT_ACCEPT_MARGIN, description="Head score must exceed background and this margin")
    projection_seed: int = 0


class RansacConfig(BaseModel):
    """P3P inside RANSAC"""
    max_iters: int = Field(DEFAULT_RANSAC_ITERS, ge=1)
    inlier_threshold_px: float = Field(DEFAULT_INLIER_THRESHOLD_PX, gt=0)
    min_inliers: int = Field(DEFAULT_MIN_INLIERS, ge=3)
    confidence: float = Field(DEFAULT_RANSAC_CONFIDENCE, gt=0, lt=1)
    refine: bool = True
    refine_max_evals: int = Field(DEFAULT_REFINE_EVALS, ge=1)
    seed: int = 0


# ============================================================
# EXPERIMENT
# ============================================================

class ExperimentSpec(BaseModel):
    """Declarative experiment: synth -> vocab -> train -> match -> localize -> metrics"""
    name: str = "experiment"
    output_dir: str = Field(..., description="Report directory")
    world: Optional[WorldConfig] = Field(None, description="Synthesize a world with this config")
    map_path: Optional[str] = Field(None, description="Use an existing training map instead of synthesizing")
    eval_map_path: Optional[str] = Field(None, description="Query frames with ground-truth landmark ids")
    vocabulary: VocabularyConfig = VocabularyConfig()
    regions: RegionConfig = RegionConfig(count=200)
    training: TrainingConfig = TrainingConfig(rounds=200, candidate_features=200, landmark_budget=2000)
    model_path: Optional[str] = Field(None, description="Reuse a trained model instead of training")
    matchers: list[MatcherName] = Field(default_factory=lambda: list(MATCHERS))
    match: MatchConfig = MatchConfig()
    ransac: RansacConfig = RansacConfig()
    budgets: list[int] = Field(default_factory=lambda: list(MISS_RATE_BUDGETS))
    pose_threshold_m: float = POSE_THRESHOLD_M
    pose_threshold_deg: float = POSE_THRESHOLD_DEG
    vocab_sweep: list[int] = Field(default_factory=list, description="Context-only retraining per vocabulary size")
    replay_frames: int = Field(0, ge=0, description="Training frames localized as a replay check")
    freeze_timings: bool = Field(False, description="Write wall-clock columns as 0 for byte-identical reports")
    export_excel: bool = False

    @model_validator(mode="after")
    def check_sources(self):
        if self.world is None and (self.map_path is None or self.eval_map_path is None):
            raise ValueError("either 'world' or both 'map_path' and 'eval_map_path' are required")
        if any(b <= 0 for b in self.budgets) or sorted(set(self.budgets)) != self.budgets:
            raise ValueError("budgets must be positive and strictly increasing")
        return self
