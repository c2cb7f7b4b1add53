"""
Context Regions
===============
Randomized keypoint-anchored rectangles and the feature vectors built from
them: one L1-normalized bag-of-words block per region, followed by the
keypoint's own descriptor bits.

Regions are expressed in normalized image-plane units per unit keypoint
scale and are rotated so that their y axis follows projected gravity, which
makes membership invariant to image scale, in-plane rotation and
translation.
"""

import logging
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from app.core.config import DEGENERATE_GRAVITY_NORM
from app.core.errors import DegenerateGravityWarning, InvalidBoundsError, ModelFormatError
from app.models.configs import FeatureMode, RegionConfig
from app.models.records import RegionBankRecord
from app.services.map_model import CameraIntrinsics, Frame, Keypoint, SfMMap, normalize_keypoint, normalize_pixels
from app.services.vocabulary import Vocabulary

logger = logging.getLogger(__name__)


# ============================================================
# TYPES
# ============================================================

@dataclass(frozen=True)
class ContextRegion:
    offset_x: float
    offset_y: float
    half_width: float
    half_height: float

    @property
    def area(self) -> float:
        return 4.0 * self.half_width * self.half_height


@dataclass(frozen=True, eq=False)
class RegionBank:
    """Fixed set of regions shared by training and querying."""
    regions: np.ndarray
    seed: int
    area_min: float
    area_max: float
    aspect_min: float
    aspect_max: float
    offset_radius: float

    def __post_init__(self):
        object.__setattr__(self, "regions", np.asarray(self.regions, dtype=np.float64).reshape(-1, 4))

    def __len__(self) -> int:
        return self.regions.shape[0]

    def __eq__(self, other) -> bool:
        if not isinstance(other, RegionBank):
            return NotImplemented
        return self.to_record() == other.to_record()

    __hash__ = None

    def region(self, j: int) -> ContextRegion:
        return ContextRegion(*(float(x) for x in self.regions[j]))

    def to_record(self) -> RegionBankRecord:
        return RegionBankRecord(
            seed=self.seed, area_min=self.area_min, area_max=self.area_max,
            aspect_min=self.aspect_min, aspect_max=self.aspect_max,
            offset_radius=self.offset_radius,
            regions=[tuple(float(x) for x in row) for row in self.regions],
        )

    @classmethod
    def from_record(cls, record: RegionBankRecord) -> "RegionBank":
        return cls(
            regions=np.array(record.regions, dtype=np.float64).reshape(-1, 4),
            seed=record.seed, area_min=record.area_min, area_max=record.area_max,
            aspect_min=record.aspect_min, aspect_max=record.aspect_max,
            offset_radius=record.offset_radius,
        )


@dataclass(frozen=True)
class OrientedRect:
    """A region placed around one keypoint in the normalized image plane."""
    center_x: float
    center_y: float
    half_width: float
    half_height: float
    angle: float

    @property
    def area(self) -> float:
        return 4.0 * self.half_width * self.half_height


@dataclass(frozen=True)
class FeatureLayout:
    n_regions: int
    k: int
    descriptor_bits: int
    mode: FeatureMode = "full"

    @property
    def context_dims(self) -> int:
        return 0 if self.mode == "descriptor" else self.n_regions * self.k

    @property
    def descriptor_dims(self) -> int:
        return 0 if self.mode == "context" else self.descriptor_bits

    @property
    def dims(self) -> int:
        return self.context_dims + self.descriptor_dims

    def kind_of(self, feature: int) -> str:
        return "context" if feature < self.context_dims else "descriptor"


# ============================================================
# REGION GENERATION
# ============================================================

def sample_region_area(u):
    """Inverse CDF of the 1/area law on log-area samples: ``area = exp(u)``."""
    return np.exp(u)


def _check_bounds(n: int, cfg: RegionConfig) -> None:
    values = (cfg.area_min, cfg.area_max, cfg.aspect_min, cfg.aspect_max, cfg.offset_radius)
    if n < 1:
        raise InvalidBoundsError(f"region count must be at least 1, got {n}")
    if not all(math.isfinite(v) for v in values):
        raise InvalidBoundsError("region bounds must be finite")
    if not 0 < cfg.area_min < cfg.area_max:
        raise InvalidBoundsError(f"need 0 < area_min < area_max, got [{cfg.area_min}, {cfg.area_max}]")
    if not 0 < cfg.aspect_min <= cfg.aspect_max:
        raise InvalidBoundsError(f"need 0 < aspect_min <= aspect_max, got [{cfg.aspect_min}, {cfg.aspect_max}]")
    if cfg.offset_radius < 0:
        raise InvalidBoundsError("offset_radius must be non-negative")


def generate_regions(n: int, config: RegionConfig, seed: int | None = None) -> RegionBank:
    """
    Draw a bank of random regions.

    Areas follow the 1/area law between the configured bounds, aspect ratios
    are log-uniform and centre offsets are uniform in a disc.

    Args:
        n: Region count
        config: Area, aspect and offset bounds
        seed: Overrides ``config.seed`` when given

    Returns:
        RegionBank of n regions
    """
    _check_bounds(n, config)
    seed = config.seed if seed is None else seed
    rng = np.random.default_rng(seed)

    u = rng.uniform(math.log(config.area_min), math.log(config.area_max), size=n)
    area = np.clip(sample_region_area(u), config.area_min, config.area_max)
    aspect = np.exp(rng.uniform(math.log(config.aspect_min), math.log(config.aspect_max), size=n))
    radius = config.offset_radius * np.sqrt(rng.uniform(0.0, 1.0, size=n))
    theta = rng.uniform(0.0, 2.0 * math.pi, size=n)

    regions = np.column_stack([
        radius * np.cos(theta),
        radius * np.sin(theta),
        0.5 * np.sqrt(area * aspect),
        0.5 * np.sqrt(area / aspect),
    ])
    return RegionBank(
        regions=regions, seed=seed,
        area_min=config.area_min, area_max=config.area_max,
        aspect_min=config.aspect_min, aspect_max=config.aspect_max,
        offset_radius=config.offset_radius,
    )


def save_region_bank(bank: RegionBank, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"{len(bank)} {bank.seed} {bank.area_min!r} {bank.area_max!r} "
                 f"{bank.aspect_min!r} {bank.aspect_max!r} {bank.offset_radius!r}\n")
        for row in bank.regions:
            fh.write(" ".join(repr(float(x)) for x in row) + "\n")


def load_region_bank(path: str | Path) -> RegionBank:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [line.split() for line in fh if line.strip()]
    try:
        head = lines[0]
        n, seed = int(head[0]), int(head[1])
        bounds = [float(x) for x in head[2:7]]
        regions = np.array([[float(x) for x in row] for row in lines[1:]], dtype=np.float64).reshape(-1, 4)
    except (IndexError, ValueError) as e:
        raise ModelFormatError(f"{path}: malformed region bank") from e
    if regions.shape[0] != n:
        raise ModelFormatError(f"{path}: header declares {n} regions, found {regions.shape[0]}")
    return RegionBank(regions, seed, *bounds)


# ============================================================
# INSTANTIATION
# ============================================================

def gravity_angle(gravity_in_camera) -> float:
    """
    In-plane angle of projected gravity, 0 for an upright camera.

    Falls back to 0 with a DegenerateGravityWarning when gravity is (nearly)
    parallel to the optical axis.
    """
    gx, gy = float(gravity_in_camera[0]), float(gravity_in_camera[1])
    if math.hypot(gx, gy) < DEGENERATE_GRAVITY_NORM:
        warnings.warn("gravity is parallel to the optical axis; using zero rotation",
                      DegenerateGravityWarning, stacklevel=2)
        return 0.0
    return math.atan2(-gx, gy)


def _centers(px, py, s, cos_phi, sin_phi, ox, oy):
    return px + s * (cos_phi * ox - sin_phi * oy), py + s * (sin_phi * ox + cos_phi * oy)


def _inside(cx, cy, hw, hh, cos_phi, sin_phi, qx, qy):
    dx = qx - cx
    dy = qy - cy
    lx = cos_phi * dx + sin_phi * dy
    ly = cos_phi * dy - sin_phi * dx
    return (np.abs(lx) <= hw) & (np.abs(ly) <= hh)


def instantiate_region(
    region: ContextRegion,
    kp: Keypoint,
    cam: CameraIntrinsics,
    gravity_in_camera,
    reference_scale: float = 1.0,
) -> OrientedRect:
    """
    Place a region around a keypoint.

    Centre is the normalized keypoint plus ``s·R(φ)·offset``, half-extents are
    scaled by ``s = kp.scale / reference_scale`` and the axes are rotated by
    the gravity angle φ.
    """
    phi = gravity_angle(gravity_in_camera)
    s = kp.scale / reference_scale
    x, y = normalize_keypoint(kp, cam)
    cx, cy = _centers(x, y, s, math.cos(phi), math.sin(phi), region.offset_x, region.offset_y)
    return OrientedRect(float(cx), float(cy), s * region.half_width, s * region.half_height, phi)


def frame_words(frame: Frame, vocab: Vocabulary, n_bits: int) -> np.ndarray:
    return vocab.quantize_many(frame.descriptor_matrix(n_bits))


def describe_region(
    rect: OrientedRect,
    frame: Frame,
    vocab: Vocabulary,
    exclude: int | None,
    cam: CameraIntrinsics,
    n_bits: int | None = None,
) -> np.ndarray:
    """
    Bag-of-words histogram of the frame keypoints inside a placed region.

    Args:
        rect: Region from instantiate_region
        frame: Frame holding the keypoints
        vocab: Quantizer
        exclude: Keypoint index left out (the anchor)
        cam: Camera of the frame

    Returns:
        Length-k vector, L1-normalized, all zero when the region is empty
    """
    hist = np.zeros(vocab.k, dtype=np.float64)
    if not frame.keypoints:
        return hist
    points = normalize_pixels(frame.pixels, cam)
    inside = _inside(rect.center_x, rect.center_y, rect.half_width, rect.half_height,
                     math.cos(rect.angle), math.sin(rect.angle), points[:, 0], points[:, 1])
    if exclude is not None:
        inside[exclude] = False
    if not inside.any():
        return hist
    words = frame_words(frame, vocab, n_bits or vocab.bits)
    np.add.at(hist, words[inside], 1.0)
    return hist / hist.sum()


# ============================================================
# FEATURE VECTORS
# ============================================================

def reference_scale(sfm: SfMMap) -> float:
    """Median keypoint scale of the map, 1.0 for a map without keypoints."""
    scales = [kp.scale for f in sfm.frames for kp in f.keypoints]
    return float(np.median(scales)) if scales else 1.0


def frame_features(
    frame: Frame,
    cam: CameraIntrinsics,
    bank: RegionBank,
    vocab: Vocabulary,
    ref_scale: float,
    n_bits: int,
    mode: FeatureMode = "full",
    indices=None,
) -> np.ndarray:
    """
    Feature vectors of several keypoints of one frame.

    Args:
        frame: Source frame
        cam: Its camera
        bank: Region bank
        vocab: Quantizer for the region histograms
        ref_scale: Scale mapped to s = 1
        n_bits: Descriptor bit count
        mode: Which blocks to emit
        indices: Keypoint indices, all keypoints when omitted

    Returns:
        ``(len(indices), D)`` float32 matrix
    """
    layout = FeatureLayout(len(bank), vocab.k, n_bits, mode)
    indices = np.arange(len(frame.keypoints)) if indices is None else np.asarray(indices, dtype=np.int64)
    out = np.zeros((indices.size, layout.dims), dtype=np.float32)
    if indices.size == 0:
        return out

    descriptors = frame.descriptor_matrix(n_bits)
    if layout.descriptor_dims:
        out[:, layout.context_dims:] = descriptors[indices]
    if not layout.context_dims:
        return out

    phi = gravity_angle(frame.gravity)
    cos_phi, sin_phi = math.cos(phi), math.sin(phi)
    points = normalize_pixels(frame.pixels, cam)
    qx, qy = points[:, 0], points[:, 1]
    onehot = np.zeros((len(frame.keypoints), vocab.k), dtype=np.float64)
    onehot[np.arange(len(frame.keypoints)), frame_words(frame, vocab, n_bits)] = 1.0
    ox, oy, hw, hh = (bank.regions[:, j] for j in range(4))

    for row, i in enumerate(indices):
        s = frame.keypoints[i].scale / ref_scale
        cx, cy = _centers(qx[i], qy[i], s, cos_phi, sin_phi, ox, oy)
        inside = _inside(cx[:, None], cy[:, None], (s * hw)[:, None], (s * hh)[:, None],
                         cos_phi, sin_phi, qx[None, :], qy[None, :])
        inside[:, i] = False
        counts = inside.astype(np.float64) @ onehot
        totals = counts.sum(axis=1, keepdims=True)
        blocks = np.divide(counts, totals, out=np.zeros_like(counts), where=totals > 0)
        out[row, :layout.context_dims] = blocks.reshape(-1)
    return out


def build_feature_vector(
    index: int,
    frame: Frame,
    bank: RegionBank,
    vocab: Vocabulary,
    cam: CameraIntrinsics,
    ref_scale: float = 1.0,
    n_bits: int | None = None,
    mode: FeatureMode = "full",
) -> np.ndarray:
    """Feature vector of keypoint ``index``: region blocks in bank order, then descriptor bits."""
    return frame_features(frame, cam, bank, vocab, ref_scale, n_bits or vocab.bits, mode, [index])[0]
