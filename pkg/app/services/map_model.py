"""
Map Model
=========
Cameras, frames, keypoints and landmarks of an SfM map, plus the
newline-delimited JSON persistence format (see docs/map_format.md).

Maps are immutable after construction and safe to share between workers.
"""

import hashlib
import json
import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any, Optional

import numpy as np
from pydantic import ValidationError

from app.core.config import DEFAULT_DESCRIPTOR_BITS, GRAVITY_NORM_TOLERANCE, ROTATION_TOLERANCE
from app.core.errors import (
    DanglingReferenceError,
    DescriptorLengthError,
    InvalidMapError,
    MapFormatError,
)
from app.models.records import (
    CameraRecord,
    FrameRecord,
    KeypointRecord,
    LandmarkRecord,
    MapHeaderRecord,
    map_record_adapter,
)
from app.services.bits import bits_from_hex, pack_bits, unpack_many

logger = logging.getLogger(__name__)


# ============================================================
# TYPES
# ============================================================

@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    camera_id: int = 0

    @property
    def mean_focal(self) -> float:
        return 0.5 * (self.fx + self.fy)


@dataclass(frozen=True)
class Keypoint:
    u: float
    v: float
    scale: float
    descriptor: bytes
    landmark_id: Optional[int] = None

    @property
    def tracked(self) -> bool:
        return self.landmark_id is not None


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid world-from-camera transform: ``x_world = R @ x_cam + t``."""
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))

    def __eq__(self, other) -> bool:
        if not isinstance(other, Pose):
            return NotImplemented
        return bool(
            np.array_equal(self.rotation, other.rotation)
            and np.array_equal(self.translation, other.translation)
        )

    __hash__ = None

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        """Map ``(n, 3)`` world points into the camera frame."""
        return (np.asarray(points, dtype=np.float64) - self.translation) @ self.rotation

    def is_valid(self, tol: float = ROTATION_TOLERANCE) -> bool:
        r = self.rotation
        return bool(
            np.all(np.isfinite(r))
            and np.all(np.isfinite(self.translation))
            and np.allclose(r.T @ r, np.eye(3), atol=tol, rtol=0)
            and abs(np.linalg.det(r) - 1.0) <= tol
        )


@dataclass(frozen=True)
class Frame:
    frame_id: int
    camera_id: int
    pose: Pose
    gravity: tuple[float, float, float]
    keypoints: tuple[Keypoint, ...] = ()

    @cached_property
    def pixels(self) -> np.ndarray:
        if not self.keypoints:
            return np.zeros((0, 2))
        return np.array([(kp.u, kp.v) for kp in self.keypoints], dtype=np.float64)

    @cached_property
    def scales(self) -> np.ndarray:
        return np.array([kp.scale for kp in self.keypoints], dtype=np.float64)

    @cached_property
    def landmark_ids(self) -> np.ndarray:
        """Landmark id per keypoint, -1 for untracked keypoints."""
        return np.array(
            [-1 if kp.landmark_id is None else kp.landmark_id for kp in self.keypoints],
            dtype=np.int64,
        )

    def descriptor_matrix(self, n_bits: int) -> np.ndarray:
        key = f"_descriptors_{n_bits}"
        cached = self.__dict__.get(key)
        if cached is None:
            cached = unpack_many([kp.descriptor for kp in self.keypoints], n_bits)
            self.__dict__[key] = cached
        return cached


@dataclass(frozen=True)
class Landmark:
    landmark_id: int
    position: tuple[float, float, float]
    observations: tuple[tuple[int, int], ...]


@dataclass(frozen=True)
class SfMMap:
    cameras: dict[int, CameraIntrinsics] = field(default_factory=dict)
    frames: tuple[Frame, ...] = ()
    landmarks: dict[int, Landmark] = field(default_factory=dict)
    descriptor_bits: int = DEFAULT_DESCRIPTOR_BITS
    metadata: dict[str, Any] = field(default_factory=dict)

    @cached_property
    def frame_index(self) -> dict[int, Frame]:
        return {f.frame_id: f for f in self.frames}

    def frame(self, frame_id: int) -> Frame:
        return self.frame_index[frame_id]

    def camera_of(self, frame: Frame) -> CameraIntrinsics:
        return self.cameras[frame.camera_id]

    def keypoint(self, frame_id: int, index: int) -> Keypoint:
        return self.frame_index[frame_id].keypoints[index]

    def landmark_descriptors(self, landmark_id: int) -> np.ndarray:
        """Observation descriptors of one landmark as a bit matrix."""
        obs = self.landmarks[landmark_id].observations
        packed = [self.keypoint(fid, idx).descriptor for fid, idx in obs]
        return unpack_many(packed, self.descriptor_bits)

    @property
    def keypoint_count(self) -> int:
        return sum(len(f.keypoints) for f in self.frames)


@dataclass(frozen=True, eq=False)
class ClassTable:
    """Dense class indices for landmarks; class 0 is the background."""
    landmark_ids: tuple[int, ...]
    positions: np.ndarray

    def __post_init__(self):
        positions = np.asarray(self.positions, dtype=np.float64).reshape(len(self.landmark_ids), 3)
        object.__setattr__(self, "positions", positions)
        object.__setattr__(self, "_class_of", {lm: i + 1 for i, lm in enumerate(self.landmark_ids)})

    @classmethod
    def from_map(cls, sfm: SfMMap, landmark_ids: list[int]) -> "ClassTable":
        positions = np.array([sfm.landmarks[lm].position for lm in landmark_ids], dtype=np.float64)
        return cls(tuple(landmark_ids), positions.reshape(-1, 3))

    @property
    def n_classes(self) -> int:
        """Class count including the background."""
        return len(self.landmark_ids) + 1

    def class_of(self, landmark_id: Optional[int]) -> int:
        if landmark_id is None:
            return 0
        return self._class_of.get(landmark_id, 0)

    def landmark_of(self, class_id: int) -> int:
        if class_id <= 0:
            raise KeyError("the background class has no landmark")
        return self.landmark_ids[class_id - 1]

    def position_of(self, class_id: int) -> np.ndarray:
        return self.positions[class_id - 1]

    def __eq__(self, other) -> bool:
        if not isinstance(other, ClassTable):
            return NotImplemented
        return self.landmark_ids == other.landmark_ids and np.array_equal(self.positions, other.positions)

    __hash__ = None


# ============================================================
# GEOMETRY
# ============================================================

def normalize_keypoint(kp: Keypoint, cam: CameraIntrinsics) -> tuple[float, float]:
    """Normalized image-plane coordinates ``((u - cx) / fx, (v - cy) / fy)``."""
    return (kp.u - cam.cx) / cam.fx, (kp.v - cam.cy) / cam.fy


def normalize_pixels(pixels: np.ndarray, cam: CameraIntrinsics) -> np.ndarray:
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    return (pixels - (cam.cx, cam.cy)) / (cam.fx, cam.fy)


def denormalize_points(points: np.ndarray, cam: CameraIntrinsics) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    return points * (cam.fx, cam.fy) + (cam.cx, cam.cy)


# ============================================================
# VALIDATION
# ============================================================

def validate_camera(cam: CameraIntrinsics) -> None:
    if not (cam.fx > 0 and cam.fy > 0):
        raise InvalidMapError(f"camera {cam.camera_id}: focal lengths must be positive")
    if not (0 <= cam.cx < cam.width and 0 <= cam.cy < cam.height):
        raise InvalidMapError(f"camera {cam.camera_id}: principal point outside the image")


def validate_map(sfm: SfMMap) -> None:
    """
    Check every structural invariant of a map.

    Raises:
        DanglingReferenceError: an id does not resolve
        DescriptorLengthError: a descriptor has the wrong bit count
        InvalidMapError: any other invariant violation
    """
    if sfm.descriptor_bits <= 0 or sfm.descriptor_bits % 8:
        raise InvalidMapError(f"descriptor_bits must be a positive multiple of 8, got {sfm.descriptor_bits}")
    n_bytes = sfm.descriptor_bits // 8

    for cam_id, cam in sfm.cameras.items():
        if cam_id != cam.camera_id:
            raise InvalidMapError(f"camera keyed {cam_id} carries id {cam.camera_id}")
        validate_camera(cam)

    seen_frames: set[int] = set()
    edges_from_keypoints: set[tuple[int, int, int]] = set()
    for frame in sfm.frames:
        if frame.frame_id in seen_frames:
            raise InvalidMapError(f"duplicate frame id {frame.frame_id}")
        seen_frames.add(frame.frame_id)
        cam = sfm.cameras.get(frame.camera_id)
        if cam is None:
            raise DanglingReferenceError("camera", frame.camera_id, f"frame {frame.frame_id}")
        if not frame.pose.is_valid():
            raise InvalidMapError(f"frame {frame.frame_id}: rotation is not a proper orthonormal matrix")
        g_norm = float(np.linalg.norm(frame.gravity))
        if abs(g_norm - 1.0) > GRAVITY_NORM_TOLERANCE:
            raise InvalidMapError(f"frame {frame.frame_id}: gravity norm {g_norm!r} is not 1")

        for idx, kp in enumerate(frame.keypoints):
            where = f"frame {frame.frame_id} keypoint {idx}"
            if not (0 <= kp.u < cam.width and 0 <= kp.v < cam.height):
                raise InvalidMapError(f"{where}: ({kp.u}, {kp.v}) outside the image")
            if not kp.scale > 0:
                raise InvalidMapError(f"{where}: scale must be positive")
            if len(kp.descriptor) != n_bytes:
                raise DescriptorLengthError(
                    f"{where}: descriptor has {8 * len(kp.descriptor)} bits, map uses {sfm.descriptor_bits}"
                )
            if kp.landmark_id is not None:
                if kp.landmark_id not in sfm.landmarks:
                    raise DanglingReferenceError("landmark", kp.landmark_id, where)
                edges_from_keypoints.add((kp.landmark_id, frame.frame_id, idx))

    edges_from_landmarks: set[tuple[int, int, int]] = set()
    for lm_id, lm in sfm.landmarks.items():
        if lm_id != lm.landmark_id:
            raise InvalidMapError(f"landmark keyed {lm_id} carries id {lm.landmark_id}")
        if not lm.observations:
            raise InvalidMapError(f"landmark {lm_id} has no observations")
        for frame_id, idx in lm.observations:
            frame = sfm.frame_index.get(frame_id)
            if frame is None:
                raise DanglingReferenceError("frame", frame_id, f"landmark {lm_id}")
            if not 0 <= idx < len(frame.keypoints):
                raise DanglingReferenceError("keypoint", (frame_id, idx), f"landmark {lm_id}")
            if frame.keypoints[idx].landmark_id != lm_id:
                raise InvalidMapError(
                    f"landmark {lm_id} observes frame {frame_id} keypoint {idx}, "
                    f"which references {frame.keypoints[idx].landmark_id}"
                )
            edges_from_landmarks.add((lm_id, frame_id, idx))

    missing = edges_from_keypoints - edges_from_landmarks
    if missing:
        lm_id, frame_id, idx = min(missing)
        raise InvalidMapError(f"frame {frame_id} keypoint {idx} references landmark {lm_id}, which does not list it")


# ============================================================
# PERSISTENCE
# ============================================================

def _map_records(sfm: SfMMap):
    yield MapHeaderRecord(descriptor_bits=sfm.descriptor_bits, metadata=sfm.metadata)
    for cam_id in sorted(sfm.cameras):
        cam = sfm.cameras[cam_id]
        yield CameraRecord(
            camera_id=cam.camera_id, fx=cam.fx, fy=cam.fy, cx=cam.cx, cy=cam.cy,
            width=cam.width, height=cam.height,
        )
    frames = sorted(sfm.frames, key=lambda f: f.frame_id)
    for frame in frames:
        yield FrameRecord(
            frame_id=frame.frame_id,
            camera_id=frame.camera_id,
            rotation=frame.pose.rotation.tolist(),
            translation=frame.pose.translation.tolist(),
            gravity=[float(g) for g in frame.gravity],
        )
    for frame in frames:
        for idx, kp in enumerate(frame.keypoints):
            yield KeypointRecord(
                frame_id=frame.frame_id, index=idx, u=kp.u, v=kp.v, scale=kp.scale,
                descriptor=kp.descriptor.hex(), landmark_id=kp.landmark_id,
            )
    for lm_id in sorted(sfm.landmarks):
        lm = sfm.landmarks[lm_id]
        yield LandmarkRecord(
            landmark_id=lm.landmark_id,
            position=[float(p) for p in lm.position],
            observations=[tuple(o) for o in lm.observations],
        )


def dump_map_lines(sfm: SfMMap) -> list[str]:
    """Canonical NDJSON lines of a map, in deterministic record order."""
    return [record.model_dump_json() for record in _map_records(sfm)]


def map_fingerprint(sfm: SfMMap) -> str:
    digest = hashlib.sha256()
    for line in dump_map_lines(sfm):
        digest.update(line.encode("utf-8"))
        digest.update(b"\n")
    return digest.hexdigest()


def save_map(sfm: SfMMap, path: str | Path) -> None:
    """
    Write a map as newline-delimited JSON.

    Args:
        sfm: Map whose invariants hold
        path: Destination file; parent directory must exist

    Raises:
        OSError: the file cannot be written
    """
    lines = dump_map_lines(sfm)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for line in lines:
            fh.write(line)
            fh.write("\n")
    logger.debug("Saved map with %d frames, %d landmarks to %s", len(sfm.frames), len(sfm.landmarks), path)


def parse_map_lines(lines) -> SfMMap:
    """
    Build and validate a map from NDJSON lines.

    Records may come in any order; keypoint indices of a frame must be
    contiguous from 0.

    Raises:
        MapFormatError: malformed record or descriptor hex, with its 1-based line number
        DescriptorLengthError: descriptor lengths disagree, with the line when one record is at fault
        DanglingReferenceError / InvalidMapError
    """
    header: MapHeaderRecord | None = None
    cameras: dict[int, CameraIntrinsics] = {}
    frame_records: dict[int, FrameRecord] = {}
    keypoints: dict[int, dict[int, tuple[int, Keypoint]]] = {}
    landmarks: dict[int, Landmark] = {}
    n_bits: int | None = None

    for line_no, raw in enumerate(lines, start=1):
        text = raw.strip()
        if not text:
            continue
        try:
            record = map_record_adapter.validate_python(json.loads(text))
        except json.JSONDecodeError as e:
            raise MapFormatError(f"invalid JSON: {e.msg}", line_no) from e
        except ValidationError as e:
            first = e.errors()[0]
            loc = ".".join(str(p) for p in first["loc"])
            raise MapFormatError(f"invalid record ({loc}): {first['msg']}", line_no) from e

        if isinstance(record, MapHeaderRecord):
            if header is not None:
                raise MapFormatError("duplicate map header", line_no)
            header = record
        elif isinstance(record, CameraRecord):
            if record.camera_id in cameras:
                raise MapFormatError(f"duplicate camera {record.camera_id}", line_no)
            cameras[record.camera_id] = CameraIntrinsics(
                fx=record.fx, fy=record.fy, cx=record.cx, cy=record.cy,
                width=record.width, height=record.height, camera_id=record.camera_id,
            )
        elif isinstance(record, FrameRecord):
            if record.frame_id in frame_records:
                raise MapFormatError(f"duplicate frame {record.frame_id}", line_no)
            if len(record.rotation) != 3 or any(len(row) != 3 for row in record.rotation):
                raise MapFormatError("rotation must be 3x3", line_no)
            frame_records[record.frame_id] = record
        elif isinstance(record, KeypointRecord):
            try:
                bits = bits_from_hex(record.descriptor)
            except DescriptorLengthError as e:
                raise MapFormatError(str(e), line_no) from e
            if n_bits is None:
                n_bits = bits.size
            elif bits.size != n_bits:
                raise DescriptorLengthError(f"descriptor has {bits.size} bits, expected {n_bits}", line_no)
            per_frame = keypoints.setdefault(record.frame_id, {})
            if record.index in per_frame:
                raise MapFormatError(f"duplicate keypoint {record.index} of frame {record.frame_id}", line_no)
            per_frame[record.index] = (line_no, Keypoint(
                u=record.u, v=record.v, scale=record.scale,
                descriptor=pack_bits(bits), landmark_id=record.landmark_id,
            ))
        else:
            if record.landmark_id in landmarks:
                raise MapFormatError(f"duplicate landmark {record.landmark_id}", line_no)
            landmarks[record.landmark_id] = Landmark(
                landmark_id=record.landmark_id,
                position=tuple(float(p) for p in record.position),
                observations=tuple((int(f), int(i)) for f, i in record.observations),
            )

    descriptor_bits = header.descriptor_bits if header else (n_bits or DEFAULT_DESCRIPTOR_BITS)
    if n_bits is not None and n_bits != descriptor_bits:
        raise DescriptorLengthError(f"descriptors have {n_bits} bits, header declares {descriptor_bits}")

    for frame_id, per_frame in keypoints.items():
        if frame_id not in frame_records:
            line_no = min(line for line, _ in per_frame.values())
            raise DanglingReferenceError("frame", frame_id, f"keypoint on line {line_no}")
        if sorted(per_frame) != list(range(len(per_frame))):
            line_no = max(line for line, _ in per_frame.values())
            raise MapFormatError(f"keypoint indices of frame {frame_id} are not contiguous from 0", line_no)

    frames = []
    for frame_id in sorted(frame_records):
        rec = frame_records[frame_id]
        per_frame = keypoints.get(frame_id, {})
        frames.append(Frame(
            frame_id=rec.frame_id,
            camera_id=rec.camera_id,
            pose=Pose(np.array(rec.rotation), np.array(rec.translation)),
            gravity=tuple(float(g) for g in rec.gravity),
            keypoints=tuple(per_frame[i][1] for i in range(len(per_frame))),
        ))

    sfm = SfMMap(
        cameras=cameras,
        frames=tuple(frames),
        landmarks=landmarks,
        descriptor_bits=descriptor_bits,
        metadata=dict(header.metadata) if header else {},
    )
    validate_map(sfm)
    return sfm


def load_map(path: str | Path) -> SfMMap:
    """
    Load and validate a map file.

    Args:
        path: NDJSON map file

    Returns:
        Fully linked map
    """
    with open(path, "r", encoding="utf-8") as fh:
        sfm = parse_map_lines(fh)
    logger.info(
        "Loaded map %s: %d frames, %d keypoints, %d landmarks",
        path, len(sfm.frames), sfm.keypoint_count, len(sfm.landmarks),
    )
    return sfm


def build_map(
    cameras: list[CameraIntrinsics],
    frames: list[Frame],
    landmark_positions: dict[int, tuple[float, float, float]],
    descriptor_bits: int,
    metadata: dict[str, Any] | None = None,
) -> SfMMap:
    """
    Assemble a map from frames whose keypoints carry landmark ids.

    Observation lists are derived from the keypoints, so observation symmetry
    holds by construction. Landmarks that nobody observes are dropped.
    """
    observations: dict[int, list[tuple[int, int]]] = {}
    for frame in sorted(frames, key=lambda f: f.frame_id):
        for idx, kp in enumerate(frame.keypoints):
            if kp.landmark_id is not None:
                observations.setdefault(kp.landmark_id, []).append((frame.frame_id, idx))
    landmarks = {
        lm_id: Landmark(lm_id, tuple(float(p) for p in landmark_positions[lm_id]), tuple(observations[lm_id]))
        for lm_id in sorted(observations)
    }
    sfm = SfMMap(
        cameras={c.camera_id: c for c in cameras},
        frames=tuple(sorted(frames, key=lambda f: f.frame_id)),
        landmarks=landmarks,
        descriptor_bits=descriptor_bits,
        metadata=dict(metadata or {}),
    )
    validate_map(sfm)
    return sfm
