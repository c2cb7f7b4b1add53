"""
Synthetic World
===============
A corridor of identical-looking rooms with ground truth: landmarks on the
side walls, a camera walk with smooth yaw, noisy binary descriptors and
controllable visual aliasing.

Rooms are grouped onto shared templates (``aliasing_factor`` rooms per
template). Template landmarks sit at the same room-relative position with
exactly the same canonical descriptor in every room of the group, so a
descriptor alone cannot tell them apart; each room also gets unique cue
landmarks that differ in position and appearance.
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from app.core.errors import InvalidConfigError
from app.models.configs import WorldConfig
from app.services.bits import pack_bits, unpack_bits
from app.services.map_model import CameraIntrinsics, Frame, Keypoint, Pose, SfMMap, build_map

logger = logging.getLogger(__name__)

EVAL_FRAME_OFFSET = 10000
REFERENCE_DEPTH = 3.0
WALL_MARGIN = 0.2


@dataclass(frozen=True, eq=False)
class SyntheticWorld:
    config: WorldConfig
    train_map: SfMMap
    eval_map: SfMMap
    positions: dict[int, tuple[float, float, float]]
    canonical: dict[int, bytes]
    room_of: dict[int, int]
    template_of: dict[int, int] = field(default_factory=dict)

    @property
    def room_spacing(self) -> float:
        return self.config.room_length + self.config.corridor_gap


# ============================================================
# DESCRIPTORS
# ============================================================

def flip_bits(descriptor: np.ndarray, p: float, seed) -> np.ndarray:
    """
    Flip every bit independently with probability p.

    Args:
        descriptor: 0/1 vector
        p: Flip probability in [0, 1]
        seed: Integer seed or a numpy Generator to draw from
    """
    if not 0.0 <= p <= 1.0:
        raise InvalidConfigError(f"flip probability must be in [0, 1], got {p}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    bits = np.asarray(descriptor, dtype=np.uint8)
    return bits ^ (rng.random(bits.shape) < p).astype(np.uint8)


def descriptor_family(cfg: WorldConfig) -> np.ndarray:
    """Prototype descriptors shared by every world and pool built from the same family seed."""
    rng = np.random.default_rng(cfg.descriptor_family_seed)
    return rng.integers(0, 2, size=(cfg.descriptor_prototypes, cfg.descriptor_bits), dtype=np.uint8)


def _family_draw(prototypes: np.ndarray, spread: float, rng: np.random.Generator) -> np.ndarray:
    return flip_bits(prototypes[rng.integers(prototypes.shape[0])], spread, rng)


def generate_descriptor_pool(cfg: WorldConfig, size: int, seed: int) -> np.ndarray:
    """Descriptors from the world's family but an unrelated seed, for vocabulary training."""
    prototypes = descriptor_family(cfg)
    rng = np.random.default_rng([seed, 0x5EED])
    return np.array([_family_draw(prototypes, cfg.prototype_spread, rng) for _ in range(size)],
                    dtype=np.uint8).reshape(size, cfg.descriptor_bits)


# ============================================================
# GEOMETRY
# ============================================================

def camera_pose(position, yaw: float, roll: float = 0.0) -> Pose:
    """World-from-camera pose of a level camera heading ``yaw`` with in-plane ``roll``; z forward, y down."""
    right = np.array([math.sin(yaw), -math.cos(yaw), 0.0])
    down = np.array([0.0, 0.0, -1.0])
    forward = np.array([math.cos(yaw), math.sin(yaw), 0.0])
    R = np.column_stack([right, down, forward]) @ Rotation.from_euler("z", roll).as_matrix()
    return Pose(R, np.asarray(position, dtype=np.float64))


def gravity_in_camera(pose: Pose) -> tuple[float, float, float]:
    g = pose.rotation.T @ np.array([0.0, 0.0, -1.0])
    g = g / np.linalg.norm(g)
    return float(g[0]), float(g[1]), float(g[2])


def _check(cfg: WorldConfig) -> None:
    if not 0 < cfg.camera_height < cfg.room_height:
        raise InvalidConfigError("camera must be between floor and ceiling")
    if abs(cfg.eval_lateral_offset) >= cfg.room_width / 2:
        raise InvalidConfigError("eval walk leaves the corridor")
    if cfg.room_length <= 2 * WALL_MARGIN or cfg.room_height <= 2 * WALL_MARGIN:
        raise InvalidConfigError("rooms are too small to hold landmarks")


def _place_landmarks(cfg: WorldConfig, rng: np.random.Generator, prototypes: np.ndarray):
    per_room = cfg.landmark_count // cfg.room_count
    n_aliased = int(round(cfg.aliased_fraction * per_room))
    n_templates = math.ceil(cfg.room_count / cfg.aliasing_factor)
    spacing = cfg.room_length + cfg.corridor_gap

    def local_position():
        side = 1.0 if rng.random() < 0.5 else -1.0
        return (
            rng.uniform(WALL_MARGIN, cfg.room_length - WALL_MARGIN),
            side * cfg.room_width / 2,
            rng.uniform(WALL_MARGIN, cfg.room_height - WALL_MARGIN),
        )

    templates = [
        [(local_position(), pack_bits(_family_draw(prototypes, cfg.prototype_spread, rng))) for _ in range(n_aliased)]
        for _ in range(n_templates)
    ]
    positions, canonical, room_of, template_of = {}, {}, {}, {}
    lm_id = 0
    for room in range(cfg.room_count):
        t = room % n_templates
        slots = [(p, d, t) for p, d in templates[t]]
        slots += [(local_position(), pack_bits(_family_draw(prototypes, cfg.prototype_spread, rng)), None)
                  for _ in range(per_room - n_aliased)]
        for (x, y, z), desc, tmpl in slots:
            positions[lm_id] = (room * spacing + x, y, z)
            canonical[lm_id] = desc
            room_of[lm_id] = room
            if tmpl is not None:
                template_of[lm_id] = tmpl
            lm_id += 1
    return positions, canonical, room_of, template_of


def _walk(cfg: WorldConfig, n: int, lateral: float, phase_deg: float, x_shift: float):
    length = cfg.room_count * cfg.room_length + (cfg.room_count - 1) * cfg.corridor_gap
    if n == 0:
        return []
    step = (length - 1.0) / max(n, 1)
    amp = math.radians(cfg.yaw_amplitude_deg)
    out = []
    for i in range(n):
        x = 0.5 + (i + x_shift) * step
        yaw = amp * math.sin(2 * math.pi * cfg.yaw_cycles * i / max(n, 1) + math.radians(phase_deg))
        out.append(((x, lateral, cfg.camera_height), yaw))
    return out


def _render_frame(
    frame_id: int,
    pose: Pose,
    cam: CameraIntrinsics,
    cfg: WorldConfig,
    ids: np.ndarray,
    points: np.ndarray,
    canonical: dict[int, bytes],
    prototypes: np.ndarray,
    rng: np.random.Generator,
) -> Frame:
    pc = pose.world_to_camera(points)
    depth = pc[:, 2]
    visible = (depth > 0.1) & (np.linalg.norm(pc, axis=1) <= cfg.max_range)
    keypoints: list[Keypoint] = []
    for lm_id, p, z in zip(ids[visible], pc[visible], depth[visible]):
        if rng.random() < cfg.dropout_prob:
            continue
        jitter = np.clip(rng.normal(0.0, cfg.pixel_jitter, 2), -3 * cfg.pixel_jitter, 3 * cfg.pixel_jitter) \
            if cfg.pixel_jitter > 0 else np.zeros(2)
        u = cam.fx * p[0] / z + cam.cx + jitter[0]
        v = cam.fy * p[1] / z + cam.cy + jitter[1]
        if not (0 <= u < cam.width and 0 <= v < cam.height):
            continue
        scale = float(np.clip(cfg.base_scale * REFERENCE_DEPTH / z, 1.0, 64.0))
        desc = flip_bits(unpack_bits(canonical[int(lm_id)]), cfg.bit_flip_prob, rng)
        keypoints.append(Keypoint(float(u), float(v), scale, pack_bits(desc), int(lm_id)))

    for _ in range(cfg.clutter_per_frame):
        u = float(rng.uniform(0, cam.width))
        v = float(rng.uniform(0, cam.height))
        if u >= cam.width or v >= cam.height:
            continue
        scale = float(cfg.base_scale * rng.uniform(0.5, 2.0))
        keypoints.append(Keypoint(u, v, scale, pack_bits(_family_draw(prototypes, cfg.prototype_spread, rng)), None))

    order = rng.permutation(len(keypoints))
    return Frame(frame_id, cam.camera_id, pose, gravity_in_camera(pose), tuple(keypoints[i] for i in order))


def generate_world(cfg: WorldConfig) -> SyntheticWorld:
    """
    Generate a training map and an evaluation map with ground truth.

    Training frames walk the corridor centreline; evaluation frames walk a
    laterally shifted line with a different yaw phase and carry the true
    landmark id on every tracked keypoint (frame ids start at 10000).
    Deterministic given ``cfg.seed``.
    """
    _check(cfg)
    rng = np.random.default_rng(cfg.seed)
    prototypes = descriptor_family(cfg)
    positions, canonical, room_of, template_of = _place_landmarks(cfg, rng, prototypes)
    ids = np.array(sorted(positions), dtype=np.int64)
    points = np.array([positions[i] for i in ids], dtype=np.float64).reshape(-1, 3)
    cam = CameraIntrinsics(cfg.fx, cfg.fy, cfg.width / 2, cfg.height / 2, cfg.width, cfg.height, 0)
    roll_sigma = math.radians(cfg.roll_sigma_deg)

    def render(walk, first_id):
        frames = []
        for i, (position, yaw) in enumerate(walk):
            roll = float(rng.normal(0.0, roll_sigma)) if roll_sigma > 0 else 0.0
            pose = camera_pose(position, yaw, roll)
            frames.append(_render_frame(first_id + i, pose, cam, cfg, ids, points, canonical, prototypes, rng))
        return frames

    train_frames = render(_walk(cfg, cfg.train_frames, 0.0, 0.0, 0.0), 0)
    eval_frames = render(_walk(cfg, cfg.eval_frames, cfg.eval_lateral_offset, cfg.eval_yaw_phase_deg, 0.5),
                         EVAL_FRAME_OFFSET)

    metadata = {"source": "synthworld", "config": cfg.model_dump()}
    train_map = build_map([cam], train_frames, positions, cfg.descriptor_bits, {**metadata, "split": "train"})
    eval_map = build_map([cam], eval_frames, positions, cfg.descriptor_bits, {**metadata, "split": "eval"})
    logger.info(
        "Synthetic world: %d rooms, %d landmarks (%d mapped), %d train / %d eval frames",
        cfg.room_count, len(positions), len(train_map.landmarks), len(train_frames), len(eval_frames),
    )
    return SyntheticWorld(cfg, train_map, eval_map, positions, canonical, room_of, template_of)


# ============================================================
# GROUND TRUTH
# ============================================================

def ground_truth_pose_rows(sfm: SfMMap) -> list[dict]:
    rows = []
    for frame in sfm.frames:
        x, y, z, w = Rotation.from_matrix(frame.pose.rotation).as_quat()
        tx, ty, tz = frame.pose.translation
        rows.append({
            "frame_id": frame.frame_id,
            "tx": float(tx), "ty": float(ty), "tz": float(tz),
            "qw": float(w), "qx": float(x), "qy": float(y), "qz": float(z),
        })
    return rows


def ground_truth_keypoint_rows(sfm: SfMMap) -> list[dict]:
    return [
        {
            "frame_id": frame.frame_id,
            "keypoint_idx": idx,
            "landmark_id": -1 if kp.landmark_id is None else kp.landmark_id,
        }
        for frame in sfm.frames
        for idx, kp in enumerate(frame.keypoints)
    ]
