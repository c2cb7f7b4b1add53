"""
Shared fixtures: one small synthetic world and the artifacts trained on it.
"""

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from app.models.configs import RegionConfig, TrainingConfig, WorldConfig
from app.services.boosting import fit_model
from app.services.context import generate_regions
from app.services.map_model import CameraIntrinsics, Frame, Keypoint, Pose, SfMMap, build_map
from app.services.synthworld import generate_descriptor_pool, generate_world
from app.services.vocabulary import train_vocabulary

SMALL_WORLD = WorldConfig(
    landmark_count=60,
    room_count=2,
    room_length=4.0,
    train_frames=16,
    eval_frames=4,
    clutter_per_frame=6,
    descriptor_bits=128,
    seed=3,
)

SMALL_TRAINING = TrainingConfig(
    rounds=15,
    candidate_features=40,
    landmark_budget=60,
    background_cap=100,
    mining_period=5,
    seed=0,
)


@pytest.fixture(scope="session")
def small_world():
    return generate_world(SMALL_WORLD)


@pytest.fixture(scope="session")
def train_map(small_world) -> SfMMap:
    return small_world.train_map


@pytest.fixture(scope="session")
def eval_map(small_world) -> SfMMap:
    return small_world.eval_map


@pytest.fixture(scope="session")
def small_vocab():
    pool = generate_descriptor_pool(SMALL_WORLD, 600, seed=1)
    return train_vocabulary(pool, 8, seed=1)


@pytest.fixture(scope="session")
def small_bank():
    return generate_regions(20, RegionConfig(seed=0))


@pytest.fixture(scope="session")
def small_model(train_map, small_bank, small_vocab):
    return fit_model(train_map, small_bank, small_vocab, SMALL_TRAINING)


@pytest.fixture
def camera() -> CameraIntrinsics:
    return CameraIntrinsics(400.0, 400.0, 320.0, 240.0, 640, 480, 0)


def random_pose(rng: np.random.Generator) -> Pose:
    return Pose(Rotation.random(random_state=rng.integers(1 << 31)).as_matrix(), rng.uniform(-2, 2, 3))


def points_in_view(pose: Pose, cam: CameraIntrinsics, n: int, rng: np.random.Generator) -> np.ndarray:
    """World points that project inside the image at depths 2..10 m."""
    z = rng.uniform(2.0, 10.0, n)
    u = rng.uniform(20, cam.width - 20, n)
    v = rng.uniform(20, cam.height - 20, n)
    cam_pts = np.column_stack([(u - cam.cx) / cam.fx * z, (v - cam.cy) / cam.fy * z, z])
    return cam_pts @ pose.rotation.T + pose.translation


def tiny_map(descriptor_bits: int = 16) -> SfMMap:
    """Two frames, two landmarks seen in both, one untracked keypoint."""
    cam = CameraIntrinsics(100.0, 100.0, 50.0, 40.0, 100, 80, 0)
    n_bytes = descriptor_bits // 8

    def kp(u, v, fill, lm):
        return Keypoint(u, v, 2.0, bytes([fill]) * n_bytes, lm)

    frames = [
        Frame(0, 0, Pose.identity(), (0.0, 1.0, 0.0), (kp(10, 10, 0x0F, 1), kp(20, 30, 0xF0, 2), kp(60, 60, 0xAA, None))),
        Frame(1, 0, Pose(np.eye(3), [0.5, 0.0, 0.0]), (0.0, 1.0, 0.0), (kp(15, 12, 0x0F, 1), kp(25, 33, 0xF1, 2))),
    ]
    return build_map([cam], frames, {1: (0.0, 0.0, 5.0), 2: (1.0, 1.0, 6.0), 3: (9.0, 9.0, 9.0)}, descriptor_bits,
                     {"source": "test"})
