"""
Pose Estimation
===============
P3P minimal solver, PnP inside RANSAC with a final nonlinear refinement,
pose error against ground truth, and the end-to-end frame localizer.
"""

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from numpy.polynomial import polynomial as P
from scipy.optimize import least_squares
from scipy.spatial.transform import Rotation

from app.core.errors import DegenerateSampleError, TooFewCorrespondencesError
from app.models.configs import MatchConfig, RansacConfig
from app.services.boosting import BoostedModel
from app.services.map_model import CameraIntrinsics, Frame, Pose, normalize_pixels
from app.services.matching import Correspondence2D3D, match_frame
from app.services.vocabulary import InvertedFile

logger = logging.getLogger(__name__)

P3P_RESIDUAL_TOL = 1e-8
_COLLINEAR_TOL = 1e-9


@dataclass(frozen=True)
class RansacResult:
    pose: Optional[Pose]
    inliers: tuple[int, ...]
    iterations: int
    inlier_ratio: float
    correspondences: int = 0
    match_ms: float = 0.0
    ransac_ms: float = 0.0
    matches: tuple[Correspondence2D3D, ...] = field(default=(), repr=False)

    @property
    def success(self) -> bool:
        return self.pose is not None


# ============================================================
# GEOMETRY
# ============================================================

def project_points(pose: Pose, world: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Normalized image coordinates and depths of world points seen from a world-from-camera pose."""
    cam = pose.world_to_camera(np.asarray(world, dtype=np.float64).reshape(-1, 3))
    depth = cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        return cam[:, :2] / depth[:, None], depth


def reprojection_errors(pose: Pose, world: np.ndarray, normalized: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-point normalized reprojection distance; points behind the camera get inf."""
    proj, depth = project_points(pose, world)
    err = np.linalg.norm(proj - normalized, axis=1)
    err[~(depth > 0)] = np.inf
    return err, depth


def pose_quaternion(pose: Pose) -> tuple[float, float, float, float]:
    """(qw, qx, qy, qz) of the world-from-camera rotation."""
    x, y, z, w = Rotation.from_matrix(pose.rotation).as_quat()
    return float(w), float(x), float(y), float(z)


def pose_error(estimate: Pose, truth: Pose) -> tuple[float, float]:
    """
    Translation error (m) and rotation error (deg) between two poses.

    The rotation error is the angle of ``R_estᵀ R_true``, in [0, 180].
    """
    t_err = float(np.linalg.norm(estimate.translation - truth.translation))
    r_err = float(np.degrees(Rotation.from_matrix(estimate.rotation.T @ truth.rotation).magnitude()))
    return t_err, r_err


# ============================================================
# MINIMAL SOLVER
# ============================================================

def _bearings(normalized: np.ndarray) -> np.ndarray:
    rays = np.column_stack([normalized, np.ones(len(normalized))])
    return rays / np.linalg.norm(rays, axis=1, keepdims=True)


def _rigid_from_points(world: np.ndarray, cam: np.ndarray) -> Pose:
    """World-from-camera pose aligning camera-frame points onto world points."""
    wc, cc = world.mean(axis=0), cam.mean(axis=0)
    rot, _ = Rotation.align_vectors(world - wc, cam - cc)
    R = rot.as_matrix()
    return Pose(R, wc - R @ cc)


def solve_pnp_minimal(world: np.ndarray, normalized: np.ndarray) -> list[Pose]:
    """
    All camera poses that reproject three landmarks exactly (P3P).

    Solves the quartic in the depth ratio ``v = s3 / s1`` (Grunert's
    formulation), polishes every real positive root with Newton steps and
    recovers each pose by aligning the camera-frame points to the world.

    Args:
        world: ``(3, 3)`` landmark positions
        normalized: ``(3, 2)`` normalized image coordinates

    Returns:
        Up to four poses, each with reprojection residual below 1e-8

    Raises:
        DegenerateSampleError: collinear or coincident landmarks
    """
    X = np.asarray(world, dtype=np.float64).reshape(3, 3)
    j = _bearings(np.asarray(normalized, dtype=np.float64).reshape(3, 2))

    e1, e2 = X[1] - X[0], X[2] - X[0]
    if np.linalg.norm(np.cross(e1, e2)) <= _COLLINEAR_TOL * max(np.linalg.norm(e1) * np.linalg.norm(e2), 1e-300):
        raise DegenerateSampleError("landmarks of the minimal sample are collinear")

    a2 = float(np.sum((X[1] - X[2]) ** 2))
    b2 = float(np.sum((X[0] - X[2]) ** 2))
    c2 = float(np.sum((X[0] - X[1]) ** 2))
    cos_a, cos_b, cos_g = float(j[1] @ j[2]), float(j[0] @ j[2]), float(j[0] @ j[1])

    k1 = (a2 - c2) / b2
    num = np.array([-1.0 - k1, 2.0 * k1 * cos_b, 1.0 - k1])          # u = num / den
    den = np.array([-2.0 * cos_g, 2.0 * cos_a])
    tri = np.array([1.0, -2.0 * cos_b, 1.0])                          # 1 + v^2 - 2 v cos(beta)
    quartic = P.polyadd(
        P.polysub(P.polymul(num, num), 2.0 * cos_g * P.polymul(num, den)),
        P.polymul(P.polysub([1.0], (c2 / b2) * tri), P.polymul(den, den)),
    )
    quartic = P.polytrim(quartic)
    if quartic.size < 2:
        raise DegenerateSampleError("P3P polynomial vanishes")
    dquartic = P.polyder(quartic)

    poses: list[Pose] = []
    for root in P.polyroots(quartic):
        if abs(root.imag) > 1e-6 * max(1.0, abs(root.real)):
            continue
        v = float(root.real)
        for _ in range(5):
            d = P.polyval(v, dquartic)
            if d == 0:
                break
            v -= P.polyval(v, quartic) / d
        d_v = P.polyval(v, den)
        t_v = P.polyval(v, tri)
        if v <= 0 or d_v == 0 or t_v <= 0:
            continue
        u = P.polyval(v, num) / d_v
        if u <= 0:
            continue
        s1 = math.sqrt(b2 / t_v)
        cam_points = np.array([s1 * j[0], u * s1 * j[1], v * s1 * j[2]])
        pose = _rigid_from_points(X, cam_points)
        err, _ = reprojection_errors(pose, X, np.asarray(normalized, dtype=np.float64).reshape(3, 2))
        if np.all(err < P3P_RESIDUAL_TOL) and pose.is_valid(1e-9):
            if not any(np.allclose(pose.rotation, p.rotation, atol=1e-10) and np.allclose(pose.translation, p.translation, atol=1e-10) for p in poses):
                poses.append(pose)
    return poses


# ============================================================
# RANSAC
# ============================================================

def _refine(pose: Pose, world: np.ndarray, normalized: np.ndarray, max_evals: int) -> Pose:
    """Levenberg-Marquardt on the normalized reprojection error, in camera-from-world parameters."""
    R_cw = pose.rotation.T
    x0 = np.concatenate([Rotation.from_matrix(R_cw).as_rotvec(), -R_cw @ pose.translation])

    def residuals(x):
        R = Rotation.from_rotvec(x[:3]).as_matrix()
        pc = world @ R.T + x[3:]
        return (pc[:, :2] / pc[:, 2:3] - normalized).ravel()

    sol = least_squares(residuals, x0, method="lm", max_nfev=max_evals)
    R = Rotation.from_rotvec(sol.x[:3]).as_matrix()
    return Pose(R.T, -R.T @ sol.x[3:])


def pnp_ransac(
    world: np.ndarray,
    pixels: np.ndarray,
    cam: CameraIntrinsics,
    config: Optional[RansacConfig] = None,
) -> RansacResult:
    """
    Robust pose from 2D-3D correspondences.

    Hypotheses come from P3P on random minimal samples; the best one has the
    most inliers, ties going to the lower total inlier error and then to the
    earlier iteration. The loop stops at ``max_iters`` or at the adaptive
    bound ``log(1 - p) / log(1 - w^3)``. The winner is refined on its inliers
    and kept only when the refinement does not increase the inlier error.

    Args:
        world: ``(n, 3)`` landmark positions
        pixels: ``(n, 2)`` observed pixel coordinates
        cam: Camera intrinsics
        config: Iterations, pixel threshold, minimum inliers, seed

    Returns:
        RansacResult; its pose is None when fewer than ``min_inliers`` agree

    Raises:
        TooFewCorrespondencesError: fewer than three correspondences
    """
    config = config or RansacConfig()
    world = np.asarray(world, dtype=np.float64).reshape(-1, 3)
    n = world.shape[0]
    if n < 3:
        raise TooFewCorrespondencesError(f"PnP needs at least 3 correspondences, got {n}")
    normalized = normalize_pixels(pixels, cam)
    threshold = config.inlier_threshold_px / cam.mean_focal
    rng = np.random.default_rng(config.seed)

    best_pose, best_mask, best_err = None, np.zeros(n, dtype=bool), math.inf
    bound = config.max_iters
    it = 0
    while it < min(config.max_iters, bound):
        it += 1
        sample = rng.choice(n, size=3, replace=False)
        try:
            hypotheses = solve_pnp_minimal(world[sample], normalized[sample])
        except DegenerateSampleError:
            continue
        for pose in hypotheses:
            err, _ = reprojection_errors(pose, world, normalized)
            mask = err < threshold
            count = int(mask.sum())
            total = float(err[mask].sum())
            if count > best_mask.sum() or (count == best_mask.sum() and count > 0 and total < best_err):
                best_pose, best_mask, best_err = pose, mask, total
                w = count / n
                if w >= 1.0:
                    bound = 0
                elif w > 0:
                    bound = math.ceil(math.log(1.0 - config.confidence) / math.log(1.0 - w ** 3))

    inliers = np.flatnonzero(best_mask)
    if best_pose is None or inliers.size < config.min_inliers:
        return RansacResult(None, (), it, 0.0, n)

    pose = best_pose
    if config.refine:
        refined = _refine(best_pose, world[inliers], normalized[inliers], config.refine_max_evals)
        err_before, _ = reprojection_errors(best_pose, world[inliers], normalized[inliers])
        err_after, _ = reprojection_errors(refined, world[inliers], normalized[inliers])
        if refined.is_valid(1e-6) and np.sum(err_after ** 2) <= np.sum(err_before ** 2):
            pose = refined
    return RansacResult(pose, tuple(int(i) for i in inliers), it, inliers.size / n, n)


# ============================================================
# LOCALIZATION
# ============================================================

def localize_correspondences(
    matches: list[Correspondence2D3D],
    frame: Frame,
    cam: CameraIntrinsics,
    position_of: Callable[[int], np.ndarray],
    config: Optional[RansacConfig] = None,
    match_ms: float = 0.0,
) -> RansacResult:
    """Run RANSAC on already matched keypoints; too few matches give a pose-less result."""
    config = config or RansacConfig()
    start = time.perf_counter()
    if len(matches) < 3:
        return RansacResult(None, (), 0, 0.0, len(matches), match_ms, 0.0, tuple(matches))
    world = np.array([position_of(m.landmark_id) for m in matches], dtype=np.float64)
    pixels = frame.pixels[[m.keypoint_index for m in matches]]
    result = pnp_ransac(world, pixels, cam, config)
    ransac_ms = 1000.0 * (time.perf_counter() - start)
    return RansacResult(result.pose, result.inliers, result.iterations, result.inlier_ratio,
                        result.correspondences, match_ms, ransac_ms, tuple(matches))


def localize_frame(
    frame: Frame,
    model: BoostedModel,
    cam: CameraIntrinsics,
    inv: Optional[InvertedFile] = None,
    config: Optional[RansacConfig] = None,
    match_config: Optional[MatchConfig] = None,
) -> RansacResult:
    """
    Match a frame with the classifier, then estimate its pose.

    Returns:
        RansacResult carrying the matching and RANSAC wall-clock times
    """
    start = time.perf_counter()
    matches = match_frame(frame, model, cam, inv, match_config)
    match_ms = 1000.0 * (time.perf_counter() - start)
    table = model.class_table
    return localize_correspondences(
        matches, frame, cam, lambda lm: table.position_of(table.class_of(lm)), config, match_ms,
    )
