"""
Experiment Service
==================
Declarative experiments: synthesize (or load) maps, train the vocabulary and
the classifier, match and localize every evaluation frame with each
matcher, and write CSV reports plus a text summary.

Stages run in order synth -> vocab -> train -> match -> localize ->
metrics. Every report is ordered by matcher, then frame id, then keypoint
index, so a rerun with the same spec writes the same bytes (wall-clock
columns excepted unless ``freeze_timings`` is set).
"""

import json
import logging
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from pydantic import ValidationError
from tqdm import tqdm

from app.core.config import PROJECTED_DIMS, SHOW_PROGRESS
from app.core.errors import ExperimentStageError, InvalidConfigError, LocalizerError
from app.models.configs import ExperimentSpec, MatchConfig, RansacConfig, VocabularyConfig, WorldConfig
from app.services import export, metrics
from app.services.bits import save_descriptors
from app.services.boosting import BoostedModel, fit_model, load_model, save_model
from app.services.context import generate_regions, save_region_bank
from app.services.map_model import Frame, SfMMap, load_map, map_fingerprint, save_map
from app.services.matching import (
    Correspondence2D3D,
    DescriptorIndex,
    ProjectedIndex,
    accepted_correspondences,
    head_correspondences,
    rank_frame,
    rank_hamming_baseline,
    rank_projected_baseline,
    ranked_landmarks,
)
from app.services.pose import RansacResult, localize_correspondences, pose_error
from app.services.synthworld import (
    SyntheticWorld,
    generate_descriptor_pool,
    generate_world,
    ground_truth_keypoint_rows,
    ground_truth_pose_rows,
)
from app.services.vocabulary import InvertedFile, build_inverted_file, save_vocabulary, train_vocabulary

logger = logging.getLogger(__name__)

BOOST_MATCHERS = ("boost", "boost-inv")


# ============================================================
# STAGES
# ============================================================

@contextmanager
def stage(name: str):
    """Re-raise a failure inside the block as an ExperimentStageError naming the stage; config errors pass through."""
    logger.info("Stage %s", name)
    try:
        yield
    except (ExperimentStageError, InvalidConfigError):
        raise
    except (LocalizerError, ValueError, OSError, KeyError) as e:
        raise ExperimentStageError(name, str(e) or type(e).__name__) from e


def load_spec(path: str | Path) -> ExperimentSpec:
    """
    Read and validate an experiment spec file.

    Raises:
        InvalidConfigError: unreadable file, invalid JSON or failed validation
    """
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise InvalidConfigError(f"cannot read spec {path}: {e}") from e
    try:
        return ExperimentSpec.model_validate_json(text)
    except ValidationError as e:
        first = e.errors()[0]
        where = ".".join(str(p) for p in first["loc"]) or "spec"
        raise InvalidConfigError(f"{path}: {where}: {first['msg']}") from e


# ============================================================
# ARTIFACTS
# ============================================================

def write_world_artifacts(
    world: SyntheticWorld,
    out_dir: str | Path,
    pool_size: int = 0,
    pool_seed: int = 1,
) -> Path:
    """Maps, ground truth and (optionally) an unrelated descriptor pool."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_map(world.train_map, out / "map.ndjson")
    save_map(world.eval_map, out / "eval_map.ndjson")
    export.write_csv(out / "ground_truth_poses.csv", ground_truth_pose_rows(world.eval_map),
                     ["frame_id", "tx", "ty", "tz", "qw", "qx", "qy", "qz"])
    export.write_csv(out / "ground_truth_keypoints.csv", ground_truth_keypoint_rows(world.eval_map),
                     ["frame_id", "keypoint_idx", "landmark_id"])
    if pool_size:
        save_descriptors(generate_descriptor_pool(world.config, pool_size, pool_seed), out / "descriptor_pool.txt")
    return out


def map_descriptor_pool(sfm: SfMMap, size: int, seed: int) -> np.ndarray:
    """Up to ``size`` keypoint descriptors of a map, sampled without replacement."""
    blocks = [frame.descriptor_matrix(sfm.descriptor_bits) for frame in sfm.frames if frame.keypoints]
    pool = np.vstack(blocks) if blocks else np.zeros((0, sfm.descriptor_bits), dtype=np.uint8)
    if pool.shape[0] > size:
        rows = np.sort(np.random.default_rng(seed).choice(pool.shape[0], size=size, replace=False))
        pool = pool[rows]
    return pool


def vocabulary_pool(world_cfg: Optional[WorldConfig], sfm: SfMMap, cfg: VocabularyConfig) -> np.ndarray:
    if world_cfg is not None:
        return generate_descriptor_pool(world_cfg, cfg.pool_size, cfg.seed)
    return map_descriptor_pool(sfm, cfg.pool_size, cfg.seed)


# ============================================================
# MATCHING
# ============================================================

@dataclass(frozen=True, eq=False)
class MatchContext:
    """Everything a matcher needs besides the query frame."""
    sfm: SfMMap
    model: Optional[BoostedModel]
    config: MatchConfig
    inverted: Optional[InvertedFile] = None
    index: Optional[DescriptorIndex] = None
    projected: Optional[ProjectedIndex] = None


@dataclass(frozen=True)
class FrameMatch:
    frame_id: int
    ranked: tuple[tuple[int, ...], ...]
    matches: tuple[Correspondence2D3D, ...]
    match_ms: float


def build_match_context(
    sfm: SfMMap,
    model: Optional[BoostedModel],
    matchers: list[str],
    config: Optional[MatchConfig] = None,
) -> MatchContext:
    """
    Prepare indices for the requested matchers.

    Baselines search the same landmarks the classifier knows, or the whole
    map when no model is given.
    """
    config = config or MatchConfig()
    if model is None and any(m in BOOST_MATCHERS for m in matchers):
        raise InvalidConfigError("classifier matchers need a trained model")
    inverted = build_inverted_file(sfm, model.vocab, model.class_table) if "boost-inv" in matchers else None
    index = projected = None
    if {"hamming", "projected"} & set(matchers):
        ids = list(model.class_table.landmark_ids) if model is not None else None
        index = DescriptorIndex.from_map(sfm, ids)
        if "projected" in matchers:
            projected = ProjectedIndex.build(index, sfm.descriptor_bits, PROJECTED_DIMS, config.projection_seed)
    return MatchContext(sfm, model, config, inverted, index, projected)


def match_with(matcher: str, frame: Frame, eval_map: SfMMap, ctx: MatchContext) -> FrameMatch:
    """Rank and match every keypoint of one frame with one matcher."""
    start = time.perf_counter()
    top_k = ctx.config.top_k
    if matcher in BOOST_MATCHERS:
        inv = ctx.inverted if matcher == "boost-inv" else None
        ranked = rank_frame(frame, ctx.model, eval_map.camera_of(frame), inv, top_k)
        lists = tuple(ranked_landmarks(r, ctx.model) for r in ranked)
        matches = accepted_correspondences(ranked, ctx.model, ctx.config.margin, matcher)
    elif matcher == "hamming":
        neighbors = rank_hamming_baseline(frame, ctx.index, ctx.sfm.descriptor_bits, top_k)
        lists = tuple(nl.landmark_ids for nl in neighbors)
        matches = head_correspondences(neighbors, matcher)
    elif matcher == "projected":
        neighbors = rank_projected_baseline(frame, ctx.projected, ctx.sfm.descriptor_bits, top_k)
        lists = tuple(nl.landmark_ids for nl in neighbors)
        matches = head_correspondences(neighbors, matcher)
    else:
        raise InvalidConfigError(f"unknown matcher '{matcher}'")
    elapsed = 1000.0 * (time.perf_counter() - start)
    return FrameMatch(frame.frame_id, lists, tuple(matches), elapsed)


def retrieval_records(frame: Frame, match: FrameMatch, matcher: str) -> list[metrics.RetrievalRecord]:
    truth = frame.landmark_ids
    return [
        metrics.RetrievalRecord(frame.frame_id, i, int(truth[i]), match.ranked[i], matcher, match.match_ms)
        for i in range(len(frame.keypoints))
    ]


def localize_match(
    frame: Frame,
    match: FrameMatch,
    eval_map: SfMMap,
    sfm: SfMMap,
    config: RansacConfig,
) -> RansacResult:
    """RANSAC on one frame's matches, seeded per frame."""
    per_frame = config.model_copy(update={"seed": config.seed + frame.frame_id})
    return localize_correspondences(
        list(match.matches), frame, eval_map.camera_of(frame),
        lambda lm: np.asarray(sfm.landmarks[lm].position, dtype=np.float64),
        per_frame, match.match_ms,
    )


@dataclass
class Evaluation:
    retrieval: dict[str, list[metrics.RetrievalRecord]] = field(default_factory=dict)
    matches: list[Correspondence2D3D] = field(default_factory=list)
    poses: dict[str, list[metrics.PoseRecord]] = field(default_factory=dict)


def match_frames(
    frames: list[Frame],
    eval_map: SfMMap,
    ctx: MatchContext,
    matchers: list[str],
    freeze_timings: bool = False,
) -> dict[str, list[FrameMatch]]:
    out = {}
    for matcher in matchers:
        results = []
        for frame in tqdm(frames, desc=f"match {matcher}", disable=not SHOW_PROGRESS):
            fm = match_with(matcher, frame, eval_map, ctx)
            if freeze_timings:
                fm = FrameMatch(fm.frame_id, fm.ranked, fm.matches, 0.0)
            results.append(fm)
        out[matcher] = results
        logger.info("Matcher %s: %d correspondences over %d frames",
                    matcher, sum(len(fm.matches) for fm in results), len(results))
    return out


def localize_frames(
    frames: list[Frame],
    matched: dict[str, list[FrameMatch]],
    eval_map: SfMMap,
    sfm: SfMMap,
    config: RansacConfig,
    freeze_timings: bool = False,
) -> dict[str, list[metrics.PoseRecord]]:
    poses = {}
    for matcher, results in matched.items():
        records = []
        for frame, fm in tqdm(list(zip(frames, results)), desc=f"localize {matcher}", disable=not SHOW_PROGRESS):
            result = localize_match(frame, fm, eval_map, sfm, config)
            records.append(metrics.PoseRecord(
                frame_id=frame.frame_id,
                estimate=result.pose,
                truth=frame.pose,
                inliers=len(result.inliers),
                correspondences=result.correspondences,
                inlier_ratio=result.inlier_ratio,
                matcher=matcher,
                match_ms=0.0 if freeze_timings else fm.match_ms,
                ransac_ms=0.0 if freeze_timings else result.ransac_ms,
            ))
        poses[matcher] = records
    return poses


def evaluate(
    sfm: SfMMap,
    eval_map: SfMMap,
    model: Optional[BoostedModel],
    matchers: list[str],
    match_config: Optional[MatchConfig] = None,
    ransac_config: Optional[RansacConfig] = None,
    freeze_timings: bool = False,
) -> Evaluation:
    """
    Match and localize every evaluation frame with every matcher.

    Raises:
        ExperimentStageError: naming ``match`` or ``localize``
    """
    frames = sorted(eval_map.frames, key=lambda f: f.frame_id)
    result = Evaluation()
    with stage("match"):
        ctx = build_match_context(sfm, model, matchers, match_config)
        matched = match_frames(frames, eval_map, ctx, matchers, freeze_timings)
        for matcher, results in matched.items():
            result.retrieval[matcher] = [
                rec for frame, fm in zip(frames, results) for rec in retrieval_records(frame, fm, matcher)
            ]
            result.matches.extend(m for fm in results for m in fm.matches)
    with stage("localize"):
        result.poses = localize_frames(frames, matched, eval_map, sfm, ransac_config or RansacConfig(), freeze_timings)
    return result


# ============================================================
# REPORTS
# ============================================================

def write_reports(
    out_dir: str | Path,
    name: str,
    evaluation: Evaluation,
    budgets: list[int],
    max_m: float,
    max_deg: float,
    notes: Optional[dict[str, str]] = None,
) -> dict[str, list[dict]]:
    """
    Compute every metric and write the CSV reports and ``summary.txt``.

    Returns:
        Report name to rows, for the optional workbook
    """
    out = Path(out_dir)
    retrieval = {m: metrics.retrieval_summary(recs, budgets) for m, recs in evaluation.retrieval.items()}
    curves = {m: metrics.pose_pr_auc(recs, max_m, max_deg) for m, recs in evaluation.poses.items()}
    runtime, scatter = metrics.runtime_inlier_report(evaluation.poses)

    all_retrieval = [r for recs in evaluation.retrieval.values() for r in recs]
    all_poses = [
        {"matcher": m, **row}
        for m, recs in evaluation.poses.items()
        for row in export.pose_rows(recs)
    ]
    reports = {
        "correspondences": export.correspondence_rows(evaluation.matches),
        "poses": all_poses,
        "retrieval": export.retrieval_rows(all_retrieval),
        "retrieval_summary": [
            {
                "matcher": m,
                "queries": s["queries"],
                "tracked": s["tracked"],
                "precision_at_1": "" if s["precision_at_1"] is None else s["precision_at_1"],
                "mrr": "" if s["mrr"] is None else s["mrr"],
                "untracked_rejection": "" if s["untracked_rejection"] is None else s["untracked_rejection"],
            }
            for m, s in retrieval.items()
        ],
        "miss_rate": export.miss_rate_rows({m: s["miss_rate"] for m, s in retrieval.items()}),
        "pose_pr": export.pr_rows(curves),
        "pose_auc": [{"matcher": m, "auc": c.auc} for m, c in curves.items()],
        "runtime": export.runtime_rows(runtime),
        "runtime_scatter": scatter,
    }
    fields = {
        "correspondences": export.CORRESPONDENCE_FIELDS,
        "poses": ["matcher"] + export.POSE_FIELDS,
        "retrieval": export.RETRIEVAL_FIELDS,
        "retrieval_summary": ["matcher", "queries", "tracked", "precision_at_1", "mrr", "untracked_rejection"],
        "miss_rate": ["matcher", "budget", "fppq", "miss_rate"],
        "pose_pr": ["matcher", "threshold", "precision", "recall"],
        "pose_auc": ["matcher", "auc"],
        "runtime": ["matcher", "frames", "mean_match_ms", "mean_ransac_ms", "mean_inlier_ratio", "success_rate"],
        "runtime_scatter": ["matcher", "frame_id", "match_ms", "ransac_ms", "inlier_ratio", "inliers", "correspondences"],
    }
    for report, rows in reports.items():
        export.write_csv(out / f"{report}.csv", rows, fields[report])

    summary = metrics.generate_summary(name, retrieval, curves, runtime, notes)
    (out / "summary.txt").write_text(summary, encoding="utf-8")
    return reports


# ============================================================
# EXTRAS
# ============================================================

def vocab_sweep(
    sizes: list[int],
    pool: np.ndarray,
    sfm: SfMMap,
    eval_map: SfMMap,
    bank,
    spec: ExperimentSpec,
) -> list[dict]:
    """Context-only classifier per vocabulary size, scored on the eval queries."""
    rows = []
    training = spec.training.model_copy(update={"feature_mode": "context"})
    for k in sizes:
        vocab = train_vocabulary(pool, k, spec.vocabulary.seed, spec.vocabulary.max_iters)
        model = fit_model(sfm, bank, vocab, training)
        ctx = build_match_context(sfm, model, ["boost"], spec.match)
        records = []
        for frame in sorted(eval_map.frames, key=lambda f: f.frame_id):
            records += retrieval_records(frame, match_with("boost", frame, eval_map, ctx), "boost")
        try:
            p1, mrr = metrics.precision_at_1(records), metrics.mean_reciprocal_rank(records)
        except LocalizerError:
            p1 = mrr = ""
        rows.append({"k": k, "precision_at_1": p1, "mrr": mrr})
        logger.info("Vocabulary sweep k=%d: precision@1=%s mrr=%s", k, p1, mrr)
    return rows


def replay(sfm: SfMMap, model: BoostedModel, count: int, spec: ExperimentSpec) -> tuple[list[dict], dict[str, str]]:
    """Localize the first ``count`` training frames with the classifier."""
    frames = sorted(sfm.frames, key=lambda f: f.frame_id)[:count]
    ctx = build_match_context(sfm, model, ["boost"], spec.match)
    rows, errors = [], []
    for frame in frames:
        fm = match_with("boost", frame, sfm, ctx)
        result = localize_match(frame, fm, sfm, sfm, spec.ransac)
        t_err, r_err = pose_error(result.pose, frame.pose) if result.success else (float("inf"), float("inf"))
        errors.append(t_err)
        rows.append({
            "frame_id": frame.frame_id,
            "success": int(result.success),
            "translation_error_m": t_err,
            "rotation_error_deg": r_err,
            "inliers": len(result.inliers),
        })
    within = sum(1 for e in errors if e < 1e-3)
    notes = {"replay_frames": str(len(frames)), "replay_within_1mm": str(within)}
    return rows, notes


# ============================================================
# RUN
# ============================================================

def run_experiment(spec: ExperimentSpec | str | Path) -> Path:
    """
    Execute a full experiment and write its report directory.

    Args:
        spec: Validated spec or the path of a spec file

    Returns:
        The report directory

    Raises:
        InvalidConfigError: the spec file is invalid
        ExperimentStageError: a stage failed; carries the stage name and cause
    """
    if not isinstance(spec, ExperimentSpec):
        spec = load_spec(spec)
    out = Path(spec.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    notes: dict[str, str] = {}
    logger.info("Running experiment %s into %s", spec.name, out)

    with stage("synth"):
        if spec.world is not None:
            world = generate_world(spec.world)
            write_world_artifacts(world, out)
            sfm, eval_map = world.train_map, world.eval_map
        else:
            sfm, eval_map = load_map(spec.map_path), load_map(spec.eval_map_path)
        notes["map_fingerprint"] = map_fingerprint(sfm)

    with stage("vocab"):
        pool = vocabulary_pool(spec.world, sfm, spec.vocabulary)
        if spec.model_path is None:
            vocab = train_vocabulary(pool, spec.vocabulary.k, spec.vocabulary.seed, spec.vocabulary.max_iters)
            save_vocabulary(vocab, out / "vocabulary.txt")

    with stage("train"):
        if spec.model_path is not None:
            if not Path(spec.model_path).is_file():
                raise FileNotFoundError(f"model file not found: {spec.model_path}")
            model = load_model(spec.model_path)
            if model.map_fingerprint and model.map_fingerprint != notes["map_fingerprint"]:
                logger.warning("Model %s was trained on map %s, not on this map (%s)",
                               spec.model_path, model.map_fingerprint, notes["map_fingerprint"])
            bank = model.bank
            save_vocabulary(model.vocab, out / "vocabulary.txt")
        else:
            bank = generate_regions(spec.regions.count, spec.regions)
            model = fit_model(sfm, bank, vocab, spec.training)
            save_model(model, out / "model.json")
        save_region_bank(bank, out / "regions.txt")
        export.write_csv(out / "training_log.csv", export.training_log_rows(model.training_log),
                         export.TRAINING_LOG_FIELDS)
        usage = model.feature_usage()
        notes.update({f"usage_{key}": str(value) for key, value in usage.items()})
        notes["learners"] = str(len(model.learners))
        if model.training_log:
            notes["final_J"] = repr(model.training_log[-1].J)

    evaluation = evaluate(sfm, eval_map, model, list(spec.matchers), spec.match, spec.ransac, spec.freeze_timings)

    with stage("metrics"):
        extra_sheets = {}
        if spec.replay_frames:
            rows, replay_notes = replay(sfm, model, spec.replay_frames, spec)
            export.write_csv(out / "replay.csv", rows,
                             ["frame_id", "success", "translation_error_m", "rotation_error_deg", "inliers"])
            notes.update(replay_notes)
            extra_sheets["replay"] = rows
        if spec.vocab_sweep:
            rows = vocab_sweep(spec.vocab_sweep, pool, sfm, eval_map, bank, spec)
            export.write_csv(out / "vocab_sweep.csv", rows, ["k", "precision_at_1", "mrr"])
            extra_sheets["vocab_sweep"] = rows
        reports = write_reports(out, spec.name, evaluation, spec.budgets,
                                spec.pose_threshold_m, spec.pose_threshold_deg, notes)
        if spec.export_excel:
            sheets = {"training_log": export.training_log_rows(model.training_log), **reports, **extra_sheets}
            (out / "report.xlsx").write_bytes(export.export_to_excel(sheets, title=spec.name))

    (out / "spec.json").write_text(json.dumps(spec.model_dump(mode="json"), indent=2, sort_keys=True) + "\n",
                                   encoding="utf-8")
    logger.info("Experiment %s finished", spec.name)
    return out
