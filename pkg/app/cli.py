"""
Command Line
============
``python -m app.cli <command>``; exit code 0 on success, 1 when a stage
fails, 2 for invalid arguments, configs or spec files.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

from pydantic import ValidationError

from app.core.errors import ExperimentStageError, InvalidBoundsError, InvalidConfigError, LocalizerError
from app.core.logging import setup_logging
from app.models.configs import MatchConfig, RansacConfig, RegionConfig, TrainingConfig, WorldConfig
from app.services import export
from app.services.bits import load_descriptors
from app.services.boosting import fit_model, load_model, save_model
from app.services.context import generate_regions, load_region_bank, save_region_bank
from app.services.experiment import (
    build_match_context,
    evaluate,
    localize_frames,
    map_descriptor_pool,
    match_frames,
    run_experiment,
    stage,
    write_reports,
    write_world_artifacts,
)
from app.services.map_model import load_map
from app.services.synthworld import generate_world
from app.services.vocabulary import load_vocabulary, save_vocabulary, train_vocabulary

logger = logging.getLogger("app.cli")

EXIT_OK, EXIT_STAGE, EXIT_SPEC = 0, 1, 2


def _load_config(model, path: str | None, overrides: dict):
    data = json.loads(Path(path).read_text(encoding="utf-8")) if path else {}
    data.update({k: v for k, v in overrides.items() if v is not None})
    return model.model_validate(data)


# ============================================================
# COMMANDS
# ============================================================

def cmd_synth(args) -> None:
    cfg = _load_config(WorldConfig, args.config, {"seed": args.seed})
    with stage("synth"):
        world = generate_world(cfg)
        write_world_artifacts(world, args.out, args.pool_size, args.pool_seed)
    print(f"Wrote synthetic world to {args.out}")


def cmd_train_vocab(args) -> None:
    with stage("vocab"):
        if args.descriptors:
            pool = load_descriptors(args.descriptors)
        else:
            pool = map_descriptor_pool(load_map(args.map), args.pool_size, args.seed)
        vocab = train_vocabulary(pool, args.k, args.seed, args.max_iters)
        save_vocabulary(vocab, args.out)
    print(f"Wrote {vocab.k}-word vocabulary to {args.out}")


def cmd_gen_regions(args) -> None:
    cfg = _load_config(RegionConfig, args.config, {"count": args.count, "seed": args.seed})
    bank = generate_regions(cfg.count, cfg)
    save_region_bank(bank, args.out)
    print(f"Wrote {len(bank)} regions to {args.out}")


def cmd_train(args) -> None:
    cfg = _load_config(TrainingConfig, args.config, {
        "rounds": args.rounds,
        "landmark_budget": args.landmark_budget,
        "feature_mode": args.feature_mode,
        "seed": args.seed,
    })
    with stage("train"):
        sfm = load_map(args.map)
        model = fit_model(sfm, load_region_bank(args.regions), load_vocabulary(args.vocab), cfg)
        save_model(model, args.out)
        log_path = Path(args.out).with_name(Path(args.out).stem + "_training_log.csv")
        export.write_csv(log_path, export.training_log_rows(model.training_log), export.TRAINING_LOG_FIELDS)
    print(f"Wrote model with {len(model.learners)} learners to {args.out}")


def _query_inputs(args):
    sfm = load_map(args.map)
    model = load_model(args.model) if args.model else None
    frames_map = load_map(args.frames)
    frames = sorted(frames_map.frames, key=lambda f: f.frame_id)
    return sfm, model, frames_map, frames


def cmd_match(args) -> None:
    match_cfg = MatchConfig(top_k=args.top_k, margin=args.margin)
    with stage("match"):
        sfm, model, frames_map, frames = _query_inputs(args)
        ctx = build_match_context(sfm, model, [args.matcher], match_cfg)
        matched = match_frames(frames, frames_map, ctx, [args.matcher])
        matches = [m for fm in matched[args.matcher] for m in fm.matches]
        export.write_csv(args.out, export.correspondence_rows(matches), export.CORRESPONDENCE_FIELDS)
    print(f"Wrote {len(matches)} correspondences to {args.out}")


def cmd_localize(args) -> None:
    match_cfg = MatchConfig(top_k=args.top_k, margin=args.margin)
    ransac_cfg = RansacConfig(max_iters=args.max_iters, inlier_threshold_px=args.threshold_px, seed=args.seed)
    with stage("localize"):
        sfm, model, frames_map, frames = _query_inputs(args)
        ctx = build_match_context(sfm, model, [args.matcher], match_cfg)
        matched = match_frames(frames, frames_map, ctx, [args.matcher])
        poses = localize_frames(frames, matched, frames_map, sfm, ransac_cfg)
        export.write_csv(args.out, export.pose_rows(poses[args.matcher]), export.POSE_FIELDS)
    found = sum(r.estimate is not None for r in poses[args.matcher])
    print(f"Localized {found}/{len(frames)} frames; wrote {args.out}")


def cmd_eval(args) -> None:
    sfm, model, frames_map, _ = _query_inputs(args)
    evaluation = evaluate(sfm, frames_map, model, args.matchers,
                          MatchConfig(top_k=args.top_k), RansacConfig(seed=args.seed))
    with stage("metrics"):
        Path(args.out).mkdir(parents=True, exist_ok=True)
        write_reports(args.out, args.name, evaluation, args.budgets, args.threshold_m, args.threshold_deg)
    print((Path(args.out) / "summary.txt").read_text(encoding="utf-8"), end="")


def cmd_run(args) -> None:
    out = run_experiment(args.spec)
    print(f"Experiment finished; reports in {out}")


def cmd_serve(args) -> None:
    import uvicorn

    uvicorn.run("app.main:app", host=args.host, port=args.port, reload=False)


# ============================================================
# PARSER
# ============================================================

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="localizer", description="Landmark-classification localization toolkit")
    parser.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING (default from LOG_LEVEL)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic world with ground truth")
    p.add_argument("--config", help="WorldConfig JSON")
    p.add_argument("--seed", type=int)
    p.add_argument("--pool-size", type=int, default=20000, help="unrelated descriptors for vocabulary training")
    p.add_argument("--pool-seed", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train-vocab", help="cluster binary descriptors into visual words")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--descriptors", help="hex descriptor file, one per line")
    src.add_argument("--map", help="sample the descriptors of a map instead")
    p.add_argument("--k", type=int, default=16)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--max-iters", type=int, default=50)
    p.add_argument("--pool-size", type=int, default=20000)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_vocab)

    p = sub.add_parser("gen-regions", help="draw the random context-region bank")
    p.add_argument("--config", help="RegionConfig JSON")
    p.add_argument("--count", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_regions)

    p = sub.add_parser("train", help="train the boosted landmark classifier")
    p.add_argument("--map", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--regions", required=True)
    p.add_argument("--config", help="TrainingConfig JSON")
    p.add_argument("--rounds", type=int)
    p.add_argument("--landmark-budget", type=int)
    p.add_argument("--feature-mode", choices=["full", "context", "descriptor"])
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    for name, func, help_text in (
        ("match", cmd_match, "2D-3D correspondences for query frames"),
        ("localize", cmd_localize, "camera poses for query frames"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--map", required=True, help="training map (the database)")
        p.add_argument("--model", help="trained model; required by boost matchers")
        p.add_argument("--frames", required=True, help="map file holding the query frames")
        p.add_argument("--matcher", choices=["boost", "boost-inv", "hamming", "projected"], default="boost")
        p.add_argument("--top-k", type=int, default=10)
        p.add_argument("--margin", type=float, default=0.0)
        p.add_argument("--out", required=True)
        if name == "localize":
            p.add_argument("--max-iters", type=int, default=500)
            p.add_argument("--threshold-px", type=float, default=2.0)
            p.add_argument("--seed", type=int, default=0)
        p.set_defaults(func=func)

    p = sub.add_parser("eval", help="match, localize and score query frames with ground truth")
    p.add_argument("--map", required=True)
    p.add_argument("--model")
    p.add_argument("--frames", required=True)
    p.add_argument("--matchers", nargs="+", default=["boost", "boost-inv", "hamming", "projected"],
                   choices=["boost", "boost-inv", "hamming", "projected"])
    p.add_argument("--budgets", nargs="+", type=int, default=[1, 2, 5, 10, 20, 50])
    p.add_argument("--top-k", type=int, default=50)
    p.add_argument("--threshold-m", type=float, default=0.2)
    p.add_argument("--threshold-deg", type=float, default=5.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--name", default="eval")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("run", help="run a declarative experiment spec")
    p.add_argument("spec")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("serve", help="serve the HTTP API")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_SPEC if e.code else EXIT_OK
    setup_logging(args.log_level)
    try:
        args.func(args)
    except (InvalidConfigError, InvalidBoundsError, ValidationError, json.JSONDecodeError) as e:
        logger.error("Invalid configuration: %s", e)
        return EXIT_SPEC
    except ExperimentStageError as e:
        logger.error("%s", e)
        return EXIT_STAGE
    except (LocalizerError, OSError) as e:
        logger.error("%s", e)
        return EXIT_STAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
