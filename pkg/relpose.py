#!/usr/bin/env python
"""
Relative camera pose laboratory: synthetic data, overlapping pairs, Siamese
regressor training/prediction, essential-matrix baseline and evaluation.

Every subcommand writes its outputs and a config.json snapshot of its
parameters under --out.

Examples:

    python relpose.py gen-data --n 100 --seed 7 --out data/
    python relpose.py pairs --scene data/scene.json --near 0.1 --far 10 --out pairs/
    python relpose.py train --train data/train.jsonl --val data/val.jsonl --preset tiny --epochs 5 --out run/
    python relpose.py predict --weights run/weights.rpw --manifest data/val.jsonl --out pred/
    python relpose.py eval --manifest data/val.jsonl --predictions pred/predictions.jsonl --out eval/
    python relpose.py baseline --synthetic 100 --noise 0.5 --outliers 0.3 --out base/
    python relpose.py report --reports eval/report.json base/report.json --out cmp/

Exit status: 0 success, 1 operational error, 2 usage error.
"""

import argparse
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, replace

import coloredlogs

import camera
import epipolar
import evaluation
import regressor
import synthdata
import util
from camera import CameraIntrinsics
from evaluation import PairError
from geom import relative_pose, roe, rte
from util import RelPoseError

logger = logging.getLogger(__name__)

LOGGING_LEVEL = "INFO"
LOGGING_FMT = "%(asctime)s %(levelname)-8s %(message)s"
LOGGING_DATE = "%a, %d %b %Y %H:%M:%S"

CONFIG_FILE = "config.json"
WEIGHTS_FILE = "weights.rpw"
TRAIN_LOG_FILE = "train_log.csv"
PREDICTIONS_FILE = "predictions.jsonl"
PAIRS_FILE = "pairs.csv"
ADJACENCY_FILE = "adjacency.csv"
REPORT_STEM = "report"
POSE_FILE = "pose.txt"

TINY_BATCH = 32
FAILED_ERROR_DEG = 180.0  # error charged to pairs where the baseline finds no pose

# synthetic baseline scenes: 1280x960 camera, points in a box 4 units ahead
BASELINE_WIDTH = 1280
BASELINE_HEIGHT = 960
BASELINE_FOCAL = 1600.0
BASELINE_DEPTH = 4.0


@dataclass
class RunConfig:
    command: str
    seed: int
    out: str
    parameters: dict = field(default_factory=dict)


def write_run_config(args):
    params = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "command", "seed", "out", "debug")}
    config = RunConfig(args.command, args.seed, args.out, params)
    util.write_json(os.path.join(args.out, CONFIG_FILE), asdict(config))


def cmd_gen_data(args):
    config = synthdata.DatasetConfig(
        width=args.width,
        height=args.height,
        focal=args.focal,
        max_rotation_deg=args.max_rotation,
        max_baseline_ratio=args.max_baseline,
        shading=args.shading,
        scene=args.scene,
    )
    synthdata.build_dataset(args.n, args.split, config, args.seed, args.out, args.threads)


def cmd_pairs(args):
    cameras = camera.read_scene(args.scene)
    pairs = camera.overlapping_pairs(cameras, args.near, args.far, args.threads)
    camera.write_pairs(os.path.join(args.out, PAIRS_FILE), pairs)
    adjacency = camera.adjacency_matrix(pairs, len(cameras))
    ids = [c.id for c in cameras]
    rows = [{"id": ids[i], **{ids[j]: int(adjacency[i, j]) for j in range(len(ids))}} for i in range(len(ids))]
    util.write_csv(os.path.join(args.out, ADJACENCY_FILE), ["id"] + ids, rows)
    logger.info(f"{len(pairs)} overlapping pairs written to {args.out}")


def cmd_train(args):
    config = regressor.get_preset(args.preset, args.beta)
    batch = args.batch if args.batch else (TINY_BATCH if args.preset == "tiny" else 128)
    cfg = regressor.TrainConfig(
        lr=args.lr,
        weight_decay=args.wd,
        batch_size=batch,
        epochs=args.epochs,
        seed=args.seed,
        beta=config.beta,
        solver=args.solver,
        momentum=args.momentum,
    )
    model = regressor.build_model(config, args.seed)
    if args.epochs > 0:
        if not args.train or not args.val:
            raise regressor.RegressorError("training needs --train and --val manifests")
        train_records = synthdata.read_manifest(args.train)
        val_records = synthdata.read_manifest(args.val)
        logger.info(f"Training {config.name} on {len(train_records)} pairs, validating on {len(val_records)}")
        regressor.train(model, train_records, val_records, cfg, os.path.join(args.out, TRAIN_LOG_FILE))
    else:
        regressor.write_train_log(os.path.join(args.out, TRAIN_LOG_FILE), [])
    regressor.save_weights(model, os.path.join(args.out, WEIGHTS_FILE))


def cmd_predict(args):
    config = regressor.get_preset(args.preset) if args.preset else None
    model = regressor.load_weights(args.weights, config)
    if args.test_size is not None:
        model.config = replace(model.config, test_size=args.test_size)
    records = synthdata.read_manifest(args.manifest)
    images = regressor.PairImages(records, model.config.crop_policy(train=False))
    poses = regressor.evaluate_records(model, images)
    predictions = [rec._replace(pose=pose) for rec, pose in zip(records, poses)]
    synthdata.write_manifest(os.path.join(args.out, PREDICTIONS_FILE), predictions)
    logger.info(f"Predicted {len(predictions)} relative poses with {model.config.name}")


def _baseline_pose(c, ransac):
    try:
        pose, result = epipolar.estimate_relative_pose(c, ransac)
    except epipolar.EpipolarError as e:
        logger.warning(f"Baseline failed: {e}")
        return None
    logger.debug(f"{int(result.inlier_mask.sum())}/{len(c)} inliers in {result.iterations} iterations")
    return pose


def _baseline_error(k, pose, gt, method, scene="all"):
    if pose is None:
        return PairError(k, method, FAILED_ERROR_DEG, FAILED_ERROR_DEG, scene)
    return PairError(k, method, roe(pose.dq, gt.dq), rte(pose.dt, gt.dt), scene)


def baseline_intrinsics():
    return CameraIntrinsics(
        BASELINE_FOCAL,
        BASELINE_FOCAL,
        (BASELINE_WIDTH - 1) / 2.0,
        (BASELINE_HEIGHT - 1) / 2.0,
        BASELINE_WIDTH,
        BASELINE_HEIGHT,
    )


def synthetic_baseline_errors(n_scenes, ransac, seed, count=20, noise_px=0.0, outlier_ratio=0.0, max_rotation_deg=10.0):
    """Baseline errors on random 3D-box scenes with known ground truth."""
    K = baseline_intrinsics()
    errors = []
    for k in range(n_scenes):
        scene_seed = int(util.make_rng(seed, "baseline-scene", k).integers(0, 2**63 - 1))
        poses = synthdata.sample_pair_pose(scene_seed, max_rotation_deg, 0.3, distance=BASELINE_DEPTH)
        c = synthdata.make_box_correspondences(
            poses, K, count, noise_px, outlier_ratio, scene_seed, center_depth=BASELINE_DEPTH
        )
        pose = _baseline_pose(c, replace(ransac, seed=scene_seed))
        errors.append(_baseline_error(k, pose, relative_pose(*poses), "baseline"))
    return errors


def _match_intrinsics(K, match_size):
    """Intrinsics in the frame the matches were measured in (--match-size W H, if given)."""
    if match_size is None:
        return K
    return camera.scale_intrinsics(K, *match_size)


def single_pair_baseline(args, ransac):
    """Pose of one match file, printed as `qw qx qy qz tx ty tz` and saved to pose.txt."""
    if not args.scene or not args.cameras:
        raise RelPoseError("--match-file needs --scene and --cameras")
    cameras = {c.id: c for c in camera.read_scene(args.scene)}
    missing = [i for i in args.cameras if i not in cameras]
    if missing:
        raise RelPoseError(f"cameras {missing} not found in {args.scene}")
    K1, K2 = (_match_intrinsics(cameras[i].intrinsics, args.match_size) for i in args.cameras)
    pose, result = epipolar.estimate_relative_pose(epipolar.load_matches(args.match_file, K1, K2), ransac)
    line = " ".join(repr(float(v)) for v in pose.as_vector())
    print(line, flush=True)
    with open(os.path.join(args.out, POSE_FILE), "w") as f:
        f.write(line + "\n")
    logger.info(f"{int(result.inlier_mask.sum())}/{len(result.inlier_mask)} inliers after {result.iterations} iterations")


def cmd_baseline(args):
    ransac = epipolar.RansacConfig(args.threshold, args.confidence, args.max_iters, args.seed)
    if args.match_file:
        single_pair_baseline(args, ransac)
        return
    if args.synthetic:
        errors = synthetic_baseline_errors(
            args.synthetic, ransac, args.seed, args.count, args.noise, args.outliers, args.max_rotation
        )
    else:
        if not args.manifest or not args.matches:
            raise RelPoseError("baseline needs --synthetic N or both --manifest and --matches")
        errors = []
        for k, rec in enumerate(synthdata.read_manifest(args.manifest)):
            if rec.intrinsics is None:
                raise RelPoseError(f"record {k} of {args.manifest} has no intrinsics")
            path = os.path.join(args.matches, f"{k:06d}.csv")
            K = _match_intrinsics(rec.intrinsics, args.match_size)
            c = epipolar.load_matches(path, K, K)
            errors.append(_baseline_error(k, _baseline_pose(c, ransac), rec.pose, "baseline", rec.scene))
    failed = sum(1 for e in errors if e.roe_deg == FAILED_ERROR_DEG and e.rte_deg == FAILED_ERROR_DEG)
    if failed:
        logger.warning(f"Baseline found no pose for {failed}/{len(errors)} pairs")
    evaluation.write_outputs(evaluation.build_report(errors), args.out, REPORT_STEM)


def cmd_eval(args):
    records = synthdata.read_manifest(args.manifest)
    errors = []
    for path in args.predictions:
        # without --method, a prediction file is tagged with the name of its folder
        if args.method and len(args.predictions) == 1:
            method = args.method
        else:
            method = os.path.basename(os.path.dirname(os.path.abspath(path)))
        predictions = [r.pose for r in synthdata.read_manifest(path)]
        errors.extend(evaluation.evaluate(predictions, records, method))
    evaluation.write_outputs(evaluation.build_report(errors), args.out, REPORT_STEM)


def cmd_report(args):
    errors = [e for path in args.reports for e in evaluation.read_report(path).errors]
    evaluation.write_outputs(evaluation.build_report(errors), args.out, REPORT_STEM)


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", required=True, help="output directory.")
    common.add_argument("--seed", type=int, default=0, help="run seed (default: %(default)s).")
    common.add_argument(
        "--threads", type=int, default=None, help=f"worker count (default: ${util.ENV_THREADS} or 1)."
    )
    common.add_argument("--debug", action="store_true", help="debug mode logging.")

    ransac = argparse.ArgumentParser(add_help=False)
    ransac.add_argument("--threshold", type=float, default=1e-3, help="Sampson distance threshold, normalized units (default: %(default)s).")
    ransac.add_argument("--confidence", type=float, default=0.999, help="RANSAC confidence (default: %(default)s).")
    ransac.add_argument("--max-iters", type=int, default=10000, help="RANSAC iteration cap (default: %(default)s).")

    parser = argparse.ArgumentParser(description="Relative camera pose laboratory.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="generate a synthetic pair dataset.")
    p.add_argument("--n", type=int, default=100, help="number of pairs (default: %(default)s).")
    p.add_argument("--split", type=float, default=0.8, help="training fraction (default: %(default)s).")
    p.add_argument("--width", type=int, default=64, help="image width (default: %(default)s).")
    p.add_argument("--height", type=int, default=64, help="image height (default: %(default)s).")
    p.add_argument("--focal", type=float, default=64.0, help="focal length in pixels (default: %(default)s).")
    p.add_argument("--max-rotation", type=float, default=30.0, help="max relative rotation, degrees (default: %(default)s).")
    p.add_argument("--max-baseline", type=float, default=0.3, help="max baseline / plane distance (default: %(default)s).")
    p.add_argument("--scene", default="synthetic", help="scene tag stored in the manifests (default: %(default)s).")
    p.add_argument(
        "--shading", type=float, default=synthdata.DEFAULT_SHADING,
        help="weight of the plane-anchored color field (default: %(default)s).",
    )
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pairs", parents=[common], help="enumerate cameras with overlapping frusta.")
    p.add_argument("--scene", required=True, help="scene JSON file.")
    p.add_argument("--near", type=float, default=camera.DEFAULT_NEAR, help="near depth (default: %(default)s).")
    p.add_argument("--far", type=float, default=camera.DEFAULT_FAR, help="far depth (default: %(default)s).")
    p.set_defaults(func=cmd_pairs)

    p = sub.add_parser("train", parents=[common], help="train a Siamese regressor.")
    p.add_argument("--train", help="training manifest.")
    p.add_argument("--val", help="validation manifest.")
    p.add_argument("--preset", choices=sorted(regressor.PRESETS), default="tiny", help="network (default: %(default)s).")
    p.add_argument("--beta", type=float, default=10.0, help="orientation loss weight (default: %(default)s).")
    p.add_argument("--lr", type=float, default=1e-4, help="learning rate (default: %(default)s).")
    p.add_argument("--wd", type=float, default=1e-5, help="weight decay (default: %(default)s).")
    p.add_argument("--batch", type=int, default=None, help=f"batch size (default: 128, {TINY_BATCH} for tiny).")
    p.add_argument("--epochs", type=int, default=15, help="epochs (default: %(default)s).")
    p.add_argument("--solver", choices=["adam", "sgd"], default="adam", help="optimizer (default: %(default)s).")
    p.add_argument("--momentum", type=float, default=0.9, help="SGD momentum (default: %(default)s).")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", parents=[common], help="predict relative poses for a manifest.")
    p.add_argument("--weights", required=True, help="weight file.")
    p.add_argument("--manifest", required=True, help="manifest of pairs to predict.")
    p.add_argument("--test-size", type=int, default=None, help="center crop size, 0 for full images (SPP presets).")
    p.add_argument(
        "--preset", choices=sorted(regressor.PRESETS), default=None,
        help="architecture of a weight file without model metadata.",
    )
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("baseline", parents=[common, ransac], help="essential-matrix baseline.")
    p.add_argument("--synthetic", type=int, default=0, help="number of random 3D-box scenes.")
    p.add_argument("--manifest", help="manifest with ground truth and intrinsics.")
    p.add_argument("--matches", help="folder with one <index>.csv match file per record.")
    p.add_argument("--match-file", help="single match CSV (u1,v1,u2,v2); needs --scene and --cameras.")
    p.add_argument("--scene", help="scene JSON holding the intrinsics of the two cameras.")
    p.add_argument("--cameras", nargs=2, metavar="ID", help="ids of the first and second camera in the scene.")
    p.add_argument(
        "--match-size", type=int, nargs=2, metavar=("W", "H"), default=None,
        help="image size the matches were measured at, if the images were resized.",
    )
    p.add_argument("--count", type=int, default=20, help="correspondences per synthetic scene (default: %(default)s).")
    p.add_argument("--noise", type=float, default=0.0, help="pixel noise sigma (default: %(default)s).")
    p.add_argument("--outliers", type=float, default=0.0, help="outlier ratio (default: %(default)s).")
    p.add_argument("--max-rotation", type=float, default=10.0, help="max relative rotation, degrees (default: %(default)s).")
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("eval", parents=[common], help="score predictions against a manifest.")
    p.add_argument("--manifest", required=True, help="ground-truth manifest.")
    p.add_argument("--predictions", nargs="+", required=True, help="prediction files (one per method).")
    p.add_argument("--method", default=None, help="method tag for a single prediction file.")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", parents=[common], help="merge evaluation reports.")
    p.add_argument("--reports", nargs="+", required=True, help="report JSON files.")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)

    coloredlogs.install(level="DEBUG" if args.debug else LOGGING_LEVEL, fmt=LOGGING_FMT, datefmt=LOGGING_DATE)
    logger.info(f"Running {args.command} on: {util.get_time_now()}")
    try:
        os.makedirs(args.out, exist_ok=True)
        write_run_config(args)
        args.func(args)
    except RelPoseError as e:
        logger.error(str(e))
        return 1
    except OSError as e:
        logger.error(f"[relpose] {e}")
        return 1
    except KeyboardInterrupt:
        logger.warning("Interrupted by user.")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
