"""Command-line entry point: ``gl2steer {gen,steer-bench,match,train,selftest}``.

Every subcommand is a pure function of its flags and input files.  Flags may
also come from a plain ``key=value`` file passed with ``--config``; flags on
the command line win.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import fileio
from .descriptors import describe, harris_detect, jet_steerer_spec, keypoint_array
from .geometry import Affine2, Homography, random_homography
from .matching import (
    DUAL_SOFTMAX_THRESHOLD,
    INV_TEMPERATURE,
    PIXEL_TOL,
    correct_mask,
    max_similarity,
    mnn_match,
    similarity_l2,
    similarity_steered,
)
from .pipelines import BENCH_ARMS, PIPELINES, PipelineConfig, steer_bench, totals
from .raster import read_pgm, write_pgm
from .repr_gl2 import FAULTS, injected_fault
from .robust_estimation import AUC_THRESHOLDS, auc, corner_error, ransac_homography
from .scene_synth import render, save_scene
from .steer_train import DEFAULT_DIFFICULTY, BatchConfig, TrainConfig, candidate_affines, initial_state, train

log = logging.getLogger("gl2steer")

BENCH_COLUMNS = ("seed", "arm", "oracle", "identity", "n_gt", "n_A", "n_B")
_BOOL_FLAGS = {"identity_warp", "quick"}


# --------------------------------------------------------------------------
# shared configuration


def pipeline_config(args) -> PipelineConfig:
    return PipelineConfig(
        image_size=args.image_size,
        n_blobs=args.n_blobs,
        top_k=args.top_k,
        inv_temperature=args.inv_temperature,
        threshold=args.dual_softmax_threshold,
        pixel_tol=args.pixel_tol,
    )


def read_config_file(path) -> dict:
    """``key=value`` lines; ``#`` starts a comment; dashes in keys become underscores."""
    out = {}
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{n}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key in _BOOL_FLAGS:
            value = value.lower() in ("1", "true", "yes", "on")
        out[key] = value
    return out


def random_warp(seed: int, cfg: PipelineConfig, identity: bool = False) -> Homography:
    if identity:
        return Homography.from_affine(Affine2(np.eye(2), np.zeros(2)))
    return random_homography(DEFAULT_DIFFICULTY, [int(seed), 3], center=cfg.center)


def generate_pair(args):
    cfg = pipeline_config(args)
    phi = random_warp(args.seed, cfg, getattr(args, "identity_warp", False))
    pair = PIPELINES[args.descriptor](args.seed, phi, cfg)
    if pair.image_B is None:  # the exact pipeline does not need B's pixels
        n = cfg.image_size
        pair.image_B = render(pair.scene, n, n, warp=pair.phi)
    return pair, cfg


def write_views(out: Path, pair, convention: str) -> None:
    meta = pair.meta
    write_pgm(out / "view_A.pgm", pair.image_A)
    write_pgm(out / "view_B.pgm", pair.image_B)
    fileio.write_keypoints_tsv(out / "keypoints_A.tsv", pair.kps_A, meta.get("scores_A"))
    fileio.write_keypoints_tsv(out / "keypoints_B.tsv", pair.kps_B, meta.get("scores_B"))
    fileio.write_descriptors_tsv(out / "descriptors_A.tsv", pair.kps_A, pair.descs_A, meta.get("scores_A"), convention)
    fileio.write_descriptors_tsv(out / "descriptors_B.tsv", pair.kps_B, pair.descs_B, meta.get("scores_B"), convention)


def homography_record(pair) -> dict:
    rec = fileio.warp_to_dict(pair.phi)
    rec["size_A"] = [pair.image_A.width, pair.image_A.height]
    rec["size_B"] = [pair.image_B.width, pair.image_B.height]
    return rec


# --------------------------------------------------------------------------
# subcommands


def cmd_gen(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pair, _ = generate_pair(args)
    spec = jet_steerer_spec()
    save_scene(out / "scene.json", pair.scene)
    write_views(out, pair, spec.convention)
    fileio.write_json(out / "homography.json", homography_record(pair))
    fileio.write_gt_tsv(out / "gt_matches.tsv", pair.gt)
    print(f"gen: {len(pair.kps_A)} / {len(pair.kps_B)} keypoints, {len(pair.gt)} gt matches -> {out}")
    return 0


def cmd_steer_bench(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = pipeline_config(args)
    spec = fileio.load_checkpoint(args.checkpoint).spec if args.checkpoint else jet_steerer_spec()
    seeds = range(args.seed, args.seed + args.n_seeds)
    rows = steer_bench(args.descriptor, spec, seeds, cfg)
    fileio.write_csv(out / "steer_bench.csv", BENCH_COLUMNS, [[r[c] for c in BENCH_COLUMNS] for r in rows])
    arms = [a.name for a in BENCH_ARMS]
    tot = {k: totals(rows, k) for k in ("oracle", "identity")}
    fileio.write_csv(
        out / "steer_bench_totals.csv",
        ["arm", "oracle", "identity"],
        [[a, tot["oracle"][a], tot["identity"][a]] for a in arms],
    )
    fileio.bar_chart_svg(
        out / "steer_bench.svg",
        arms,
        ["oracle steerer", "identity"],
        [[tot["oracle"][a], tot["identity"][a]] for a in arms],
        title=f"correct matches, {args.descriptor} descriptors, {args.n_seeds} seeds",
        ylabel="correct matches",
    )
    for a in arms:
        print(f"{a}\toracle={tot['oracle'][a]}\tidentity={tot['identity'][a]}")
    return 0


def _describe_pgm(path, cfg: PipelineConfig):
    img = read_pgm(path)
    kps = harris_detect(img, top_k=cfg.top_k, nms_radius=cfg.nms_radius)
    descs, keep = describe(img, kps, cfg.descriptor_unit)
    scores = np.array([kps[i].score for i in keep])
    return img, keypoint_array(kps)[keep].reshape(-1, 2), cfg.descriptor_gain * descs, scores


def cmd_match(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = pipeline_config(args)
    phi = gt = None
    if args.image_a:
        if args.descriptor != "moment":
            raise SystemExit("match: jet descriptors need the analytic scene; use --seed generation")
        img_A, kps_A, descs_A, sc_A = _describe_pgm(args.image_a, cfg)
        img_B, kps_B, descs_B, sc_B = _describe_pgm(args.image_b or args.image_a, cfg)
        if args.homography:
            phi = fileio.warp_from_dict(fileio.read_json(args.homography))
        elif not args.image_b:
            phi = Homography.from_affine(Affine2(np.eye(2), np.zeros(2)))
    else:
        pair, cfg = generate_pair(args)
        img_A, img_B = pair.image_A, pair.image_B
        kps_A, kps_B, descs_A, descs_B = pair.kps_A, pair.kps_B, pair.descs_A, pair.descs_B
        sc_A, sc_B = pair.meta.get("scores_A"), pair.meta.get("scores_B")
        phi, gt = pair.phi, pair.gt
        fileio.write_json(out / "homography.json", homography_record(pair))

    state = fileio.load_checkpoint(args.checkpoint) if args.checkpoint else None
    convention = state.spec.convention if state else jet_steerer_spec().convention
    fileio.write_keypoints_tsv(out / "keypoints_A.tsv", kps_A, sc_A)
    fileio.write_keypoints_tsv(out / "keypoints_B.tsv", kps_B, sc_B)
    fileio.write_descriptors_tsv(out / "descriptors_A.tsv", kps_A, descs_A, sc_A, convention)
    fileio.write_descriptors_tsv(out / "descriptors_B.tsv", kps_B, descs_B, sc_B, convention)

    if args.matcher == "plain":
        S = similarity_l2(descs_A, descs_B)
    elif args.matcher == "oracle":
        if gt is None:
            raise SystemExit("match: the oracle matcher needs ground-truth affines; use --seed generation")
        spec = state.spec if state else jet_steerer_spec()
        S = similarity_steered(descs_A, descs_B, spec, gt.point_affines)
    elif state is not None:
        S = max_similarity(descs_A, descs_B, state.spec, state.prototype_set)
    else:
        S = max_similarity(descs_A, descs_B, jet_steerer_spec(), candidate_affines())
    matches = mnn_match(S, cfg.inv_temperature, cfg.threshold)
    correct = correct_mask(matches, kps_A, kps_B, phi, cfg.pixel_tol) if phi is not None else None
    fileio.write_matches_tsv(
        out / "matches.tsv", matches, len(kps_A), len(kps_B), cfg.inv_temperature, cfg.threshold, cfg.pixel_tol, correct
    )
    line = f"match: {len(matches)} matches"
    if phi is not None:
        H = phi if isinstance(phi, Homography) else Homography.from_affine(phi)
        res = ransac_homography(kps_A[matches.pairs[:, 0]], kps_B[matches.pairs[:, 1]], rng_seed=args.seed)
        err = corner_error(res.H_est, H, img_A.width, img_A.height)
        scores = auc([err], AUC_THRESHOLDS)
        rows = [
            ["n_matches", len(matches)],
            ["n_correct", int(np.sum(correct))],
            ["n_inliers", res.n_inliers],
            ["ransac_iterations", res.iterations],
            ["corner_error", err],
        ] + [[f"auc@{t:g}", a] for t, a in scores.items()]
        fileio.write_csv(out / "report.csv", ["metric", "value"], rows)
        if res.H_est is not None:
            fileio.write_json(out / "homography_estimate.json", fileio.warp_to_dict(res.H_est))
        line += f", {int(np.sum(correct))} correct, corner error {err:.3f} px"
    print(line)
    return 0


def _parse_affine(text):
    vals = [float(v) for v in text.split(",")]
    if len(vals) != 4:
        raise argparse.ArgumentTypeError("expected four comma-separated numbers a,b,c,d")
    return tuple(vals)


def cmd_train(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pc = pipeline_config(args)
    cfg = TrainConfig(
        stage=args.stage,
        iterations=args.iterations,
        learning_rate=args.learning_rate,
        batch_seeds=tuple(range(args.seed, args.seed + args.n_batches)),
        inv_temperature=args.inv_temperature,
        batch=BatchConfig(pipeline=args.descriptor, pipeline_cfg=pc),
        finetune_batch=replace(TrainConfig().finetune_batch, pipeline=args.descriptor, pipeline_cfg=pc),
        finetune_affine=args.finetune_affine,
        seed=args.seed,
    )
    state = fileio.load_checkpoint(args.checkpoint) if args.checkpoint else initial_state(seed=args.seed)
    if cfg.stage == "both":
        state = train(replace(cfg, stage="stage1"), state)
        fileio.save_checkpoint(out / "checkpoint_stage1.json", state)
        state = train(replace(cfg, stage="finetune"), state)
    else:
        state = train(cfg, state)
    fileio.save_checkpoint(out / "checkpoint.json", state)
    fileio.write_loss_csv(out / "loss.csv", state.loss_trace)
    if state.loss_trace:
        print(f"train: {len(state.loss_trace)} steps, loss {state.loss_trace[0][1]:.4f} -> {state.loss_trace[-1][1]:.4f}")
    else:
        print("train: 0 steps")
    return 0


def cmd_selftest(args) -> int:
    from . import selftest

    groups = args.groups.split(",") if args.groups else None
    if args.inject_fault:
        with injected_fault(args.inject_fault):
            results = selftest.run(groups, quick=args.quick)
    else:
        results = selftest.run(groups, quick=args.quick)
    for name, (ok, detail) in results.items():
        print(f"{name}\t{'PASS' if ok else 'FAIL'}\t{detail}")
    return 0 if all(ok for ok, _ in results.values()) else 1


# --------------------------------------------------------------------------
# parser


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="key=value file; command-line flags take precedence")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="out")
    p.add_argument("--checkpoint", help="steerer checkpoint (JSON)")
    p.add_argument("--inv-temperature", type=float, default=INV_TEMPERATURE)
    p.add_argument("--dual-softmax-threshold", type=float, default=DUAL_SOFTMAX_THRESHOLD)
    p.add_argument("--pixel-tol", type=float, default=PIXEL_TOL)
    p.add_argument("--descriptor", choices=sorted(PIPELINES), default="moment")
    p.add_argument("--image-size", type=int, default=PipelineConfig.image_size)
    p.add_argument("--n-blobs", type=int, default=PipelineConfig.n_blobs)
    p.add_argument("--top-k", type=int, default=PipelineConfig.top_k)
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> tuple[argparse.ArgumentParser, dict]:
    common = _common()
    parser = argparse.ArgumentParser(prog="gl2steer", description="GL(2) steerers for keypoint descriptions.")
    sub = parser.add_subparsers(dest="command", required=True)
    subs = {}

    p = sub.add_parser("gen", parents=[common], help="generate a synthetic view pair")
    p.add_argument("--identity-warp", action="store_true", help="view B equals view A")
    p.set_defaults(func=cmd_gen)
    subs["gen"] = p

    p = sub.add_parser("steer-bench", parents=[common], help="oracle steering benchmark")
    p.add_argument("--n-seeds", type=int, default=50)
    p.set_defaults(func=cmd_steer_bench)
    subs["steer-bench"] = p

    p = sub.add_parser("match", parents=[common], help="detect, describe and match two views")
    p.add_argument("--image-a", help="PGM of view A (omit to generate a pair from --seed)")
    p.add_argument("--image-b", help="PGM of view B (defaults to view A)")
    p.add_argument("--homography", help="ground-truth warp JSON, as written by gen")
    p.add_argument("--identity-warp", action="store_true")
    p.add_argument(
        "--matcher",
        choices=("plain", "maxsim", "oracle"),
        default="maxsim",
        help="plain L2; max similarity over the checkpoint prototypes (or a rotation/scale grid); "
        "or steering by the ground-truth local affines",
    )
    p.set_defaults(func=cmd_match)
    subs["match"] = p

    p = sub.add_parser("train", parents=[common], help="train a steerer")
    p.add_argument("--stage", choices=("stage1", "finetune", "both"), default="stage1")
    p.add_argument("--iterations", type=int, default=200)
    p.add_argument("--learning-rate", type=float, default=1e-3)
    p.add_argument("--n-batches", type=int, default=8)
    p.add_argument("--finetune-affine", type=_parse_affine, help="fixed linear warp a,b,c,d for fine-tuning pairs")
    p.set_defaults(func=cmd_train)
    subs["train"] = p

    p = sub.add_parser("selftest", parents=[common], help="run the invariant suite")
    p.add_argument("--quick", action="store_true", help="smaller Monte-Carlo groups")
    p.add_argument("--groups", help="comma-separated subset of groups")
    p.add_argument("--inject-fault", choices=FAULTS, help="deliberately break a component")
    p.set_defaults(func=cmd_selftest)
    subs["selftest"] = p
    return parser, subs


def parse_args(argv=None) -> argparse.Namespace:
    parser, subs = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        values = read_config_file(args.config)
        known = {a.dest for a in subs[args.command]._actions}
        unknown = set(values) - known
        if unknown:
            parser.error(f"unknown config keys: {', '.join(sorted(unknown))}")
        subs[args.command].set_defaults(**values)
        args = parser.parse_args(argv)
    return args


def main(argv=None) -> int:
    args = parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
