"""Command-line interface: ``patchdesc <command> [flags]``.

Exit codes: 0 success, 1 runtime or data error, 2 usage error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import formats
from .binarization import itq_encode_many, itq_train
from .corpus import GroundTruthIndex
from .errors import FormatError, InvalidConfig, PatchDescError
from .evaluation import DescriptorSet, EvalConfig, decide_matches, describe_keypoints, evaluate, format_report
from .geometry import IssParams, PatchConfig, compute_resolution, detect_iss_keypoints
from .mining import MiningConfig, augment_multiresolution, make_triplets, mine_training_set, resample_corpus
from .model import EncoderArch, LossConfig
from .synthetic import KINDS, SynthConfig, generate_synthetic_corpus
from .trainer import TrainConfig, train

log = logging.getLogger("patchdesc")


class UsageError(Exception):
    pass


def _patch(args) -> PatchConfig:
    try:
        return PatchConfig(args.radius, args.n_points, args.theta_min)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _add_patch_flags(p, radius_required=True):
    p.add_argument("--radius", type=float, required=radius_required, default=None, help="support radius R")
    p.add_argument("--n-points", type=int, default=64, help="points per patch N")
    p.add_argument("--theta-min", type=float, default=0.2, help="minimum angular separation (radians)")


# ------------------------------------------------------------------ commands


def cmd_synth(args) -> int:
    kinds = tuple(k.strip() for k in args.shapes.split(",") if k.strip())
    unknown = [k for k in kinds if k not in KINDS]
    if not kinds or unknown:
        raise UsageError(f"--shapes must list kinds from {', '.join(KINDS)}")
    try:
        cfg = SynthConfig(
            kinds=kinds, instances=args.count, points=args.points, keypoints=args.keypoints, noise=args.noise, seed=args.seed
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    corpus, _ = generate_synthetic_corpus(cfg)
    path = formats.write_corpus(args.out, corpus)
    print(f"wrote {len(corpus.models)} clouds, {len(corpus.correspondences)} correspondence files, manifest {path}")
    return 0


def cmd_keypoints(args) -> int:
    cloud = formats.read_cloud(args.cloud)
    mr = compute_resolution(cloud)
    params = IssParams.from_resolution(mr)
    if args.salient_radius is not None:
        params = replace(params, salient_radius=args.salient_radius)
    if args.nms_radius is not None:
        params = replace(params, nms_radius=args.nms_radius)
    kps = detect_iss_keypoints(cloud, params)
    if args.max_keypoints is not None:
        kps = kps[: args.max_keypoints]
    formats.write_keypoints(args.out, kps)
    print(f"{len(kps)} keypoints (mesh resolution {mr:.6g})")
    return 0


def cmd_mine(args) -> int:
    corpus = formats.load_corpus(args.manifest)
    if args.fraction:
        corpus = augment_multiresolution(corpus, args.fraction, args.seed)
    cfg = MiningConfig(
        _patch(args),
        soft_threshold=args.soft_threshold,
        nndr_max_ratio=args.nndr_ratio,
        soft_budget=args.soft_budget,
        hard_budget=args.hard_budget,
        cross_model_pairs=args.cross_model_pairs,
        seed=args.seed,
    )
    ts = mine_training_set(corpus, cfg)
    if args.triplets:
        items = make_triplets(ts.positives, ts.merged_negatives(), args.seed, GroundTruthIndex(corpus.correspondences))
        print(f"positives {len(ts.positives)} soft {len(ts.soft)} hard {len(ts.hard)} triplets {len(items)}")
    else:
        items = ts.pairs()
        print(f"positives {len(ts.positives)} soft {len(ts.soft)} hard {len(ts.hard)}")
    formats.save_trainset(args.out, items)
    return 0


def _loss(args) -> LossConfig:
    try:
        return LossConfig(kind=args.loss, m=args.m, m1=args.m1, m2=args.m2, b=args.b, lam=args.lam)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def cmd_train(args) -> int:
    data = formats.load_trainset(args.dataset)
    loss = _loss(args)
    triplets = not hasattr(data[0], "label")
    if triplets != (loss.kind == "triplet"):
        raise UsageError(f"--loss {loss.kind} cannot train on a {'triplet' if triplets else 'pair'} dataset")
    if loss.kind not in ("mmcl", "triplet"):
        data = [replace(p, gamma=None) if not p.positive else p for p in data]
    arch = EncoderArch(
        point_mlp_dims=(3, *args.point_dims), head_dims=(args.point_dims[-1], *args.head_dims), variant=args.variant
    )
    try:
        cfg = TrainConfig(
            loss=loss,
            arch=arch,
            epochs=args.epochs,
            batch_size=args.batch_size,
            learning_rate=args.lr,
            momentum=args.momentum,
            seed=args.seed,
            init_gain=args.init_gain,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc

    def report(epoch, value):
        print(f"epoch {epoch + 1}/{args.epochs} loss {value:.6f}", flush=True)

    result = train(data, cfg, on_epoch=report)
    formats.save_checkpoint(args.out, result.params)
    print(f"wrote checkpoint {args.out}")
    return 0


def cmd_describe(args) -> int:
    params = formats.load_checkpoint(args.checkpoint)
    cloud = formats.read_cloud(args.cloud)
    kps = formats.read_keypoints(args.keypoints)
    if len(kps) and (kps.min() < 0 or kps.max() >= len(cloud)):
        raise FormatError(f"{args.keypoints}: keypoint index out of range for {len(cloud)} points")
    ds = describe_keypoints(params, cloud, kps, _patch(args))
    for k, why in ds.failures:
        print(f"keypoint {k} skipped: {why}", file=sys.stderr)
    formats.save_descriptors(args.out, ds.indices, ds.values)
    print(f"{len(ds)} descriptors (D={params.arch.descriptor_dim}), {len(ds.failures)} failures")
    return 0


def _load_descriptor_dir(paths, ids) -> dict[str, DescriptorSet]:
    out = {}
    for p in paths:
        mid = Path(p).stem
        idx, vals = formats.load_descriptors(p)
        out[mid] = DescriptorSet(mid, idx, vals)
    missing = sorted(ids - set(out))
    if missing:
        raise UsageError(f"no descriptor file for models: {', '.join(missing)}")
    return out


def cmd_eval(args) -> int:
    corpus = formats.load_corpus(args.manifest)
    if not any(len(c) for c in corpus.correspondences):
        raise UsageError(f"{args.manifest}: manifest has no ground-truth correspondences")
    if args.fraction is not None:
        if not (0 < args.fraction <= 1):
            raise UsageError("--fraction must lie in (0, 1]")
        if args.fraction < 1:
            if args.descriptors:
                raise UsageError("--fraction needs --checkpoint (descriptors are computed on the subsampled clouds)")
            corpus = resample_corpus(corpus, args.fraction, args.seed)
    gt = [c for c in corpus.correspondences if len(c)]
    ids = {c.model_a for c in gt} | {c.model_b for c in gt}
    if args.checkpoint:
        params = formats.load_checkpoint(args.checkpoint)
        patch = _patch(args)
        descs = {m.id: describe_keypoints(params, m.cloud, m.keypoints, patch) for m in corpus.models if m.id in ids}
    else:
        descs = _load_descriptor_dir(args.descriptors, ids)
    clouds = {m.id: m.cloud for m in corpus.models}
    reports = {}
    for mode in ("non_symmetric", "symmetric"):
        cfg = EvalConfig(k=args.k, tau=args.tau, match_rule=args.match_rule, nndr_ratio=args.nndr_ratio, symmetry_mode=mode)
        reports[mode] = evaluate(descs, gt, clouds, cfg)
    print(format_report(reports))
    if args.csv:
        formats.atomic_write(args.csv, formats.eval_csv(reports["non_symmetric"]))
    if args.csv_symmetric:
        formats.atomic_write(args.csv_symmetric, formats.eval_csv(reports["symmetric"]))
    return 0


def cmd_match(args) -> int:
    a_idx, a_val = formats.load_descriptors(args.query)
    b_idx, b_val = formats.load_descriptors(args.target)
    da = DescriptorSet(Path(args.query).stem, a_idx, a_val)
    db = DescriptorSet(Path(args.target).stem, b_idx, b_val)
    if da.values.shape[1] != db.values.shape[1]:
        raise FormatError("descriptor dimensions differ between the two files")
    cfg = EvalConfig(match_rule=args.match_rule, nndr_ratio=args.nndr_ratio)
    matches = decide_matches(da, db, cfg)
    text = "".join(f"{m.idx_a} {m.idx_b}\n" for m in matches)
    if args.out:
        formats.atomic_write(args.out, text)
    else:
        sys.stdout.write(text)
    print(f"{len(matches)} matches", file=sys.stderr)
    return 0


def cmd_binarize(args) -> int:
    sets = [formats.load_descriptors(p) for p in args.descriptors]
    dims = {v.shape[1] for _, v in sets}
    if len(dims) > 1:
        raise FormatError(f"descriptor files disagree on dimension: {sorted(dims)}")
    X = np.concatenate([v for _, v in sets]) if sets else np.zeros((0, 0))
    if args.model_in:
        model = formats.load_itq(args.model_in)
    else:
        if args.bits < 1 or args.iters < 0:
            raise UsageError("--bits must be >= 1 and --iters >= 0")
        model = itq_train(X, bits=args.bits, iterations=args.iters, seed=args.seed)
        formats.save_itq(args.model_out, model)
    codes = itq_encode_many(model, X) if len(X) else []
    formats.save_codes(args.out, codes, model.bits)
    if model.losses:
        print(f"quantization loss {model.losses[0]:.6g} -> {model.losses[-1]:.6g}")
    print(f"{len(codes)} codes of {model.bits} bits")
    return 0


# ------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="patchdesc", description="Learned local descriptors for 3D point clouds.")
    ap.add_argument("--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic corpus with exact correspondences")
    p.add_argument("--shapes", default="composite", help=f"comma-separated archetype kinds ({', '.join(KINDS)})")
    p.add_argument("--count", type=int, default=2, help="instances per archetype")
    p.add_argument("--points", type=int, default=2000)
    p.add_argument("--keypoints", type=int, default=40)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("keypoints", help="detect ISS keypoints on a cloud")
    p.add_argument("--cloud", required=True)
    p.add_argument("--salient-radius", type=float, default=None, help="default 6 mesh resolutions")
    p.add_argument("--nms-radius", type=float, default=None, help="default 4 mesh resolutions")
    p.add_argument("--max-keypoints", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_keypoints)

    p = sub.add_parser("mine", help="build a training set of positive, soft and hard negative pairs")
    p.add_argument("--manifest", required=True)
    _add_patch_flags(p)
    p.add_argument("--soft-threshold", type=float, default=0.7)
    p.add_argument("--nndr-ratio", type=float, default=0.8)
    p.add_argument("--soft-budget", type=int, default=None)
    p.add_argument("--hard-budget", type=int, default=None)
    p.add_argument("--cross-model-pairs", type=int, default=None)
    p.add_argument("--fraction", type=float, action="append", default=[], help="add a subsampled copy (repeatable)")
    p.add_argument("--triplets", action="store_true", help="emit triplets instead of pairs")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_mine)

    p = sub.add_parser("train", help="train the encoder")
    p.add_argument("--dataset", required=True)
    p.add_argument("--loss", choices=("mmcl", "contrastive", "hinge", "triplet"), default="mmcl")
    p.add_argument("--m", type=float, default=1.0)
    p.add_argument("--m1", type=float, default=2.0)
    p.add_argument("--m2", type=float, default=1.0)
    p.add_argument("--b", type=float, default=0.0)
    p.add_argument("--lam", type=float, default=1e-4)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--init-gain", type=float, default=1.0, help="weight bound is gain / sqrt(fan_in); sqrt(6) is He-uniform")
    p.add_argument("--point-dims", type=int, nargs="+", default=[32, 64, 128])
    p.add_argument("--head-dims", type=int, nargs="+", default=[128, 128])
    p.add_argument("--variant", choices=("patch_siamese", "aggregated"), default="patch_siamese")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("describe", help="compute descriptors for the keypoints of one cloud")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cloud", required=True)
    p.add_argument("--keypoints", required=True)
    _add_patch_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_describe)

    p = sub.add_parser("eval", help="precision, recall, CMC and correspondence accuracy")
    p.add_argument("--manifest", required=True, help="corpus with ground-truth correspondences")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint")
    src.add_argument("--descriptors", nargs="+", help="descriptor files named <model_id>.<ext>")
    _add_patch_flags(p, radius_required=False)
    p.add_argument("--k", type=int, default=100)
    p.add_argument("--tau", type=float, default=0.25)
    p.add_argument("--match-rule", choices=("nearest_neighbor", "nndr"), default="nearest_neighbor")
    p.add_argument("--nndr-ratio", type=float, default=0.8)
    p.add_argument("--fraction", type=float, default=None, help="evaluate on clouds subsampled to this fraction")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--csv", default=None, help="CSV of the non-symmetric report")
    p.add_argument("--csv-symmetric", default=None, help="CSV of the symmetric report")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("match", help="match two descriptor files")
    p.add_argument("--query", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--match-rule", choices=("nearest_neighbor", "nndr"), default="nndr")
    p.add_argument("--nndr-ratio", type=float, default=0.8)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("binarize", help="ITQ binary codes for descriptor files")
    p.add_argument("--descriptors", nargs="+", required=True)
    p.add_argument("--bits", type=int, default=128)
    p.add_argument("--iters", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--model-in", default=None, help="encode with a saved ITQ model instead of training one")
    p.add_argument("--model-out", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_binarize)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.command == "eval" and args.checkpoint and args.radius is None:
        print("patchdesc eval: error: --radius is required with --checkpoint", file=sys.stderr)
        return 2
    if args.command == "binarize" and not args.model_in and not args.model_out:
        print("patchdesc binarize: error: --model-out is required unless --model-in is given", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except (UsageError, InvalidConfig) as exc:
        print(f"patchdesc {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (PatchDescError, OSError, ValueError) as exc:
        print(f"patchdesc {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
