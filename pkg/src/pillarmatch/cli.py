"""Command-line entry point.

Subcommands: ``synth`` (seeded synthetic datasets), ``preprocess`` (KITTI
scans + poses into pair files), ``train``, ``match`` (single-pair inference)
and ``eval`` (matcher comparison report). Every behavioral toggle carries a
flag, and each command echoes its effective configuration into the output
directory so a run is reproducible from the echo alone.

Exit codes: 0 success, 2 usage/config error, 3 data or format error,
4 numeric error. Relative output paths resolve under $PILLARMATCH_RUN_ROOT
when that variable is set.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

from . import learn, pairio, register, transport
from .cloud import FramePair, SceneConfig, generate_synthetic_pair, load_kitti_poses, load_kitti_scan
from .errors import (
    ArgumentError,
    ConfigError,
    FormatError,
    NumericError,
    PillarMatchError,
)
from .network import HyperParams, load_checkpoint
from .pipeline import match_pair

RUN_ROOT_ENV = "PILLARMATCH_RUN_ROOT"

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _resolve(path: str) -> Path:
    p = Path(path)
    root = os.environ.get(RUN_ROOT_ENV)
    if root and not p.is_absolute():
        return Path(root) / p
    return p


def _add_hyper_flags(parser: argparse.ArgumentParser) -> None:
    g = parser.add_argument_group("model")
    g.add_argument("--keypoints", type=int, default=100, help="key-points per cloud")
    g.add_argument("--pillar-points", type=int, default=100, help="max points per pillar")
    g.add_argument("--pillar-radius", type=float, default=0.5, help="pillar radius in meters")
    g.add_argument("--feature-depth", type=int, default=32)
    g.add_argument("--heads", type=int, default=8)
    g.add_argument("--layers", type=int, default=6)
    g.add_argument("--sinkhorn-iters", type=int, default=100)
    g.add_argument(
        "--positional-hidden", type=str, default="32,64,128,256",
        help="comma-separated hidden widths of the positional MLP",
    )
    g.add_argument("--attention-scale", choices=["full", "per-head"], default="full")
    g.add_argument("--post-attention-mlp", action="store_true")
    g.add_argument("--sinkhorn-mode", choices=["alternating", "simultaneous"],
                   default="alternating")
    g.add_argument("--sinkhorn-marginals", choices=["uniform", "dustbin-weighted"],
                   default="uniform")
    g.add_argument("--match-threshold", type=float, default=0.2)
    g.add_argument("--dustbin-init", type=float, default=1.0)


def _add_label_flags(parser: argparse.ArgumentParser) -> None:
    g = parser.add_argument_group("labeling")
    g.add_argument("--match-radius", type=float, default=0.1)
    g.add_argument("--unmatch-radius", type=float, default=0.5)
    g.add_argument("--neighborhood-size", type=int, default=10)
    g.add_argument("--min-separation", type=float, default=None,
                   help="optional minimum spacing between selected key-points")


def _hyper_from_args(args) -> HyperParams:
    return HyperParams(
        src_keypoints=args.keypoints,
        tgt_keypoints=args.keypoints,
        pillar_points=args.pillar_points,
        pillar_radius=args.pillar_radius,
        feature_depth=args.feature_depth,
        attention_heads=args.heads,
        attention_layers=args.layers,
        sinkhorn_iterations=args.sinkhorn_iters,
        positional_hidden=tuple(int(v) for v in args.positional_hidden.split(",") if v),
        attention_scale=args.attention_scale,
        post_attention_mlp=args.post_attention_mlp,
        sinkhorn_mode=args.sinkhorn_mode,
        sinkhorn_marginals=args.sinkhorn_marginals,
        match_threshold=args.match_threshold,
        dustbin_init=args.dustbin_init,
    )


def _load_config_defaults(parser, argv):
    """Apply --config JSON values as defaults of the invoked subcommand.

    Subcommands parse into a fresh namespace, so the values must land on the
    subparser's own actions; explicit command-line flags still win.
    """
    probe = argparse.ArgumentParser(add_help=False)
    probe.add_argument("--config", type=str, default=None)
    known, rest = probe.parse_known_args(argv)
    if not known.config:
        return
    path = Path(known.config)
    if not path.exists():
        raise FormatError(f"config file {path} does not exist")
    try:
        values = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid config json: {exc}") from None
    subparsers = next(
        a for a in parser._actions if isinstance(a, argparse._SubParsersAction)
    )
    command = next((tok for tok in rest if tok in subparsers.choices), None)
    if command is None:
        raise ConfigError("--config requires a subcommand")
    sub = subparsers.choices[command]
    valid = {a.dest for a in sub._actions}
    unknown = set(values) - valid
    if unknown:
        raise ConfigError(f"unknown config keys for {command!r}: {sorted(unknown)}")
    sub.set_defaults(**values)


def _args_echo(args) -> dict:
    # the output path is where the echo lives, not part of what it describes;
    # leaving it out keeps equal-config runs byte-identical
    skip = ("func", "config", "out")
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


def _echo_config(directory: Path, command: str, args) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    payload = {"config_version": 1, "command": command}
    payload.update(_args_echo(args))
    (directory / "config.json").write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    out = _resolve(args.out)
    hyper = _hyper_from_args(args)
    scene = SceneConfig(
        point_count=args.points,
        overlap=args.overlap,
        rotation_bound=args.rotation_bound,
        translation_bound=args.translation_bound,
        noise_sigma=args.noise,
    )
    pairs = []
    for k in range(args.num_pairs):
        frame = generate_synthetic_pair(args.seed + k, scene)
        pairs.append(
            pairio.preprocess_pair(
                frame,
                hyper,
                match_radius=args.match_radius,
                unmatch_radius=args.unmatch_radius,
                neighborhood_size=args.neighborhood_size,
                min_separation=args.min_separation,
                meta={"seed": args.seed + k, "generator": "synthetic"},
            )
        )
    pairio.write_dataset(out, pairs, _args_echo(args))
    _echo_config(out, "synth", args)
    print(f"wrote {len(pairs)} pairs to {out}")
    return EXIT_OK


def cmd_preprocess(args) -> int:
    out = _resolve(args.out)
    hyper = _hyper_from_args(args)
    scan_dir = Path(args.scans)
    scan_files = sorted(scan_dir.glob("*.bin"))
    if not scan_files:
        raise FormatError(f"no .bin scans found in {scan_dir}")
    poses = load_kitti_poses(args.poses)
    if len(poses) < len(scan_files):
        raise FormatError(
            f"{len(scan_files)} scans but only {len(poses)} poses; every scan needs a pose"
        )
    clouds = [load_kitti_scan(p, frame_id=p.stem) for p in scan_files]
    distances = [int(v) for v in args.distances.split(",") if v]
    pairs = []
    for distance in distances:
        count_before = len(pairs)
        for i in range(len(clouds) - distance):
            j = i + distance
            gt = poses[j].inverse().compose(poses[i])
            frame = FramePair(
                source=clouds[i], target=clouds[j], gt_transform=gt, frame_distance=distance
            )
            pairs.append(
                pairio.preprocess_pair(
                    frame,
                    hyper,
                    match_radius=args.match_radius,
                    unmatch_radius=args.unmatch_radius,
                    neighborhood_size=args.neighborhood_size,
                    min_separation=args.min_separation,
                )
            )
        if len(pairs) == count_before:
            print(f"warning: distance {distance} produced 0 pairs", file=sys.stderr)
    pairio.write_dataset(out, pairs, _args_echo(args))
    _echo_config(out, "preprocess", args)
    print(f"wrote {len(pairs)} pairs to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    run_dir = _resolve(args.out)
    pairs = pairio.load_dataset(_resolve(args.data))
    params = None
    optimizer = None
    start_epoch = 0
    if args.resume:
        params, meta, extras = load_checkpoint(_resolve(args.resume))
        hyper = params.hyper
        optimizer = learn.load_optimizer(meta, extras)
        start_epoch = int(meta.get("next_epoch", 0))
    else:
        hyper = _hyper_from_args(args)
    run = learn.TrainRun(
        dataset_id=str(args.data),
        epochs=args.epochs,
        batch_size=args.batch_size,
        seed=args.seed,
        loss_kind=args.loss,
        learning_rate=args.learning_rate,
        max_steps=args.max_steps,
        checkpoint_every=args.checkpoint_every,
        match_threshold=args.match_threshold,
        nllp_penalty_excludes_dustbin=args.nllp_penalty == "rows-only",
    )
    _echo_config(run_dir, "train", args)

    def log(record):
        print(
            f"epoch {record['epoch']:4d}  loss {record['loss']:.4f}  "
            f"precision {record['precision']:.3f}  accuracy {record['accuracy']:.3f}"
        )

    result = learn.train(
        pairs, run, hyper, params=params, optimizer=optimizer,
        start_epoch=start_epoch, run_dir=run_dir, log=log,
    )
    print(f"finished after {result.steps} steps; checkpoints in {run_dir}")
    return EXIT_OK


def cmd_match(args) -> int:
    params, meta, _ = load_checkpoint(_resolve(args.checkpoint))
    pair = pairio.read_pair(_resolve(args.pair))
    n, m = len(pair.src_keypoints), len(pair.tgt_keypoints)
    hyper = params.hyper
    if (n, m) != (hyper.src_keypoints, hyper.tgt_keypoints):
        raise ConfigError(
            f"pair has {n}/{m} key-points but checkpoint expects "
            f"{hyper.src_keypoints}/{hyper.tgt_keypoints}"
        )
    if pair.src_pillars and pair.src_pillars[0].capacity != hyper.pillar_points:
        raise ConfigError(
            f"pair pillar capacity {pair.src_pillars[0].capacity} != "
            f"checkpoint {hyper.pillar_points}"
        )
    if args.sinkhorn_mode:
        import dataclasses

        params.hyper = dataclasses.replace(params.hyper, sinkhorn_mode=args.sinkhorn_mode)
    threshold = args.match_threshold
    result = match_pair(params, pair, threshold=threshold,
                        sinkhorn_iterations=args.sinkhorn_iters)
    report = {
        "pair": str(args.pair),
        "num_matches": len(result.matches.pairs),
        "matches": [
            {"i": i, "j": j, "confidence": conf} for i, j, conf in result.matches.pairs
        ],
        "unmatched_rows": list(result.matches.unmatched_rows),
        "unmatched_cols": list(result.matches.unmatched_cols),
    }
    if pair.labels.matched:
        report["matching_score"] = register.matching_score(result.matches, pair.labels)
    if args.timing_runs:
        start = time.perf_counter()
        for _ in range(args.timing_runs):
            match_pair(params, pair, threshold=threshold,
                       sinkhorn_iterations=args.sinkhorn_iters)
        elapsed = time.perf_counter() - start
        report["mean_forward_ms"] = 1000.0 * elapsed / args.timing_runs
    if args.dump_assignment:
        transport.write_assignment_csv(_resolve(args.dump_assignment), result.assignment)
        report["assignment_csv"] = str(args.dump_assignment)
    if args.plot_export:
        _write_plot_export(_resolve(args.plot_export), pair, result)
        report["plot_export"] = str(args.plot_export)
    output = json.dumps(report, indent=2, sort_keys=True)
    if args.report:
        path = _resolve(args.report)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(output + "\n")
    print(output)
    return EXIT_OK


def _write_plot_export(path: Path, pair, result) -> None:
    """Data-only export of correspondence lines for external renderers."""
    src, tgt = pair.coords
    lines = []
    for i, j, conf in result.matches.pairs:
        lines.append(
            {
                "src": list(map(float, src[i])),
                "tgt": list(map(float, tgt[j])),
                "confidence": conf,
                "correct": (i, j) in pair.labels.matched if pair.labels.matched else None,
            }
        )
    payload = {
        "src_keypoints": src.tolist(),
        "tgt_keypoints": tgt.tolist(),
        "match_lines": lines,
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, sort_keys=True) + "\n")


def cmd_eval(args) -> int:
    pairs = pairio.load_dataset(_resolve(args.data))
    matchers = [m.strip() for m in args.matchers.split(",") if m.strip()]
    params = None
    if "ours" in matchers:
        if not args.checkpoint:
            raise ConfigError("matcher 'ours' requires --checkpoint")
        params, _, _ = load_checkpoint(_resolve(args.checkpoint))
    report = register.evaluate_matchers(
        pairs,
        matchers=matchers,
        params=params,
        threshold=args.match_threshold,
        icp_reject_radius=args.icp_reject_radius,
    )
    table = register.format_report_table(report)
    print(table)
    if args.report:
        out = _resolve(args.report)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text(table)
        with open(out / "frames.jsonl", "w") as fh:
            for rec in report.records:
                fh.write(json.dumps(rec.to_json(), sort_keys=True) + "\n")
        (out / "summary.json").write_text(
            json.dumps(report.aggregate(), sort_keys=True, indent=2) + "\n"
        )
        _echo_config(out, "eval", args)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pillarmatch",
        description="Point-cloud key-point matching with attention and optimal transport",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a seeded synthetic pair dataset")
    p.add_argument("--config", type=str, default=None, help="JSON file of flag defaults")
    p.add_argument("--out", required=True)
    p.add_argument("--num-pairs", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--points", type=int, default=2000)
    p.add_argument("--overlap", type=float, default=0.8)
    p.add_argument("--rotation-bound", type=float, default=0.1)
    p.add_argument("--translation-bound", type=float, default=0.5)
    p.add_argument("--noise", type=float, default=0.005)
    _add_hyper_flags(p)
    _add_label_flags(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", help="turn KITTI scans + poses into pair files")
    p.add_argument("--config", type=str, default=None)
    p.add_argument("--scans", required=True, help="directory of .bin velodyne scans")
    p.add_argument("--poses", required=True, help="pose text file, 12 values per line")
    p.add_argument("--out", required=True)
    p.add_argument("--distances", type=str, default="1,5,10")
    _add_hyper_flags(p)
    _add_label_flags(p)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train a matcher on a pair dataset")
    p.add_argument("--config", type=str, default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--loss", choices=list(learn.LOSS_KINDS), default="nllp")
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--learning-rate", type=float, default=1e-4)
    p.add_argument("--max-steps", type=int, default=None)
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--resume", type=str, default=None)
    p.add_argument("--nllp-penalty", choices=["with-dustbin", "rows-only"],
                   default="with-dustbin",
                   help="dustbin handling in the unmatched-row penalty term")
    _add_hyper_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("match", help="run inference on one preprocessed pair")
    p.add_argument("--config", type=str, default=None)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--pair", required=True)
    p.add_argument("--match-threshold", type=float, default=None)
    p.add_argument("--sinkhorn-iters", type=int, default=None)
    p.add_argument("--sinkhorn-mode", choices=["alternating", "simultaneous"],
                   default=None, help="override the checkpoint's normalization mode")
    p.add_argument("--dump-assignment", type=str, default=None,
                   help="write the soft assignment as a CSV grid")
    p.add_argument("--plot-export", type=str, default=None,
                   help="write key-points and match lines as JSON plot data")
    p.add_argument("--timing-runs", type=int, default=0)
    p.add_argument("--report", type=str, default=None)
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("eval", help="compare matchers on a labelled dataset")
    p.add_argument("--config", type=str, default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", type=str, default=None)
    p.add_argument("--matchers", type=str, default="ours,nn,icp,vm")
    p.add_argument("--match-threshold", type=float, default=None)
    p.add_argument("--icp-reject-radius", type=float, default=2.0)
    p.add_argument("--report", type=str, default=None)
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _load_config_defaults(parser, argv)
        args = parser.parse_args(argv)
        return args.func(args)
    except (ConfigError, ArgumentError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except PillarMatchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
