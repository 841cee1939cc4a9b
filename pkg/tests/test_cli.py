import json
import os

import numpy as np
import pytest

from pillarmatch.cli import main
from pillarmatch.cloud import load_kitti_poses, save_kitti_poses, save_kitti_scan
from pillarmatch.cloud import PointCloud, SceneConfig, generate_synthetic_pair
from pillarmatch.pairio import load_dataset
from pillarmatch.transforms import RigidTransform, rotation_about_axis

TOY_FLAGS = [
    "--keypoints", "8",
    "--pillar-points", "6",
    "--feature-depth", "8",
    "--heads", "2",
    "--layers", "2",
    "--sinkhorn-iters", "10",
    "--positional-hidden", "8,16",
]

SCENE_FLAGS = [
    "--points", "400",
    "--overlap", "0.9",
    "--rotation-bound", "0.02",
    "--translation-bound", "0.1",
    "--noise", "0.002",
]


def run_synth(tmp_path, name="data", num_pairs=2, seed=1, extra=()):
    out = tmp_path / name
    code = main([
        "synth", "--out", str(out), "--num-pairs", str(num_pairs), "--seed", str(seed),
        *SCENE_FLAGS, *TOY_FLAGS, *extra,
    ])
    assert code == 0
    return out


def test_synth_deterministic(tmp_path):
    a = run_synth(tmp_path, "a")
    b = run_synth(tmp_path, "b")
    for name in sorted(os.listdir(a)):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name


def test_synth_zero_pairs_valid_manifest(tmp_path):
    out = run_synth(tmp_path, "empty", num_pairs=0)
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["pairs"] == []
    assert load_dataset(out) == []


def test_synth_half_overlap_has_unmatched_rows(tmp_path):
    out = tmp_path / "halved"
    code = main([
        "synth", "--out", str(out), "--num-pairs", "3", "--seed", "2",
        "--points", "700", "--overlap", "0.5", "--rotation-bound", "0.02",
        "--translation-bound", "0.1", "--noise", "0.002", *TOY_FLAGS,
    ])
    assert code == 0
    for pair in load_dataset(out):
        assert len(pair.labels.unmatched_rows) >= 1


def test_train_match_eval_round_trip(tmp_path):
    data = run_synth(tmp_path, "data", num_pairs=3, seed=3)
    run_dir = tmp_path / "run"
    code = main([
        "train", "--data", str(data), "--out", str(run_dir),
        "--loss", "nllp", "--epochs", "2", "--batch-size", "2", "--seed", "0",
        "--learning-rate", "1e-3", *TOY_FLAGS,
    ])
    assert code == 0
    checkpoint = run_dir / "checkpoint_final.pmc"
    assert checkpoint.exists()
    assert (run_dir / "config.json").exists()
    history = [json.loads(line) for line in (run_dir / "history.jsonl").read_text().splitlines()]
    assert len(history) == 2
    assert {"epoch", "loss", "precision", "accuracy"} <= set(history[0])

    pair_file = data / "pair_00000.ppair"
    dump = tmp_path / "assign.csv"
    plot = tmp_path / "plot.json"
    report = tmp_path / "match.json"
    code = main([
        "match", "--checkpoint", str(checkpoint), "--pair", str(pair_file),
        "--dump-assignment", str(dump), "--plot-export", str(plot),
        "--timing-runs", "2", "--report", str(report),
    ])
    assert code == 0
    grid = dump.read_text().strip().splitlines()
    assert len(grid) == 8 + 2  # keypoints + dustbin + header
    payload = json.loads(report.read_text())
    assert "mean_forward_ms" in payload
    plot_data = json.loads(plot.read_text())
    assert {"src_keypoints", "tgt_keypoints", "match_lines"} <= set(plot_data)

    eval_dir = tmp_path / "eval"
    code = main([
        "eval", "--data", str(data), "--checkpoint", str(checkpoint),
        "--matchers", "ours,nn,icp,vm", "--report", str(eval_dir),
    ])
    assert code == 0
    table = (eval_dir / "report.txt").read_text()
    assert "-- Matching Score --" in table
    frames = [json.loads(l) for l in (eval_dir / "frames.jsonl").read_text().splitlines()]
    assert {rec["matcher"] for rec in frames} == {"ours", "nn", "icp", "vm"}


def test_train_resume_matches_uninterrupted(tmp_path):
    data = run_synth(tmp_path, "data", num_pairs=2, seed=4)
    full_dir = tmp_path / "full"
    code = main([
        "train", "--data", str(data), "--out", str(full_dir), "--loss", "nll",
        "--epochs", "4", "--batch-size", "2", "--seed", "9",
        "--learning-rate", "1e-3", *TOY_FLAGS,
    ])
    assert code == 0

    part_dir = tmp_path / "part"
    code = main([
        "train", "--data", str(data), "--out", str(part_dir), "--loss", "nll",
        "--epochs", "2", "--batch-size", "2", "--seed", "9",
        "--learning-rate", "1e-3", *TOY_FLAGS,
    ])
    assert code == 0
    resume_dir = tmp_path / "resumed"
    code = main([
        "train", "--data", str(data), "--out", str(resume_dir), "--loss", "nll",
        "--epochs", "4", "--batch-size", "2", "--seed", "9",
        "--learning-rate", "1e-3", "--resume", str(part_dir / "checkpoint_final.pmc"),
        *TOY_FLAGS,
    ])
    assert code == 0
    full = [json.loads(l) for l in (full_dir / "history.jsonl").read_text().splitlines()]
    resumed = [json.loads(l) for l in (resume_dir / "history.jsonl").read_text().splitlines()]
    assert resumed == full[2:]


def test_preprocess_kitti_fixtures(tmp_path, rng):
    scans = tmp_path / "scans"
    scans.mkdir()
    poses = []
    base = rng.uniform(2.0, 6.0, size=(300, 3))
    for k in range(3):
        rot = rotation_about_axis([0, 0, 1], 0.01 * k)
        pose = RigidTransform.from_rotation_translation(rot, [0.2 * k, 0.0, 0.0])
        poses.append(pose)
        pts = pose.apply(base)  # the same world points seen from each frame
        cloud = PointCloud(pts, rng.uniform(size=len(pts)), frame_id=str(k))
        save_kitti_scan(cloud, scans / f"{k:06d}.bin")
    pose_file = tmp_path / "poses.txt"
    save_kitti_poses(poses, pose_file)

    out = tmp_path / "pre"
    code = main([
        "preprocess", "--scans", str(scans), "--poses", str(pose_file),
        "--out", str(out), "--distances", "1",
        "--keypoints", "6", "--pillar-points", "4", "--feature-depth", "8",
        "--heads", "2", "--layers", "2", "--positional-hidden", "8",
        "--neighborhood-size", "6",
    ])
    assert code == 0
    pairs = load_dataset(out)
    assert len(pairs) == 2  # 3 scans at distance 1
    assert all(p.frame_distance == 1 for p in pairs)


def test_preprocess_missing_pose_is_format_error(tmp_path, rng, capsys):
    scans = tmp_path / "scans"
    scans.mkdir()
    for k in range(2):
        cloud = PointCloud(rng.uniform(2, 5, size=(50, 3)), rng.uniform(size=50))
        save_kitti_scan(cloud, scans / f"{k:06d}.bin")
    pose_file = tmp_path / "poses.txt"
    save_kitti_poses([RigidTransform.identity()], pose_file)  # one pose, two scans
    code = main([
        "preprocess", "--scans", str(scans), "--poses", str(pose_file),
        "--out", str(tmp_path / "pre"), "--distances", "1",
    ])
    assert code == 3


def test_unknown_loss_is_usage_error(capsys):
    # argparse reports bad flag values itself and exits with the usage code
    with pytest.raises(SystemExit) as exc:
        main(["train", "--loss", "bogus", "--data", "x", "--out", "y", "--epochs", "1"])
    assert exc.value.code == 2


def test_missing_dataset_is_data_error(tmp_path):
    assert main(["train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]) == 3


@pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning")
def test_numeric_blowup_is_numeric_error(tmp_path):
    # an absurd learning rate overflows the forward pass on the next epoch
    data = run_synth(tmp_path, "data", num_pairs=1, seed=8)
    code = main([
        "train", "--data", str(data), "--out", str(tmp_path / "run"),
        "--epochs", "3", "--batch-size", "1", "--learning-rate", "1e12",
        *TOY_FLAGS,
    ])
    assert code == 4


def test_checkpoint_pair_mismatch_is_config_error(tmp_path):
    data = run_synth(tmp_path, "data", num_pairs=1, seed=5)
    run_dir = tmp_path / "run"
    main([
        "train", "--data", str(data), "--out", str(run_dir), "--epochs", "1",
        "--batch-size", "1", *TOY_FLAGS,
    ])
    other = run_synth(tmp_path, "other", num_pairs=1, seed=6,
                      extra=["--keypoints", "8"])
    big = tmp_path / "big"
    code = main([
        "synth", "--out", str(big), "--num-pairs", "1", "--seed", "6",
        *SCENE_FLAGS, "--keypoints", "12", "--pillar-points", "6",
        "--feature-depth", "8", "--heads", "2", "--layers", "2",
        "--positional-hidden", "8,16",
    ])
    assert code == 0
    code = main([
        "match", "--checkpoint", str(run_dir / "checkpoint_final.pmc"),
        "--pair", str(big / "pair_00000.ppair"),
    ])
    assert code == 2


def test_config_file_provides_defaults(tmp_path):
    config = tmp_path / "cfg.json"
    config.write_text(json.dumps({
        "num_pairs": 2, "seed": 11, "points": 400, "overlap": 0.9,
        "rotation_bound": 0.02, "translation_bound": 0.1, "noise": 0.002,
        "keypoints": 8, "pillar_points": 6, "feature_depth": 8,
        "heads": 2, "layers": 2, "sinkhorn_iters": 10,
        "positional_hidden": "8,16",
    }))
    out = tmp_path / "from_config"
    assert main(["synth", "--config", str(config), "--out", str(out)]) == 0
    assert len(load_dataset(out)) == 2
    echoed = json.loads((out / "config.json").read_text())
    assert echoed["seed"] == 11


def test_match_self_pair_with_overfit_model(tmp_path):
    # source == target: after a short overfit run, nearly every key-point
    # should match itself
    import numpy as np

    from pillarmatch.cloud import FramePair, SceneConfig, generate_synthetic_pair
    from pillarmatch.learn import TrainRun, train
    from pillarmatch.network import HyperParams
    from pillarmatch.pairio import preprocess_pair, write_pair
    from pillarmatch.pipeline import match_pair

    hyper = HyperParams(
        src_keypoints=8, tgt_keypoints=8, pillar_points=6,
        feature_depth=8, attention_heads=2, attention_layers=2,
        sinkhorn_iterations=10, positional_hidden=(8, 16),
    )
    scene = SceneConfig(point_count=400, overlap=0.9, rotation_bound=0.02,
                        translation_bound=0.1, noise_sigma=0.002, window=6.0,
                        width=4.0, pole_count=6)
    pairs = []
    for seed in range(4):
        cloud = generate_synthetic_pair(seed, scene).source
        self_pair = FramePair(source=cloud, target=cloud,
                              gt_transform=RigidTransform.identity())
        pairs.append(preprocess_pair(self_pair, hyper))
    assert all(len(p.labels.matched) == 8 for p in pairs)

    run = TrainRun(epochs=40, batch_size=2, seed=0, loss_kind="nllp",
                   learning_rate=1e-3)
    result = train(pairs, run, hyper)
    self_matched = []
    for pair in pairs:
        matches = match_pair(result.params, pair, threshold=0.2).matches
        self_matched.append(
            sum(1 for i, j, _ in matches.pairs if i == j) / len(pair.src_keypoints)
        )
    assert np.mean(self_matched) >= 0.9


def test_dump_assignment_full_scale_grid(tmp_path):
    # default 100 key-points produce the 101x101 augmented assignment
    from pillarmatch.network import HyperParams, ModelParameters, save_checkpoint
    from pillarmatch.pairio import preprocess_pair, write_pair
    from pillarmatch.cloud import SceneConfig, generate_synthetic_pair

    hyper = HyperParams()  # paper-scale defaults
    checkpoint = tmp_path / "model.pmc"
    save_checkpoint(checkpoint, ModelParameters.initialize(hyper, seed=0))
    scene = SceneConfig(point_count=3000)
    pair_file = tmp_path / "pair.ppair"
    write_pair(pair_file, preprocess_pair(generate_synthetic_pair(1, scene), hyper))
    dump = tmp_path / "grid.csv"
    code = main([
        "match", "--checkpoint", str(checkpoint), "--pair", str(pair_file),
        "--dump-assignment", str(dump), "--sinkhorn-iters", "10",
    ])
    assert code == 0
    lines = dump.read_text().strip().splitlines()
    assert len(lines) == 1 + 101  # header + 100 key-points + dustbin
    assert len(lines[0].split(",")) == 1 + 101


def test_run_root_env_var(tmp_path, monkeypatch):
    monkeypatch.setenv("PILLARMATCH_RUN_ROOT", str(tmp_path))
    code = main([
        "synth", "--out", "rooted", "--num-pairs", "1", "--seed", "1",
        *SCENE_FLAGS, *TOY_FLAGS,
    ])
    assert code == 0
    assert (tmp_path / "rooted" / "manifest.json").exists()
