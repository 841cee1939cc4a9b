import numpy as np
import pytest

from pillarmatch.cloud import (
    CorrespondenceLabels,
    KeyPoint,
    KeyPointKind,
    Pillar,
    SceneConfig,
    generate_synthetic_pair,
)
from pillarmatch.network import HyperParams
from pillarmatch.pairio import PreprocessedPair, preprocess_pair


def toy_hyper(**overrides) -> HyperParams:
    """Small network used by unit tests and gradient checks."""
    base = dict(
        src_keypoints=4,
        tgt_keypoints=4,
        pillar_points=4,
        pillar_radius=0.5,
        feature_depth=8,
        attention_heads=2,
        attention_layers=2,
        sinkhorn_iterations=10,
        positional_hidden=(8, 16),
    )
    base.update(overrides)
    return HyperParams(**base)


def make_pillar(members_xyz_i, keypoint_xyz, capacity, kind=KeyPointKind.SHARP):
    """Pillar from explicit member rows (already sorted by distance)."""
    members = np.zeros((capacity, 4))
    real = len(members_xyz_i)
    if real:
        members[:real] = np.asarray(members_xyz_i, dtype=float)
    centroid = (
        members[:real, :3].mean(axis=0) if real else np.asarray(keypoint_xyz, dtype=float)
    )
    kp = KeyPoint(position=keypoint_xyz, smoothness=0.0, kind=kind)
    return Pillar(keypoint=kp, centroid=centroid, members=members, real_count=real)


def toy_pair(seed=0, hyper=None, scene=None) -> PreprocessedPair:
    hyper = hyper or toy_hyper()
    scene = scene or SceneConfig(
        point_count=400,
        overlap=0.9,
        rotation_bound=0.02,
        translation_bound=0.1,
        noise_sigma=0.002,
        window=6.0,
        width=4.0,
        pole_count=6,
    )
    frame = generate_synthetic_pair(seed, scene)
    return preprocess_pair(frame, hyper)


def synthetic_labels(n, m, matched, unmatched_rows=(), unmatched_cols=()):
    used_rows = {i for i, _ in matched} | set(unmatched_rows)
    used_cols = {j for _, j in matched} | set(unmatched_cols)
    return CorrespondenceLabels(
        matched=frozenset(matched),
        unmatched_rows=frozenset(unmatched_rows),
        unmatched_cols=frozenset(unmatched_cols),
        ignored_rows=frozenset(set(range(n)) - used_rows),
        ignored_cols=frozenset(set(range(m)) - used_cols),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
