"""Preprocessed frame-pair records and their on-disk format.

A preprocessed pair bundles everything training and evaluation need for one
frame pair: both key-point sets, their pillars, ground-truth labels and the
ground-truth transform. Files use the PMC container (kind ``pair``), datasets
are directories of pair files plus a ``manifest.json`` echoing the generating
configuration.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cloud import (
    CorrespondenceLabels,
    FramePair,
    KeyPoint,
    KeyPointKind,
    Pillar,
    label_correspondences,
    sample_pillars,
    select_keypoints,
)
from .container import read_container, write_container
from .errors import FormatError
from .network import HyperParams, feature_stacks
from .transforms import RigidTransform

PAIR_SUFFIX = ".ppair"


@dataclass
class PreprocessedPair:
    src_keypoints: list[KeyPoint]
    tgt_keypoints: list[KeyPoint]
    src_pillars: list[Pillar]
    tgt_pillars: list[Pillar]
    labels: CorrespondenceLabels
    gt_transform: RigidTransform
    frame_distance: int = 1
    meta: dict = field(default_factory=dict)
    _stack_cache: tuple | None = field(default=None, repr=False)

    @property
    def stacks(self) -> tuple[np.ndarray, np.ndarray]:
        if self._stack_cache is None:
            self._stack_cache = (
                feature_stacks(self.src_pillars),
                feature_stacks(self.tgt_pillars),
            )
        return self._stack_cache

    @property
    def coords(self) -> tuple[np.ndarray, np.ndarray]:
        return (
            np.array([kp.position for kp in self.src_keypoints]),
            np.array([kp.position for kp in self.tgt_keypoints]),
        )


def preprocess_pair(
    pair: FramePair,
    hyper: HyperParams,
    match_radius: float = 0.1,
    unmatch_radius: float = 0.5,
    neighborhood_size: int = 10,
    min_separation: float | None = None,
    meta: dict | None = None,
) -> PreprocessedPair:
    """Key-points, pillars and labels for one frame pair."""
    src_kps = select_keypoints(
        pair.source, hyper.src_keypoints, neighborhood_size, min_separation
    )
    tgt_kps = select_keypoints(
        pair.target, hyper.tgt_keypoints, neighborhood_size, min_separation
    )
    labels = label_correspondences(pair, src_kps, tgt_kps, match_radius, unmatch_radius)
    info = {
        "source_frame": pair.source.frame_id,
        "target_frame": pair.target.frame_id,
        "match_radius": match_radius,
        "unmatch_radius": unmatch_radius,
        "neighborhood_size": neighborhood_size,
    }
    if meta:
        info.update(meta)
    return PreprocessedPair(
        src_keypoints=src_kps,
        tgt_keypoints=tgt_kps,
        src_pillars=sample_pillars(pair.source, src_kps, hyper.pillar_points, hyper.pillar_radius),
        tgt_pillars=sample_pillars(pair.target, tgt_kps, hyper.pillar_points, hyper.pillar_radius),
        labels=labels,
        gt_transform=pair.gt_transform,
        frame_distance=pair.frame_distance,
        meta=info,
    )


def _keypoint_arrays(prefix: str, kps: list[KeyPoint]) -> dict:
    return {
        f"{prefix}.kp.position": np.array([k.position for k in kps]).reshape(-1, 3),
        f"{prefix}.kp.smoothness": np.array([k.smoothness for k in kps]),
        f"{prefix}.kp.kind": np.array(
            [1 if k.kind is KeyPointKind.SHARP else 0 for k in kps], dtype=np.uint8
        ),
        f"{prefix}.kp.index": np.array([k.index for k in kps], dtype=np.int64),
    }


def _pillar_arrays(prefix: str, pillars: list[Pillar]) -> dict:
    return {
        f"{prefix}.pillar.members": np.stack([p.members for p in pillars]),
        f"{prefix}.pillar.centroid": np.stack([p.centroid for p in pillars]),
        f"{prefix}.pillar.real_count": np.array([p.real_count for p in pillars], dtype=np.int64),
    }


def write_pair(path, pair: PreprocessedPair) -> None:
    arrays = {}
    arrays.update(_keypoint_arrays("src", pair.src_keypoints))
    arrays.update(_keypoint_arrays("tgt", pair.tgt_keypoints))
    arrays.update(_pillar_arrays("src", pair.src_pillars))
    arrays.update(_pillar_arrays("tgt", pair.tgt_pillars))
    arrays["gt_transform"] = pair.gt_transform.matrix
    arrays["labels.matched"] = pair.labels.matched_array
    for name in ("unmatched_rows", "unmatched_cols", "ignored_rows", "ignored_cols"):
        arrays[f"labels.{name}"] = np.array(sorted(getattr(pair.labels, name)), dtype=np.int64)
    meta = dict(pair.meta)
    meta["frame_distance"] = pair.frame_distance
    write_container(path, "pair", meta, arrays)


def _read_keypoints(prefix: str, arrays: dict) -> list[KeyPoint]:
    pos = arrays[f"{prefix}.kp.position"]
    smooth = arrays[f"{prefix}.kp.smoothness"]
    kind = arrays[f"{prefix}.kp.kind"]
    index = arrays[f"{prefix}.kp.index"]
    return [
        KeyPoint(
            position=pos[i],
            smoothness=float(smooth[i]),
            kind=KeyPointKind.SHARP if kind[i] else KeyPointKind.PLANAR,
            index=int(index[i]),
        )
        for i in range(len(pos))
    ]


def _read_pillars(prefix: str, arrays: dict, kps: list[KeyPoint]) -> list[Pillar]:
    members = arrays[f"{prefix}.pillar.members"]
    centroids = arrays[f"{prefix}.pillar.centroid"]
    counts = arrays[f"{prefix}.pillar.real_count"]
    return [
        Pillar(
            keypoint=kps[i],
            centroid=centroids[i],
            members=members[i],
            real_count=int(counts[i]),
        )
        for i in range(len(members))
    ]


def read_pair(path) -> PreprocessedPair:
    meta, arrays = read_container(path, expect_kind="pair")
    src_kps = _read_keypoints("src", arrays)
    tgt_kps = _read_keypoints("tgt", arrays)
    matched = arrays["labels.matched"]
    labels = CorrespondenceLabels(
        matched=frozenset((int(i), int(j)) for i, j in matched),
        unmatched_rows=frozenset(int(v) for v in arrays["labels.unmatched_rows"]),
        unmatched_cols=frozenset(int(v) for v in arrays["labels.unmatched_cols"]),
        ignored_rows=frozenset(int(v) for v in arrays["labels.ignored_rows"]),
        ignored_cols=frozenset(int(v) for v in arrays["labels.ignored_cols"]),
    )
    meta = dict(meta)
    distance = int(meta.pop("frame_distance", 1))
    return PreprocessedPair(
        src_keypoints=src_kps,
        tgt_keypoints=tgt_kps,
        src_pillars=_read_pillars("src", arrays, src_kps),
        tgt_pillars=_read_pillars("tgt", arrays, tgt_kps),
        labels=labels,
        gt_transform=RigidTransform(arrays["gt_transform"]),
        frame_distance=distance,
        meta=meta,
    )


def write_dataset(directory, pairs, config_echo: dict) -> None:
    """Write pair files plus a manifest; deterministic for equal inputs."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = []
    for index, pair in enumerate(pairs):
        name = f"pair_{index:05d}{PAIR_SUFFIX}"
        write_pair(directory / name, pair)
        names.append(name)
    manifest = {"kind": "pair-dataset", "version": 1, "pairs": names, "config": config_echo}
    (directory / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n"
    )


def load_dataset(directory) -> list[PreprocessedPair]:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise FormatError(f"{directory}: missing manifest.json")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("kind") != "pair-dataset":
        raise FormatError(f"{directory}: not a pair dataset")
    return [read_pair(directory / name) for name in manifest["pairs"]]
