"""Point-cloud data model, ingestion, key-point selection and labeling.

Clouds are immutable once constructed and cache their k-d tree, so per-frame
preprocessing can run concurrently across frames.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import (
    ArgumentError,
    DegeneratePointError,
    FormatError,
    InsufficientPointsError,
)
from .transforms import RigidTransform, random_rotation

SCAN_RECORD_BYTES = 16  # 4 little-endian float32 per point: x, y, z, reflectance
ORIGIN_EPS = 1e-6       # smoothness is singular at the sensor origin
DEFAULT_NEIGHBORHOOD = 10
DEFAULT_MATCH_RADIUS = 0.1
DEFAULT_UNMATCH_RADIUS = 0.5


class KeyPointKind(enum.Enum):
    SHARP = "sharp"
    PLANAR = "planar"


@dataclass(frozen=True)
class PointCloud:
    """Ordered 3D points with per-point intensity."""

    points: np.ndarray       # (N, 3) float64
    intensities: np.ndarray  # (N,) float64
    frame_id: str = ""

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=np.float64))
        if pts.size == 0:
            pts = pts.reshape(0, 3)
        intens = np.asarray(self.intensities, dtype=np.float64).reshape(-1)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ArgumentError(f"points must be (N, 3), got {pts.shape}")
        if len(intens) != len(pts):
            raise ArgumentError("points and intensities must have equal length")
        if not (np.all(np.isfinite(pts)) and np.all(np.isfinite(intens))):
            raise ArgumentError("cloud contains non-finite values")
        pts.setflags(write=False)
        intens.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "intensities", intens)
        object.__setattr__(self, "_tree_cache", None)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def tree(self) -> cKDTree:
        cached = getattr(self, "_tree_cache")
        if cached is None:
            cached = cKDTree(self.points)
            object.__setattr__(self, "_tree_cache", cached)
        return cached


@dataclass(frozen=True)
class KeyPoint:
    position: np.ndarray  # (3,)
    smoothness: float
    kind: KeyPointKind
    index: int = -1       # index into the originating cloud, -1 if detached

    def __post_init__(self):
        pos = np.asarray(self.position, dtype=np.float64).reshape(3)
        pos.setflags(write=False)
        object.__setattr__(self, "position", pos)


@dataclass(frozen=True)
class Pillar:
    """Fixed-capacity spherical neighborhood around a key-point.

    ``members`` has exactly ``capacity`` rows of (x, y, z, intensity); the
    first ``real_count`` rows are real points sorted by ascending distance to
    the key-point, the rest are zero pads. ``centroid`` is the mean of the
    real members, falling back to the key-point position when empty.
    """

    keypoint: KeyPoint
    centroid: np.ndarray   # (3,)
    members: np.ndarray    # (capacity, 4)
    real_count: int

    def __post_init__(self):
        centroid = np.asarray(self.centroid, dtype=np.float64).reshape(3)
        members = np.asarray(self.members, dtype=np.float64)
        centroid.setflags(write=False)
        members.setflags(write=False)
        object.__setattr__(self, "centroid", centroid)
        object.__setattr__(self, "members", members)

    @property
    def capacity(self) -> int:
        return len(self.members)


@dataclass(frozen=True)
class CorrespondenceLabels:
    """Ground-truth assignment targets for one frame pair.

    ``matched`` is one-to-one; unmatched rows are assigned to the dustbin
    column and unmatched columns to the dustbin row; ignored indices carry
    no supervision at all.
    """

    matched: frozenset       # of (i, j)
    unmatched_rows: frozenset
    unmatched_cols: frozenset
    ignored_rows: frozenset
    ignored_cols: frozenset

    def __post_init__(self):
        matched = frozenset((int(i), int(j)) for i, j in self.matched)
        rows = [i for i, _ in matched]
        cols = [j for _, j in matched]
        if len(set(rows)) != len(rows) or len(set(cols)) != len(cols):
            raise ArgumentError("matched pairs must be one-to-one")
        object.__setattr__(self, "matched", matched)
        for name in ("unmatched_rows", "unmatched_cols", "ignored_rows", "ignored_cols"):
            object.__setattr__(self, name, frozenset(int(v) for v in getattr(self, name)))
        if self.unmatched_rows & set(rows) or self.ignored_rows & (set(rows) | self.unmatched_rows):
            raise ArgumentError("row index appears in more than one label class")
        if self.unmatched_cols & set(cols) or self.ignored_cols & (set(cols) | self.unmatched_cols):
            raise ArgumentError("column index appears in more than one label class")

    @property
    def matched_array(self) -> np.ndarray:
        return np.array(sorted(self.matched), dtype=np.int64).reshape(-1, 2)

    def total_cells(self) -> int:
        return len(self.matched) + len(self.unmatched_rows) + len(self.unmatched_cols)


@dataclass(frozen=True)
class FramePair:
    source: PointCloud
    target: PointCloud
    gt_transform: RigidTransform
    frame_distance: int = 1


# ---------------------------------------------------------------------------
# ingestion
# ---------------------------------------------------------------------------

def load_kitti_scan(path, frame_id: str | None = None) -> PointCloud:
    """Read a velodyne ``.bin`` scan: consecutive float32 (x, y, z, reflectance)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) % SCAN_RECORD_BYTES != 0:
        raise FormatError(
            f"{path}: {len(raw)} bytes is not a multiple of {SCAN_RECORD_BYTES}"
        )
    records = np.frombuffer(raw, dtype="<f4").reshape(-1, 4).astype(np.float64)
    return PointCloud(
        points=records[:, :3],
        intensities=records[:, 3],
        frame_id=frame_id if frame_id is not None else str(path),
    )


def save_kitti_scan(cloud: PointCloud, path) -> None:
    records = np.empty((len(cloud), 4), dtype="<f4")
    records[:, :3] = cloud.points
    records[:, 3] = cloud.intensities
    with open(path, "wb") as fh:
        fh.write(records.tobytes(order="C"))


def load_kitti_poses(path) -> list[RigidTransform]:
    """Read a pose file: one row-major 3x4 matrix (12 numbers) per line."""
    poses = []
    with open(path, "r", encoding="ascii") as fh:
        for lineno, line in enumerate(fh, start=1):
            tokens = line.split()
            if not tokens:
                continue
            if len(tokens) != 12:
                raise FormatError(f"{path}:{lineno}: expected 12 values, got {len(tokens)}")
            try:
                values = np.array([float(t) for t in tokens], dtype=np.float64)
            except ValueError:
                raise FormatError(f"{path}:{lineno}: non-numeric pose entry") from None
            mat = np.eye(4)
            mat[:3, :] = values.reshape(3, 4)
            try:
                poses.append(RigidTransform(mat))
            except ArgumentError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
    return poses


def save_kitti_poses(poses, path) -> None:
    # repr() gives the shortest decimal that parses back to the same float,
    # so save -> load round-trips values exactly
    with open(path, "w", encoding="ascii") as fh:
        for pose in poses:
            fh.write(" ".join(repr(float(v)) for v in pose.matrix[:3, :].reshape(-1)) + "\n")


# ---------------------------------------------------------------------------
# smoothness and key-points
# ---------------------------------------------------------------------------

def smoothness(cloud: PointCloud, index: int, neighborhood_size: int = DEFAULT_NEIGHBORHOOD) -> float:
    """Normalized magnitude of the summed offsets to the nearest neighbors.

    Near zero on locally symmetric (planar) neighborhoods, large on edges.
    Raises DegeneratePointError for points within ORIGIN_EPS of the origin.
    """
    if len(cloud) <= neighborhood_size:
        raise InsufficientPointsError(
            f"cloud has {len(cloud)} points, need > {neighborhood_size}"
        )
    point = cloud.points[index]
    norm = np.linalg.norm(point)
    if norm <= ORIGIN_EPS:
        raise DegeneratePointError(f"point {index} is within {ORIGIN_EPS} m of the origin")
    neighbors = _neighbor_indices(cloud, np.array([index]), neighborhood_size)[0]
    diff_sum = neighborhood_size * point - cloud.points[neighbors].sum(axis=0)
    return float(np.linalg.norm(diff_sum) / (neighborhood_size * norm))


def _neighbor_indices(cloud: PointCloud, indices: np.ndarray, k: int) -> np.ndarray:
    """k nearest neighbors per query point, excluding the point's own index."""
    _, idx = cloud.tree.query(cloud.points[indices], k=k + 1)
    idx = np.atleast_2d(idx)
    out = np.empty((len(indices), k), dtype=np.intp)
    for row, own in enumerate(indices):
        cand = idx[row]
        keep = cand[cand != own]
        out[row] = keep[:k] if len(keep) >= k else cand[:k]
    return out


def smoothness_field(cloud: PointCloud, neighborhood_size: int = DEFAULT_NEIGHBORHOOD):
    """Vectorized smoothness for every point.

    Returns ``(values, valid)``; points within ORIGIN_EPS of the origin are
    flagged invalid and skipped by key-point selection.
    """
    n = len(cloud)
    if n <= neighborhood_size:
        raise InsufficientPointsError(
            f"cloud has {n} points, need > {neighborhood_size}"
        )
    norms = np.linalg.norm(cloud.points, axis=1)
    valid = norms > ORIGIN_EPS
    neighbors = _neighbor_indices(cloud, np.arange(n), neighborhood_size)
    sums = neighborhood_size * cloud.points - cloud.points[neighbors].sum(axis=1)
    values = np.zeros(n)
    values[valid] = np.linalg.norm(sums[valid], axis=1) / (neighborhood_size * norms[valid])
    return values, valid


def select_keypoints(
    cloud: PointCloud,
    count: int,
    neighborhood_size: int = DEFAULT_NEIGHBORHOOD,
    min_separation: float | None = None,
) -> list[KeyPoint]:
    """Pick ``count`` key-points: the sharpest ceil(count/2) and the most
    planar floor(count/2), ranked by smoothness with ties broken by index.

    ``min_separation`` optionally suppresses candidates within that radius of
    an already selected key-point (off by default).
    """
    values, valid = smoothness_field(cloud, neighborhood_size)
    valid_idx = np.flatnonzero(valid)
    if len(valid_idx) < count:
        raise InsufficientPointsError(
            f"{len(valid_idx)} valid points < requested {count} key-points"
        )
    n_sharp = (count + 1) // 2
    n_planar = count // 2
    order_desc = valid_idx[np.lexsort((valid_idx, -values[valid_idx]))]
    order_asc = valid_idx[np.lexsort((valid_idx, values[valid_idx]))]

    chosen: list[tuple[int, KeyPointKind]] = []
    taken: set[int] = set()

    def accept(candidates, wanted, kind):
        positions = [cloud.points[i] for i, _ in chosen]
        got = 0
        for i in candidates:
            if got == wanted:
                break
            if i in taken:
                continue
            if min_separation is not None and positions:
                gap = np.linalg.norm(np.asarray(positions) - cloud.points[i], axis=1)
                if np.min(gap) < min_separation:
                    continue
            taken.add(i)
            chosen.append((int(i), kind))
            positions.append(cloud.points[i])
            got += 1
        if got < wanted:
            raise InsufficientPointsError(
                f"only {got} of {wanted} {kind.value} key-points satisfiable"
            )

    accept(order_desc, n_sharp, KeyPointKind.SHARP)
    accept(order_asc, n_planar, KeyPointKind.PLANAR)
    return [
        KeyPoint(position=cloud.points[i], smoothness=float(values[i]), kind=kind, index=i)
        for i, kind in chosen
    ]


def keypoint_positions(keypoints) -> np.ndarray:
    return np.array([kp.position for kp in keypoints], dtype=np.float64).reshape(-1, 3)


# ---------------------------------------------------------------------------
# pillars
# ---------------------------------------------------------------------------

def sample_pillar(
    cloud: PointCloud, keypoint: KeyPoint, capacity: int, radius: float
) -> Pillar:
    """Fill a pillar with the ``capacity`` nearest cloud points inside ``radius``.

    Members are sorted by ascending distance (ties by point index); unused
    slots stay zero. An empty pillar is legal and centers on the key-point.
    """
    if capacity < 1:
        raise ArgumentError("pillar capacity must be >= 1")
    if radius <= 0.0:
        raise ArgumentError("pillar radius must be positive")
    k = min(capacity, len(cloud))
    members = np.zeros((capacity, 4))
    real = 0
    if k > 0:
        dist, idx = cloud.tree.query(keypoint.position, k=k)
        dist = np.atleast_1d(dist)
        idx = np.atleast_1d(idx)
        inside = dist < radius
        dist, idx = dist[inside], idx[inside]
        order = np.lexsort((idx, dist))
        idx = idx[order]
        real = len(idx)
        members[:real, :3] = cloud.points[idx]
        members[:real, 3] = cloud.intensities[idx]
    centroid = members[:real, :3].mean(axis=0) if real else np.array(keypoint.position)
    return Pillar(keypoint=keypoint, centroid=centroid, members=members, real_count=real)


def sample_pillars(cloud: PointCloud, keypoints, capacity: int, radius: float) -> list[Pillar]:
    return [sample_pillar(cloud, kp, capacity, radius) for kp in keypoints]


# ---------------------------------------------------------------------------
# ground-truth labels
# ---------------------------------------------------------------------------

def label_correspondences(
    pair: FramePair,
    src_keypoints,
    tgt_keypoints,
    match_radius: float = DEFAULT_MATCH_RADIUS,
    unmatch_radius: float = DEFAULT_UNMATCH_RADIUS,
) -> CorrespondenceLabels:
    """Label mutual nearest neighbors closer than ``match_radius`` as matches,
    key-points farther than ``unmatch_radius`` from everything as unmatched,
    and the band in between as ignored.
    """
    if not match_radius < unmatch_radius:
        raise ArgumentError("match_radius must be smaller than unmatch_radius")
    gt = pair.gt_transform
    if not isinstance(gt, RigidTransform):
        raise ArgumentError("gt_transform must be a RigidTransform")
    src = gt.apply(keypoint_positions(src_keypoints))
    tgt = keypoint_positions(tgt_keypoints)
    if len(src) == 0 or len(tgt) == 0:
        raise ArgumentError("both key-point sets must be nonempty")

    # brute-force distances keep tie-breaking exact (argmin picks lowest index)
    delta = src[:, None, :] - tgt[None, :, :]
    dists = np.linalg.norm(delta, axis=2)
    nn_of_src = dists.argmin(axis=1)
    nn_of_tgt = dists.argmin(axis=0)
    d_src = dists[np.arange(len(src)), nn_of_src]
    d_tgt = dists[nn_of_tgt, np.arange(len(tgt))]

    matched = set()
    for i in range(len(src)):
        j = nn_of_src[i]
        if nn_of_tgt[j] == i and dists[i, j] < match_radius:
            matched.add((i, int(j)))
    matched_rows = {i for i, _ in matched}
    matched_cols = {j for _, j in matched}
    unmatched_rows = {
        i for i in range(len(src)) if i not in matched_rows and d_src[i] > unmatch_radius
    }
    unmatched_cols = {
        j for j in range(len(tgt)) if j not in matched_cols and d_tgt[j] > unmatch_radius
    }
    ignored_rows = set(range(len(src))) - matched_rows - unmatched_rows
    ignored_cols = set(range(len(tgt))) - matched_cols - unmatched_cols
    return CorrespondenceLabels(
        matched=frozenset(matched),
        unmatched_rows=frozenset(unmatched_rows),
        unmatched_cols=frozenset(unmatched_cols),
        ignored_rows=frozenset(ignored_rows),
        ignored_cols=frozenset(ignored_cols),
    )


# ---------------------------------------------------------------------------
# synthetic scenes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SceneConfig:
    """Desk-scale scene generator settings.

    The scene is a structured mock interior (floor, wall, thin poles) so the
    smoothness field produces both planar and edge-like points. Source and
    target clouds sample shifted windows of the same scene; ``overlap`` is the
    shared fraction of each window.
    """

    point_count: int = 2000
    overlap: float = 0.8
    rotation_bound: float = 0.1      # radians
    translation_bound: float = 0.5   # meters
    noise_sigma: float = 0.005       # meters, per cloud
    window: float = 12.0             # window length along x, meters
    width: float = 8.0               # scene width along y
    wall_height: float = 2.5
    pole_count: int = 12
    frame_distance: int = 1

    def __post_init__(self):
        if not 0.0 < self.overlap <= 1.0:
            raise ArgumentError("overlap fraction must be in (0, 1]")
        if self.point_count < 1:
            raise ArgumentError("point_count must be positive")
        if self.rotation_bound < 0 or self.translation_bound < 0 or self.noise_sigma < 0:
            raise ArgumentError("bounds and noise sigma must be non-negative")


def _build_scene(rng: np.random.Generator, config: SceneConfig):
    """Deterministic structured scene: returns (points, intensities)."""
    length = (2.0 - config.overlap) * config.window
    n = config.point_count
    n_floor = n // 2
    n_wall = n // 4
    n_pole = n - n_floor - n_wall

    # keep everything away from the sensor origin (smoothness denominator)
    x0, y0, z0 = 3.0, 2.0, 0.5

    floor = np.empty((n_floor, 3))
    floor[:, 0] = x0 + rng.uniform(0.0, length, n_floor)
    floor[:, 1] = y0 + rng.uniform(0.0, config.width, n_floor)
    # gentle undulation: a flat plane makes the smoothness ranking of floor
    # points a pure noise lottery, so the two frames would select disjoint
    # planar key-points; curvature keeps ranks stable across frames
    floor[:, 2] = z0 + 0.15 * np.sin(2.2 * floor[:, 0]) * np.sin(1.7 * floor[:, 1])

    wall = np.empty((n_wall, 3))
    wall[:, 0] = x0 + rng.uniform(0.0, length, n_wall)
    wall[:, 2] = z0 + rng.uniform(0.0, config.wall_height, n_wall)
    wall[:, 1] = y0 + 0.1 * np.sin(1.9 * wall[:, 0]) * np.sin(2.3 * wall[:, 2])

    pole_x = x0 + rng.uniform(0.0, length, config.pole_count)
    pole_y = y0 + rng.uniform(0.5, config.width - 0.5, config.pole_count)
    per_pole = np.full(config.pole_count, n_pole // config.pole_count)
    per_pole[: n_pole % config.pole_count] += 1
    pole_rows = []
    pole_intensity = []
    for index, (px, py, cnt) in enumerate(zip(pole_x, pole_y, per_pole)):
        seg = np.empty((cnt, 3))
        seg[:, 0] = px
        seg[:, 1] = py
        seg[:, 2] = z0 + rng.uniform(0.0, 1.8, cnt)
        pole_rows.append(seg)
        # distinct per-pole reflectance, like signage or markers
        pole_intensity.append(np.full(cnt, 0.55 + 0.4 * (index % 8) / 7.0))
    poles = np.concatenate(pole_rows) if pole_rows else np.zeros((0, 3))

    points = np.concatenate([floor, wall, poles])
    points += rng.normal(0.0, 0.01, points.shape)  # shared surface roughness
    intensities = np.concatenate(
        [
            np.full(n_floor, 0.2),
            np.full(n_wall, 0.4),
            np.concatenate(pole_intensity) if pole_intensity else np.zeros(0),
        ]
    )
    intensities = np.clip(intensities + rng.normal(0.0, 0.02, len(intensities)), 0.0, 1.0)
    return points, intensities


def generate_synthetic_pair(seed: int, config: SceneConfig | None = None) -> FramePair:
    """Deterministic synthetic frame pair with a known rigid transform.

    Both clouds sample the same underlying scene points, so with zero noise
    and full overlap they are identical; the ground-truth transform maps the
    source frame into the target frame.
    """
    config = config or SceneConfig()
    rng = np.random.default_rng(seed)
    points, intensities = _build_scene(rng, config)

    x_min = points[:, 0].min() if len(points) else 0.0
    src_lo = x_min
    src_hi = src_lo + config.window
    tgt_lo = src_lo + (1.0 - config.overlap) * config.window
    tgt_hi = tgt_lo + config.window
    src_mask = (points[:, 0] >= src_lo) & (points[:, 0] <= src_hi)
    tgt_mask = (points[:, 0] >= tgt_lo) & (points[:, 0] <= tgt_hi)

    rotation = random_rotation(rng, config.rotation_bound)
    translation = rng.uniform(-config.translation_bound, config.translation_bound, 3)
    center = points.mean(axis=0)
    # rotate about the scene centroid so the two clouds stay comparable in
    # sensor range, then translate
    offset = center - rotation @ center + translation
    gt = RigidTransform.from_rotation_translation(rotation, offset)

    src_pts = points[src_mask] + rng.normal(0.0, config.noise_sigma, (src_mask.sum(), 3))
    tgt_pts = gt.apply(points[tgt_mask]) + rng.normal(
        0.0, config.noise_sigma, (tgt_mask.sum(), 3)
    )
    source = PointCloud(src_pts, intensities[src_mask], frame_id=f"synth-{seed}-src")
    target = PointCloud(tgt_pts, intensities[tgt_mask], frame_id=f"synth-{seed}-tgt")
    return FramePair(
        source=source, target=target, gt_transform=gt, frame_distance=config.frame_distance
    )
