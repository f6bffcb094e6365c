"""Multi-view object proposals from a semi-dense map.

The map is clustered at four radii ``base_eps * 2**level`` in the joint space
``[x, y, z, lam*r, lam*g, lam*b]``. Every cluster becomes a seed, is projected
into each frame, and the per-frame boxes are culled by size and by
overlap/occlusion (nearer median depth wins).
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .geometry import BoundingBox, CameraIntrinsics, Pose, enclosing_box, iou, project_many
from .mapio import FrameRecord, SemiDenseMap

N_LEVELS = 4


@dataclass(frozen=True)
class ObjectSeed:
    seed_id: int
    members: np.ndarray
    level: int
    centroid: np.ndarray

    def __len__(self):
        return len(self.members)


@dataclass(frozen=True)
class Proposal:
    seed_id: int
    frame_id: int
    box: BoundingBox
    median_depth: float
    visible_points: int

    def to_json(self) -> dict:
        return {"frame_id": self.frame_id, "seed_id": self.seed_id,
                "box": list(self.box.as_tuple()), "median_depth": self.median_depth,
                "visible_points": self.visible_points}

    @classmethod
    def from_json(cls, d: dict) -> "Proposal":
        return cls(int(d["seed_id"]), int(d["frame_id"]), BoundingBox(*d["box"]),
                   float(d["median_depth"]), int(d.get("visible_points", 0)))


def joint_space(cloud: SemiDenseMap, color_weight: float) -> np.ndarray:
    return np.hstack([cloud.xyz, color_weight * cloud.rgb])


def dbscan(points: np.ndarray, eps: float, min_pts: int) -> np.ndarray:
    """DBSCAN labels (``-1`` = noise), scanning points in index order.

    Border points join the first cluster that reaches them.
    """
    n = len(points)
    labels = np.full(n, -1, dtype=np.int64)
    if n == 0:
        return labels
    tree = cKDTree(points)
    counts = tree.query_ball_point(points, eps, return_length=True)
    core = counts >= min_pts
    cluster = 0
    for i in range(n):
        if labels[i] != -1 or not core[i]:
            continue
        labels[i] = cluster
        queue = deque([i])
        while queue:
            p = queue.popleft()
            for q in sorted(tree.query_ball_point(points[p], eps)):
                if labels[q] == -1:
                    labels[q] = cluster
                    if core[q]:
                        queue.append(q)
        cluster += 1
    return labels


def density_cluster(cloud: SemiDenseMap, base_eps: float, color_weight: float = 0.5,
                    min_pts: int = 10, n_levels: int = N_LEVELS) -> List[ObjectSeed]:
    if base_eps <= 0:
        raise ValueError("base_eps must be positive")
    if min_pts < 3:
        raise ValueError("min_pts must be at least 3")
    if len(cloud) == 0:
        return []
    F = joint_space(cloud, color_weight)
    seeds: List[ObjectSeed] = []
    for level in range(n_levels):
        labels = dbscan(F, base_eps * 2 ** level, min_pts)
        for c in range(labels.max() + 1):
            members = np.nonzero(labels == c)[0]
            # a border point claimed earlier can leave a cluster short
            if len(members) < min_pts:
                continue
            seeds.append(ObjectSeed(len(seeds), members, level, cloud.xyz[members].mean(axis=0)))
    return seeds


def project_seed(seed: ObjectSeed, cloud: SemiDenseMap, pose: Pose, intr: CameraIntrinsics,
                 frame_id: int = -1, min_visible_points: int = 15) -> Optional[Proposal]:
    uv, z, ok = project_many(cloud.xyz[seed.members], pose, intr)
    n_vis = int(ok.sum())
    if n_vis < min_visible_points:
        return None
    box = enclosing_box(uv[ok]).clipped(intr.width, intr.height)
    return Proposal(seed.seed_id, frame_id, box, float(np.median(z[ok])), n_vis)


def filter_proposals(proposals: Sequence[Proposal], min_size: float = 20.0,
                     iou_thresh: float = 0.5) -> List[Proposal]:
    """Drop small boxes, then greedily keep nearer boxes over overlapping ones."""
    frames = {p.frame_id for p in proposals}
    if len(frames) > 1:
        raise ValueError("filter_proposals expects proposals from a single frame")
    big = [p for p in proposals if p.box.width >= min_size and p.box.height >= min_size]
    big.sort(key=lambda p: (p.median_depth, -p.visible_points, p.seed_id))
    kept: List[Proposal] = []
    for p in big:
        if all(iou(p.box, q.box) <= iou_thresh for q in kept):
            kept.append(p)
    return kept


def propose_frame(seeds: Sequence[ObjectSeed], cloud: SemiDenseMap, frame: FrameRecord,
                  intr: CameraIntrinsics, min_visible_points: int = 15, min_size: float = 20.0,
                  iou_thresh: float = 0.5) -> List[Proposal]:
    raw = []
    for s in seeds:
        p = project_seed(s, cloud, frame.pose, intr, frame.frame_id, min_visible_points)
        if p is not None:
            raw.append(p)
    return filter_proposals(raw, min_size, iou_thresh)


def generate_proposals(cloud: SemiDenseMap, frames: Iterable[FrameRecord], intr: CameraIntrinsics,
                       base_eps: float, color_weight: float = 0.5, min_pts: int = 10,
                       min_visible_points: int = 15, min_size: float = 20.0,
                       iou_thresh: float = 0.5):
    """Cluster once, then project and filter per frame.

    Returns ``(seeds, {frame_id: [Proposal, ...]})``.
    """
    seeds = density_cluster(cloud, base_eps, color_weight, min_pts)
    per_frame = {f.frame_id: propose_frame(seeds, cloud, f, intr, min_visible_points,
                                           min_size, iou_thresh)
                 for f in frames}
    return seeds, per_frame


def write_proposals(per_frame: Dict[int, List[Proposal]], path) -> None:
    with open(path, "w") as fh:
        for fid in sorted(per_frame):
            for p in per_frame[fid]:
                fh.write(json.dumps(p.to_json(), sort_keys=True) + "\n")


def read_proposals(path) -> Dict[int, List[Proposal]]:
    out: Dict[int, List[Proposal]] = {}
    with open(path) as fh:
        for i, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                p = Proposal.from_json(json.loads(line))
            except (ValueError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{i}: malformed proposal ({exc})") from None
            out.setdefault(p.frame_id, []).append(p)
    return out
