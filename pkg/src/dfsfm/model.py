"""Feature tracks and the mutable reconstruction state."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from .geometry import MIN_DEPTH, CameraIntrinsics, Observation2D, Point3D, Pose, project_points


@dataclass
class FeatureTrack:
    """Observations of one scene point, at most one per image."""

    observations: list[Observation2D] = field(default_factory=list)
    # per-image keypoint uncertainty (px^2) left by the track refiner
    variances: dict[int, float] = field(default_factory=dict)
    refined: bool = False

    def __len__(self) -> int:
        return len(self.observations)

    def __iter__(self):
        return iter(self.observations)

    @property
    def image_ids(self) -> list[int]:
        return [o.image_id for o in self.observations]

    def get(self, image_id: int) -> Optional[Observation2D]:
        for o in self.observations:
            if o.image_id == image_id:
                return o
        return None

    def has_duplicate_images(self) -> bool:
        ids = self.image_ids
        return len(ids) != len(set(ids))

    def copy(self) -> "FeatureTrack":
        return FeatureTrack([Observation2D(o.image_id, o.xy.copy(), o.confidence)
                             for o in self.observations], dict(self.variances), self.refined)


# The coarse stage and the refinement stage share one track type.
CoarseTrack = FeatureTrack


@dataclass
class SceneModel:
    cameras: dict[int, CameraIntrinsics] = field(default_factory=dict)
    image_names: dict[int, str] = field(default_factory=dict)
    poses: dict[int, Pose] = field(default_factory=dict)
    points: dict[int, Point3D] = field(default_factory=dict)
    tracks: dict[int, FeatureTrack] = field(default_factory=dict)
    registration_order: list[int] = field(default_factory=list)
    # 2D keypoints of registered images that currently belong to no track
    unassigned: dict[int, np.ndarray] = field(default_factory=dict)
    intrinsics_known: bool = False
    # (fully fixed image, image with one fixed translation component)
    gauge: Optional[tuple[int, int]] = None
    next_point_id: int = 1

    # -- points ------------------------------------------------------------

    def add_point(self, xyz, track: FeatureTrack, track_id: int = -1, color=None) -> int:
        pid = self.next_point_id
        self.next_point_id += 1
        self.points[pid] = Point3D(xyz, track_id, color)
        self.tracks[pid] = track
        return pid

    def remove_point(self, pid: int, to_pool: bool = True) -> None:
        track = self.tracks.pop(pid)
        self.points.pop(pid)
        if to_pool:
            for o in track.observations:
                self.add_unassigned(o.image_id, o.xy)

    # -- images ------------------------------------------------------------

    def register(self, image_id: int, pose: Pose) -> None:
        if image_id not in self.poses:
            self.registration_order.append(image_id)
        self.poses[image_id] = pose

    @property
    def registered(self) -> list[int]:
        return sorted(self.poses)

    def add_unassigned(self, image_id: int, xy) -> None:
        xy = np.asarray(xy, dtype=float).reshape(-1, 2)
        if len(xy) == 0:
            return
        pool = self.unassigned.get(image_id)
        self.unassigned[image_id] = xy.copy() if pool is None else np.vstack([pool, xy])

    # -- queries -----------------------------------------------------------

    def observation_count(self) -> int:
        return sum(len(t) for t in self.tracks.values())

    def points_in_image(self) -> dict[int, set[int]]:
        out: dict[int, set[int]] = {i: set() for i in self.poses}
        for pid, track in self.tracks.items():
            for o in track.observations:
                out.setdefault(o.image_id, set()).add(pid)
        return out

    def observation_arrays(self, point_ids: Optional[Iterable[int]] = None):
        """Flatten observations into ``(point_ids, image_ids, xy)`` arrays."""
        pids, iids, xys = [], [], []
        for pid in (self.tracks if point_ids is None else point_ids):
            for o in self.tracks[pid].observations:
                pids.append(pid)
                iids.append(o.image_id)
                xys.append(o.xy)
        return (np.array(pids, dtype=int), np.array(iids, dtype=int),
                np.array(xys, dtype=float).reshape(-1, 2))

    def reprojection_errors(self) -> np.ndarray:
        """Pixel error of every observation (``inf`` behind the camera)."""
        pids, iids, xy = self.observation_arrays()
        err = np.empty(len(pids))
        for image_id in np.unique(iids):
            sel = iids == image_id
            X = np.array([self.points[p].xyz for p in pids[sel]])
            uv, z = project_points(X, self.poses[image_id], self.cameras[image_id])
            err[sel] = np.where(z > MIN_DEPTH, np.linalg.norm(uv - xy[sel], axis=1), np.inf)
        return err

    def mean_reprojection_error(self) -> float:
        err = self.reprojection_errors()
        return float(err.mean()) if len(err) else 0.0

    def check_invariants(self) -> None:
        for pid, track in self.tracks.items():
            if pid not in self.points:
                raise AssertionError(f"track {pid} has no point")
            if len(track) < 2:
                raise AssertionError(f"track {pid} has {len(track)} observations")
            if track.has_duplicate_images():
                raise AssertionError(f"track {pid} repeats an image")
            for o in track.observations:
                if o.image_id not in self.poses:
                    raise AssertionError(f"track {pid} observes unregistered image {o.image_id}")

    def copy(self) -> "SceneModel":
        return copy.deepcopy(self)
