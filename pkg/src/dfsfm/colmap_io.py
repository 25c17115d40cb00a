"""Text model directory (cameras/images/points3D), PLY export and image files."""

from __future__ import annotations

import os
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image
from scipy.spatial.transform import Rotation

from .errors import InputMissingError
from .geometry import CameraIntrinsics, Observation2D, Point3D, Pose
from .model import FeatureTrack, SceneModel

FMT = "{:.9f}"


def _f(v) -> str:
    s = FMT.format(float(v))
    return "0.000000000" if s == "-0.000000000" else s


def rotation_to_quat(R: np.ndarray) -> np.ndarray:
    """``(qw, qx, qy, qz)`` with ``qw >= 0``."""
    x, y, z, w = Rotation.from_matrix(R).as_quat()
    q = np.array([w, x, y, z])
    return -q if q[0] < 0 else q


def quat_to_rotation(q) -> np.ndarray:
    w, x, y, z = q
    return Rotation.from_quat([x, y, z, w]).as_matrix()


# ---------------------------------------------------------------------------
# Writer
# ---------------------------------------------------------------------------


def _camera_line(cid: int, cam: CameraIntrinsics) -> str:
    if cam.k1 is None:
        model, params = "PINHOLE", [cam.fx, cam.fy, cam.cx, cam.cy]
    else:
        model, params = "OPENCV", [cam.fx, cam.fy, cam.cx, cam.cy, cam.k1, 0.0, 0.0, 0.0]
    return f"{cid} {model} {cam.width} {cam.height} " + " ".join(_f(p) for p in params)


def write_model(model: SceneModel, path) -> None:
    """Write ``cameras.txt``, ``images.txt`` and ``points3D.txt`` into ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    with open(path / "cameras.txt", "w", encoding="utf-8") as f:
        f.write("# CAMERA_ID MODEL WIDTH HEIGHT PARAMS[]\n")
        for iid in sorted(model.cameras):
            f.write(_camera_line(iid, model.cameras[iid]) + "\n")

    # 2D point indices per image: track observations first, then the pool
    index: dict[tuple, int] = {}
    rows: dict[int, list[str]] = {}
    for iid in sorted(model.poses):
        rows[iid] = []
    for pid in sorted(model.tracks):
        for o in model.tracks[pid].observations:
            if o.image_id not in rows:
                continue
            index[(pid, o.image_id)] = len(rows[o.image_id])
            rows[o.image_id].append(f"{_f(o.xy[0])} {_f(o.xy[1])} {pid}")
    for iid, pool in sorted(model.unassigned.items()):
        if iid in rows:
            for x, y in np.asarray(pool).reshape(-1, 2):
                rows[iid].append(f"{_f(x)} {_f(y)} -1")

    with open(path / "images.txt", "w", encoding="utf-8") as f:
        f.write("# IMAGE_ID QW QX QY QZ TX TY TZ CAMERA_ID NAME\n# POINTS2D[] as (X, Y, POINT3D_ID)\n")
        for iid in sorted(model.poses):
            pose = model.poses[iid]
            q = rotation_to_quat(pose.rotation)
            name = model.image_names.get(iid, str(iid))
            f.write(f"{iid} " + " ".join(_f(v) for v in q) + " "
                    + " ".join(_f(v) for v in pose.translation) + f" {iid} {name}\n")
            f.write(" ".join(rows[iid]) + "\n")

    errors = {}
    if model.tracks:
        err = model.reprojection_errors()
        pids, _, _ = model.observation_arrays()
        for pid in model.tracks:
            errors[pid] = float(np.mean(err[pids == pid]))
    with open(path / "points3D.txt", "w", encoding="utf-8") as f:
        f.write("# POINT3D_ID X Y Z R G B ERROR TRACK[] as (IMAGE_ID, POINT2D_IDX)\n")
        for pid in sorted(model.points):
            p = model.points[pid]
            rgb = (128, 128, 128) if p.color is None else tuple(int(c) for c in p.color)
            track = " ".join(f"{o.image_id} {index[(pid, o.image_id)]}"
                             for o in model.tracks[pid].observations)
            f.write(f"{pid} " + " ".join(_f(v) for v in p.xyz) + f" {rgb[0]} {rgb[1]} {rgb[2]} "
                    + _f(errors.get(pid, 0.0)) + f" {track}\n")


# ---------------------------------------------------------------------------
# Reader
# ---------------------------------------------------------------------------


def _data_lines(path: Path) -> list[str]:
    if not path.exists():
        raise InputMissingError(f"model file not found: {path}")
    with open(path, encoding="utf-8") as f:
        return [ln.rstrip("\n") for ln in f if not ln.startswith("#")]


def read_cameras(path) -> dict[int, CameraIntrinsics]:
    cams = {}
    for ln in _data_lines(Path(path)):
        if not ln.strip():
            continue
        parts = ln.split()
        cid, model, w, h = int(parts[0]), parts[1], int(parts[2]), int(parts[3])
        params = [float(v) for v in parts[4:]]
        if model == "PINHOLE":
            cams[cid] = CameraIntrinsics(params[0], params[1], params[2], params[3], w, h)
        elif model in ("SIMPLE_PINHOLE", "SIMPLE_RADIAL"):
            k1 = params[3] if model == "SIMPLE_RADIAL" else None
            cams[cid] = CameraIntrinsics(params[0], params[0], params[1], params[2], w, h, k1)
        elif model == "OPENCV":
            cams[cid] = CameraIntrinsics(params[0], params[1], params[2], params[3], w, h, params[4])
        else:
            raise ValueError(f"unsupported camera model {model}")
    return cams


def read_model(path) -> SceneModel:
    path = Path(path)
    if not path.is_dir():
        raise InputMissingError(f"model directory not found: {path}")
    cams = read_cameras(path / "cameras.txt")
    lines = _data_lines(path / "images.txt")
    model = SceneModel()
    points2d: dict[int, np.ndarray] = {}
    p2d_ids: dict[int, np.ndarray] = {}
    for k in range(0, len(lines) - 1, 2):
        head = lines[k].split()
        if not head:
            continue
        iid = int(head[0])
        q = np.array([float(v) for v in head[1:5]])
        t = np.array([float(v) for v in head[5:8]])
        cid = int(head[8])
        model.cameras[iid] = cams[cid]
        model.image_names[iid] = " ".join(head[9:])
        model.register(iid, Pose(quat_to_rotation(q / np.linalg.norm(q)), t))
        vals = lines[k + 1].split()
        arr = np.array([float(v) for v in vals]).reshape(-1, 3)
        points2d[iid] = arr[:, :2]
        p2d_ids[iid] = arr[:, 2].astype(np.int64)
    # cameras without a registered image are kept under their id
    for cid, cam in cams.items():
        model.cameras.setdefault(cid, cam)

    max_pid = 0
    for ln in _data_lines(path / "points3D.txt"):
        parts = ln.split()
        if not parts:
            continue
        pid = int(parts[0])
        xyz = np.array([float(v) for v in parts[1:4]])
        rgb = np.array([int(v) for v in parts[4:7]])
        track_ref = [int(v) for v in parts[8:]]
        obs = []
        for j in range(0, len(track_ref), 2):
            iid, idx = track_ref[j], track_ref[j + 1]
            obs.append(Observation2D(iid, points2d[iid][idx]))
        model.points[pid] = Point3D(xyz, pid, rgb)
        model.tracks[pid] = FeatureTrack(obs)
        max_pid = max(max_pid, pid)
    model.next_point_id = max_pid + 1
    for iid in sorted(points2d):
        pool = points2d[iid][p2d_ids[iid] < 0]
        if len(pool):
            model.add_unassigned(iid, pool)
    return model


# ---------------------------------------------------------------------------
# Point clouds and images
# ---------------------------------------------------------------------------


def write_ply(path, xyz: np.ndarray, colors: Optional[np.ndarray] = None) -> None:
    xyz = np.asarray(xyz, float).reshape(-1, 3)
    if colors is None:
        colors = np.full((len(xyz), 3), 128, dtype=int)
    colors = np.asarray(colors).reshape(-1, 3).astype(int)
    with open(path, "w", encoding="utf-8") as f:
        f.write("ply\nformat ascii 1.0\n")
        f.write(f"element vertex {len(xyz)}\n")
        f.write("property float x\nproperty float y\nproperty float z\n")
        f.write("property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n")
        for (x, y, z), (r, g, b) in zip(xyz, colors):
            f.write(f"{x:.9f} {y:.9f} {z:.9f} {r} {g} {b}\n")


def read_ply(path) -> np.ndarray:
    if not os.path.exists(path):
        raise InputMissingError(f"point cloud not found: {path}")
    with open(path, encoding="utf-8") as f:
        n = 0
        for ln in f:
            if ln.startswith("element vertex"):
                n = int(ln.split()[2])
            if ln.strip() == "end_header":
                break
        data = np.loadtxt(f, max_rows=n, ndmin=2) if n else np.zeros((0, 6))
    return data[:, :3]


def model_ply(model: SceneModel, path) -> None:
    pids = sorted(model.points)
    xyz = np.array([model.points[p].xyz for p in pids]).reshape(-1, 3)
    cols = np.array([model.points[p].color if model.points[p].color is not None else (128, 128, 128)
                     for p in pids]).reshape(-1, 3)
    write_ply(path, xyz, cols)


def save_image(path, image: np.ndarray) -> None:
    """Grayscale float image in [0, 1] stored as 16-bit PNG."""
    img = np.clip(np.asarray(image, float), 0.0, 1.0)
    Image.fromarray(np.round(img * 65535).astype(np.uint16)).save(path)


def load_image(path) -> np.ndarray:
    """Grayscale float32 image in [0, 1] from any format Pillow reads."""
    if not os.path.exists(path):
        raise InputMissingError(f"image not found: {path}")
    with Image.open(path) as im:
        if im.mode in ("I;16", "I;16B", "I;16L", "I"):
            arr = np.asarray(im, dtype=np.float64)
            scale = 65535.0 if arr.max(initial=0) <= 65535 else float(arr.max())
            return (arr / scale).astype(np.float32)
        return (np.asarray(im.convert("L"), dtype=np.float32) / 255.0)


def image_size(path) -> tuple[int, int]:
    with Image.open(path) as im:
        return im.size


def write_intrinsics(path, cameras: dict, names: dict) -> None:
    """``name fx fy cx cy width height [k1]`` per line."""
    with open(path, "w", encoding="utf-8") as f:
        for iid in sorted(cameras):
            c = cameras[iid]
            vals = [c.fx, c.fy, c.cx, c.cy]
            extra = "" if c.k1 is None else " " + _f(c.k1)
            f.write(f"{names.get(iid, iid)} " + " ".join(_f(v) for v in vals)
                    + f" {c.width} {c.height}{extra}\n")


def read_intrinsics(path) -> dict[str, CameraIntrinsics]:
    if not os.path.exists(path):
        raise InputMissingError(f"intrinsics file not found: {path}")
    out = {}
    with open(path, encoding="utf-8") as f:
        for ln in f:
            parts = ln.split()
            if not parts or parts[0].startswith("#"):
                continue
            fx, fy, cx, cy = (float(v) for v in parts[1:5])
            w, h = int(parts[5]), int(parts[6])
            k1 = float(parts[7]) if len(parts) > 7 else None
            out[parts[0]] = CameraIntrinsics(fx, fy, cx, cy, w, h, k1)
    return out
