"""Reading and writing scene artifacts and trained-model containers.

Scene directory layout::

    cloud.ply            ASCII PLY, x y z red green blue [keyframe]
    trajectory.txt       frame_id tx ty tz qx qy qz qw   (camera-to-world)
    camera.json          fx fy cx cy width height
    images/<frame_id>.png (or .ppm)
    annotations.jsonl    {"frame_id", "box": [x0, y0, x1, y1], "label"[, "object_id"]}

A model container is a directory holding ``manifest.json`` plus one raw
little-endian float32 row-major file per matrix.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
from PIL import Image

from .geometry import BoundingBox, CameraIntrinsics, Pose

FORMAT_VERSION = "1"
IMAGE_SUFFIXES = (".png", ".ppm")


class DataError(Exception):
    """Malformed or inconsistent input data."""


@dataclass
class SemiDenseMap:
    xyz: np.ndarray
    rgb: np.ndarray
    keyframe: Optional[np.ndarray] = None

    def __post_init__(self):
        self.xyz = np.asarray(self.xyz, dtype=float).reshape(-1, 3)
        self.rgb = np.asarray(self.rgb, dtype=float).reshape(-1, 3)
        if len(self.xyz) != len(self.rgb):
            raise ValueError("xyz and rgb lengths differ")
        if not np.all(np.isfinite(self.xyz)):
            raise ValueError("non-finite point coordinates")
        if len(self.rgb) and (self.rgb.min() < 0 or self.rgb.max() > 1):
            raise ValueError("colors must lie in [0, 1]")
        if self.keyframe is not None:
            self.keyframe = np.asarray(self.keyframe, dtype=np.int64).reshape(-1)
            if len(self.keyframe) != len(self.xyz):
                raise ValueError("keyframe ids must match point count")

    def __len__(self):
        return len(self.xyz)


@dataclass(frozen=True)
class FrameRecord:
    frame_id: int
    image_path: str
    pose: Pose
    timestamp: Optional[float] = None


@dataclass(frozen=True)
class Annotation:
    frame_id: int
    box: BoundingBox
    label: str
    object_id: Optional[int] = None

    def __post_init__(self):
        if not self.label:
            raise ValueError("annotation label must be nonempty")

    def to_json(self) -> dict:
        d = {"frame_id": self.frame_id, "box": list(self.box.as_tuple()), "label": self.label}
        if self.object_id is not None:
            d["object_id"] = self.object_id
        return d


@dataclass
class Scene:
    cloud: SemiDenseMap
    frames: List[FrameRecord]
    annotations: List[Annotation]
    intrinsics: CameraIntrinsics

    def __iter__(self):
        # allows ``cloud, frames, annotations = load_scene(path)``
        return iter((self.cloud, self.frames, self.annotations))

    def frame(self, frame_id: int) -> FrameRecord:
        for f in self.frames:
            if f.frame_id == frame_id:
                return f
        raise KeyError(frame_id)


# ---------------------------------------------------------------- point cloud

def save_ply(cloud: SemiDenseMap, path) -> None:
    path = Path(path)
    colors = np.rint(cloud.rgb * 255).astype(int)
    lines = ["ply", "format ascii 1.0", f"element vertex {len(cloud)}",
             "property double x", "property double y", "property double z",
             "property uchar red", "property uchar green", "property uchar blue"]
    if cloud.keyframe is not None:
        lines.append("property int keyframe")
    lines.append("end_header")
    for i in range(len(cloud)):
        x, y, z = (float(v) for v in cloud.xyz[i])
        row = f"{x!r} {y!r} {z!r} {colors[i, 0]} {colors[i, 1]} {colors[i, 2]}"
        if cloud.keyframe is not None:
            row += f" {cloud.keyframe[i]}"
        lines.append(row)
    path.write_text("\n".join(lines) + "\n")


def load_ply(path) -> SemiDenseMap:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise DataError(f"{path}: cannot read ({exc})") from exc
    lines = text.splitlines()
    if not lines or lines[0].strip() != "ply":
        raise DataError(f"{path}:1: not a PLY file")
    props: List[str] = []
    n_vertex = None
    header_end = None
    for i, line in enumerate(lines[1:], start=2):
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "format" and tok[1] != "ascii":
            raise DataError(f"{path}:{i}: only ASCII PLY is supported")
        elif tok[0] == "element":
            if tok[1] != "vertex":
                raise DataError(f"{path}:{i}: unsupported element '{tok[1]}'")
            n_vertex = int(tok[2])
        elif tok[0] == "property":
            props.append(tok[-1])
        elif tok[0] == "end_header":
            header_end = i
            break
    if header_end is None or n_vertex is None:
        raise DataError(f"{path}: incomplete PLY header")
    for required in ("x", "y", "z", "red", "green", "blue"):
        if required not in props:
            raise DataError(f"{path}: missing property '{required}'")
    body = [ln for ln in lines[header_end:] if ln.strip()]
    if len(body) != n_vertex:
        raise DataError(f"{path}: header declares {n_vertex} vertices, found {len(body)}")
    data = np.empty((n_vertex, len(props)))
    for j, line in enumerate(body):
        try:
            vals = [float(v) for v in line.split()]
        except ValueError:
            raise DataError(f"{path}:{header_end + j + 1}: malformed vertex row") from None
        if len(vals) != len(props):
            raise DataError(f"{path}:{header_end + j + 1}: expected {len(props)} values, got {len(vals)}")
        data[j] = vals
    col = {p: k for k, p in enumerate(props)}
    xyz = data[:, [col["x"], col["y"], col["z"]]]
    rgb = data[:, [col["red"], col["green"], col["blue"]]] / 255.0
    kf = data[:, col["keyframe"]].astype(np.int64) if "keyframe" in col else None
    try:
        return SemiDenseMap(xyz, rgb, kf)
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from exc


# ----------------------------------------------------------------- trajectory

def save_trajectory(frames: List[FrameRecord], path) -> None:
    rows = []
    for f in frames:
        w, x, y, z = (float(v) for v in f.pose.rotation)
        tx, ty, tz = (float(v) for v in f.pose.translation)
        rows.append(f"{f.frame_id} {tx!r} {ty!r} {tz!r} {x!r} {y!r} {z!r} {w!r}")
    Path(path).write_text("\n".join(rows) + ("\n" if rows else ""))


def load_trajectory(path) -> List[tuple]:
    """Return ``[(frame_id, Pose), ...]`` in file order."""
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise DataError(f"{path}: cannot read ({exc})") from exc
    out = []
    seen = set()
    for i, line in enumerate(lines, start=1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        tok = s.split()
        if len(tok) != 8:
            raise DataError(f"{path}:{i}: expected 8 fields, got {len(tok)}")
        try:
            fid = int(tok[0])
            tx, ty, tz, qx, qy, qz, qw = (float(v) for v in tok[1:])
            pose = Pose((qw, qx, qy, qz), (tx, ty, tz))
        except ValueError as exc:
            raise DataError(f"{path}:{i}: {exc}") from None
        if fid in seen:
            raise DataError(f"{path}:{i}: duplicate frame id {fid}")
        if out and fid < out[-1][0]:
            raise DataError(f"{path}:{i}: frame ids must be increasing")
        seen.add(fid)
        out.append((fid, pose))
    return out


# --------------------------------------------------------------------- camera

def save_intrinsics(intr: CameraIntrinsics, path) -> None:
    Path(path).write_text(json.dumps(
        {"fx": intr.fx, "fy": intr.fy, "cx": intr.cx, "cy": intr.cy,
         "width": intr.width, "height": intr.height}, indent=1, sort_keys=True) + "\n")


def load_intrinsics(path) -> CameraIntrinsics:
    path = Path(path)
    try:
        d = json.loads(path.read_text())
        return CameraIntrinsics(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                                int(d["width"]), int(d["height"]))
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise DataError(f"{path}: invalid camera file ({exc})") from exc


# --------------------------------------------------------------------- images

def load_image(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()
    except OSError as exc:
        raise DataError(f"{path}: cannot read image ({exc})") from exc


def save_image(img: np.ndarray, path) -> None:
    # fixed PNG options keep output byte-identical across runs
    Image.fromarray(np.asarray(img, dtype=np.uint8)).save(path, optimize=False, compress_level=6)


# ---------------------------------------------------------------- annotations

def save_annotations(annotations: List[Annotation], path) -> None:
    with open(path, "w") as fh:
        for a in annotations:
            fh.write(json.dumps(a.to_json(), sort_keys=True) + "\n")


def load_annotations(path, intr: Optional[CameraIntrinsics] = None) -> List[Annotation]:
    path = Path(path)
    out = []
    with open(path) as fh:
        for i, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                box = BoundingBox(*[float(v) for v in d["box"]])
                ann = Annotation(int(d["frame_id"]), box, str(d["label"]),
                                 None if d.get("object_id") is None else int(d["object_id"]))
            except (ValueError, KeyError, TypeError) as exc:
                raise DataError(f"{path}:{i}: malformed annotation ({exc})") from None
            if intr is not None and not box.within(intr.width, intr.height):
                raise DataError(f"{path}:{i}: box {box.as_tuple()} outside image bounds")
            out.append(ann)
    return out


# ---------------------------------------------------------------------- scene

def _find_images(directory: Path) -> Dict[int, Path]:
    found = {}
    if not directory.is_dir():
        return found
    for p in sorted(directory.iterdir()):
        if p.suffix.lower() in IMAGE_SUFFIXES:
            try:
                fid = int(p.stem)
            except ValueError:
                continue
            found[fid] = p
    return found


def load_scene(directory) -> Scene:
    """Load and cross-validate a scene directory."""
    d = Path(directory)
    if not d.is_dir():
        raise DataError(f"{d}: scene directory does not exist")
    for name in ("cloud.ply", "trajectory.txt", "camera.json"):
        if not (d / name).is_file():
            raise DataError(f"{d / name}: missing")
    intr = load_intrinsics(d / "camera.json")
    cloud = load_ply(d / "cloud.ply")
    traj = load_trajectory(d / "trajectory.txt")
    images = _find_images(d / "images")
    if len(traj) != len(images):
        raise DataError(f"{d}: frame count mismatch: trajectory has {len(traj)} rows, "
                        f"images/ has {len(images)} files")
    frames = []
    for fid, pose in traj:
        if fid not in images:
            raise DataError(f"{d / 'trajectory.txt'}: frame {fid} has no image in {d / 'images'}")
        frames.append(FrameRecord(fid, str(images[fid]), pose))
    annotations: List[Annotation] = []
    if (d / "annotations.jsonl").is_file():
        annotations = load_annotations(d / "annotations.jsonl", intr)
        ids = set(images)
        for a in annotations:
            if a.frame_id not in ids:
                raise DataError(f"{d / 'annotations.jsonl'}: unknown frame id {a.frame_id}")
    return Scene(cloud, frames, annotations, intr)


def save_scene(scene: Scene, directory, images: Optional[Dict[int, np.ndarray]] = None) -> None:
    """Write a scene; ``images`` maps frame id to an RGB array written as PNG."""
    d = Path(directory)
    (d / "images").mkdir(parents=True, exist_ok=True)
    save_intrinsics(scene.intrinsics, d / "camera.json")
    save_ply(scene.cloud, d / "cloud.ply")
    save_trajectory(scene.frames, d / "trajectory.txt")
    save_annotations(scene.annotations, d / "annotations.jsonl")
    if images:
        for fid, img in images.items():
            save_image(img, d / "images" / f"{fid:06d}.png")


# ------------------------------------------------------------ model container

@dataclass
class ModelContainer:
    """Named float32 matrices plus a JSON-serialisable manifest."""

    matrices: Dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    version: str = FORMAT_VERSION

    def add(self, name: str, array) -> None:
        a = np.asarray(array)
        if a.ndim == 1:
            a = a.reshape(1, -1)
        if a.ndim != 2:
            raise ValueError(f"matrix '{name}' must be 1-D or 2-D, got shape {a.shape}")
        self.matrices[name] = np.ascontiguousarray(a, dtype="<f4")

    def manifest(self) -> dict:
        return {
            "format_version": self.version,
            "components": [
                {"name": n, "rows": int(m.shape[0]), "cols": int(m.shape[1]),
                 "dtype": "float32-le", "file": f"{n}.f32"}
                for n, m in sorted(self.matrices.items())
            ],
            "meta": self.meta,
        }


def save_model(container: ModelContainer, path) -> Path:
    d = Path(path)
    d.mkdir(parents=True, exist_ok=True)
    manifest = container.manifest()
    for comp in manifest["components"]:
        m = container.matrices[comp["name"]]
        if m.shape != (comp["rows"], comp["cols"]):
            raise ValueError(f"matrix '{comp['name']}' shape does not match manifest")
        (d / comp["file"]).write_bytes(np.ascontiguousarray(m, dtype="<f4").tobytes(order="C"))
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return d


def load_model(path) -> ModelContainer:
    d = Path(path)
    mpath = d / "manifest.json"
    try:
        manifest = json.loads(mpath.read_text())
    except (OSError, ValueError) as exc:
        raise DataError(f"{mpath}: cannot read manifest ({exc})") from exc
    version = manifest.get("format_version")
    if version is None:
        raise DataError(f"{mpath}: missing format_version")
    if version != FORMAT_VERSION:
        raise DataError(f"{mpath}: format version {version!r} unsupported (expected {FORMAT_VERSION!r})")
    out = ModelContainer(meta=manifest.get("meta", {}), version=version)
    for comp in manifest.get("components", []):
        f = d / comp["file"]
        rows, cols = int(comp["rows"]), int(comp["cols"])
        try:
            raw = f.read_bytes()
        except OSError as exc:
            raise DataError(f"{f}: cannot read ({exc})") from exc
        expected = rows * cols * 4
        if len(raw) != expected:
            raise DataError(f"{f}: truncated or oversized blob: expected {expected} bytes, got {len(raw)}")
        out.matrices[comp["name"]] = np.frombuffer(raw, dtype="<f4").reshape(rows, cols).copy()
    return out
