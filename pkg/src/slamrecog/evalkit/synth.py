"""Procedural table-top scenes with exact ground truth.

Objects are textured primitives (cuboid, cylinder, sphere) resting on a
table plane at ``z = 0`` (world z up). A camera orbits the table looking at
its centre. Images are ray-cast with flat shading; the semi-dense cloud holds
points sampled on texture boundaries and geometric edges, plus clutter.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..geometry import BoundingBox, CameraIntrinsics, Pose, enclosing_box
from ..mapio import Annotation, FrameRecord, Scene, SemiDenseMap, save_scene

DEFAULT_CLASSES = ("bowl", "cap", "cereal_box", "coffee_mug", "soda_can")

# shape, texture pattern, colour A, colour B
_STYLES = (
    ("sphere", "hstripes", (0.85, 0.20, 0.20), (0.95, 0.90, 0.80)),
    ("sphere", "checker", (0.15, 0.25, 0.80), (0.95, 0.85, 0.20)),
    ("cuboid", "diagonal", (0.90, 0.55, 0.10), (0.30, 0.10, 0.40)),
    ("cylinder", "dots", (0.95, 0.95, 0.95), (0.10, 0.50, 0.20)),
    ("cylinder", "vstripes", (0.70, 0.10, 0.50), (0.10, 0.70, 0.80)),
)
_PERIOD = 0.03
_LIGHT = np.array([0.4, -0.3, 0.87]) / np.linalg.norm([0.4, -0.3, 0.87])


@dataclass
class SceneSpec:
    n_objects: int = 5
    classes: Tuple[str, ...] = DEFAULT_CLASSES
    n_frames: int = 30
    width: int = 320
    height: int = 240
    image_noise: float = 2.0
    cloud_noise: float = 0.001
    clutter_points: int = 150
    points_per_object: int = 900
    arc_degrees: float = 160.0
    orbit_radius: float = 0.9
    camera_height: float = 0.45
    seed: int = 0

    def validate(self):
        if self.n_objects < 1:
            raise ValueError("scene needs at least one object")
        if self.n_frames < 3:
            raise ValueError("scene needs at least three frames")
        if not self.classes:
            raise ValueError("class list is empty")
        if self.width < 32 or self.height < 32:
            raise ValueError("image too small")
        if self.image_noise < 0 or self.cloud_noise < 0 or self.clutter_points < 0:
            raise ValueError("noise levels must be non-negative")


@dataclass
class SceneObject:
    object_id: int
    label: str
    shape: str
    pattern: str
    color_a: Tuple[float, float, float]
    color_b: Tuple[float, float, float]
    center: Tuple[float, float]
    yaw: float
    size: Tuple[float, float, float]
    phase: float

    @property
    def footprint_radius(self) -> float:
        if self.shape == "cuboid":
            return float(np.hypot(self.size[0], self.size[1]))
        return float(self.size[0])

    @property
    def pose(self) -> Pose:
        c, s = np.cos(self.yaw), np.sin(self.yaw)
        R = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])
        return Pose.from_matrix(R, (self.center[0], self.center[1], 0.0))


@dataclass
class SyntheticScene:
    spec: SceneSpec
    objects: List[SceneObject]
    intrinsics: CameraIntrinsics
    frames: List[FrameRecord]
    images: Dict[int, np.ndarray]
    cloud: SemiDenseMap
    annotations: List[Annotation]
    cloud_owner: np.ndarray = field(default=None)

    def to_scene(self) -> Scene:
        return Scene(self.cloud, self.frames, self.annotations, self.intrinsics)


def class_style(index: int):
    shape, pattern, a, b = _STYLES[index % len(_STYLES)]
    shift = index // len(_STYLES)
    if shift:
        # rotate colour channels for class lists longer than the base styles
        a = tuple(np.roll(a, shift).tolist())
        b = tuple(np.roll(b, shift).tolist())
    return shape, pattern, a, b


# ----------------------------------------------------------------- textures

def _surface_coords(obj: SceneObject, p: np.ndarray):
    """(vertical, around) texture coordinates in metres for local points."""
    if obj.shape == "cuboid":
        return p[:, 2], p[:, 0] + p[:, 1]
    r = obj.size[0]
    return p[:, 2], r * np.arctan2(p[:, 1], p[:, 0])


def texture_value(obj: SceneObject, p: np.ndarray) -> np.ndarray:
    """Signed pattern field; colour A where positive, B elsewhere."""
    v, u = _surface_coords(obj, p)
    k = 2 * np.pi / _PERIOD
    ph = obj.phase
    if obj.pattern == "hstripes":
        return np.sin(k * v + ph)
    if obj.pattern == "vstripes":
        return np.sin(k * u + ph)
    if obj.pattern == "checker":
        return np.sin(k * v + ph) * np.sin(k * u + ph)
    if obj.pattern == "diagonal":
        return np.sin(k * (u + v) / np.sqrt(2) + ph)
    if obj.pattern == "dots":
        return np.cos(k * v + ph) * np.cos(k * u + ph) - 0.4
    raise ValueError(f"unknown pattern {obj.pattern}")


def texture_color(obj: SceneObject, p: np.ndarray) -> np.ndarray:
    s = texture_value(obj, p)
    a, b = np.array(obj.color_a), np.array(obj.color_b)
    return np.where((s > 0)[:, None], a, b)


def edge_color(obj: SceneObject) -> np.ndarray:
    return (np.array(obj.color_a) + np.array(obj.color_b)) / 2


# ------------------------------------------------------------ ray casting

def _intersect(obj: SceneObject, o: np.ndarray, d: np.ndarray):
    """Nearest positive hit of local rays ``o + t d``. Returns ``(t, normal)``."""
    n = len(d)
    t = np.full(n, np.inf)
    normal = np.zeros((n, 3))
    if obj.shape == "sphere":
        r = obj.size[0]
        c = np.array([0, 0, r])
        oc = o - c
        b = (d * oc).sum(1)
        cc = (oc * oc).sum() - r * r
        disc = b * b - cc
        ok = disc >= 0
        th = -b[ok] - np.sqrt(disc[ok])
        good = th > 1e-9
        idx = np.nonzero(ok)[0][good]
        t[idx] = th[good]
        normal[idx] = (o + th[good, None] * d[idx] - c) / r
    elif obj.shape == "cylinder":
        r, h = obj.size[0], obj.size[2]
        a = d[:, 0] ** 2 + d[:, 1] ** 2
        b = o[0] * d[:, 0] + o[1] * d[:, 1]
        cc = o[0] ** 2 + o[1] ** 2 - r * r
        disc = b * b - a * cc
        ok = (disc >= 0) & (a > 1e-15)
        ts = np.full(n, np.inf)
        ts[ok] = (-b[ok] - np.sqrt(disc[ok])) / a[ok]
        z = o[2] + ts * d[:, 2]
        side = ok & (ts > 1e-9) & (z >= 0) & (z <= h)
        t[side] = ts[side]
        hp = o + ts[side, None] * d[side]
        normal[side] = np.stack([hp[:, 0] / r, hp[:, 1] / r, np.zeros(len(hp))], 1)
        with np.errstate(divide="ignore", invalid="ignore"):
            tc = (h - o[2]) / d[:, 2]
        cp = o + tc[:, None] * d
        cap = (tc > 1e-9) & (cp[:, 0] ** 2 + cp[:, 1] ** 2 <= r * r) & (tc < t)
        t[cap] = tc[cap]
        normal[cap] = [0, 0, 1]
    elif obj.shape == "cuboid":
        lo = np.array([-obj.size[0], -obj.size[1], 0.0])
        hi = np.array([obj.size[0], obj.size[1], obj.size[2]])
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            t1 = (lo - o) * inv
            t2 = (hi - o) * inv
        tmin = np.minimum(t1, t2)
        tmax = np.maximum(t1, t2)
        tmin = np.where(np.isnan(tmin), -np.inf, tmin)
        tmax = np.where(np.isnan(tmax), np.inf, tmax)
        tn = tmin.max(1)
        tf = tmax.min(1)
        ok = (tn <= tf) & (tn > 1e-9)
        t[ok] = tn[ok]
        axis = tmin.argmax(1)
        sgn = -np.sign(d[np.arange(n), axis])
        normal[ok, axis[ok]] = sgn[ok]
    else:
        raise ValueError(f"unknown shape {obj.shape}")
    return t, normal


def _background(points: np.ndarray, d: np.ndarray) -> np.ndarray:
    """Table (z=0) with a low-contrast grain, and a vertical wall gradient above."""
    col = np.empty((len(d), 3))
    x, y = points[:, 0], points[:, 1]
    grain = 0.5 + 0.25 * np.sin(37 * x + 3 * np.sin(11 * y)) + 0.25 * np.sin(23 * y + 2 * np.sin(7 * x))
    wood = np.array([0.55, 0.42, 0.30])
    col[:] = wood * (0.85 + 0.2 * grain[:, None])
    up = np.clip(d[:, 2], -1, 1)
    wall = np.array([0.45, 0.50, 0.55])
    sky = wall * (0.9 + 0.3 * up[:, None]) + 0.05 * np.sin(40 * np.arctan2(d[:, 1], d[:, 0]))[:, None]
    hit_table = d[:, 2] < -1e-6
    return np.where(hit_table[:, None], col, np.clip(sky, 0, 1))


def render(objects: Sequence[SceneObject], pose: Pose, intr: CameraIntrinsics):
    """Ray-cast one view. Returns ``(rgb float HxWx3, owner HxW, hit masks)``.

    ``owner`` is the index of the visible object per pixel or -1;
    ``hit`` marks, per object, pixels whose ray meets it regardless of occlusion.
    """
    W, H = intr.width, intr.height
    u, v = np.meshgrid(np.arange(W) + 0.5, np.arange(H) + 0.5)
    dc = np.stack([(u.ravel() - intr.cx) / intr.fx, (v.ravel() - intr.cy) / intr.fy,
                   np.ones(W * H)], 1)
    dw = dc @ pose.R.T
    dw /= np.linalg.norm(dw, axis=1, keepdims=True)
    ow = pose.translation
    best_t = np.full(W * H, np.inf)
    with np.errstate(divide="ignore", invalid="ignore"):
        tt = -ow[2] / dw[:, 2]
    table = (dw[:, 2] < -1e-6) & (tt > 0)
    best_t[table] = tt[table]
    owner = np.full(W * H, -1)
    color = _background(ow + np.where(table[:, None], tt[:, None], 0) * dw, dw)
    hits = np.zeros((len(objects), W * H), bool)
    for k, obj in enumerate(objects):
        op = obj.pose
        inv = op.inverse()
        ol = inv.apply(ow)
        dl = dw @ inv.R.T
        t, nrm = _intersect(obj, ol, dl)
        hits[k] = np.isfinite(t)
        closer = t < best_t
        if not np.any(closer):
            continue
        best_t[closer] = t[closer]
        owner[closer] = k
        pl = ol + t[closer, None] * dl[closer]
        nw = nrm[closer] @ op.R.T
        shade = 0.55 + 0.45 * np.clip(nw @ _LIGHT, 0, None)
        color[closer] = texture_color(obj, pl) * shade[:, None]
    return (color.reshape(H, W, 3), owner.reshape(H, W), hits.reshape(len(objects), H, W))


# ---------------------------------------------------------- surface samples

def sample_surface(obj: SceneObject, n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform area samples over the visible surface (no bottom face), local frame."""
    if obj.shape == "sphere":
        r = obj.size[0]
        v = rng.normal(size=(n, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        return v * r + [0, 0, r]
    if obj.shape == "cylinder":
        r, h = obj.size[0], obj.size[2]
        side_area, cap_area = 2 * np.pi * r * h, np.pi * r * r
        n_side = int(round(n * side_area / (side_area + cap_area)))
        a = rng.uniform(0, 2 * np.pi, n_side)
        side = np.stack([r * np.cos(a), r * np.sin(a), rng.uniform(0, h, n_side)], 1)
        m = n - n_side
        rr = r * np.sqrt(rng.uniform(0, 1, m))
        a2 = rng.uniform(0, 2 * np.pi, m)
        cap = np.stack([rr * np.cos(a2), rr * np.sin(a2), np.full(m, h)], 1)
        return np.vstack([side, cap])
    a, b, c = obj.size
    faces = [  # (area, fixed axis, value)
        (4 * a * b, 2, c), (4 * a * c, 1, -b), (4 * a * c, 1, b), (4 * b * c, 0, -a), (4 * b * c, 0, a)]
    areas = np.array([f[0] for f in faces])
    which = rng.choice(len(faces), size=n, p=areas / areas.sum())
    pts = np.stack([rng.uniform(-a, a, n), rng.uniform(-b, b, n), rng.uniform(0, c, n)], 1)
    for k, (_, ax, val) in enumerate(faces):
        pts[which == k, ax] = val
    return pts


def geometry_outline(obj: SceneObject) -> np.ndarray:
    """Dense local-frame points whose projection bounds the object's silhouette."""
    if obj.shape == "cuboid":
        a, b, c = obj.size
        return np.array([[x, y, z] for x in (-a, a) for y in (-b, b) for z in (0.0, c)])
    if obj.shape == "cylinder":
        r, h = obj.size[0], obj.size[2]
        t = np.linspace(0, 2 * np.pi, 1440, endpoint=False)
        ring = np.stack([r * np.cos(t), r * np.sin(t)], 1)
        return np.vstack([np.hstack([ring, np.zeros((len(t), 1))]),
                          np.hstack([ring, np.full((len(t), 1), h)])])
    r = obj.size[0]
    th, ph = np.meshgrid(np.linspace(0, np.pi, 181), np.linspace(0, 2 * np.pi, 360, endpoint=False))
    v = np.stack([np.sin(th) * np.cos(ph), np.sin(th) * np.sin(ph), np.cos(th)], -1).reshape(-1, 3)
    return v * r + [0, 0, r]


def _geometric_edges(obj: SceneObject, n: int, rng: np.random.Generator) -> np.ndarray:
    if obj.shape == "cuboid":
        a, b, c = obj.size
        segs = [((-a, -b, c), (a, -b, c)), ((a, -b, c), (a, b, c)), ((a, b, c), (-a, b, c)),
                ((-a, b, c), (-a, -b, c))] + [((x, y, 0), (x, y, c)) for x in (-a, a) for y in (-b, b)]
        segs = np.array(segs, dtype=float)
        k = rng.integers(0, len(segs), n)
        s = rng.uniform(0, 1, n)[:, None]
        return segs[k, 0] + s * (segs[k, 1] - segs[k, 0])
    if obj.shape == "cylinder":
        r, h = obj.size[0], obj.size[2]
        t = rng.uniform(0, 2 * np.pi, n)
        z = np.where(rng.uniform(size=n) < 0.5, 0.0, h)
        return np.stack([r * np.cos(t), r * np.sin(t), z], 1)
    return np.zeros((0, 3))


def object_cloud(obj: SceneObject, n: int, rng: np.random.Generator) -> np.ndarray:
    """World-frame edge points: texture boundaries plus geometric creases."""
    cand = sample_surface(obj, 30 * n, rng)
    s = texture_value(obj, cand)
    edge = cand[np.abs(s) < 0.12]
    n_geo = n // 5 if obj.shape != "sphere" else 0
    if len(edge) > n - n_geo:
        edge = edge[rng.choice(len(edge), n - n_geo, replace=False)]
    pts = np.vstack([edge, _geometric_edges(obj, n_geo, rng)])
    return obj.pose.apply(pts)


# ----------------------------------------------------------------- layout

def _make_objects(spec: SceneSpec, rng: np.random.Generator) -> List[SceneObject]:
    order = [i % len(spec.classes) for i in range(spec.n_objects)]
    order = [order[i] for i in rng.permutation(len(order))]
    objs: List[SceneObject] = []
    area = 0.22 + 0.035 * spec.n_objects
    for oid, ci in enumerate(order):
        shape, pattern, a, b = class_style(ci)
        if shape == "sphere":
            r = rng.uniform(0.05, 0.065)
            size = (r, r, 2 * r)
        elif shape == "cylinder":
            r = rng.uniform(0.035, 0.045)
            size = (r, r, rng.uniform(0.10, 0.13))
        else:
            size = (rng.uniform(0.035, 0.05), rng.uniform(0.02, 0.03), rng.uniform(0.11, 0.15))
        obj = SceneObject(oid, spec.classes[ci], shape, pattern, a, b, (0.0, 0.0),
                          float(rng.uniform(0, 2 * np.pi)), tuple(float(x) for x in size),
                          float(rng.uniform(0, 2 * np.pi)))
        for _ in range(2000):
            rad = area * np.sqrt(rng.uniform())
            ang = rng.uniform(0, 2 * np.pi)
            c = (float(rad * np.cos(ang)), float(rad * np.sin(ang)))
            obj.center = c
            if all(np.hypot(c[0] - o.center[0], c[1] - o.center[1])
                   > obj.footprint_radius + o.footprint_radius + 0.06 for o in objs):
                break
        else:
            raise ValueError("could not place objects without overlap; reduce n_objects")
        objs.append(obj)
    return objs


def look_at(position, target, up=(0.0, 0.0, 1.0)) -> Pose:
    f = np.asarray(target, float) - np.asarray(position, float)
    f /= np.linalg.norm(f)
    right = np.cross(f, up)
    right /= np.linalg.norm(right)
    down = np.cross(f, right)
    return Pose.from_matrix(np.stack([right, down, f], 1), position)


def _trajectory(spec: SceneSpec, rng: np.random.Generator) -> List[Pose]:
    start = rng.uniform(0, 2 * np.pi)
    span = np.deg2rad(spec.arc_degrees)
    poses = []
    for i in range(spec.n_frames):
        a = start + span * i / (spec.n_frames - 1)
        rad = spec.orbit_radius * (1 + 0.05 * np.sin(3 * a))
        pos = (rad * np.cos(a), rad * np.sin(a), spec.camera_height + 0.03 * np.sin(2 * a))
        poses.append(look_at(pos, (0.0, 0.0, 0.06)))
    return poses


def gt_box(obj: SceneObject, pose: Pose, intr: CameraIntrinsics):
    """Amodal projected box of ``obj`` and the unclipped box, or None if behind."""
    pw = obj.pose.apply(geometry_outline(obj))
    pc = pose.inverse().apply(pw)
    if np.any(pc[:, 2] <= 0.05):
        return None
    uv = np.stack([intr.fx * pc[:, 0] / pc[:, 2] + intr.cx, intr.fy * pc[:, 1] / pc[:, 2] + intr.cy], 1)
    full = enclosing_box(uv)
    return full.clipped(intr.width, intr.height), full


def generate_scene(spec: Optional[SceneSpec] = None, min_visible_fraction: float = 0.5,
                   min_box: float = 20.0) -> SyntheticScene:
    spec = spec or SceneSpec()
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    intr = CameraIntrinsics(0.9 * spec.width, 0.9 * spec.width, spec.width / 2, spec.height / 2,
                            spec.width, spec.height)
    objects = _make_objects(spec, rng)
    poses = _trajectory(spec, rng)

    frames, images, annotations = [], {}, []
    seen = np.zeros(len(objects), int)
    for fid, pose in enumerate(poses):
        color, owner, hits = render(objects, pose, intr)
        if spec.image_noise > 0:
            color = color + rng.normal(0, spec.image_noise / 255.0, color.shape)
        images[fid] = np.clip(np.rint(color * 255), 0, 255).astype(np.uint8)
        frames.append(FrameRecord(fid, f"images/{fid:06d}.png", pose))
        for k, obj in enumerate(objects):
            res = gt_box(obj, pose, intr)
            if res is None:
                continue
            box, full = res
            n_hit = hits[k].sum()
            if n_hit == 0 or full.area <= 0:
                continue
            if box.area < 0.5 * full.area or box.width < min_box or box.height < min_box:
                continue
            if (owner == k).sum() < min_visible_fraction * n_hit:
                continue
            annotations.append(Annotation(fid, box, obj.label, obj.object_id))
            seen[k] += 1
    if np.any(seen < 3):
        bad = [objects[k].object_id for k in np.nonzero(seen < 3)[0]]
        raise ValueError(f"objects {bad} are annotated in fewer than 3 frames; change seed or layout")

    xyz, rgb, owner_ids = [], [], []
    for obj in objects:
        p = object_cloud(obj, spec.points_per_object, rng)
        c = np.clip(edge_color(obj) + rng.normal(0, 0.03, (len(p), 3)), 0, 1)
        xyz.append(p)
        rgb.append(c)
        owner_ids.append(np.full(len(p), obj.object_id))
    m = spec.clutter_points
    lo = np.array([-0.6, -0.6, 0.0])
    hi = np.array([0.6, 0.6, 0.4])
    xyz.append(rng.uniform(lo, hi, (m, 3)))
    rgb.append(rng.uniform(0, 1, (m, 3)))
    owner_ids.append(np.full(m, -1))
    xyz = np.vstack(xyz)
    if spec.cloud_noise > 0:
        xyz = xyz + rng.normal(0, spec.cloud_noise, xyz.shape)
    # PLY stores 8-bit colour; quantise now so in-memory and on-disk agree
    rgb = np.rint(np.vstack(rgb) * 255) / 255.0
    cloud = SemiDenseMap(xyz, rgb)
    return SyntheticScene(spec, objects, intr, frames, images, cloud, annotations,
                          np.concatenate(owner_ids))


def write_scene(scene: SyntheticScene, directory) -> Path:
    d = Path(directory)
    save_scene(scene.to_scene(), d, scene.images)
    meta = {"spec": asdict(scene.spec), "objects": [asdict(o) for o in scene.objects],
            "suggested_base_eps": 0.01}
    (d / "objects.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    return d
