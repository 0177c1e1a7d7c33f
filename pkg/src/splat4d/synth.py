"""Scripted oracle datasets: analytic ray-rendered scenes with exact depth,
sky and instance masks, plus a corruptible tracker stand-in.

The renderer here is deliberately independent of the splatting rasterizer
(plain ray casting against boxes, spheres and a checker ground plane) so the
generated frames act as an external ground truth. World frame is z-up; the
camera convention matches scene.Camera (x right, y down, z forward).
"""

import json
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np
from scipy.ndimage import binary_dilation

from . import netpbm
from .scene import (
    Camera,
    FrameObservation,
    TrackEntry,
    TrackSequence,
    look_at_camera,
)

FORMAT_VERSION = 1
_EPS_HIT = 1e-9


@dataclass
class SceneObject:
    id: int
    shape: str                   # "box" or "sphere"
    size: tuple                  # box: half extents (3,); sphere: (radius,)
    albedo: tuple
    path: list                   # [(t, x, y, z), ...] piecewise linear
    yaw: list = dc_field(default_factory=lambda: [(0.0, 0.0)])
    moving: bool = False

    def position(self, t):
        return _interp_path(self.path, t)

    def yaw_at(self, t):
        pts = np.asarray(self.yaw, dtype=np.float64)
        return float(np.interp(t, pts[:, 0], pts[:, 1]))


@dataclass
class SceneScript:
    width: int
    height: int
    n_frames: int
    fx: float
    fy: float
    camera_path: list            # [(t, x, y, z), ...]
    camera_target: tuple
    objects: list                # list[SceneObject]
    sky_color: tuple = (0.55, 0.70, 0.90)
    light_dir: tuple = (0.3, 0.2, -0.9)
    ground_extent: float = 12.0
    ground_square: float = 1.0
    ground_albedo_a: tuple = (0.62, 0.60, 0.58)
    ground_albedo_b: tuple = (0.35, 0.35, 0.37)
    depth_keep_ratio: float = 1.0
    seed: int = 0

    def __post_init__(self):
        ids = [o.id for o in self.objects]
        if len(ids) != len(set(ids)):
            raise ValueError("object ids must be unique")
        if any(i <= 0 for i in ids):
            raise ValueError("object ids must be positive")
        for o in self.objects:
            disp = np.ptp(np.asarray(o.path, dtype=np.float64)[:, 1:], axis=0)
            if o.moving != bool(disp.max() > 1e-9):
                raise ValueError(f"object {o.id}: moving flag does not match path")

    def frame_time(self, i):
        return i / (self.n_frames - 1) if self.n_frames > 1 else 0.0

    def camera_at(self, i):
        t = self.frame_time(i)
        pos = _interp_path(self.camera_path, t)
        return look_at_camera(pos, self.camera_target, up=(0.0, 0.0, 1.0),
                              fx=self.fx, fy=self.fy,
                              cx=self.width / 2.0, cy=self.height / 2.0,
                              width=self.width, height=self.height, t=t)

    def to_json(self):
        d = {k: v for k, v in self.__dict__.items() if k != "objects"}
        d["objects"] = [vars(o) for o in self.objects]
        return json.dumps(d, indent=1, sort_keys=True, default=_jsonify)

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        d["objects"] = [SceneObject(**o) for o in d["objects"]]
        return cls(**d)


def _jsonify(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.integer, np.floating)):
        return x.item()
    raise TypeError(f"not json-serializable: {type(x)}")


def _interp_path(path, t):
    pts = np.asarray(path, dtype=np.float64)
    return np.array([np.interp(t, pts[:, 0], pts[:, 1 + a]) for a in range(3)])


@dataclass
class OracleDataset:
    frames: list                 # list[FrameObservation]
    tracks: TrackSequence
    dynamic_ids: set

    @property
    def n_frames(self):
        return len(self.frames)


# -- ray casting --------------------------------------------------------------

def _ray_grid(cam: Camera):
    yy, xx = np.mgrid[0:cam.height, 0:cam.width]
    d = np.stack([(xx + 0.5 - cam.cx) / cam.fx,
                  (yy + 0.5 - cam.cy) / cam.fy,
                  np.ones_like(xx, dtype=np.float64)], axis=-1)
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    d_world = d.reshape(-1, 3) @ cam.r_wc   # rows: r_wc.T @ d_cam
    return cam.position, d_world


def _hit_ground(origin, dirs, script):
    dz = dirs[:, 2]
    oz = origin[2]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(np.abs(dz) > 1e-12, -oz / dz, np.inf)
    p = origin + t[:, None] * dirs
    ok = (t > _EPS_HIT) & (np.abs(p[:, 0]) <= script.ground_extent) \
        & (np.abs(p[:, 1]) <= script.ground_extent)
    t = np.where(ok, t, np.inf)
    parity = (np.floor(p[:, 0] / script.ground_square)
              + np.floor(p[:, 1] / script.ground_square)) % 2
    albedo = np.where(parity[:, None] == 0,
                      np.asarray(script.ground_albedo_a),
                      np.asarray(script.ground_albedo_b))
    normal = np.zeros_like(dirs)
    normal[:, 2] = 1.0
    return t, normal, albedo


def _hit_box(origin, dirs, center, half, yaw):
    cy, sy = np.cos(yaw), np.sin(yaw)
    rot = np.array([[cy, -sy, 0.0], [sy, cy, 0.0], [0.0, 0.0, 1.0]])
    o = (origin - center) @ rot              # world -> box frame (rot^T applied)
    d = dirs @ rot
    half = np.asarray(half, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = np.where(np.abs(d) > 1e-15, 1.0 / d, np.inf)
    t1 = (-half - o) * inv
    t2 = (half - o) * inv
    tmin = np.minimum(t1, t2)
    tmax = np.maximum(t1, t2)
    near_axis = np.argmax(tmin, axis=1)
    t_near = tmin.max(axis=1)
    t_far = tmax.min(axis=1)
    ok = (t_near <= t_far) & (t_far > _EPS_HIT) & (t_near > _EPS_HIT)
    t = np.where(ok, t_near, np.inf)
    n_local = np.zeros_like(dirs)
    rows = np.arange(dirs.shape[0])
    n_local[rows, near_axis] = -np.sign(d[rows, near_axis])
    normal = n_local @ rot.T                 # box frame -> world
    return t, normal


def _hit_sphere(origin, dirs, center, radius):
    oc = origin - center
    b = dirs @ oc
    c = oc @ oc - radius * radius
    disc = b * b - c
    with np.errstate(invalid="ignore"):
        t = -b - np.sqrt(np.maximum(disc, 0.0))
    ok = (disc > 0) & (t > _EPS_HIT)
    t = np.where(ok, t, np.inf)
    p = origin + t[:, None] * dirs
    normal = np.where(np.isfinite(t)[:, None], (p - center) / radius, 0.0)
    return t, normal


def _render_frame(script: SceneScript, frame: int):
    cam = script.camera_at(frame)
    t_scene = script.frame_time(frame)
    origin, dirs = _ray_grid(cam)
    n = dirs.shape[0]

    best_t = np.full(n, np.inf)
    best_n = np.zeros((n, 3))
    best_alb = np.zeros((n, 3))
    best_id = np.zeros(n, dtype=np.int64)

    def take(t, normal, albedo, oid):
        nonlocal best_t, best_n, best_alb, best_id
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        best_n = np.where(closer[:, None], normal, best_n)
        best_alb = np.where(closer[:, None], albedo, best_alb)
        best_id = np.where(closer, oid, best_id)

    take(*_hit_ground(origin, dirs, script), 0)
    for obj in script.objects:
        center = obj.position(t_scene)
        if obj.shape == "box":
            t, normal = _hit_box(origin, dirs, center, obj.size,
                                 obj.yaw_at(t_scene))
        elif obj.shape == "sphere":
            t, normal = _hit_sphere(origin, dirs, center, obj.size[0])
        else:
            raise ValueError(f"unknown shape {obj.shape!r}")
        take(t, normal, np.asarray(obj.albedo, dtype=np.float64), obj.id)

    hit = np.isfinite(best_t)
    light = -np.asarray(script.light_dir, dtype=np.float64)
    light /= np.linalg.norm(light)
    lambert = np.maximum(best_n @ light, 0.0)
    shade = (0.35 + 0.65 * lambert)[:, None] * best_alb
    rgb = np.where(hit[:, None], shade, np.asarray(script.sky_color))
    rgb = np.clip(rgb, 0.0, 1.0)

    fwd = cam.r_wc[2]
    depth = np.where(hit, best_t * (dirs @ fwd), 0.0)
    inst = np.where(hit, best_id, 0)

    h, w = cam.height, cam.width
    # quantize like the on-disk formats so write/read round-trips exactly
    rgb = np.rint(rgb * 255.0) / 255.0
    depth = depth.astype(np.float32).astype(np.float64)
    return FrameObservation(
        rgb=rgb.reshape(h, w, 3), depth=depth.reshape(h, w),
        sky=(~hit).reshape(h, w), inst=inst.reshape(h, w), camera=cam)


def generate(script: SceneScript) -> OracleDataset:
    """Render every frame and derive tracks. Pure function of (script, seed)."""
    frames = []
    rng = np.random.default_rng(script.seed)
    for i in range(script.n_frames):
        obs = _render_frame(script, i)
        if script.depth_keep_ratio < 1.0:
            drop = rng.uniform(size=obs.depth.shape) >= script.depth_keep_ratio
            obs.depth[drop] = 0.0
        frames.append(obs)

    seen = set()
    track_frames = []
    for obs in frames:
        entries = []
        for obj in script.objects:
            mask = obs.inst == obj.id
            if mask.any():
                entries.append(TrackEntry.from_mask(obj.id, mask))
                seen.add(obj.id)
        track_frames.append(entries)
    missing = [o.id for o in script.objects if o.id not in seen]
    if missing:
        raise ValueError(f"objects never visible in any frame: {missing}")

    dynamic = {o.id for o in script.objects if o.moving}
    return OracleDataset(frames=frames, tracks=TrackSequence(track_frames),
                         dynamic_ids=dynamic)


# -- tracker corruption -------------------------------------------------------

def corrupt_tracks(tracks: TrackSequence, id_switch_prob=0.0, drop_prob=0.0,
                   mask_dilate_px=0, seed=0):
    """Simulate tracker errors: dropped detections, swapped ids, fat masks.

    Id switches rotate the ids among the flagged entries of one frame, so
    per-frame uniqueness survives. Returns (corrupted, report) where report
    lists (frame, true_id, corrupted_id) for every surviving entry.
    """
    for name, p in (("id_switch_prob", id_switch_prob), ("drop_prob", drop_prob)):
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"{name} must be in [0, 1], got {p}")
    rng = np.random.default_rng(seed)
    out_frames = []
    report = []
    for f, entries in enumerate(tracks.frames):
        kept = [e for e in entries if rng.uniform() >= drop_prob]
        flags = [rng.uniform() < id_switch_prob for _ in kept]
        ids = [e.id for e in kept]
        flagged = [i for i, fl in enumerate(flags) if fl]
        new_ids = list(ids)
        if len(flagged) >= 2:
            rotated = [ids[j] for j in flagged[1:]] + [ids[flagged[0]]]
            for j, nid in zip(flagged, rotated):
                new_ids[j] = nid
        new_entries = []
        for e, nid in zip(kept, new_ids):
            mask = e.mask
            if mask_dilate_px > 0:
                mask = binary_dilation(mask, iterations=mask_dilate_px)
            new_entries.append(TrackEntry.from_mask(nid, mask))
            report.append((f, e.id, nid))
        out_frames.append(new_entries)
    return TrackSequence(out_frames), report


# -- desk preset --------------------------------------------------------------

def desk_script(seed=0, n_frames=24, size=64, depth_keep_ratio=1.0):
    """Small benchmark scene: checker ground, 3 static and 3 moving boxes.

    The movers cover the paper-motivated regimes at this resolution: a fast
    lateral box (~2 px/frame), an approaching box, and a slow box that stays
    under 1 px/frame of image motion.
    """
    objects = [
        SceneObject(id=1, shape="box", size=(0.5, 0.5, 0.9),
                    albedo=(0.75, 0.25, 0.20), moving=False,
                    path=[(0.0, -2.0, 1.2, 0.9)]),
        SceneObject(id=2, shape="box", size=(0.45, 0.45, 0.45),
                    albedo=(0.22, 0.45, 0.80), moving=False,
                    path=[(0.0, 1.9, 0.6, 0.45)], yaw=[(0.0, 0.5)]),
        SceneObject(id=3, shape="sphere", size=(0.55,),
                    albedo=(0.25, 0.65, 0.30), moving=False,
                    path=[(0.0, 0.1, 2.3, 0.55)]),
        SceneObject(id=4, shape="box", size=(0.42, 0.42, 0.42),
                    albedo=(0.85, 0.75, 0.15), moving=True,
                    path=[(0.0, -2.3, -1.2, 0.42), (1.0, 2.3, -1.2, 0.42)]),
        SceneObject(id=5, shape="box", size=(0.4, 0.4, 0.6),
                    albedo=(0.80, 0.30, 0.75), moving=True,
                    path=[(0.0, 1.1, 3.4, 0.6), (1.0, 1.0, 0.6, 0.6)]),
        SceneObject(id=6, shape="box", size=(0.45, 0.45, 0.5),
                    albedo=(0.20, 0.75, 0.78), moving=True,
                    path=[(0.0, -1.1, 0.9, 0.5), (1.0, -0.1, 0.9, 0.5)]),
    ]
    return SceneScript(
        width=size, height=size, n_frames=n_frames, fx=1.1 * size, fy=1.1 * size,
        camera_path=[(0.0, -0.45, -7.0, 1.6), (1.0, 0.45, -7.0, 1.6)],
        camera_target=(0.0, 0.0, 0.8),
        objects=objects, depth_keep_ratio=depth_keep_ratio, seed=seed)


# -- on-disk layout -----------------------------------------------------------

def write_dataset(ds: OracleDataset, out_dir):
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    h, w = ds.frames[0].rgb.shape[:2]
    meta = {
        "format_version": FORMAT_VERSION,
        "n_frames": ds.n_frames, "width": w, "height": h,
        "time_range": [0.0, 1.0],
        "dynamic_ids": sorted(ds.dynamic_ids),
        "object_ids": ds.tracks.ids(),
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True))

    pose_lines = []
    for i, obs in enumerate(ds.frames):
        stem = out / "frames" / f"{i:04d}"
        netpbm.write_ppm(f"{stem}.rgb.ppm", obs.rgb)
        netpbm.write_f32_grid(f"{stem}.depth.f32", obs.depth)
        netpbm.write_pbm(f"{stem}.sky.pbm", obs.sky)
        netpbm.write_u16_grid(f"{stem}.inst.u16", obs.inst)
        cam = obs.camera
        vals = list(cam.r_wc.reshape(-1)) + list(cam.t_wc) \
            + [cam.fx, cam.fy, cam.cx, cam.cy]
        pose_lines.append("\t".join([str(i)] + [f"{v:.17g}" for v in vals]))
    (out / "poses.tsv").write_text("\n".join(pose_lines) + "\n")

    track_lines = []
    for f, entries in enumerate(ds.tracks.frames):
        for e in entries:
            l, r, t, b = e.bbox
            track_lines.append(f"{f}\t{e.id}\t{l}\t{r}\t{t}\t{b}")
    (out / "tracks.tsv").write_text("\n".join(track_lines) + "\n")


def read_dataset(in_dir) -> OracleDataset:
    root = Path(in_dir)
    meta = json.loads((root / "meta.json").read_text())
    if meta["format_version"] > FORMAT_VERSION:
        raise ValueError(f"dataset format version {meta['format_version']} "
                         f"is newer than supported ({FORMAT_VERSION})")
    n, w, h = meta["n_frames"], meta["width"], meta["height"]

    poses = {}
    for line in (root / "poses.tsv").read_text().splitlines():
        parts = line.split("\t")
        poses[int(parts[0])] = np.array([float(x) for x in parts[1:]])

    frames = []
    for i in range(n):
        stem = root / "frames" / f"{i:04d}"
        if not Path(f"{stem}.rgb.ppm").exists():
            raise ValueError(f"missing frame file {stem}.rgb.ppm")
        rgb = netpbm.read_ppm(f"{stem}.rgb.ppm")
        depth = netpbm.read_f32_grid(f"{stem}.depth.f32")
        sky = netpbm.read_pbm(f"{stem}.sky.pbm")
        inst = netpbm.read_u16_grid(f"{stem}.inst.u16")
        p = poses[i]
        t = i / (n - 1) if n > 1 else 0.0
        cam = Camera(fx=p[12], fy=p[13], cx=p[14], cy=p[15], width=w, height=h,
                     r_wc=p[:9].reshape(3, 3), t_wc=p[9:12], t=t)
        frames.append(FrameObservation(rgb=rgb, depth=depth, sky=sky,
                                       inst=inst, camera=cam))

    track_frames = [[] for _ in range(n)]
    tracks_path = root / "tracks.tsv"
    if tracks_path.exists():
        for line in tracks_path.read_text().splitlines():
            f, oid, l, r, t, b = (int(x) for x in line.split("\t"))
            # tracks.tsv persists boxes only; recover the mask from the
            # instance map, falling back to the box for corrupted entries
            # whose id no longer matches the pixels underneath
            mask = np.zeros(frames[f].inst.shape, dtype=bool)
            mask[t:b + 1, l:r + 1] = frames[f].inst[t:b + 1, l:r + 1] == oid
            if not mask.any():
                mask[t:b + 1, l:r + 1] = True
            track_frames[f].append(TrackEntry(id=oid, mask=mask,
                                              bbox=(l, r, t, b)))
    return OracleDataset(frames=frames, tracks=TrackSequence(track_frames),
                         dynamic_ids=set(meta["dynamic_ids"]))
