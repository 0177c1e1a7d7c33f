"""Scene model: periodic-vibration 4D Gaussians, cameras, frames, tracks.

Every Gaussian carries a static appearance (position, orientation, scale,
opacity, color, identity embedding) plus a temporal state (velocity direction,
life peak tau, lifespan beta) that makes its position vibrate around the mean
and its opacity fade away from the peak. A field of them, rendered at a fixed
timestamp, behaves exactly like a static 3D Gaussian cloud.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field as dc_field

import numpy as np

TWO_PI = 2.0 * np.pi

EMBED_DIM = 8
DGS4_MAGIC = b"DGS4"
DGS4_VERSION = 1
RECORD_FLOATS = 27  # mu3 q4 s3 o1 c3 e8 v3 tau1 beta1

# Clamp bound for the logit map so float32 round-trips of o stay finite.
_LOGIT_CLIP = 1e-12


def _as_f64(x, shape):
    a = np.asarray(x, dtype=np.float64)
    if a.shape != shape:
        raise ValueError(f"expected shape {shape}, got {a.shape}")
    return a


@dataclass(frozen=True)
class Gaussian4D:
    """One vibrating Gaussian, stored with constrained (physical) values."""

    mu: np.ndarray      # (3,) mean position at its life peak
    q: np.ndarray       # (4,) unit quaternion (w, x, y, z)
    s: np.ndarray       # (3,) per-axis scales, > 0
    o: float            # peak opacity in (0, 1)
    c: np.ndarray       # (3,) RGB color
    e: np.ndarray       # (8,) identity embedding
    v: np.ndarray       # (3,) vibration velocity direction/magnitude
    tau: float          # life peak time in [0, 1]
    beta: float         # lifespan, > 0

    def __post_init__(self):
        object.__setattr__(self, "mu", _as_f64(self.mu, (3,)))
        object.__setattr__(self, "q", _as_f64(self.q, (4,)))
        object.__setattr__(self, "s", _as_f64(self.s, (3,)))
        object.__setattr__(self, "c", _as_f64(self.c, (3,)))
        object.__setattr__(self, "e", _as_f64(self.e, (EMBED_DIM,)))
        object.__setattr__(self, "v", _as_f64(self.v, (3,)))
        if not np.all(self.s > 0):
            raise ValueError("scales must be positive")
        if not (0.0 < self.o < 1.0):
            raise ValueError("opacity must lie in (0, 1)")
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        n = float(np.linalg.norm(self.q))
        if n == 0.0:
            raise ValueError("quaternion must be nonzero")


def position_at(g: Gaussian4D, t: float, l: float) -> np.ndarray:
    """Vibrating mean: mu + (l / 2pi) * sin(2pi (t - tau) / l) * v."""
    return g.mu + (l / TWO_PI) * np.sin(TWO_PI * (t - g.tau) / l) * g.v


def opacity_at(g: Gaussian4D, t: float) -> float:
    """Peak opacity decayed by a Gaussian envelope of width beta around tau."""
    dt = t - g.tau
    return float(g.o * np.exp(-0.5 * dt * dt / (g.beta * g.beta)))


def instant_velocity(g: Gaussian4D, l: float) -> np.ndarray:
    """Effective velocity v * exp(-beta / (2 l)); long-lived Gaussians read as still."""
    return g.v * np.exp(-g.beta / (2.0 * l))


def staticness(g: Gaussian4D, l: float) -> float:
    """Lifespan relative to the cycle length; large values mean persistent."""
    return float(g.beta / l)


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of a quaternion (w, x, y, z); normalizes the input."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def covariance3d(g: Gaussian4D) -> np.ndarray:
    """World-space covariance R diag(s^2) R^T. Invariant under q -> -q."""
    r = quat_to_rotmat(g.q)
    return (r * (g.s * g.s)) @ r.T


class GaussianField:
    """A field of 4D Gaussians stored struct-of-arrays in unconstrained form.

    Internally opacity lives as a logit, scales and beta as logs, and the
    quaternion as a raw 4-vector that optimizers renormalize after stepping.
    The constrained views (``mu``, ``q``, ``s``, ...) are what the math in the
    rest of the package consumes.
    """

    def __init__(self, mu, q_raw, log_s, logit_o, c, e, v, tau, log_beta,
                 cycle_length=0.4, num_classes=0):
        n = len(mu)
        self.mu = np.ascontiguousarray(mu, dtype=np.float64).reshape(n, 3)
        self.q_raw = np.ascontiguousarray(q_raw, dtype=np.float64).reshape(n, 4)
        self.log_s = np.ascontiguousarray(log_s, dtype=np.float64).reshape(n, 3)
        self.logit_o = np.ascontiguousarray(logit_o, dtype=np.float64).reshape(n)
        self.c = np.ascontiguousarray(c, dtype=np.float64).reshape(n, 3)
        self.e = np.ascontiguousarray(e, dtype=np.float64).reshape(n, EMBED_DIM)
        self.v = np.ascontiguousarray(v, dtype=np.float64).reshape(n, 3)
        self.tau = np.ascontiguousarray(tau, dtype=np.float64).reshape(n)
        self.log_beta = np.ascontiguousarray(log_beta, dtype=np.float64).reshape(n)
        self.cycle_length = float(cycle_length)
        self.num_classes = int(num_classes)

    # -- constrained views -------------------------------------------------

    @property
    def q(self):
        n = np.linalg.norm(self.q_raw, axis=1, keepdims=True)
        return self.q_raw / n

    @property
    def s(self):
        return np.exp(self.log_s)

    @property
    def o(self):
        return 1.0 / (1.0 + np.exp(-self.logit_o))

    @property
    def beta(self):
        return np.exp(self.log_beta)

    def __len__(self):
        return self.mu.shape[0]

    def gaussian(self, i: int) -> Gaussian4D:
        return Gaussian4D(
            mu=self.mu[i].copy(), q=self.q[i].copy(), s=self.s[i].copy(),
            o=float(self.o[i]), c=self.c[i].copy(), e=self.e[i].copy(),
            v=self.v[i].copy(), tau=float(self.tau[i]), beta=float(self.beta[i]),
        )

    def positions_at(self, t: float) -> np.ndarray:
        l = self.cycle_length
        phase = np.sin(TWO_PI * (t - self.tau) / l)[:, None]
        return self.mu + (l / TWO_PI) * phase * self.v

    def opacities_at(self, t: float) -> np.ndarray:
        dt = t - self.tau
        b = self.beta
        return self.o * np.exp(-0.5 * dt * dt / (b * b))

    def instant_velocities(self) -> np.ndarray:
        return self.v * np.exp(-self.beta / (2.0 * self.cycle_length))[:, None]

    def rotmats(self) -> np.ndarray:
        """(N, 3, 3) rotation matrices from the normalized quaternions."""
        q = self.q
        w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
        r = np.empty((len(self), 3, 3), dtype=np.float64)
        r[:, 0, 0] = 1 - 2 * (y * y + z * z)
        r[:, 0, 1] = 2 * (x * y - w * z)
        r[:, 0, 2] = 2 * (x * z + w * y)
        r[:, 1, 0] = 2 * (x * y + w * z)
        r[:, 1, 1] = 1 - 2 * (x * x + z * z)
        r[:, 1, 2] = 2 * (y * z - w * x)
        r[:, 2, 0] = 2 * (x * z - w * y)
        r[:, 2, 1] = 2 * (y * z + w * x)
        r[:, 2, 2] = 1 - 2 * (x * x + y * y)
        return r

    def subset(self, idx) -> "GaussianField":
        idx = np.asarray(idx)
        return GaussianField(
            self.mu[idx], self.q_raw[idx], self.log_s[idx], self.logit_o[idx],
            self.c[idx], self.e[idx], self.v[idx], self.tau[idx],
            self.log_beta[idx], self.cycle_length, self.num_classes,
        )

    def copy(self) -> "GaussianField":
        return self.subset(np.arange(len(self)))

    @staticmethod
    def concatenate(fields) -> "GaussianField":
        f0 = fields[0]
        return GaussianField(
            np.concatenate([f.mu for f in fields]),
            np.concatenate([f.q_raw for f in fields]),
            np.concatenate([f.log_s for f in fields]),
            np.concatenate([f.logit_o for f in fields]),
            np.concatenate([f.c for f in fields]),
            np.concatenate([f.e for f in fields]),
            np.concatenate([f.v for f in fields]),
            np.concatenate([f.tau for f in fields]),
            np.concatenate([f.log_beta for f in fields]),
            f0.cycle_length, f0.num_classes,
        )

    @staticmethod
    def from_constrained(mu, q, s, o, c, e, v, tau, beta,
                         cycle_length=0.4, num_classes=0) -> "GaussianField":
        o = np.clip(np.asarray(o, dtype=np.float64), _LOGIT_CLIP, 1.0 - _LOGIT_CLIP)
        return GaussianField(
            mu=mu, q_raw=q, log_s=np.log(s), logit_o=np.log(o / (1.0 - o)),
            c=c, e=e, v=v, tau=tau, log_beta=np.log(beta),
            cycle_length=cycle_length, num_classes=num_classes,
        )

    @staticmethod
    def from_gaussians(gaussians, cycle_length=0.4, num_classes=0) -> "GaussianField":
        return GaussianField.from_constrained(
            mu=np.stack([g.mu for g in gaussians]),
            q=np.stack([g.q for g in gaussians]),
            s=np.stack([g.s for g in gaussians]),
            o=np.array([g.o for g in gaussians]),
            c=np.stack([g.c for g in gaussians]),
            e=np.stack([g.e for g in gaussians]),
            v=np.stack([g.v for g in gaussians]),
            tau=np.array([g.tau for g in gaussians]),
            beta=np.array([g.beta for g in gaussians]),
            cycle_length=cycle_length, num_classes=num_classes,
        )

    @staticmethod
    def empty(cycle_length=0.4, num_classes=0) -> "GaussianField":
        z = np.zeros((0,))
        return GaussianField(
            np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), z,
            np.zeros((0, 3)), np.zeros((0, EMBED_DIM)), np.zeros((0, 3)), z, z,
            cycle_length, num_classes,
        )


# -- serialization ---------------------------------------------------------

def save_field(path, field: GaussianField) -> None:
    """Write the binary field format: header + 27 little-endian f32 per record.

    Header: magic ``DGS4``, u32 version, u64 count, f64 cycle length, u32
    number of dynamic classes. Record order per Gaussian: mu[3], q[4], s[3],
    o[1], c[3], e[8], v[3], tau[1], beta[1].
    """
    n = len(field)
    rec = np.empty((n, RECORD_FLOATS), dtype="<f4")
    rec[:, 0:3] = field.mu
    rec[:, 3:7] = field.q
    rec[:, 7:10] = field.s
    rec[:, 10] = field.o
    rec[:, 11:14] = field.c
    rec[:, 14:22] = field.e
    rec[:, 22:25] = field.v
    rec[:, 25] = field.tau
    rec[:, 26] = field.beta
    header = DGS4_MAGIC + struct.pack(
        "<IQdI", DGS4_VERSION, n, field.cycle_length, field.num_classes
    )
    with open(path, "wb") as f:
        f.write(header)
        f.write(rec.tobytes())


def load_field(path) -> GaussianField:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != DGS4_MAGIC:
            raise ValueError(f"not a DGS4 field file: bad magic {magic!r}")
        version, n, cycle_length, num_classes = struct.unpack("<IQdI", f.read(24))
        if version != DGS4_VERSION:
            raise ValueError(f"unsupported DGS4 version {version}")
        raw = f.read(n * RECORD_FLOATS * 4)
    if len(raw) != n * RECORD_FLOATS * 4:
        raise ValueError("truncated DGS4 field file")
    rec = np.frombuffer(raw, dtype="<f4").reshape(n, RECORD_FLOATS).astype(np.float64)
    return GaussianField.from_constrained(
        mu=rec[:, 0:3], q=rec[:, 3:7], s=rec[:, 7:10], o=rec[:, 10],
        c=rec[:, 11:14], e=rec[:, 14:22], v=rec[:, 22:25], tau=rec[:, 25],
        beta=rec[:, 26], cycle_length=cycle_length, num_classes=num_classes,
    )


# -- cameras and frames ------------------------------------------------------

@dataclass(frozen=True)
class Camera:
    """Pinhole camera. Camera frame: x right, y down, z forward (view depth)."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    r_wc: np.ndarray       # (3,3) world-to-camera rotation
    t_wc: np.ndarray       # (3,)  world-to-camera translation
    t: float = 0.0         # normalized timestamp in [0, 1]

    def __post_init__(self):
        object.__setattr__(self, "r_wc", _as_f64(self.r_wc, (3, 3)))
        object.__setattr__(self, "t_wc", _as_f64(self.t_wc, (3,)))
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        err = np.abs(self.r_wc @ self.r_wc.T - np.eye(3)).max()
        if err > 1e-6:
            raise ValueError("rotation is not orthonormal")

    @property
    def position(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.r_wc.T @ self.t_wc

    def world_to_cam(self, p_world: np.ndarray) -> np.ndarray:
        return p_world @ self.r_wc.T + self.t_wc

    def cam_to_world(self, p_cam: np.ndarray) -> np.ndarray:
        return (p_cam - self.t_wc) @ self.r_wc

    def back_project(self, u, v, depth):
        """World point of pixel coords (u, v) at view depth ``depth``."""
        u = np.asarray(u, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        depth = np.asarray(depth, dtype=np.float64)
        p_cam = np.stack(
            [(u - self.cx) / self.fx * depth, (v - self.cy) / self.fy * depth,
             depth], axis=-1)
        return self.cam_to_world(p_cam)


def look_at_camera(position, target, up, fx, fy, cx, cy, width, height, t=0.0) -> Camera:
    """Camera at ``position`` looking toward ``target``; ``up`` fixes the roll."""
    position = np.asarray(position, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - position
    fwd = fwd / np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    right = right / np.linalg.norm(right)
    down = np.cross(fwd, right)
    r_cw = np.stack([right, down, fwd], axis=1)  # camera axes as world columns
    r_wc = r_cw.T
    return Camera(fx=fx, fy=fy, cx=cx, cy=cy, width=width, height=height,
                  r_wc=r_wc, t_wc=-r_wc @ position, t=t)


@dataclass
class FrameObservation:
    """One observed frame: color, depth (0 where invalid), sky and instance masks."""

    rgb: np.ndarray          # (H, W, 3) float in [0, 1]
    depth: np.ndarray        # (H, W) view depth, 0 marks invalid
    sky: np.ndarray          # (H, W) bool
    inst: np.ndarray         # (H, W) int instance ids, 0 = none
    camera: Camera

    @property
    def depth_valid(self) -> np.ndarray:
        return self.depth > 0


# -- tracks -----------------------------------------------------------------

@dataclass
class TrackEntry:
    """A tracked instance in one frame; bbox is the tight bound of the mask."""

    id: int
    mask: np.ndarray                    # (H, W) bool
    bbox: tuple[int, int, int, int]     # (left, right, top, bottom), inclusive

    @staticmethod
    def from_mask(id: int, mask: np.ndarray) -> "TrackEntry":
        if not mask.any():
            raise ValueError("track mask is empty")
        return TrackEntry(id=int(id), mask=mask.astype(bool), bbox=mask_bbox(mask))


def mask_bbox(mask: np.ndarray) -> tuple[int, int, int, int]:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return int(cols[0]), int(cols[-1]), int(rows[0]), int(rows[-1])


def bbox_center(bbox) -> np.ndarray:
    l, r, t, b = bbox
    return np.array([(l + r) / 2.0, (t + b) / 2.0])


def bbox_area(bbox) -> float:
    l, r, t, b = bbox
    return float((r - l + 1) * (b - t + 1))


@dataclass
class TrackSequence:
    """Tracker output: for every frame, the list of visible instances."""

    frames: list  # list over frames of list[TrackEntry]

    def __post_init__(self):
        for f, entries in enumerate(self.frames):
            ids = [e.id for e in entries]
            if len(ids) != len(set(ids)):
                raise ValueError(f"duplicate track id in frame {f}")

    @property
    def num_frames(self) -> int:
        return len(self.frames)

    def ids(self):
        """All instance ids seen anywhere, sorted."""
        out = set()
        for entries in self.frames:
            out.update(e.id for e in entries)
        return sorted(out)

    def entry(self, frame: int, id: int):
        for e in self.frames[frame]:
            if e.id == id:
                return e
        return None

    def union_mask(self, frame: int, shape=None) -> np.ndarray:
        entries = self.frames[frame]
        if entries:
            m = np.zeros_like(entries[0].mask, dtype=bool)
            for e in entries:
                m |= e.mask
            return m
        if shape is None:
            raise ValueError("shape required for a frame with no tracks")
        return np.zeros(shape, dtype=bool)
