"""Synthetic stereo / RGB-D sequences with ground truth.

Landmarks are scattered in a band around a planar camera path.  Each
landmark owns a random 256-bit signature; every observation flips each bit
independently with probability ``p_bit``.  Pixel noise scales with the
pyramid level, so normalized residuals have standard deviation
``pixel_sigma``.

Coordinates follow the camera convention x right, y down, z forward; the
path lies in the x-z plane and starts at the identity pose.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .frame import DESCRIPTOR_BYTES, Frame, SensorKind
from .geometry import SCALE_FACTOR, Intrinsics, Pose
from .trajectory import Trajectory, read_tum, write_kitti, write_tum

TRAJECTORY_KINDS = ("line", "circuit", "figure-eight")
SEQUENCE_FORMAT_VERSION = 1

OBS_DTYPE = np.dtype([
    ("frame", "<i4"), ("landmark", "<i4"), ("u", "<f8"), ("v", "<f8"), ("ur", "<f8"),
    ("octave", "<i4"), ("desc", "u1", (DESCRIPTOR_BYTES,)),
])


class ConfigError(ValueError):
    pass


@dataclass
class WorldConfig:
    trajectory: str = "circuit"
    n_frames: int = 200
    fps: float = 10.0
    laps: float = 1.0
    radius: float = 24.0        # circuit / figure-eight
    length: float = 100.0       # line
    n_landmarks: int = 6000
    lateral_min: float = 3.0    # landmark band around the path (m)
    lateral_max: float = 14.0
    height_min: float = -5.0
    height_max: float = 1.5
    min_depth: float = 0.5
    max_depth: float = 45.0
    fx: float = 500.0
    fy: float = 500.0
    cx: float = 320.0
    cy: float = 240.0
    width: int = 640
    height: int = 480
    baseline: float = 0.5
    sensor: str = "stereo"
    pixel_sigma: float = 0.0
    depth_sigma0: float = 1.0   # RGB-D: sigma_d = sigma0 * d^2 / (fx * b)
    rgbd_max_depth: float = 8.0
    depth_scale_bias: float = 0.0
    p_bit: float = 0.0
    dropout: float = 0.0        # observation missing entirely
    stereo_dropout: float = 0.0  # stereo match fails: keypoint kept as monocular
    n_octaves: int = 4
    seed: int = 0
    noise_seed: int | None = None

    def __post_init__(self):
        if self.trajectory not in TRAJECTORY_KINDS:
            raise ConfigError(f"unknown trajectory kind {self.trajectory!r}")
        if self.sensor not in {s.value for s in SensorKind}:
            raise ConfigError(f"unknown sensor {self.sensor!r}")
        for name in ("p_bit", "dropout", "stereo_dropout"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        for name in ("n_frames", "fps", "laps", "radius", "length", "n_landmarks", "fx", "fy",
                     "baseline", "width", "height", "n_octaves", "max_depth"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.pixel_sigma < 0 or self.depth_sigma0 < 0:
            raise ConfigError("noise levels must be non-negative")
        if not 0 <= self.lateral_min < self.lateral_max:
            raise ConfigError("need 0 <= lateral_min < lateral_max")
        if not self.min_depth < self.max_depth:
            raise ConfigError("need min_depth < max_depth")
        if self.n_frames < 2:
            raise ConfigError("need at least 2 frames")

    @property
    def intrinsics(self) -> Intrinsics:
        return Intrinsics(self.fx, self.fy, self.cx, self.cy, self.baseline, self.width, self.height)

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "WorldConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "WorldConfig":
        text = Path(path).read_text()
        if str(path).endswith((".yaml", ".yml")):
            import yaml
            d = yaml.safe_load(text) or {}
        else:
            d = json.loads(text)
        if not isinstance(d, dict):
            raise ConfigError("config must be a mapping")
        return cls.from_dict(d)


@dataclass
class Sequence:
    config: WorldConfig
    truth: Trajectory
    frames: list
    landmarks: np.ndarray            # (N, 3) world positions
    landmark_ids: list = field(default_factory=list)  # per frame, per keypoint

    @property
    def K(self) -> Intrinsics:
        return self.config.intrinsics


# ------------------------------------------------------------------ geometry
def _path(cfg: WorldConfig, s):
    """Positions and unit headings at path parameter s in [0, 1) per lap."""
    s = np.asarray(s, dtype=float)
    if cfg.trajectory == "line":
        z = cfg.length * s
        pos = np.stack([np.zeros_like(z), np.zeros_like(z), z], axis=1)
        head = np.tile([0.0, 0.0, 1.0], (len(s), 1))
        return pos, head
    R = cfg.radius
    if cfg.trajectory == "circuit":
        th = 2 * np.pi * s
        pos = np.stack([R - R * np.cos(th), np.zeros_like(th), R * np.sin(th)], axis=1)
        head = np.stack([np.sin(th), np.zeros_like(th), np.cos(th)], axis=1)
        return pos, head
    # figure-eight: right-hand circle then left-hand circle, tangent at the origin
    frac = np.mod(s, 1.0)
    th = 4 * np.pi * frac
    first = frac < 0.5
    sign = np.where(first, 1.0, -1.0)
    pos = np.stack([sign * (R - R * np.cos(th)), np.zeros_like(th), R * np.sin(th)], axis=1)
    head = np.stack([sign * np.sin(th), np.zeros_like(th), np.cos(th)], axis=1)
    return pos, head


def _camera_pose(p, h) -> Pose:
    z = h / np.linalg.norm(h)
    y = np.array([0.0, 1.0, 0.0])
    x = np.cross(y, z)
    return Pose(np.stack([x, y, z], axis=1), np.asarray(p, dtype=float))


def ground_truth(cfg: WorldConfig) -> Trajectory:
    n = cfg.n_frames
    s = np.arange(n) / (n - 1)
    if cfg.trajectory != "line":
        s = s * cfg.laps
    pos, head = _path(cfg, s)
    stamps = np.arange(n) / cfg.fps
    return Trajectory.from_poses(stamps, [_camera_pose(p, h) for p, h in zip(pos, head)])


def make_landmarks(cfg: WorldConfig, rng) -> np.ndarray:
    """Landmarks in a band around one lap of the path (independent of laps / n_frames)."""
    n = cfg.n_landmarks
    if cfg.trajectory == "line":
        # extend beyond both ends so the first and last views are populated
        s = rng.uniform(-0.1, 1.0 + cfg.max_depth / cfg.length, n)
    else:
        s = rng.uniform(0.0, 1.0, n)
    pos, head = _path(cfg, s)
    side = np.stack([head[:, 2], np.zeros(n), -head[:, 0]], axis=1)
    off = rng.uniform(cfg.lateral_min, cfg.lateral_max, n) * rng.choice([-1.0, 1.0], n)
    y = rng.uniform(cfg.height_min, cfg.height_max, n)
    return pos + side * off[:, None] + np.array([0.0, 1.0, 0.0]) * y[:, None]


def _flip_bits(desc, p, rng):
    if p <= 0:
        return desc
    bits = np.unpackbits(desc, axis=1)
    flips = rng.random(bits.shape) < p
    return np.packbits(bits ^ flips, axis=1)


def generate_sequence(cfg: WorldConfig) -> Sequence:
    """Build the ground-truth trajectory, landmark map and observation stream."""
    K = cfg.intrinsics
    world = np.random.default_rng(cfg.seed)
    noise = np.random.default_rng([cfg.seed if cfg.noise_seed is None else cfg.noise_seed, 7919])
    landmarks = make_landmarks(cfg, world)
    signatures = world.integers(0, 256, (len(landmarks), DESCRIPTOR_BYTES), dtype=np.uint8)
    truth = ground_truth(cfg)
    sensor = SensorKind(cfg.sensor)
    frames, ids = [], []
    for i, (stamp, Twc) in enumerate(truth):
        Xc = Twc.inverse().apply(landmarks)
        z = Xc[:, 2]
        vis = (z > cfg.min_depth) & (z < cfg.max_depth)
        idx = np.flatnonzero(vis)
        Xv = Xc[idx]
        u = K.fx * Xv[:, 0] / Xv[:, 2] + K.cx
        v = K.fy * Xv[:, 1] / Xv[:, 2] + K.cy
        inimg = K.in_image(u, v)
        idx, Xv, u, v = idx[inimg], Xv[inimg], u[inimg], v[inimg]
        keep = noise.random(len(idx)) >= cfg.dropout
        idx, Xv, u, v = idx[keep], Xv[keep], u[keep], v[keep]
        m = len(idx)
        octave = noise.integers(0, cfg.n_octaves, m)
        sig = cfg.pixel_sigma * np.power(SCALE_FACTOR, octave)
        um = u + noise.normal(size=m) * sig
        vm = v + noise.normal(size=m) * sig
        if sensor == SensorKind.STEREO:
            ur = u - K.bf / Xv[:, 2] + noise.normal(size=m) * sig
            ok = (ur >= 0) & (ur < um)
        elif sensor == SensorKind.RGBD:
            d = Xv[:, 2]
            sd = cfg.depth_sigma0 * d * d / K.bf
            dm = d * (1.0 + cfg.depth_scale_bias) + noise.normal(size=m) * sd
            ok = (d < cfg.rgbd_max_depth) & (dm > 0)
            with np.errstate(divide="ignore", invalid="ignore"):
                ur = np.where(ok, um - K.bf / np.where(ok, dm, 1.0), np.nan)
        else:
            ur = np.full(m, np.nan)
            ok = np.zeros(m, dtype=bool)
        ok &= noise.random(m) >= cfg.stereo_dropout
        ur = np.where(ok, ur, np.nan)
        desc = _flip_bits(signatures[idx], cfg.p_bit, noise)
        frames.append(Frame(i, float(stamp), np.stack([um, vm], axis=1), ur, octave, desc, sensor))
        ids.append(idx.astype(np.int64))
    return Sequence(cfg, truth, frames, landmarks, ids)


# ------------------------------------------------------------------ file I/O
def save_sequence(seq: Sequence, out_dir) -> Path:
    """Write meta.json, observations.npy, landmarks.npy and ground truth files."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n = sum(len(f) for f in seq.frames)
    rec = np.zeros(n, dtype=OBS_DTYPE)
    pos = 0
    for f, lid in zip(seq.frames, seq.landmark_ids):
        sl = slice(pos, pos + len(f))
        rec["frame"][sl] = f.index
        rec["landmark"][sl] = lid
        rec["u"][sl] = f.uv[:, 0]
        rec["v"][sl] = f.uv[:, 1]
        rec["ur"][sl] = f.ur
        rec["octave"][sl] = f.octave
        rec["desc"][sl] = f.descriptors
        pos += len(f)
    np.save(out / "observations.npy", rec, allow_pickle=False)
    np.save(out / "landmarks.npy", np.ascontiguousarray(seq.landmarks, dtype="<f8"), allow_pickle=False)
    meta = {
        "version": SEQUENCE_FORMAT_VERSION,
        "config": seq.config.as_dict(),
        "sensor": seq.config.sensor,
        "n_frames": len(seq.frames),
        "timestamps": [f.timestamp for f in seq.frames],
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    write_tum(seq.truth, out / "groundtruth_tum.txt")
    write_kitti(seq.truth, out / "groundtruth_kitti.txt")
    return out


def load_sequence(path) -> Sequence:
    src = Path(path)
    meta_path = src / "meta.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"{meta_path} not found")
    meta = json.loads(meta_path.read_text())
    if meta.get("version") != SEQUENCE_FORMAT_VERSION:
        raise ValueError(f"unsupported sequence format version {meta.get('version')}")
    cfg = WorldConfig.from_dict(meta["config"])
    rec = np.load(src / "observations.npy", allow_pickle=False)
    landmarks = np.load(src / "landmarks.npy", allow_pickle=False)
    sensor = SensorKind(meta["sensor"])
    stamps = meta["timestamps"]
    bounds = np.searchsorted(rec["frame"], np.arange(len(stamps) + 1))
    frames, ids = [], []
    for i, stamp in enumerate(stamps):
        r = rec[bounds[i]:bounds[i + 1]]
        frames.append(Frame(i, float(stamp), np.stack([r["u"], r["v"]], axis=1), r["ur"],
                            r["octave"], r["desc"], sensor))
        ids.append(r["landmark"].astype(np.int64))
    truth = read_tum(src / "groundtruth_tum.txt")
    return Sequence(cfg, truth, frames, landmarks, ids)
