"""Synthetic scenario generator: the ground-truth oracle for the pipeline.

A scenario is a landmark field, two trajectories (ground vehicle on the
floor, aerial vehicle at altitude), a true world-to-world transform, and a
noise model. Rendering produces exactly what the real system would see on
the wire: frame packets with keypoint pixels, landmark-identity local
descriptors, a region-hash global descriptor and the transmitted (noisy)
pose, plus per-cycle ground-vehicle point clouds for the voxel map. A
truth sidecar accompanies every render so tests can check any stage
against the scene that produced it.

Everything is deterministic in the seed, including every noise draw; all
rendered numbers are quantized to f32 exactly as the wire format carries
them, so a run from live renders and a run from recorded logs see
bit-identical inputs.

Descriptors are synthetic: each landmark owns a random unit 64-vector and
observations see it plus noise, which makes matching accuracy a controlled
variable. Global descriptors hash the multiset of visible region tags into
a unit 512-vector, preserving the one property place recognition needs:
viewing overlap implies descriptor proximity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .errors import AglocError
from .geometry import (
    CameraIntrinsics,
    RelPose4,
    RigidTransform,
    compose,
    invert,
    project_many,
    quat_multiply,
    quat_from_rotvec,
    quat_slerp,
    transform_points,
)
from .protocol import FramePacket

_STREAM_LANDMARK_DESC = 1
_STREAM_REGION_DESC = 2
_STREAM_CLOUD = 3
_STREAM_UAV_FRAME = 4
_STREAM_UGV_FRAME = 5

PRESETS = ("covisible", "disjoint_start", "plane")


class InvalidConfig(AglocError):
    """Scenario configuration failed validation."""


class OutOfRange(AglocError):
    """Requested cycle is outside the scenario duration."""


@dataclass
class NoiseModel:
    """Standard deviations of every simulated error source; zero = exact."""

    pixel_sigma: float = 0.0        # px, on keypoint pixels
    descriptor_sigma: float = 0.0   # per component, re-normalized
    depth_sigma: float = 0.0        # m, on cloud points
    vio_pos_sigma: float = 0.0      # m, on transmitted aerial poses
    vio_rot_sigma: float = 0.0      # rad
    lio_pos_sigma: float = 0.0      # m, on transmitted ground poses
    lio_rot_sigma: float = 0.0      # rad

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise InvalidConfig(f"{f.name} must be non-negative")

    def is_zero(self) -> bool:
        return all(getattr(self, f.name) == 0.0 for f in fields(self))


@dataclass
class ScenarioConfig:
    preset: str = "covisible"
    seed: int = 0
    landmark_count: int = 600
    keypoints_per_frame: int = 96
    duration_s: float = 8.0
    rate_hz: float = 1.0
    rel_x: float = 1.0
    rel_y: float = -0.5
    rel_z: float = 0.3
    rel_yaw_deg: float = 20.0
    ugv_speed: float = 1.0
    uav_speed: float = 1.0
    uav_altitude: float = 4.0
    uav_lead: float = 2.5       # aerial start offset along the corridor
    ugv_max_range: float = 8.0
    uav_max_range: float = 12.0
    region_size: float = 2.0
    cloud_radius: float = 10.0
    cloud_points_per_landmark: int = 8
    cloud_jitter: float = 0.08
    suppression_px: float = 4.0
    fx: float = 500.0
    fy: float = 500.0
    cx: float = 320.0
    cy: float = 240.0
    width: int = 640
    height: int = 480
    noise: NoiseModel = field(default_factory=NoiseModel)

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise InvalidConfig(f"unknown preset {self.preset!r}")
        if self.landmark_count <= 0 or self.keypoints_per_frame <= 0:
            raise InvalidConfig("counts must be positive")
        if self.duration_s <= 0 or self.rate_hz <= 0:
            raise InvalidConfig("duration and rate must be positive")

    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics(self.fx, self.fy, self.cx, self.cy,
                                self.width, self.height)

    def cycles(self) -> int:
        return int(round(self.duration_s * self.rate_hz))


@dataclass(frozen=True)
class FrameTruth:
    """Per-render sidecar: never fed to the pipeline, only to checks."""

    agent: str
    cycle: int
    true_pose: RigidTransform        # physical (= ground world) frame
    landmark_ids: np.ndarray         # per keypoint


@dataclass
class Scenario:
    config: ScenarioConfig
    landmarks: np.ndarray            # (N,3), physical frame
    region_of: np.ndarray            # (N,) integer region tags
    true_relative: RelPose4          # maps ground world into aerial world
    ugv_waypoints: list
    uav_waypoints: list

    def intrinsics(self) -> CameraIntrinsics:
        return self.config.intrinsics()


def _look_at(position, forward, up=(0.0, 0.0, 1.0)) -> RigidTransform:
    f = np.asarray(forward, dtype=float)
    f = f / np.linalg.norm(f)
    u = np.asarray(up, dtype=float)
    x = np.cross(f, u)
    n = np.linalg.norm(x)
    if n < 1e-9:
        raise InvalidConfig("camera forward axis parallel to gravity")
    x /= n
    y = np.cross(f, x)
    m = np.eye(4)
    m[:3, 0], m[:3, 1], m[:3, 2] = x, y, f
    m[:3, 3] = np.asarray(position, dtype=float)
    return RigidTransform.from_matrix(m)


def _region_tag(xy: np.ndarray, size: float) -> np.ndarray:
    g = np.floor(xy / size).astype(np.int64)
    return ((g[:, 0] + (1 << 20)) << 21) | (g[:, 1] + (1 << 20))


def generate(config: ScenarioConfig) -> Scenario:
    """Build the deterministic scenario for a preset."""
    rng = np.random.default_rng([config.seed, 17])
    n = config.landmark_count
    if config.preset in ("covisible", "disjoint_start"):
        pts = np.column_stack([
            rng.uniform(0.0, 20.0, n),
            rng.uniform(-3.5, 3.5, n),
            rng.uniform(0.0, 1.2, n),
        ])
        pitch_g = math.radians(15.0)
        fwd_g = np.array([math.cos(pitch_g), 0.0, -math.sin(pitch_g)])
        g0 = np.array([-1.5, 0.0, 0.6])
        g1 = g0 + np.array([config.ugv_speed * config.duration_s, 0.0, 0.0])
        ugv = [(0.0, g0, fwd_g), (config.duration_s, g1, fwd_g)]
        pitch_a = math.radians(55.0)
        if config.preset == "covisible":
            a0 = np.array([-1.5 + config.uav_lead, 0.5, config.uav_altitude])
            fwd_a = np.array([math.cos(pitch_a), 0.0, -math.sin(pitch_a)])
            a1 = a0 + np.array([config.uav_speed * config.duration_s, 0.0, 0.0])
        else:
            a0 = np.array([22.0, 0.5, config.uav_altitude])
            fwd_a = np.array([-math.cos(pitch_a), 0.0, -math.sin(pitch_a)])
            a1 = a0 + np.array([-config.uav_speed * config.duration_s, 0.0, 0.0])
        uav = [(0.0, a0, fwd_a), (config.duration_s, a1, fwd_a)]
    else:  # plane: a vertical wall facing the static ground camera
        side = int(math.ceil(math.sqrt(n)))
        ys = np.linspace(-3.0, 3.0, side)
        zs = np.linspace(-1.8, 3.0, side)
        gy, gz = np.meshgrid(ys, zs)
        pts = np.column_stack([np.full(gy.size, 5.0), gy.ravel(), gz.ravel()])[:n]
        pts = pts + rng.uniform(-0.02, 0.02, size=pts.shape) * np.array([0.0, 1.0, 1.0])
        g0 = np.array([0.0, 0.0, 0.6])
        ugv = [(0.0, g0, np.array([1.0, 0.0, 0.0])),
               (config.duration_s, g0, np.array([1.0, 0.0, 0.0]))]
        a0 = np.array([0.5, 0.0, config.uav_altitude])
        fwd_a = np.array([math.cos(math.radians(55.0)), 0.0,
                          -math.sin(math.radians(55.0))])
        uav = [(0.0, a0, fwd_a), (config.duration_s, a0, fwd_a)]

    return Scenario(
        config=config,
        landmarks=pts,
        region_of=_region_tag(pts[:, :2], config.region_size),
        true_relative=RelPose4(
            np.array([config.rel_x, config.rel_y, config.rel_z]),
            math.radians(config.rel_yaw_deg)),
        ugv_waypoints=ugv,
        uav_waypoints=uav,
    )


def _pose_at(waypoints, t: float) -> RigidTransform:
    """Piecewise-linear position with slerp orientation along waypoints."""
    if t < waypoints[0][0] - 1e-9 or t > waypoints[-1][0] + 1e-9:
        raise OutOfRange(f"time {t} outside trajectory")
    for (t0, p0, f0), (t1, p1, f1) in zip(waypoints, waypoints[1:]):
        if t <= t1 + 1e-9:
            u = 0.0 if t1 == t0 else min(max((t - t0) / (t1 - t0), 0.0), 1.0)
            pos = (1 - u) * p0 + u * p1
            q = quat_slerp(_look_at(p0, f0).q, _look_at(p1, f1).q, u)
            return RigidTransform(q, pos)
    raise OutOfRange(f"time {t} outside trajectory")


def true_pose(s: Scenario, agent: str, cycle: int) -> RigidTransform:
    """Physical-frame camera pose at a cycle (before any frame change)."""
    t = cycle / s.config.rate_hz
    wps = s.ugv_waypoints if agent == "ugv" else s.uav_waypoints
    return _pose_at(wps, t)


def _check_cycle(s: Scenario, cycle: int) -> None:
    if not (0 <= cycle < s.config.cycles()):
        raise OutOfRange(f"cycle {cycle} outside [0, {s.config.cycles()})")


def visible_landmark_ids(s: Scenario, agent: str, cycle: int) -> np.ndarray:
    """Noise-free visibility oracle: frustum, range, pixel suppression,
    nearest-first budget.

    Suppression keeps only the nearest landmark when several project within
    a few pixels of each other, like a detector's non-max suppression; it
    also keeps the pixel-to-depth association unambiguous.
    """
    _check_cycle(s, cycle)
    k = s.intrinsics()
    pose = true_pose(s, agent, cycle)
    cam = transform_points(invert(pose), s.landmarks)
    max_range = s.config.ugv_max_range if agent == "ugv" else s.config.uav_max_range
    pix, valid = project_many(k, cam)
    valid &= (cam[:, 2] >= 0.3) & (cam[:, 2] <= max_range)
    valid &= (pix[:, 0] >= 0) & (pix[:, 0] < k.width)
    valid &= (pix[:, 1] >= 0) & (pix[:, 1] < k.height)
    ids = np.nonzero(valid)[0]
    order = np.argsort(cam[ids, 2], kind="stable")
    ids = ids[order]
    # occlusion against the surface-patch model: a landmark is hidden when
    # the ray to it passes through a nearer landmark's facing disk
    if len(ids) and s.config.cloud_points_per_landmark > 0:
        occ = 1.25 * s.config.cloud_jitter
        c = cam[ids]
        z = np.linalg.norm(c, axis=1)
        d = c / z[:, None]
        dots = d @ c.T                       # dots[i, j]: depth of j on ray i
        perp2 = (z ** 2)[None, :] - dots ** 2
        blocking = (dots < (z[:, None] - 0.05)) & (dots > 0.3)
        occluded = ((perp2 < occ * occ) & blocking).any(axis=1)
        ids = ids[~occluded]
    r = s.config.suppression_px
    kept: list[int] = []
    kept_px: list[np.ndarray] = []
    for i in ids:
        p = pix[i]
        if any(abs(p[0] - q[0]) < r and abs(p[1] - q[1]) < r for q in kept_px):
            continue
        kept.append(int(i))
        kept_px.append(p)
        if len(kept) >= s.config.keypoints_per_frame:
            break
    return np.array(kept, dtype=np.int64)


def _landmark_descriptors(seed: int, ids: np.ndarray) -> np.ndarray:
    out = np.empty((len(ids), 64))
    for i, lm in enumerate(ids):
        d = np.random.default_rng([seed, _STREAM_LANDMARK_DESC, int(lm)]).normal(size=64)
        out[i] = d / np.linalg.norm(d)
    return out


def _region_vector(tag: int) -> np.ndarray:
    d = np.random.default_rng([_STREAM_REGION_DESC, int(tag)]).normal(size=512)
    return d / np.linalg.norm(d)


def global_descriptor_of(s: Scenario, ids: np.ndarray) -> np.ndarray:
    """Hash the visible region-tag multiset into a unit 512-vector."""
    acc = np.zeros(512)
    tags, counts = np.unique(s.region_of[ids], return_counts=True)
    for tag, c in zip(tags, counts):
        acc += c * _region_vector(int(tag))
    n = np.linalg.norm(acc)
    if n == 0:
        acc[0] = 1.0
        n = 1.0
    return (acc / n).astype(np.float32)


def _noisy_pose(pose: RigidTransform, rng, pos_sigma: float,
                rot_sigma: float) -> RigidTransform:
    if pos_sigma == 0 and rot_sigma == 0:
        return pose
    dq = quat_from_rotvec(rng.normal(size=3) * rot_sigma)
    return RigidTransform(quat_multiply(pose.q, dq),
                          pose.t + rng.normal(size=3) * pos_sigma)


def render_frame(s: Scenario, agent: str, cycle: int):
    """One agent's packet for a cycle, plus its ground-truth sidecar."""
    if agent not in ("uav", "ugv"):
        raise ValueError("agent must be 'uav' or 'ugv'")
    _check_cycle(s, cycle)
    cfg = s.config
    stream = _STREAM_UAV_FRAME if agent == "uav" else _STREAM_UGV_FRAME
    rng = np.random.default_rng([cfg.seed, stream, cycle])
    k = s.intrinsics()
    pose = true_pose(s, agent, cycle)
    ids = visible_landmark_ids(s, agent, cycle)
    cam = transform_points(invert(pose), s.landmarks[ids])
    pix, _ = project_many(k, cam)
    if cfg.noise.pixel_sigma > 0:
        pix = pix + rng.normal(size=pix.shape) * cfg.noise.pixel_sigma
        pix[:, 0] = np.clip(pix[:, 0], 0.0, k.width - 1e-3)
        pix[:, 1] = np.clip(pix[:, 1], 0.0, k.height - 1e-3)
    desc = _landmark_descriptors(cfg.seed, ids)
    if cfg.noise.descriptor_sigma > 0:
        desc = desc + rng.normal(size=desc.shape) * cfg.noise.descriptor_sigma
        desc /= np.linalg.norm(desc, axis=1, keepdims=True)
    if agent == "uav":
        sent = _noisy_pose(compose(s.true_relative.to_rigid(), pose), rng,
                           cfg.noise.vio_pos_sigma, cfg.noise.vio_rot_sigma)
    else:
        sent = _noisy_pose(pose, rng,
                           cfg.noise.lio_pos_sigma, cfg.noise.lio_rot_sigma)
    packet = FramePacket(
        frame_id=cycle,
        timestamp_ns=int(round(cycle * 1e9 / cfg.rate_hz)),
        pose=np.concatenate([sent.q, sent.t]).astype(np.float32),
        keypoints=pix.astype(np.float32),
        descriptors=desc.astype(np.float32),
        global_descriptor=global_descriptor_of(s, ids),
    )
    return packet, FrameTruth(agent=agent, cycle=cycle, true_pose=pose,
                              landmark_ids=ids.copy())


def render_cloud(s: Scenario, cycle: int) -> np.ndarray:
    """Ground-vehicle surface samples near the trajectory, f32 world points.

    Each landmark contributes its own point plus a small annulus of samples
    on the disk facing the vehicle, modeling the surface patch the LiDAR
    actually sees. Facing disks keep sample offsets orthogonal to the
    viewing rays, so the ray-cast perpendicular foot stays on the landmark.
    """
    _check_cycle(s, cycle)
    cfg = s.config
    rng = np.random.default_rng([cfg.seed, _STREAM_CLOUD, cycle])
    pos = true_pose(s, "ugv", cycle).t
    to_lm = s.landmarks - pos
    d = np.linalg.norm(to_lm, axis=1)
    near = np.nonzero(d <= cfg.cloud_radius)[0]
    if len(near) == 0:
        return np.empty((0, 3), dtype=np.float32)
    k = cfg.cloud_points_per_landmark
    base = s.landmarks[near]
    samples = [base]
    if k > 0:
        normal = to_lm[near] / np.maximum(d[near], 1e-9)[:, None]
        ref = np.where(np.abs(normal[:, 2:3]) < 0.9,
                       np.array([0.0, 0.0, 1.0]), np.array([1.0, 0.0, 0.0]))
        e1 = np.cross(normal, ref)
        e1 /= np.linalg.norm(e1, axis=1, keepdims=True)
        e2 = np.cross(normal, e1)
        radius = rng.uniform(0.6 * cfg.cloud_jitter, cfg.cloud_jitter,
                             size=(len(near), k))
        theta = rng.uniform(0.0, 2 * math.pi, size=(len(near), k))
        offs = (radius * np.cos(theta))[:, :, None] * e1[:, None, :] \
            + (radius * np.sin(theta))[:, :, None] * e2[:, None, :]
        samples.append((base[:, None, :] + offs).reshape(-1, 3))
    cloud = np.concatenate(samples)
    if cfg.noise.depth_sigma > 0:
        cloud = cloud + rng.normal(size=cloud.shape) * cfg.noise.depth_sigma
    return cloud.astype(np.float32)


def first_covisible_cycle(s: Scenario, min_shared: int) -> int | None:
    """Earliest cycle at which the two rendered views share enough landmarks."""
    for c in range(s.config.cycles()):
        g = set(visible_landmark_ids(s, "ugv", c).tolist())
        a = set(visible_landmark_ids(s, "uav", c).tolist())
        if len(g & a) >= min_shared:
            return c
    return None


# --- scenario config files (flat key = value) ---------------------------------

def write_config(config: ScenarioConfig, path) -> None:
    lines = ["# scenario configuration (flat key = value)"]
    for f in fields(config):
        if f.name == "noise":
            continue
        lines.append(f"{f.name} = {getattr(config, f.name)}")
    for f in fields(config.noise):
        lines.append(f"{f.name} = {getattr(config.noise, f.name)}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_config(path) -> ScenarioConfig:
    raw: dict[str, str] = {}
    with open(path) as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise InvalidConfig(f"bad config line: {line!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            raw[key] = value
    return config_from_dict(raw)


def config_from_dict(raw: dict[str, str]) -> ScenarioConfig:
    """Build a config from string key-value pairs, validating names."""
    scenario_fields = {f.name: f for f in fields(ScenarioConfig) if f.name != "noise"}
    noise_fields = {f.name: f for f in fields(NoiseModel)}
    s_kwargs = {}
    n_kwargs = {}
    for key, value in raw.items():
        if key in scenario_fields:
            s_kwargs[key] = _coerce(scenario_fields[key].type, value)
        elif key in noise_fields:
            n_kwargs[key] = _coerce(noise_fields[key].type, value)
        else:
            raise InvalidConfig(f"unknown config key {key!r}")
    return ScenarioConfig(noise=NoiseModel(**n_kwargs), **s_kwargs)


def _coerce(typ, value: str):
    name = typ if isinstance(typ, str) else getattr(typ, "__name__", str(typ))
    if name == "int":
        return int(value)
    if name == "float":
        return float(value)
    return value
