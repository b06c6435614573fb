"""Two-stage sliding-window refinement.

Stage 1 runs a local bundle adjustment over the ground vehicle's window:
camera poses (6-DoF tangent parametrization) and landmark inverse depths
are refined against intra-window reprojection, with weak priors pulling
poses toward their odometry-interpolated values and inverse depths toward
their LiDAR measurements. The priors carry the metric information the
reprojection terms cannot see: without them the window has a free common-
mode rigid motion plus a free monocular scale, so the system would drift
along exactly the directions the LiDAR and odometry already pin down.

Stage 2 freezes the refined window and estimates the 4-DoF world-to-world
transform together with the aerial camera poses, from air-ground
reprojection terms plus a regularizer that penalizes disagreement with the
per-pair closed-form estimates (Frobenius norm of T * anchor^-1 - I on
homogeneous matrices).

Both stages use Levenberg-Marquardt with additive damping; accepted steps
never increase the objective. Stage 1 eliminates landmark blocks with a
Schur complement (they are scalar, so the elimination is a division).

Landmarks use inverse-depth parametrization: a landmark is its anchor
frame, the anchor pixel's normalized ray (z = 1), and the inverse of its
z-depth in the anchor camera.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import AglocError
from .geometry import (
    CameraIntrinsics,
    RelPose4,
    RigidTransform,
    RobustNorm,
    huber_weights,
    quat_from_rotvec,
    quat_multiply,
    quat_to_matrix,
    rotvec_from_quat,
    wrap_angle,
)

_LAMBDA_MAX = 1e10
_LAMBDA_MIN = 1e-12


class RankDeficient(AglocError):
    """Normal equations stayed singular even at maximum damping."""


class NoCovisibility(AglocError):
    """Stage 2 called with no air-ground pairs."""


@dataclass(frozen=True)
class Observation:
    frame_id: int
    keypoint: int
    pixel: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixel, dtype=float).reshape(2).copy()
        px.flags.writeable = False
        object.__setattr__(self, "pixel", px)


@dataclass
class Landmark:
    """Anchored inverse-depth landmark with its observations.

    observations include the anchor frame's own observation; the solver
    skips it (it is identically zero under this parametrization). A
    landmark is valid with >= 2 observations, or with one when it carries
    a map depth measurement.
    """

    anchor_frame: int
    anchor_pixel: np.ndarray
    inv_depth: float
    observations: list[Observation] = field(default_factory=list)
    depth_meas: float | None = None

    def __post_init__(self):
        self.anchor_pixel = np.asarray(self.anchor_pixel, dtype=float).reshape(2)
        if self.inv_depth <= 0:
            raise ValueError("inverse depth must be positive")


def validate_landmarks(landmarks: list[Landmark]) -> None:
    for i, lm in enumerate(landmarks):
        if lm.inv_depth <= 0:
            raise ValueError(f"landmark {i} has non-positive inverse depth")
        if len(lm.observations) < 2 and lm.depth_meas is None:
            raise ValueError(
                f"landmark {i} needs >= 2 observations or a depth measurement")


@dataclass
class WindowFrame:
    frame_id: int
    timestamp_ns: int
    pose: RigidTransform


@dataclass
class SlidingWindow:
    """Fixed-length, time-ordered window of ground keyframes."""

    size: int = 6
    frames: list[WindowFrame] = field(default_factory=list)
    landmarks: list[Landmark] = field(default_factory=list)

    def push(self, frame: WindowFrame) -> None:
        if self.frames and frame.timestamp_ns < self.frames[-1].timestamp_ns:
            raise ValueError("frames must be pushed in time order")
        self.frames.append(frame)
        if len(self.frames) > self.size:
            self.frames.pop(0)

    def frame_ids(self) -> list[int]:
        return [f.frame_id for f in self.frames]


@dataclass
class SolverConfig:
    max_iterations: int = 50
    gradient_tol: float = 1e-8
    param_tol: float = 1e-10
    init_lambda: float = 1e-4
    lambda_up: float = 10.0
    lambda_down: float = 0.1
    w_reg: float = 10.0
    fix_oldest: bool = True
    pose_prior_sigma_t: float = 2.0      # meters; weak gauge-holding prior
    pose_prior_sigma_r: float = 0.5      # radians
    depth_prior_sigma: float = 0.1       # meters; ties scale to the map depths
    uav_prior_sigma_t: float = 0.05      # meters; VIO poses are measurements
    uav_prior_sigma_r: float = 0.02      # radians
    depth_prior_huber: float = 1.0       # in units of depth_prior_sigma; the
                                         # map depth can be a wrong surface
    min_inv_depth: float = 1e-6

    def __post_init__(self):
        for name in ("max_iterations", "gradient_tol", "param_tol", "init_lambda",
                     "lambda_up", "w_reg", "pose_prior_sigma_t",
                     "pose_prior_sigma_r", "depth_prior_sigma"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    cost: float
    damping: float
    gradient_norm: float

    def line(self) -> str:
        return (f"iter={self.iteration} cost={self.cost:.9e} "
                f"damping={self.damping:.3e} gradient={self.gradient_norm:.3e}")


@dataclass
class Stage1Result:
    poses: list[RigidTransform]
    landmarks: list[Landmark]
    cost: float
    converged: bool
    iterations: int
    trace: list[IterationRecord]


@dataclass(frozen=True)
class AirGroundObservation:
    a_frame: int
    point_world: np.ndarray      # landmark in the ground world frame, frozen
    pixel: np.ndarray            # observation in the aerial image

    def __post_init__(self):
        pw = np.asarray(self.point_world, dtype=float).reshape(3).copy()
        px = np.asarray(self.pixel, dtype=float).reshape(2).copy()
        pw.flags.writeable = False
        px.flags.writeable = False
        object.__setattr__(self, "point_world", pw)
        object.__setattr__(self, "pixel", px)


@dataclass
class StageTwoProblem:
    """Inputs of the second stage; ground-side quantities are constants."""

    relative_init: RelPose4
    uav_poses: dict[int, RigidTransform]
    observations: list[AirGroundObservation]
    anchors: list[RelPose4]


@dataclass
class Stage2Result:
    relative: RelPose4
    uav_poses: dict[int, RigidTransform]
    cost: float
    converged: bool
    iterations: int
    trace: list[IterationRecord]


# --- local parametrization ----------------------------------------------------

def retract_pose(pose: RigidTransform, delta: np.ndarray) -> RigidTransform:
    """Right-perturbation retraction: t += dt, R <- R exp(dtheta^)."""
    delta = np.asarray(delta, dtype=float).reshape(6)
    return RigidTransform(quat_multiply(pose.q, quat_from_rotvec(delta[3:])),
                          pose.t + delta[:3])


def retract_rel4(rel: RelPose4, delta: np.ndarray) -> RelPose4:
    delta = np.asarray(delta, dtype=float).reshape(4)
    return RelPose4(rel.t + delta[:3], wrap_angle(rel.yaw + delta[3]))


def _skew(v: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def _skew_many(v: np.ndarray) -> np.ndarray:
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def _rotvec_rjac_inv(phi: np.ndarray) -> np.ndarray:
    """Inverse right Jacobian of the SO(3) logarithm at phi."""
    theta = float(np.linalg.norm(phi))
    s = _skew(phi)
    if theta < 1e-6:
        return np.eye(3) + 0.5 * s + s @ s / 12.0
    coef = 1.0 / theta ** 2 - (1.0 + math.cos(theta)) / (2.0 * theta * math.sin(theta))
    return np.eye(3) + 0.5 * s + coef * (s @ s)


def normalized_ray(k: CameraIntrinsics, pixel: np.ndarray) -> np.ndarray:
    """Anchor direction with z = 1 (inverse depth is inverse z-depth)."""
    return np.array([(pixel[0] - k.cx) / k.fx, (pixel[1] - k.cy) / k.fy, 1.0])


# --- vectorized residual/Jacobian kernels --------------------------------------

def _proj_jacobian(k: CameraIntrinsics, xc: np.ndarray) -> np.ndarray:
    """d(pixel)/d(camera point) for each row of xc; (O,2,3)."""
    z = xc[:, 2]
    a = np.zeros((len(xc), 2, 3))
    a[:, 0, 0] = k.fx / z
    a[:, 0, 2] = -k.fx * xc[:, 0] / z ** 2
    a[:, 1, 1] = k.fy / z
    a[:, 1, 2] = -k.fy * xc[:, 1] / z ** 2
    return a


def _eq2_terms(r_all, t_all, m_all, rho, anchor_idx, obs_frame, obs_lm,
               obs_px, k: CameraIntrinsics, want_jacobian: bool):
    """Residuals (and Jacobians) of all intra-window reprojection terms.

    r_all (F,3,3), t_all (F,3): camera-to-world poses. m_all (L,3): anchor
    rays, rho (L,): inverse depths. Returns residuals (O,2), validity mask,
    and when requested the Jacobian blocks w.r.t. observer pose (O,2,6),
    anchor pose (O,2,6) and inverse depth (O,2).
    """
    p_anchor = m_all / rho[:, None]                                  # (L,3)
    w_pts = (np.einsum("lij,lj->li", r_all[anchor_idx], p_anchor)
             + t_all[anchor_idx])                                    # (L,3)
    r_obs = r_all[obs_frame]
    diff = w_pts[obs_lm] - t_all[obs_frame]
    xc = np.einsum("oji,oj->oi", r_obs, diff)
    valid = xc[:, 2] > 1e-9
    z = np.where(valid, xc[:, 2], 1.0)
    pred = np.stack([k.fx * xc[:, 0] / z + k.cx,
                     k.fy * xc[:, 1] / z + k.cy], axis=1)
    res = np.where(valid[:, None], pred - obs_px, 0.0)
    if not want_jacobian:
        return res, valid, None
    xc_safe = xc.copy()
    xc_safe[:, 2] = z
    a = _proj_jacobian(k, xc_safe)                                   # (O,2,3)
    rt_obs = np.swapaxes(r_obs, 1, 2)                                # R^T
    j_pose = np.empty((len(obs_lm), 2, 6))
    j_pose[:, :, :3] = -np.einsum("oij,ojk->oik", a, rt_obs)
    j_pose[:, :, 3:] = np.einsum("oij,ojk->oik", a, _skew_many(xc_safe))
    ra = r_all[anchor_idx][obs_lm]                                   # (O,3,3)
    d_anchor = np.empty((len(obs_lm), 3, 6))
    d_anchor[:, :, :3] = np.eye(3)
    d_anchor[:, :, 3:] = -np.einsum("oij,ojk->oik", ra,
                                    _skew_many(p_anchor[obs_lm]))
    art = np.einsum("oij,ojk->oik", a, rt_obs)                       # (O,2,3)
    j_anchor = np.einsum("oij,ojk->oik", art, d_anchor)
    d_rho = -np.einsum("oij,oj->oi", ra, m_all[obs_lm]) / (rho[obs_lm] ** 2)[:, None]
    j_rho = np.einsum("oij,oj->oi", art, d_rho)                      # (O,2)
    zero = ~valid
    j_pose[zero] = 0.0
    j_anchor[zero] = 0.0
    j_rho[zero] = 0.0
    return res, valid, (j_pose, j_anchor, j_rho)


def _eq4_terms(ra_obs, ta_obs, rel_t, rel_yaw, w_pts, obs_px,
               k: CameraIntrinsics, want_jacobian: bool):
    """Residuals (and Jacobians) of the air-ground reprojection terms.

    ra_obs (O,3,3), ta_obs (O,3): aerial camera poses per observation.
    w_pts (O,3): frozen landmarks in the ground world. Jacobians are taken
    w.r.t. the aerial pose tangent (O,2,6) and the 4-DoF relative transform
    (O,2,4), columns ordered (x, y, z, yaw).
    """
    c, s = math.cos(rel_yaw), math.sin(rel_yaw)
    rz = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    y = w_pts @ rz.T + rel_t                                         # (O,3)
    diff = y - ta_obs
    xc = np.einsum("oji,oj->oi", ra_obs, diff)
    valid = xc[:, 2] > 1e-9
    z = np.where(valid, xc[:, 2], 1.0)
    pred = np.stack([k.fx * xc[:, 0] / z + k.cx,
                     k.fy * xc[:, 1] / z + k.cy], axis=1)
    res = np.where(valid[:, None], pred - obs_px, 0.0)
    if not want_jacobian:
        return res, valid, None
    xc_safe = xc.copy()
    xc_safe[:, 2] = z
    a = _proj_jacobian(k, xc_safe)
    rt = np.swapaxes(ra_obs, 1, 2)
    j_pose = np.empty((len(w_pts), 2, 6))
    j_pose[:, :, :3] = -np.einsum("oij,ojk->oik", a, rt)
    j_pose[:, :, 3:] = np.einsum("oij,ojk->oik", a, _skew_many(xc_safe))
    art = np.einsum("oij,ojk->oik", a, rt)                           # (O,2,3)
    j_rel = np.empty((len(w_pts), 2, 4))
    j_rel[:, :, :3] = art
    dz = np.stack([-(w_pts @ rz.T)[:, 1], (w_pts @ rz.T)[:, 0],
                   np.zeros(len(w_pts))], axis=1)                    # dY/dyaw
    j_rel[:, :, 3] = np.einsum("oij,oj->oi", art, dz)
    zero = ~valid
    j_pose[zero] = 0.0
    j_rel[zero] = 0.0
    return res, valid, (j_pose, j_rel)


def _eq5_block(rel: RelPose4, anchor: RelPose4, want_jacobian: bool):
    """Residual of T * anchor^-1 - I flattened to 12 entries (top 3 rows)."""
    b = anchor.to_rigid()
    bm = np.linalg.inv(b.matrix())
    br, bt = bm[:3, :3], bm[:3, 3]
    c, s = math.cos(rel.yaw), math.sin(rel.yaw)
    rz = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    top_rot = rz @ br - np.eye(3)
    top_t = rz @ bt + rel.t
    r = np.concatenate([top_rot.reshape(9), top_t])
    if not want_jacobian:
        return r, None
    j = np.zeros((12, 4))
    j[9:12, 0:3] = np.eye(3)
    dz = np.array([[-s, -c, 0.0], [c, -s, 0.0], [0.0, 0.0, 0.0]])
    j[:9, 3] = (dz @ br).reshape(9)
    j[9:12, 3] = dz @ bt
    return r, j


# --- public scalar blocks (finite-difference test surface) --------------------

def reproj_block_eq2(obs_pose: RigidTransform, anchor_pose: RigidTransform,
                     anchor_pixel, inv_depth: float, pixel,
                     k: CameraIntrinsics):
    """Single stage-1 reprojection block: residual and analytic Jacobians
    w.r.t. (observer tangent, anchor tangent, inverse depth)."""
    m = normalized_ray(k, np.asarray(anchor_pixel, dtype=float))
    res, valid, jac = _eq2_terms(
        np.stack([obs_pose.rotation_matrix(), anchor_pose.rotation_matrix()]),
        np.stack([obs_pose.t, anchor_pose.t]),
        m[None, :], np.array([float(inv_depth)]),
        np.array([1]), np.array([0]), np.array([0]),
        np.asarray(pixel, dtype=float)[None, :], k, True)
    j_pose, j_anchor, j_rho = jac
    return res[0], j_pose[0], j_anchor[0], j_rho[0][:, None]


def reproj_block_eq4(uav_pose: RigidTransform, relative: RelPose4,
                     point_world, pixel, k: CameraIntrinsics):
    """Single stage-2 reprojection block: residual and Jacobians w.r.t.
    (aerial pose tangent, 4-DoF relative transform)."""
    res, valid, jac = _eq4_terms(
        uav_pose.rotation_matrix()[None], uav_pose.t[None],
        relative.t, relative.yaw,
        np.asarray(point_world, dtype=float)[None, :],
        np.asarray(pixel, dtype=float)[None, :], k, True)
    j_pose, j_rel = jac
    return res[0], j_pose[0], j_rel[0]


def reg_block_eq5(relative: RelPose4, anchor: RelPose4):
    """Single regularizer block (12 entries) and its 4-DoF Jacobian."""
    return _eq5_block(relative, anchor, True)


def pose_prior_block(pose: RigidTransform, anchor: RigidTransform,
                     sigma_t: float, sigma_r: float):
    """Weak pose prior residual (6,) and Jacobian (6,6) in the right tangent."""
    phi = rotvec_from_quat(
        quat_multiply(np.array([anchor.q[0], -anchor.q[1], -anchor.q[2],
                                -anchor.q[3]]), pose.q))
    r = np.concatenate([(pose.t - anchor.t) / sigma_t, phi / sigma_r])
    j = np.zeros((6, 6))
    j[:3, :3] = np.eye(3) / sigma_t
    j[3:, 3:] = _rotvec_rjac_inv(phi) / sigma_r
    return r, j


def depth_prior_block(inv_depth: float, depth_meas: float, sigma_d: float):
    """Depth-space prior residual and its inverse-depth derivative."""
    r = (1.0 / inv_depth - depth_meas) / sigma_d
    j = -1.0 / (inv_depth ** 2 * sigma_d)
    return r, j


# --- evaluation ops ------------------------------------------------------------

def eval_residual_eq2(window: SlidingWindow, k_g: CameraIntrinsics,
                      norm: RobustNorm):
    """Robust cost and raw residuals of every intra-window reprojection term."""
    state = _Stage1State(window, k_g)
    res, valid, _ = state.evaluate(want_jacobian=False)
    costs, _ = huber_weights(norm, np.linalg.norm(res, axis=1))
    costs = np.where(valid, costs, 0.0)
    return float(costs.sum()), res


def eval_residual_eq5(t: RelPose4, anchors: list[RelPose4]) -> float:
    """Sum over anchors of the Frobenius norm of T * anchor^-1 - I."""
    if not anchors:
        raise ValueError("anchors must be non-empty")
    total = 0.0
    for a in anchors:
        r, _ = _eq5_block(t, a, False)
        total += float(np.linalg.norm(r))
    return total


def initial_relative(anchors: list[RelPose4]) -> RelPose4:
    """Component-wise median translation and circular-medoid yaw."""
    if not anchors:
        raise ValueError("anchors must be non-empty")
    ts = np.stack([a.t for a in anchors])
    t = np.median(ts, axis=0)
    yaws = [a.yaw for a in anchors]
    def spread(y):
        return sum(abs(wrap_angle(y - o)) for o in yaws)
    yaw = min(yaws, key=lambda y: (spread(y), y))
    return RelPose4(t, yaw)


# --- stage 1 -------------------------------------------------------------------

class _Stage1State:
    """Index arrays and current variables for the window problem."""

    def __init__(self, window: SlidingWindow, k_g: CameraIntrinsics):
        self.k = k_g
        self.frames = list(window.frames)
        self.landmarks = window.landmarks
        idx = {f.frame_id: i for i, f in enumerate(self.frames)}
        self.poses = [f.pose for f in self.frames]
        self.anchor_idx = np.array([idx[lm.anchor_frame] for lm in self.landmarks],
                                   dtype=int) if self.landmarks else np.zeros(0, int)
        self.m = np.stack([normalized_ray(k_g, lm.anchor_pixel)
                           for lm in self.landmarks]) if self.landmarks else np.zeros((0, 3))
        self.rho = np.array([lm.inv_depth for lm in self.landmarks])
        obs_frame, obs_lm, obs_px = [], [], []
        for li, lm in enumerate(self.landmarks):
            for ob in lm.observations:
                if ob.frame_id == lm.anchor_frame:
                    continue          # identically zero under anchoring
                if ob.frame_id not in idx:
                    continue
                obs_frame.append(idx[ob.frame_id])
                obs_lm.append(li)
                obs_px.append(ob.pixel)
        self.obs_frame = np.array(obs_frame, dtype=int)
        self.obs_lm = np.array(obs_lm, dtype=int)
        self.obs_px = np.array(obs_px, dtype=float).reshape(-1, 2)

    def pose_arrays(self):
        r = np.stack([p.rotation_matrix() for p in self.poses])
        t = np.stack([p.t for p in self.poses])
        return r, t

    def evaluate(self, want_jacobian: bool):
        if len(self.obs_lm) == 0:
            empty = np.zeros((0, 2))
            return empty, np.zeros(0, dtype=bool), None
        r_all, t_all = self.pose_arrays()
        return _eq2_terms(r_all, t_all, self.m, self.rho, self.anchor_idx,
                          self.obs_frame, self.obs_lm, self.obs_px,
                          self.k, want_jacobian)


def _depth_prior_robust(r: float, delta: float):
    """Huber cost and IRLS weight for the depth prior residual; the LiDAR
    depth may belong to a different surface, so it cannot be quadratic."""
    a = abs(r)
    if a <= delta:
        return 0.5 * r * r, 1.0
    return delta * (a - 0.5 * delta), delta / a


def _stage1_cost(state: _Stage1State, norm: RobustNorm, cfg: SolverConfig,
                 prior_anchors: list[RigidTransform],
                 free: np.ndarray) -> float:
    res, valid, _ = state.evaluate(want_jacobian=False)
    costs, _ = huber_weights(norm, np.linalg.norm(res, axis=1))
    total = float(np.where(valid, costs, 0.0).sum())
    for fi in np.nonzero(free)[0]:
        r, _ = pose_prior_block(state.poses[fi], prior_anchors[fi],
                                cfg.pose_prior_sigma_t, cfg.pose_prior_sigma_r)
        total += 0.5 * float(r @ r)
    for li, lm in enumerate(state.landmarks):
        if lm.depth_meas is not None:
            r, _ = depth_prior_block(state.rho[li], lm.depth_meas,
                                     cfg.depth_prior_sigma)
            c, _ = _depth_prior_robust(r, cfg.depth_prior_huber)
            total += c
    return total


def stage1_refine(window: SlidingWindow, k_g: CameraIntrinsics,
                  norm: RobustNorm, cfg: SolverConfig) -> Stage1Result:
    """Refine window poses and landmark inverse depths (local BA)."""
    if len(window.frames) < 2:
        raise ValueError("stage 1 needs at least 2 frames")
    state = _Stage1State(window, k_g)
    nf = len(state.frames)
    nl = len(state.landmarks)
    free = np.ones(nf, dtype=bool)
    if cfg.fix_oldest:
        free[0] = False
    free_idx = np.nonzero(free)[0]
    param_of = {fi: pi for pi, fi in enumerate(free_idx)}
    np_pose = len(free_idx)
    prior_anchors = [f.pose for f in state.frames]

    lam = cfg.init_lambda
    cost = _stage1_cost(state, norm, cfg, prior_anchors, free)
    trace: list[IterationRecord] = []
    converged = False
    iterations = 0

    for it in range(cfg.max_iterations):
        iterations = it + 1
        res, valid, jac = state.evaluate(want_jacobian=True)
        j_pose, j_anchor, j_rho = jac if jac is not None else (None, None, None)
        norms = np.linalg.norm(res, axis=1)
        _, w = huber_weights(norm, norms)
        w = np.where(valid, w, 0.0)

        hpp = np.zeros((np_pose, np_pose, 6, 6))
        hpl = np.zeros((np_pose, nl, 6))
        hll = np.zeros(nl)
        bp = np.zeros((np_pose, 6))
        bl = np.zeros(nl)

        if len(state.obs_lm):
            oi = np.array([param_of.get(f, -1) for f in state.obs_frame])
            ai = np.array([param_of.get(f, -1)
                           for f in state.anchor_idx[state.obs_lm]])
            sw = np.sqrt(w)[:, None, None]
            jp = j_pose * sw
            ja = j_anchor * sw
            jr = j_rho * np.sqrt(w)[:, None]
            rw = res * np.sqrt(w)[:, None]

            def acc_pp(idx_a, blk_a, idx_b, blk_b):
                sel = (idx_a >= 0) & (idx_b >= 0)
                if not np.any(sel):
                    return
                h = np.einsum("oci,ocj->oij", blk_a[sel], blk_b[sel])
                np.add.at(hpp, (idx_a[sel], idx_b[sel]), h)

            acc_pp(oi, jp, oi, jp)
            acc_pp(ai, ja, ai, ja)
            acc_pp(oi, jp, ai, ja)
            acc_pp(ai, ja, oi, jp)

            for idx, blk in ((oi, jp), (ai, ja)):
                sel = idx >= 0
                if np.any(sel):
                    h = np.einsum("oci,oc->oi", blk[sel], jr[sel])
                    np.add.at(hpl, (idx[sel], state.obs_lm[sel]), h)
                    g = np.einsum("oci,oc->oi", blk[sel], rw[sel])
                    np.add.at(bp, idx[sel], -g)
            np.add.at(hll, state.obs_lm, np.einsum("oc,oc->o", jr, jr))
            np.add.at(bl, state.obs_lm, -np.einsum("oc,oc->o", jr, rw))

        # weak pose priors hold the common mode at the odometry anchors
        for fi in free_idx:
            r, j = pose_prior_block(state.poses[fi], prior_anchors[fi],
                                    cfg.pose_prior_sigma_t, cfg.pose_prior_sigma_r)
            pi = param_of[fi]
            hpp[pi, pi] += j.T @ j
            bp[pi] += -(j.T @ r)
        # depth priors pin the monocular scale to the LiDAR measurements
        for li, lm in enumerate(state.landmarks):
            if lm.depth_meas is not None:
                r, j = depth_prior_block(state.rho[li], lm.depth_meas,
                                         cfg.depth_prior_sigma)
                _, dw = _depth_prior_robust(r, cfg.depth_prior_huber)
                hll[li] += dw * j * j
                bl[li] += -dw * j * r

        grad_norm = max(float(np.abs(bp).max()) if bp.size else 0.0,
                        float(np.abs(bl).max()) if bl.size else 0.0)
        trace.append(IterationRecord(it, cost, lam, grad_norm))
        if grad_norm < cfg.gradient_tol:
            converged = True
            break

        stepped = False
        while lam <= _LAMBDA_MAX:
            try:
                dp, dl = _schur_solve(hpp, hpl, hll, bp, bl, lam)
            except np.linalg.LinAlgError:
                lam *= cfg.lambda_up
                continue
            new_poses = list(state.poses)
            for fi, pi in param_of.items():
                new_poses[fi] = retract_pose(state.poses[fi], dp[pi])
            new_rho = np.maximum(state.rho + dl, cfg.min_inv_depth)
            old_poses, old_rho = state.poses, state.rho
            state.poses, state.rho = new_poses, new_rho
            new_cost = _stage1_cost(state, norm, cfg, prior_anchors, free)
            if new_cost <= cost:
                step = math.sqrt(float((dp ** 2).sum() + (dl ** 2).sum()))
                accepted_small = step < cfg.param_tol
                cost = new_cost
                lam = max(lam * cfg.lambda_down, _LAMBDA_MIN)
                stepped = True
                if accepted_small:
                    converged = True
                break
            state.poses, state.rho = old_poses, old_rho
            lam *= cfg.lambda_up
        if not stepped:
            if lam > _LAMBDA_MAX and not trace:
                raise RankDeficient("stage 1 normal equations unsolvable")
            break
        if converged:
            break

    out_landmarks = [replace(lm, inv_depth=float(state.rho[i]),
                             anchor_pixel=lm.anchor_pixel.copy(),
                             observations=list(lm.observations))
                     for i, lm in enumerate(state.landmarks)]
    return Stage1Result(poses=list(state.poses), landmarks=out_landmarks,
                        cost=cost, converged=converged, iterations=iterations,
                        trace=trace)


def _schur_solve(hpp, hpl, hll, bp, bl, lam):
    """Eliminate the scalar landmark blocks, solve poses, back-substitute."""
    np_pose, nl = hpl.shape[0], hpl.shape[1]
    hll_d = hll + lam
    if np.any(hll_d <= 0):
        raise np.linalg.LinAlgError("landmark diagonal not positive")
    n = 6 * np_pose
    if n == 0:
        return np.zeros((0, 6)), bl / hll_d
    h = np.swapaxes(hpp, 1, 2).reshape(n, n).copy()
    h[np.diag_indices(n)] += lam
    u = np.transpose(hpl, (0, 2, 1)).reshape(n, nl)
    s = h - (u / hll_d) @ u.T
    rhs = bp.reshape(n) - u @ (bl / hll_d)
    dp = np.linalg.solve(s, rhs).reshape(np_pose, 6)
    dl = (bl - np.einsum("pli,pi->l", hpl, dp)) / hll_d
    return dp, dl


# --- stage 2 -------------------------------------------------------------------

def _stage2_cost(problem, rel, poses, prior_poses, k_a, norm, cfg) -> float:
    ra = np.stack([poses[o.a_frame].rotation_matrix() for o in problem.observations])
    ta = np.stack([poses[o.a_frame].t for o in problem.observations])
    w = np.stack([o.point_world for o in problem.observations])
    px = np.stack([o.pixel for o in problem.observations])
    res, valid, _ = _eq4_terms(ra, ta, rel.t, rel.yaw, w, px, k_a, False)
    costs, _ = huber_weights(norm, np.linalg.norm(res, axis=1))
    total = float(np.where(valid, costs, 0.0).sum())
    for a in problem.anchors:
        r, _ = _eq5_block(rel, a, False)
        total += 0.5 * cfg.w_reg * float(r @ r)
    for f, anchor in prior_poses.items():
        r, _ = pose_prior_block(poses[f], anchor,
                                cfg.uav_prior_sigma_t, cfg.uav_prior_sigma_r)
        total += 0.5 * float(r @ r)
    return total


def stage2_refine(problem: StageTwoProblem, k_a: CameraIntrinsics,
                  norm: RobustNorm, cfg: SolverConfig) -> Stage2Result:
    """Refine the 4-DoF relative transform and the aerial camera poses.

    The aerial poses carry weak priors at their transmitted (VIO) values.
    Without them the problem has an exact yaw+translation gauge: shifting
    the relative transform and every aerial pose together leaves all
    reprojection terms unchanged, so the anchors alone would dictate the
    answer and the reprojection evidence would be wasted.
    """
    if not problem.anchors or not problem.observations:
        raise NoCovisibility("stage 2 needs at least one surviving pair")
    frames = sorted(problem.uav_poses.keys())
    fidx = {f: i for i, f in enumerate(frames)}
    poses = dict(problem.uav_poses)
    prior_poses = dict(problem.uav_poses)
    rel = problem.relative_init
    npar = 4 + 6 * len(frames)

    obs_f = np.array([fidx[o.a_frame] for o in problem.observations])
    w_pts = np.stack([o.point_world for o in problem.observations])
    px = np.stack([o.pixel for o in problem.observations])

    lam = cfg.init_lambda
    cost = _stage2_cost(problem, rel, poses, prior_poses, k_a, norm, cfg)
    trace: list[IterationRecord] = []
    converged = False
    iterations = 0

    for it in range(cfg.max_iterations):
        iterations = it + 1
        ra = np.stack([poses[f].rotation_matrix() for f in frames])[obs_f]
        ta = np.stack([poses[f].t for f in frames])[obs_f]
        res, valid, jac = _eq4_terms(ra, ta, rel.t, rel.yaw, w_pts, px, k_a, True)
        j_pose, j_rel = jac
        norms = np.linalg.norm(res, axis=1)
        _, w = huber_weights(norm, norms)
        w = np.where(valid, w, 0.0)
        sw = np.sqrt(w)[:, None, None]
        jp = j_pose * sw
        jr = j_rel * sw
        rw = res * np.sqrt(w)[:, None]

        h = np.zeros((npar, npar))
        b = np.zeros(npar)
        h[:4, :4] = np.einsum("oci,ocj->ij", jr, jr)
        b[:4] = -np.einsum("oci,oc->i", jr, rw)
        hp = np.zeros((len(frames), len(frames), 6, 6))
        np.add.at(hp, (obs_f, obs_f), np.einsum("oci,ocj->oij", jp, jp))
        hx = np.zeros((len(frames), 4, 6))
        np.add.at(hx, obs_f, np.einsum("oci,ocj->oji", jp, jr))
        bpz = np.zeros((len(frames), 6))
        np.add.at(bpz, obs_f, -np.einsum("oci,oc->oi", jp, rw))
        for i in range(len(frames)):
            h[4 + 6 * i: 10 + 6 * i, 4 + 6 * i: 10 + 6 * i] = hp[i, i]
            h[:4, 4 + 6 * i: 10 + 6 * i] = hx[i]
            h[4 + 6 * i: 10 + 6 * i, :4] = hx[i].T
            b[4 + 6 * i: 10 + 6 * i] = bpz[i]
        sreg = math.sqrt(cfg.w_reg)
        for a in problem.anchors:
            r5, j5 = _eq5_block(rel, a, True)
            r5 = r5 * sreg
            j5 = j5 * sreg
            h[:4, :4] += j5.T @ j5
            b[:4] += -(j5.T @ r5)
        for i, f in enumerate(frames):
            rp, jp6 = pose_prior_block(poses[f], prior_poses[f],
                                       cfg.uav_prior_sigma_t, cfg.uav_prior_sigma_r)
            sl = slice(4 + 6 * i, 10 + 6 * i)
            h[sl, sl] += jp6.T @ jp6
            b[sl] += -(jp6.T @ rp)

        grad_norm = float(np.abs(b).max()) if b.size else 0.0
        trace.append(IterationRecord(it, cost, lam, grad_norm))
        if grad_norm < cfg.gradient_tol:
            converged = True
            break

        stepped = False
        while lam <= _LAMBDA_MAX:
            hd = h.copy()
            hd[np.diag_indices(npar)] += lam
            try:
                delta = np.linalg.solve(hd, b)
            except np.linalg.LinAlgError:
                lam *= cfg.lambda_up
                continue
            new_rel = retract_rel4(rel, delta[:4])
            new_poses = {f: retract_pose(poses[f], delta[4 + 6 * i: 10 + 6 * i])
                         for i, f in enumerate(frames)}
            new_cost = _stage2_cost(problem, new_rel, new_poses, prior_poses,
                                     k_a, norm, cfg)
            if new_cost <= cost:
                small = float(np.linalg.norm(delta)) < cfg.param_tol
                rel, poses, cost = new_rel, new_poses, new_cost
                lam = max(lam * cfg.lambda_down, _LAMBDA_MIN)
                stepped = True
                if small:
                    converged = True
                break
            lam *= cfg.lambda_up
        if not stepped:
            break
        if converged:
            break

    return Stage2Result(relative=rel, uav_poses=poses, cost=cost,
                        converged=converged, iterations=iterations, trace=trace)


def landmark_world_points(frames: list[WindowFrame], landmarks: list[Landmark],
                          k_g: CameraIntrinsics) -> np.ndarray:
    """World positions implied by each landmark's anchor pose and depth."""
    idx = {f.frame_id: i for i, f in enumerate(frames)}
    out = np.full((len(landmarks), 3), np.nan)
    for i, lm in enumerate(landmarks):
        if lm.anchor_frame not in idx:
            continue
        pose = frames[idx[lm.anchor_frame]].pose
        m = normalized_ray(k_g, lm.anchor_pixel)
        out[i] = pose.rotation_matrix() @ (m / lm.inv_depth) + pose.t
    return out
