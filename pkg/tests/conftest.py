import math

import numpy as np
import pytest

from agloc.geometry import (
    CameraIntrinsics,
    RigidTransform,
    invert,
    project,
    quat_from_rotvec,
    transform_point,
)
from agloc.optimizer import Landmark, Observation, SlidingWindow, WindowFrame


K_TEST = CameraIntrinsics(fx=500.0, fy=500.0, cx=320.0, cy=240.0,
                          width=640, height=480)


def look_at_pose(position, forward, up=(0.0, 0.0, 1.0)):
    """Camera-to-world pose with the optical axis along `forward`."""
    f = np.asarray(forward, dtype=float)
    f = f / np.linalg.norm(f)
    u = np.asarray(up, dtype=float)
    x = np.cross(f, u)
    n = np.linalg.norm(x)
    if n < 1e-9:
        raise ValueError("forward parallel to up")
    x /= n
    y = np.cross(f, x)
    m = np.eye(4)
    m[:3, 0], m[:3, 1], m[:3, 2] = x, y, f
    m[:3, 3] = np.asarray(position, dtype=float)
    return RigidTransform.from_matrix(m)


def build_window_scene(rng, n_frames=5, n_landmarks=120, pixel_sigma=0.0,
                       depth_sigma=0.0, pose_sigma_t=0.0, pose_sigma_r=0.0,
                       with_depth_meas=True, k=K_TEST):
    """Ground-truth window: forward-moving camera viewing a landmark slab.

    Returns (window with noisy poses/initializations, true poses list,
    true landmark world points).
    """
    pts = np.column_stack([
        rng.uniform(2.0, 14.0, n_landmarks),
        rng.uniform(-4.0, 4.0, n_landmarks),
        rng.uniform(-1.0, 2.0, n_landmarks),
    ])
    true_poses = []
    for i in range(n_frames):
        pos = np.array([-2.0 + 0.6 * i, 0.1 * math.sin(i), 0.5])
        true_poses.append(look_at_pose(pos, [1.0, 0.05 * math.cos(i), 0.0]))

    # visibility and pixel truth
    obs_px = {}
    for fi, pose in enumerate(true_poses):
        w2c = invert(pose)
        for li in range(n_landmarks):
            pc = transform_point(w2c, pts[li])
            if pc[2] < 0.5:
                continue
            px = project(k, pc)
            if not (0 <= px[0] < k.width and 0 <= px[1] < k.height):
                continue
            obs_px[(fi, li)] = (px + pixel_sigma * rng.normal(size=2), pc[2])

    landmarks = []
    frame_ids = list(range(n_frames))
    for li in range(n_landmarks):
        seen = [(fi, *obs_px[(fi, li)]) for fi in frame_ids if (fi, li) in obs_px]
        if len(seen) < 2:
            continue
        a_fi, a_px, a_depth = seen[0]
        meas = a_depth + depth_sigma * rng.normal() if with_depth_meas else None
        init_depth = meas if meas is not None else a_depth
        landmarks.append(Landmark(
            anchor_frame=a_fi,
            anchor_pixel=a_px,
            inv_depth=1.0 / max(init_depth, 0.2),
            observations=[Observation(fi, li, px) for fi, px, _ in seen],
            depth_meas=meas,
        ))

    from agloc.geometry import quat_multiply

    window = SlidingWindow(size=n_frames)
    for fi, pose in enumerate(true_poses):
        noisy = pose
        if pose_sigma_t > 0 or pose_sigma_r > 0:
            dq = quat_from_rotvec(pose_sigma_r * rng.normal(size=3))
            noisy = RigidTransform(quat_multiply(pose.q, dq),
                                   pose.t + pose_sigma_t * rng.normal(size=3))
        window.push(WindowFrame(frame_id=fi, timestamp_ns=fi * 10**9, pose=noisy))
    window.landmarks = landmarks
    return window, true_poses, pts


@pytest.fixture
def window_scene():
    return build_window_scene
