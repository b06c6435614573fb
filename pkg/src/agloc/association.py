"""Descriptor matching, air-ground pair filtering, and EPnP+RANSAC pose
initialization.

Matching is exhaustive mutual nearest neighbor over L2 distances with a
ratio test; at the packet scale (<= 1024 keypoints) nothing smarter pays
for itself. Pose initialization solves the classic EPnP problem on RANSAC
minimal samples of four correspondences, scores inliers by reprojection
error, and refits on the inlier set. The solver is batched so that all
RANSAC hypotheses are processed with stacked linear algebra.

All functions are pure; RANSAC draws from a generator seeded by a digest
of the sorted match content, so results are invariant to match order and
reproducible across runs.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import AglocError
from .geometry import (
    CameraIntrinsics,
    RelPose4,
    RigidTransform,
    compose,
    invert,
    quat_from_matrix,
)

_CP_PAIRS = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]


class EmptyKeypointSet(AglocError):
    """Matching requires non-empty keypoint sets."""


class DegenerateGeometry(AglocError):
    """Sample or inlier set is too flat/collinear, or consensus is too small."""


@dataclass(frozen=True)
class KeypointSet:
    """Keypoint pixels with their unit-norm 64-D descriptors, index-aligned."""

    pixels: np.ndarray
    descriptors: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64).reshape(-1, 2)
        d = np.asarray(self.descriptors, dtype=np.float64).reshape(-1, 64)
        if len(d) != len(px):
            raise ValueError("pixels and descriptors must be index-aligned")
        norms = np.linalg.norm(d, axis=1)
        if len(d) and np.max(np.abs(norms - 1.0)) > 1e-6:
            raise ValueError("descriptors must be L2-normalized within 1e-6")
        px.flags.writeable = False
        d.flags.writeable = False
        object.__setattr__(self, "pixels", px)
        object.__setattr__(self, "descriptors", d)

    def __len__(self) -> int:
        return len(self.pixels)


@dataclass(frozen=True)
class MatchSet:
    """Mutually one-to-one index pairs between two keypoint sets."""

    pairs: np.ndarray           # (m, 2) int: index in a, index in b
    distances: np.ndarray       # (m,) descriptor L2 distance

    def __post_init__(self):
        pairs = np.asarray(self.pairs, dtype=np.int64).reshape(-1, 2)
        dist = np.asarray(self.distances, dtype=np.float64).reshape(-1)
        if len(pairs) != len(dist):
            raise ValueError("pairs and distances must align")
        if len(pairs):
            if len(np.unique(pairs[:, 0])) != len(pairs) or \
               len(np.unique(pairs[:, 1])) != len(pairs):
                raise ValueError("matches must be injective on both sides")
        pairs.flags.writeable = False
        dist.flags.writeable = False
        object.__setattr__(self, "pairs", pairs)
        object.__setattr__(self, "distances", dist)

    def __len__(self) -> int:
        return len(self.pairs)


@dataclass
class PairFilterConfig:
    min_matches: int = 20
    ratio: float = 0.85
    accept_threshold: float = 1.0
    ransac_iters: int = 500
    ransac_reproj_px: float = 4.0
    top_k_candidates: int = 3

    def __post_init__(self):
        if self.min_matches < 4:
            raise ValueError("min_matches must be at least 4 (PnP minimum)")
        if not (0 < self.ratio < 1):
            raise ValueError("ratio must be in (0, 1)")


def match_descriptors(a: KeypointSet, b: KeypointSet,
                      cfg: PairFilterConfig) -> MatchSet:
    """Mutual nearest neighbors passing the ratio test and distance cap."""
    if len(a) == 0 or len(b) == 0:
        raise EmptyKeypointSet("both keypoint sets must be non-empty")
    da, db = a.descriptors, b.descriptors
    d2 = np.maximum(2.0 - 2.0 * (da @ db.T), 0.0)
    nn_ab = np.argmin(d2, axis=1)
    nn_ba = np.argmin(d2, axis=0)
    ia = np.arange(len(a))
    mutual = nn_ba[nn_ab] == ia
    best = np.sqrt(d2[ia, nn_ab])
    ok = mutual & (best <= cfg.accept_threshold)
    if d2.shape[1] > 1:
        two = np.partition(d2, 1, axis=1)[:, :2]
        second = np.sqrt(two[:, 1])
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(second > 0, best / second, 0.0)
        ok &= ratio < cfg.ratio
    sel = np.nonzero(ok)[0]
    # exact distances for the selected pairs; the dot-product shortcut keeps
    # ~1e-8 of rounding that would report nonzero distance for equal vectors
    exact = np.linalg.norm(da[sel] - db[nn_ab[sel]], axis=1)
    return MatchSet(np.stack([sel, nn_ab[sel]], axis=1), exact)


# --- EPnP -------------------------------------------------------------------

def _control_points(x: np.ndarray):
    """Centroid plus principal axes; returns (B,4,3) and a conditioning ok mask."""
    c0 = x.mean(axis=1)
    xc = x - c0[:, None, :]
    cov = np.einsum("bni,bnj->bij", xc, xc) / x.shape[1]
    w, v = np.linalg.eigh(cov)
    w = np.maximum(w, 0.0)
    ok = w[:, 0] > 1e-10 * np.maximum(w[:, 2], 1e-12)
    axes = np.sqrt(w)[:, :, None] * np.swapaxes(v, 1, 2)   # (B, 3 axes, 3)
    cw = np.concatenate([c0[:, None, :], c0[:, None, :] + axes], axis=1)
    return cw, ok


def _barycentric(x: np.ndarray, cw: np.ndarray, ok: np.ndarray) -> np.ndarray:
    """Coordinates alpha with x = alpha @ cw, rows summing to one. (B,n,4)

    Rows flagged not-ok get an identity basis so the batched solve stays
    well-posed; their output is garbage and must be masked by the caller.
    """
    basis = np.swapaxes(cw[:, 1:] - cw[:, :1], 1, 2)       # (B,3,3) columns
    basis = basis.copy()
    basis[~ok] = np.eye(3)
    rhs = np.swapaxes(x - cw[:, :1], 1, 2)                  # (B,3,n)
    a123 = np.linalg.solve(basis, rhs)                      # (B,3,n)
    a123 = np.swapaxes(a123, 1, 2)
    a0 = 1.0 - a123.sum(axis=2, keepdims=True)
    return np.concatenate([a0, a123], axis=2)


def _kernel(alpha: np.ndarray, uv: np.ndarray) -> np.ndarray:
    """Null-space basis of the projection constraints. (B, 4 vecs, 4 cp, 3)"""
    b, n, _ = alpha.shape
    m = np.zeros((b, 2 * n, 12))
    for j in range(4):
        m[:, 0::2, 3 * j + 0] = alpha[:, :, j]
        m[:, 0::2, 3 * j + 2] = -alpha[:, :, j] * uv[:, :, 0]
        m[:, 1::2, 3 * j + 1] = alpha[:, :, j]
        m[:, 1::2, 3 * j + 2] = -alpha[:, :, j] * uv[:, :, 1]
    mtm = np.einsum("bki,bkj->bij", m, m)
    _, vecs = np.linalg.eigh(mtm)
    kernel = np.swapaxes(vecs[:, :, :4], 1, 2)              # (B,4,12) ascending
    return kernel.reshape(b, 4, 4, 3)


def _rho(cw: np.ndarray) -> np.ndarray:
    d = [np.sum((cw[:, i] - cw[:, j]) ** 2, axis=1) for i, j in _CP_PAIRS]
    return np.stack(d, axis=1)                              # (B,6)


def _pair_dots(kernel: np.ndarray) -> np.ndarray:
    """G[b,k,a,c] = <s_a, s_c> for control-point pair k. (B,6,4,4)"""
    s = np.stack([kernel[:, :, i, :] - kernel[:, :, j, :] for i, j in _CP_PAIRS],
                 axis=1)                                    # (B,6,4,3)
    return np.einsum("bkai,bkci->bkac", s, s)


def _betas_initial(g: np.ndarray, rho: np.ndarray) -> np.ndarray:
    """Three closed-form starting points per problem. (B,3,4)"""
    b = g.shape[0]
    out = np.zeros((b, 3, 4))
    # case 1: unknowns [B11, B12, B13, B14]
    l1 = np.stack([g[:, :, 0, 0], 2 * g[:, :, 0, 1],
                   2 * g[:, :, 0, 2], 2 * g[:, :, 0, 3]], axis=2)
    s1 = _lstsq_batch(l1, rho)
    b11 = s1[:, 0]
    beta1 = np.sqrt(np.abs(b11))
    signed = np.where(b11 < 0, -beta1, beta1)
    safe = np.where(beta1 > 1e-12, signed, 1.0)
    out[:, 0, 0] = beta1
    out[:, 0, 1] = s1[:, 1] / safe
    out[:, 0, 2] = s1[:, 2] / safe
    out[:, 0, 3] = s1[:, 3] / safe
    # case 2: unknowns [B11, B12, B22]
    l2 = np.stack([g[:, :, 0, 0], 2 * g[:, :, 0, 1], g[:, :, 1, 1]], axis=2)
    s2 = _lstsq_batch(l2, rho)
    b1 = np.sqrt(np.abs(s2[:, 0]))
    b2 = np.sqrt(np.abs(s2[:, 2])) * np.where(np.sign(s2[:, 2]) == np.sign(s2[:, 0]), 1.0, 0.0)
    b1 = np.where(s2[:, 1] < 0, -b1, b1)
    out[:, 1, 0] = b1
    out[:, 1, 1] = b2
    # case 3: unknowns [B11, B12, B22, B13, B23]
    l3 = np.stack([g[:, :, 0, 0], 2 * g[:, :, 0, 1], g[:, :, 1, 1],
                   2 * g[:, :, 0, 2], 2 * g[:, :, 1, 2]], axis=2)
    s3 = _lstsq_batch(l3, rho)
    b1 = np.sqrt(np.abs(s3[:, 0]))
    b2 = np.sqrt(np.abs(s3[:, 2])) * np.where(np.sign(s3[:, 2]) == np.sign(s3[:, 0]), 1.0, 0.0)
    b1 = np.where(s3[:, 1] < 0, -b1, b1)
    safe = np.where(np.abs(b1) > 1e-12, b1, 1.0)
    out[:, 2, 0] = b1
    out[:, 2, 1] = b2
    out[:, 2, 2] = s3[:, 3] / safe
    return out


def _lstsq_batch(a: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Least squares via normal equations with a tiny ridge; batched."""
    ata = np.einsum("bki,bkj->bij", a, a)
    ata += 1e-12 * np.eye(a.shape[2])
    aty = np.einsum("bki,bk->bi", a, y)
    return np.linalg.solve(ata, aty[..., None])[..., 0]


def _gauss_newton_betas(g: np.ndarray, rho: np.ndarray, betas: np.ndarray,
                        iters: int = 8) -> np.ndarray:
    for _ in range(iters):
        gb = np.einsum("bkac,bc->bka", g, betas)            # (B,6,4)
        r = np.einsum("bka,ba->bk", gb, betas) - rho        # (B,6)
        j = 2.0 * gb
        jtj = np.einsum("bka,bkc->bac", j, j)
        jtj += 1e-10 * np.eye(4)
        jtr = np.einsum("bka,bk->ba", j, r)
        betas = betas - np.linalg.solve(jtj, jtr[..., None])[..., 0]
    return betas


def _rigid_fit(x: np.ndarray, y: np.ndarray):
    """Least-squares rotation/translation with y ~ R x + t; batched."""
    mx = x.mean(axis=1)
    my = y.mean(axis=1)
    h = np.einsum("bni,bnj->bij", x - mx[:, None, :], y - my[:, None, :])
    u, _, vt = np.linalg.svd(h)
    det = np.linalg.det(u) * np.linalg.det(vt)   # = det(V U^T), both orthogonal
    fix = np.repeat(np.eye(3)[None, :, :], len(x), axis=0).copy()
    fix[:, 2, 2] = det
    r = np.einsum("bji,bjk,bkl->bil", vt, fix, np.swapaxes(u, 1, 2))
    t = my - np.einsum("bij,bj->bi", r, mx)
    return r, t


def _epnp_batched(x: np.ndarray, uv: np.ndarray):
    """EPnP over a batch of problems with shared point count.

    x: (B,n,3) world points, uv: (B,n,2) normalized image coordinates.
    Returns (R (B,3,3), t (B,3), ok (B,)); poses map world into camera.
    """
    bsz, n, _ = x.shape
    cw, ok = _control_points(x)
    alpha = _barycentric(x, cw, ok)
    kernel = _kernel(alpha, uv)
    rho = _rho(cw)
    g = _pair_dots(kernel)
    starts = _betas_initial(g, rho)

    best_err = np.full(bsz, np.inf)
    best_r = np.repeat(np.eye(3)[None], bsz, axis=0)
    best_t = np.zeros((bsz, 3))
    for case in range(3):
        betas = _gauss_newton_betas(g, rho, starts[:, case].copy())
        cc = np.einsum("ba,bacd->bcd", betas, kernel)       # (B,4,3)
        pc = np.einsum("bna,bad->bnd", alpha, cc)           # (B,n,3)
        flip = pc[:, :, 2].mean(axis=1) < 0
        pc[flip] = -pc[flip]
        r, t = _rigid_fit(x, pc)
        proj = np.einsum("bij,bnj->bni", r, x) + t[:, None, :]
        z = proj[:, :, 2]
        bad = z <= 1e-9
        zs = np.where(bad, 1.0, z)
        err = np.linalg.norm(proj[:, :, :2] / zs[:, :, None] - uv, axis=2)
        err = np.where(bad, 1e6, err).mean(axis=1)
        take = err < best_err
        best_err = np.where(take, err, best_err)
        best_r[take] = r[take]
        best_t[take] = t[take]
    ok &= np.isfinite(best_err) & (best_err < 1e5)
    return best_r, best_t, ok


def solve_epnp(points: np.ndarray, pixels: np.ndarray,
               k: CameraIntrinsics) -> RigidTransform:
    """EPnP on one correspondence set; returns the world-to-camera pose."""
    pts = np.asarray(points, dtype=float).reshape(1, -1, 3)
    if pts.shape[1] < 4:
        raise DegenerateGeometry("EPnP needs at least 4 points")
    px = np.asarray(pixels, dtype=float).reshape(1, -1, 2)
    uv = np.empty_like(px)
    uv[:, :, 0] = (px[:, :, 0] - k.cx) / k.fx
    uv[:, :, 1] = (px[:, :, 1] - k.cy) / k.fy
    r, t, ok = _epnp_batched(pts, uv)
    if not ok[0]:
        raise DegenerateGeometry("EPnP point set is degenerate")
    return RigidTransform(quat_from_matrix(r[0]), t[0])


def _content_seed(pairs: np.ndarray, points: np.ndarray, pixels: np.ndarray) -> int:
    digest = hashlib.blake2b(digest_size=8)
    digest.update(pairs.astype("<i8").tobytes())
    digest.update(np.ascontiguousarray(points, dtype="<f8").tobytes())
    digest.update(np.ascontiguousarray(pixels, dtype="<f8").tobytes())
    return int.from_bytes(digest.digest(), "little")


def estimate_pose_epnp(matches: MatchSet, points_cam_g, pixels_a,
                       k_a: CameraIntrinsics, cfg: PairFilterConfig):
    """RANSAC + EPnP pose from matched (3-D, pixel) correspondences.

    points_cam_g holds per-keypoint 3-D points of the first frame in its
    camera frame (NaN rows where depth is unknown); pixels_a holds the
    second frame's keypoint pixels. The returned transform maps first-frame
    camera coordinates into the second camera; the boolean mask flags
    inliers, aligned with matches.pairs.
    """
    points_cam_g = np.asarray(points_cam_g, dtype=float).reshape(-1, 3)
    pixels_a = np.asarray(pixels_a, dtype=float).reshape(-1, 2)
    order = np.lexsort((matches.pairs[:, 1], matches.pairs[:, 0]))
    pairs = matches.pairs[order]
    pts = points_cam_g[pairs[:, 0]]
    px = pixels_a[pairs[:, 1]]
    valid = np.all(np.isfinite(pts), axis=1)
    usable = np.nonzero(valid)[0]
    if len(usable) < 4:
        raise DegenerateGeometry("fewer than 4 matches carry a valid depth")
    xs = pts[usable]
    us = px[usable]
    uv = np.empty_like(us)
    uv[:, 0] = (us[:, 0] - k_a.cx) / k_a.fx
    uv[:, 1] = (us[:, 1] - k_a.cy) / k_a.fy

    rng = np.random.default_rng(_content_seed(pairs, pts, px))
    iters = int(cfg.ransac_iters)
    m = len(usable)
    samples = _draw_samples(rng, xs, m, iters)
    r, t, ok = _epnp_batched(xs[samples], uv[samples])

    proj = np.einsum("bij,nj->bni", r, xs) + t[:, None, :]
    z = proj[:, :, 2]
    front = z > 1e-9
    zs = np.where(front, z, 1.0)
    eu = k_a.fx * proj[:, :, 0] / zs + k_a.cx
    ev = k_a.fy * proj[:, :, 1] / zs + k_a.cy
    err = np.hypot(eu - us[:, 0], ev - us[:, 1])
    inl = front & (err < cfg.ransac_reproj_px) & ok[:, None]
    counts = inl.sum(axis=1)
    best = int(np.argmax(counts))
    if counts[best] < 4:
        raise DegenerateGeometry("no sample reached a 4-point consensus")

    chosen = np.nonzero(inl[best])[0]
    try:
        refit = solve_epnp(xs[chosen], us[chosen], k_a)
    except DegenerateGeometry:
        refit = RigidTransform(quat_from_matrix(r[best]), t[best])
    rm = refit.rotation_matrix()
    proj = xs @ rm.T + refit.t
    z = proj[:, 2]
    front = z > 1e-9
    zs = np.where(front, z, 1.0)
    eu = k_a.fx * proj[:, 0] / zs + k_a.cx
    ev = k_a.fy * proj[:, 1] / zs + k_a.cy
    err = np.hypot(eu - us[:, 0], ev - us[:, 1])
    good = front & (err < cfg.ransac_reproj_px)

    mask_sorted = np.zeros(len(pairs), dtype=bool)
    mask_sorted[usable[good]] = True
    mask = np.zeros(len(pairs), dtype=bool)
    mask[order] = mask_sorted
    return refit, mask


def _draw_samples(rng, xs: np.ndarray, m: int, iters: int) -> np.ndarray:
    """Minimal 4-point samples, redrawing near-coplanar/collinear ones."""
    scale = float(np.sqrt(np.mean(np.sum((xs - xs.mean(axis=0)) ** 2, axis=1))))
    vol_eps = 1e-4 * max(scale, 1e-9) ** 3
    samples = np.stack([rng.choice(m, size=4, replace=False) for _ in range(iters)])
    for _ in range(20):
        p = xs[samples]
        e = p[:, 1:] - p[:, :1]
        vol = np.abs(np.linalg.det(e))
        bad = np.nonzero(vol < vol_eps)[0]
        if len(bad) == 0:
            break
        for i in bad:
            samples[i] = rng.choice(m, size=4, replace=False)
    return samples


@dataclass
class ViewRecord:
    """One processed frame as the association stage consumes it."""

    frame_id: int
    keypoints: KeypointSet
    pose: RigidTransform                 # camera in the agent's world frame
    global_descriptor: np.ndarray
    points_cam: np.ndarray | None = None  # (n,3) camera-frame depths, NaN = unknown
    timestamp_ns: int = 0


@dataclass
class PairCandidate:
    """A surviving air-ground frame pair with its per-pair pose estimate."""

    g: ViewRecord
    a: ViewRecord
    matches: MatchSet
    inliers: np.ndarray
    pose_cam: RigidTransform             # maps UGV camera coords to UAV camera
    relative: RelPose4                   # per-pair estimate of world-to-world


def build_pair_candidates(window_g, index, db, k_a: CameraIntrinsics,
                          cfg: PairFilterConfig) -> list[PairCandidate]:
    """Retrieve, match, filter and EPnP-initialize air-ground pairs.

    window_g: UGV ViewRecords; index: the descriptor index over UAV frames;
    db: mapping from UAV frame id to its ViewRecord. Empty output means no
    co-visibility this cycle.
    """
    out: list[PairCandidate] = []
    if len(index) == 0:
        return out
    for g in window_g:
        hits = index.search(g.global_descriptor, top_k=cfg.top_k_candidates)
        for a_id, _ in hits:
            a = db[a_id]
            if len(g.keypoints) == 0 or len(a.keypoints) == 0:
                continue
            ms = match_descriptors(g.keypoints, a.keypoints, cfg)
            if g.points_cam is not None:
                with_depth = np.all(np.isfinite(g.points_cam[ms.pairs[:, 0]]), axis=1) \
                    if len(ms) else np.zeros(0, dtype=bool)
                depth_count = int(with_depth.sum())
            else:
                depth_count = 0
            if len(ms) < cfg.min_matches or depth_count < max(4, cfg.min_matches // 2):
                continue
            try:
                pose_cam, inliers = estimate_pose_epnp(
                    ms, g.points_cam, a.keypoints.pixels, k_a, cfg)
            except DegenerateGeometry:
                continue
            rel = compose(a.pose, compose(pose_cam, invert(g.pose)))
            out.append(PairCandidate(g=g, a=a, matches=ms, inliers=inliers,
                                     pose_cam=pose_cam,
                                     relative=RelPose4.from_rigid(rel)))
    return out
