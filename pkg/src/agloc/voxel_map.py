"""Sparse hashed-voxel point store and the ray-marched pixel-to-3D lookup.

World-frame points are quantized to integer voxel keys (floor of the
coordinate over the voxel size) and kept in a hash table. Keypoint pixels
get their depth by marching the backprojected camera ray in fixed steps,
querying the table for a nearest neighbor at every step and accepting the
first neighbor whose reprojection lands close enough to the query pixel;
the perpendicular foot of that neighbor on the ray is the returned point.

Writer/reader contract: one ingestion thread may call insert_cloud while
other threads query. Queries operate on an immutable consolidated snapshot
that is swapped atomically under the internal lock, so every read sees the
table as of some completed insert.
"""

from __future__ import annotations

import struct
import threading
from dataclasses import dataclass

import numpy as np

from .errors import AglocError
from .geometry import CameraIntrinsics, RigidTransform, backproject_ray, invert, transform_points

_KEY_BIAS = 1 << 20          # supports voxel indices in (-2^20, 2^20)
_KEY_SHIFT = 21


class NonFiniteInput(AglocError):
    """Cloud contains NaN or infinite coordinates."""


def pack_key(ix: np.ndarray, iy: np.ndarray, iz: np.ndarray) -> np.ndarray:
    """Mix three integer voxel coordinates into one collision-free int64."""
    return (((ix.astype(np.int64) + _KEY_BIAS) << (2 * _KEY_SHIFT))
            | ((iy.astype(np.int64) + _KEY_BIAS) << _KEY_SHIFT)
            | (iz.astype(np.int64) + _KEY_BIAS))


def _intra_ranges(counts: np.ndarray) -> np.ndarray:
    """[0..c0), [0..c1), ... concatenated, for segment expansion."""
    total = int(counts.sum())
    out = np.arange(total, dtype=np.int64)
    out -= np.repeat(np.cumsum(counts) - counts, counts)
    return out


@dataclass
class RayCastConfig:
    step: float = 0.05
    depth_min: float = 0.3
    depth_max: float = 30.0
    reproj_threshold: float = 2.0
    neighbor_radius: float = 0.15

    def __post_init__(self):
        if not (0 < self.step < self.depth_max - self.depth_min):
            raise ValueError("step must be positive and smaller than the depth range")
        if self.reproj_threshold <= 0:
            raise ValueError("reproj_threshold must be positive")


class VoxelMap:
    """Hash table from quantized voxel keys to small lists of stored points."""

    def __init__(self, voxel_size: float = 0.1, max_points_per_voxel: int = 8):
        if voxel_size <= 0:
            raise ValueError("voxel_size must be positive")
        self.voxel_size = float(voxel_size)
        self.max_points_per_voxel = int(max_points_per_voxel)
        self._counts: dict[int, int] = {}
        self._pending: list[np.ndarray] = []       # accepted but unconsolidated chunks
        self._pending_keys: list[np.ndarray] = []
        self._lock = threading.Lock()
        # consolidated snapshot, sorted by packed key; replaced atomically
        self._snap_keys = np.empty(0, dtype=np.int64)
        self._snap_pts = np.empty((0, 3), dtype=np.float64)

    @property
    def point_count(self) -> int:
        with self._lock:
            return len(self._snap_keys) + sum(len(c) for c in self._pending)

    def keys_of(self, points: np.ndarray) -> np.ndarray:
        idx = np.floor(np.asarray(points, dtype=float) / self.voxel_size).astype(np.int64)
        return pack_key(idx[:, 0], idx[:, 1], idx[:, 2])

    def voxel_key(self, point) -> tuple[int, int, int]:
        """Integer voxel coordinates for one point (floor quantization)."""
        idx = np.floor(np.asarray(point, dtype=float) / self.voxel_size).astype(int)
        return int(idx[0]), int(idx[1]), int(idx[2])

    def insert_cloud(self, points) -> "VoxelMap":
        """Store world-frame points under their quantized keys, honoring the
        per-voxel cap with first-come retention. Returns self."""
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if pts.size == 0:
            return self
        if not np.all(np.isfinite(pts)):
            raise NonFiniteInput("cloud contains non-finite coordinates")
        keys = self.keys_of(pts)
        with self._lock:
            keep = np.empty(len(pts), dtype=bool)
            cap = self.max_points_per_voxel
            counts = self._counts
            # first-come cap: walk in arrival order within this batch
            order = np.argsort(keys, kind="stable")
            uniq, starts = np.unique(keys[order], return_index=True)
            ends = np.append(starts[1:], len(keys))
            for k, s, e in zip(uniq.tolist(), starts.tolist(), ends.tolist()):
                have = counts.get(k, 0)
                room = cap - have
                sel = order[s:e]
                if room <= 0:
                    keep[sel] = False
                    continue
                keep[sel[:room]] = True
                keep[sel[room:]] = False
                counts[k] = have + min(room, e - s)
            if np.any(keep):
                self._pending.append(pts[keep])
                self._pending_keys.append(keys[keep])
        return self

    def _snapshot(self):
        """Fold pending chunks into the sorted snapshot; cheap when clean."""
        with self._lock:
            if self._pending:
                keys = np.concatenate([self._snap_keys] + self._pending_keys)
                pts = np.concatenate([self._snap_pts] + self._pending)
                order = np.argsort(keys, kind="stable")
                self._snap_keys = keys[order]
                self._snap_pts = pts[order]
                self._pending = []
                self._pending_keys = []
            return self._snap_keys, self._snap_pts

    def _gather_candidates(self, query_keys: np.ndarray, shells: int):
        """Rows of stored points lying in the cube of +-shells voxels around
        each query key; returns (point rows, segment offsets per query)."""
        keys, pts = self._snapshot()
        r = np.arange(-shells, shells + 1, dtype=np.int64)
        ox, oy, oz = np.meshgrid(r, r, r, indexing="ij")
        offs = (ox.ravel() << (2 * _KEY_SHIFT)) + (oy.ravel() << _KEY_SHIFT) + oz.ravel()
        cand = query_keys[:, None] + offs[None, :]
        flat = cand.ravel()
        lo = np.searchsorted(keys, flat, side="left")
        hi = np.searchsorted(keys, flat, side="right")
        return keys, pts, lo, hi, len(offs)

    def nearest_neighbor(self, query, radius: float):
        """Closest stored point within radius of the query, or None."""
        if radius <= 0:
            raise ValueError("radius must be positive")
        q = np.asarray(query, dtype=float).reshape(3)
        hit = self._nearest_batch(q[None, :], radius)
        idx, dist = hit[0]
        if idx < 0:
            return None
        _, pts = self._snapshot()
        return pts[idx].copy(), float(dist)

    def _nearest_batch(self, queries: np.ndarray, radius: float):
        """Exact within-radius nearest neighbor for each query row.

        Returns a list of (snapshot row index or -1, distance).
        """
        qkeys = self.keys_of(queries)
        shells = max(1, int(np.ceil(radius / self.voxel_size)))
        keys, pts, lo, hi, n_off = self._gather_candidates(qkeys, shells)
        nq = len(queries)
        seg = np.nonzero(hi > lo)[0]
        if len(seg) == 0:
            return [(-1, float("inf"))] * nq
        counts = hi[seg] - lo[seg]
        rows = np.repeat(lo[seg], counts) + _intra_ranges(counts)
        qidx = np.repeat(seg // n_off, counts)
        diff = pts[rows] - queries[qidx]
        d2 = np.einsum("ij,ij->i", diff, diff)
        within = d2 <= radius * radius
        rows, qidx, d2 = rows[within], qidx[within], d2[within]
        out = [(-1, float("inf"))] * nq
        if len(rows) == 0:
            return out
        order = np.lexsort((d2, qidx))
        _, first = np.unique(qidx[order], return_index=True)
        for j in first:
            i = order[j]
            out[int(qidx[i])] = (int(rows[i]), float(np.sqrt(d2[i])))
        return out

    def pixel_to_point(self, k: CameraIntrinsics, cam_pose: RigidTransform,
                       pixel, cfg: RayCastConfig):
        """March the backprojected ray and return the perpendicular foot of
        the first accepted neighbor, in camera coordinates, or None.

        cam_pose maps camera coordinates into the world frame. Acceptance:
        the neighbor, reprojected into the image, lies within
        cfg.reproj_threshold pixels of the query; otherwise the march
        continues to deeper samples.
        """
        ray = backproject_ray(k, pixel)
        depths = np.arange(cfg.depth_min, cfg.depth_max + 0.5 * cfg.step, cfg.step)
        world_to_cam = invert(cam_pose)
        px = np.asarray(pixel, dtype=float)

        chunk = 64
        for s in range(0, len(depths), chunk):
            d = depths[s:s + chunk]
            samples_world = transform_points(cam_pose, d[:, None] * ray[None, :])
            hits = self._nearest_batch(samples_world, cfg.neighbor_radius)
            rows = [h[0] for h in hits]
            if all(r < 0 for r in rows):
                continue
            _, pts = self._snapshot()
            for r in rows:
                if r < 0:
                    continue
                q_cam = transform_points(world_to_cam, pts[r][None, :])[0]
                if q_cam[2] <= 1e-9:
                    continue
                reproj = np.array([k.fx * q_cam[0] / q_cam[2] + k.cx,
                                   k.fy * q_cam[1] / q_cam[2] + k.cy])
                if np.linalg.norm(reproj - px) <= cfg.reproj_threshold:
                    return float(np.dot(q_cam, ray)) * ray
        return None


def read_cloud(path) -> np.ndarray:
    """Read the flat binary cloud format: u32 count, then count little-endian
    f32 (x, y, z) triples. Concatenated records are read back to back."""
    with open(path, "rb") as f:
        chunks = []
        while True:
            head = f.read(4)
            if not head:
                break
            if len(head) < 4:
                raise AglocError("truncated cloud record header")
            (n,) = struct.unpack("<I", head)
            body = f.read(12 * n)
            if len(body) < 12 * n:
                raise AglocError("truncated cloud record body")
            chunks.append(np.frombuffer(body, dtype="<f4").reshape(n, 3))
        if not chunks:
            return np.empty((0, 3), dtype=np.float32)
        return np.concatenate(chunks)


def write_cloud(path, points, append: bool = False) -> None:
    pts = np.asarray(points, dtype="<f4").reshape(-1, 3)
    mode = "ab" if append else "wb"
    with open(path, mode) as f:
        f.write(struct.pack("<I", len(pts)))
        f.write(pts.tobytes())


def read_cloud_records(path) -> list[np.ndarray]:
    """Like read_cloud but keeps record boundaries (one array per record)."""
    with open(path, "rb") as f:
        records = []
        while True:
            head = f.read(4)
            if not head:
                break
            if len(head) < 4:
                raise AglocError("truncated cloud record header")
            (n,) = struct.unpack("<I", head)
            body = f.read(12 * n)
            if len(body) < 12 * n:
                raise AglocError("truncated cloud record body")
            records.append(np.frombuffer(body, dtype="<f4").reshape(n, 3))
        return records
