"""Frame-packet wire format, bandwidth accounting, and the AGLP log container.

A frame packet carries everything one agent sends per frame: keypoint
pixels, their 64-D local descriptors, the 512-D global descriptor, and the
7-DoF camera pose. All scalars are 4-byte little-endian IEEE-754. Layout:

    frame_id     u64
    timestamp_ns u64
    pose         7 x f32   (qw qx qy qz tx ty tz)
    n            u32
    keypoints    n x 2 x f32
    descriptors  n x 64 x f32
    global desc  512 x f32

The published bandwidth figure counts the payload only, 4*(2n + 64n + 7 +
512) bytes per frame; the 16-byte header and the 4-byte keypoint count are
wire framing on top of that and are reported separately.

Log files start with magic "AGLP" and a u32 version, then length-prefixed
packets each tagged with a source byte (0 = UAV, 1 = UGV), so one file can
hold a single stream or a merged one.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import AglocError

LOCAL_DESCRIPTOR_DIM = 64
GLOBAL_DESCRIPTOR_DIM = 512
HEADER_BYTES = 16

LOG_MAGIC = b"AGLP"
LOG_VERSION = 1

SOURCE_UAV = 0
SOURCE_UGV = 1
_SOURCE_NAMES = {SOURCE_UAV: "uav", SOURCE_UGV: "ugv"}
_SOURCE_TAGS = {"uav": SOURCE_UAV, "ugv": SOURCE_UGV}


class Truncated(AglocError):
    """Buffer too short for its declared contents."""


class BadMagic(AglocError):
    """Log file does not start with the AGLP magic or has a bad version."""


@dataclass
class FramePacket:
    """One agent's per-frame message."""

    frame_id: int
    timestamp_ns: int
    pose: np.ndarray = field(default_factory=lambda: np.zeros(7, dtype=np.float32))
    keypoints: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.float32))
    descriptors: np.ndarray = field(
        default_factory=lambda: np.zeros((0, LOCAL_DESCRIPTOR_DIM), dtype=np.float32))
    global_descriptor: np.ndarray = field(
        default_factory=lambda: np.zeros(GLOBAL_DESCRIPTOR_DIM, dtype=np.float32))

    def __post_init__(self):
        self.pose = np.ascontiguousarray(self.pose, dtype=np.float32).reshape(7)
        self.keypoints = np.ascontiguousarray(self.keypoints, dtype=np.float32).reshape(-1, 2)
        n = len(self.keypoints)
        self.descriptors = np.ascontiguousarray(
            self.descriptors, dtype=np.float32).reshape(n, LOCAL_DESCRIPTOR_DIM)
        self.global_descriptor = np.ascontiguousarray(
            self.global_descriptor, dtype=np.float32).reshape(GLOBAL_DESCRIPTOR_DIM)

    @property
    def keypoint_count(self) -> int:
        return len(self.keypoints)

    def __eq__(self, other) -> bool:
        if not isinstance(other, FramePacket):
            return NotImplemented
        return (self.frame_id == other.frame_id
                and self.timestamp_ns == other.timestamp_ns
                and np.array_equal(self.pose, other.pose)
                and np.array_equal(self.keypoints, other.keypoints)
                and np.array_equal(self.descriptors, other.descriptors)
                and np.array_equal(self.global_descriptor, other.global_descriptor))


def payload_bytes(n: int) -> int:
    """Per-frame payload accounting: 4*(2n + 64n + 7 + 512) bytes."""
    return 4 * (2 * n + LOCAL_DESCRIPTOR_DIM * n + 7 + GLOBAL_DESCRIPTOR_DIM)


def framed_bytes(n: int) -> int:
    """Bytes actually on the wire: header + keypoint count + payload."""
    return HEADER_BYTES + 4 + payload_bytes(n)


def encode(p: FramePacket) -> bytes:
    out = bytearray()
    out += struct.pack("<QQ", p.frame_id, p.timestamp_ns)
    out += p.pose.astype("<f4").tobytes()
    out += struct.pack("<I", p.keypoint_count)
    out += p.keypoints.astype("<f4").tobytes()
    out += p.descriptors.astype("<f4").tobytes()
    out += p.global_descriptor.astype("<f4").tobytes()
    assert len(out) == framed_bytes(p.keypoint_count)
    return bytes(out)


def decode(buf: bytes) -> FramePacket:
    """Inverse of encode; raises Truncated on any length inconsistency."""
    if len(buf) < HEADER_BYTES + 28 + 4:
        raise Truncated("buffer shorter than fixed packet prefix")
    frame_id, timestamp_ns = struct.unpack_from("<QQ", buf, 0)
    pose = np.frombuffer(buf, dtype="<f4", count=7, offset=16).copy()
    (n,) = struct.unpack_from("<I", buf, 44)
    if len(buf) != framed_bytes(n):
        raise Truncated(f"buffer length {len(buf)} does not match n={n}")
    off = 48
    kps = np.frombuffer(buf, dtype="<f4", count=2 * n, offset=off).reshape(n, 2).copy()
    off += 8 * n
    desc = np.frombuffer(buf, dtype="<f4", count=LOCAL_DESCRIPTOR_DIM * n,
                         offset=off).reshape(n, LOCAL_DESCRIPTOR_DIM).copy()
    off += 4 * LOCAL_DESCRIPTOR_DIM * n
    gd = np.frombuffer(buf, dtype="<f4", count=GLOBAL_DESCRIPTOR_DIM, offset=off).copy()
    return FramePacket(frame_id, timestamp_ns, pose, kps, desc, gd)


@dataclass(frozen=True)
class BandwidthReport:
    n: int
    frames_per_second: float
    mbps: float
    payload_bytes: int
    framed_bytes: int


def bandwidth(n: int, fps: float = 1.0) -> BandwidthReport:
    """Payload bandwidth at the given frame rate, in Mbps (decimal mega)."""
    if fps <= 0:
        raise ValueError("fps must be positive")
    pb = payload_bytes(n)
    return BandwidthReport(n=int(n), frames_per_second=float(fps),
                           mbps=fps * pb * 8 / 1e6,
                           payload_bytes=pb, framed_bytes=framed_bytes(n))


def write_log(path, records) -> None:
    """Write (source, packet) pairs; source is "uav"/"ugv" or the tag byte."""
    with open(path, "wb") as f:
        f.write(LOG_MAGIC)
        f.write(struct.pack("<I", LOG_VERSION))
        for source, packet in records:
            tag = _SOURCE_TAGS[source] if isinstance(source, str) else int(source)
            if tag not in _SOURCE_NAMES:
                raise ValueError(f"unknown source {source!r}")
            blob = encode(packet)
            f.write(struct.pack("<BI", tag, len(blob)))
            f.write(blob)


def read_log(path) -> list[tuple[str, FramePacket]]:
    """Read a log back as (source name, packet) pairs, in file order."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != LOG_MAGIC:
        raise BadMagic("not an AGLP log")
    if len(data) < 8:
        raise Truncated("log header truncated")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != LOG_VERSION:
        raise BadMagic(f"unsupported AGLP version {version}")
    out = []
    off = 8
    while off < len(data):
        if off + 5 > len(data):
            raise Truncated("log record header truncated")
        tag, length = struct.unpack_from("<BI", data, off)
        off += 5
        if tag not in _SOURCE_NAMES:
            raise Truncated(f"unknown source tag {tag}")
        if off + length > len(data):
            raise Truncated("log record body truncated")
        out.append((_SOURCE_NAMES[tag], decode(data[off:off + length])))
        off += length
    return out
