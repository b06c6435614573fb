"""Pipeline runner and metrics engine.

Wires the whole system per cycle: ground clouds feed the voxel map, aerial
packets feed the descriptor index, ground packets feed a sliding window
whose keypoints get map depths; each localization cycle retrieves and
filters air-ground pairs, initializes from the per-pair estimates, then
runs the two refinement stages according to the selected mode:

    reg_only    median of the per-pair estimates, no iterative refinement
    reg_stage2  air-ground refinement on raw window poses and depths
    full        stage-1 window refinement first, then air-ground refinement

Scenarios can run from in-memory renders or from recorded AGLP logs; both
paths see bit-identical inputs, so their estimates agree exactly. Reports
are written as delimited records plus a human-readable summary; figures
are rendered separately by the figures module.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .association import (
    KeypointSet,
    PairFilterConfig,
    ViewRecord,
    build_pair_candidates,
    match_descriptors,
)
from .errors import AglocError
from .geometry import CameraIntrinsics, RelPose4, RigidTransform, RobustNorm, wrap_angle
from .optimizer import (
    AirGroundObservation,
    Landmark,
    Observation,
    SlidingWindow,
    SolverConfig,
    StageTwoProblem,
    WindowFrame,
    initial_relative,
    landmark_world_points,
    stage1_refine,
    stage2_refine,
    NoCovisibility,
)
from .place_index import HnswIndex
from .protocol import FramePacket, bandwidth, read_log, write_log
from .simkit import (
    Scenario,
    ScenarioConfig,
    generate,
    render_cloud,
    render_frame,
)
from .voxel_map import RayCastConfig, VoxelMap, read_cloud_records, write_cloud

MODES = ("reg_only", "reg_stage2", "full")


class BadRunConfig(AglocError):
    """Run configuration failed validation."""


@dataclass
class RunConfig:
    scenario: ScenarioConfig | None = None
    input_dir: str | None = None
    trials: int = 1
    base_seed: int = 0
    mode: str = "full"
    window: int = 6
    min_window: int = 2
    success_threshold_m: float = 0.5
    voxel_size: float = 0.1
    max_points_per_voxel: int = 8
    hnsw_m: int = 16
    hnsw_ef_construction: int = 200
    hnsw_ef_search: int = 64
    hnsw_seed: int = 0
    raycast: RayCastConfig = field(default_factory=RayCastConfig)
    matching: PairFilterConfig = field(default_factory=PairFilterConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    huber_px: float = 2.0
    emit_trace: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise BadRunConfig(f"mode must be one of {MODES}")
        if self.scenario is None and self.input_dir is None:
            raise BadRunConfig("either a scenario or an input directory is required")
        if self.trials < 1:
            raise BadRunConfig("trials must be at least 1")


@dataclass
class CycleRecord:
    trial: int
    cycle: int
    has_estimate: bool
    trans_err_m: float | None
    yaw_err_deg: float | None
    pair_ms: float
    stage1_ms: float
    stage2_ms: float


@dataclass
class TrialResult:
    trial: int
    seed: int
    success: bool
    estimate: RelPose4 | None
    trans_err_m: float | None
    yaw_err_deg: float | None
    cycles: int
    estimates: int
    pair_ms: float
    stage1_ms: float
    stage2_ms: float
    total_ms: float


@dataclass
class MetricsReport:
    mode: str
    trials: list[TrialResult]
    cycles: list[CycleRecord]
    mean_trans_err_m: float | None
    mean_yaw_err_deg: float | None
    successes: int
    attempts: int
    bandwidth_mbps: float
    keypoint_budget: int

    @property
    def success_rate(self) -> str:
        return f"{self.successes}/{self.attempts}"


@dataclass
class CycleData:
    cycle: int
    uav_packet: FramePacket | None
    ugv_packet: FramePacket | None
    cloud: np.ndarray | None


@dataclass
class TruthData:
    true_relative: RelPose4 | None
    intrinsics_g: CameraIntrinsics
    intrinsics_a: CameraIntrinsics
    rate_hz: float = 1.0


class PipelineEngine:
    """Per-trial state: voxel map, descriptor index, window, localization."""

    def __init__(self, cfg: RunConfig, k_g: CameraIntrinsics, k_a: CameraIntrinsics):
        self.cfg = cfg
        self.k_g = k_g
        self.k_a = k_a
        self.norm = RobustNorm(threshold=cfg.huber_px)
        self.voxmap = VoxelMap(cfg.voxel_size, cfg.max_points_per_voxel)
        self.index = HnswIndex(m=cfg.hnsw_m, ef_construction=cfg.hnsw_ef_construction,
                               ef_search=cfg.hnsw_ef_search, seed=cfg.hnsw_seed)
        self.db: dict[int, ViewRecord] = {}
        self.window: list[ViewRecord] = []
        self.traces: list[str] = []

    def ingest_cloud(self, cloud) -> None:
        if cloud is not None and len(cloud):
            self.voxmap.insert_cloud(np.asarray(cloud, dtype=np.float64))

    def ingest_uav(self, packet: FramePacket) -> None:
        record = _view_from_packet(packet)
        self.db[record.frame_id] = record
        self.index.insert(record.frame_id, record.global_descriptor)

    def ingest_ugv(self, packet: FramePacket) -> None:
        record = _view_from_packet(packet)
        pts = np.full((len(record.keypoints), 3), np.nan)
        for i, px in enumerate(record.keypoints.pixels):
            hit = self.voxmap.pixel_to_point(self.k_g, record.pose, px,
                                             self.cfg.raycast)
            if hit is not None:
                pts[i] = hit
        record.points_cam = pts
        self.window.append(record)
        if len(self.window) > self.cfg.window:
            self.window.pop(0)

    def localize(self, mode: str):
        """One relative-localization cycle; (estimate or None, timings ms)."""
        timings = {"pair_ms": 0.0, "stage1_ms": 0.0, "stage2_ms": 0.0}
        if len(self.window) < self.cfg.min_window or len(self.index) == 0:
            return None, timings
        t0 = time.perf_counter()
        pairs = build_pair_candidates(self.window, self.index, self.db,
                                      self.k_a, self.cfg.matching)
        timings["pair_ms"] = 1e3 * (time.perf_counter() - t0)
        if not pairs:
            return None, timings
        anchors = [p.relative for p in pairs]
        rel0 = initial_relative(anchors)
        if mode == "reg_only":
            return rel0, timings

        frames, landmarks, track_of = self._build_window_problem()
        if mode == "full" and len(frames) >= 2:
            t0 = time.perf_counter()
            window = SlidingWindow(size=self.cfg.window, frames=frames,
                                   landmarks=landmarks)
            result = stage1_refine(window, self.k_g, self.norm, self.cfg.solver)
            timings["stage1_ms"] = 1e3 * (time.perf_counter() - t0)
            frames = [WindowFrame(f.frame_id, f.timestamp_ns, p)
                      for f, p in zip(frames, result.poses)]
            landmarks = result.landmarks
            if self.cfg.emit_trace:
                self.traces.extend(f"stage1 {r.line()}" for r in result.trace)

        world = landmark_world_points(frames, landmarks, self.k_g)
        observations = []
        uav_poses = {}
        for p in pairs:
            uav_poses[p.a.frame_id] = p.a.pose
            for (gi, ai), ok in zip(p.matches.pairs, p.inliers):
                if not ok:
                    continue
                li = track_of.get((p.g.frame_id, int(gi)))
                if li is None or not np.all(np.isfinite(world[li])):
                    continue
                observations.append(AirGroundObservation(
                    p.a.frame_id, world[li], p.a.keypoints.pixels[ai]))
        problem = StageTwoProblem(relative_init=rel0, uav_poses=uav_poses,
                                  observations=observations, anchors=anchors)
        try:
            t0 = time.perf_counter()
            result2 = stage2_refine(problem, self.k_a, self.norm, self.cfg.solver)
            timings["stage2_ms"] = 1e3 * (time.perf_counter() - t0)
        except NoCovisibility:
            return rel0, timings
        if self.cfg.emit_trace:
            self.traces.extend(f"stage2 {r.line()}" for r in result2.trace)
        return result2.relative, timings

    def _build_window_problem(self):
        """Chain intra-window matches into tracks, then turn each track into
        a landmark anchored at a depth-consensus observation.

        Map depths occasionally belong to the wrong surface (the ray grazes
        a nearer patch), so a track's depth is taken from the observation
        whose implied world point agrees best with the others rather than
        blindly from the first frame.
        """
        frames = [WindowFrame(v.frame_id, v.timestamp_ns, v.pose)
                  for v in self.window]
        view_of = {v.frame_id: v for v in self.window}
        track_key: dict[tuple[int, int], int] = {}
        tracks: list[list[tuple[int, int]]] = []

        for a, b in zip(self.window, self.window[1:]):
            ms = match_descriptors(a.keypoints, b.keypoints, self.cfg.matching)
            for ga, gb in ms.pairs:
                key_a = (a.frame_id, int(ga))
                key_b = (b.frame_id, int(gb))
                ti = track_key.get(key_a)
                if ti is None:
                    ti = len(tracks)
                    tracks.append([key_a])
                    track_key[key_a] = ti
                tracks[ti].append(key_b)
                track_key[key_b] = ti
        for v in self.window:
            for kp in range(len(v.keypoints)):
                key = (v.frame_id, kp)
                if key not in track_key:
                    track_key[key] = len(tracks)
                    tracks.append([key])

        landmarks: list[Landmark] = []
        track_of: dict[tuple[int, int], int] = {}
        for track in tracks:
            carriers = []
            for frame_id, kp in track:
                v = view_of[frame_id]
                if v.points_cam is None:
                    continue
                p = v.points_cam[kp]
                if np.all(np.isfinite(p)) and p[2] > 0:
                    world = v.pose.rotation_matrix() @ p + v.pose.t
                    carriers.append((frame_id, kp, float(p[2]), world))
            if not carriers:
                continue
            if len(carriers) == 1:
                best = carriers[0]
            else:
                pts = np.stack([c[3] for c in carriers])
                spread = np.abs(pts[:, None, :] - pts[None, :, :]).sum(axis=(1, 2))
                best = carriers[int(np.argmin(spread))]
            a_frame, a_kp, a_depth, _ = best
            va = view_of[a_frame]
            lm = Landmark(anchor_frame=a_frame,
                          anchor_pixel=va.keypoints.pixels[a_kp],
                          inv_depth=1.0 / a_depth,
                          observations=[Observation(f, kp,
                                                    view_of[f].keypoints.pixels[kp])
                                        for f, kp in track],
                          depth_meas=a_depth)
            landmarks.append(lm)
            for key in track:
                track_of[key] = len(landmarks) - 1
        return frames, landmarks, track_of


def _view_from_packet(packet: FramePacket) -> ViewRecord:
    pose = RigidTransform(packet.pose[:4].astype(float),
                          packet.pose[4:].astype(float))
    desc = packet.descriptors.astype(np.float64)
    norms = np.linalg.norm(desc, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    return ViewRecord(
        frame_id=int(packet.frame_id),
        keypoints=KeypointSet(packet.keypoints.astype(np.float64), desc / norms),
        pose=pose,
        global_descriptor=packet.global_descriptor,
        timestamp_ns=int(packet.timestamp_ns),
    )


def scenario_streams(s: Scenario):
    """Per-cycle packets and clouds rendered on the fly."""
    for c in range(s.config.cycles()):
        up, _ = render_frame(s, "uav", c)
        gp, _ = render_frame(s, "ugv", c)
        yield CycleData(cycle=c, uav_packet=up, ugv_packet=gp,
                        cloud=render_cloud(s, c))


def run_cycles(cfg: RunConfig, streams, truth: TruthData, trial: int, seed: int,
               mode: str | None = None):
    """Feed cycles through a fresh engine; per-cycle records plus the trial row."""
    mode = cfg.mode if mode is None else mode
    engine = PipelineEngine(cfg, truth.intrinsics_g, truth.intrinsics_a)
    records: list[CycleRecord] = []
    estimate: RelPose4 | None = None
    t_start = time.perf_counter()
    for data in streams:
        if data.cloud is not None:
            engine.ingest_cloud(data.cloud)
        if data.uav_packet is not None:
            engine.ingest_uav(data.uav_packet)
        if data.ugv_packet is not None:
            engine.ingest_ugv(data.ugv_packet)
        rel, timings = engine.localize(mode)
        terr = yerr = None
        if rel is not None:
            estimate = rel
            if truth.true_relative is not None:
                terr = float(np.linalg.norm(rel.t - truth.true_relative.t))
                yerr = abs(math_degrees(wrap_angle(rel.yaw - truth.true_relative.yaw)))
        records.append(CycleRecord(trial=trial, cycle=data.cycle,
                                   has_estimate=rel is not None,
                                   trans_err_m=terr, yaw_err_deg=yerr,
                                   **timings))
    total_ms = 1e3 * (time.perf_counter() - t_start)
    terr = yerr = None
    success = False
    if estimate is not None:
        if truth.true_relative is not None:
            terr = float(np.linalg.norm(estimate.t - truth.true_relative.t))
            yerr = abs(math_degrees(wrap_angle(estimate.yaw - truth.true_relative.yaw)))
            success = terr < cfg.success_threshold_m
        else:
            success = True
    trial_row = TrialResult(
        trial=trial, seed=seed, success=success, estimate=estimate,
        trans_err_m=terr, yaw_err_deg=yerr, cycles=len(records),
        estimates=sum(r.has_estimate for r in records),
        pair_ms=sum(r.pair_ms for r in records),
        stage1_ms=sum(r.stage1_ms for r in records),
        stage2_ms=sum(r.stage2_ms for r in records),
        total_ms=total_ms)
    return trial_row, records, engine


def math_degrees(rad: float) -> float:
    return rad * 180.0 / np.pi


def run_pipeline(cfg: RunConfig, mode: str | None = None) -> MetricsReport:
    """Run all trials and aggregate the metrics."""
    mode = cfg.mode if mode is None else mode
    trials: list[TrialResult] = []
    cycles: list[CycleRecord] = []
    budget = 0
    rate = 1.0
    for trial in range(cfg.trials):
        if cfg.input_dir is not None:
            streams, truth = load_input(cfg.input_dir)
            seed = cfg.base_seed
        else:
            seed = cfg.scenario.seed + cfg.base_seed + trial
            scenario = generate(replace(cfg.scenario, seed=seed))
            streams = scenario_streams(scenario)
            truth = TruthData(true_relative=scenario.true_relative,
                              intrinsics_g=scenario.intrinsics(),
                              intrinsics_a=scenario.intrinsics(),
                              rate_hz=scenario.config.rate_hz)
            budget = max(budget, scenario.config.keypoints_per_frame)
        rate = truth.rate_hz
        row, records, engine = run_cycles(cfg, streams, truth, trial, seed, mode)
        if cfg.input_dir is not None and engine.db:
            budget = max(budget,
                         max(v.keypoints.pixels.shape[0] for v in engine.db.values()))
        trials.append(row)
        cycles.extend(records)

    with_err = [t.trans_err_m for t in trials if t.trans_err_m is not None]
    with_yaw = [t.yaw_err_deg for t in trials if t.yaw_err_deg is not None]
    return MetricsReport(
        mode=mode,
        trials=trials,
        cycles=cycles,
        mean_trans_err_m=float(np.mean(with_err)) if with_err else None,
        mean_yaw_err_deg=float(np.mean(with_yaw)) if with_yaw else None,
        successes=sum(t.success for t in trials),
        attempts=len(trials),
        bandwidth_mbps=bandwidth(budget, fps=rate).mbps if budget else 0.0,
        keypoint_budget=budget)


def ablate(cfg: RunConfig, modes=MODES) -> dict[str, MetricsReport]:
    """Run the pipeline once per mode on identical data."""
    return {mode: run_pipeline(cfg, mode=mode) for mode in modes}


# --- scenario export and replay -------------------------------------------------

def export_scenario(s: Scenario, out_dir) -> None:
    """Write uav.aglp, ugv.aglp, clouds.bin and truth.json for replay."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    uav_records = []
    ugv_records = []
    for c in range(s.config.cycles()):
        up, _ = render_frame(s, "uav", c)
        gp, _ = render_frame(s, "ugv", c)
        uav_records.append(("uav", up))
        ugv_records.append(("ugv", gp))
        write_cloud(out / "clouds.bin", render_cloud(s, c), append=c > 0)
    write_log(out / "uav.aglp", uav_records)
    write_log(out / "ugv.aglp", ugv_records)
    k = s.config
    truth = {
        "true_relative": {"x": k.rel_x, "y": k.rel_y, "z": k.rel_z,
                          "yaw_rad": float(s.true_relative.yaw)},
        "intrinsics": {"fx": k.fx, "fy": k.fy, "cx": k.cx, "cy": k.cy,
                       "width": k.width, "height": k.height},
        "rate_hz": k.rate_hz,
        "cycles": k.cycles(),
    }
    (out / "truth.json").write_text(json.dumps(truth, indent=2) + "\n")


def load_input(input_dir):
    """Read an exported log directory back into per-cycle streams."""
    path = Path(input_dir)
    uav = [p for _, p in read_log(path / "uav.aglp")]
    ugv = [p for _, p in read_log(path / "ugv.aglp")]
    clouds = read_cloud_records(path / "clouds.bin") \
        if (path / "clouds.bin").exists() else []
    truth_file = path / "truth.json"
    rel = None
    rate = 1.0
    k = CameraIntrinsics(500.0, 500.0, 320.0, 240.0, 640, 480)
    if truth_file.exists():
        blob = json.loads(truth_file.read_text())
        ki = blob["intrinsics"]
        k = CameraIntrinsics(ki["fx"], ki["fy"], ki["cx"], ki["cy"],
                             int(ki["width"]), int(ki["height"]))
        tr = blob.get("true_relative")
        if tr is not None:
            rel = RelPose4(np.array([tr["x"], tr["y"], tr["z"]]), tr["yaw_rad"])
        rate = float(blob.get("rate_hz", 1.0))
    n = max(len(uav), len(ugv), len(clouds))
    streams = [CycleData(cycle=c,
                         uav_packet=uav[c] if c < len(uav) else None,
                         ugv_packet=ugv[c] if c < len(ugv) else None,
                         cloud=clouds[c] if c < len(clouds) else None)
               for c in range(n)]
    return streams, TruthData(true_relative=rel, intrinsics_g=k,
                              intrinsics_a=k, rate_hz=rate)


# --- reports ---------------------------------------------------------------------

TRIAL_COLUMNS = ["trial", "seed", "success", "trans_err_m", "yaw_err_deg",
                 "cycles", "estimates", "pair_ms", "stage1_ms", "stage2_ms",
                 "total_ms"]
CYCLE_COLUMNS = ["trial", "cycle", "has_estimate", "trans_err_m", "yaw_err_deg",
                 "pair_ms", "stage1_ms", "stage2_ms"]
TIMING_COLUMNS = {"pair_ms", "stage1_ms", "stage2_ms", "total_ms"}


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return f"{v:.9g}"
    return str(v)


def write_trials_csv(report: MetricsReport, path) -> None:
    lines = [",".join(TRIAL_COLUMNS)]
    for t in report.trials:
        lines.append(",".join(_fmt(getattr(t, c)) for c in TRIAL_COLUMNS))
    Path(path).write_text("\n".join(lines) + "\n")


def write_cycles_csv(report: MetricsReport, path) -> None:
    lines = [",".join(CYCLE_COLUMNS)]
    for r in report.cycles:
        lines.append(",".join(_fmt(getattr(r, c)) for c in CYCLE_COLUMNS))
    Path(path).write_text("\n".join(lines) + "\n")


def summary_text(reports: dict[str, MetricsReport]) -> str:
    head = f"{'mode':<12}{'trans err (m)':>15}{'yaw err (deg)':>15}" \
           f"{'success':>10}{'Mbps':>8}{'ms/trial':>12}"
    lines = [head, "-" * len(head)]
    for mode, r in reports.items():
        te = f"{r.mean_trans_err_m:.4f}" if r.mean_trans_err_m is not None else "n/a"
        ye = f"{r.mean_yaw_err_deg:.3f}" if r.mean_yaw_err_deg is not None else "n/a"
        ms = np.mean([t.total_ms for t in r.trials]) if r.trials else 0.0
        lines.append(f"{mode:<12}{te:>15}{ye:>15}{r.success_rate:>10}"
                     f"{r.bandwidth_mbps:>8.2f}{ms:>12.1f}")
    return "\n".join(lines) + "\n"


def write_report(report: MetricsReport, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_trials_csv(report, out / "trials.csv")
    write_cycles_csv(report, out / "cycles.csv")
    (out / "summary.txt").write_text(summary_text({report.mode: report}))
