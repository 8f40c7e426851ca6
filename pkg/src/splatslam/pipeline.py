"""The full SLAM loop: tracking, failure handling, relocalization, mapping.

One pass over a dataset drives a two-state machine. In the tracking state
each frame is registered (ICP seeded by the previous pose, then rendered
photometric refinement), the scan expands the map, and every few tracked
frames a keyframe triggers a map-update stage. When the tracking loss
crosses the failure threshold, the state flips to relocalization-pending:
the map and keyframes freeze, incoming frames are matched against a
look-around ring rendered at an anchor pose from before the failure, and
the first verified recovery resumes tracking. Frames consumed while
pending are discarded; they appear only in the run report's events.
"""

from __future__ import annotations

import enum
import os
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .config import SlamConfig
from .dataset import (
    Dataset,
    load_dataset,
    save_image,
    save_trajectory_tum,
)
from .gaussian_map import GaussianMap
from .geometry import SE3Pose, compose, invert
from .mapping import (
    Keyframe,
    KeyframeSequence,
    expand_map,
    select_keyframes,
    update_map,
)
from .metrics import ate_rmse, psnr
from .optimization import ssim
from .relocalization import attempt_relocalize
from .renderer import render
from .tracking import Frame, TrackingResult, track_frame


class PipelineMode(enum.Enum):
    TRACKING = "tracking"
    RELOCALIZATION_PENDING = "relocalization_pending"


@dataclass
class TrajectoryEntry:
    """One logged frame: estimated poses plus the failure flag."""

    frame_index: int
    timestamp: float
    camera_pose: SE3Pose
    lidar_pose: SE3Pose
    failed: bool
    loss: float = 0.0


@dataclass
class RelocalizationEvent:
    """A tracking failure and the frame that recovered from it (if any)."""

    failed_frame: int
    recovered_frame: int | None


@dataclass
class KeyframeMetric:
    frame_index: int
    psnr: float
    ssim: float


@dataclass
class RunReport:
    """Everything a run produced, minus the on-disk artifacts."""

    frame_count: int
    trajectory: list[TrajectoryEntry]
    events: list[RelocalizationEvent]
    ate: float | None
    keyframe_metrics: list[KeyframeMetric]
    final_map_size: int

    @property
    def mean_psnr(self) -> float:
        finite = [m.psnr for m in self.keyframe_metrics if np.isfinite(m.psnr)]
        if not self.keyframe_metrics:
            return float("nan")
        if len(finite) < len(self.keyframe_metrics):
            return float("inf") if not finite else float(np.mean(finite))
        return float(np.mean(finite))

    @property
    def mean_ssim(self) -> float:
        if not self.keyframe_metrics:
            return float("nan")
        return float(np.mean([m.ssim for m in self.keyframe_metrics]))

    def format(self) -> str:
        lines = [
            f"frames processed: {self.frame_count}",
            f"frames logged: {len(self.trajectory)}",
            f"final map size: {self.final_map_size}",
            f"relocalization events: {len(self.events)}",
        ]
        for ev in self.events:
            recovered = ("never recovered" if ev.recovered_frame is None
                         else f"recovered at frame {ev.recovered_frame}")
            lines.append(f"  failed at frame {ev.failed_frame}, {recovered}")
        if self.ate is not None:
            lines.append(f"ATE RMSE: {self.ate:.6f} m")
        lines.append(f"keyframes: {len(self.keyframe_metrics)}")
        if self.keyframe_metrics:
            lines.append(f"mean keyframe PSNR: {self.mean_psnr:.3f} dB")
            lines.append(f"mean keyframe SSIM: {self.mean_ssim:.4f}")
            for m in self.keyframe_metrics:
                lines.append(f"  frame {m.frame_index}: "
                             f"PSNR {m.psnr:.3f} dB, SSIM {m.ssim:.4f}")
        return "\n".join(lines) + "\n"


@dataclass
class _RunState:
    mode: PipelineMode = PipelineMode.TRACKING
    prev_lidar_pose: SE3Pose = field(default_factory=SE3Pose.identity)
    anchor_camera: SE3Pose | None = None
    pending_failed_frame: int | None = None
    tracked_since_keyframe: int = 0


def _mapping_rng(seed: int, frame_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, frame_index]))


def run_slam(
    dataset: Dataset | str,
    config: SlamConfig | None = None,
    output_dir: str | None = None,
    on_frame: Callable[[int, PipelineMode, GaussianMap], None] | None = None,
) -> RunReport:
    """Process a whole sequence; optionally write artifacts to output_dir.

    Artifacts: `trajectory.txt` (TUM, camera poses of all logged frames),
    `map.ply`, `keyframes/NNNNNN.png` (final-map renders at keyframe
    poses), `report.txt`. The run is a deterministic function of (dataset,
    config): repeated runs write bit-identical trajectory and map files.

    `on_frame` is an observer called after each ingested frame with
    (frame index, pipeline mode, map); it is for progress display and
    diagnostics and must not mutate its arguments.
    """
    cfg = config if config is not None else SlamConfig()
    ds = load_dataset(dataset) if isinstance(dataset, str) else dataset
    if len(ds) == 0:
        raise ValueError("dataset has no frames")
    intrinsics = ds.intrinsics
    lidar_to_camera = ds.lidar_to_camera
    camera_to_lidar = invert(lidar_to_camera)
    tracking_cfg = cfg.tracking_config()
    mapping_cfg = cfg.mapping_config()
    reloc_cfg = cfg.reloc_config()

    gmap = GaussianMap()
    keyframes = KeyframeSequence(interval=cfg.keyframe_interval)
    trajectory: list[TrajectoryEntry] = []
    events: list[RelocalizationEvent] = []
    state = _RunState()

    def log_and_map(index: int, frame: Frame, result: TrackingResult) -> None:
        trajectory.append(TrajectoryEntry(
            frame_index=index, timestamp=frame.timestamp,
            camera_pose=result.camera_pose, lidar_pose=result.lidar_pose,
            failed=result.failed, loss=result.loss))
        state.prev_lidar_pose = result.lidar_pose
        if result.failed:
            return
        is_first = len(keyframes) == 0
        stride = cfg.bootstrap_stride if is_first else cfg.expansion_stride
        expand_map(gmap, frame.image, frame.scan, result.camera_pose,
                   lidar_to_camera, intrinsics, stride=stride)
        current = Keyframe(index=index, timestamp=frame.timestamp,
                           image=frame.image, camera_pose=result.camera_pose)
        if is_first or state.tracked_since_keyframe + 1 >= cfg.keyframe_interval:
            keyframes.append(current)
            state.tracked_since_keyframe = 0
            candidates = list(keyframes)
        else:
            state.tracked_since_keyframe += 1
            candidates = list(keyframes) + [current]
        # The mapping stage runs every tracked frame; the optimization
        # window is the current frame, the latest keyframe, and the best
        # covering older keyframes.
        scan_world = (frame.scan.points[::stride]
                      @ result.lidar_pose.rotation_matrix.T
                      + result.lidar_pose.translation)
        selected = select_keyframes(candidates, scan_world, intrinsics,
                                    cfg.keyframe_window)
        stage_cfg = mapping_cfg
        if is_first:
            stage_cfg = cfg.mapping_config()
            stage_cfg.iterations = cfg.bootstrap_iterations
        update_map(gmap, selected, intrinsics, stage_cfg,
                   _mapping_rng(cfg.seed, index))

    def process_frame(i: int, frame: Frame) -> None:
        if i == 0:
            # World frame anchored to the first LiDAR pose.
            lidar_pose = SE3Pose.identity()
            camera_pose = compose(lidar_pose, camera_to_lidar)
            log_and_map(i, frame, TrackingResult(
                lidar_pose=lidar_pose, camera_pose=camera_pose,
                loss=0.0, failed=False))
            return

        if state.mode is PipelineMode.TRACKING:
            result = track_frame(gmap, frame, state.prev_lidar_pose,
                                 camera_to_lidar, intrinsics, tracking_cfg,
                                 refine=cfg.refinement_enabled,
                                 scan_voxel=cfg.icp_scan_voxel)
            if result.failed and cfg.relocalization_enabled:
                state.mode = PipelineMode.RELOCALIZATION_PENDING
                state.pending_failed_frame = i
                anchor_idx = max(0, len(trajectory) - cfg.rollback_frames)
                state.anchor_camera = trajectory[anchor_idx].camera_pose
                return
            log_and_map(i, frame, result)
            return

        # Relocalization pending: the map and keyframes stay frozen.
        recovered = attempt_relocalize(gmap, frame, state.anchor_camera,
                                       intrinsics, tracking_cfg, reloc_cfg)
        if recovered is None:
            return
        # Re-track from the recovered pose to polish it before resuming.
        recovered_lidar = compose(recovered, lidar_to_camera)
        result = track_frame(gmap, frame, recovered_lidar, camera_to_lidar,
                             intrinsics, tracking_cfg,
                             refine=cfg.refinement_enabled,
                             scan_voxel=cfg.icp_scan_voxel)
        if result.failed:
            return
        events.append(RelocalizationEvent(
            failed_frame=state.pending_failed_frame, recovered_frame=i))
        state.mode = PipelineMode.TRACKING
        state.pending_failed_frame = None
        state.anchor_camera = None
        log_and_map(i, frame, result)

    for i in range(len(ds)):
        frame = Frame.build(ds.timestamps[i], ds.load_image(i),
                            ds.load_scan(i), lidar_to_camera, intrinsics)
        process_frame(i, frame)
        if on_frame is not None:
            on_frame(i, state.mode, gmap)

    if state.mode is PipelineMode.RELOCALIZATION_PENDING:
        events.append(RelocalizationEvent(
            failed_frame=state.pending_failed_frame, recovered_frame=None))

    ate = None
    if ds.groundtruth is not None:
        ok = [e for e in trajectory if not e.failed]
        if len(ok) >= 2:
            gt_times, gt_poses = ds.groundtruth
            ate = ate_rmse(np.array([e.timestamp for e in ok]),
                           [e.camera_pose for e in ok], gt_times, gt_poses)

    keyframe_metrics = []
    rendered_keyframes = []
    for kf in keyframes:
        frame = render(gmap, intrinsics, kf.camera_pose,
                       transmittance_floor=cfg.transmittance_floor)
        rendered_keyframes.append((kf.index, frame.color))
        keyframe_metrics.append(KeyframeMetric(
            frame_index=kf.index,
            psnr=psnr(frame.color, kf.image),
            ssim=ssim(frame.color, kf.image)))

    report = RunReport(frame_count=len(ds), trajectory=trajectory,
                       events=events, ate=ate,
                       keyframe_metrics=keyframe_metrics,
                       final_map_size=len(gmap))

    if output_dir is not None:
        os.makedirs(output_dir, exist_ok=True)
        save_trajectory_tum(
            os.path.join(output_dir, "trajectory.txt"),
            np.array([e.timestamp for e in trajectory]),
            [e.camera_pose for e in trajectory])
        gmap.save_ply(os.path.join(output_dir, "map.ply"))
        kf_dir = os.path.join(output_dir, "keyframes")
        os.makedirs(kf_dir, exist_ok=True)
        for index, color in rendered_keyframes:
            save_image(os.path.join(kf_dir, f"{index:06d}.png"), color)
        with open(os.path.join(output_dir, "report.txt"), "w") as fh:
            fh.write(report.format())
    return report
