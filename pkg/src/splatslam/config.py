"""Flat key = value run configuration with typo-safe parsing.

Every knob carries its default inline, so an empty file (or no file) is a
valid configuration. Unknown keys are fatal: a misspelled knob must not
silently fall back to its default.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

from .optimization import MappingConfig, TrackingConfig
from .relocalization import RelocConfig


class ConfigError(ValueError):
    """A configuration file or value is malformed."""


@dataclass
class SlamConfig:
    """All pipeline knobs as one flat record."""

    seed: int = 0

    # Tracking and failure detection
    tracking_iterations: int = 60
    rotation_lr: float = 2e-3
    translation_lr: float = 1e-3
    silhouette_threshold: float = 0.99
    color_weight: float = 0.5
    failure_threshold: float = 1e5
    refinement_enabled: bool = True
    icp_scan_voxel: float = 0.5

    # Rendering
    transmittance_floor: float = 1e-4

    # Mapping
    mapping_iterations: int = 100
    keyframe_interval: int = 5
    keyframe_window: int = 20
    ssim_weight: float = 0.2
    position_lr: float = 1e-3
    color_lr: float = 2.5e-3
    opacity_lr: float = 5e-2
    radius_lr: float = 1e-3
    prune_opacity_min: float = 0.005
    prune_radius_max: float = 1.0
    densify_grad_threshold: float = 2e-4
    expansion_stride: int = 1
    # The first frame seeds every later stage, so it may insert more
    # densely and optimize longer than the steady-state cadence.
    bootstrap_stride: int = 1
    bootstrap_iterations: int = 300

    # Relocalization
    relocalization_enabled: bool = True
    rollback_frames: int = 30
    look_around_count: int = 8
    min_feature_matches: int = 10
    pnp_iterations: int = 200
    pnp_inlier_threshold: float = 2.0

    def tracking_config(self) -> TrackingConfig:
        return TrackingConfig(
            silhouette_threshold=self.silhouette_threshold,
            color_weight=self.color_weight,
            failure_threshold=self.failure_threshold,
            iterations=self.tracking_iterations,
            rotation_lr=self.rotation_lr,
            translation_lr=self.translation_lr,
            transmittance_floor=self.transmittance_floor,
        )

    def mapping_config(self) -> MappingConfig:
        return MappingConfig(
            keyframe_window=self.keyframe_window,
            ssim_weight=self.ssim_weight,
            iterations=self.mapping_iterations,
            keyframe_interval=self.keyframe_interval,
            position_lr=self.position_lr,
            color_lr=self.color_lr,
            opacity_lr=self.opacity_lr,
            radius_lr=self.radius_lr,
            prune_opacity_min=self.prune_opacity_min,
            prune_radius_max=self.prune_radius_max,
            densify_grad_threshold=self.densify_grad_threshold,
            transmittance_floor=self.transmittance_floor,
        )

    def reloc_config(self) -> RelocConfig:
        return RelocConfig(
            rollback_frames=self.rollback_frames,
            look_around_count=self.look_around_count,
            min_feature_matches=self.min_feature_matches,
            pnp_seed=self.seed,
            pnp_iterations=self.pnp_iterations,
            pnp_inlier_threshold=self.pnp_inlier_threshold,
        )


_FIELD_TYPES = {f.name: f.type for f in fields(SlamConfig)}


def _coerce(key: str, raw: str):
    kind = _FIELD_TYPES[key]
    if kind in ("bool", bool):
        lowered = raw.lower()
        if lowered in ("true", "1", "yes", "on"):
            return True
        if lowered in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    try:
        if kind in ("int", int):
            return int(raw)
        return float(raw)
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from exc


def parse_config(text: str, source: str = "<config>") -> SlamConfig:
    """Parse `key = value` lines; `#` starts a comment, blanks are ignored.

    Raises ConfigError on unknown keys, bad syntax, or bad values.
    """
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected `key = value`, got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in _FIELD_TYPES:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if not value:
            raise ConfigError(f"{source}:{lineno}: empty value for {key!r}")
        values[key] = _coerce(key, value)
    try:
        return SlamConfig(**values)
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}") from exc


def load_config(path: str) -> SlamConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, source=path)


def format_default_config() -> str:
    """The full knob list, one `key = value` line each, at defaults."""
    lines = []
    for f in fields(SlamConfig):
        default = getattr(SlamConfig(), f.name)
        if isinstance(default, bool):
            default = "true" if default else "false"
        lines.append(f"{f.name} = {default}")
    return "\n".join(lines) + "\n"
