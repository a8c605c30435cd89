"""Configuration schema shared by the simulator, the pipeline and the CLI.

A config file is JSON with two optional sections::

    {"simulation": {...}, "calibration": {...}}

Missing sections or fields take the defaults below.
"""

from __future__ import annotations

import json
import re
from pathlib import Path
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .geometry import exp_so3
from .sensors import CameraIntrinsics


class ConfigError(ValueError):
    """Invalid config; carries the offending field and, if known, its line."""

    def __init__(self, message: str, field: str | None = None, line: int | None = None):
        self.field = field
        self.line = line
        where = f" (line {line})" if line else ""
        super().__init__(f"{field + ': ' if field else ''}{message}{where}")


class _Model(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


Vec3 = tuple[float, float, float]


class NoiseConfig(_Model):
    """Per-sample noise levels and robust-loss thresholds (in sigmas)."""

    sigma_gyro: float = Field(5e-3, gt=0)
    sigma_acc: float = Field(5e-2, gt=0)
    sigma_pixel: float = Field(1.0, gt=0)
    sigma_pixel_vel: float = Field(20.0, gt=0)
    sigma_depth_rel: float = Field(0.01, gt=0)
    huber_gyro: float = Field(3.0, gt=0)
    huber_acc: float = Field(3.0, gt=0)
    huber_flow: float = Field(3.0, gt=0)


class RansacConfig(_Model):
    threshold_sigmas: float = Field(3.0, gt=0)
    min_threshold: float = Field(0.01, gt=0)
    confidence: float = Field(0.99, gt=0, lt=1)
    max_iterations: int = Field(200, ge=1)
    min_inlier_ratio: float = Field(0.5, gt=0, le=1)


class CameraConfig(_Model):
    fx: float = Field(500.0, gt=0)
    fy: float = Field(500.0, gt=0)
    cx: float = 320.0
    cy: float = 240.0
    width: int = Field(640, gt=0)
    height: int = Field(480, gt=0)

    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics(self.fx, self.fy, self.cx, self.cy, self.width, self.height)


class CalibConfig(_Model):
    rot_knot_spacing: float = Field(0.05, gt=0)
    vel_knot_spacing: float = Field(0.05, gt=0)
    spline_order: int = Field(4, ge=2, le=6)
    noise: NoiseConfig = NoiseConfig()
    ransac: RansacConfig = RansacConfig()
    camera: CameraConfig = CameraConfig()
    max_time_offset: float = Field(0.1, gt=0)
    gravity_magnitude: float = Field(9.80665, gt=0)
    outer_rounds: int = Field(2, ge=1)
    max_iterations: int = Field(100, ge=1)
    min_features: int = Field(5, ge=3)
    min_depth: float = Field(0.2, gt=0)
    max_depth: float = Field(10.0, gt=0)
    min_span: float = Field(2.0, gt=0)
    seed: int = 0


class Sinusoid(_Model):
    amplitude: float
    frequency: float = Field(gt=0)
    phase: float = 0.0


def _default_translation():
    return (
        (Sinusoid(amplitude=0.70, frequency=0.147, phase=0.0),
         Sinusoid(amplitude=0.16, frequency=0.371, phase=1.0)),
        (Sinusoid(amplitude=0.60, frequency=0.189, phase=0.5),
         Sinusoid(amplitude=0.14, frequency=0.427, phase=2.0)),
        (Sinusoid(amplitude=0.40, frequency=0.231, phase=1.2),
         Sinusoid(amplitude=0.10, frequency=0.497, phase=0.4)),
    )


# Slow, wide rotations: plenty of excitation while keeping the three-point
# pixel-velocity truncation error (which grows with motion frequency) small.
def _default_rotation():
    return (
        (Sinusoid(amplitude=0.54, frequency=0.1085, phase=0.0),
         Sinusoid(amplitude=0.144, frequency=0.245, phase=1.0)),
        (Sinusoid(amplitude=0.42, frequency=0.1295, phase=0.7),
         Sinusoid(amplitude=0.12, frequency=0.2905, phase=0.2)),
        (Sinusoid(amplitude=0.72, frequency=0.0805, phase=1.5),
         Sinusoid(amplitude=0.18, frequency=0.1995, phase=0.3)),
    )


class TrajectorySpec(_Model):
    """Sum-of-sinusoids body motion: positions per axis (m) and intrinsic
    Z-Y-X angles (roll, pitch, yaw; rad)."""

    duration: float = Field(30.0, gt=0)
    translation: tuple[tuple[Sinusoid, ...], tuple[Sinusoid, ...], tuple[Sinusoid, ...]] = \
        Field(default_factory=_default_translation)
    rotation: tuple[tuple[Sinusoid, ...], tuple[Sinusoid, ...], tuple[Sinusoid, ...]] = \
        Field(default_factory=_default_rotation)
    rotation_offset: Vec3 = (0.1, -0.2, 0.3)
    # constant angle rates (rad/s) added on top of the sinusoids
    rotation_rate: Vec3 = (0.0, 0.0, 0.0)

    @classmethod
    def aggressive(cls, duration: float = 30.0) -> "TrajectorySpec":
        """Faster rotations and translations: stronger excitation for the
        linear initialization stages, larger pixel-velocity truncation error."""
        def terms(rows):
            return tuple(tuple(Sinusoid(amplitude=a, frequency=f, phase=p) for a, f, p in r)
                         for r in rows)
        return cls(duration=duration,
                   translation=terms((((0.35, 0.21, 0.0), (0.08, 0.53, 1.0)),
                                      ((0.30, 0.27, 0.5), (0.07, 0.61, 2.0)),
                                      ((0.20, 0.33, 1.2), (0.05, 0.71, 0.4)))),
                   rotation=terms((((0.45, 0.31, 0.0), (0.12, 0.70, 1.0)),
                                   ((0.35, 0.37, 0.7), (0.10, 0.83, 0.2)),
                                   ((0.60, 0.23, 1.5), (0.15, 0.57, 0.3)))))

    @classmethod
    def static(cls, duration: float = 30.0, rotation_offset: Vec3 = (0.1, -0.2, 0.3)):
        return cls(duration=duration, translation=((), (), ()), rotation=((), (), ()),
                   rotation_offset=rotation_offset)


class WorldSpec(_Model):
    landmarks: int = Field(2000, ge=0)
    distribution: Literal["shell", "box"] = "shell"
    inner_radius: float = Field(3.0, gt=0)
    outer_radius: float = Field(6.0, gt=0)


class SimNoise(_Model):
    sigma_gyro: float = Field(0.0, ge=0)
    sigma_acc: float = Field(0.0, ge=0)
    sigma_pixel: float = Field(0.0, ge=0)
    sigma_depth_rel: float = Field(0.0, ge=0)
    outlier_fraction: float = Field(0.0, ge=0, lt=1)


class SensorRig(_Model):
    """True extrinsics, clock offset, biases, noise and rates."""

    rot_cb: Vec3 = (0.3, -0.2, 0.5)
    t_cb: Vec3 = (0.10, -0.05, 0.02)
    t_off: float = 0.005
    b_a: Vec3 = (0.0, 0.0, 0.0)
    b_w: Vec3 = (0.0, 0.0, 0.0)
    noise: SimNoise = SimNoise()
    camera: CameraConfig = CameraConfig()
    imu_rate: float = Field(200.0, gt=0)
    frame_rate: float = Field(30.0, gt=0)
    gravity_magnitude: float = Field(9.80665, gt=0)
    min_depth: float = Field(0.2, gt=0)
    max_depth: float = Field(10.0, gt=0)

    @field_validator("t_off")
    @classmethod
    def _offset_in_padding(cls, v):
        if abs(v) >= 0.1:
            raise ValueError("time offset must be within +-0.1 s")
        return v

    @property
    def R_cb(self) -> np.ndarray:
        return exp_so3(np.array(self.rot_cb))

    @property
    def gravity(self) -> np.ndarray:
        return np.array([0.0, 0.0, -self.gravity_magnitude])


class SimulationConfig(_Model):
    trajectory: TrajectorySpec = TrajectorySpec()
    world: WorldSpec = WorldSpec()
    rig: SensorRig = SensorRig()
    seed: int = 0


class AppConfig(_Model):
    simulation: SimulationConfig = SimulationConfig()
    calibration: CalibConfig = CalibConfig()


def _line_of(text: str, key: str) -> int | None:
    m = re.search(r'"%s"\s*:' % re.escape(key), text)
    return text.count("\n", 0, m.start()) + 1 if m else None


def parse_config(text: str) -> AppConfig:
    try:
        raw = json.loads(text) if text.strip() else {}
    except json.JSONDecodeError as exc:
        raise ConfigError(exc.msg, line=exc.lineno) from None
    try:
        return AppConfig.model_validate(raw)
    except ValidationError as exc:
        err = exc.errors()[0]
        loc = [str(x) for x in err["loc"]]
        key = next((x for x in reversed(loc) if not x.isdigit()), None)
        raise ConfigError(err["msg"], field=".".join(loc),
                          line=_line_of(text, key) if key else None) from None


def load_config(path: str | Path | None) -> AppConfig:
    if path is None:
        return AppConfig()
    return parse_config(Path(path).read_text())


def dump_config(cfg: BaseModel) -> str:
    return json.dumps(cfg.model_dump(mode="json"), indent=2, sort_keys=True)

