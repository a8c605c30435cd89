from dataclasses import dataclass

import numpy as np
import pytest

from velocal.config import CalibConfig, SensorRig, SimNoise, SimulationConfig, TrajectorySpec
from velocal.pipeline import Initialization, initialize
from velocal.simulator import Dataset, Trajectory, groundtruth, simulate

# noise levels of the Monte-Carlo criteria, matching the calibration defaults
DEFAULT_NOISE = SimNoise(sigma_gyro=5e-3, sigma_acc=5e-2, sigma_pixel=1.0, sigma_depth_rel=0.01)


@dataclass
class Run:
    cfg: SimulationConfig
    data: Dataset
    truth: dict
    init: Initialization

    @property
    def trajectory(self) -> Trajectory:
        return Trajectory(self.cfg.trajectory)


def make_run(cfg: SimulationConfig, calib: CalibConfig = CalibConfig()) -> Run:
    ds = simulate(cfg)
    return Run(cfg, ds, groundtruth(cfg), initialize(ds.imu, ds.tracks, calib))


def body_velocity_rmse(run: Run, state) -> float:
    """RMS difference of body-frame velocity (free of the world gauge)."""
    t = np.linspace(run.data.imu.t[0] + 0.5, run.data.imu.t[-1] - 0.5, 500)
    R = state.rot_spline.evaluate(t)
    v = np.einsum("nji,nj->ni", R, state.vel_spline.evaluate(t))
    traj = run.trajectory
    v_true = np.einsum("nji,nj->ni", traj.rotation(t), traj.velocity(t))
    return float(np.sqrt(np.mean(np.sum((v - v_true) ** 2, axis=1))))


@pytest.fixture(scope="session")
def noiseless_run() -> Run:
    return make_run(SimulationConfig())


@pytest.fixture(scope="session")
def noisy_aggressive_runs() -> list[Run]:
    rig = SensorRig(noise=DEFAULT_NOISE)
    return [make_run(SimulationConfig(trajectory=TrajectorySpec.aggressive(), rig=rig, seed=s))
            for s in range(5)]
