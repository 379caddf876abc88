"""fluorotwin: a desk-scale virtual-twin teleoperation workbench.

Synthetic fluoroscopy of a simulated magnetic swimmer in phantoms, per-frame
blob detection, fiducial-based spatial calibration, topic-based streaming,
twin-state synchronization with velocity and latency telemetry, and live
steering through a browser console.
"""

from .bus import Bus, Envelope
from .calib import (CalibrationTransform, FiducialPair, calibrate,
                    px_to_world, world_to_px)
from .detect import Detection, Detector, DetectorParams, relative_contrast
from .maze import MazeGraph, solve_maze
from .pipeline import Pipeline, Scenario, load_scenario, run_maze
from .render import (Frame, FluoroRenderer, RenderConfig, render_cine,
                     render_ds)
from .twin import TwinState, TwinSync, latency_report, velocity_estimates
from .world import (ActuationCommand, KinematicParams, RobotState,
                    WorldGeometry, ground_truth, load_geometry, step)

__version__ = "0.1.0"

__all__ = [
    "ActuationCommand", "Bus", "CalibrationTransform", "Detection",
    "Detector", "DetectorParams", "Envelope", "FiducialPair", "FluoroRenderer",
    "Frame", "KinematicParams", "MazeGraph", "Pipeline", "RenderConfig",
    "RobotState", "Scenario", "TwinState", "TwinSync", "WorldGeometry",
    "calibrate", "ground_truth", "latency_report", "load_geometry",
    "load_scenario", "px_to_world", "relative_contrast", "render_cine",
    "render_ds", "run_maze", "solve_maze", "step", "velocity_estimates",
    "world_to_px",
]
