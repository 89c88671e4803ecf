"""Shared keyframe record used by the graph, mapping and io modules.

Poses are stored camera-from-world throughout the pipeline; trajectory files
use world-from-camera and are converted at the io boundary.
"""

from __future__ import annotations

from dataclasses import dataclass

from .se3 import Pose

GLOBAL_SHUTTER = "global"
ROLLING_SHUTTER = "rolling"


@dataclass
class Keyframe:
    frame_id: int
    timestamp: float
    camera_id: int
    cam_from_world: Pose
    image_path: str = ""
    shutter: str = GLOBAL_SHUTTER
    exposure: float = 0.0     # rolling-shutter readout time in seconds

    def __post_init__(self):
        if self.shutter not in (GLOBAL_SHUTTER, ROLLING_SHUTTER):
            raise ValueError(f"unknown shutter kind {self.shutter!r}")
        if self.shutter == ROLLING_SHUTTER and self.exposure <= 0:
            raise ValueError("rolling shutter needs a positive exposure")


def group_by_rig_time(keyframes):
    """Keyframes bucketed by capture timestamp, in time order.

    Rig captures are synchronized, so frames sharing a timestamp belong to
    one rig instant.  Returns a list of (timestamp, [keyframes]) pairs.
    """
    groups = {}
    for kf in keyframes:
        groups.setdefault(kf.timestamp, []).append(kf)
    return [(t, sorted(groups[t], key=lambda k: k.camera_id))
            for t in sorted(groups)]
