"""Camera models with bidirectional pixel<->ray mappings, plus rig calibration.

A CameraModel owns the full forward chain
    camera-frame point -> normalized coords -> distorted coords -> pixel
and the inverse chain used for feature-point undistortion.  New models plug in
by subclassing and overriding `_distort`, `_distort_jacobian` and
`_undistort`; the reconstruction pipeline only ever talks to
`project` / `unproject` / `projection_jacobian`.

Pose arguments transform world points into the camera frame (cam_from_world).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NonPositiveDepth, OutOfModelDomain, UndistortDiverged
from .se3 import Pose, hat

PINHOLE = "pinhole"
PINHOLE_RADIAL = "pinhole_radial"
EQUIDISTANT_FISHEYE = "equidistant_fisheye"

KINDS = (PINHOLE, PINHOLE_RADIAL, EQUIDISTANT_FISHEYE)

_MIN_DEPTH = 1e-9
_UNDISTORT_ITERS = 50
_UNDISTORT_TOL = 1e-10
# equidistant model validity: incidence angle must stay clear of 90 deg
_MAX_FISHEYE_ANGLE = np.deg2rad(89.9)


@dataclass(frozen=True)
class CameraModel:
    kind: str
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    distortion: tuple = ()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown camera kind {self.kind!r}")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        object.__setattr__(self, "distortion", tuple(float(d) for d in self.distortion))
        if self.kind == PINHOLE_RADIAL and len(self.distortion) != 2:
            raise ValueError("pinhole_radial expects (k1, k2)")

    # -- distortion layer (normalized coordinates) ---------------------------

    def _distort(self, x, y):
        if self.kind == PINHOLE:
            return x, y
        if self.kind == PINHOLE_RADIAL:
            k1, k2 = self.distortion
            r2 = x * x + y * y
            f = 1.0 + k1 * r2 + k2 * r2 * r2
            return x * f, y * f
        # equidistant fisheye: radius mapped r -> atan(r)
        r = np.hypot(x, y)
        theta = np.arctan(r)
        if theta > _MAX_FISHEYE_ANGLE:
            raise OutOfModelDomain(f"incidence angle {np.rad2deg(theta):.2f} deg")
        if r < 1e-12:
            return x, y
        s = theta / r
        return x * s, y * s

    def _distort_jacobian(self, x, y):
        """2x2 d(distorted)/d(normalized)."""
        if self.kind == PINHOLE:
            return np.eye(2)
        if self.kind == PINHOLE_RADIAL:
            k1, k2 = self.distortion
            r2 = x * x + y * y
            f = 1.0 + k1 * r2 + k2 * r2 * r2
            g = 2.0 * (k1 + 2.0 * k2 * r2)  # d f / d(r^2) * 2
            return np.array([
                [f + x * x * g, x * y * g],
                [x * y * g, f + y * y * g],
            ])
        r2 = x * x + y * y
        r = np.sqrt(r2)
        if r < 1e-4:
            s = 1.0 - r2 / 3.0
            g = -2.0 / 3.0 + 0.8 * r2
        else:
            theta = np.arctan(r)
            s = theta / r
            g = (1.0 / (1.0 + r2) - s) / r2  # (ds/dr) / r
        return np.array([
            [s + x * x * g, x * y * g],
            [x * y * g, s + y * y * g],
        ])

    def _undistort(self, xd, yd):
        if self.kind == PINHOLE:
            return xd, yd
        if self.kind == EQUIDISTANT_FISHEYE:
            theta = np.hypot(xd, yd)
            if theta >= np.pi / 2:
                raise OutOfModelDomain("distorted radius beyond 90 deg")
            if theta < 1e-12:
                return xd, yd
            s = np.tan(theta) / theta
            return xd * s, yd * s
        # radial: fixed-point iteration x <- xd / f(|x|)
        k1, k2 = self.distortion
        x, y = xd, yd
        for _ in range(_UNDISTORT_ITERS):
            r2 = x * x + y * y
            f = 1.0 + k1 * r2 + k2 * r2 * r2
            if f <= 0:
                raise UndistortDiverged("distortion factor became non-positive")
            xn, yn = xd / f, yd / f
            if abs(xn - x) < _UNDISTORT_TOL and abs(yn - y) < _UNDISTORT_TOL:
                return xn, yn
            x, y = xn, yn
        raise UndistortDiverged(f"no convergence after {_UNDISTORT_ITERS} iterations")

    # -- full chain ----------------------------------------------------------

    def project_camera_point(self, p_cam):
        """Camera-frame 3D point -> pixel."""
        X, Y, Z = p_cam
        if Z <= _MIN_DEPTH:
            raise NonPositiveDepth(f"depth {Z:.3e}")
        xd, yd = self._distort(X / Z, Y / Z)
        return np.array([self.fx * xd + self.cx, self.fy * yd + self.cy])

    def projection_jacobian(self, p_cam):
        """2x3 d(pixel)/d(camera-frame point)."""
        X, Y, Z = p_cam
        if Z <= _MIN_DEPTH:
            raise NonPositiveDepth(f"depth {Z:.3e}")
        x, y = X / Z, Y / Z
        J_norm = np.array([
            [1.0 / Z, 0.0, -X / (Z * Z)],
            [0.0, 1.0 / Z, -Y / (Z * Z)],
        ])
        J_dist = self._distort_jacobian(x, y)
        return np.diag([self.fx, self.fy]) @ J_dist @ J_norm

    def pixel_to_normalized(self, pixel):
        """Pixel -> undistorted normalized coordinates (x, y) at z = 1."""
        xd = (pixel[0] - self.cx) / self.fx
        yd = (pixel[1] - self.cy) / self.fy
        return np.array(self._undistort(xd, yd))


def project(cam: CameraModel, cam_from_world: Pose, point_w) -> np.ndarray:
    """Pixel of a world point seen through `cam` at the given pose."""
    return cam.project_camera_point(cam_from_world.apply(np.asarray(point_w, float)))


def unproject(cam: CameraModel, pixel) -> np.ndarray:
    """Unit ray in the camera frame whose projection is `pixel`."""
    x, y = cam.pixel_to_normalized(pixel)
    ray = np.array([x, y, 1.0])
    return ray / np.linalg.norm(ray)


def project_with_pose_jacobian(cam: CameraModel, cam_from_world: Pose, point_w):
    """(pixel, 2x6 d pixel / d left-perturbation of pose, 2x3 d pixel / d point).

    Left perturbation: pose' = exp(delta) * cam_from_world, delta = (phi, rho).
    """
    p_cam = cam_from_world.apply(np.asarray(point_w, float))
    pixel = cam.project_camera_point(p_cam)
    J_pc = cam.projection_jacobian(p_cam)
    J_pose = np.hstack([J_pc @ (-hat(p_cam)), J_pc])
    J_point = J_pc @ cam_from_world.R
    return pixel, J_pose, J_point


@dataclass(frozen=True)
class RigCalibration:
    """Rigid multi-camera assembly.

    `cam_from_rig[cid]` maps rig-frame points into camera `cid`'s frame; the
    reference camera has the identity extrinsic.
    """

    camera_ids: tuple
    cam_from_rig: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "camera_ids", tuple(self.camera_ids))
        ref = [cid for cid in self.camera_ids
               if self.cam_from_rig[cid].almost_equal(Pose.identity())]
        if not ref:
            raise ValueError("rig needs a reference camera with identity extrinsic")

    @property
    def reference_id(self):
        for cid in self.camera_ids:
            if self.cam_from_rig[cid].almost_equal(Pose.identity()):
                return cid
        raise ValueError("no reference camera")

    def extrinsic(self, camera_id) -> Pose:
        return self.cam_from_rig[camera_id]


def single_camera_rig(camera_id) -> RigCalibration:
    return RigCalibration((camera_id,), {camera_id: Pose.identity()})
