"""Full 6-DOF stereo relative pose from 2D observations only.

Pipeline: two-view geometric checks on (left, map) and (map, right), linear
translation-scale recovery against the calibrated stereo baseline, then a
joint refinement of the left-from-map pose that minimizes the summed
symmetric epipolar distance over both pairs.  No 3D points are ever built.

Pose direction convention: a TwoViewResult for frames (a, b) holds the
b-from-a transform (x_b = R x_a + t_dir * scale).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .epipolar import (decompose_essential, eight_point, epipolar_distances,
                       essential_from_pose, sampson_cost)
from .errors import (DegenerateMotion, IllConditioned, InsufficientMatches,
                     NegativeScale, NoConsensus)
from .features import match_features
from .se3 import Pose, adjoint, hat
from .solver import Problem, SolverOptions, solve


@dataclass
class TwoViewResult:
    rotation: np.ndarray          # 3x3, b-from-a
    translation_direction: np.ndarray  # unit 3-vector
    inlier_matches: tuple
    essential: np.ndarray
    rays_a: np.ndarray            # (N, 3) homogeneous normalized inlier points
    rays_b: np.ndarray

    def __post_init__(self):
        assert abs(np.linalg.norm(self.translation_direction) - 1.0) < 1e-9


@dataclass
class RelativePoseEstimate:
    pose: Pose                    # left-from-map, metric scale
    scale_left: float
    scale_right: float
    residual: float


@dataclass
class RelPoseParams:
    ratio: float = 0.8
    threshold_px: float = 2.0
    ransac_iters: int = 1000
    seed: int = 42
    min_matches: int = 8
    min_median_angle: float = np.radians(0.1)
    max_refine_iters: int = 50


def _normalized_points(features, cam):
    pts = np.ones((len(features), 3))
    for i, kp in enumerate(features.keypoints):
        pts[i, :2] = cam.pixel_to_normalized((kp.x, kp.y))
    return pts


def _procrustes_rotation(xa, xb):
    """Best pure rotation aligning unit rays a onto rays b (SVD)."""
    ua = xa / np.linalg.norm(xa, axis=1, keepdims=True)
    ub = xb / np.linalg.norm(xb, axis=1, keepdims=True)
    U, _, Vt = np.linalg.svd(ub.T @ ua)
    D = np.diag([1.0, 1.0, np.linalg.det(U @ Vt)])
    return U @ D @ Vt


def two_view_geometry(features_a, features_b, cam_a, cam_b,
                      params=RelPoseParams()) -> TwoViewResult:
    """RANSAC essential-matrix estimation between two frames.

    Raises DegenerateMotion when the matches are explained by a pure
    rotation (median residual ray angle below `min_median_angle`), since the
    translation direction is unobservable there.
    """
    matches = match_features(features_a, features_b, ratio=params.ratio)
    if len(matches) < params.min_matches:
        raise InsufficientMatches(f"{len(matches)} < {params.min_matches}")
    xa_all = _normalized_points(features_a, cam_a)
    xb_all = _normalized_points(features_b, cam_b)
    xa = xa_all[[m.index_a for m in matches]]
    xb = xb_all[[m.index_b for m in matches]]

    # pure-rotation (zero parallax) check before any essential fit
    R0 = _procrustes_rotation(xa, xb)
    rot_a = xa @ R0.T
    cosang = np.einsum("ij,ij->i", rot_a, xb) / (
        np.linalg.norm(rot_a, axis=1) * np.linalg.norm(xb, axis=1))
    angles = np.arccos(np.clip(cosang, -1.0, 1.0))
    if np.median(angles) < params.min_median_angle:
        raise DegenerateMotion(
            f"median parallax {np.degrees(np.median(angles)):.4f} deg")

    thr = params.threshold_px / (0.5 * (cam_a.fx + cam_a.fy))
    rng = np.random.default_rng(params.seed)
    best_mask, best_count = None, 0
    for _ in range(params.ransac_iters):
        idx = rng.choice(len(matches), size=8, replace=False)
        try:
            E = eight_point(xa[idx], xb[idx], essential=True)
        except Exception:
            continue
        d = epipolar_distances(E, xa, xb)
        mask = np.max(np.abs(d), axis=1) < thr
        if int(mask.sum()) > best_count:
            best_count, best_mask = int(mask.sum()), mask
    if best_count < params.min_matches:
        raise NoConsensus(f"best consensus {best_count}")
    E = eight_point(xa[best_mask], xb[best_mask], essential=True)
    d = epipolar_distances(E, xa, xb)
    mask = np.max(np.abs(d), axis=1) < thr
    if int(mask.sum()) < params.min_matches:
        mask = best_mask
        E = eight_point(xa[mask], xb[mask], essential=True)
    R, t_dir = decompose_essential(E, xa[mask], xb[mask])
    R, t_dir = _polish_two_view(R, t_dir, xa[mask], xb[mask])
    inliers = tuple(m for m, ok in zip(matches, mask) if ok)
    return TwoViewResult(R, t_dir, inliers, essential_from_pose(
        Pose.from_rt(R, t_dir)), xa[mask], xb[mask])


def _polish_two_view(R, t_dir, xa, xb, max_iters=20):
    """Minimize the symmetric epipolar cost over the 5 observable DOF.

    Parameterized as a full pose; the translation-scale direction is flat in
    the cost and LM damping leaves it untouched.
    """
    def residual(P):
        E, dE = _essential_and_derivs_left(P)
        r, J = _pair_residuals(E, xa, xb, dE)
        return r, [J]

    problem = Problem()
    problem.add_parameter_block("P", Pose.from_rt(R, t_dir), manifold="se3")
    problem.add_residual_block(residual, ["P"])
    solve(problem, SolverOptions(max_iters=max_iters))
    refined = problem.value("P")
    return refined.R, refined.t / np.linalg.norm(refined.t)


def estimate_translation_scale(left_map: TwoViewResult,
                               map_right: TwoViewResult,
                               calib: Pose) -> tuple:
    """Recover metric scales from the calibrated stereo baseline.

    left_map holds left-from-map (R1, d1), map_right holds map-from-right
    (R2, d2); the chain left-from-map * map-from-right must equal the
    calibration left-from-right, whose translation gives
    s1*d1 + s2*R1*d2 = t_calib -- a 3x2 linear least-squares system.
    """
    t_calib = calib.t
    if np.linalg.norm(t_calib) <= 1e-6:
        raise IllConditioned("calibration baseline is zero")
    d1 = left_map.translation_direction
    d2 = map_right.translation_direction
    A = np.column_stack([d1, left_map.rotation @ d2])
    sv = np.linalg.svd(A, compute_uv=False)
    cond = sv[0] / max(sv[-1], 1e-300)
    if cond > 1e6:
        raise IllConditioned(f"direction system condition {cond:.3e}")
    s, *_ = np.linalg.lstsq(A, t_calib, rcond=None)
    if s[0] <= 0 or s[1] <= 0:
        raise NegativeScale(f"scales {s[0]:.4g}, {s[1]:.4g}")
    return float(s[0]), float(s[1])


# --- joint Sampson refinement ----------------------------------------------

def _unit_with_jacobian(t):
    n = np.linalg.norm(t)
    u = t / n
    return u, (np.eye(3) - np.outer(u, u)) / n


def _pair_residuals(E, xa, xb, dE_list):
    """Symmetric epipolar distances and their derivatives for one pair.

    dE_list holds dE/d(delta_k) for the 6 pose parameters; returns the
    stacked (2N,) residual and (2N, 6) Jacobian.
    """
    la = xb @ E            # lines in image a
    lb = xa @ E.T          # lines in image b
    na = np.hypot(la[:, 0], la[:, 1])
    nb = np.hypot(lb[:, 0], lb[:, 1])
    nu = np.einsum("ij,ij->i", la, xa)   # = x_b^T E x_a
    da = nu / na
    db = nu / nb
    r = np.column_stack([da, db]).ravel()
    J = np.zeros((len(xa) * 2, 6))
    for k, dE in enumerate(dE_list):
        dla = xb @ dE
        dlb = xa @ dE.T
        dnu = np.einsum("ij,ij->i", dla, xa)
        dna = (la[:, 0] * dla[:, 0] + la[:, 1] * dla[:, 1]) / na
        dnb = (lb[:, 0] * dlb[:, 0] + lb[:, 1] * dlb[:, 1]) / nb
        dda = dnu / na - nu * dna / (na * na)
        ddb = dnu / nb - nu * dnb / (nb * nb)
        J[:, k] = np.column_stack([dda, ddb]).ravel()
    return r, J


def _essential_and_derivs_left(P: Pose):
    """E for the (map, left) pair and dE/d(delta) under P <- exp(delta) P."""
    R, t = P.R, P.t
    u, du_dt = _unit_with_jacobian(t)
    E = hat(u) @ R
    dE = []
    for k in range(6):
        phi = np.zeros(3)
        rho = np.zeros(3)
        if k < 3:
            phi[k] = 1.0
        else:
            rho[k - 3] = 1.0
        dRk = hat(phi) @ R
        dtk = hat(phi) @ t + rho
        duk = du_dt @ dtk
        dE.append(hat(duk) @ R + hat(u) @ dRk)
    return E, dE


def _essential_and_derivs_right(P: Pose, calib: Pose):
    """E for the (right, map) pair, pose map-from-right = P^-1 * calib.

    Under P <- exp(delta) P the derived pose right-perturbs by
    eta = -Adj(calib^-1) delta.
    """
    rel = P.inverse() @ calib
    R, t = rel.R, rel.t
    u, du_dt = _unit_with_jacobian(t)
    E = hat(u) @ R
    M = -adjoint(calib.inverse())
    dE = []
    for k in range(6):
        eta = M[:, k]
        dRk = R @ hat(eta[:3])
        dtk = R @ eta[3:]
        duk = du_dt @ dtk
        dE.append(hat(duk) @ R + hat(u) @ dRk)
    return E, dE


def refine_residual_fn(calib, matches_lm, matches_mr):
    """Residual + analytic Jacobian closure for the joint refinement."""
    x_map_lm, x_left = (np.asarray(a, dtype=float) for a in matches_lm)
    x_right, x_map_mr = (np.asarray(a, dtype=float) for a in matches_mr)

    def residual(P):
        E1, dE1 = _essential_and_derivs_left(P)
        r1, J1 = _pair_residuals(E1, x_map_lm, x_left, dE1)
        E2, dE2 = _essential_and_derivs_right(P, calib)
        r2, J2 = _pair_residuals(E2, x_right, x_map_mr, dE2)
        return np.concatenate([r1, r2]), [np.vstack([J1, J2])]

    return residual


def joint_refine(initial: Pose, calib: Pose, matches_lm, matches_mr,
                 params=RelPoseParams()) -> RelativePoseEstimate:
    """Minimize the summed two-pair epipolar cost over the left-from-map pose.

    matches_lm / matches_mr are (rays_map, rays_left) and (rays_right,
    rays_map) homogeneous normalized point arrays; the inlier sets are
    frozen.  The right pose stays slaved to the calibration, keeping the
    problem 6-dimensional and the rig rigid.
    """
    residual = refine_residual_fn(calib, matches_lm, matches_mr)
    problem = Problem()
    problem.add_parameter_block("P", initial, manifold="se3")
    problem.add_residual_block(residual, ["P"])
    report = solve(problem, SolverOptions(max_iters=params.max_refine_iters))
    pose = problem.value("P")
    if report.final_cost > report.initial_cost + 1e-15:
        raise AssertionError("refinement increased the cost")
    s1 = float(np.linalg.norm(pose.t))
    s2 = float(np.linalg.norm((pose.inverse() @ calib).t))
    return RelativePoseEstimate(pose, s1, s2, report.final_cost)


def joint_cost(P: Pose, calib: Pose, matches_lm, matches_mr) -> float:
    """The refined objective evaluated at an arbitrary pose (test hook)."""
    x_map_lm, x_left = matches_lm
    x_right, x_map_mr = matches_mr
    c = sampson_cost(essential_from_pose(P), x_map_lm, x_left)
    c += sampson_cost(essential_from_pose(P.inverse() @ calib), x_right, x_map_mr)
    return c


def estimate_stereo_relative_pose(map_features, left_features, right_features,
                                  cam_map, cam_left, cam_right, calib,
                                  params=RelPoseParams()) -> RelativePoseEstimate:
    """SRE: two two-view checks, scale fit, then joint refinement.

    `calib` is the left-from-right stereo calibration.  The (left, right)
    pair is skipped -- its geometry is already pinned by the calibration.
    Upstream errors are re-raised with the failing stage attached.
    """
    try:
        lm = two_view_geometry(map_features, left_features, cam_map, cam_left,
                               params)
    except InsufficientMatches as e:
        raise InsufficientMatches(str(e), stage="left-map") from e
    try:
        mr = two_view_geometry(right_features, map_features, cam_right,
                               cam_map, params)
    except InsufficientMatches as e:
        raise InsufficientMatches(str(e), stage="map-right") from e
    s1, s2 = estimate_translation_scale(lm, mr, calib)
    initial = Pose.from_rt(lm.rotation, s1 * lm.translation_direction)
    est = joint_refine(initial, calib, (lm.rays_a, lm.rays_b),
                       (mr.rays_a, mr.rays_b), params)
    return est
