"""Two-view epipolar primitives on normalized camera coordinates.

Correspondence convention: for a relative pose mapping frame-a points into
frame-b (x_b = R x_a + t), the essential matrix E = [t/|t|]_x R satisfies
x_b^T E x_a = 0, with x_a / x_b homogeneous normalized image points.
"""

from __future__ import annotations

import numpy as np

from .errors import (CheiralityAmbiguous, DegenerateLine,
                     DegenerateZeroBaseline, InsufficientMatches)
from .se3 import Pose, hat


def essential_from_pose(rel: Pose) -> np.ndarray:
    """E = [t]_x R with t unit-normalized; `rel` maps frame-a into frame-b."""
    norm = np.linalg.norm(rel.t)
    if norm <= 1e-12:
        raise DegenerateZeroBaseline(f"baseline {norm:.3e}")
    return hat(rel.t / norm) @ rel.R


def point_line_distance(x, line) -> float:
    """Signed distance l.x / sqrt(l1^2 + l2^2) between homogeneous point and line."""
    l1, l2, _ = line
    denom = np.hypot(l1, l2)
    if denom < 1e-15:
        raise DegenerateLine("line has no finite direction")
    return float(np.dot(line, x) / denom)


def epipolar_distances(E, xa, xb):
    """Per-match symmetric point-to-epipolar-line distances.

    Returns an (N, 2) array: column 0 is d(x_a, E^T x_b), column 1 is
    d(x_b, E x_a).  Inputs are (N, 3) homogeneous normalized points.
    """
    la = xb @ E          # rows: E^T x_b, lines in image a
    lb = xa @ E.T        # rows: E x_a, lines in image b
    na = np.hypot(la[:, 0], la[:, 1])
    nb = np.hypot(lb[:, 0], lb[:, 1])
    if np.any(na < 1e-15) or np.any(nb < 1e-15):
        raise DegenerateLine("epipolar line has no finite direction")
    da = np.einsum("ij,ij->i", la, xa) / na
    db = np.einsum("ij,ij->i", lb, xb) / nb
    return np.column_stack([da, db])


def sampson_cost(E, xa, xb) -> float:
    """Sum of squared symmetric epipolar distances over all matches."""
    d = epipolar_distances(E, np.atleast_2d(xa), np.atleast_2d(xb))
    return float(np.sum(d * d))


def _normalize_points(x):
    """Hartley normalization; returns (conditioned points, 3x3 transform)."""
    centroid = x[:, :2].mean(axis=0)
    d = np.linalg.norm(x[:, :2] - centroid, axis=1)
    scale = np.sqrt(2.0) / max(d.mean(), 1e-12)
    T = np.array([
        [scale, 0.0, -scale * centroid[0]],
        [0.0, scale, -scale * centroid[1]],
        [0.0, 0.0, 1.0],
    ])
    return x @ T.T, T


def eight_point(xa, xb, essential=False) -> np.ndarray:
    """Normalized 8-point estimate of the (fundamental|essential) matrix.

    Rank-2 projection is always applied; with `essential` the two remaining
    singular values are additionally averaged.
    """
    xa = np.atleast_2d(np.asarray(xa, float))
    xb = np.atleast_2d(np.asarray(xb, float))
    if len(xa) < 8:
        raise InsufficientMatches(f"{len(xa)} < 8 correspondences")
    pa, Ta = _normalize_points(xa)
    pb, Tb = _normalize_points(xb)
    # x_b^T F x_a = 0  ->  A f = 0 with A rows kron(x_b, x_a)
    A = np.einsum("ni,nj->nij", pb, pa).reshape(len(pa), 9)
    _, _, Vt = np.linalg.svd(A)
    F = Vt[-1].reshape(3, 3)
    U, s, Vt = np.linalg.svd(F)
    F = U @ np.diag([s[0], s[1], 0.0]) @ Vt
    F = Tb.T @ F @ Ta
    if essential:
        # essential structure only holds in the original (camera) coordinates
        U, s, Vt = np.linalg.svd(F)
        m = 0.5 * (s[0] + s[1])
        F = U @ np.diag([m, m, 0.0]) @ Vt
    n = np.linalg.norm(F)
    if n < 1e-15:
        raise DegenerateLine("degenerate matrix estimate")
    F = F / n
    # deterministic sign
    idx = np.unravel_index(np.argmax(np.abs(F)), F.shape)
    if F[idx] < 0:
        F = -F
    return F


def two_view_depths(R, t, xa, xb):
    """Per-match (depth_a, depth_b) from z_b x_b = R (z_a x_a) + t."""
    out = np.empty((len(xa), 2))
    for i, (pa, pb) in enumerate(zip(xa, xb)):
        A = np.column_stack([R @ pa, -pb])
        z, *_ = np.linalg.lstsq(A, -t, rcond=None)
        out[i] = z
    return out


def decompose_essential(E, xa, xb):
    """(rotation matrix, unit translation) resolving the 4-fold ambiguity.

    Votes each candidate by the number of correspondences with positive depth
    in both views; only the translation direction is recoverable.
    """
    xa = np.atleast_2d(np.asarray(xa, float))
    xb = np.atleast_2d(np.asarray(xb, float))
    if len(xa) < 5:
        raise InsufficientMatches(f"{len(xa)} < 5 inliers")
    U, _, Vt = np.linalg.svd(E)
    if np.linalg.det(U) < 0:
        U = -U
    if np.linalg.det(Vt) < 0:
        Vt = -Vt
    W = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    candidates = []
    for R in (U @ W @ Vt, U @ W.T @ Vt):
        for t in (U[:, 2], -U[:, 2]):
            z = two_view_depths(R, t, xa, xb)
            votes = int(np.sum(np.all(z > 0, axis=1)))
            candidates.append((votes, R, t))
    votes = sorted((c[0] for c in candidates), reverse=True)
    if votes[0] == votes[1]:
        raise CheiralityAmbiguous(f"top cheirality votes tie at {votes[0]}")
    best = max(candidates, key=lambda c: c[0])
    return best[1], best[2] / np.linalg.norm(best[2])
