"""Absolute trajectory error: timestamp association, optional rigid
alignment, and per-pose translation error statistics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NoOverlap
from .se3 import Pose

ASSOCIATION_WINDOW = 0.010   # seconds


@dataclass
class AteReport:
    rmse: float
    mean: float
    median: float
    std: float
    min: float
    max: float
    alignment: Pose          # reference_from_estimate transform applied
    n_pairs: int = 0

    def as_dict(self):
        return {"rmse": self.rmse, "mean": self.mean, "median": self.median,
                "std": self.std, "min": self.min, "max": self.max,
                "n_pairs": self.n_pairs}


def associate(estimate, reference, window=ASSOCIATION_WINDOW):
    """Nearest-timestamp pairing within `window`; each reference record is
    used at most once.  Returns a list of (estimate, reference) records."""
    ref = sorted(reference, key=lambda r: r.timestamp)
    ref_ts = np.array([r.timestamp for r in ref])
    used = set()
    out = []
    for e in sorted(estimate, key=lambda r: r.timestamp):
        if not len(ref_ts):
            break
        i = int(np.argmin(np.abs(ref_ts - e.timestamp)))
        if abs(ref_ts[i] - e.timestamp) <= window and i not in used:
            used.add(i)
            out.append((e, ref[i]))
    return out


def _umeyama_rigid(src, dst):
    """Least-squares rotation+translation mapping src points onto dst
    (SVD of the cross-covariance, no scale)."""
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    H = (dst - mu_d).T @ (src - mu_s)
    U, _, Vt = np.linalg.svd(H)
    S = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    R = U @ S @ Vt
    return Pose.from_rt(R, mu_d - R @ mu_s)


def evaluate_ate(estimate, reference, align="se3") -> AteReport:
    """ATE of `estimate` against `reference` (TrajectoryRecord lists).

    With align="se3" a closed-form rigid alignment removes the gauge before
    the per-pose translation errors are computed.
    """
    if align not in ("none", "se3"):
        raise ValueError(f"unknown alignment {align!r}")
    pairs = associate(estimate, reference)
    if not pairs:
        raise NoOverlap("no timestamp associations within "
                        f"{ASSOCIATION_WINDOW * 1e3:.0f} ms")
    est = np.array([e.t for e, _ in pairs])
    ref = np.array([r.t for _, r in pairs])
    transform = Pose.identity()
    if align == "se3" and len(pairs) >= 3:
        transform = _umeyama_rigid(est, ref)
    aligned = est @ transform.R.T + transform.t
    errors = np.linalg.norm(aligned - ref, axis=1)
    return AteReport(
        rmse=float(np.sqrt(np.mean(errors ** 2))),
        mean=float(np.mean(errors)),
        median=float(np.median(errors)),
        std=float(np.std(errors)),
        min=float(np.min(errors)),
        max=float(np.max(errors)),
        alignment=transform,
        n_pairs=len(pairs),
    )
