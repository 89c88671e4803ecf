"""Deterministic feature extraction, descriptor matching and RANSAC verification.

The built-in extractor is a Harris-style corner detector with normalized
intensity-patch descriptors: no learned weights, bit-reproducible, good
enough for synthetic and desk-scale imagery.  Externally computed features
are ingested through the io module and flow through the same FeatureSet type.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .epipolar import eight_point
from .errors import DimensionMismatch, InsufficientMatches, NoConsensus


@dataclass(frozen=True)
class Keypoint:
    x: float
    y: float
    response: float = 0.0


@dataclass
class FeatureSet:
    frame_id: int
    keypoints: list
    descriptors: np.ndarray  # (N, D), unit-norm rows

    def __post_init__(self):
        self.descriptors = np.asarray(self.descriptors, dtype=np.float64)
        if self.descriptors.ndim != 2:
            self.descriptors = self.descriptors.reshape(len(self.keypoints), -1)
        if len(self.keypoints) != len(self.descriptors):
            raise ValueError("keypoint/descriptor count mismatch")
        if len(self.descriptors):
            norms = np.linalg.norm(self.descriptors, axis=1)
            if np.any(np.abs(norms - 1.0) > 1e-6):
                raise ValueError("descriptors must be unit-norm")

    def __len__(self):
        return len(self.keypoints)

    @property
    def xy(self):
        return np.array([[k.x, k.y] for k in self.keypoints]).reshape(-1, 2)


@dataclass(frozen=True)
class Match:
    index_a: int
    index_b: int
    distance: float


@dataclass(frozen=True)
class ExtractorConfig:
    nms_radius: int = 4
    patch_size: int = 8
    harris_k: float = 0.04
    smoothing: int = 3          # structure tensor box filter size
    abs_threshold: float = 1e-12
    rel_threshold: float = 1e-3  # fraction of the peak response
    max_features: int = 2000


def corner_response(image, config=ExtractorConfig()):
    """Harris corner response map of a grayscale image (float array)."""
    img = np.asarray(image, dtype=np.float64)
    gy, gx = np.gradient(img)
    sxx = ndimage.uniform_filter(gx * gx, size=config.smoothing, mode="nearest")
    syy = ndimage.uniform_filter(gy * gy, size=config.smoothing, mode="nearest")
    sxy = ndimage.uniform_filter(gx * gy, size=config.smoothing, mode="nearest")
    det = sxx * syy - sxy * sxy
    tr = sxx + syy
    return det - config.harris_k * tr * tr


def extract_features(image, config=ExtractorConfig(), frame_id=-1) -> FeatureSet:
    """Detect NMS-filtered corner maxima and build patch descriptors.

    Deterministic: identical images yield identical feature sets.  A constant
    image has zero response everywhere and produces an empty set.
    """
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape
    response = corner_response(img, config)
    threshold = max(config.abs_threshold, config.rel_threshold * response.max())
    r = config.nms_radius
    local_max = ndimage.maximum_filter(response, size=2 * r + 1, mode="nearest")
    margin = config.patch_size // 2
    mask = (response >= local_max) & (response > threshold)
    mask[:margin, :] = mask[-margin:, :] = False
    mask[:, :margin] = mask[:, -margin:] = False
    ys, xs = np.nonzero(mask)
    order = np.argsort(-response[ys, xs], kind="stable")[:config.max_features]
    keypoints, descriptors = [], []
    half = config.patch_size // 2
    for i in order:
        y, x = int(ys[i]), int(xs[i])
        patch = img[y - half:y + half, x - half:x + half].ravel()
        patch = patch - patch.mean()
        norm = np.linalg.norm(patch)
        if norm < 1e-12:
            continue
        keypoints.append(Keypoint(float(x), float(y), float(response[y, x])))
        descriptors.append(patch / norm)
    if not keypoints:
        return FeatureSet(frame_id, [], np.empty((0, config.patch_size ** 2)))
    return FeatureSet(frame_id, keypoints, np.array(descriptors))


def match_features(a: FeatureSet, b: FeatureSet, ratio: float = 0.8):
    """Mutually-nearest matches passing the best/second-best ratio test.

    The ratio gate is applied in both directions so (a, b) and (b, a) produce
    the same pair set.  Nearest-neighbor ties resolve to the lower index.
    Output is sorted by index_a.
    """
    if len(a) == 0 or len(b) == 0:
        return []
    if a.descriptors.shape[1] != b.descriptors.shape[1]:
        raise DimensionMismatch(
            f"{a.descriptors.shape[1]} vs {b.descriptors.shape[1]}")
    # squared L2 via the unit-norm identity, clamped for roundoff
    d2 = np.maximum(2.0 - 2.0 * (a.descriptors @ b.descriptors.T), 0.0)
    dist = np.sqrt(d2)

    def _gate(d):
        """Per-row (nearest index, passes-ratio flag)."""
        nn = np.argmin(d, axis=1)
        best = d[np.arange(len(d)), nn]
        if d.shape[1] >= 2:
            tmp = d.copy()
            tmp[np.arange(len(d)), nn] = np.inf
            second = tmp.min(axis=1)
        else:
            second = np.full(len(d), np.inf)
        with np.errstate(divide="ignore", invalid="ignore"):
            ok = np.where(second > 0, best / second < ratio, False)
        return nn, ok

    fwd_nn, fwd_ok = _gate(dist)
    bwd_nn, bwd_ok = _gate(dist.T)
    matches = []
    for ia in range(len(a)):
        ib = fwd_nn[ia]
        if bwd_nn[ib] == ia and fwd_ok[ia] and bwd_ok[ib]:
            matches.append(Match(int(ia), int(ib), float(dist[ia, ib])))
    return matches


def _pixel_epipolar_distances(F, pa, pb):
    la = pb @ F
    lb = pa @ F.T
    na = np.hypot(la[:, 0], la[:, 1])
    nb = np.hypot(lb[:, 0], lb[:, 1])
    na = np.where(na < 1e-15, np.inf, na)
    nb = np.where(nb < 1e-15, np.inf, nb)
    da = np.abs(np.einsum("ij,ij->i", la, pa)) / na
    db = np.abs(np.einsum("ij,ij->i", lb, pb)) / nb
    return np.maximum(da, db)


def verify_fundamental(matches, kps_a, kps_b, threshold_px=2.0,
                       max_iters=1000, seed=42):
    """RANSAC fundamental-matrix check over pixel-coordinate matches.

    Returns (inlier mask over `matches`, rank-2 F).  Deterministic for a
    fixed seed.
    """
    if len(matches) < 8:
        raise InsufficientMatches(f"{len(matches)} < 8 matches")
    xy_a = np.asarray(kps_a, dtype=float)
    xy_b = np.asarray(kps_b, dtype=float)
    pa = np.column_stack([xy_a[[m.index_a for m in matches]], np.ones(len(matches))])
    pb = np.column_stack([xy_b[[m.index_b for m in matches]], np.ones(len(matches))])
    rng = np.random.default_rng(seed)
    best_mask = None
    best_count = 0
    for _ in range(max_iters):
        idx = rng.choice(len(matches), size=8, replace=False)
        try:
            F = eight_point(pa[idx], pb[idx])
        except Exception:
            continue
        mask = _pixel_epipolar_distances(F, pa, pb) < threshold_px
        count = int(mask.sum())
        if count > best_count:
            best_count, best_mask = count, mask
    if best_count < 8:
        raise NoConsensus(f"best consensus {best_count} < 8")
    # refit on the consensus set, then regate
    F = eight_point(pa[best_mask], pb[best_mask])
    mask = _pixel_epipolar_distances(F, pa, pb) < threshold_px
    if int(mask.sum()) < 8:
        mask, = best_mask,
        F = eight_point(pa[best_mask], pb[best_mask])
    return mask, F
