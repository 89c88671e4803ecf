"""Image-pair selection: redundant radius search vs non-redundant
pose-graph-derived pairs."""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from .errors import ParseError
from .se3 import pose_distance

PROVENANCES = ("sequential", "loop", "extrinsic", "radius")


class ViewGraph:
    """Unordered frame pairs with a provenance tag each."""

    def __init__(self):
        self._pairs = {}

    def __len__(self):
        return len(self._pairs)

    def __contains__(self, pair):
        a, b = pair
        return (min(a, b), max(a, b)) in self._pairs

    def add_pair(self, a, b, provenance):
        if a == b:
            raise ValueError("self-pairs are not allowed")
        if provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {provenance!r}")
        key = (min(a, b), max(a, b))
        # first provenance wins; a pair is matched once regardless of source
        self._pairs.setdefault(key, provenance)

    def pairs(self):
        """Sorted list of ((id_a, id_b), provenance)."""
        return [(k, self._pairs[k]) for k in sorted(self._pairs)]

    def provenance(self, a, b):
        return self._pairs[(min(a, b), max(a, b))]

    def to_text(self) -> str:
        return "".join(f"{a} {b} {p}\n" for (a, b), p in self.pairs())

    @staticmethod
    def from_text(text) -> "ViewGraph":
        vg = ViewGraph()
        for lineno, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 3:
                raise ParseError(f"expected 'id_a id_b provenance'", line=lineno)
            try:
                a, b = int(parts[0]), int(parts[1])
            except ValueError:
                raise ParseError("non-integer frame id", line=lineno)
            vg.add_pair(a, b, parts[2])
        return vg


def pairs_by_radius(poses, max_dist=20.0, max_angle=np.pi / 2) -> ViewGraph:
    """All frame pairs within both a translation and a rotation threshold.

    `poses` maps frame_id -> trajectory pose (translation compared directly,
    so pass poses in a frame where translation is position-like).  A k-d tree
    prunes candidates; the result is identical to the O(n^2) scan.
    """
    ids = sorted(poses)
    if len(ids) < 2:
        return ViewGraph()
    pts = np.array([poses[i].t for i in ids])
    tree = cKDTree(pts)
    vg = ViewGraph()
    for i, j in sorted(tree.query_pairs(max_dist)):
        dt, dr = pose_distance(poses[ids[i]], poses[ids[j]])
        if dt <= max_dist and dr <= max_angle:
            vg.add_pair(ids[i], ids[j], "radius")
    return vg


def pairs_from_pose_graph(graph) -> ViewGraph:
    """One pair per pose-graph edge, provenance preserved (camera-frame
    graphs, where node ids are frame ids)."""
    vg = ViewGraph()
    for edge in graph.edges:
        vg.add_pair(edge.from_id, edge.to_id, edge.kind)
    return vg
