"""Pose graph with sequential, loop and extrinsic edges.

Nodes hold camera-from-world (or rig-from-world) poses; an edge stores the
measured relative pose between its endpoints.  The residual is the log map of
the error transform, so it vanishes exactly when the measurement holds.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import MissingCalibration, NoFixedNode
from .keyframes import group_by_rig_time
from .se3 import (Pose, adjoint, log_map, se3_left_jacobian_inv,
                  se3_right_jacobian_inv)
from .solver import (Problem, SolverOptions, information_sqrt, solve)

CAMERA_FRAME = "camera_frame"
VEHICLE_RIG = "vehicle_rig"

SEQUENTIAL = "sequential"
LOOP = "loop"
EXTRINSIC = "extrinsic"


@dataclass
class PoseNode:
    node_id: int
    pose: Pose                  # node-from-world
    kind: str = CAMERA_FRAME
    fixed: bool = False


@dataclass
class PoseEdge:
    kind: str
    from_id: int
    to_id: int
    measurement: Pose           # measured from-node-from-to-node transform
    information: np.ndarray = field(default_factory=lambda: np.eye(6))

    def __post_init__(self):
        if self.from_id == self.to_id:
            raise ValueError("edge endpoints must differ")
        self.information = np.asarray(self.information, dtype=float)
        if self.information.shape != (6, 6):
            raise ValueError("information must be 6x6")
        if not np.allclose(self.information, self.information.T, atol=1e-9):
            raise ValueError("information must be symmetric")
        np.linalg.cholesky(self.information)  # SPD check


class PoseGraph:
    def __init__(self, node_kind=CAMERA_FRAME):
        self.node_kind = node_kind
        self.nodes = {}
        self.edges = []
        self.frame_to_node = {}   # keyframe id -> node id

    def add_node(self, node: PoseNode):
        if node.node_id in self.nodes:
            raise ValueError(f"duplicate node {node.node_id}")
        self.nodes[node.node_id] = node

    def add_edge(self, edge: PoseEdge):
        if edge.from_id not in self.nodes or edge.to_id not in self.nodes:
            raise ValueError("edge references unknown node")
        self.edges.append(edge)

    def edges_of_kind(self, kind):
        return [e for e in self.edges if e.kind == kind]

    def to_text(self) -> str:
        lines = []
        for nid in sorted(self.nodes):
            n = self.nodes[nid]
            q, t = n.pose.quat, n.pose.t
            lines.append("NODE %d %s %d %.9g %.9g %.9g %.9g %.9g %.9g %.9g"
                         % (nid, n.kind, int(n.fixed), *q, *t))
        for e in self.edges:
            q, t = e.measurement.quat, e.measurement.t
            lines.append("EDGE %s %d %d %.9g %.9g %.9g %.9g %.9g %.9g %.9g %.9g"
                         % (e.kind, e.from_id, e.to_id, *q, *t,
                            float(e.information[0, 0])))
        return "\n".join(lines) + "\n"


def default_information(kind, inlier_count=None, min_inliers=25):
    """Per-kind edge weights: calibration is trusted most, loops scale with
    their geometric support (capped)."""
    if kind == SEQUENTIAL:
        w = 1.0
    elif kind == EXTRINSIC:
        w = 100.0
    elif kind == LOOP:
        base = max(int(min_inliers), 1)
        w = 1.0 if inlier_count is None else min(inlier_count / base, 10.0)
    else:
        raise ValueError(f"unknown edge kind {kind!r}")
    return w * np.eye(6)


def build_pose_graph(keyframes, k_neighbors=1, loop_closures=(), rig=None,
                     node_kind=CAMERA_FRAME, min_inliers=25) -> PoseGraph:
    """Assemble nodes and sequential/loop/extrinsic edges from keyframes.

    `loop_closures` entries are (from_frame, to_frame, measurement, inliers)
    with the measurement mapping the to-frame camera into the from-frame
    camera.  In vehicle_rig mode the per-timestamp camera frames collapse to
    one rig node each and extrinsic edges disappear into the node itself.
    The first node is fixed to anchor the gauge.
    """
    keyframes = sorted(keyframes, key=lambda k: (k.timestamp, k.camera_id))
    camera_ids = sorted({kf.camera_id for kf in keyframes})
    graph = PoseGraph(node_kind)

    if node_kind == CAMERA_FRAME:
        if len(camera_ids) > 1 and rig is None:
            raise MissingCalibration("multi-camera input needs a rig calibration")
        for kf in keyframes:
            graph.add_node(PoseNode(kf.frame_id, kf.cam_from_world))
            graph.frame_to_node[kf.frame_id] = kf.frame_id
        # sequential edges per camera, offsets 1..k
        by_cam = {c: [kf for kf in keyframes if kf.camera_id == c]
                  for c in camera_ids}
        for c in camera_ids:
            seq = by_cam[c]
            for i in range(len(seq)):
                for off in range(1, k_neighbors + 1):
                    if i + off >= len(seq):
                        break
                    a, b = seq[i], seq[i + off]
                    meas = a.cam_from_world @ b.cam_from_world.inverse()
                    graph.add_edge(PoseEdge(SEQUENTIAL, a.frame_id, b.frame_id,
                                            meas, default_information(SEQUENTIAL)))
        # extrinsic edges: all camera pairs at each rig instant
        if rig is not None and len(camera_ids) > 1:
            for _, group in group_by_rig_time(keyframes):
                for i in range(len(group)):
                    for j in range(i + 1, len(group)):
                        a, b = group[i], group[j]
                        meas = rig.extrinsic(a.camera_id) @ \
                            rig.extrinsic(b.camera_id).inverse()
                        graph.add_edge(PoseEdge(
                            EXTRINSIC, a.frame_id, b.frame_id, meas,
                            default_information(EXTRINSIC)))
        for (fa, fb, meas, inliers) in loop_closures:
            graph.add_edge(PoseEdge(LOOP, fa, fb, meas,
                                    default_information(LOOP, inliers, min_inliers)))
    elif node_kind == VEHICLE_RIG:
        if rig is None:
            raise MissingCalibration("vehicle_rig mode needs a rig calibration")
        groups = group_by_rig_time(keyframes)
        rig_poses = []
        for nid, (_, group) in enumerate(groups):
            # rig-from-world derived from any member camera via its extrinsic
            kf = group[0]
            rig_from_world = rig.extrinsic(kf.camera_id).inverse() @ kf.cam_from_world
            graph.add_node(PoseNode(nid, rig_from_world, VEHICLE_RIG))
            rig_poses.append(rig_from_world)
            for member in group:
                graph.frame_to_node[member.frame_id] = nid
        for i in range(len(groups)):
            for off in range(1, k_neighbors + 1):
                if i + off >= len(groups):
                    break
                meas = rig_poses[i] @ rig_poses[i + off].inverse()
                graph.add_edge(PoseEdge(SEQUENTIAL, i, i + off, meas,
                                        default_information(SEQUENTIAL)))
        frame_kf = {kf.frame_id: kf for kf in keyframes}
        for (fa, fb, meas, inliers) in loop_closures:
            na, nb = graph.frame_to_node[fa], graph.frame_to_node[fb]
            if na == nb:
                continue
            ea = rig.extrinsic(frame_kf[fa].camera_id)
            eb = rig.extrinsic(frame_kf[fb].camera_id)
            rig_meas = ea.inverse() @ meas @ eb
            graph.add_edge(PoseEdge(LOOP, na, nb, rig_meas,
                                    default_information(LOOP, inliers, min_inliers)))
    else:
        raise ValueError(f"unknown node kind {node_kind!r}")

    if graph.nodes:
        graph.nodes[min(graph.nodes)].fixed = True
    return graph


def edge_residual(edge: PoseEdge, T_from: Pose, T_to: Pose):
    """log(measurement^-1 * T_from * T_to^-1); zero iff the edge is satisfied."""
    return log_map(edge.measurement.inverse() @ T_from @ T_to.inverse())


def _edge_residual_fn(edge):
    W = information_sqrt(edge.information)
    meas_inv = edge.measurement.inverse()
    adj_meas_inv = adjoint(meas_inv)

    def fn(T_from, T_to):
        r = log_map(meas_inv @ T_from @ T_to.inverse())
        J_from = se3_left_jacobian_inv(r) @ adj_meas_inv
        J_to = -se3_right_jacobian_inv(r)
        return W @ r, [W @ J_from, W @ J_to]

    return fn


def optimize_pose_graph(graph: PoseGraph, options: SolverOptions = None):
    """Levenberg-Marquardt over all free node poses; fixed nodes untouched."""
    if not any(n.fixed for n in graph.nodes.values()):
        raise NoFixedNode("pose graph needs at least one fixed node")
    if options is None:
        options = SolverOptions(max_iters=100)
    problem = Problem()
    for nid in sorted(graph.nodes):
        n = graph.nodes[nid]
        problem.add_parameter_block(f"n{nid}", n.pose, manifold="se3",
                                    fixed=n.fixed)
    for edge in graph.edges:
        problem.add_residual_block(_edge_residual_fn(edge),
                                   [f"n{edge.from_id}", f"n{edge.to_id}"])
    report = solve(problem, options)
    for nid, n in graph.nodes.items():
        n.pose = problem.value(f"n{nid}")
    return report
