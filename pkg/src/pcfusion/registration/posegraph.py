"""Pose graph construction and robust optimization.

Edge ``(i, j)`` stores the measured transform ``T_ij`` that maps cloud ``j``
coordinates into the frame of cloud ``i``; its residual is
``e = log(T_ij^-1 T_i^-1 T_j)``. Loop closures carry a line-process weight
``w = (mu / (mu + r^2))^2`` where ``r`` is the per-correspondence RMS
displacement the residual induces (meters) and ``mu`` is the prune threshold
squared. Minimising the joint objective over ``w`` in closed form leaves a
Geman-McClure cost on the poses, which is what the Levenberg-Marquardt loop
descends.
"""

from __future__ import annotations

import enum
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from ..errors import (
    ConvergenceFailure,
    EmptyInput,
    GraphConstructionFailure,
    InvalidParameter,
    NoOverlap,
)
from ..geometry import se3
from ..geometry.ops import voxel_downsample
from ..geometry.types import PointCloud, RigidTransform
from .icp import IcpMethod, IcpParams, RegistrationResult, register_pair

logger = logging.getLogger(__name__)

LARGE_CLOUD = 100_000
LARGE_VOXEL = 0.002
SMALL_VOXEL = 0.001
FITNESS_FLOOR = 0.3


class EdgeKind(str, enum.Enum):
    ODOMETRY = "odometry"
    LOOP_CLOSURE = "loop-closure"


@dataclass(frozen=True)
class PoseGraphParams:
    """Multiview settings.

    ``voxel_size=None`` picks 2 mm with downsampling for clouds of at least
    100k points, else 1 mm without downsampling. An explicit voxel size always
    downsamples.
    """

    voxel_size: Optional[float] = None
    distance_multiplier: float = 2.0
    prune_divisor: float = 3.0
    method: IcpMethod = IcpMethod.GENERALIZED
    fitness_floor: float = FITNESS_FLOOR
    max_iterations: int = 30
    convergence_rel_change: float = 1e-6
    gicp_epsilon: float = 1e-4
    # (voxel multiple, gate multiple) pre-alignment passes run before the fine pass
    coarse_stages: tuple[tuple[float, float], ...] = ((5.0, 10.0),)
    workers: int = 1

    def __post_init__(self):
        if self.voxel_size is not None and not self.voxel_size > 0:
            raise InvalidParameter("voxel_size must be > 0")
        if not 1.0 <= self.distance_multiplier <= 4.0:
            raise InvalidParameter("distance_multiplier must lie in [1, 4]")
        if not 2.0 <= self.prune_divisor <= 4.0:
            raise InvalidParameter("prune_divisor must lie in [2, 4]")
        if not 0.0 <= self.fitness_floor <= 1.0:
            raise InvalidParameter("fitness_floor must lie in [0, 1]")
        for stage in self.coarse_stages:
            if len(stage) != 2 or not (stage[0] > 0 and stage[1] > 0):
                raise InvalidParameter("coarse_stages entries must be positive (voxel, gate) multiples")
        object.__setattr__(self, "coarse_stages", tuple(tuple(map(float, s)) for s in self.coarse_stages))
        if self.workers < 1:
            raise InvalidParameter("workers must be >= 1")
        object.__setattr__(self, "method", IcpMethod(self.method))

    def resolve_voxel(self, n_points: int) -> tuple[float, bool]:
        """``(voxel_size, downsample?)`` for a cloud of ``n_points``."""
        if self.voxel_size is not None:
            return float(self.voxel_size), True
        if n_points >= LARGE_CLOUD:
            return LARGE_VOXEL, True
        return SMALL_VOXEL, False

    def max_correspondence_distance(self, voxel: float) -> float:
        return voxel * self.distance_multiplier

    def edge_prune_threshold(self, voxel: float) -> float:
        return voxel / self.prune_divisor

    def icp_params(self, voxel: float, gate_multiple: float = 1.0) -> IcpParams:
        return IcpParams(
            max_correspondence_distance=self.max_correspondence_distance(voxel) * gate_multiple,
            max_iterations=self.max_iterations,
            convergence_rel_change=self.convergence_rel_change,
            method=self.method,
            gicp_epsilon=self.gicp_epsilon,
        )


@dataclass
class Node:
    cloud_id: int
    pose: RigidTransform


@dataclass
class Edge:
    i: int
    j: int
    transform: RigidTransform
    information: np.ndarray = field(repr=False)
    kind: EdgeKind
    weight: float = 1.0
    fitness: float = 1.0
    n_correspondences: int = 1

    def __post_init__(self):
        self.kind = EdgeKind(self.kind)
        info = np.asarray(self.information, dtype=float)
        if info.shape != (6, 6):
            raise InvalidParameter("edge information must be 6x6")
        self.information = 0.5 * (info + info.T)
        if self.kind is EdgeKind.ODOMETRY and self.j != self.i + 1:
            raise InvalidParameter(f"odometry edge ({self.i}, {self.j}) must join consecutive nodes")
        if self.kind is EdgeKind.LOOP_CLOSURE and abs(self.j - self.i) == 1:
            raise InvalidParameter(f"loop closure ({self.i}, {self.j}) joins consecutive nodes")
        if self.n_correspondences < 1:
            raise InvalidParameter("n_correspondences must be >= 1")


@dataclass
class PoseGraph:
    nodes: list[Node]
    edges: list[Edge]
    voxel_size: float = SMALL_VOXEL
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.nodes and self.nodes[0].pose != RigidTransform.identity():
            raise InvalidParameter("node 0 pose must be the identity")
        n = len(self.nodes)
        for e in self.edges:
            if not (0 <= e.i < n and 0 <= e.j < n and e.i != e.j):
                raise InvalidParameter(f"edge ({e.i}, {e.j}) references a missing node")

    @property
    def poses(self) -> list[RigidTransform]:
        return [nd.pose for nd in self.nodes]

    def odometry_connected(self) -> bool:
        links = {(e.i, e.j) for e in self.edges if e.kind is EdgeKind.ODOMETRY}
        return all((k, k + 1) in links for k in range(len(self.nodes) - 1))


@dataclass
class PoseGraphResult:
    poses: list[RigidTransform]
    converged: bool
    pruned: list[tuple[int, int]]
    weights: dict[tuple[int, int], float]
    iterations: int
    cost: float
    graph: PoseGraph = field(repr=False)


def edge_information(transform: RigidTransform, hessian: np.ndarray) -> np.ndarray:
    """Map an ICP Hessian (left twist on ``T_ij``) to the residual's information matrix."""
    A = se3.adjoint(transform.matrix)
    info = A.T @ hessian @ A
    return 0.5 * (info + info.T)


def chain_poses(edges: Sequence[Edge], n_nodes: int) -> list[RigidTransform]:
    """Compose odometry edges from node 0 (the identity)."""
    odo = {e.i: e.transform for e in edges if e.kind is EdgeKind.ODOMETRY}
    poses = [RigidTransform.identity()]
    for k in range(n_nodes - 1):
        if k not in odo:
            raise GraphConstructionFailure(f"odometry edge ({k}, {k + 1}) missing")
        poses.append(poses[-1] @ odo[k])
    return poses


def _prepare_clouds(clouds: Sequence[PointCloud], params: PoseGraphParams) -> tuple[list[PointCloud], float]:
    voxel, down = params.resolve_voxel(max(len(c) for c in clouds))
    if not down:
        return list(clouds), voxel
    return [voxel_downsample(c, voxel) for c in clouds], voxel


def coarse_pyramid(clouds: Sequence[PointCloud], voxel: float, params: PoseGraphParams):
    """Per coarse stage: (downsampled clouds, ICP params)."""
    return [([voxel_downsample(c, voxel * vm) for c in clouds], params.icp_params(voxel, gm))
            for vm, gm in params.coarse_stages]


def _pair(pyramid, clouds, init_poses, i, j, icp: IcpParams, floor: float,
          callback=None) -> Optional[RegistrationResult]:
    """Coarse-to-fine ICP of cloud ``j`` onto cloud ``i``.

    A loop-closure candidate whose coarse fitness is already below ``floor`` is
    dropped early: the wider coarse gate can only overcount inliers.
    """
    T = init_poses[i].inverse() @ init_poses[j]
    loop = j != i + 1
    hook = None if callback is None else (lambda stage: lambda it, si, tj, X: callback(i, j, stage, it, si, tj, X))
    for stage, (level, level_icp) in enumerate(pyramid):
        try:
            res = register_pair(level[j], level[i], T, level_icp,
                                callback=None if hook is None else hook(stage))
        except (NoOverlap, EmptyInput):
            if loop:
                return None
            continue
        if loop and res.fitness < floor:
            return None
        T = res.transform
    return register_pair(clouds[j], clouds[i], T, icp,
                         callback=None if hook is None else hook(len(pyramid)))


def build_pose_graph(
    clouds: Sequence[PointCloud],
    init_poses: Sequence[RigidTransform],
    params: PoseGraphParams = PoseGraphParams(),
    callback=None,
) -> PoseGraph:
    """Register every pair ``i < j`` and keep odometry plus confident loop closures.

    Node poses start from the odometry chain composition. ``callback``, if
    given, sees every pairwise ICP iteration as
    ``callback(i, j, stage, iteration, source_idx, target_idx, T)``. Indices
    refer to the clouds of that stage; the last stage is the fine pass.
    """
    if len(clouds) < 2:
        raise InvalidParameter("a pose graph needs at least 2 clouds")
    if len(init_poses) != len(clouds):
        raise InvalidParameter("one initial pose per cloud is required")
    work, voxel = _prepare_clouds(clouds, params)
    icp = params.icp_params(voxel)
    pyramid = coarse_pyramid(work, voxel, params)
    n = len(work)
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]

    def job(pair):
        try:
            return _pair(pyramid, work, init_poses, pair[0], pair[1], icp, params.fitness_floor, callback)
        except NoOverlap:
            return None

    if params.workers > 1:
        with ThreadPoolExecutor(params.workers) as pool:
            results = list(pool.map(job, pairs))
    else:
        results = [job(p) for p in pairs]

    edges = []
    for (i, j), res in zip(pairs, results):
        odometry = j == i + 1
        if res is None or res.n_correspondences < 1:
            if odometry:
                raise GraphConstructionFailure(f"no overlap between consecutive clouds {i} and {j}")
            continue
        if not odometry and res.fitness < params.fitness_floor:
            continue
        edges.append(Edge(
            i=i, j=j,
            transform=res.transform,
            information=edge_information(res.transform, res.information),
            kind=EdgeKind.ODOMETRY if odometry else EdgeKind.LOOP_CLOSURE,
            fitness=res.fitness,
            n_correspondences=res.n_correspondences,
        ))
        logger.debug("edge (%d, %d) fitness %.3f rmse %.2e", i, j, res.fitness, res.inlier_rmse)
    poses = chain_poses(edges, n)
    nodes = [Node(k, poses[k]) for k in range(n)]
    return PoseGraph(nodes, edges, voxel, {"max_correspondence_distance": icp.max_correspondence_distance})


# --------------------------------------------------------------------------- optimization

@dataclass
class _Term:
    i: int
    j: int
    Zinv: np.ndarray
    omega: np.ndarray
    n: int
    robust: bool


def _residual(term: _Term, poses: list[np.ndarray]) -> np.ndarray:
    return se3.log(term.Zinv @ se3.inverse(poses[term.i]) @ poses[term.j])


def _per_point_r2(term: _Term, e: np.ndarray) -> float:
    return float(e @ term.omega @ e) / term.n


def _line_weight(r2: float, mu: float) -> float:
    return (mu / (mu + r2)) ** 2


def _term_cost(term: _Term, e: np.ndarray, mu: float) -> float:
    if not term.robust:
        return float(e @ term.omega @ e)
    r2 = _per_point_r2(term, e)
    w = _line_weight(r2, mu)
    return term.n * (w * r2 + mu * (math.sqrt(w) - 1.0) ** 2)


def _total_cost(terms, poses, mu) -> float:
    return sum(_term_cost(t, _residual(t, poses), mu) for t in terms)


def _jacobians(term: _Term, poses, e) -> tuple[np.ndarray, np.ndarray]:
    """d e / d(xi_i), d e / d(xi_j) for left perturbations ``T <- exp(xi) T``."""
    A = se3.adjoint(se3.inverse(poses[term.i] @ se3.inverse(term.Zinv)))
    Jl_inv = np.eye(6)
    w = e[:3]
    Jw = se3._left_jacobian_inv(w)
    Jl_inv[:3, :3] = Jw
    Jl_inv[3:, 3:] = Jw
    # translational block of the SE(3) inverse left Jacobian (first order)
    Jl_inv[3:, :3] = -0.5 * se3.hat(e[3:])
    Jj = Jl_inv @ A
    return -Jj, Jj


def _normal_equations(terms, poses, mu, n_nodes):
    dim = 6 * (n_nodes - 1)
    H = np.zeros((dim, dim))
    g = np.zeros(dim)
    for t in terms:
        e = _residual(t, poses)
        w = _line_weight(_per_point_r2(t, e), mu) if t.robust else 1.0
        Ji, Jj = _jacobians(t, poses, e)
        W = w * t.omega
        blocks = [(t.i, Ji), (t.j, Jj)]
        for a, Ja in blocks:
            if a == 0:
                continue
            sa = slice(6 * (a - 1), 6 * a)
            g[sa] += Ja.T @ W @ e
            for b, Jb in blocks:
                if b == 0:
                    continue
                sb = slice(6 * (b - 1), 6 * b)
                H[sa, sb] += Ja.T @ W @ Jb
    return H, g


def _levenberg_marquardt(terms, poses, mu, max_iterations, tol):
    n = len(poses)
    cost = _total_cost(terms, poses, mu)
    if n == 1 or not terms:
        return poses, cost, True, 0
    lam = 1e-4
    it = 0
    for it in range(1, max_iterations + 1):
        if cost <= 1e-300:
            return poses, cost, True, it - 1
        H, g = _normal_equations(terms, poses, mu, n)
        if not np.all(np.isfinite(H)):
            break
        improved = False
        while lam < 1e16:
            A = H + lam * np.diag(np.maximum(np.diag(H), 1e-12))
            try:
                step = -cho_solve(cho_factor(A), g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            cand = [poses[0]] + [se3.exp(step[6 * (k - 1):6 * k]) @ poses[k] for k in range(1, n)]
            for T in cand[1:]:
                T[:3, :3] = se3.project_to_so3(T[:3, :3])
            c_new = _total_cost(terms, cand, mu)
            if c_new < cost:
                lam = max(lam / 10.0, 1e-12)
                improved = True
                break
            lam *= 10.0
        if not improved:
            # no descent direction left at machine precision: treat as converged
            return poses, cost, True, it
        rel = (cost - c_new) / max(cost, 1e-300)
        poses, cost = cand, c_new
        if rel < tol or np.linalg.norm(step) < 1e-12:
            return poses, cost, True, it
    return poses, cost, False, it


def optimize_pose_graph_full(
    graph: PoseGraph,
    edge_prune_threshold: float,
    *,
    max_iterations: int = 100,
    tolerance: float = 1e-12,
) -> PoseGraphResult:
    """Robust LM over node poses (node 0 fixed), then one prune-and-rerun pass.

    Raises:
        ConvergenceFailure: iteration cap hit; ``exc.best`` holds the result so far.
    """
    if not edge_prune_threshold > 0:
        raise InvalidParameter("edge_prune_threshold must be > 0")
    n = len(graph.nodes)
    if n == 0:
        raise InvalidParameter("empty pose graph")
    if n > 1 and not graph.odometry_connected():
        raise GraphConstructionFailure("odometry chain is not connected")
    mu = edge_prune_threshold ** 2
    edges = list(graph.edges)
    poses = [nd.pose.matrix.copy() for nd in graph.nodes]
    pruned: list[tuple[int, int]] = []
    converged = True
    iterations = 0
    cost = 0.0
    for attempt in range(2):
        terms = [
            _Term(e.i, e.j, e.transform.inverse().matrix, e.information, e.n_correspondences,
                  e.kind is EdgeKind.LOOP_CLOSURE)
            for e in edges
        ]
        poses, cost, ok, its = _levenberg_marquardt(terms, poses, mu, max_iterations, tolerance)
        converged = converged and ok
        iterations += its
        drop = []
        for e, t in zip(edges, terms):
            if t.robust and math.sqrt(_per_point_r2(t, _residual(t, poses))) > edge_prune_threshold:
                drop.append((e.i, e.j))
        if attempt == 1 or not drop:
            break
        pruned = drop
        edges = [e for e in edges if (e.i, e.j) not in set(drop)]
        logger.info("pruned %d loop closure(s): %s", len(drop), drop)

    weights = {}
    for e in edges:
        if e.kind is EdgeKind.LOOP_CLOSURE:
            t = _Term(e.i, e.j, e.transform.inverse().matrix, e.information, e.n_correspondences, True)
            weights[(e.i, e.j)] = _line_weight(_per_point_r2(t, _residual(t, poses)), mu)
        else:
            weights[(e.i, e.j)] = 1.0
    for ij in pruned:
        weights[ij] = 0.0
    out_poses = [RigidTransform.identity()] + [RigidTransform(_clean(P)) for P in poses[1:]]
    new_edges = [replace(e, weight=weights[(e.i, e.j)]) for e in edges]
    result = PoseGraphResult(
        poses=out_poses,
        converged=converged,
        pruned=pruned,
        weights=weights,
        iterations=iterations,
        cost=cost,
        graph=PoseGraph([Node(nd.cloud_id, P) for nd, P in zip(graph.nodes, out_poses)], new_edges,
                        graph.voxel_size, dict(graph.meta)),
    )
    if not converged:
        raise ConvergenceFailure(f"pose graph did not converge in {max_iterations} iterations", best=result)
    return result


def optimize_pose_graph(graph: PoseGraph, edge_prune_threshold: float, **kw) -> list[RigidTransform]:
    return optimize_pose_graph_full(graph, edge_prune_threshold, **kw).poses


def _clean(T: np.ndarray) -> np.ndarray:
    T = T.copy()
    T[:3, :3] = se3.project_to_so3(T[:3, :3])
    T[3] = (0.0, 0.0, 0.0, 1.0)
    return T
