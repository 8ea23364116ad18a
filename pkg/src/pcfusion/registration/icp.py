"""Pairwise rigid registration: point-to-plane ICP and Generalized ICP.

Both variants share one loop: nearest-neighbour correspondences under a
distance gate, uniform weights, and a damped Gauss-Newton solve on the 6-dof
twist. The inner solve runs to convergence on the frozen correspondence set
with step halving, so the objective never increases inside an iteration.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from ..errors import EmptyInput, InvalidParameter, MissingNormals, NoOverlap
from ..geometry import se3
from ..geometry.kdtree import KdTree
from ..geometry.ops import estimate_normals
from ..geometry.types import PointCloud, RigidTransform
from . import _kernels as _k

logger = logging.getLogger(__name__)

MIN_CORRESPONDENCES = 6
INNER_STEPS = 10
STEP_TOL = 1e-12


class IcpMethod(str, enum.Enum):
    POINT_TO_PLANE = "point-to-plane"
    GENERALIZED = "generalized"


@dataclass(frozen=True)
class IcpParams:
    max_correspondence_distance: float
    max_iterations: int = 30
    convergence_rel_change: float = 1e-6
    method: IcpMethod = IcpMethod.POINT_TO_PLANE
    gicp_epsilon: float = 1e-4
    normal_agreement: bool = True  # Generalized only: reject pairs with n_a . n_b <= 0

    def __post_init__(self):
        if not self.max_correspondence_distance > 0:
            raise InvalidParameter("max_correspondence_distance must be > 0")
        if self.max_iterations < 1:
            raise InvalidParameter("max_iterations must be >= 1")
        if not 0.0 < self.gicp_epsilon < 1.0:
            raise InvalidParameter("gicp_epsilon must lie in (0, 1)")
        object.__setattr__(self, "method", IcpMethod(self.method))


@dataclass
class RegistrationResult:
    transform: RigidTransform
    fitness: float
    inlier_rmse: float
    iterations_used: int
    information: np.ndarray = field(repr=False)
    n_correspondences: int = 0
    converged: bool = False


def surface_covariances(normals: np.ndarray, epsilon: float) -> np.ndarray:
    """Plane-like covariances ``R_n diag(eps, 1, 1) R_n^T = eps n n^T + (I - n n^T)``."""
    nn = np.einsum("ni,nj->nij", normals, normals)
    return epsilon * nn + (np.eye(3) - nn)


def _ensure_normals(cloud: PointCloud, k: int = 30) -> PointCloud:
    if cloud.normals is not None:
        return cloud
    # scans live in their camera frame, so the origin is the viewpoint
    return estimate_normals(cloud, min(k, len(cloud)), viewpoint=np.zeros(3))


@dataclass
class _Problem:
    src: np.ndarray
    src_normals: Optional[np.ndarray]
    src_cov: Optional[np.ndarray]
    tgt: np.ndarray
    tgt_normals: np.ndarray
    tgt_cov: Optional[np.ndarray]
    tree: KdTree


def _correspondences(prob: _Problem, T: np.ndarray, params: IcpParams):
    R, t = T[:3, :3], T[:3, 3]
    moved = prob.src @ R.T + t
    d, j = prob.tree.nearest(moved, params.max_correspondence_distance)
    ok = j >= 0
    if params.method is IcpMethod.GENERALIZED and params.normal_agreement:
        ok[ok] = np.einsum("ij,ij->i", prob.src_normals[ok] @ R.T, prob.tgt_normals[j[ok]]) > 0
    i = np.flatnonzero(ok)
    return i, np.ascontiguousarray(j[i], dtype=np.int64), d[i]


def _rt(T):
    return np.ascontiguousarray(T[:3, :3]), np.ascontiguousarray(T[:3, 3])


def _p2plane_cost(prob, T, si, tj) -> float:
    R, t = _rt(T)
    return _k.p2plane_cost(prob.src, R, t, prob.tgt, prob.tgt_normals, si, tj)


def _p2plane_system(prob, T, si, tj):
    R, t = _rt(T)
    return _k.p2plane_system(prob.src, R, t, prob.tgt, prob.tgt_normals, si, tj)


def _gicp_precisions(prob, T, si, tj) -> np.ndarray:
    R, _ = _rt(T)
    return _k.gicp_precisions(prob.src_cov, prob.tgt_cov, R, si, tj)


def gicp_cost(prob, T, si, tj, M) -> float:
    R, t = _rt(T)
    return _k.gicp_cost(prob.src, R, t, prob.tgt, M, si, tj)


def _gicp_normal_equations(prob, T, si, tj, M):
    R, t = _rt(T)
    return _k.gicp_system(prob.src, R, t, prob.tgt, M, si, tj)


def _solve(H: np.ndarray, g: np.ndarray) -> np.ndarray:
    scale = max(np.trace(H) / 6.0, 1e-300)
    return -np.linalg.solve(H + 1e-12 * scale * np.eye(6), g)


def _inner_solve(prob, T, si, tj, params) -> np.ndarray:
    """Gauss-Newton to convergence on frozen correspondences; cost never increases."""
    gen = params.method is IcpMethod.GENERALIZED
    M = _gicp_precisions(prob, T, si, tj) if gen else None
    cost = gicp_cost(prob, T, si, tj, M) if gen else _p2plane_cost(prob, T, si, tj)
    for _ in range(INNER_STEPS):
        if gen:
            H, g = _gicp_normal_equations(prob, T, si, tj, M)
        else:
            H, g = _p2plane_system(prob, T, si, tj)
        try:
            xi = _solve(H, g)
        except np.linalg.LinAlgError:
            break
        step = 1.0
        accepted = False
        for _ in range(20):
            cand = se3.exp(step * xi) @ T
            cand[:3, :3] = se3.project_to_so3(cand[:3, :3])
            c_new = gicp_cost(prob, cand, si, tj, M) if gen else _p2plane_cost(prob, cand, si, tj)
            if c_new <= cost:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        done = cost - c_new <= 1e-12 * cost
        T, cost = cand, c_new
        if done or np.linalg.norm(step * xi) < STEP_TOL:
            break
    return T


def _information(prob, T, si, tj, params) -> np.ndarray:
    """Gauss-Newton Hessian sum J^T J at ``T`` (twist perturbation in the target frame)."""
    if len(si) == 0:
        return np.zeros((6, 6))
    if params.method is IcpMethod.GENERALIZED:
        M = _gicp_precisions(prob, T, si, tj)
        H, _ = _gicp_normal_equations(prob, T, si, tj, M)
        # scaled so the normal direction carries unit weight, matching point-to-plane units
        H = H * 2.0 * params.gicp_epsilon
    else:
        H, _ = _p2plane_system(prob, T, si, tj)
    return 0.5 * (H + H.T)


def _prepare(source: PointCloud, target: PointCloud, params: IcpParams, target_tree: Optional[KdTree]) -> _Problem:
    if len(source) == 0 or len(target) == 0:
        raise EmptyInput("ICP needs non-empty source and target clouds")
    if params.method is IcpMethod.POINT_TO_PLANE:
        if target.normals is None:
            raise MissingNormals("point-to-plane ICP needs target normals")
        return _Problem(source.points, source.normals, None, target.points, target.normals, None,
                        target_tree or KdTree(target.points))
    source = _ensure_normals(source)
    target = _ensure_normals(target)
    eps = params.gicp_epsilon
    src_cov = source.covariances if source.covariances is not None else surface_covariances(source.normals, eps)
    tgt_cov = target.covariances if target.covariances is not None else surface_covariances(target.normals, eps)
    return _Problem(source.points, source.normals, src_cov, target.points, target.normals, tgt_cov,
                    target_tree or KdTree(target.points))


CorrespondenceCallback = Callable[[int, np.ndarray, np.ndarray, np.ndarray], None]


def register_pair(
    source: PointCloud,
    target: PointCloud,
    init: RigidTransform,
    params: IcpParams,
    *,
    target_tree: Optional[KdTree] = None,
    callback: Optional[CorrespondenceCallback] = None,
) -> RegistrationResult:
    """Align ``source`` onto ``target``; the result maps source coordinates into the target frame.

    Args:
        source: moving cloud.
        target: fixed cloud (needs normals for point-to-plane).
        init: initial source-to-target transform.
        params: ICP settings; ``params.method`` picks the residual.
        target_tree: optional prebuilt KD-tree over ``target.points``.
        callback: called as ``callback(iteration, source_idx, target_idx, T)``
            with the correspondence set of every iteration.

    Raises:
        NoOverlap: no correspondence survives the distance gate at ``init``.
        MissingNormals: point-to-plane without target normals.
    """
    prob = _prepare(source, target, params, target_tree)
    T = init.matrix.copy()
    prev_pairs = None
    prev_rmse = None
    converged = False
    it = 0
    for it in range(1, params.max_iterations + 1):
        si, tj, d = _correspondences(prob, T, params)
        if callback is not None:
            callback(it, si, tj, T.copy())
        if len(si) < MIN_CORRESPONDENCES:
            if it == 1:
                raise NoOverlap(f"only {len(si)} correspondences within "
                                f"{params.max_correspondence_distance:g} m at the initial pose")
            break
        rmse = float(np.sqrt(np.mean(d * d)))
        if prev_pairs is not None and len(si) == len(prev_pairs[0]) and np.array_equal(si, prev_pairs[0]) \
                and np.array_equal(tj, prev_pairs[1]):
            converged = True
            break
        if prev_rmse is not None and abs(prev_rmse - rmse) <= params.convergence_rel_change * max(prev_rmse, 1e-300):
            converged = True
            break
        T = _inner_solve(prob, T, si, tj, params)
        prev_pairs = (si, tj)
        prev_rmse = rmse
    si, tj, d = _correspondences(prob, T, params)
    fitness = len(si) / len(prob.src)
    rmse = float(np.sqrt(np.mean(d * d))) if len(d) else 0.0
    T[3] = (0.0, 0.0, 0.0, 1.0)
    return RegistrationResult(
        transform=RigidTransform(T),
        fitness=fitness,
        inlier_rmse=rmse,
        iterations_used=it,
        information=_information(prob, T, si, tj, params),
        n_correspondences=len(si),
        converged=converged,
    )


def icp_point_to_plane(source, target, init, params: IcpParams, **kw) -> RegistrationResult:
    if params.method is not IcpMethod.POINT_TO_PLANE:
        params = _replace_method(params, IcpMethod.POINT_TO_PLANE)
    return register_pair(source, target, init, params, **kw)


def icp_generalized(source, target, init, params: IcpParams, **kw) -> RegistrationResult:
    if params.method is not IcpMethod.GENERALIZED:
        params = _replace_method(params, IcpMethod.GENERALIZED)
    return register_pair(source, target, init, params, **kw)


def _replace_method(params: IcpParams, method: IcpMethod) -> IcpParams:
    return replace(params, method=method)


def gicp_objective(
    source: PointCloud,
    target: PointCloud,
    T: RigidTransform,
    source_idx: np.ndarray,
    target_idx: np.ndarray,
    epsilon: float,
) -> float:
    """Generalized-ICP objective on a fixed correspondence list."""
    params = IcpParams(1.0, method=IcpMethod.GENERALIZED, gicp_epsilon=epsilon)
    prob = _prepare(source, target, params, None)
    si, tj = _indices(source_idx), _indices(target_idx)
    M = _gicp_precisions(prob, T.matrix, si, tj)
    return gicp_cost(prob, T.matrix, si, tj, M)


def point_to_plane_objective(source, target, T: RigidTransform, source_idx, target_idx) -> float:
    prob = _prepare(source, target, IcpParams(1.0), None)
    return _p2plane_cost(prob, T.matrix, _indices(source_idx), _indices(target_idx))


def _indices(idx) -> np.ndarray:
    return np.ascontiguousarray(idx, dtype=np.int64)
