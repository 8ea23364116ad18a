"""Joint point-to-plane ICP over all scans at once.

Each outer iteration gathers nearest-neighbour correspondences for every
pair of clouds ``i < j`` (cloud ``j`` queried against cloud ``i``), then
solves one least-squares problem over all poses (pose 0 held fixed). With ``x = T_j p`` and ``y = T_i q`` in world
coordinates, the residual is ``n_w . (x - y)``, where ``n_w`` is the
world-frame target normal. Its Jacobian is ``[x cross n_w, n_w]`` for pose
``j`` and the negation of that for pose ``i``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from ..errors import DisconnectedSet, InvalidParameter
from ..geometry import se3
from ..geometry.kdtree import KdTree
from ..geometry.ops import voxel_downsample
from ..geometry.types import PointCloud, RigidTransform
from . import _kernels as _k
from .icp import MIN_CORRESPONDENCES, IcpParams, _ensure_normals

logger = logging.getLogger(__name__)

INNER_STEPS = 10


@dataclass
class GlobalIcpResult:
    poses: list[RigidTransform]
    iterations: int
    converged: bool
    rmse: float
    pairs: list[tuple[int, int]]


@dataclass
class _Block:
    i: int
    j: int
    si: np.ndarray
    tj: np.ndarray


def _gather(clouds, trees, poses, gate) -> list[_Block]:
    blocks = []
    n = len(clouds)
    for i in range(n):
        inv_i = se3.inverse(poses[i])
        for j in range(i + 1, n):
            rel = inv_i @ poses[j]
            moved = clouds[j].points @ rel[:3, :3].T + rel[:3, 3]
            _, idx = trees[i].nearest(moved, gate)
            ok = np.flatnonzero(idx >= 0)
            if len(ok) < MIN_CORRESPONDENCES:
                continue
            blocks.append(_Block(i, j, ok, np.ascontiguousarray(idx[ok], dtype=np.int64)))
    return blocks


def _relative(poses, b: _Block):
    rel = se3.inverse(poses[b.i]) @ poses[b.j]
    return np.ascontiguousarray(rel[:3, :3]), np.ascontiguousarray(rel[:3, 3])


def _cost(clouds, blocks, poses) -> float:
    # the world residual n_w . (T_j p - T_i q) equals the point-to-plane residual in frame i
    total = 0.0
    for b in blocks:
        R, t = _relative(poses, b)
        total += _k.p2plane_cost(clouds[b.j].points, R, t, clouds[b.i].points, clouds[b.i].normals, b.si, b.tj)
    return total


def _solve_step(clouds, blocks, poses):
    dim = 6 * (len(poses) - 1)
    H = np.zeros((dim, dim))
    g = np.zeros(dim)
    for b in blocks:
        R, t = _relative(poses, b)
        Hl, gl = _k.p2plane_system(clouds[b.j].points, R, t, clouds[b.i].points, clouds[b.i].normals, b.si, b.tj)
        # local twist on T_i^-1 T_j = Ad(T_i^-1) times the world twist on T_j; pose i enters negated
        A = se3.adjoint(se3.inverse(poses[b.i]))
        HJ = A.T @ Hl @ A
        gJ = A.T @ gl
        signs = {b.j: 1.0, b.i: -1.0}
        for a, sa in signs.items():
            if a == 0:
                continue
            ia = slice(6 * (a - 1), 6 * a)
            g[ia] += sa * gJ
            for c, sc in signs.items():
                if c == 0:
                    continue
                H[ia, slice(6 * (c - 1), 6 * c)] += sa * sc * HJ
    scale = max(np.trace(H) / max(dim, 1), 1e-300)
    return -cho_solve(cho_factor(H + 1e-12 * scale * np.eye(dim)), g)


def _inner(clouds, blocks, poses):
    cost = _cost(clouds, blocks, poses)
    for _ in range(INNER_STEPS):
        try:
            step = _solve_step(clouds, blocks, poses)
        except np.linalg.LinAlgError:
            break
        scale = 1.0
        accepted = False
        for _ in range(20):
            cand = [poses[0]]
            for k in range(1, len(poses)):
                T = se3.exp(scale * step[6 * (k - 1):6 * k]) @ poses[k]
                T[:3, :3] = se3.project_to_so3(T[:3, :3])
                cand.append(T)
            c_new = _cost(clouds, blocks, cand)
            if c_new <= cost:
                accepted = True
                break
            scale *= 0.5
        if not accepted:
            break
        poses, cost = cand, c_new
        if np.linalg.norm(scale * step) < 1e-12:
            break
    return poses


def _connected(n: int, pairs) -> bool:
    adj = {k: set() for k in range(n)}
    for i, j in pairs:
        adj[i].add(j)
        adj[j].add(i)
    seen = {0}
    stack = [0]
    while stack:
        for nb in adj[stack.pop()]:
            if nb not in seen:
                seen.add(nb)
                stack.append(nb)
    return len(seen) == n


def global_icp_full(
    clouds: Sequence[PointCloud],
    init_poses: Sequence[RigidTransform],
    params: IcpParams,
    voxel_size: Optional[float],
) -> GlobalIcpResult:
    """Simultaneous alignment of all clouds; ``voxel_size=None`` skips downsampling.

    Raises:
        DisconnectedSet: the overlap graph at the initial poses is not connected.
    """
    if len(clouds) < 2:
        raise InvalidParameter("global ICP needs at least 2 clouds")
    if len(init_poses) != len(clouds):
        raise InvalidParameter("one initial pose per cloud is required")
    work = [voxel_downsample(c, voxel_size) if voxel_size else c for c in clouds]
    work = [_ensure_normals(c) for c in work]
    trees = [KdTree(c.points) for c in work]
    poses = [T.matrix.copy() for T in init_poses]
    gate = params.max_correspondence_distance

    prev_key = None
    prev_rmse = None
    converged = False
    rmse = 0.0
    pairs: list[tuple[int, int]] = []
    it = 0
    for it in range(1, params.max_iterations + 1):
        blocks = _gather(work, trees, poses, gate)
        if it == 1:
            pairs = sorted({(min(b.i, b.j), max(b.i, b.j)) for b in blocks})
            isolated = [k for k in range(len(work)) if not any(k in p for p in pairs)]
            if isolated or not _connected(len(work), pairs):
                raise DisconnectedSet(f"clouds without overlap at the initial poses: {isolated or 'components split'}")
        n_corr = sum(len(b.si) for b in blocks)
        rmse = float(np.sqrt(_cost(work, blocks, poses) / max(n_corr, 1)))
        key = [(b.i, b.j, b.si, b.tj) for b in blocks]
        if prev_key is not None and _same_correspondences(key, prev_key):
            converged = True
            break
        if prev_rmse is not None and abs(prev_rmse - rmse) <= params.convergence_rel_change * max(prev_rmse, 1e-300):
            converged = True
            break
        poses = _inner(work, blocks, poses)
        prev_key, prev_rmse = key, rmse
    out = [init_poses[0]] + [RigidTransform(_clean(P)) for P in poses[1:]]
    return GlobalIcpResult(out, it, converged, rmse, pairs)


def global_icp(
    clouds: Sequence[PointCloud],
    init_poses: Sequence[RigidTransform],
    params: IcpParams,
    voxel_size: Optional[float],
) -> list[RigidTransform]:
    return global_icp_full(clouds, init_poses, params, voxel_size).poses


def _same_correspondences(a, b) -> bool:
    return len(a) == len(b) and all(
        x[:2] == y[:2] and np.array_equal(x[2], y[2]) and np.array_equal(x[3], y[3]) for x, y in zip(a, b))


def _clean(T: np.ndarray) -> np.ndarray:
    T = T.copy()
    T[3] = (0.0, 0.0, 0.0, 1.0)
    return T
