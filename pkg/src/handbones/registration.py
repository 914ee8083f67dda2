"""Multi-stage alignment of the bone template to an annotated scan.

Coarse stage: inverse kinematics of the model keypoints onto the annotated
keypoints (L-BFGS over pose, optionally shape). Fine stage: per-bone
embedded-deformation refinement against the per-bone and whole-hand target
surfaces with ICP correspondences, locally as-rigid-as-possible regularized.
Registered output keeps the template's topology and vertex order.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .geometry import MeshDistanceQuery, TriangleMesh, point_set_distances, submesh
from .model import (
    BoneModel,
    PoseParams,
    ShapeParams,
    forward,
    jacobians,
    pose_from_vector,
    pose_to_vector,
    rodrigues,
    rotation_to_axis_angle,
)
from .numerics import OptimizerConfig, lbfgs_minimize

__all__ = [
    "AnnotatedScan",
    "CorrespondenceSet",
    "DeformationGraph",
    "RegistrationConfig",
    "CoarseResult",
    "FineResult",
    "RegistrationResult",
    "coarse_register",
    "build_deformation_graph",
    "apply_ed",
    "icp_correspondences",
    "fine_register",
    "register_scan",
]

log = logging.getLogger(__name__)

# Unit-commensuration weight for the rotation part of the ED regularizer
# (the smoothness residuals are mm-scaled, A'A - I is dimensionless).
# Balances two failure modes: too low lets node affines drift along the
# tangential null directions of smooth bones, too high shrinks genuine
# stretch between a template bone and its target. With the coverage pairs
# supplying bidirectional attraction a light touch suffices.
_ROTATION_WEIGHT = 0.01


@dataclass
class AnnotatedScan:
    """One training sample: keypoints, bone surface, per-bone surfaces."""

    subject_id: str
    pose_id: str
    keypoints: np.ndarray
    bone_surface: TriangleMesh
    per_bone_surfaces: dict
    labels_volume: Optional[object] = None
    keypoint_names: Optional[tuple] = None

    def __post_init__(self):
        self.keypoints = np.asarray(self.keypoints, dtype=float).reshape(-1, 3)
        for label, mesh in self.per_bone_surfaces.items():
            if mesh.num_vertices == 0:
                raise ValueError(f"per-bone surface {label} is empty")


@dataclass(frozen=True)
class CorrespondenceSet:
    """Source-vertex-to-target-point pairs; kind is 'local' or 'global'."""

    source_indices: np.ndarray
    targets: np.ndarray
    kind: str

    @property
    def size(self) -> int:
        return self.source_indices.shape[0]


@dataclass
class DeformationGraph:
    """Embedded-deformation node graph over one bone mesh.

    Per node: a 3x3 affine and a translation; vertices are bound to their k
    nearest nodes with normalized inverse-distance weights.
    """

    nodes: np.ndarray  # (G, 3) rest positions
    node_edges: np.ndarray  # (E, 2) undirected
    vertex_nodes: np.ndarray  # (n, k)
    vertex_weights: np.ndarray  # (n, k) rows sum to 1
    affines: np.ndarray  # (G, 3, 3)
    translations: np.ndarray  # (G, 3)

    @property
    def num_nodes(self) -> int:
        return self.nodes.shape[0]


@dataclass(frozen=True)
class RegistrationConfig:
    lambda_reg: float = 5.0
    use_shape: bool = False
    # Twist about a bone axis through collinear keypoints is a null direction
    # of the keypoint error; a weak pull toward zero rotations keeps the IK
    # from wandering along it (weight in mm^2 per rad^2, tiny next to data).
    pose_regularization: float = 0.001
    # When set, the coarse stage poses the model at these coefficients
    # instead of optimizing shape.
    fixed_shape: Optional[ShapeParams] = None
    icp_reject_start_mm: float = 10.0
    icp_reject_floor_mm: float = 2.0
    max_outer_iterations: int = 20
    energy_rel_tol: float = 1e-6
    # ICP re-correspondence converges geometrically; once a round moves no
    # vertex farther than this, further rounds only chase a micron tail.
    displacement_tol_mm: float = 1.5e-3
    node_radius_factor: float = 0.125  # of the bone bounding-box diagonal
    binding_nodes: int = 4
    node_neighbors: int = 6
    threads: int = 1
    coarse_optimizer: OptimizerConfig = field(
        default_factory=lambda: OptimizerConfig(max_iterations=400, value_rel_tol=1e-14)
    )
    fine_optimizer: OptimizerConfig = field(
        default_factory=lambda: OptimizerConfig(
            max_iterations=150, gradient_tolerance=1e-5, value_rel_tol=1e-10
        )
    )


@dataclass
class CoarseResult:
    pose: PoseParams
    shape: ShapeParams
    residual: float  # final mean per-keypoint error, mm
    converged: bool


@dataclass
class FineResult:
    mesh: TriangleMesh
    energy: dict
    outer_iterations: int
    no_correspondences: bool = False
    energy_trace: list = field(default_factory=list)  # (threshold_mm, energy)


@dataclass
class RegistrationResult:
    mesh: TriangleMesh  # template topology, registered vertex positions
    coarse: CoarseResult
    per_bone_hausdorff: dict
    skipped_bones: list
    fine_energies: dict

    @property
    def mean_hausdorff(self) -> float:
        if not self.per_bone_hausdorff:
            return float("nan")
        return float(np.mean(list(self.per_bone_hausdorff.values())))


# ---------------------------------------------------------------------------
# Coarse stage


def _kabsch(source: np.ndarray, target: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Best-fit rigid transform mapping source points onto target points."""
    sc, tc = source.mean(axis=0), target.mean(axis=0)
    h = (source - sc).T @ (target - tc)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return r, tc - r @ sc


def coarse_register(
    model: BoneModel,
    keypoints: np.ndarray,
    use_shape: bool = False,
    optimizer: OptimizerConfig | None = None,
    pose_regularization: float = 0.001,
    fixed_shape: ShapeParams | None = None,
) -> CoarseResult:
    """Inverse kinematics of model keypoints onto annotated keypoints.

    Minimizes the summed squared keypoint error over pose and global
    transform (plus shape coefficients when ``use_shape`` and the model has a
    nontrivial basis), starting from the rest pose rigidly aligned to the
    annotations. A weak zero-rotation pull pins twist directions the
    keypoints cannot see. ``fixed_shape`` poses the model at given
    coefficients without optimizing them (used to keep one subject's scans
    on a shared shape).
    """
    target = np.asarray(keypoints, dtype=float).reshape(-1, 3)
    if target.shape[0] != model.num_keypoints:
        raise ValueError(
            f"expected {model.num_keypoints} keypoints, got {target.shape[0]}"
        )
    if not np.all(np.isfinite(target)):
        raise ValueError("keypoint annotations must be finite")
    j = model.num_joints
    rank = model.shape_basis.rank if use_shape else 0
    fit_shape = rank > 0 and fixed_shape is None
    base_shape = fixed_shape or ShapeParams.zeros(model.shape_basis.rank)

    rest_kp = forward(model, base_shape, PoseParams.identity(j))[1]
    r0, t0 = _kabsch(rest_kp, target)
    pose0 = PoseParams(np.zeros((j, 3)), rotation_to_axis_angle(r0), t0)
    x0 = pose_to_vector(pose0)
    if fit_shape:
        x0 = np.concatenate([x0, np.zeros(rank)])

    def unpack(x):
        pose = pose_from_vector(x[: 3 * j + 6], j)
        if fit_shape:
            shape = ShapeParams(x[3 * j + 6 :])
        else:
            shape = base_shape
        return pose, shape

    def objective(x):
        pose, shape = unpack(x)
        jac = jacobians(model, shape, pose, keypoints_only=True)
        res = (jac.posed_keypoints - target).ravel()
        grad_pose = 2.0 * jac.keypoints_pose.T @ res
        if fit_shape:
            grad = np.concatenate([grad_pose, 2.0 * jac.keypoints_shape.T @ res])
        else:
            grad = grad_pose
        theta = x[: 3 * j]
        value = float(res @ res) + pose_regularization * float(theta @ theta)
        grad[: 3 * j] += pose_regularization * 2.0 * theta
        return value, grad

    result = lbfgs_minimize(objective, x0, optimizer or OptimizerConfig(max_iterations=400))
    pose, shape = unpack(result.x)
    fitted = forward(model, shape, pose)[1]
    residual = float(np.mean(np.linalg.norm(fitted - target, axis=1)))
    return CoarseResult(pose, shape, residual, result.converged)


# ---------------------------------------------------------------------------
# Embedded deformation


def build_deformation_graph(
    mesh: TriangleMesh,
    node_radius: float,
    binding_nodes: int = 4,
    node_neighbors: int = 6,
) -> DeformationGraph:
    """Node graph over a mesh: greedy minimum-spacing node subsample, k-NN
    node connectivity (augmented to connect stray components), and per-vertex
    bindings to the nearest nodes with normalized inverse-distance weights."""
    verts = mesh.vertices
    n = verts.shape[0]
    if n == 0:
        raise ValueError("mesh is empty")
    chosen: list[int] = []
    for i in range(n):
        p = verts[i]
        if all(np.linalg.norm(p - verts[c]) >= node_radius for c in chosen):
            chosen.append(i)
    nodes = verts[np.array(chosen)]
    g = nodes.shape[0]

    edges = set()
    if g > 1:
        d = np.linalg.norm(nodes[:, None] - nodes[None, :], axis=2)
        np.fill_diagonal(d, np.inf)
        k = min(node_neighbors, g - 1)
        for a in range(g):
            for b in np.argsort(d[a])[:k]:
                edges.add((min(a, int(b)), max(a, int(b))))
        # Union-find pass to guarantee a connected graph per bone.
        parent = list(range(g))

        def find(x):
            while parent[x] != x:
                parent[x] = parent[parent[x]]
                x = parent[x]
            return x

        for a, b in edges:
            parent[find(a)] = find(b)
        while True:
            roots = {find(a) for a in range(g)}
            if len(roots) <= 1:
                break
            comps = {}
            for a in range(g):
                comps.setdefault(find(a), []).append(a)
            groups = list(comps.values())
            best = (np.inf, None)
            for other in groups[1:]:
                for a in groups[0]:
                    for b in other:
                        if d[a][b] < best[0]:
                            best = (d[a][b], (a, b))
            a, b = best[1]
            edges.add((min(a, b), max(a, b)))
            parent[find(a)] = find(b)
    node_edges = (
        np.array(sorted(edges), dtype=np.int64) if edges else np.zeros((0, 2), np.int64)
    )

    k_bind = min(binding_nodes, g)
    diff = verts[:, None, :] - nodes[None, :, :]
    dist = np.linalg.norm(diff, axis=2)
    nearest = np.argsort(dist, axis=1)[:, :k_bind]
    nd = np.take_along_axis(dist, nearest, axis=1)
    weights = np.zeros_like(nd)
    coincident = nd[:, 0] < 1e-12
    weights[coincident, 0] = 1.0
    inv = 1.0 / np.maximum(nd[~coincident], 1e-12)
    weights[~coincident] = inv / inv.sum(axis=1, keepdims=True)

    return DeformationGraph(
        nodes=nodes,
        node_edges=node_edges,
        vertex_nodes=nearest,
        vertex_weights=weights,
        affines=np.tile(np.eye(3), (g, 1, 1)),
        translations=np.zeros((g, 3)),
    )


def apply_ed(graph: DeformationGraph, vertices: np.ndarray) -> np.ndarray:
    """Blend per-node affine motions onto vertices:
    v' = sum_k w_k [A_k (v - g_k) + g_k + t_k]."""
    vertices = np.asarray(vertices, dtype=float).reshape(-1, 3)
    nodes = graph.nodes[graph.vertex_nodes]  # (n, k, 3)
    aff = graph.affines[graph.vertex_nodes]  # (n, k, 3, 3)
    trans = graph.translations[graph.vertex_nodes]  # (n, k, 3)
    local = vertices[:, None, :] - nodes
    moved = np.einsum("nkab,nkb->nka", aff, local) + nodes + trans
    return np.einsum("nk,nka->na", graph.vertex_weights, moved)


def coverage_correspondences(
    source_vertices: np.ndarray,
    target_vertices: np.ndarray,
    reject_dist: float,
) -> CorrespondenceSet:
    """Reverse pairs: each target vertex pulls its nearest source vertex.

    One-directional closest-point matching leaves target regions that no
    source point currently reaches entirely forceless; these pairs close the
    loop. Matches landing on one source vertex are averaged so each source
    index still appears at most once.
    """
    source_vertices = np.asarray(source_vertices, dtype=float).reshape(-1, 3)
    target_vertices = np.asarray(target_vertices, dtype=float).reshape(-1, 3)
    d, idx = cKDTree(source_vertices).query(target_vertices)
    keep = d <= reject_dist
    if not keep.any():
        return CorrespondenceSet(np.zeros(0, np.int64), np.zeros((0, 3)), "coverage")
    idx = idx[keep]
    pulled = target_vertices[keep]
    order = np.argsort(idx, kind="stable")
    idx = idx[order]
    pulled = pulled[order]
    unique, starts = np.unique(idx, return_index=True)
    sums = np.add.reduceat(pulled, starts, axis=0)
    counts = np.diff(np.append(starts, idx.size))
    return CorrespondenceSet(unique, sums / counts[:, None], "coverage")


def icp_correspondences(
    source_vertices: np.ndarray,
    target_local: TriangleMesh,
    target_global: TriangleMesh,
    reject_dist: float,
    local_query: MeshDistanceQuery | None = None,
    global_query: MeshDistanceQuery | None = None,
) -> tuple[CorrespondenceSet, CorrespondenceSet]:
    """Closest-point-on-triangle pairs against both targets, with rejection.

    Targets are exact closest surface points, not nearest vertices; pairs
    farther than ``reject_dist`` are dropped.
    """
    source_vertices = np.asarray(source_vertices, dtype=float).reshape(-1, 3)
    if target_local.faces.size == 0 or target_global.faces.size == 0:
        raise ValueError("targets must be non-empty meshes")
    sets = []
    for mesh, query, kind in (
        (target_local, local_query, "local"),
        (target_global, global_query, "global"),
    ):
        q = query or MeshDistanceQuery(mesh)
        d, cp = q.query(source_vertices)
        keep = d <= reject_dist
        sets.append(
            CorrespondenceSet(np.flatnonzero(keep), cp[keep], kind)
        )
    return sets[0], sets[1]


def _pack(graph: DeformationGraph) -> np.ndarray:
    return np.concatenate([graph.affines.ravel(), graph.translations.ravel()])


def _unpack(x: np.ndarray, g: int) -> tuple[np.ndarray, np.ndarray]:
    return x[: 9 * g].reshape(g, 3, 3), x[9 * g :].reshape(g, 3)


def _scatter_rows(grad: np.ndarray, idx: np.ndarray, values: np.ndarray):
    """grad[idx] += values with flat bincount accumulation (idx may repeat)."""
    flat = values.reshape(idx.size, -1)
    for c in range(flat.shape[1]):
        grad.reshape(grad.shape[0], -1)[:, c] += np.bincount(
            idx.ravel(), weights=flat[:, c], minlength=grad.shape[0]
        )


class _DataTerm:
    """Gathered per-correspondence structures, fixed within one inner solve."""

    def __init__(self, graph: DeformationGraph, source: np.ndarray,
                 cs: CorrespondenceSet):
        self.kind = cs.kind
        self.size = cs.size
        self.targets = cs.targets
        ids = cs.source_indices
        self.vn = graph.vertex_nodes[ids]
        self.w = graph.vertex_weights[ids]
        self.nodes = graph.nodes[self.vn]
        self.local = source[ids][:, None, :] - self.nodes


def _ed_energy_and_grad(
    x: np.ndarray,
    graph: DeformationGraph,
    source: np.ndarray,
    corr_sets: list,
    lambda_reg: float,
) -> tuple[float, np.ndarray, dict]:
    g = graph.num_nodes
    aff, trans = _unpack(x, g)
    grad_a = np.zeros((g, 3, 3))
    grad_t = np.zeros((g, 3))
    breakdown = {}

    e_data = 0.0
    for cs in corr_sets:
        if not isinstance(cs, _DataTerm):
            cs = _DataTerm(graph, source, cs)
        if cs.size == 0:
            breakdown[f"data_{cs.kind}"] = 0.0
            continue
        moved = np.einsum("mkab,mkb->mka", aff[cs.vn], cs.local) + cs.nodes + trans[cs.vn]
        deformed = np.einsum("mk,mka->ma", cs.w, moved)
        res = deformed - cs.targets
        term = float(np.sum(res**2))
        e_data += term
        breakdown[f"data_{cs.kind}"] = term
        coeff = 2.0 * cs.w[:, :, None] * res[:, None, :]  # (m, k, 3)
        _scatter_rows(grad_t, cs.vn, coeff)
        _scatter_rows(grad_a, cs.vn, coeff[:, :, :, None] * cs.local[:, :, None, :])

    e_smooth = 0.0
    if graph.node_edges.size:
        ja = np.concatenate([graph.node_edges[:, 0], graph.node_edges[:, 1]])
        jb = np.concatenate([graph.node_edges[:, 1], graph.node_edges[:, 0]])
        delta = graph.nodes[jb] - graph.nodes[ja]
        pred = (
            np.einsum("eab,eb->ea", aff[ja], delta)
            + graph.nodes[ja]
            + trans[ja]
        )
        res = pred - (graph.nodes[jb] + trans[jb])
        e_smooth = float(np.sum(res**2))
        _scatter_rows(grad_a, ja, 2.0 * lambda_reg * res[:, :, None] * delta[:, None, :])
        _scatter_rows(grad_t, ja, 2.0 * lambda_reg * res)
        _scatter_rows(grad_t, jb, -2.0 * lambda_reg * res)

    gram = np.einsum("gba,gbc->gac", aff, aff) - np.eye(3)
    e_rot = float(np.sum(gram**2))
    grad_a += lambda_reg * _ROTATION_WEIGHT * 4.0 * np.einsum("gab,gbc->gac", aff, gram)

    e_reg = e_smooth + _ROTATION_WEIGHT * e_rot
    total = e_data + lambda_reg * e_reg
    breakdown.update(
        data=e_data, smooth=e_smooth, rotation=e_rot, regularizer=e_reg, total=total
    )
    grad = np.concatenate([grad_a.ravel(), grad_t.ravel()])
    return total, grad, breakdown


def _principal_axis(points: np.ndarray, anchor: np.ndarray) -> tuple[np.ndarray, float, float]:
    """Dominant axis of a point cloud (pointing away from the anchor), its
    variance, and the summed lateral variance."""
    centered = points - points.mean(axis=0)
    w, u = np.linalg.eigh(np.cov(centered.T))
    axis = u[:, -1]
    if axis @ (points.mean(axis=0) - anchor) < 0:
        axis = -axis
    return axis, float(max(w[-1], 1e-12)), float(max(w[0] + w[1], 1e-12))


def _anchor_affine(
    source_vertices: np.ndarray,
    target_vertices: np.ndarray,
    joint_source: np.ndarray,
    joint_target: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Twist-free affine (A, s0, t0), x -> t0 + A (x - s0), pinning the
    bone's annotated joint and matching the target cloud's principal axis
    and moment scales.

    The joint annotation is the one point that certainly belongs to this
    bone; its direction and extent come from the target's own moments, so a
    neighbor bone's displacement cannot tilt the initialization.
    """
    axis_s, var_s, lat_s = _principal_axis(source_vertices, joint_source)
    axis_t, var_t, lat_t = _principal_axis(target_vertices, joint_target)
    cross = np.cross(axis_s, axis_t)
    sin, cos = np.linalg.norm(cross), float(axis_s @ axis_t)
    if sin < 1e-12:
        rot = np.eye(3)
    else:
        rot = rodrigues(cross / sin * np.arctan2(sin, cos))
    axial = np.sqrt(var_t / var_s)
    lateral = np.sqrt(lat_t / lat_s)
    scale = lateral * np.eye(3) + (axial - lateral) * np.outer(axis_s, axis_s)
    return rot @ scale, joint_source, joint_target


def _moment_init(source: np.ndarray, target: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Twist-free affine (A, s0, t0) matching centroid and second moments.

    The dominant principal axis of the target is trusted (sign-aligned with
    the source's); lateral directions are carried over from the source so a
    near-rotationally-symmetric bone picks up no spurious twist. Scale along
    the main axis comes from the moment ratio, lateral scale isotropically.
    """
    s0 = source.mean(axis=0)
    t0 = target.mean(axis=0)
    cs = np.cov((source - s0).T)
    ct = np.cov((target - t0).T)
    ws, us = np.linalg.eigh(cs)
    wt, ut = np.linalg.eigh(ct)
    axis_s = us[:, -1]
    axis_t = ut[:, -1]
    if axis_t @ axis_s < 0:
        axis_t = -axis_t
    cross = np.cross(axis_s, axis_t)
    sin, cos = np.linalg.norm(cross), float(axis_s @ axis_t)
    if sin < 1e-12:
        rot = np.eye(3)
    else:
        rot = rodrigues(cross / sin * np.arctan2(sin, cos))
    axial = np.sqrt(max(wt[-1], 1e-12) / max(ws[-1], 1e-12))
    lat_s = max(ws[0] + ws[1], 1e-12)
    lat_t = max(wt[0] + wt[1], 1e-12)
    lateral = np.sqrt(lat_t / lat_s)
    scale = lateral * np.eye(3) + (axial - lateral) * np.outer(axis_s, axis_s)
    return rot @ scale, s0, t0


def fine_register(
    initial: TriangleMesh,
    scan: AnnotatedScan,
    bone_index: int,
    lambda_reg: float = 5.0,
    config: RegistrationConfig | None = None,
    global_query: MeshDistanceQuery | None = None,
    anchors: tuple[np.ndarray, np.ndarray] | None = None,
) -> FineResult:
    """Per-bone embedded-deformation refinement.

    The node field is seeded from a moment-matching affine; when the bone's
    posed and annotated joint positions are given as ``anchors`` the joint
    is pinned exactly (fixing gross offset and length mismatch that
    one-directional ICP cannot recover). Then alternates ICP correspondence
    rebuilds (against the bone's own target and the whole-hand surface,
    threshold halved per round down to a floor) with L-BFGS solves of
    data + lambda_reg * regularizer over the node motions. Floor-threshold
    rounds are accepted only while the energy keeps decreasing.
    """
    cfg = config or RegistrationConfig()
    target_local = scan.per_bone_surfaces.get(bone_index)
    if target_local is None:
        raise ValueError(f"scan has no surface for bone {bone_index}")
    lo, hi = initial.bounding_box()
    node_radius = cfg.node_radius_factor * float(np.linalg.norm(hi - lo))
    graph = build_deformation_graph(
        initial, max(node_radius, 1e-6), cfg.binding_nodes, cfg.node_neighbors
    )
    source = initial.vertices
    local_query = MeshDistanceQuery(target_local)
    if global_query is None:
        global_query = MeshDistanceQuery(scan.bone_surface)

    if anchors is not None:
        a_init, s0, t0 = _anchor_affine(
            source, target_local.vertices, anchors[0], anchors[1]
        )
    else:
        a_init, s0, t0 = _moment_init(source, target_local.vertices)
    graph.affines[:] = a_init
    graph.translations[:] = t0 + (graph.nodes - s0) @ a_init.T - graph.nodes

    x = _pack(graph)
    prev_energy = np.inf  # comparable only once the threshold hits its floor
    best_x = x.copy()
    breakdown: dict = {"total": 0.0}
    trace: list = []
    outer_done = 0
    for outer in range(cfg.max_outer_iterations):
        thresh = max(cfg.icp_reject_start_mm / 2.0**outer, cfg.icp_reject_floor_mm)
        at_floor = thresh <= cfg.icp_reject_floor_mm
        graph.affines, graph.translations = _unpack(x, graph.num_nodes)
        deformed = apply_ed(graph, source)
        c_set, p_set = icp_correspondences(
            deformed, target_local, scan.bone_surface, thresh, local_query, global_query
        )
        if c_set.size == 0 and p_set.size == 0:
            if outer == 0:
                return FineResult(initial, {"total": float("nan")}, 0,
                                  no_correspondences=True)
            break
        cover = coverage_correspondences(deformed, target_local.vertices, thresh)

        corr = [
            _DataTerm(graph, source, c_set),
            _DataTerm(graph, source, p_set),
            _DataTerm(graph, source, cover),
        ]

        def objective(xv):
            e, grad, _ = _ed_energy_and_grad(xv, graph, source, corr, lambda_reg)
            return e, grad

        # Pre-floor rounds get a partial solve: their correspondences are
        # provisional, so polishing them is wasted work.
        solver_cfg = (
            cfg.fine_optimizer
            if at_floor
            else replace(cfg.fine_optimizer, max_iterations=25)
        )
        result = lbfgs_minimize(objective, x, solver_cfg)
        energy, _, breakdown = _ed_energy_and_grad(
            result.x, graph, source, corr, lambda_reg
        )
        outer_done = outer + 1
        if at_floor and energy > prev_energy:
            x = best_x  # reject the round, keep the best accepted field
            break
        trace.append((thresh, energy))
        decrease = prev_energy - energy
        x = best_x = result.x
        graph.affines, graph.translations = _unpack(x, graph.num_nodes)
        moved = apply_ed(graph, source)
        displacement = float(np.max(np.linalg.norm(moved - deformed, axis=1)))
        n_pairs = max(c_set.size + p_set.size + cover.size, 1)
        if energy / n_pairs < 1e-12:  # sub-micron RMS residual: done
            break
        if displacement < cfg.displacement_tol_mm:
            break
        if (
            at_floor
            and np.isfinite(prev_energy)
            and decrease < cfg.energy_rel_tol * max(prev_energy, 1e-12)
        ):
            break
        if at_floor:
            prev_energy = energy

    graph.affines, graph.translations = _unpack(x, graph.num_nodes)
    warped = TriangleMesh(apply_ed(graph, source), initial.faces, initial.bone_label)
    return FineResult(warped, breakdown, outer_done, energy_trace=trace)


# ---------------------------------------------------------------------------
# Full scan registration


def register_scan(
    model: BoneModel,
    scan: AnnotatedScan,
    config: RegistrationConfig | None = None,
) -> RegistrationResult:
    """Coarse-then-fine alignment of the model to one scan.

    The output mesh has exactly the template's vertex count, ordering, faces
    and bone labels; bones missing from the scan keep their coarse placement
    and are reported in ``skipped_bones``.
    """
    cfg = config or RegistrationConfig()
    coarse = coarse_register(
        model,
        scan.keypoints,
        use_shape=cfg.use_shape,
        optimizer=cfg.coarse_optimizer,
        pose_regularization=cfg.pose_regularization,
        fixed_shape=cfg.fixed_shape,
    )
    posed, posed_kp = forward(model, coarse.shape, coarse.pose)
    tpl = model.template
    posed_mesh = TriangleMesh(posed, tpl.faces, tpl.bone_label)
    out_vertices = posed.copy()
    skipped = []
    hausdorff = {}
    energies = {}

    shared_query = MeshDistanceQuery(scan.bone_surface)

    def run_bone(label):
        joint = tpl.bone_joint(label)
        sub, idx = submesh(posed_mesh, label)
        fine = fine_register(
            sub, scan, label, cfg.lambda_reg, cfg, shared_query,
            anchors=(posed_kp[joint], scan.keypoints[joint]),
        )
        return label, idx, fine

    present = [
        label
        for label in range(1, tpl.num_bones + 1)
        if label in scan.per_bone_surfaces
    ]
    skipped = [
        label
        for label in range(1, tpl.num_bones + 1)
        if label not in scan.per_bone_surfaces
    ]
    if cfg.threads > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            outcomes = list(pool.map(run_bone, present))
    else:
        outcomes = [run_bone(label) for label in present]

    for label, idx, fine in outcomes:
        if fine.no_correspondences:
            skipped.append(label)
            log.warning("bone %d: no ICP correspondences, left at coarse pose", label)
            continue
        out_vertices[idx] = fine.mesh.vertices
        energies[label] = fine.energy
        target = scan.per_bone_surfaces[label]
        d_ab, d_ba = point_set_distances(fine.mesh.vertices, target.vertices)
        hausdorff[label] = float(max(d_ab.max(), d_ba.max()))

    mesh = TriangleMesh(out_vertices, tpl.faces, tpl.bone_label)
    return RegistrationResult(mesh, coarse, hausdorff, sorted(skipped), energies)
