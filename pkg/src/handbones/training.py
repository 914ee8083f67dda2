"""Bone-aware model learning.

Given registered bone meshes in template topology plus keypoint annotations,
fit per-scan poses (edge + joint energies), solve per-subject rest templates
and joints by alternating a closed-form vertex solve with a joint refinement,
build the shape space by PCA over subject templates, and refit the keypoint
regressor. ``train_model`` wraps the whole flip-flop loop that alternates
registration against the current model with parameter re-learning.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import TriangleMesh, extract_edges
from .model import (
    BoneModel,
    BoneTemplate,
    JointRegressor,
    PoseParams,
    ShapeBasis,
    ShapeParams,
    forward,
    global_joint_transforms,
    jacobians,
    pose_from_vector,
    pose_to_vector,
    rodrigues,
    rodrigues_batch,
    rotation_to_axis_angle,
)
from .numerics import OptimizerConfig, lbfgs_minimize, pca, ridge_least_squares
from .registration import RegistrationConfig, coarse_register, register_scan

__all__ = [
    "TrainingConfig",
    "RegisteredEntry",
    "IterationDiagnostics",
    "TrainResult",
    "edge_energy",
    "joint_energy",
    "fit_pose",
    "solve_subject_template",
    "fit_subject",
    "subject_rest_keypoints",
    "build_shape_space",
    "build_joint_regressor",
    "train_model",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainingConfig:
    lambda_edge: float = 1.0
    lambda_joint: float = 100.0
    lambda_reg: float = 5.0
    outer_iterations: int = 3
    shape_dims: int = 10
    max_alternations: int = 30
    alternation_rel_tol: float = 1e-8
    regressor_ridge_scale: float = 1e-6
    # Joints that barely move in the observed poses (the root, near-straight
    # leaves) are null directions of the vertex energy; a weak tether to the
    # regressor's prediction on the current template pins them.
    joint_tether: float = 1e-3
    # Twist about a bone's own axis moves no keypoint and changes no edge
    # length, so the pose energy has null directions along which the solver
    # would drift; anchoring the rotations to the warm start (itself read off
    # the registered mesh by per-bone Procrustes) keeps the fit well posed.
    pose_prior: float = 1.0
    # Pose fits against the general template inherit its bone lengths, which
    # biases the subject solve; refitting poses against the freshly solved
    # subject template and re-solving contracts that bias.
    subject_refinements: int = 2
    # A per-bone rigid motion of a subject's rest frame can be absorbed by
    # counter-motions in every pose (a gauge freedom of the decomposition).
    # A weak pull of the subject template toward the shared template picks
    # the gauge consistently across subjects; the data term dominates
    # everywhere the surfaces actually constrain.
    template_coupling: float = 0.02
    optimizer: OptimizerConfig = field(
        default_factory=lambda: OptimizerConfig(max_iterations=400, value_rel_tol=1e-14)
    )
    registration: RegistrationConfig = field(default_factory=RegistrationConfig)

    def __post_init__(self):
        if min(self.lambda_edge, self.lambda_joint, self.lambda_reg) <= 0:
            raise ValueError("energy weights must be positive")
        if self.outer_iterations < 1 or self.shape_dims < 0:
            raise ValueError("invalid iteration or dimension counts")


@dataclass
class RegisteredEntry:
    """One registered scan: template-topology vertices plus annotations."""

    subject_id: str
    pose_id: str
    vertices: np.ndarray  # (N, 3) registered positions
    keypoints: np.ndarray  # (K, 3) annotated
    pose: PoseParams | None = None  # fitted pose, filled by the pipeline
    shape: ShapeParams | None = None  # coarse-fit coefficients, when available


@dataclass
class IterationDiagnostics:
    iteration: int
    mean_hausdorff_mm: float
    mean_e_pose: float
    mean_e_vert: float


@dataclass
class TrainResult:
    model: BoneModel
    diagnostics: list
    subject_templates: dict  # subject_id -> (N, 3)
    subject_keypoints: dict  # subject_id -> (K, 3) rest keypoints
    entries: list


# ---------------------------------------------------------------------------
# Energies


def edge_energy(
    posed_vertices: np.ndarray, target_vertices: np.ndarray, edges: np.ndarray
) -> float:
    """Sum of squared edge-length differences over the given edge list.

    Rigid motions of either mesh leave it unchanged; with identical topology
    it measures pure shape discrepancy per bone segment.
    """
    posed_vertices = np.asarray(posed_vertices, dtype=float)
    target_vertices = np.asarray(target_vertices, dtype=float)
    if posed_vertices.shape != target_vertices.shape:
        raise ValueError("edge energy needs identical topology")
    a = np.linalg.norm(
        posed_vertices[edges[:, 0]] - posed_vertices[edges[:, 1]], axis=1
    )
    b = np.linalg.norm(
        target_vertices[edges[:, 0]] - target_vertices[edges[:, 1]], axis=1
    )
    return float(np.sum((a - b) ** 2))


def joint_energy(posed_keypoints: np.ndarray, target_keypoints: np.ndarray) -> float:
    """Sum of squared keypoint distances (mm^2)."""
    posed_keypoints = np.asarray(posed_keypoints, dtype=float)
    target_keypoints = np.asarray(target_keypoints, dtype=float)
    if posed_keypoints.shape != target_keypoints.shape:
        raise ValueError("keypoint counts disagree")
    return float(np.sum((posed_keypoints - target_keypoints) ** 2))


@dataclass
class PoseFitResult:
    pose: PoseParams
    energy: float
    e_edge: float
    e_joint: float
    converged: bool


def fit_pose(
    model: BoneModel,
    entry: RegisteredEntry,
    config: TrainingConfig | None = None,
    warm_start: PoseParams | None = None,
    shape: ShapeParams | None = None,
) -> PoseFitResult:
    """Fit one scan's pose by minimizing the weighted edge + joint energy.

    By default the bare (zero-shape) template is posed; once a shape space
    exists the caller can pass the scan's fitted coefficients so the posed
    skeleton has the right bone lengths. The warm start (normally the coarse
    registration pose) anchors the basin.
    """
    cfg = config or TrainingConfig()
    tpl = model.template
    j = tpl.num_joints
    edges = extract_edges(TriangleMesh(tpl.vertices, tpl.faces))
    target_len = np.linalg.norm(
        entry.vertices[edges[:, 0]] - entry.vertices[edges[:, 1]], axis=1
    )
    target_kp = entry.keypoints
    zero_shape = shape or ShapeParams.zeros(model.shape_basis.rank)
    start = warm_start or entry.pose or PoseParams.identity(j)
    anchor_theta = start.joint_rotations.ravel()

    def objective(x):
        pose = pose_from_vector(x, j)
        jac = jacobians(model, zero_shape, pose)
        verts = jac.posed_vertices
        kps = jac.posed_keypoints

        kp_res = (kps - target_kp).ravel()
        e_joint = float(kp_res @ kp_res)
        grad = cfg.lambda_joint * 2.0 * (jac.keypoints_pose.T @ kp_res)

        evec = verts[edges[:, 0]] - verts[edges[:, 1]]
        elen = np.linalg.norm(evec, axis=1)
        safe = np.maximum(elen, 1e-12)
        diff = elen - target_len
        e_edge = float(diff @ diff)
        # d|e|/dv distributes +-unit_edge onto the endpoints.
        unit = evec / safe[:, None]
        dverts = np.zeros_like(verts)
        contrib = (2.0 * diff)[:, None] * unit
        np.add.at(dverts, edges[:, 0], contrib)
        np.add.at(dverts, edges[:, 1], -contrib)
        grad += cfg.lambda_edge * (jac.vertices_pose.T @ dverts.ravel())

        dtheta = x[: 3 * j] - anchor_theta
        prior = cfg.pose_prior * float(dtheta @ dtheta)
        grad[: 3 * j] += cfg.pose_prior * 2.0 * dtheta

        return cfg.lambda_edge * e_edge + cfg.lambda_joint * e_joint + prior, grad

    result = lbfgs_minimize(objective, pose_to_vector(start), cfg.optimizer)
    pose = pose_from_vector(result.x, j)
    verts, kps = forward(model, zero_shape, pose)
    e_edge = edge_energy(verts, entry.vertices, edges)
    e_joint = joint_energy(kps, target_kp)
    return PoseFitResult(
        pose,
        cfg.lambda_edge * e_edge + cfg.lambda_joint * e_joint,
        e_edge,
        e_joint,
        result.converged,
    )


# ---------------------------------------------------------------------------
# Subject template solving


@dataclass
class SubjectFit:
    template: np.ndarray  # (N, 3)
    joints: np.ndarray  # (J, 3)
    e_vert: float
    alternations: int


def _kabsch_rotation(source: np.ndarray, target: np.ndarray) -> np.ndarray:
    sc, tc = source.mean(axis=0), target.mean(axis=0)
    u, _, vt = np.linalg.svd((source - sc).T @ (target - tc))
    d = np.sign(np.linalg.det(vt.T @ u.T))
    return vt.T @ np.diag([1.0, 1.0, d]) @ u.T


def _kabsch(source: np.ndarray, target: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    q = _kabsch_rotation(source, target)
    return q, target.mean(axis=0) - q @ source.mean(axis=0)


def initial_pose_estimate(model: BoneModel, entry: RegisteredEntry) -> PoseParams:
    """Kinematic pose read off a registered mesh by per-bone Procrustes.

    The template-topology correspondence pins each bone's full rotation
    (twist included), which a keypoint-only fit cannot do; the result makes a
    gauge-consistent warm start for :func:`fit_pose`.
    """
    tpl = model.template
    parents = tpl.kinematic_tree
    j = tpl.num_joints
    vertex_joint = tpl.vertex_joint
    verts = np.asarray(entry.vertices, dtype=float)

    g_rot = _kabsch_rotation(tpl.vertices, verts)
    world = np.empty((j, 3, 3))
    for i in range(j):
        sel = vertex_joint == i
        if sel.sum() >= 3:
            world[i] = g_rot.T @ _kabsch_rotation(tpl.vertices[sel], verts[sel])
        else:
            world[i] = world[parents[i]] if i > 0 else np.eye(3)
    theta = np.empty((j, 3))
    theta[0] = rotation_to_axis_angle(world[0])
    for i in range(1, j):
        theta[i] = rotation_to_axis_angle(world[parents[i]].T @ world[i])
    # Global translation from the bone-averaged residual at the root frame.
    posed, _ = forward(
        model,
        ShapeParams.zeros(model.shape_basis.rank),
        PoseParams(theta, rotation_to_axis_angle(g_rot), np.zeros(3)),
    )
    g_t = (verts - posed).mean(axis=0)
    return PoseParams(theta, rotation_to_axis_angle(g_rot), g_t)


def _entry_transforms(model: BoneModel, poses: list) -> list:
    """Per entry: world joint rotations, global rotation/translation, and the
    joint-position sensitivity tensor C[i, r] = d q_i / d j_r (W-only)."""
    tpl = model.template
    parents = tpl.kinematic_tree
    j = tpl.num_joints
    out = []
    for pose in poses:
        rot = rodrigues_batch(pose.joint_rotations)
        world, _ = global_joint_transforms(tpl.rest_joints, parents, rot)
        c = np.zeros((j, j, 3, 3))
        c[0, 0] = np.eye(3)
        for i in range(1, j):
            p = parents[i]
            c[i] = c[p]
            c[i, i] += world[p]
            c[i, p] -= world[p]
        out.append(
            (world, rodrigues(pose.global_rotation), pose.global_translation, c)
        )
    return out


def _posed_joints(world, joints, parents):
    q = np.empty_like(joints)
    q[0] = joints[0]
    for i in range(1, parents.shape[0]):
        p = parents[i]
        q[i] = q[p] + world[p] @ (joints[i] - joints[p])
    return q


def solve_subject_template(
    model: BoneModel,
    entries: list,
    config: TrainingConfig | None = None,
    template_coupling: float = 0.0,
    coupling_anchor: np.ndarray | None = None,
) -> SubjectFit:
    """Recover one subject's rest template and joints from posed registrations.

    At fixed poses the skinned vertices are affine in (template, joints), so
    the solve alternates an exact per-vertex least-squares update of the
    template with an L-BFGS refinement of the joints until the vertex energy
    stalls. ``template_coupling`` optionally adds a weak quadratic pull of
    the template toward ``coupling_anchor`` (the training loop uses it to fix
    the per-bone gauge; the default 0 solves the plain vertex energy).
    """
    cfg = config or TrainingConfig()
    if not entries:
        raise ValueError("need at least one registered entry")
    for e in entries:
        if e.pose is None:
            raise ValueError("entries must carry fitted poses")
    tpl = model.template
    parents = tpl.kinematic_tree
    j = tpl.num_joints
    vertex_joint = tpl.vertex_joint
    poses = [e.pose for e in entries]
    transforms = _entry_transforms(model, poses)
    targets = [np.asarray(e.vertices, dtype=float) for e in entries]
    anchor_tpl = coupling_anchor if coupling_anchor is not None else tpl.vertices

    t_hat = tpl.vertices.copy()
    j_hat = tpl.rest_joints.copy()

    def vertex_energy(t_cur, j_cur):
        total = 0.0
        for (world, g_rot, g_t, _), b in zip(transforms, targets):
            q = _posed_joints(world, j_cur, parents)
            w = world[vertex_joint]
            posed = (
                np.einsum("nab,nb->na", w, t_cur - j_cur[vertex_joint])
                + q[vertex_joint]
            )
            res = posed @ g_rot.T + g_t - b
            total += float(np.sum(res**2))
        return total

    def solve_template(j_cur):
        acc = template_coupling * anchor_tpl
        for (world, g_rot, g_t, _), b in zip(transforms, targets):
            q = _posed_joints(world, j_cur, parents)
            m = np.einsum("ab,nbc->nac", g_rot, world[vertex_joint])
            c = (q[vertex_joint] - np.einsum("nab,nb->na", world[vertex_joint],
                                             j_cur[vertex_joint])) @ g_rot.T + g_t
            acc = acc + np.einsum("nab,na->nb", m, b - c)
        return acc / (len(entries) + template_coupling)

    regress_skeletal = model.joint_regressor.matrix[:j]

    def joint_objective(x, anchor):
        j_cur = x.reshape(j, 3)
        total = 0.0
        grad = np.zeros((j, 3))
        for (world, g_rot, g_t, c_tensor), b in zip(transforms, targets):
            q = _posed_joints(world, j_cur, parents)
            w = world[vertex_joint]
            posed = (
                np.einsum("nab,nb->na", w, t_hat - j_cur[vertex_joint])
                + q[vertex_joint]
            )
            res = posed @ g_rot.T + g_t - b
            total += float(np.sum(res**2))
            rho = np.zeros((j, 3))  # summed residuals per driving joint
            np.add.at(rho, vertex_joint, res @ g_rot)  # rotate back once
            for r in range(j):
                block = c_tensor[:, r].copy()
                block[r] -= world[r]
                grad[r] += 2.0 * np.einsum("iab,ia->b", block, rho)
        tether = j_cur - anchor
        total += cfg.joint_tether * float(np.sum(tether**2))
        grad += cfg.joint_tether * 2.0 * tether
        return total, grad.ravel()

    energy = vertex_energy(t_hat, j_hat)
    alternations = 0
    for _ in range(cfg.max_alternations):
        t_hat = solve_template(j_hat)
        anchor = regress_skeletal @ t_hat
        result = lbfgs_minimize(
            lambda x: joint_objective(x, anchor),
            j_hat.ravel(),
            replace(cfg.optimizer, max_iterations=100),
        )
        j_hat = result.x.reshape(j, 3)
        new_energy = vertex_energy(t_hat, j_hat)
        alternations += 1
        if energy - new_energy < cfg.alternation_rel_tol * max(energy, 1e-12):
            energy = new_energy
            break
        energy = new_energy
    return SubjectFit(t_hat, j_hat, energy, alternations)


def _subject_model(model: BoneModel, template_vertices: np.ndarray) -> BoneModel:
    """The model re-centered on one subject's solved rest template."""
    tpl = model.template
    rest_joints = (model.joint_regressor.matrix @ template_vertices)[: tpl.num_joints]
    template = BoneTemplate(
        template_vertices,
        tpl.faces,
        tpl.bone_label,
        tpl.blend_weights,
        tpl.kinematic_tree,
        rest_joints,
    )
    basis = ShapeBasis(
        template_vertices.ravel(), np.zeros((template_vertices.size, 0)), np.zeros(0)
    )
    return BoneModel(template, basis, model.joint_regressor, model.keypoint_joints)


def fit_subject(
    model: BoneModel,
    entries: list,
    config: TrainingConfig | None = None,
    rig: BoneModel | None = None,
) -> SubjectFit:
    """Pose-aware subject solve.

    Alternates the coupled template solve with pose refits against the
    subject's own evolving template, so the fitted poses stop inheriting the
    shared template's bone lengths; the template coupling keeps the per-bone
    gauge anchored to the shared template throughout. ``rig`` supplies the
    keypoint definitions used internally (defaults to the model's); passing
    the original rig avoids feeding a learned regressor's interpolation
    noise back into the pose energies.
    """
    cfg = config or TrainingConfig()
    rig = rig or model
    anchor = model.template.vertices

    def center_gauge(fit: SubjectFit) -> SubjectFit:
        # A rigid motion of (template, joints) compensated in every pose is
        # invisible to the vertex energy; normalize to the rigid placement
        # nearest the anchor template and push the motion into the poses.
        q, d = _kabsch(fit.template, anchor)
        old_root = fit.joints[0]
        new_template = fit.template @ q.T + d
        new_joints = fit.joints @ q.T + d
        c = new_joints[0] - old_root
        for entry in entries:
            theta = entry.pose.joint_rotations.copy()
            theta[0] = rotation_to_axis_angle(rodrigues(theta[0]) @ q.T)
            theta[1:] = theta[1:] @ q.T  # rotate axis-angle vectors
            g_rot = rodrigues(entry.pose.global_rotation)
            entry.pose = PoseParams(
                theta,
                entry.pose.global_rotation,
                entry.pose.global_translation - g_rot @ c,
            )
        return SubjectFit(new_template, new_joints, fit.e_vert, fit.alternations)

    # Keypoint-only fits against a template with the wrong bone lengths
    # rotate bones inconsistently across poses; the correspondence-based
    # estimate is gauge-consistent, so the first solve runs directly on it.
    for entry in entries:
        entry.pose = initial_pose_estimate(model, entry)
    fit = center_gauge(solve_subject_template(
        model, entries, cfg, cfg.template_coupling, coupling_anchor=anchor
    ))
    for _ in range(cfg.subject_refinements):
        subj = _subject_model(rig, fit.template)
        for entry in entries:
            entry.pose = fit_pose(subj, entry, cfg, warm_start=entry.pose).pose
        fit = center_gauge(solve_subject_template(
            subj, entries, cfg, cfg.template_coupling, coupling_anchor=anchor
        ))
    return fit


def subject_rest_keypoints(
    model: BoneModel, entries: list, fit: SubjectFit
) -> np.ndarray:
    """Rest-frame keypoints for one subject: solved skeletal joints plus
    annotated extras un-posed with the fitted transforms and averaged."""
    tpl = model.template
    parents = tpl.kinematic_tree
    j = tpl.num_joints
    k = model.num_keypoints
    carriers = model.keypoint_joints
    out = np.zeros((k, 3))
    out[:j] = fit.joints
    if k == j:
        return out
    transforms = _entry_transforms(model, [e.pose for e in entries])
    extras = np.zeros((k - j, 3))
    for (world, g_rot, g_t, _), entry in zip(transforms, entries):
        q = _posed_joints(world, fit.joints, parents)
        for idx in range(j, k):
            c = carriers[idx]
            local = g_rot.T @ (entry.keypoints[idx] - g_t) - q[c]
            extras[idx - j] += world[c].T @ local + fit.joints[c]
    out[j:] = extras / len(entries)
    return out


# ---------------------------------------------------------------------------
# Shape space and regressor


def build_shape_space(subject_templates: np.ndarray, shape_dims: int) -> ShapeBasis:
    """PCA shape space over per-subject rest templates.

    Components keep unit norm; the stored singular values are per-direction
    standard deviations so shape coefficients read in std-dev units.
    Truncates to min(M - 1, shape_dims) directions.
    """
    stacked = np.asarray(subject_templates, dtype=float)
    if stacked.ndim == 3:
        stacked = stacked.reshape(stacked.shape[0], -1)
    m = stacked.shape[0]
    if m < 1:
        raise ValueError("need at least one subject template")
    out = pca(stacked)
    r = min(m - 1, shape_dims)
    components = out.components[:, :r]
    sigmas = out.singular_values[:r] / np.sqrt(max(m - 1, 1))
    if r and sigmas[0] <= 1e-12:
        warnings.warn("shape space is degenerate (zero variance)", stacklevel=2)
    return ShapeBasis(out.mean, components, sigmas)


def build_joint_regressor(
    subject_templates: np.ndarray,
    subject_keypoints: np.ndarray,
    names: tuple,
    ridge_scale: float = 1e-6,
    support_size: int = 16,
) -> tuple[JointRegressor, float]:
    """Fit the vertices-to-keypoints regressor over all subjects.

    Each keypoint row is a ridge least-squares fit restricted to the
    ``support_size`` vertices nearest the keypoint (an unrestricted minimum-
    norm row interpolates the training templates but extrapolates wildly on
    anything else), with a sum-to-one anchor column so the subsequent row
    normalization (the affine-invariance contract) does not disturb the fit.
    Returns the regressor and its mean residual in mm.
    """
    templates = np.asarray(subject_templates, dtype=float)
    keypoints = np.asarray(subject_keypoints, dtype=float)
    if templates.ndim != 3 or keypoints.ndim != 3:
        raise ValueError("expected (M, N, 3) templates and (M, K, 3) keypoints")
    m, n, _ = templates.shape
    k = keypoints.shape[1]
    mean_template = templates.mean(axis=0)
    mean_keypoints = keypoints.mean(axis=0)
    design = np.concatenate([t.T for t in templates], axis=0)  # (3M, N)
    target = np.concatenate([kp.T for kp in keypoints], axis=0)  # (3M, K)
    anchor = np.sqrt(np.mean(design**2))
    support = min(support_size, n)

    rows = np.zeros((k, n))
    for row in range(k):
        dist = np.linalg.norm(mean_template - mean_keypoints[row], axis=1)
        order = np.argsort(dist)
        # Grow the support only when the local fit cannot explain the data
        # (keypoints are anatomical, so the local fit is the common case).
        for size in (support, min(4 * support, n), n):
            sel = order[:size]
            a_aug = np.vstack([design[:, sel], np.full((1, size), anchor)])
            y_aug = np.concatenate([target[:, row], [anchor]])
            ridge = ridge_scale * np.trace(a_aug.T @ a_aug) / size
            w = ridge_least_squares(a_aug, y_aug, ridge)
            # One refinement pass takes out most of the ridge shrinkage on
            # consistent systems while keeping its conditioning.
            w = w + ridge_least_squares(a_aug, y_aug - a_aug @ w, ridge)
            residual = np.linalg.norm(design[:, sel] @ w - target[:, row])
            if residual < 1e-7 * max(1.0, np.linalg.norm(target[:, row])) or size == n:
                break
        total = w.sum()
        if abs(total) < 1e-8:
            raise ValueError("regressor row sum vanishes; cannot normalize")
        rows[row, sel] = w / total
    regressor = JointRegressor(rows, names)
    residual = float(
        np.mean(
            [
                np.linalg.norm(rows @ t - kp, axis=1).mean()
                for t, kp in zip(templates, keypoints)
            ]
        )
    )
    return regressor, residual


# ---------------------------------------------------------------------------
# The flip-flop training loop


def train_model(
    scans: list,
    initial: BoneModel,
    config: TrainingConfig | None = None,
) -> TrainResult:
    """Alternate scan registration against the current model with parameter
    re-learning.

    The first round registers with the model downgraded to its bare template
    (no shape blending); later rounds use the freshly learned shape space.
    Emits per-iteration diagnostics (registration Hausdorff, pose and vertex
    energies).
    """
    cfg = config or TrainingConfig()
    if not scans:
        raise ValueError("no scans to train on")
    subject_ids = sorted({s.subject_id for s in scans})
    if len(subject_ids) < 1:
        raise ValueError("need at least one subject")
    model = initial
    diagnostics: list[IterationDiagnostics] = []
    subject_templates: dict = {}
    subject_keypoints: dict = {}
    entries: list[RegisteredEntry] = []

    for iteration in range(cfg.outer_iterations):
        use_shape = iteration > 0 and model.shape_basis.rank > 0

        # One shape per subject: letting every scan fit its own coefficients
        # would make the registered vertex correspondences drift between
        # poses of the same subject.
        subject_shape: dict = {}
        if use_shape:
            for sid in subject_ids:
                first = next(s for s in scans if s.subject_id == sid)
                coarse = coarse_register(
                    model,
                    first.keypoints,
                    use_shape=True,
                    optimizer=cfg.registration.coarse_optimizer,
                    pose_regularization=cfg.registration.pose_regularization,
                )
                subject_shape[sid] = coarse.shape

        entries = []
        hausdorffs = []
        for scan in scans:
            reg_cfg = replace(
                cfg.registration,
                use_shape=use_shape,
                lambda_reg=cfg.lambda_reg,
                fixed_shape=subject_shape.get(scan.subject_id),
            )
            reg = register_scan(model, scan, reg_cfg)
            if reg.skipped_bones:
                log.warning(
                    "scan %s/%s skipped bones %s",
                    scan.subject_id, scan.pose_id, reg.skipped_bones,
                )
            entries.append(
                RegisteredEntry(
                    scan.subject_id,
                    scan.pose_id,
                    reg.mesh.vertices,
                    scan.keypoints,
                    pose=reg.coarse.pose,
                    shape=reg.coarse.shape if use_shape else None,
                )
            )
            if reg.per_bone_hausdorff:
                hausdorffs.append(reg.mean_hausdorff)

        e_poses = []
        for entry in entries:
            fitres = fit_pose(
                model, entry, cfg, warm_start=entry.pose, shape=entry.shape
            )
            entry.pose = fitres.pose
            e_poses.append(fitres.energy)

        e_verts = []
        subject_templates = {}
        subject_keypoints = {}
        for sid in subject_ids:
            sub_entries = [e for e in entries if e.subject_id == sid]
            fit = fit_subject(model, sub_entries, cfg, rig=initial)
            subject_templates[sid] = fit.template
            subject_keypoints[sid] = subject_rest_keypoints(model, sub_entries, fit)
            e_verts.append(fit.e_vert)

        stacked_templates = np.stack([subject_templates[s] for s in subject_ids])
        stacked_keypoints = np.stack([subject_keypoints[s] for s in subject_ids])
        basis = build_shape_space(stacked_templates, cfg.shape_dims)
        regressor, reg_residual = build_joint_regressor(
            stacked_templates,
            stacked_keypoints,
            model.joint_regressor.names,
            cfg.regressor_ridge_scale,
        )
        mean_vertices = basis.mean_shape.reshape(-1, 3)
        tpl = model.template
        rest_joints = (regressor.matrix @ mean_vertices)[: tpl.num_joints]
        template = BoneTemplate(
            mean_vertices,
            tpl.faces,
            tpl.bone_label,
            tpl.blend_weights,
            tpl.kinematic_tree,
            rest_joints,
        )
        model = BoneModel(template, basis, regressor, model.keypoint_joints)

        diagnostics.append(
            IterationDiagnostics(
                iteration=iteration + 1,
                mean_hausdorff_mm=float(np.mean(hausdorffs)) if hausdorffs else float("nan"),
                mean_e_pose=float(np.mean(e_poses)),
                mean_e_vert=float(np.mean(e_verts)),
            )
        )
        log.info(
            "iteration %d: hausdorff %.3f mm, E_pose %.4g, E_vert %.4g, "
            "regressor residual %.3g mm",
            iteration + 1, diagnostics[-1].mean_hausdorff_mm,
            diagnostics[-1].mean_e_pose, diagnostics[-1].mean_e_vert, reg_residual,
        )

    return TrainResult(model, diagnostics, subject_templates, subject_keypoints, entries)
