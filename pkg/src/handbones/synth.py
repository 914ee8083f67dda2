"""Synthetic ground-truth generator.

Builds hand-like bone templates out of capsules (one bone per finger segment
plus a root), plants a low-rank shape space of smooth per-bone deformations
on top, and samples annotated scans from the planted model. Every algorithm
in the pipeline is tested against data generated here, so generation is
deterministic given the spec seed.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable

import numpy as np

from .geometry import TriangleMesh, submesh, voxelize_semantic
from .model import (
    BoneModel,
    BoneTemplate,
    JointRegressor,
    PoseParams,
    ShapeBasis,
    ShapeParams,
    forward,
)
from .registration import AnnotatedScan

__all__ = [
    "SynthSpec",
    "SynthDataset",
    "make_template",
    "plant_model",
    "initial_model",
    "sample_pose",
    "sample_scan",
    "sample_dataset",
]


@dataclass(frozen=True)
class SynthSpec:
    """Knobs for the generated dataset.

    ``shape_sigma_mm`` and ``mean_offset_mm`` are per-vertex RMS amplitudes;
    planted singular values decay geometrically from the first mode.
    """

    fingers: int = 3
    segments: int = 2
    vertices_per_bone: int = 50
    subject_count: int = 10
    poses_per_subject: int = 5
    shape_rank: int = 3
    keypoint_noise_mm: float = 0.0
    surface_noise_mm: float = 0.0
    seed: int = 0
    pose_magnitude_rad: float = 0.5
    global_rotation_rad: float = 0.3
    global_translation_mm: float = 15.0
    shape_sigma_mm: float = 3.0
    shape_sigma_decay: float = 0.8
    mean_offset_mm: float = 1.5
    with_volumes: bool = False
    volume_spacing_mm: float = 1.5

    def __post_init__(self):
        if min(self.segments, self.subject_count,
               self.poses_per_subject, self.vertices_per_bone) < 1:
            raise ValueError("counts must be positive")
        if self.fingers < 0:
            raise ValueError("fingers must be non-negative (0 keeps just the root)")
        if self.shape_rank < 0 or self.keypoint_noise_mm < 0 or self.surface_noise_mm < 0:
            raise ValueError("rank and noise levels must be non-negative")

    @property
    def bone_count(self) -> int:
        return 1 + self.fingers * self.segments


# Geometry constants for the procedural hand (mm).
_ROOT_LENGTH = 24.0
_ROOT_RADIUS = 5.0
_SEGMENT_LENGTH = 18.0
_SEGMENT_TAPER = 0.85
_SEGMENT_RADIUS = 2.6
_RADIUS_TAPER = 0.9
_FINGER_SPREAD = 9.0
_PALM_GAP = 2.0


def _capsule(x0: float, x1: float, radius: float, center_yz: np.ndarray,
             n_theta: int, n_cap: int, n_ax: int):
    """Closed capsule along +x spanning exactly [x0, x1] on its axis.

    The cylinder occupies [x0 + r, x1 - r]; cap apexes land exactly at x0 and
    x1 so joints can be read off single vertices.
    """
    if x1 - x0 <= 2 * radius:
        raise ValueError("capsule too short for its radius")
    cy, cz = center_yz
    angles = 2.0 * np.pi * np.arange(n_theta) / n_theta
    ring_dirs = np.stack([np.cos(angles), np.sin(angles)], axis=1)

    rows = []
    for i in range(1, n_cap + 1):  # back cap, apex toward x0
        phi = 0.5 * np.pi * i / n_cap
        rows.append((x0 + radius * (1 - np.cos(phi)), radius * np.sin(phi)))
    for j in range(1, n_ax + 1):  # interior cylinder rings
        t = j / (n_ax + 1)
        rows.append((x0 + radius + (x1 - x0 - 2 * radius) * t, radius))
    for i in range(n_cap, 0, -1):  # front cap
        phi = 0.5 * np.pi * i / n_cap
        rows.append((x1 - radius * (1 - np.cos(phi)), radius * np.sin(phi)))

    verts = [np.array([x0, cy, cz])]
    for x, rho in rows:
        ring = np.column_stack(
            [np.full(n_theta, x), cy + rho * ring_dirs[:, 0], cz + rho * ring_dirs[:, 1]]
        )
        verts.append(ring)
    verts.append(np.array([[x1, cy, cz]]))
    vertices = np.vstack([verts[0][None, :], *verts[1:]])

    faces = []
    back_apex = 0
    front_apex = vertices.shape[0] - 1
    ring_start = lambda r: 1 + r * n_theta
    n_rings = len(rows)
    for t in range(n_theta):
        nxt = (t + 1) % n_theta
        faces.append([back_apex, ring_start(0) + nxt, ring_start(0) + t])
    for r in range(n_rings - 1):
        a, b = ring_start(r), ring_start(r + 1)
        for t in range(n_theta):
            nxt = (t + 1) % n_theta
            faces.append([a + t, a + nxt, b + t])
            faces.append([a + nxt, b + nxt, b + t])
    last = ring_start(n_rings - 1)
    for t in range(n_theta):
        nxt = (t + 1) % n_theta
        faces.append([front_apex, last + t, last + nxt])
    return vertices, np.array(faces, dtype=np.int64), back_apex, front_apex


def _resolution(vertices_per_bone: int) -> tuple[int, int, int]:
    n_theta = 8
    rings = max(5, round((vertices_per_bone - 2) / n_theta))
    n_cap = max(2, rings // 4)
    n_ax = max(1, rings - 2 * n_cap)
    return n_theta, n_cap, n_ax


@dataclass(frozen=True)
class _Skeleton:
    """Construction byproducts needed to plant regressors and shape modes."""

    template: BoneTemplate
    joint_apex_vertex: np.ndarray  # (J,) vertex index sitting at each joint
    tip_apex_vertex: np.ndarray  # (F,) fingertip apex vertices
    wrist_vertex: int
    keypoint_names: tuple
    keypoint_joints: np.ndarray


def _build_skeleton(spec: SynthSpec) -> _Skeleton:
    n_theta, n_cap, n_ax = _resolution(spec.vertices_per_bone)
    all_verts: list[np.ndarray] = []
    all_faces: list[np.ndarray] = []
    labels: list[np.ndarray] = []
    joint_apex: list[int] = []
    tip_apex: list[int] = []
    parents: list[int] = [-1]
    rest_joints: list[np.ndarray] = [np.zeros(3)]

    def add_capsule(x0, x1, radius, yz, label):
        verts, faces, back, front = _capsule(x0, x1, radius, yz, n_theta, n_cap, n_ax)
        offset = sum(v.shape[0] for v in all_verts)
        all_verts.append(verts)
        all_faces.append(faces + offset)
        labels.append(np.full(verts.shape[0], label, dtype=np.int64))
        return back + offset, front + offset

    # Root bone behind the root joint; its back apex is the wrist keypoint.
    back, front = add_capsule(-_ROOT_LENGTH, 0.0, _ROOT_RADIUS, np.zeros(2), 1)
    wrist_vertex = back
    joint_apex.append(front)  # root joint at the origin apex

    bone = 2
    joint_index = 0
    for f in range(spec.fingers):
        y = (f - (spec.fingers - 1) / 2.0) * _FINGER_SPREAD
        x = _PALM_GAP
        parent = 0
        for s in range(spec.segments):
            length = _SEGMENT_LENGTH * _SEGMENT_TAPER**s
            radius = _SEGMENT_RADIUS * _RADIUS_TAPER**s
            back, front = add_capsule(x, x + length, radius, np.array([y, 0.0]), bone)
            joint_index += 1
            parents.append(parent)
            rest_joints.append(np.array([x, y, 0.0]))
            joint_apex.append(back)
            parent = joint_index
            x += length
            bone += 1
        tip_apex.append(front)

    vertices = np.vstack(all_verts)
    faces = np.vstack(all_faces)
    bone_label = np.concatenate(labels)
    num_joints = len(parents)
    weights = np.zeros((vertices.shape[0], num_joints))
    # Bone b is driven by joint b-1 (root bone by the root joint).
    weights[np.arange(vertices.shape[0]), bone_label - 1] = 1.0
    template = BoneTemplate(
        vertices, faces, bone_label, weights, np.array(parents), np.vstack(rest_joints)
    )

    names = ["joint_root"]
    for f in range(spec.fingers):
        for s in range(spec.segments):
            names.append(f"joint_f{f}s{s}")
    names += [f"tip_f{f}" for f in range(spec.fingers)]
    names.append("wrist")
    carriers = list(range(num_joints))
    for f in range(spec.fingers):
        carriers.append(1 + f * spec.segments + (spec.segments - 1))  # distal joint
    carriers.append(0)  # wrist rides the root
    return _Skeleton(
        template,
        np.array(joint_apex),
        np.array(tip_apex),
        wrist_vertex,
        tuple(names),
        np.array(carriers),
    )


def make_template(spec: SynthSpec) -> BoneTemplate:
    """Procedural capsule hand: watertight per-bone sub-meshes, one-hot
    weights, rest joints at segment starts."""
    return _build_skeleton(spec).template


def _apex_regressor(skeleton: _Skeleton) -> JointRegressor:
    n = skeleton.template.num_vertices
    rows = list(skeleton.joint_apex_vertex) + list(skeleton.tip_apex_vertex)
    rows.append(skeleton.wrist_vertex)
    matrix = np.zeros((len(rows), n))
    matrix[np.arange(len(rows)), rows] = 1.0
    return JointRegressor(matrix, skeleton.keypoint_names)


def _bone_affine_field(template: BoneTemplate, rng: np.random.Generator) -> np.ndarray:
    """One smooth displacement field: an independent small axis-aligned
    stretch (length, width, height) plus offset per bone.

    Rotation or shear components of a bone's rest frame are indistinguishable
    from constant counter-rotations in every pose, so planting them would
    make the ground truth unidentifiable from posed surfaces.
    """
    field = np.zeros_like(template.vertices)
    for label in range(1, template.num_bones + 1):
        sel = template.bone_label == label
        anchor = template.rest_joints[template.bone_joint(label)]
        h = np.diag(rng.normal(scale=0.05, size=3))
        o = rng.normal(scale=0.6, size=3)
        field[sel] = (template.vertices[sel] - anchor) @ h.T + o
    return field.ravel()


def _rigid_free(template: BoneTemplate, field: np.ndarray) -> np.ndarray:
    """Project the global rigid component (3 translations, 3 infinitesimal
    rotations about the centroid) out of a displacement field.

    A net rigid component of a rest-frame shape change is indistinguishable
    from a global pose change, so planted fields must not carry one.
    """
    verts = template.vertices
    centered = verts - verts.mean(axis=0)
    n = verts.shape[0]
    basis = []
    for k in range(3):
        t = np.zeros((n, 3))
        t[:, k] = 1.0
        basis.append(t.ravel())
    for k in range(3):
        e = np.zeros(3)
        e[k] = 1.0
        basis.append(np.cross(e, centered).ravel())
    q = np.linalg.qr(np.column_stack(basis))[0]
    return field - q @ (q.T @ field)


def plant_model(spec: SynthSpec) -> BoneModel:
    """Ground-truth model: offset mean, orthonormal smooth shape directions
    with geometrically decaying planted standard deviations."""
    skeleton = _build_skeleton(spec)
    template = skeleton.template
    n = template.num_vertices
    rng = np.random.default_rng([spec.seed, 101])

    mean_field = _rigid_free(template, _bone_affine_field(template, rng))
    rms = np.sqrt(np.mean(mean_field.reshape(-1, 3) ** 2) * 3.0)
    mean_vertices = template.vertices + (
        spec.mean_offset_mm * mean_field / max(rms, 1e-12)
    ).reshape(-1, 3)
    mean_template = BoneTemplate(
        mean_vertices,
        template.faces,
        template.bone_label,
        template.blend_weights,
        template.kinematic_tree,
        template.rest_joints,
    )

    if spec.shape_rank:
        raw = np.column_stack(
            [
                _rigid_free(template, _bone_affine_field(template, rng))
                for _ in range(spec.shape_rank)
            ]
        )
        components = np.linalg.qr(raw)[0]
        flip = np.sign(
            components[np.argmax(np.abs(components), axis=0),
                       np.arange(spec.shape_rank)]
        )
        components *= np.where(flip == 0, 1.0, flip)
        # sigma is a per-vertex RMS amplitude; component columns have unit
        # 2-norm, so scale by sqrt(N) to express it in vector norm.
        sigmas = (
            spec.shape_sigma_mm
            * np.sqrt(n)
            * spec.shape_sigma_decay ** np.arange(spec.shape_rank)
        )
    else:
        components = np.zeros((3 * n, 0))
        sigmas = np.zeros(0)
    basis = ShapeBasis(mean_vertices.ravel(), components, sigmas)

    regressor = _apex_regressor(skeleton)
    rest_joints = (regressor.matrix @ mean_vertices)[: template.num_joints]
    mean_template = BoneTemplate(
        mean_vertices,
        template.faces,
        template.bone_label,
        template.blend_weights,
        template.kinematic_tree,
        rest_joints,
    )
    return BoneModel(mean_template, basis, regressor, skeleton.keypoint_joints)


def initial_model(spec: SynthSpec) -> BoneModel:
    """The generic rigged template a training run starts from: base geometry,
    apex keypoint definitions, no shape space yet."""
    skeleton = _build_skeleton(spec)
    template = skeleton.template
    basis = ShapeBasis(
        template.vertices.ravel(),
        np.zeros((3 * template.num_vertices, 0)),
        np.zeros(0),
    )
    return BoneModel(template, basis, _apex_regressor(skeleton), skeleton.keypoint_joints)


def sample_pose(
    model: BoneModel,
    rng: np.random.Generator,
    magnitude: float = 0.5,
    global_rotation: float = 0.3,
    global_translation: float = 15.0,
) -> PoseParams:
    """Random plausible pose: per-joint rotations about axes perpendicular to
    the bone direction (no twist), root joint fixed, random global rigid."""
    j = model.num_joints
    theta = np.zeros((j, 3))
    for i in range(1, j):
        phi = rng.uniform(0, 2 * np.pi)
        axis = np.array([0.0, np.cos(phi), np.sin(phi)])
        theta[i] = rng.uniform(0.0, magnitude) * axis
    if global_rotation > 0:
        w = rng.normal(size=3)
        w /= np.linalg.norm(w)
        g_rot = rng.uniform(0.0, global_rotation) * w
    else:
        g_rot = np.zeros(3)
    g_t = rng.uniform(-global_translation, global_translation, size=3)
    return PoseParams(theta, g_rot, g_t)


def sample_scan(
    model: BoneModel,
    shape: ShapeParams,
    pose: PoseParams,
    rng: np.random.Generator,
    keypoint_noise_mm: float = 0.0,
    surface_noise_mm: float = 0.0,
    subject_id: str = "s000",
    pose_id: str = "p000",
    with_volume: bool = False,
    volume_spacing_mm: float = 1.5,
) -> AnnotatedScan:
    """Evaluate the forward model and package the result as an annotated scan."""
    verts, keypoints = forward(model, shape, pose)
    if surface_noise_mm > 0:
        verts = verts + rng.normal(scale=surface_noise_mm, size=verts.shape)
    if keypoint_noise_mm > 0:
        keypoints = keypoints + rng.normal(scale=keypoint_noise_mm, size=keypoints.shape)
    tpl = model.template
    surface = TriangleMesh(verts, tpl.faces, tpl.bone_label)
    per_bone = {}
    for label in range(1, tpl.num_bones + 1):
        sub, _ = submesh(surface, label)
        per_bone[label] = sub
    volume = None
    if with_volume:
        lo, hi = surface.bounding_box()
        spacing = np.full(3, volume_spacing_mm)
        margin = 3.0 * volume_spacing_mm
        origin = lo - margin
        dims = tuple(
            int(np.ceil((hi[a] - lo[a] + 2 * margin) / spacing[a])) + 1 for a in range(3)
        )
        volume = voxelize_semantic(surface, dims, spacing, origin)
    return AnnotatedScan(
        subject_id=subject_id,
        pose_id=pose_id,
        keypoints=keypoints,
        bone_surface=surface,
        per_bone_surfaces=per_bone,
        labels_volume=volume,
        keypoint_names=model.joint_regressor.names,
    )


@dataclass
class SynthDataset:
    spec: SynthSpec
    truth: BoneModel
    initial: BoneModel
    scans: list
    true_shapes: dict  # subject_id -> beta
    true_poses: dict  # (subject_id, pose_id) -> PoseParams

    @property
    def subject_templates(self) -> dict:
        """Planted per-subject rest templates (N, 3)."""
        out = {}
        basis = self.truth.shape_basis
        for sid, beta in self.true_shapes.items():
            shaped = basis.mean_shape + (
                basis.components @ (basis.singular_values * beta)
                if basis.rank
                else 0.0
            )
            out[sid] = shaped.reshape(-1, 3)
        return out


def sample_dataset(spec: SynthSpec) -> SynthDataset:
    """Deterministic dataset of subject x pose annotated scans.

    Subject coefficients are centered across the dataset so the planted mean
    template is exactly the population mean of the generated subjects.
    """
    truth = plant_model(spec)
    init = initial_model(spec)
    scans = []
    true_shapes = {}
    true_poses = {}
    subject_ids = [f"s{i:03d}" for i in range(spec.subject_count)]
    betas = np.stack(
        [
            np.random.default_rng([spec.seed, 7, i]).normal(size=spec.shape_rank)
            for i in range(spec.subject_count)
        ]
    )
    if spec.subject_count > 1 and spec.shape_rank:
        betas = betas - betas.mean(axis=0)
    for sid, beta in zip(subject_ids, betas):
        true_shapes[sid] = beta
    for i in range(spec.subject_count):
        sid = subject_ids[i]
        beta = true_shapes[sid]
        for j in range(spec.poses_per_subject):
            pid = f"p{j:03d}"
            rng_scan = np.random.default_rng([spec.seed, 13, i, j])
            pose = sample_pose(
                truth,
                rng_scan,
                magnitude=spec.pose_magnitude_rad,
                global_rotation=spec.global_rotation_rad,
                global_translation=spec.global_translation_mm,
            )
            scan = sample_scan(
                truth,
                ShapeParams(beta),
                pose,
                rng_scan,
                keypoint_noise_mm=spec.keypoint_noise_mm,
                surface_noise_mm=spec.surface_noise_mm,
                subject_id=sid,
                pose_id=pid,
                with_volume=spec.with_volumes,
                volume_spacing_mm=spec.volume_spacing_mm,
            )
            scans.append(scan)
            true_poses[(sid, pid)] = pose
    return SynthDataset(spec, truth, init, scans, true_shapes, true_poses)
