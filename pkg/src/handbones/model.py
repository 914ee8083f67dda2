"""Differentiable per-bone-rigid skeleton model.

A model is a triple: a labeled bone template mesh with a kinematic tree, a
low-rank orthonormal basis of shape displacements, and a linear regressor
mapping rest vertices to keypoints. Posing applies exactly one rigid
transform per bone (hard one-hot skinning weights), so intra-bone geometry is
preserved under any pose. All distances are millimetres, all angles radians.

Keypoint convention: the regressor produces K keypoints whose first J rows
are the skeletal joints in kinematic-tree order; the remaining rows (finger
tips, wrist, ...) carry no rotation of their own and are rigidly attached to
a carrier joint via ``BoneModel.keypoint_joints``.

Parameter-vector layout used by :func:`pose_to_vector` and the Jacobians:
``[theta_0 .. theta_{J-1} (axis-angle each), global rotation (3), global
translation (3)]``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

__all__ = [
    "BoneTemplate",
    "ShapeBasis",
    "JointRegressor",
    "PoseParams",
    "ShapeParams",
    "BoneModel",
    "Jacobians",
    "rodrigues",
    "rodrigues_batch",
    "rodrigues_jacobian",
    "rotation_to_axis_angle",
    "shape_blend",
    "regress_joints",
    "global_joint_transforms",
    "lbs",
    "forward",
    "jacobians",
    "pose_to_vector",
    "pose_from_vector",
]


def _frozen_array(values, dtype=float, shape_hint: str = "") -> np.ndarray:
    arr = np.array(values, dtype=dtype)
    arr.setflags(write=False)
    return arr


# ---------------------------------------------------------------------------
# Domain types


@dataclass(frozen=True)
class BoneTemplate:
    """Rest-pose bone mesh with per-vertex bone labels and a kinematic tree.

    vertices: (N, 3) mm. faces: (F, 3) vertex indices. bone_label: (N,) ints
    in 1..B. blend_weights: (N, J) one-hot rows. kinematic_tree: (J,) parent
    index per joint, root first with parent -1 and parents[i] < i.
    rest_joints: (J, 3) mm.
    """

    vertices: np.ndarray
    faces: np.ndarray
    bone_label: np.ndarray
    blend_weights: np.ndarray
    kinematic_tree: np.ndarray
    rest_joints: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "vertices", _frozen_array(self.vertices))
        object.__setattr__(self, "faces", _frozen_array(self.faces, dtype=np.int64))
        object.__setattr__(self, "bone_label", _frozen_array(self.bone_label, np.int64))
        object.__setattr__(self, "blend_weights", _frozen_array(self.blend_weights))
        object.__setattr__(
            self, "kinematic_tree", _frozen_array(self.kinematic_tree, np.int64)
        )
        object.__setattr__(self, "rest_joints", _frozen_array(self.rest_joints))
        self._validate()

    def _validate(self):
        n = self.vertices.shape[0]
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise ValueError("vertices must be (N, 3)")
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= n):
            raise ValueError("face index out of range")
        if self.bone_label.shape != (n,):
            raise ValueError("bone_label must be (N,)")
        b = int(self.bone_label.max(initial=0))
        if self.bone_label.min(initial=1) < 1:
            raise ValueError("bone labels must be in 1..B")
        if set(np.unique(self.bone_label)) != set(range(1, b + 1)):
            raise ValueError("bone labels must cover 1..B without gaps")
        j = self.kinematic_tree.shape[0]
        if self.kinematic_tree[0] != -1:
            raise ValueError("joint 0 must be the root (parent -1)")
        for i in range(1, j):
            if not 0 <= self.kinematic_tree[i] < i:
                raise ValueError("kinematic_tree must be topologically ordered")
        if self.rest_joints.shape != (j, 3):
            raise ValueError("rest_joints must be (J, 3)")
        w = self.blend_weights
        if w.shape != (n, j):
            raise ValueError("blend_weights must be (N, J)")
        if not (
            np.all(np.count_nonzero(w, axis=1) == 1)
            and np.allclose(w.max(axis=1), 1.0)
            and np.allclose(w.sum(axis=1), 1.0)
        ):
            raise ValueError("blend weights must be one-hot rows")
        # Each bone label must be driven by a single joint.
        joint_of_vertex = np.argmax(w, axis=1)
        for label in range(1, b + 1):
            joints = np.unique(joint_of_vertex[self.bone_label == label])
            if joints.size != 1:
                raise ValueError(f"bone {label} is driven by multiple joints")

    @property
    def num_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def num_joints(self) -> int:
        return self.kinematic_tree.shape[0]

    @property
    def num_bones(self) -> int:
        return int(self.bone_label.max())

    @property
    def vertex_joint(self) -> np.ndarray:
        """Driving joint per vertex (argmax of the one-hot weight row)."""
        return np.argmax(self.blend_weights, axis=1)

    def bone_joint(self, label: int) -> int:
        """The joint that drives bone ``label``."""
        return int(self.vertex_joint[self.bone_label == label][0])


@dataclass(frozen=True)
class ShapeBasis:
    """Low-rank linear shape space around a mean shape.

    mean_shape: (3N,) mm. components: (3N, R) orthonormal columns.
    singular_values: (R,) per-direction standard deviation in mm,
    non-increasing, so shape coefficients are in std-dev units.
    """

    mean_shape: np.ndarray
    components: np.ndarray
    singular_values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean_shape", _frozen_array(self.mean_shape))
        object.__setattr__(self, "components", _frozen_array(self.components))
        object.__setattr__(
            self, "singular_values", _frozen_array(self.singular_values)
        )
        d, r = self.components.shape
        if self.mean_shape.shape != (d,):
            raise ValueError("mean_shape length must match component rows")
        if self.singular_values.shape != (r,):
            raise ValueError("need one singular value per component")
        if r:
            gram = self.components.T @ self.components
            if not np.allclose(gram, np.eye(r), atol=1e-8):
                raise ValueError("components must be orthonormal")
            if np.any(self.singular_values < 0) or np.any(
                np.diff(self.singular_values) > 1e-12
            ):
                raise ValueError("singular values must be non-negative, non-increasing")

    @property
    def rank(self) -> int:
        return self.components.shape[1]


@dataclass(frozen=True)
class JointRegressor:
    """Linear map from rest vertices to K keypoints; rows sum to one."""

    matrix: np.ndarray
    names: tuple

    def __post_init__(self):
        object.__setattr__(self, "matrix", _frozen_array(self.matrix))
        object.__setattr__(self, "names", tuple(str(s) for s in self.names))
        if self.matrix.ndim != 2:
            raise ValueError("regressor matrix must be (K, N)")
        if len(self.names) != self.matrix.shape[0]:
            raise ValueError("need one name per keypoint row")
        rows = self.matrix.sum(axis=1)
        if self.matrix.shape[0] and not np.allclose(rows, 1.0, atol=1e-6):
            raise ValueError("regressor rows must sum to 1")

    @property
    def num_keypoints(self) -> int:
        return self.matrix.shape[0]


@dataclass(frozen=True)
class PoseParams:
    """Per-joint axis-angle rotations plus a global rigid transform."""

    joint_rotations: np.ndarray
    global_rotation: np.ndarray
    global_translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "joint_rotations", _frozen_array(self.joint_rotations))
        object.__setattr__(self, "global_rotation", _frozen_array(self.global_rotation))
        object.__setattr__(
            self, "global_translation", _frozen_array(self.global_translation)
        )
        if self.joint_rotations.ndim != 2 or self.joint_rotations.shape[1] != 3:
            raise ValueError("joint_rotations must be (J, 3)")
        if self.global_rotation.shape != (3,) or self.global_translation.shape != (3,):
            raise ValueError("global transform must be two 3-vectors")
        if not (
            np.all(np.isfinite(self.joint_rotations))
            and np.all(np.isfinite(self.global_rotation))
            and np.all(np.isfinite(self.global_translation))
        ):
            raise ValueError("pose parameters must be finite")

    @classmethod
    def identity(cls, num_joints: int) -> "PoseParams":
        return cls(np.zeros((num_joints, 3)), np.zeros(3), np.zeros(3))

    @property
    def num_joints(self) -> int:
        return self.joint_rotations.shape[0]


@dataclass(frozen=True)
class ShapeParams:
    """Shape coefficients in standard-deviation units of the shape space."""

    coefficients: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "coefficients", _frozen_array(self.coefficients))
        if self.coefficients.ndim != 1 or not np.all(np.isfinite(self.coefficients)):
            raise ValueError("shape coefficients must be a finite vector")

    @classmethod
    def zeros(cls, rank: int) -> "ShapeParams":
        return cls(np.zeros(rank))


@dataclass(frozen=True)
class BoneModel:
    """Template + shape basis + keypoint regressor, dimensionally consistent.

    keypoint_joints: (K,) carrier joint per keypoint. The first J keypoints
    are the skeletal joints themselves (keypoint_joints[:J] == 0..J-1).
    """

    template: BoneTemplate
    shape_basis: ShapeBasis
    joint_regressor: JointRegressor
    keypoint_joints: np.ndarray

    def __post_init__(self):
        object.__setattr__(
            self, "keypoint_joints", _frozen_array(self.keypoint_joints, np.int64)
        )
        n = self.template.num_vertices
        j = self.template.num_joints
        k = self.joint_regressor.num_keypoints
        if self.shape_basis.mean_shape.shape != (3 * n,):
            raise ValueError("shape basis size does not match template")
        if self.joint_regressor.matrix.shape[1] != n:
            raise ValueError("regressor columns do not match vertex count")
        if k < j:
            raise ValueError("need at least one keypoint per skeletal joint")
        if self.keypoint_joints.shape != (k,):
            raise ValueError("keypoint_joints must be (K,)")
        if not np.array_equal(self.keypoint_joints[:j], np.arange(j)):
            raise ValueError("first J keypoints must be the skeletal joints in order")
        if self.keypoint_joints.min() < 0 or self.keypoint_joints.max() >= j:
            raise ValueError("keypoint carrier joint out of range")

    @property
    def num_vertices(self) -> int:
        return self.template.num_vertices

    @property
    def num_joints(self) -> int:
        return self.template.num_joints

    @property
    def num_keypoints(self) -> int:
        return self.joint_regressor.num_keypoints


# ---------------------------------------------------------------------------
# Rotations


def _skew(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rodrigues(axis_angle: np.ndarray) -> np.ndarray:
    """Rotation matrix of an axis-angle vector, continuous at zero.

    Uses the sinc form R = I + a K + b K^2 with a = sin(t)/t and
    b = (1 - cos(t))/t^2, both evaluated stably for all magnitudes.
    """
    w = np.asarray(axis_angle, dtype=float)
    theta = np.linalg.norm(w)
    k = _skew(w)
    a = np.sinc(theta / np.pi)
    half = np.sinc(theta / (2.0 * np.pi))
    b = 0.5 * half * half
    return np.eye(3) + a * k + b * (k @ k)


def rodrigues_batch(axis_angles: np.ndarray) -> np.ndarray:
    """(J, 3) axis-angle stack to (J, 3, 3) rotation matrices."""
    w = np.asarray(axis_angles, dtype=float)
    theta = np.linalg.norm(w, axis=1)
    k = _skew_batch(w)
    a = np.sinc(theta / np.pi)
    half = np.sinc(theta / (2.0 * np.pi))
    b = 0.5 * half * half
    return (
        np.eye(3)[None]
        + a[:, None, None] * k
        + b[:, None, None] * np.einsum("jab,jbc->jac", k, k)
    )


def rotation_to_axis_angle(r: np.ndarray) -> np.ndarray:
    """Inverse of :func:`rodrigues`; stable near 0 and pi."""
    r = np.asarray(r, dtype=float)
    cos = np.clip((np.trace(r) - 1.0) / 2.0, -1.0, 1.0)
    angle = np.arccos(cos)
    vec = 0.5 * np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    if angle < 1e-8:
        return vec
    if angle > np.pi - 1e-5:
        # Near pi the skew part vanishes; recover the axis from R + I.
        m = (r + np.eye(3)) / 2.0
        axis = np.sqrt(np.clip(np.diag(m), 0.0, None))
        k = int(np.argmax(axis))
        if axis[k] > 0:
            axis = m[:, k] / axis[k]
            axis /= np.linalg.norm(axis)
        if vec @ axis < 0:
            axis = -axis
        return angle * axis
    return angle * vec / np.sin(angle)


def rodrigues_jacobian(axis_angle: np.ndarray) -> np.ndarray:
    """Derivative tensor D with D[k] = dR/d(axis_angle[k]), shape (3, 3, 3).

    Closed form away from zero; second-order Taylor branch below 1e-4 rad
    where the closed form loses precision to cancellation.
    """
    return rodrigues_jacobian_batch(np.asarray(axis_angle, dtype=float)[None])[0]


def _skew_batch(v: np.ndarray) -> np.ndarray:
    out = np.zeros(v.shape[:-1] + (3, 3))
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    out[..., 0, 1], out[..., 0, 2] = -z, y
    out[..., 1, 0], out[..., 1, 2] = z, -x
    out[..., 2, 0], out[..., 2, 1] = -y, x
    return out


def rodrigues_jacobian_batch(axis_angles: np.ndarray) -> np.ndarray:
    """(J, 3) axis-angle stack to (J, 3, 3, 3) derivative tensors."""
    w = np.asarray(axis_angles, dtype=float)
    j = w.shape[0]
    theta = np.linalg.norm(w, axis=1)
    k = _skew_batch(w)
    eye_skew = _skew_batch(np.eye(3))  # (3, 3, 3)
    out = np.empty((j, 3, 3, 3))

    small = theta < 1e-4
    if small.any():
        ks = k[small]
        out[small] = eye_skew[None] + 0.5 * (
            np.einsum("iab,nbc->niac", eye_skew, ks)
            + np.einsum("nab,ibc->niac", ks, eye_skew)
        )
    big = ~small
    if big.any():
        wb = w[big]
        kb = k[big]
        tb = theta[big]
        a = np.sinc(tb / np.pi)
        half = np.sinc(tb / (2.0 * np.pi))
        b = 0.5 * half * half
        r = (
            np.eye(3)[None]
            + a[:, None, None] * kb
            + b[:, None, None] * np.einsum("nab,nbc->nac", kb, kb)
        )
        # d R / d w_i = ((w_i [w]x + [w x ((I - R) e_i)]x) / |w|^2) R
        imr = np.eye(3)[None] - r  # (n, 3, 3); column i is (I - R) e_i
        cross = np.cross(wb[:, None, :], imr.transpose(0, 2, 1))  # (n, 3, 3)
        term = wb[:, :, None, None] * kb[:, None, :, :] + _skew_batch(cross)
        out[big] = np.einsum(
            "niab,nbc->niac", term / (tb**2)[:, None, None, None], r
        )
    return out


# ---------------------------------------------------------------------------
# Forward model


def shape_blend(basis: ShapeBasis, shape: ShapeParams) -> np.ndarray:
    """Displacement field (3N,) for shape coefficients in std-dev units."""
    beta = shape.coefficients
    if beta.shape[0] != basis.rank:
        raise ValueError(
            f"shape has {beta.shape[0]} coefficients, basis rank is {basis.rank}"
        )
    if basis.rank == 0:
        return np.zeros_like(basis.mean_shape)
    return basis.components @ (basis.singular_values * beta)


def regress_joints(vertices: np.ndarray, regressor: JointRegressor) -> np.ndarray:
    """Keypoint positions (K, 3) as row-stochastic combinations of vertices."""
    vertices = np.asarray(vertices, dtype=float)
    if vertices.shape != (regressor.matrix.shape[1], 3):
        raise ValueError(
            f"expected {regressor.matrix.shape[1]} vertices, got {vertices.shape}"
        )
    return regressor.matrix @ vertices


def global_joint_transforms(
    rest_joints: np.ndarray, parents: np.ndarray, rotations: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Compose local joint rotations root-to-leaf.

    Returns world rotations (J, 3, 3) and posed joint positions (J, 3) before
    the global rigid transform.
    """
    j = parents.shape[0]
    world_rot = np.empty((j, 3, 3))
    posed = np.empty((j, 3))
    world_rot[0] = rotations[0]
    posed[0] = rest_joints[0]
    for i in range(1, j):
        p = parents[i]
        world_rot[i] = world_rot[p] @ rotations[i]
        posed[i] = posed[p] + world_rot[p] @ (rest_joints[i] - rest_joints[p])
    return world_rot, posed


def lbs(
    rest_vertices: np.ndarray,
    rest_joints: np.ndarray,
    pose: PoseParams,
    weights: np.ndarray,
    parents: np.ndarray,
) -> np.ndarray:
    """Linear blend skinning followed by the global rigid transform.

    Each joint contributes the rigid motion that carries its rest frame to
    its posed frame; vertex motions are the weight-blended combination. With
    one-hot weights every bone moves rigidly.
    """
    rest_vertices = np.asarray(rest_vertices, dtype=float)
    rest_joints = np.asarray(rest_joints, dtype=float)
    weights = np.asarray(weights, dtype=float)
    parents = np.asarray(parents, dtype=np.int64)
    j = parents.shape[0]
    if pose.num_joints != j or rest_joints.shape != (j, 3):
        raise ValueError("pose / rest joints / tree sizes disagree")
    if weights.shape != (rest_vertices.shape[0], j):
        raise ValueError("weights must be (N, J)")
    if not np.allclose(weights.sum(axis=1), 1.0, atol=1e-9):
        raise ValueError("weight rows must sum to 1")

    rotations = rodrigues_batch(pose.joint_rotations)
    world_rot, posed_joints = global_joint_transforms(rest_joints, parents, rotations)
    # Per-joint rigid image of every vertex, then blend.
    shifts = posed_joints - np.einsum("jab,jb->ja", world_rot, rest_joints)
    per_joint = (
        np.einsum("jab,nb->jna", world_rot, rest_vertices) + shifts[:, None, :]
    )
    blended = np.einsum("nj,jna->na", weights, per_joint)
    g_rot = rodrigues(pose.global_rotation)
    return blended @ g_rot.T + pose.global_translation


def forward(
    model: BoneModel, shape: ShapeParams, pose: PoseParams
) -> tuple[np.ndarray, np.ndarray]:
    """Posed vertices (N, 3) and posed keypoints (K, 3).

    Shape the template, regress rest keypoints (the first J are the skinning
    joints), run LBS, and carry each extra keypoint with its carrier joint's
    rigid transform. There are no pose-dependent blend shapes.
    """
    tpl = model.template
    j = tpl.num_joints
    shaped = tpl.vertices + shape_blend(model.shape_basis, shape).reshape(-1, 3)
    rest_keypoints = regress_joints(shaped, model.joint_regressor)
    rest_joints = rest_keypoints[:j]
    parents = tpl.kinematic_tree

    rotations = rodrigues_batch(pose.joint_rotations)
    world_rot, posed_joints = global_joint_transforms(rest_joints, parents, rotations)
    shifts = posed_joints - np.einsum("jab,jb->ja", world_rot, rest_joints)
    per_joint = np.einsum("jab,nb->jna", world_rot, shaped) + shifts[:, None, :]
    blended = np.einsum("nj,jna->na", tpl.blend_weights, per_joint)

    carrier = model.keypoint_joints
    keypoints = (
        np.einsum("kab,kb->ka", world_rot[carrier], rest_keypoints) + shifts[carrier]
    )

    g_rot = rodrigues(pose.global_rotation)
    verts_out = blended @ g_rot.T + pose.global_translation
    keypoints_out = keypoints @ g_rot.T + pose.global_translation
    return verts_out, keypoints_out


# ---------------------------------------------------------------------------
# Analytic Jacobians


@dataclass(frozen=True)
class Jacobians:
    """Derivatives of the forward outputs, rows in (point, xyz) C-order.

    Pose columns follow the :func:`pose_to_vector` layout (3J joint
    axis-angles, then global rotation, then global translation); shape
    columns follow the coefficient order. The forward outputs evaluated at
    the same point ride along so optimizer objectives need one call only
    (``posed_vertices`` is None for keypoints-only evaluations).
    """

    vertices_pose: np.ndarray
    keypoints_pose: np.ndarray
    vertices_shape: np.ndarray
    keypoints_shape: np.ndarray
    posed_vertices: Optional[np.ndarray] = None
    posed_keypoints: Optional[np.ndarray] = None


def pose_to_vector(pose: PoseParams) -> np.ndarray:
    return np.concatenate(
        [pose.joint_rotations.ravel(), pose.global_rotation, pose.global_translation]
    )


def pose_from_vector(vec: np.ndarray, num_joints: int) -> PoseParams:
    vec = np.asarray(vec, dtype=float).ravel()
    if vec.shape[0] != 3 * num_joints + 6:
        raise ValueError(f"pose vector must have {3 * num_joints + 6} entries")
    return PoseParams(
        vec[: 3 * num_joints].reshape(num_joints, 3),
        vec[3 * num_joints : 3 * num_joints + 3],
        vec[3 * num_joints + 3 :],
    )


def _ancestor_mask(parents: np.ndarray) -> np.ndarray:
    """mask[m, i] is True when joint m is an ancestor of i or i itself."""
    j = parents.shape[0]
    mask = np.eye(j, dtype=bool)
    for i in range(1, j):
        mask[:, i] |= mask[:, parents[i]]
    return mask


def jacobians(
    model: BoneModel,
    shape: ShapeParams,
    pose: PoseParams,
    keypoints_only: bool = False,
) -> Jacobians:
    """Analytic derivatives of :func:`forward` w.r.t. pose and shape.

    An infinitesimal change of joint m's axis-angle spins every point carried
    by a descendant joint about m's posed position; the generator matrices
    come from the closed-form rotation derivative. Shape derivatives chain
    through the shaped template, the regressed joints, and the kinematic
    recursion. ``keypoints_only`` skips the (large) vertex blocks.
    """
    tpl = model.template
    n, j, k = model.num_vertices, model.num_joints, model.num_keypoints
    r = model.shape_basis.rank
    parents = tpl.kinematic_tree
    carrier = model.keypoint_joints
    n_pose = 3 * j + 6

    shaped = tpl.vertices + shape_blend(model.shape_basis, shape).reshape(-1, 3)
    rest_keypoints = regress_joints(shaped, model.joint_regressor)
    rest_joints = rest_keypoints[:j]
    rotations = rodrigues_batch(pose.joint_rotations)
    world_rot, posed_joints = global_joint_transforms(rest_joints, parents, rotations)
    shifts = posed_joints - np.einsum("jab,jb->ja", world_rot, rest_joints)
    per_joint = np.einsum("jab,nb->jna", world_rot, shaped) + shifts[:, None, :]
    weights = tpl.blend_weights
    blended = np.einsum("nj,jna->na", weights, per_joint)
    kp_pre = (
        np.einsum("kab,kb->ka", world_rot[carrier], rest_keypoints) + shifts[carrier]
    )
    g_rot = rodrigues(pose.global_rotation)
    dg_rot = rodrigues_jacobian(pose.global_rotation)

    anc = _ancestor_mask(parents)
    drot = rodrigues_jacobian_batch(pose.joint_rotations)

    dv_pose = None if keypoints_only else np.zeros((n, 3, n_pose))
    dk_pose = np.zeros((k, 3, n_pose))

    for m in range(j):
        parent_rot = world_rot[parents[m]] if m > 0 else np.eye(3)
        if not keypoints_only:
            masked_w = weights * anc[m][None, :]
            affected = np.einsum("nj,jna->na", masked_w, per_joint)
            strength = masked_w.sum(axis=1)
        kp_affected = anc[m][carrier]
        for axis in range(3):
            omega = parent_rot @ drot[m][axis] @ world_rot[m].T
            col = 3 * m + axis
            if not keypoints_only:
                dv_pose[:, :, col] = (
                    affected - strength[:, None] * posed_joints[m]
                ) @ omega.T
            dk_pose[kp_affected, :, col] = (
                kp_pre[kp_affected] - posed_joints[m]
            ) @ omega.T

    # Global rotation and translation columns.
    for axis in range(3):
        if not keypoints_only:
            dv_pose[:, :, 3 * j + axis] = blended @ dg_rot[axis].T
        dk_pose[:, :, 3 * j + axis] = kp_pre @ dg_rot[axis].T
    # Joint columns were computed pre-global; rotate them into world frame.
    if not keypoints_only:
        dv_pose[:, :, : 3 * j] = np.einsum(
            "ab,nbp->nap", g_rot, dv_pose[:, :, : 3 * j]
        )
        dv_pose[:, :, 3 * j + 3 :] = np.eye(3)[None, :, :]
    dk_pose[:, :, : 3 * j] = np.einsum("ab,kbp->kap", g_rot, dk_pose[:, :, : 3 * j])
    dk_pose[:, :, 3 * j + 3 :] = np.eye(3)[None, :, :]

    # Shape derivatives.
    if r:
        scaled = model.shape_basis.components * model.shape_basis.singular_values
        d_shaped = scaled.reshape(n, 3, r)
        d_restkp = np.einsum("kn,nar->kar", model.joint_regressor.matrix, d_shaped)
        d_restj = d_restkp[:j]
        d_posedj = np.empty((j, 3, r))
        d_posedj[0] = d_restj[0]
        for i in range(1, j):
            p = parents[i]
            d_posedj[i] = d_posedj[p] + np.einsum(
                "ab,br->ar", world_rot[p], d_restj[i] - d_restj[p]
            )
        d_shift = d_posedj - np.einsum("jab,jbr->jar", world_rot, d_restj)
        if keypoints_only:
            dv_shape = np.zeros((0, r))
        else:
            dv = np.einsum("nj,jab,nbr->nar", weights, world_rot, d_shaped)
            dv += np.einsum("nj,jar->nar", weights, d_shift)
            dv = np.einsum("ab,nbr->nar", g_rot, dv)
            dv_shape = dv.reshape(3 * n, r)
        dkp = (
            np.einsum("kab,kbr->kar", world_rot[carrier], d_restkp)
            + d_shift[carrier]
        )
        dk_shape = np.einsum("ab,kbr->kar", g_rot, dkp).reshape(3 * k, r)
    else:
        dv_shape = np.zeros((0 if keypoints_only else 3 * n, 0))
        dk_shape = np.zeros((3 * k, 0))

    verts_out = None if keypoints_only else blended @ g_rot.T + pose.global_translation
    kp_out = kp_pre @ g_rot.T + pose.global_translation
    return Jacobians(
        vertices_pose=(
            np.zeros((0, n_pose)) if keypoints_only else dv_pose.reshape(3 * n, n_pose)
        ),
        keypoints_pose=dk_pose.reshape(3 * k, n_pose),
        vertices_shape=dv_shape,
        keypoints_shape=dk_shape,
        posed_vertices=verts_out,
        posed_keypoints=kp_out,
    )
