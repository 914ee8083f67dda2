import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from handbones.model import (
    BoneModel,
    BoneTemplate,
    JointRegressor,
    PoseParams,
    ShapeBasis,
    ShapeParams,
    forward,
    jacobians,
    lbs,
    pose_from_vector,
    pose_to_vector,
    regress_joints,
    rodrigues,
    rodrigues_jacobian,
    shape_blend,
)

finite_angles = st.lists(
    st.floats(min_value=-3.0, max_value=3.0), min_size=3, max_size=3
)


def two_bone_model(rank=2, seed=0):
    """Tiny hand-rolled chain: bone 1 on [0,1]x, bone 2 on [1,2]x."""
    vertices = np.array(
        [
            [0.0, 0.0, 0.0],
            [0.5, 0.2, 0.0],
            [0.5, -0.2, 0.1],
            [1.0, 0.0, 0.0],
            [1.5, 0.2, 0.0],
            [1.5, -0.2, -0.1],
            [2.0, 0.0, 0.0],
        ]
    )
    faces = np.array([[0, 1, 2], [3, 4, 5], [4, 5, 6]])
    bone_label = np.array([1, 1, 1, 2, 2, 2, 2])
    weights = np.zeros((7, 2))
    weights[:3, 0] = 1.0
    weights[3:, 1] = 1.0
    parents = np.array([-1, 0])
    rest_joints = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
    template = BoneTemplate(vertices, faces, bone_label, weights, parents, rest_joints)

    regressor = np.zeros((3, 7))
    regressor[0, 0] = 1.0  # joint 0 at vertex 0
    regressor[1, 3] = 1.0  # joint 1 at vertex 3
    regressor[2, 6] = 1.0  # tip at vertex 6
    names = ("root", "knuckle", "tip")

    rng = np.random.default_rng(seed)
    if rank:
        components = np.linalg.qr(rng.normal(size=(21, rank)))[0]
        svals = np.array([2.0, 1.0])[:rank]
    else:
        components = np.zeros((21, 0))
        svals = np.zeros(0)
    basis = ShapeBasis(vertices.ravel(), components, svals)
    return BoneModel(
        template, basis, JointRegressor(regressor, names), np.array([0, 1, 1])
    )


class TestRodrigues:
    def test_zero_is_identity(self):
        assert np.array_equal(rodrigues(np.zeros(3)), np.eye(3))

    def test_quarter_turn(self):
        r = rodrigues(np.array([0.0, 0.0, np.pi / 2]))
        assert np.allclose(r @ [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], atol=1e-12)

    def test_full_turn_is_identity(self):
        r = rodrigues(np.array([0.0, 0.0, 2 * np.pi]))
        assert np.allclose(r, np.eye(3), atol=1e-9)

    @settings(max_examples=50, deadline=None)
    @given(finite_angles)
    def test_special_orthogonal(self, w):
        r = rodrigues(np.array(w))
        assert np.allclose(r.T @ r, np.eye(3), atol=1e-10)
        assert np.isclose(np.linalg.det(r), 1.0, atol=1e-10)

    def test_continuous_at_zero(self):
        tiny = rodrigues(np.full(3, 1e-12))
        assert np.allclose(tiny, np.eye(3), atol=1e-11)

    @settings(max_examples=30, deadline=None)
    @given(finite_angles)
    def test_jacobian_matches_finite_differences(self, w):
        w = np.array(w)
        jac = rodrigues_jacobian(w)
        step = 1e-6
        for k in range(3):
            e = np.zeros(3)
            e[k] = step
            fd = (rodrigues(w + e) - rodrigues(w - e)) / (2 * step)
            assert np.allclose(jac[k], fd, atol=1e-6)


class TestShapeBlend:
    def test_zero_coefficients(self):
        model = two_bone_model()
        out = shape_blend(model.shape_basis, ShapeParams.zeros(2))
        assert np.array_equal(out, np.zeros(21))

    def test_unit_vector_selects_scaled_column(self):
        model = two_bone_model()
        basis = model.shape_basis
        out = shape_blend(basis, ShapeParams(np.array([1.0, 0.0])))
        assert np.allclose(out, basis.components[:, 0] * basis.singular_values[0])

    def test_linearity_against_matmul_oracle(self):
        model = two_bone_model()
        basis = model.shape_basis
        a, b = 0.7, -1.3
        out = shape_blend(basis, ShapeParams(np.array([a, b])))
        oracle = (basis.components * basis.singular_values) @ np.array([a, b])
        assert np.allclose(out, oracle, atol=1e-12)

    def test_dimension_mismatch(self):
        model = two_bone_model()
        with pytest.raises(ValueError):
            shape_blend(model.shape_basis, ShapeParams(np.zeros(5)))


class TestRegressJoints:
    def test_one_hot_selection(self):
        model = two_bone_model()
        out = regress_joints(model.template.vertices, model.joint_regressor)
        assert np.array_equal(out[0], model.template.vertices[0])
        assert np.array_equal(out[2], model.template.vertices[6])

    def test_translation_equivariance(self):
        rng = np.random.default_rng(3)
        mat = rng.random((4, 9))
        mat /= mat.sum(axis=1, keepdims=True)
        reg = JointRegressor(mat, tuple("abcd"))
        verts = rng.normal(size=(9, 3))
        t = np.array([10.0, 0.0, 0.0])
        assert np.allclose(
            regress_joints(verts + t, reg), regress_joints(verts, reg) + t, atol=1e-12
        )

    def test_matches_dense_multiply_oracle(self):
        rng = np.random.default_rng(4)
        mat = rng.random((5, 12))
        mat /= mat.sum(axis=1, keepdims=True)
        verts = rng.normal(size=(12, 3))
        oracle = np.array(
            [[sum(mat[k, n] * verts[n, a] for n in range(12)) for a in range(3)]
             for k in range(5)]
        )
        out = regress_joints(verts, JointRegressor(mat, tuple("abcde")))
        assert np.allclose(out, oracle, atol=1e-12)


class TestLbs:
    def test_rest_pose_identity(self):
        model = two_bone_model()
        tpl = model.template
        out = lbs(
            tpl.vertices,
            tpl.rest_joints,
            PoseParams.identity(2),
            tpl.blend_weights,
            tpl.kinematic_tree,
        )
        assert np.array_equal(out, tpl.vertices)

    def test_single_bone_root_rotation(self):
        verts = np.array([[1.0, 0.0, 0.0]])
        joints = np.array([[0.0, 0.0, 0.0]])
        pose = PoseParams(np.array([[0.0, 0.0, np.pi / 2]]), np.zeros(3), np.zeros(3))
        out = lbs(verts, joints, pose, np.ones((1, 1)), np.array([-1]))
        assert np.allclose(out, [[0.0, 1.0, 0.0]], atol=1e-12)

    def test_two_bone_chain_oracle(self):
        verts = np.array([[2.0, 0.0, 0.0]])
        joints = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
        weights = np.array([[0.0, 1.0]])
        pose = PoseParams(
            np.array([[0.0, 0.0, 0.0], [0.0, 0.0, np.pi / 2]]), np.zeros(3), np.zeros(3)
        )
        out = lbs(verts, joints, pose, weights, np.array([-1, 0]))
        assert np.allclose(out, [[1.0, 1.0, 0.0]], atol=1e-12)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(min_value=0, max_value=2**31))
    def test_per_bone_rigidity(self, seed):
        rng = np.random.default_rng(seed)
        model = two_bone_model()
        tpl = model.template
        pose = PoseParams(
            rng.uniform(-1.0, 1.0, size=(2, 3)),
            rng.uniform(-1.0, 1.0, size=3),
            rng.uniform(-5.0, 5.0, size=3),
        )
        shape = ShapeParams(rng.normal(size=2))
        shaped = tpl.vertices + shape_blend(model.shape_basis, shape).reshape(-1, 3)
        posed, _ = forward(model, shape, pose)
        for label in (1, 2):
            sel = tpl.bone_label == label
            a, b = shaped[sel], posed[sel]
            da = np.linalg.norm(a[:, None] - a[None, :], axis=2)
            db = np.linalg.norm(b[:, None] - b[None, :], axis=2)
            assert np.allclose(da, db, rtol=1e-9, atol=1e-9)


class TestForward:
    def test_canonical_pose(self):
        model = two_bone_model()
        verts, keypoints = forward(model, ShapeParams.zeros(2), PoseParams.identity(2))
        assert np.allclose(verts, model.template.vertices, atol=1e-12)
        oracle_kp = model.joint_regressor.matrix @ model.template.vertices
        assert np.allclose(keypoints, oracle_kp, atol=1e-12)

    def test_global_translation_equivariance(self):
        model = two_bone_model()
        t = np.array([4.0, -1.0, 2.5])
        base_v, base_k = forward(model, ShapeParams.zeros(2), PoseParams.identity(2))
        pose = PoseParams(np.zeros((2, 3)), np.zeros(3), t)
        verts, keypoints = forward(model, ShapeParams.zeros(2), pose)
        assert np.allclose(verts, base_v + t, atol=1e-12)
        assert np.allclose(keypoints, base_k + t, atol=1e-12)

    def test_rigid_equivariance(self):
        rng = np.random.default_rng(9)
        model = two_bone_model()
        shape = ShapeParams(rng.normal(size=2))
        theta = rng.uniform(-0.8, 0.8, size=(2, 3))
        base = PoseParams(theta, np.zeros(3), np.zeros(3))
        w, t = rng.uniform(-1, 1, size=3), rng.uniform(-5, 5, size=3)
        moved = PoseParams(theta, w, t)
        r = rodrigues(w)
        base_v, base_k = forward(model, shape, base)
        verts, keypoints = forward(model, shape, moved)
        assert np.allclose(verts, base_v @ r.T + t, atol=1e-10)
        assert np.allclose(keypoints, base_k @ r.T + t, atol=1e-10)

    def test_matches_scripted_composition_oracle(self):
        rng = np.random.default_rng(11)
        model = two_bone_model()
        tpl = model.template
        beta = rng.normal(size=2)
        theta = rng.uniform(-0.9, 0.9, size=(2, 3))
        g_rot = rng.uniform(-0.5, 0.5, size=3)
        g_t = rng.uniform(-3, 3, size=3)

        # Step-by-step oracle: blend, regress, compose rigid transforms by hand.
        basis = model.shape_basis
        shaped = tpl.vertices + (
            (basis.components * basis.singular_values) @ beta
        ).reshape(-1, 3)
        restkp = model.joint_regressor.matrix @ shaped
        j0, j1 = restkp[0], restkp[1]
        r0, r1 = rodrigues(theta[0]), rodrigues(theta[1])
        w0, q0 = r0, j0
        w1, q1 = r0 @ r1, q0 + w0 @ (j1 - j0)
        expected = np.empty_like(shaped)
        for n in range(7):
            w, q, j = (w0, q0, j0) if tpl.bone_label[n] == 1 else (w1, q1, j1)
            expected[n] = w @ (shaped[n] - j) + q
        tip = w1 @ (restkp[2] - j1) + q1
        expected_kp = np.stack([q0, q1, tip])
        rg = rodrigues(g_rot)
        expected = expected @ rg.T + g_t
        expected_kp = expected_kp @ rg.T + g_t

        pose = PoseParams(theta, g_rot, g_t)
        verts, keypoints = forward(model, ShapeParams(beta), pose)
        assert np.allclose(verts, expected, atol=1e-10)
        assert np.allclose(keypoints, expected_kp, atol=1e-10)

    def test_affine_in_shape_at_rest(self):
        model = two_bone_model()
        pose = PoseParams.identity(2)
        rng = np.random.default_rng(13)
        b1, b2 = rng.normal(size=2), rng.normal(size=2)
        v0, _ = forward(model, ShapeParams.zeros(2), pose)
        v1, _ = forward(model, ShapeParams(b1), pose)
        v2, _ = forward(model, ShapeParams(b2), pose)
        v12, _ = forward(model, ShapeParams(b1 + b2), pose)
        assert np.allclose(v12 - v0, (v1 - v0) + (v2 - v0), atol=1e-9)


def _forward_of_vector(model, vec):
    j = model.num_joints
    r = model.shape_basis.rank
    pose = pose_from_vector(vec[: 3 * j + 6], j)
    shape = ShapeParams(vec[3 * j + 6 :]) if r else ShapeParams.zeros(0)
    return forward(model, shape, pose)


class TestJacobians:
    def test_translation_columns_are_identity(self):
        model = two_bone_model()
        jac = jacobians(model, ShapeParams.zeros(2), PoseParams.identity(2))
        j = model.num_joints
        block = jac.vertices_pose[:, 3 * j + 3 :].reshape(-1, 3, 3)
        assert np.allclose(block, np.eye(3)[None], atol=1e-12)
        kblock = jac.keypoints_pose[:, 3 * j + 3 :].reshape(-1, 3, 3)
        assert np.allclose(kblock, np.eye(3)[None], atol=1e-12)

    def test_shape_jacobian_at_rest_equals_scaled_basis(self):
        model = two_bone_model()
        jac = jacobians(model, ShapeParams.zeros(2), PoseParams.identity(2))
        scaled = model.shape_basis.components * model.shape_basis.singular_values
        assert np.allclose(jac.vertices_shape, scaled, atol=1e-12)

    @pytest.mark.parametrize("seed", range(6))
    def test_matches_central_differences(self, seed):
        rng = np.random.default_rng(seed)
        model = two_bone_model()
        j, r = model.num_joints, model.shape_basis.rank
        pose = PoseParams(
            rng.uniform(-0.9, 0.9, size=(j, 3)),
            rng.uniform(-0.9, 0.9, size=3),
            rng.uniform(-5, 5, size=3),
        )
        shape = ShapeParams(rng.normal(size=r))
        jac = jacobians(model, shape, pose)
        analytic = np.hstack(
            [
                np.vstack([jac.vertices_pose, jac.keypoints_pose]),
                np.vstack([jac.vertices_shape, jac.keypoints_shape]),
            ]
        )
        x0 = np.concatenate([pose_to_vector(pose), shape.coefficients])
        step = 1e-5
        for col in range(x0.size):
            e = np.zeros_like(x0)
            e[col] = step
            vp, kp = _forward_of_vector(model, x0 + e)
            vm, km = _forward_of_vector(model, x0 - e)
            fd = np.concatenate([(vp - vm).ravel(), (kp - km).ravel()]) / (2 * step)
            # 1e-4 relative with a 1e-7 absolute floor.
            tol = np.maximum(1e-4 * np.abs(fd), 1e-7)
            assert np.all(np.abs(analytic[:, col] - fd) <= tol)

    def test_keypoints_only_matches_full(self):
        model = two_bone_model()
        rng = np.random.default_rng(21)
        pose = PoseParams(rng.uniform(-0.5, 0.5, (2, 3)), rng.uniform(-0.5, 0.5, 3),
                          rng.uniform(-2, 2, 3))
        shape = ShapeParams(rng.normal(size=2))
        full = jacobians(model, shape, pose)
        kp = jacobians(model, shape, pose, keypoints_only=True)
        assert np.allclose(full.keypoints_pose, kp.keypoints_pose, atol=1e-12)
        assert np.allclose(full.keypoints_shape, kp.keypoints_shape, atol=1e-12)


class TestValidation:
    def test_soft_weights_rejected(self):
        model = two_bone_model()
        tpl = model.template
        weights = tpl.blend_weights.copy()
        weights[0] = [0.5, 0.5]
        with pytest.raises(ValueError):
            BoneTemplate(
                tpl.vertices, tpl.faces, tpl.bone_label, weights,
                tpl.kinematic_tree, tpl.rest_joints,
            )

    def test_cyclic_tree_rejected(self):
        model = two_bone_model()
        tpl = model.template
        with pytest.raises(ValueError):
            BoneTemplate(
                tpl.vertices, tpl.faces, tpl.bone_label, tpl.blend_weights,
                np.array([-1, 1]), tpl.rest_joints,
            )

    def test_non_orthonormal_basis_rejected(self):
        with pytest.raises(ValueError):
            ShapeBasis(np.zeros(6), np.ones((6, 2)), np.array([1.0, 0.5]))

    def test_regressor_rows_must_sum_to_one(self):
        with pytest.raises(ValueError):
            JointRegressor(np.full((2, 4), 0.5), ("a", "b"))

    def test_pose_vector_roundtrip(self):
        rng = np.random.default_rng(17)
        pose = PoseParams(rng.normal(size=(3, 3)), rng.normal(size=3), rng.normal(size=3))
        back = pose_from_vector(pose_to_vector(pose), 3)
        assert np.array_equal(back.joint_rotations, pose.joint_rotations)
        assert np.array_equal(back.global_translation, pose.global_translation)
