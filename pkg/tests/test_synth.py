import numpy as np
import pytest

from handbones.geometry import is_watertight, submesh
from handbones.model import PoseParams, ShapeParams, forward
from handbones.numerics import pca
from handbones.synth import (
    SynthSpec,
    initial_model,
    make_template,
    plant_model,
    sample_dataset,
    sample_pose,
    sample_scan,
)


class TestMakeTemplate:
    def test_single_bone(self):
        spec = SynthSpec(fingers=0, segments=1)
        tpl = make_template(spec)
        assert tpl.num_bones == 1
        assert tpl.num_joints == 1
        mesh_ok = is_watertight(
            submesh(
                __import__("handbones.geometry", fromlist=["TriangleMesh"]).TriangleMesh(
                    tpl.vertices, tpl.faces, tpl.bone_label
                ),
                1,
            )[0]
        )
        assert mesh_ok

    def test_five_chains_of_four(self):
        spec = SynthSpec(fingers=5, segments=4)
        tpl = make_template(spec)
        assert tpl.num_bones == 1 + 20
        parents = tpl.kinematic_tree
        roots_children = np.flatnonzero(parents == 0)
        assert roots_children.size == 5
        # walk each chain: 4 joints deep
        for base in roots_children:
            depth, j = 1, base
            while True:
                nxt = np.flatnonzero(parents == j)
                if nxt.size == 0:
                    break
                assert nxt.size == 1
                j = nxt[0]
                depth += 1
            assert depth == 4

    def test_watertight_per_bone(self):
        spec = SynthSpec(fingers=2, segments=2)
        tpl = make_template(spec)
        from handbones.geometry import TriangleMesh

        mesh = TriangleMesh(tpl.vertices, tpl.faces, tpl.bone_label)
        for label in range(1, tpl.num_bones + 1):
            sub, _ = submesh(mesh, label)
            assert is_watertight(sub)

    def test_deterministic(self):
        spec = SynthSpec(fingers=3, segments=2, seed=11)
        a = make_template(spec)
        b = make_template(spec)
        assert np.array_equal(a.vertices, b.vertices)
        assert np.array_equal(a.faces, b.faces)


class TestPlantModel:
    def test_rank_zero_has_empty_basis(self):
        model = plant_model(SynthSpec(fingers=2, segments=1, shape_rank=0))
        assert model.shape_basis.rank == 0

    def test_regressor_rows_sum_to_one(self):
        model = plant_model(SynthSpec(fingers=2, segments=2))
        assert np.allclose(model.joint_regressor.matrix.sum(axis=1), 1.0, atol=1e-9)

    def test_joints_consistent_with_regressor(self):
        model = plant_model(SynthSpec(fingers=3, segments=2))
        regressed = model.joint_regressor.matrix @ model.template.vertices
        assert np.allclose(
            regressed[: model.num_joints], model.template.rest_joints, atol=1e-9
        )

    def test_planted_directions_recoverable_by_pca(self):
        spec = SynthSpec(fingers=2, segments=2, shape_rank=3, seed=5)
        model = plant_model(spec)
        rng = np.random.default_rng(0)
        basis = model.shape_basis
        samples = []
        for _ in range(200):
            beta = rng.normal(size=3)
            samples.append(basis.mean_shape + basis.components @ (basis.singular_values * beta))
        out = pca(np.stack(samples))
        cross = basis.components.T @ out.components[:, :3]
        angles = np.degrees(np.arccos(np.clip(np.linalg.svd(cross, compute_uv=False), -1, 1)))
        assert np.max(angles) < 2.0

    def test_initial_model_shares_topology(self):
        spec = SynthSpec(fingers=2, segments=2)
        init = initial_model(spec)
        truth = plant_model(spec)
        assert np.array_equal(init.template.faces, truth.template.faces)
        assert init.shape_basis.rank == 0


class TestSampleScan:
    def test_zero_noise_matches_forward(self):
        spec = SynthSpec(fingers=2, segments=2, shape_rank=2)
        model = plant_model(spec)
        rng = np.random.default_rng(1)
        pose = sample_pose(model, rng)
        shape = ShapeParams(rng.normal(size=2))
        scan = sample_scan(model, shape, pose, rng)
        verts, keypoints = forward(model, shape, pose)
        assert np.array_equal(scan.keypoints, keypoints)
        assert np.array_equal(scan.bone_surface.vertices, verts)

    def test_per_bone_meshes_partition_vertices(self):
        spec = SynthSpec(fingers=3, segments=2)
        model = plant_model(spec)
        rng = np.random.default_rng(2)
        scan = sample_scan(model, ShapeParams.zeros(3), sample_pose(model, rng), rng)
        total = sum(m.num_vertices for m in scan.per_bone_surfaces.values())
        assert total == model.num_vertices

    def test_keypoint_noise_statistics(self):
        spec = SynthSpec(fingers=1, segments=1)
        model = plant_model(spec)
        pose = PoseParams.identity(model.num_joints)
        _, clean = forward(model, ShapeParams.zeros(3), pose)
        rng = np.random.default_rng(3)
        draws = []
        for _ in range(2500):
            scan = sample_scan(
                model, ShapeParams.zeros(3), pose, rng, keypoint_noise_mm=1.0
            )
            draws.append(scan.keypoints - clean)
        draws = np.concatenate(draws, axis=0)  # (2500*K, 3)
        std = draws.std(axis=0)
        assert np.all(np.abs(std - 1.0) < 0.05)

    def test_optional_volume(self):
        spec = SynthSpec(fingers=1, segments=1)
        model = plant_model(spec)
        rng = np.random.default_rng(4)
        scan = sample_scan(
            model, ShapeParams.zeros(3), PoseParams.identity(model.num_joints),
            rng, with_volume=True, volume_spacing_mm=2.0,
        )
        assert scan.labels_volume is not None
        assert scan.labels_volume.labels.max() == model.template.num_bones


class TestSampleDataset:
    def test_determinism(self):
        spec = SynthSpec(fingers=2, segments=1, subject_count=2, poses_per_subject=2)
        a = sample_dataset(spec)
        b = sample_dataset(spec)
        assert np.array_equal(a.truth.template.vertices, b.truth.template.vertices)
        for s1, s2 in zip(a.scans, b.scans):
            assert np.array_equal(s1.bone_surface.vertices, s2.bone_surface.vertices)
            assert np.array_equal(s1.keypoints, s2.keypoints)

    def test_subject_coefficients_centered(self):
        spec = SynthSpec(fingers=2, segments=1, subject_count=6, poses_per_subject=1)
        data = sample_dataset(spec)
        betas = np.stack(list(data.true_shapes.values()))
        assert np.allclose(betas.mean(axis=0), 0.0, atol=1e-12)

    def test_scan_counts(self):
        spec = SynthSpec(fingers=1, segments=2, subject_count=3, poses_per_subject=2)
        data = sample_dataset(spec)
        assert len(data.scans) == 6
        assert set(data.true_shapes) == {"s000", "s001", "s002"}
