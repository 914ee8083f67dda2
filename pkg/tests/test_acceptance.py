"""Acceptance gate: every package-level contract at its stated tolerance.

Each test prints one PASS line with the measured numbers (run with -s to
see them). The end-to-end recovery fixture is shared by the criteria that
need a trained model.
"""
import time

import numpy as np
import pytest

from handbones import io as hio
from handbones.geometry import LabeledVolume, TriangleMesh, extract_edges
from handbones.metrics import (
    eval_compactness,
    eval_generalization,
    loss_bce,
    loss_combined,
    loss_dice,
    loss_joints,
    loss_parameters,
    metric_dice,
    metric_hausdorff,
    metric_pck,
)
from handbones.model import (
    PoseParams,
    ShapeParams,
    forward,
    jacobians,
    pose_from_vector,
    pose_to_vector,
    shape_blend,
)
from handbones.numerics import pca
from handbones.registration import (
    RegistrationConfig,
    apply_ed,
    build_deformation_graph,
    coarse_register,
    fine_register,
)
from handbones.synth import SynthSpec, plant_model, sample_dataset, sample_pose
from handbones.training import TrainingConfig, train_model


@pytest.fixture(scope="module")
def small_model():
    return plant_model(SynthSpec(fingers=2, segments=2, shape_rank=2, seed=1))


@pytest.fixture(scope="module")
def hand_model():
    return plant_model(SynthSpec(fingers=3, segments=2, shape_rank=3, seed=2))


@pytest.fixture(scope="module")
def trained_pipeline():
    """Criterion 6 workload: 10 subjects x 5 poses, rank-3 planted space."""
    spec = SynthSpec(
        fingers=3, segments=2, subject_count=10, poses_per_subject=5,
        shape_rank=3, seed=11,
    )
    data = sample_dataset(spec)
    t0 = time.time()
    result = train_model(
        data.scans, data.initial, TrainingConfig(outer_iterations=3, shape_dims=3)
    )
    elapsed = time.time() - t0
    return data, result, elapsed


def _report(name, detail):
    print(f"\nPASS {name}: {detail}")


def test_criterion_1_rest_pose_identity(hand_model):
    t0 = time.time()
    verts, keypoints = forward(
        hand_model,
        ShapeParams.zeros(hand_model.shape_basis.rank),
        PoseParams.identity(hand_model.num_joints),
    )
    err = np.max(np.abs(verts - hand_model.template.vertices))
    elapsed = time.time() - t0
    assert err <= 1e-12
    assert elapsed < 1.0
    _report("criterion 1 (rest-pose identity)",
            f"max deviation {err:.2e} mm in {elapsed:.3f}s")


def test_criterion_2_per_bone_rigidity(hand_model):
    t0 = time.time()
    tpl = hand_model.template
    edges = extract_edges(TriangleMesh(tpl.vertices, tpl.faces))
    same_bone = tpl.bone_label[edges[:, 0]] == tpl.bone_label[edges[:, 1]]
    edges = edges[same_bone]
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        shape = ShapeParams(rng.normal(size=hand_model.shape_basis.rank))
        pose = PoseParams(
            rng.uniform(-1.0, 1.0, size=(hand_model.num_joints, 3)),
            rng.uniform(-1.0, 1.0, size=3),
            rng.uniform(-20, 20, size=3),
        )
        shaped = tpl.vertices + shape_blend(hand_model.shape_basis, shape).reshape(-1, 3)
        posed, _ = forward(hand_model, shape, pose)
        ref = np.linalg.norm(shaped[edges[:, 0]] - shaped[edges[:, 1]], axis=1)
        cur = np.linalg.norm(posed[edges[:, 0]] - posed[edges[:, 1]], axis=1)
        worst = max(worst, float(np.max(np.abs(cur - ref) / ref)))
    elapsed = time.time() - t0
    assert worst < 1e-9
    assert elapsed < 10.0
    _report("criterion 2 (per-bone rigidity)",
            f"worst relative edge-length change {worst:.2e} over 100 poses "
            f"in {elapsed:.1f}s")


def test_criterion_3_gradient_suite(small_model):
    t0 = time.time()
    model = small_model
    j, rank = model.num_joints, model.shape_basis.rank
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(20):
        pose = PoseParams(
            rng.uniform(-0.8, 0.8, size=(j, 3)),
            rng.uniform(-0.8, 0.8, size=3),
            rng.uniform(-10, 10, size=3),
        )
        shape = ShapeParams(rng.normal(size=rank))
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

            def fwd(x):
                p = pose_from_vector(x[: 3 * j + 6], j)
                s = ShapeParams(x[3 * j + 6 :])
                return forward(model, s, p)

            vp, kp = fwd(x0 + e)
            vm, km = fwd(x0 - e)
            fd = np.concatenate([(vp - vm).ravel(), (kp - km).ravel()]) / (2 * step)
            gap = np.abs(analytic[:, col] - fd)
            tol = np.maximum(1e-4 * np.abs(fd), 1e-7)
            assert np.all(gap <= tol)
            scale = np.maximum(np.abs(fd), 1e-3)
            worst = max(worst, float(np.max(gap / scale)))
    elapsed = time.time() - t0
    assert elapsed < 60.0
    _report("criterion 3 (gradient suite)",
            f"all entries within 1e-4 relative (floor 1e-7); worst scaled "
            f"mismatch {worst:.2e}; 20 configs in {elapsed:.1f}s")


def test_criterion_4_coarse_registration_oracle(hand_model):
    t0 = time.time()
    model = hand_model
    hits = 0
    worst = 0.0
    for seed in range(50):
        rng = np.random.default_rng(100 + seed)
        pose = sample_pose(model, rng, magnitude=0.5)
        _, target = forward(model, ShapeParams.zeros(model.shape_basis.rank), pose)
        result = coarse_register(model, target)
        _, fitted = forward(model, result.shape, result.pose)
        err = float(np.max(np.linalg.norm(fitted - target, axis=1)))
        worst = max(worst, err)
        hits += err < 1e-3
    elapsed = time.time() - t0
    assert hits >= 48  # >= 95% of 50
    assert elapsed < 120.0
    _report("criterion 4 (coarse registration oracle)",
            f"{hits}/50 trials within 1e-3 mm (worst {worst:.2e} mm) "
            f"in {elapsed:.1f}s")


def test_criterion_5_fine_registration_oracle():
    from handbones.geometry import point_set_distances
    from handbones.registration import AnnotatedScan

    t0 = time.time()
    spec = SynthSpec(fingers=0, segments=1, seed=0)
    tpl = plant_model(spec).template
    mesh = TriangleMesh(tpl.vertices, tpl.faces, tpl.bone_label)
    lo, hi = mesh.vertices.min(0), mesh.vertices.max(0)
    radius = RegistrationConfig().node_radius_factor * np.linalg.norm(hi - lo)

    def sym_hausdorff(a, b):
        d_ab, d_ba = point_set_distances(a, b)
        return max(d_ab.max(), d_ba.max())

    worst_ratio = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        warp = build_deformation_graph(mesh, radius)
        center = warp.nodes.mean(axis=0)
        scale = max(np.linalg.norm(warp.nodes - center, axis=1).max(), 1e-9)
        local = (warp.nodes - center) / scale
        t = rng.uniform(-1, 1, size=3) + local @ rng.normal(scale=0.8, size=(3, 3)).T
        t *= 2.0 / np.linalg.norm(t, axis=1).max()  # node translations <= 2 mm
        warp.translations[:] = t
        warped = TriangleMesh(apply_ed(warp, mesh.vertices), mesh.faces, mesh.bone_label)
        scan = AnnotatedScan("s", "p", np.zeros((2, 3)), warped, {1: warped})
        before = sym_hausdorff(mesh.vertices, warped.vertices)
        result = fine_register(mesh, scan, 1, 5.0)
        after = sym_hausdorff(result.mesh.vertices, warped.vertices)
        ratio = after / before
        worst_ratio = max(worst_ratio, ratio)
        assert ratio < 0.25
    elapsed = time.time() - t0
    assert elapsed < 180.0
    _report("criterion 5 (fine registration oracle)",
            f"worst post/pre Hausdorff ratio {worst_ratio:.3f} over 20 trials "
            f"in {elapsed:.1f}s")


def test_criterion_6_planted_model_recovery(trained_pipeline):
    data, result, elapsed = trained_pipeline
    truth, learned = data.truth, result.model

    t_err = np.linalg.norm(
        learned.template.vertices - truth.template.vertices, axis=1
    ).mean()
    sv = np.linalg.svd(
        truth.shape_basis.components.T @ learned.shape_basis.components[:, :3],
        compute_uv=False,
    )
    angle = float(np.degrees(np.arccos(np.clip(sv, -1.0, 1.0))).max())

    stacked_t = np.stack([result.subject_templates[s] for s in sorted(result.subject_templates)])
    stacked_k = np.stack([result.subject_keypoints[s] for s in sorted(result.subject_keypoints)])
    residual = float(
        np.mean(
            [
                np.linalg.norm(learned.joint_regressor.matrix @ t - k, axis=1).mean()
                for t, k in zip(stacked_t, stacked_k)
            ]
        )
    )

    assert t_err < 0.5
    assert angle < 2.0
    assert residual < 0.5
    assert elapsed < 600.0
    _report("criterion 6 (planted-model recovery)",
            f"mean template error {t_err:.3f} mm, subspace angle {angle:.2f} deg, "
            f"regressor residual {residual:.3f} mm, pipeline {elapsed:.0f}s")


def test_criterion_7_curve_contracts(trained_pipeline):
    data, result, _ = trained_pipeline
    basis = result.model.shape_basis
    compact = eval_compactness(basis)
    assert np.all(np.diff(compact.y) >= -1e-15)
    assert abs(compact.y[-1] - 1.0) <= 1e-9
    at3 = compact.y[min(2, compact.y.size - 1)]
    assert at3 >= 0.999

    stacked = np.stack(
        [result.subject_templates[s] for s in sorted(result.subject_templates)]
    )
    flat = stacked.reshape(stacked.shape[0], -1)
    m = flat.shape[0]
    worst_gap = -np.inf
    for fold in range(m):  # per-fold: full-rank error <= rank-1 error
        held = flat[fold]
        rest = np.delete(flat, fold, axis=0)
        out = pca(rest)
        centered = held - out.mean

        def recon_err(r):
            comp = out.components[:, :r]
            recon = out.mean + comp @ (comp.T @ centered)
            return np.linalg.norm((held - recon).reshape(-1, 3), axis=1).mean()

        gap = recon_err(out.components.shape[1]) - recon_err(1)
        worst_gap = max(worst_gap, gap)
        assert gap <= 1e-12
    curve = eval_generalization(stacked)
    assert curve.y[-1] <= curve.y[1] + 1e-12
    _report("criterion 7 (curve contracts)",
            f"compactness at 3 components {at3:.6f}, ends at {compact.y[-1]:.9f}; "
            f"full-rank generalization never above rank-1 (worst gap {worst_gap:.2e})")


def test_criterion_8_metric_calibration():
    t0 = time.time()
    rng = np.random.default_rng(8)
    pts = rng.normal(size=(40, 3))
    assert metric_hausdorff(pts, pts) == 0.0
    labels = np.zeros((5, 5, 5), dtype=np.int64)
    labels[1:3] = 1
    vol = LabeledVolume(labels, np.ones(3), np.zeros(3))
    assert metric_dice(vol, vol)[1] == 1.0
    a = np.zeros((4, 4, 4), dtype=np.int64)
    b = np.zeros((4, 4, 4), dtype=np.int64)
    a[0, 0, 0] = 1
    b[3, 3, 3] = 1
    assert metric_dice(
        LabeledVolume(a, np.ones(3), np.zeros(3)),
        LabeledVolume(b, np.ones(3), np.zeros(3)),
    )[1] == 0.0
    auc, _ = metric_pck(pts, pts)
    assert auc == 1.0

    for seed in range(20):
        r = np.random.default_rng(200 + seed)
        x = r.normal(size=(60, 3))
        y = r.normal(size=(45, 3))
        pairwise = np.linalg.norm(x[:, None] - y[None, :], axis=2)
        oracle = max(pairwise.min(axis=1).max(), pairwise.min(axis=0).max())
        assert abs(metric_hausdorff(x, y) - oracle) <= 1e-12

        la = r.integers(0, 4, size=(6, 6, 6))
        lb = r.integers(0, 4, size=(6, 6, 6))
        per_class, _ = metric_dice(
            LabeledVolume(la, np.ones(3), np.zeros(3)),
            LabeledVolume(lb, np.ones(3), np.zeros(3)),
        )
        for label, value in per_class.items():
            inter = np.logical_and(la == label, lb == label).sum()
            ref = 2.0 * inter / ((la == label).sum() + (lb == label).sum())
            assert abs(value - ref) <= 1e-12
    elapsed = time.time() - t0
    assert elapsed < 30.0
    _report("criterion 8 (metric calibration)",
            f"identities exact; 20 brute-force equivalences within 1e-12 "
            f"in {elapsed:.1f}s")


def test_criterion_9_loss_formulas():
    rng = np.random.default_rng(9)
    y = np.zeros((64, 4))
    y[np.arange(64), rng.integers(0, 4, size=64)] = 1.0
    uniform = np.full_like(y, 0.5)
    assert abs(loss_bce(uniform, y) - np.log(2.0)) <= 1e-9

    hard = y.copy()
    dc = loss_dice(hard, y)
    assert 0.0 <= dc <= 1.0 and dc < 1e-6
    soft = rng.random(y.shape)
    assert 0.0 <= loss_dice(soft, y) <= 1.0

    beta_hat, theta_hat = rng.normal(size=5), rng.normal(size=12)
    beta_ref, theta_ref = rng.normal(size=5), rng.normal(size=12)
    kp_hat, kp_ref = rng.normal(size=(9, 3)), rng.normal(size=(9, 3))
    total = loss_combined(beta_hat, theta_hat, kp_hat, beta_ref, theta_ref, kp_ref)
    parts = loss_parameters(beta_hat, theta_hat, beta_ref, theta_ref) + loss_joints(
        kp_hat, kp_ref
    )
    assert abs(total - parts) <= 1e-12
    _report("criterion 9 (loss formulas)",
            "uniform-prediction cross entropy equals log 2; overlap loss in "
            "[0,1] and ~0 at hard-perfect; combined loss exactly additive")


def test_criterion_10_determinism_and_serialization(tmp_path):
    spec = SynthSpec(
        fingers=2, segments=1, subject_count=2, poses_per_subject=2,
        shape_rank=2, seed=33,
    )
    hio.save_dataset(tmp_path / "a", sample_dataset(spec))
    hio.save_dataset(tmp_path / "b", sample_dataset(spec))
    checked = 0
    for rel in sorted((tmp_path / "a").rglob("*")):
        if rel.is_dir():
            continue
        other = tmp_path / "b" / rel.relative_to(tmp_path / "a")
        assert rel.read_bytes() == other.read_bytes(), rel
        checked += 1

    model = plant_model(spec)
    hio.save_model(tmp_path / "m.pbm", model)
    back = hio.load_model(tmp_path / "m.pbm")
    for name, a, b in [
        ("vertices", model.template.vertices, back.template.vertices),
        ("weights", model.template.blend_weights, back.template.blend_weights),
        ("components", model.shape_basis.components, back.shape_basis.components),
        ("regressor", model.joint_regressor.matrix, back.joint_regressor.matrix),
    ]:
        assert np.array_equal(a, b), name
    _report("criterion 10 (determinism and serialization)",
            f"{checked} dataset files byte-identical across reruns; model "
            "round-trip lossless")
