"""Command-line surface tying the pipeline together.

Subcommands: synth (generate a dataset), register (align a model to one
scan), train (learn model parameters from a dataset), pose (evaluate the
forward model), sample (export shape-mode sweeps), evaluate (curves and
metrics), gradcheck (finite-difference audit of the analytic Jacobians).
Every command accepts --seed and --threads; THE HANDBONES_THREADS environment
variable supplies the thread default.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import io as hio
from .geometry import voxelize_semantic
from .metrics import (
    eval_compactness,
    eval_generalization,
    metric_dice,
    metric_hausdorff,
    metric_joint_error,
    metric_pck,
)
from .model import (
    PoseParams,
    ShapeParams,
    forward,
    jacobians,
    pose_from_vector,
    pose_to_vector,
)
from .numerics import check_gradient
from .registration import RegistrationConfig, coarse_register, register_scan
from .synth import SynthSpec, sample_dataset
from .training import TrainingConfig, train_model


def _default_threads() -> int:
    try:
        return max(1, int(os.environ.get("HANDBONES_THREADS", "1")))
    except ValueError:
        return 1


def _add_common(parser):
    parser.add_argument("--seed", type=int, default=0, help="random seed")
    parser.add_argument(
        "--threads", type=int, default=_default_threads(),
        help="worker threads (default from HANDBONES_THREADS)",
    )


def _read_vector_csv(path) -> np.ndarray:
    text = Path(path).read_text()
    values = [float(tok) for tok in text.replace(",", " ").split()]
    return np.asarray(values, dtype=float)


def _cmd_synth(args):
    if args.spec:
        fields = json.loads(Path(args.spec).read_text())
        spec = SynthSpec(**fields)
    else:
        spec = SynthSpec(seed=args.seed)
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    dataset = sample_dataset(spec)
    hio.save_dataset(args.out, dataset)
    print(f"wrote {len(dataset.scans)} scans to {args.out}")


def _cmd_register(args):
    model = hio.load_model(args.model)
    scan = hio.load_scan(args.scan)
    config = RegistrationConfig(
        lambda_reg=args.lambda_reg, use_shape=args.use_shape, threads=args.threads
    )
    result = register_scan(model, scan, config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    hio.write_obj(out / "registered.obj", result.mesh)
    report = {
        "coarse_residual_mm": result.coarse.residual,
        "mean_hausdorff_mm": result.mean_hausdorff,
        "per_bone_hausdorff_mm": {
            str(k): v for k, v in sorted(result.per_bone_hausdorff.items())
        },
        "skipped_bones": result.skipped_bones,
    }
    (out / "residuals.json").write_text(json.dumps(report, indent=2) + "\n")
    print(
        f"registered: coarse residual {result.coarse.residual:.4f} mm, "
        f"mean hausdorff {result.mean_hausdorff:.4f} mm"
    )


def _cmd_train(args):
    initial, scans, _ = hio.load_dataset(args.data)
    config = TrainingConfig(
        outer_iterations=args.iters,
        shape_dims=args.beta_dims,
        registration=RegistrationConfig(threads=args.threads),
    )
    result = train_model(scans, initial, config)
    out = Path(args.out)
    hio.save_model(out, result.model)
    hio.write_diagnostics_csv(out.with_suffix(".diagnostics.csv"), result.diagnostics)
    hio.save_subject_templates(out.with_suffix(".templates.pbm"), result.subject_templates)
    print(f"trained model written to {out}")
    for d in result.diagnostics:
        print(
            f"  iteration {d.iteration}: hausdorff {d.mean_hausdorff_mm:.4f} mm, "
            f"E_pose {d.mean_e_pose:.4g}, E_vert {d.mean_e_vert:.4g}"
        )


def _cmd_pose(args):
    model = hio.load_model(args.model)
    beta = (
        _read_vector_csv(args.beta)
        if args.beta
        else np.zeros(model.shape_basis.rank)
    )
    j = model.num_joints
    if args.theta:
        theta = _read_vector_csv(args.theta)
        if theta.size == 3 * j:
            theta = np.concatenate([theta, np.zeros(6)])
        pose = pose_from_vector(theta, j)
    else:
        pose = PoseParams.identity(j)
    verts, _ = forward(model, ShapeParams(beta), pose)
    from .geometry import TriangleMesh

    mesh = TriangleMesh(verts, model.template.faces, model.template.bone_label)
    hio.write_obj(args.out, mesh)
    print(f"posed mesh written to {args.out}")


def _cmd_sample(args):
    model = hio.load_model(args.model)
    rank = model.shape_basis.rank
    if rank == 0:
        raise SystemExit("model has no shape space to sample")
    if not 1 <= args.pc <= rank:
        raise SystemExit(f"--pc must be in 1..{rank}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    from .geometry import TriangleMesh

    tpl = model.template
    for tag, scale in (("mean", 0.0), ("plus", args.sigma), ("minus", -args.sigma)):
        beta = np.zeros(rank)
        beta[args.pc - 1] = scale
        verts, _ = forward(model, ShapeParams(beta), PoseParams.identity(model.num_joints))
        hio.write_obj(out / f"pc{args.pc}_{tag}.obj",
                      TriangleMesh(verts, tpl.faces, tpl.bone_label))
    print(f"wrote mean and +-{args.sigma} std sweeps for component {args.pc} to {out}")


def _cmd_evaluate(args):
    model = hio.load_model(args.model)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if model.shape_basis.rank:
        compact = eval_compactness(model.shape_basis)
        hio.write_curve_csv(out / "compactness.csv", compact)
    else:
        compact = None

    general = None
    templates_path = args.templates
    if templates_path is None:
        candidate = Path(args.model).with_suffix(".templates.pbm")
        if candidate.exists():
            templates_path = candidate
        else:
            truth_candidate = Path(args.data) / "truth" / "templates.pbm"
            if truth_candidate.exists():
                templates_path = truth_candidate
    if templates_path is not None:
        templates = hio.load_subject_templates(templates_path)
        if len(templates) >= 3:
            stack = np.stack([templates[k] for k in sorted(templates)])
            general = eval_generalization(stack)
            hio.write_curve_csv(out / "generalization.csv", general)

    _, scans, _ = hio.load_dataset(args.data)
    predicted = []
    annotated = []
    dice_scores = []
    hausdorffs = []
    reg_cfg = RegistrationConfig(
        use_shape=model.shape_basis.rank > 0, threads=args.threads
    )
    for scan in scans:
        if args.full_registration or scan.labels_volume is not None:
            reg = register_scan(model, scan, reg_cfg)
            _, kp = forward(model, reg.coarse.shape, reg.coarse.pose)
            hausdorffs.append(metric_hausdorff(reg.mesh, scan.bone_surface))
            if scan.labels_volume is not None:
                vol = scan.labels_volume
                pred_vol = voxelize_semantic(
                    reg.mesh, vol.dims, vol.spacing, vol.origin
                )
                dice_scores.append(metric_dice(pred_vol, vol)[1])
        else:
            coarse = coarse_register(
                model, scan.keypoints, use_shape=model.shape_basis.rank > 0
            )
            _, kp = forward(model, coarse.shape, coarse.pose)
        predicted.append(kp)
        annotated.append(scan.keypoints)
    predicted = np.concatenate(predicted)
    annotated = np.concatenate(annotated)
    auc, curve = metric_pck(predicted, annotated)
    hio.write_curve_csv(out / "pck_curve.csv", curve)
    report = {
        "pck_auc": auc,
        "pck_at_max_threshold": float(curve.y[-1]),
        "mean_joint_error_mm": metric_joint_error(predicted, annotated),
    }
    if dice_scores:
        report["mean_dice"] = float(np.mean(dice_scores))
    if hausdorffs:
        report["mean_surface_hausdorff_mm"] = float(np.mean(hausdorffs))
    (out / "report.json").write_text(json.dumps(report, indent=2) + "\n")

    if args.plots:
        _write_plots(out, compact, general, curve)
    print(json.dumps(report, indent=2))


def _write_plots(out, compact, general, pck_curve):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 3, figsize=(13, 3.6))
    if compact is not None:
        axes[0].plot(compact.x, compact.y, marker="o", color="tab:red")
    axes[0].set_title("compactness")
    axes[0].set_xlabel("components")
    axes[0].set_ylabel("variance ratio")
    if general is not None:
        axes[1].errorbar(general.x, general.y, yerr=general.y_std, marker="o",
                         color="tab:blue")
    axes[1].set_title("generalization (leave-one-out)")
    axes[1].set_xlabel("components")
    axes[1].set_ylabel("mean vertex error (mm)")
    axes[2].plot(pck_curve.x, pck_curve.y, color="tab:green")
    axes[2].set_title("correct-keypoint curve")
    axes[2].set_xlabel("threshold (mm)")
    axes[2].set_ylabel("fraction")
    fig.tight_layout()
    fig.savefig(out / "curves.png", dpi=120)
    plt.close(fig)


def _cmd_gradcheck(args):
    model = hio.load_model(args.model)
    rng = np.random.default_rng(args.seed)
    j = model.num_joints
    rank = model.shape_basis.rank
    worst = 0.0
    for _ in range(args.trials):
        pose = PoseParams(
            rng.uniform(-0.7, 0.7, size=(j, 3)),
            rng.uniform(-0.7, 0.7, size=3),
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
            vp, kp = _forward_vec(model, x0 + e, j, rank)
            vm, km = _forward_vec(model, x0 - e, j, rank)
            fd = np.concatenate([(vp - vm).ravel(), (kp - km).ravel()]) / (2 * step)
            err = np.abs(analytic[:, col] - fd) / np.maximum(np.abs(fd), 1e-3)
            worst = max(worst, float(err.max()))
    print(f"worst relative Jacobian error over {args.trials} trials: {worst:.3e}")
    if worst >= 1e-4:
        raise SystemExit(1)


def _forward_vec(model, x, j, rank):
    pose = pose_from_vector(x[: 3 * j + 6], j)
    shape = ShapeParams(x[3 * j + 6 :]) if rank else ShapeParams.zeros(0)
    return forward(model, shape, pose)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="handbones",
        description="Parametric internal hand-bone model toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic annotated dataset")
    p.add_argument("--spec", help="JSON file with generator settings")
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("register", help="register a model to one scan directory")
    p.add_argument("--model", required=True)
    p.add_argument("--scan", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--lambda-reg", type=float, default=5.0)
    p.add_argument("--use-shape", action="store_true")
    _add_common(p)
    p.set_defaults(func=_cmd_register)

    p = sub.add_parser("train", help="train model parameters from a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--beta-dims", type=int, default=10)
    p.add_argument("--iters", type=int, default=3)
    _add_common(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("pose", help="evaluate the forward model to an OBJ")
    p.add_argument("--model", required=True)
    p.add_argument("--beta", help="CSV of shape coefficients")
    p.add_argument("--theta", help="CSV of pose parameters (3J or 3J+6 values)")
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=_cmd_pose)

    p = sub.add_parser("sample", help="export mean and +-sigma shape sweeps")
    p.add_argument("--model", required=True)
    p.add_argument("--pc", type=int, required=True, help="1-based component index")
    p.add_argument("--sigma", type=float, default=2.0)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=_cmd_sample)

    p = sub.add_parser("evaluate", help="curves and metrics for a model on a dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--templates", help="subject templates file for generalization")
    p.add_argument("--full-registration", action="store_true",
                   help="run fine registration per scan even without volumes")
    p.add_argument("--plots", action="store_true", help="emit curves.png")
    _add_common(p)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("gradcheck", help="audit analytic Jacobians")
    p.add_argument("--model", required=True)
    p.add_argument("--trials", type=int, default=10)
    _add_common(p)
    p.set_defaults(func=_cmd_gradcheck)

    args = parser.parse_args(argv)
    try:
        args.func(args)
    except SystemExit:
        raise
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
