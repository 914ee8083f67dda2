"""File formats: model files, scan directories, volumes, curves, diagnostics.

The model file is a plain-text manifest over a little-endian float64 binary
blob (exact round trip beats text precision); meshes interchange as OBJ with
one object group per bone; labeled volumes are raw uint16 with a small text
header. All writes go through a temp file and an atomic rename.
"""
from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .geometry import LabeledVolume, TriangleMesh
from .model import BoneModel, BoneTemplate, JointRegressor, ShapeBasis
from .registration import AnnotatedScan

__all__ = [
    "save_model",
    "load_model",
    "write_obj",
    "read_obj",
    "write_keypoints",
    "read_keypoints",
    "write_labeled_volume",
    "read_labeled_volume",
    "save_scan",
    "load_scan",
    "save_dataset",
    "load_dataset",
    "save_subject_templates",
    "load_subject_templates",
    "write_curve_csv",
    "write_diagnostics_csv",
]

_MODEL_MAGIC = "HANDBONES-MODEL v1"
_ARRAYS_MAGIC = "HANDBONES-ARRAYS v1"
_FLOAT_FMT = "%.17g"


def _atomic_write_bytes(path: Path, payload: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _atomic_write_text(path: Path, text: str):
    _atomic_write_bytes(path, text.encode("utf-8"))


def _pack_arrays(magic: str, arrays: dict, header_lines: list | None = None) -> bytes:
    manifest = [magic]
    manifest.extend(header_lines or [])
    blob = bytearray()
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype=float)
        shape = ",".join(str(int(s)) for s in arr.shape) or "0"
        manifest.append(f"array {name} {shape} {len(blob)}")
        blob.extend(arr.astype("<f8").tobytes())
    manifest.append("end")
    return ("\n".join(manifest) + "\n").encode("utf-8") + bytes(blob)


def _unpack_arrays(payload: bytes, magic: str) -> tuple[dict, list]:
    newline = payload.find(b"\n")
    first = payload[:newline].decode("utf-8")
    if first != magic:
        raise ValueError(f"unexpected file format: {first!r}")
    cursor = newline + 1
    entries = []
    header = []
    while True:
        newline = payload.find(b"\n", cursor)
        line = payload[cursor:newline].decode("utf-8")
        cursor = newline + 1
        if line == "end":
            break
        if line.startswith("array "):
            _, name, shape, offset = line.split(" ")
            dims = tuple(int(s) for s in shape.split(",")) if shape != "0" else (0,)
            entries.append((name, dims, int(offset)))
        else:
            header.append(line)
    blob = payload[cursor:]
    arrays = {}
    for name, dims, offset in entries:
        count = int(np.prod(dims)) if dims else 0
        data = np.frombuffer(blob, dtype="<f8", count=count, offset=offset)
        arrays[name] = data.reshape(dims).copy()
    return arrays, header


# ---------------------------------------------------------------------------
# Model files


def save_model(path, model: BoneModel):
    tpl = model.template
    basis = model.shape_basis
    arrays = {
        "vertices": tpl.vertices,
        "faces": tpl.faces,
        "bone_label": tpl.bone_label,
        "blend_weights": tpl.blend_weights,
        "kinematic_tree": tpl.kinematic_tree,
        "rest_joints": tpl.rest_joints,
        "mean_shape": basis.mean_shape,
        "components": basis.components,
        "singular_values": basis.singular_values,
        "regressor": model.joint_regressor.matrix,
        "keypoint_joints": model.keypoint_joints,
    }
    names = ",".join(model.joint_regressor.names)
    _atomic_write_bytes(Path(path), _pack_arrays(_MODEL_MAGIC, arrays, [f"names {names}"]))


def load_model(path) -> BoneModel:
    arrays, header = _unpack_arrays(Path(path).read_bytes(), _MODEL_MAGIC)
    names = ()
    for line in header:
        if line.startswith("names "):
            names = tuple(line[len("names "):].split(","))
    template = BoneTemplate(
        arrays["vertices"],
        arrays["faces"].astype(np.int64),
        arrays["bone_label"].astype(np.int64),
        arrays["blend_weights"],
        arrays["kinematic_tree"].astype(np.int64),
        arrays["rest_joints"],
    )
    basis = ShapeBasis(
        arrays["mean_shape"], arrays["components"], arrays["singular_values"]
    )
    regressor = JointRegressor(arrays["regressor"], names)
    return BoneModel(template, basis, regressor, arrays["keypoint_joints"].astype(np.int64))


# ---------------------------------------------------------------------------
# Meshes and keypoints


def write_obj(path, mesh: TriangleMesh):
    lines = ["# handbones mesh"]
    for v in mesh.vertices:
        lines.append("v " + " ".join(_FLOAT_FMT % c for c in v))
    labels = (
        mesh.bone_label
        if mesh.bone_label is not None
        else np.ones(mesh.num_vertices, dtype=np.int64)
    )
    face_labels = labels[mesh.faces[:, 0]] if mesh.faces.size else np.zeros(0, np.int64)
    for label in np.unique(face_labels) if mesh.faces.size else []:
        lines.append(f"o bone_{int(label):03d}")
        for face in mesh.faces[face_labels == label]:
            lines.append("f " + " ".join(str(int(i) + 1) for i in face))
    _atomic_write_text(Path(path), "\n".join(lines) + "\n")


def read_obj(path) -> TriangleMesh:
    vertices = []
    faces = []
    face_labels = []
    current = 1
    for raw in Path(path).read_text().splitlines():
        line = raw.strip()
        if line.startswith("v "):
            vertices.append([float(t) for t in line.split()[1:4]])
        elif line.startswith("o "):
            name = line.split(maxsplit=1)[1]
            current = int(name.rsplit("_", 1)[-1]) if "_" in name else 1
        elif line.startswith("f "):
            idx = [int(t.split("/")[0]) - 1 for t in line.split()[1:4]]
            faces.append(idx)
            face_labels.append(current)
    vertices = np.asarray(vertices, dtype=float).reshape(-1, 3)
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    labels = np.zeros(vertices.shape[0], dtype=np.int64)
    for face, label in zip(faces, face_labels):
        labels[face] = label
    if labels.min(initial=1) < 1:
        labels[labels == 0] = 1  # vertices untouched by faces
    return TriangleMesh(vertices, faces, labels)


def write_keypoints(path, keypoints: np.ndarray, names=None):
    keypoints = np.asarray(keypoints, dtype=float).reshape(-1, 3)
    if names is None:
        names = tuple(f"kp{i:03d}" for i in range(keypoints.shape[0]))
    lines = [
        f"{name} " + " ".join(_FLOAT_FMT % c for c in point)
        for name, point in zip(names, keypoints)
    ]
    _atomic_write_text(Path(path), "\n".join(lines) + "\n")


def read_keypoints(path) -> tuple[np.ndarray, tuple]:
    names = []
    points = []
    for raw in Path(path).read_text().splitlines():
        parts = raw.split()
        if len(parts) != 4:
            continue
        names.append(parts[0])
        points.append([float(t) for t in parts[1:]])
    return np.asarray(points, dtype=float).reshape(-1, 3), tuple(names)


# ---------------------------------------------------------------------------
# Labeled volumes (raw uint16 + text header)


def write_labeled_volume(base_path, volume: LabeledVolume):
    base = Path(base_path)
    if volume.labels.max(initial=0) > np.iinfo(np.uint16).max:
        raise ValueError("labels exceed uint16 range")
    dims = volume.dims
    header = "\n".join(
        [
            "HANDBONES-VOLUME v1",
            "dims " + " ".join(str(d) for d in dims),
            "spacing " + " ".join(_FLOAT_FMT % s for s in volume.spacing),
            "origin " + " ".join(_FLOAT_FMT % o for o in volume.origin),
        ]
    )
    _atomic_write_text(base.with_suffix(".hdr"), header + "\n")
    _atomic_write_bytes(
        base.with_suffix(".raw"), volume.labels.astype("<u2").tobytes()
    )


def read_labeled_volume(base_path) -> LabeledVolume:
    base = Path(base_path)
    lines = base.with_suffix(".hdr").read_text().splitlines()
    if lines[0] != "HANDBONES-VOLUME v1":
        raise ValueError("unexpected volume header")
    fields = {l.split()[0]: l.split()[1:] for l in lines[1:] if l.strip()}
    dims = tuple(int(d) for d in fields["dims"])
    spacing = np.array([float(s) for s in fields["spacing"]])
    origin = np.array([float(o) for o in fields["origin"]])
    payload = base.with_suffix(".raw").read_bytes()
    labels = np.frombuffer(payload, dtype="<u2")
    if labels.size != int(np.prod(dims)):
        raise ValueError("volume payload does not match header dims")
    return LabeledVolume(labels.reshape(dims).astype(np.int64), spacing, origin)


# ---------------------------------------------------------------------------
# Scans and datasets


def save_scan(directory, scan: AnnotatedScan):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_keypoints(directory / "keypoints.txt", scan.keypoints, scan.keypoint_names)
    write_obj(directory / "bones.obj", scan.bone_surface)
    if scan.labels_volume is not None:
        write_labeled_volume(directory / "labels", scan.labels_volume)


def load_scan(directory, subject_id=None, pose_id=None) -> AnnotatedScan:
    directory = Path(directory)
    keypoints, names = read_keypoints(directory / "keypoints.txt")
    mesh = read_obj(directory / "bones.obj")
    per_bone = {}
    from .geometry import submesh

    for label in np.unique(mesh.bone_label):
        sub, _ = submesh(mesh, int(label))
        per_bone[int(label)] = sub
    volume = None
    if (directory / "labels.hdr").exists():
        volume = read_labeled_volume(directory / "labels")
    name = directory.name
    if subject_id is None or pose_id is None:
        parts = name.split("_")
        subject_id = subject_id or (parts[0] if parts else name)
        pose_id = pose_id or (parts[1] if len(parts) > 1 else "p000")
    return AnnotatedScan(
        subject_id=subject_id,
        pose_id=pose_id,
        keypoints=keypoints,
        bone_surface=mesh,
        per_bone_surfaces=per_bone,
        labels_volume=volume,
        keypoint_names=names,
    )


def save_dataset(directory, dataset):
    """Write a synthetic dataset: initial model, scans, and the ground truth."""
    from dataclasses import asdict

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_model(directory / "template.pbm", dataset.initial)
    scan_index = []
    for scan in dataset.scans:
        rel = f"scans/{scan.subject_id}_{scan.pose_id}"
        save_scan(directory / rel, scan)
        scan_index.append(
            {"subject_id": scan.subject_id, "pose_id": scan.pose_id, "path": rel}
        )
    meta = {
        "format": "handbones-dataset-v1",
        "spec": asdict(dataset.spec),
        "scans": scan_index,
    }
    _atomic_write_text(directory / "dataset.json", json.dumps(meta, indent=2) + "\n")
    truth_dir = directory / "truth"
    save_model(truth_dir / "model.pbm", dataset.truth)
    save_subject_templates(truth_dir / "templates.pbm", dataset.subject_templates)
    rows = ["subject_id,pose_id,beta,theta"]
    for (sid, pid), pose in dataset.true_poses.items():
        beta = ";".join(_FLOAT_FMT % b for b in dataset.true_shapes[sid])
        from .model import pose_to_vector

        theta = ";".join(_FLOAT_FMT % t for t in pose_to_vector(pose))
        rows.append(f"{sid},{pid},{beta},{theta}")
    _atomic_write_text(truth_dir / "params.csv", "\n".join(rows) + "\n")


def load_dataset(directory) -> tuple[BoneModel, list, dict]:
    """Read a dataset directory: (initial model, scans, metadata)."""
    directory = Path(directory)
    meta = json.loads((directory / "dataset.json").read_text())
    if meta.get("format") != "handbones-dataset-v1":
        raise ValueError("not a handbones dataset directory")
    initial = load_model(directory / "template.pbm")
    scans = [
        load_scan(directory / entry["path"], entry["subject_id"], entry["pose_id"])
        for entry in meta["scans"]
    ]
    return initial, scans, meta


def save_subject_templates(path, templates: dict):
    arrays = {f"template_{sid}": np.asarray(t, dtype=float)
              for sid, t in sorted(templates.items())}
    _atomic_write_bytes(Path(path), _pack_arrays(_ARRAYS_MAGIC, arrays))


def load_subject_templates(path) -> dict:
    arrays, _ = _unpack_arrays(Path(path).read_bytes(), _ARRAYS_MAGIC)
    return {
        name[len("template_"):]: arr for name, arr in arrays.items()
    }


# ---------------------------------------------------------------------------
# Tables


def write_curve_csv(path, curve):
    rows = ["x,y,y_std"]
    std = curve.y_std if curve.y_std is not None else np.full_like(curve.y, np.nan)
    for x, y, s in zip(curve.x, curve.y, std):
        rows.append(f"{_FLOAT_FMT % x},{_FLOAT_FMT % y},{_FLOAT_FMT % s}")
    _atomic_write_text(Path(path), "\n".join(rows) + "\n")


def write_diagnostics_csv(path, diagnostics):
    rows = ["iteration,mean_hausdorff_mm,mean_E_pose,mean_E_vert"]
    for d in diagnostics:
        rows.append(
            f"{d.iteration},{_FLOAT_FMT % d.mean_hausdorff_mm},"
            f"{_FLOAT_FMT % d.mean_e_pose},{_FLOAT_FMT % d.mean_e_vert}"
        )
    _atomic_write_text(Path(path), "\n".join(rows) + "\n")
