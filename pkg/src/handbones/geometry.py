"""Mesh and volume utilities.

Triangle meshes with optional per-vertex bone labels, regular scalar/label
grids, edge extraction, iso-surface extraction, nearest-keypoint bone
labeling, semantic voxelization by ray parity, and exact nearest-neighbor /
closest-point-on-mesh queries. Coordinates are world millimetres; a volume's
voxel (i, j, k) has its center at ``origin + (i, j, k) * spacing``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

__all__ = [
    "TriangleMesh",
    "ScalarVolume",
    "LabeledVolume",
    "NonWatertightMeshError",
    "extract_edges",
    "submesh",
    "is_watertight",
    "marching_cubes",
    "surfaces_from_labels",
    "rbf_label",
    "voxelize_semantic",
    "point_set_distances",
    "MeshDistanceQuery",
]


class NonWatertightMeshError(ValueError):
    """A sub-mesh expected to bound a closed solid is not watertight."""


@dataclass(frozen=True)
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray
    bone_label: Optional[np.ndarray] = None

    def __post_init__(self):
        v = np.array(self.vertices, dtype=float).reshape(-1, 3)
        f = np.array(self.faces, dtype=np.int64).reshape(-1, 3)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        if f.size and (f.min() < 0 or f.max() >= v.shape[0]):
            raise ValueError("face index out of range")
        if self.bone_label is not None:
            lab = np.array(self.bone_label, dtype=np.int64)
            if lab.shape != (v.shape[0],):
                raise ValueError("bone_label must have one entry per vertex")
            object.__setattr__(self, "bone_label", lab)

    @property
    def num_vertices(self) -> int:
        return self.vertices.shape[0]

    def bounding_box(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)


def _check_grid(spacing, origin):
    spacing = np.asarray(spacing, dtype=float)
    origin = np.asarray(origin, dtype=float)
    if spacing.shape != (3,) or np.any(spacing <= 0):
        raise ValueError("spacing must be three positive floats")
    if origin.shape != (3,):
        raise ValueError("origin must be a 3-vector")
    return spacing, origin


@dataclass(frozen=True)
class ScalarVolume:
    values: np.ndarray
    spacing: np.ndarray
    origin: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 3:
            raise ValueError("values must be a 3-D grid")
        spacing, origin = _check_grid(self.spacing, self.origin)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.values.shape


@dataclass(frozen=True)
class LabeledVolume:
    labels: np.ndarray
    spacing: np.ndarray
    origin: np.ndarray

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 3 or not np.issubdtype(labels.dtype, np.integer):
            raise ValueError("labels must be a 3-D integer grid")
        if labels.min(initial=0) < 0:
            raise ValueError("labels must be non-negative")
        spacing, origin = _check_grid(self.spacing, self.origin)
        object.__setattr__(self, "labels", labels.astype(np.int64))
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.labels.shape

    def voxel_centers(self, mask: np.ndarray | None = None) -> np.ndarray:
        idx = np.argwhere(mask) if mask is not None else np.argwhere(
            np.ones(self.dims, dtype=bool)
        )
        return self.origin + idx * self.spacing


# ---------------------------------------------------------------------------
# Mesh basics


def extract_edges(mesh: TriangleMesh) -> np.ndarray:
    """Unique undirected edges (E, 2) with sorted pairs, lexicographic order."""
    f = mesh.faces
    if f.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    pairs = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    pairs = np.sort(pairs, axis=1)
    return np.unique(pairs, axis=0)


def submesh(mesh: TriangleMesh, label: int) -> tuple[TriangleMesh, np.ndarray]:
    """Extract the sub-mesh of one bone label; returns it with the original
    vertex indices of its vertices."""
    if mesh.bone_label is None:
        raise ValueError("mesh has no bone labels")
    keep = np.flatnonzero(mesh.bone_label == label)
    remap = -np.ones(mesh.num_vertices, dtype=np.int64)
    remap[keep] = np.arange(keep.size)
    fmask = np.all(np.isin(mesh.faces, keep), axis=1)
    faces = remap[mesh.faces[fmask]]
    sub = TriangleMesh(
        mesh.vertices[keep], faces, np.full(keep.size, label, dtype=np.int64)
    )
    return sub, keep


def is_watertight(mesh: TriangleMesh) -> bool:
    """True when every undirected edge is shared by exactly two faces."""
    f = mesh.faces
    if f.size == 0:
        return False
    pairs = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    pairs = np.sort(pairs, axis=1)
    _, counts = np.unique(pairs, axis=0, return_counts=True)
    return bool(np.all(counts == 2))


def _face_areas(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    tri = vertices[faces]
    return 0.5 * np.linalg.norm(
        np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1
    )


# ---------------------------------------------------------------------------
# Iso-surface extraction


def marching_cubes(volume: ScalarVolume, iso: float) -> TriangleMesh:
    """Triangulated iso-surface of a scalar grid, in world coordinates.

    Grid samples equal to ``iso`` count as inside (values >= iso are inside);
    they are nudged infinitesimally above the level so the lookup stays
    deterministic. An iso level outside the value range yields an empty mesh.
    Zero-area output faces are dropped.
    """
    from skimage import measure

    vals = volume.values
    if min(vals.shape) < 2:
        raise ValueError("volume must have at least 2 samples per axis")
    lo, hi = float(vals.min()), float(vals.max())
    if lo == hi or not (lo <= iso <= hi):
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    eq = vals == iso
    if eq.any():
        vals = vals.copy()
        vals[eq] += max(1e-12, 1e-9 * (hi - lo))
    if not (vals.min() < iso < vals.max()):
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    try:
        verts, faces, _, _ = measure.marching_cubes(
            vals, level=iso, spacing=tuple(volume.spacing)
        )
    except (ValueError, RuntimeError):
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    verts = verts + volume.origin
    faces = faces.astype(np.int64)
    keep = _face_areas(verts, faces) > 1e-14
    return TriangleMesh(verts, faces[keep])


def surfaces_from_labels(
    volume: LabeledVolume,
) -> tuple[TriangleMesh, dict[int, TriangleMesh]]:
    """Union iso-surface and one surface per bone label of a labeled grid."""
    occupancy = (volume.labels > 0).astype(float)
    union = marching_cubes(ScalarVolume(occupancy, volume.spacing, volume.origin), 0.5)
    per_label: dict[int, TriangleMesh] = {}
    for label in np.unique(volume.labels):
        if label == 0:
            continue
        occ = (volume.labels == label).astype(float)
        per_label[int(label)] = marching_cubes(
            ScalarVolume(occ, volume.spacing, volume.origin), 0.5
        )
    return union, per_label


# ---------------------------------------------------------------------------
# Bone labeling of a binary mask


def rbf_label(
    mask: LabeledVolume, keypoints: np.ndarray, keypoint_labels: np.ndarray
) -> LabeledVolume:
    """Assign each foreground voxel the bone label of its dominant keypoint.

    Responses are an isotropic monotone radial kernel, so the argmax response
    is the nearest labeled keypoint; exact ties go to the lower bone label.
    Background voxels stay 0.
    """
    keypoints = np.asarray(keypoints, dtype=float).reshape(-1, 3)
    keypoint_labels = np.asarray(keypoint_labels, dtype=np.int64).ravel()
    if keypoints.shape[0] == 0:
        raise ValueError("need at least one labeled keypoint")
    if keypoint_labels.shape[0] != keypoints.shape[0]:
        raise ValueError("one label per keypoint required")
    order = np.lexsort((np.arange(keypoint_labels.size), keypoint_labels))
    keypoints = keypoints[order]
    keypoint_labels = keypoint_labels[order]

    fg = mask.labels > 0
    out = np.zeros(mask.dims, dtype=np.int64)
    idx = np.argwhere(fg)
    if idx.size == 0:
        return LabeledVolume(out, mask.spacing, mask.origin)
    centers = mask.origin + idx * mask.spacing
    best = np.empty(centers.shape[0], dtype=np.int64)
    chunk = 65536
    for start in range(0, centers.shape[0], chunk):
        block = centers[start : start + chunk]
        d2 = ((block[:, None, :] - keypoints[None, :, :]) ** 2).sum(axis=2)
        best[start : start + chunk] = np.argmin(d2, axis=1)
    out[fg] = keypoint_labels[best]
    return LabeledVolume(out, mask.spacing, mask.origin)


# ---------------------------------------------------------------------------
# Semantic voxelization


def _parity_inside(tri: np.ndarray, axes: tuple[np.ndarray, np.ndarray, np.ndarray],
                   ray_axis: int) -> np.ndarray:
    """Inside mask by ray parity along one grid axis.

    Rays shoot along ``ray_axis`` through every voxel-center column; a voxel
    is inside when an odd number of triangle crossings lie beyond its center.
    """
    a_u, a_v = [ax for ax in (0, 1, 2) if ax != ray_axis]
    cu, cv, cr = axes[a_u], axes[a_v], axes[ray_axis]
    nu, nv, nr = cu.size, cv.size, cr.size
    # Deterministic sub-voxel jitter keeps ray columns off exact triangle
    # edges (shared-edge hits would otherwise double count).
    du = cu[1] - cu[0] if nu > 1 else 1.0
    dv = cv[1] - cv[0] if nv > 1 else 1.0
    cu = cu + 1e-6 * du / np.sqrt(2.0)
    cv = cv + 1e-6 * dv / np.sqrt(3.0)

    col_ids: list[np.ndarray] = []
    crossings: list[np.ndarray] = []
    p0, p1, p2 = tri[:, 0], tri[:, 1], tri[:, 2]
    for t in range(tri.shape[0]):
        q0 = np.array([p0[t, a_u], p0[t, a_v]])
        q1 = np.array([p1[t, a_u], p1[t, a_v]])
        q2 = np.array([p2[t, a_u], p2[t, a_v]])
        det = (q1[0] - q0[0]) * (q2[1] - q0[1]) - (q2[0] - q0[0]) * (q1[1] - q0[1])
        if abs(det) < 1e-12:
            continue
        lo_u, hi_u = np.searchsorted(cu, min(q0[0], q1[0], q2[0])), np.searchsorted(
            cu, max(q0[0], q1[0], q2[0]), side="right"
        )
        lo_v, hi_v = np.searchsorted(cv, min(q0[1], q1[1], q2[1])), np.searchsorted(
            cv, max(q0[1], q1[1], q2[1]), side="right"
        )
        if lo_u >= hi_u or lo_v >= hi_v:
            continue
        gu, gv = np.meshgrid(cu[lo_u:hi_u], cv[lo_v:hi_v], indexing="ij")
        gu = gu.ravel()
        gv = gv.ravel()
        w1 = ((gu - q0[0]) * (q2[1] - q0[1]) - (q2[0] - q0[0]) * (gv - q0[1])) / det
        w2 = ((q1[0] - q0[0]) * (gv - q0[1]) - (gu - q0[0]) * (q1[1] - q0[1])) / det
        w0 = 1.0 - w1 - w2
        hit = (w0 >= -1e-9) & (w1 >= -1e-9) & (w2 >= -1e-9)
        if not hit.any():
            continue
        iu = np.repeat(np.arange(lo_u, hi_u), hi_v - lo_v)[hit]
        iv = np.tile(np.arange(lo_v, hi_v), hi_u - lo_u)[hit]
        x = (
            w0[hit] * p0[t, ray_axis]
            + w1[hit] * p1[t, ray_axis]
            + w2[hit] * p2[t, ray_axis]
        )
        col_ids.append(iu * nv + iv)
        crossings.append(x)

    counts = np.zeros((nu * nv, nr + 1), dtype=np.int64)
    if col_ids:
        cols = np.concatenate(col_ids)
        xs = np.concatenate(crossings)
        # A crossing at x is "beyond" every center strictly below x.
        upto = np.searchsorted(cr, xs, side="left")
        np.add.at(counts, (cols, np.zeros_like(cols)), 1)
        np.add.at(counts, (cols, upto), -1)
    above = np.cumsum(counts[:, :-1], axis=1)
    inside_cols = (above % 2).astype(bool).reshape(nu, nv, nr)
    return np.moveaxis(inside_cols, (0, 1, 2), (a_u, a_v, ray_axis))


def voxelize_semantic(
    mesh: TriangleMesh,
    dims: tuple[int, int, int],
    spacing: np.ndarray,
    origin: np.ndarray,
) -> LabeledVolume:
    """Rasterize closed per-bone sub-meshes into a labeled voxel grid.

    Each voxel center takes the label of the bone solid containing it
    (ray-parity test along the three grid axes, majority vote); overlapping
    claims resolve to the bone with the nearest surface. Raises
    :class:`NonWatertightMeshError` for a sub-mesh that does not close.
    """
    spacing, origin = _check_grid(spacing, origin)
    if mesh.bone_label is None:
        raise ValueError("mesh has no bone labels")
    axes = tuple(origin[a] + spacing[a] * np.arange(dims[a]) for a in range(3))
    labels_out = np.zeros(dims, dtype=np.int64)
    claims: list[tuple[int, np.ndarray, TriangleMesh]] = []
    for label in np.unique(mesh.bone_label):
        sub, _ = submesh(mesh, int(label))
        if sub.faces.size == 0:
            continue
        if not is_watertight(sub):
            raise NonWatertightMeshError(f"bone {label} sub-mesh is not watertight")
        tri = sub.vertices[sub.faces]
        votes = sum(_parity_inside(tri, axes, a).astype(np.int8) for a in range(3))
        inside = votes >= 2
        if inside.any():
            claims.append((int(label), inside, sub))

    for label, inside, _ in claims:
        fresh = inside & (labels_out == 0)
        labels_out[fresh] = label
    # Overlaps: nearest surface wins.
    contested = np.zeros(dims, dtype=np.int64)
    for _, inside, _ in claims:
        contested += inside.astype(np.int64)
    multi = np.argwhere(contested > 1)
    if multi.size:
        centers = origin + multi * spacing
        best_d = np.full(multi.shape[0], np.inf)
        best_l = np.zeros(multi.shape[0], dtype=np.int64)
        for label, inside, sub in claims:
            mask = inside[tuple(multi.T)]
            if not mask.any():
                continue
            d = MeshDistanceQuery(sub).query(centers[mask])[0]
            take = d < best_d[mask]
            sel = np.flatnonzero(mask)[take]
            best_d[sel] = d[take]
            best_l[sel] = label
        labels_out[tuple(multi.T)] = best_l
    return LabeledVolume(labels_out, spacing, origin)


# ---------------------------------------------------------------------------
# Distances


def point_set_distances(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Exact nearest-neighbor distances in both directions between point sets."""
    a = np.asarray(a, dtype=float).reshape(-1, 3)
    b = np.asarray(b, dtype=float).reshape(-1, 3)
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("point sets must be non-empty")
    d_ab = cKDTree(b).query(a)[0]
    d_ba = cKDTree(a).query(b)[0]
    return d_ab, d_ba


def _closest_on_triangles(p: np.ndarray, tri: np.ndarray) -> np.ndarray:
    """Closest point on each triangle for each paired query point.

    Vectorized barycentric region walk; ``p`` is (m, 3), ``tri`` is
    (m, 3, 3), result is (m, 3).
    """
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    out = np.empty_like(p)
    remaining = np.ones(p.shape[0], dtype=bool)

    def settle(mask, value):
        nonlocal remaining
        mask = mask & remaining
        out[mask] = value[mask]
        remaining = remaining & ~mask

    settle((d1 <= 0) & (d2 <= 0), a)

    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    settle((d3 >= 0) & (d4 <= d3), b)

    vc = d1 * d4 - d3 * d2
    denom = np.where(np.abs(d1 - d3) > 0, d1 - d3, 1.0)
    settle((vc <= 0) & (d1 >= 0) & (d3 <= 0), a + (d1 / denom)[:, None] * ab)

    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    settle((d6 >= 0) & (d5 <= d6), c)

    vb = d5 * d2 - d1 * d6
    denom = np.where(np.abs(d2 - d6) > 0, d2 - d6, 1.0)
    settle((vb <= 0) & (d2 >= 0) & (d6 <= 0), a + (d2 / denom)[:, None] * ac)

    va = d3 * d6 - d5 * d4
    denom = (d4 - d3) + (d5 - d6)
    denom = np.where(np.abs(denom) > 0, denom, 1.0)
    w = ((d4 - d3) / denom)[:, None]
    settle((va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0), b + w * (c - b))

    tot = va + vb + vc
    tot = np.where(np.abs(tot) > 0, tot, 1.0)
    v = (vb / tot)[:, None]
    w = (vc / tot)[:, None]
    settle(remaining, a + ab * v + ac * w)
    return out


class MeshDistanceQuery:
    """Exact closest point on a triangle mesh, accelerated by a vertex tree.

    Candidate faces come from the faces incident to the nearest vertices;
    a triangle-diameter bound certifies exactness, with a ball-query fallback
    for the rare points where the k-nearest candidates cannot certify.
    """

    def __init__(self, mesh: TriangleMesh):
        if mesh.faces.size == 0:
            raise ValueError("mesh has no faces")
        self.vertices = mesh.vertices
        self.faces = mesh.faces
        self.tri = mesh.vertices[mesh.faces]
        self.tree = cKDTree(mesh.vertices)
        nv = mesh.num_vertices
        flat = mesh.faces.ravel()
        order = np.argsort(flat, kind="stable")
        self._incident = order // 3
        counts = np.bincount(flat, minlength=nv)
        self._ptr = np.concatenate([[0], np.cumsum(counts)])
        edges = np.linalg.norm(
            np.diff(self.tri[:, [0, 1, 2, 0]], axis=1), axis=2
        )
        self.max_edge = float(edges.max())

    def _faces_of_vertices(self, verts: np.ndarray) -> np.ndarray:
        parts = [
            self._incident[self._ptr[v] : self._ptr[v + 1]] for v in np.unique(verts)
        ]
        return np.unique(np.concatenate(parts)) if parts else np.zeros(0, np.int64)

    def _pairs_best(self, points, pair_pt, pair_face, best_d, best_cp):
        if pair_pt.size == 0:
            return
        key = pair_pt * self.faces.shape[0] + pair_face
        uniq = np.unique(key)
        pair_pt = uniq // self.faces.shape[0]
        pair_face = uniq % self.faces.shape[0]
        cp = _closest_on_triangles(points[pair_pt], self.tri[pair_face])
        d = np.linalg.norm(points[pair_pt] - cp, axis=1)
        order = np.lexsort((d, pair_pt))
        first = np.ones(order.size, dtype=bool)
        first[1:] = pair_pt[order][1:] != pair_pt[order][:-1]
        sel = order[first]
        better = d[sel] < best_d[pair_pt[sel]]
        sel = sel[better]
        best_d[pair_pt[sel]] = d[sel]
        best_cp[pair_pt[sel]] = cp[sel]

    def _incident_pairs(self, pt_ids, v_ids):
        counts = self._ptr[v_ids + 1] - self._ptr[v_ids]
        starts = self._ptr[v_ids]
        total = int(counts.sum())
        offsets = np.repeat(np.cumsum(counts) - counts, counts)
        gather = np.repeat(starts, counts) + (np.arange(total) - offsets)
        return np.repeat(pt_ids, counts), self._incident[gather]

    def query(self, points: np.ndarray, k: int = 16) -> tuple[np.ndarray, np.ndarray]:
        """Distances and closest surface points for world-space queries.

        Exact: a k-NN pass gives an upper bound on the distance, then one
        ball query with radius bound + longest-edge covers every face that
        could possibly do better.
        """
        points = np.asarray(points, dtype=float).reshape(-1, 3)
        n = points.shape[0]
        if n == 0:
            return np.zeros(0), np.zeros((0, 3))
        k_eff = min(k, self.vertices.shape[0])
        d_nn, idx = self.tree.query(points, k=k_eff)
        if k_eff == 1:
            d_nn = d_nn[:, None]
            idx = idx[:, None]
        best_d = d_nn[:, 0].copy()  # nearest vertex is itself a surface point
        best_cp = self.vertices[idx[:, 0]].copy()

        pair_pt, pair_face = self._incident_pairs(
            np.repeat(np.arange(n), k_eff), idx.ravel()
        )
        self._pairs_best(points, pair_pt, pair_face, best_d, best_cp)

        if k_eff < self.vertices.shape[0]:
            # Any face that could still win has a vertex inside this radius.
            satisfied = d_nn[:, -1] >= best_d + self.max_edge
            rest = np.flatnonzero(~satisfied)
            if rest.size:
                radii = best_d[rest] + self.max_edge + 1e-9
                balls = self.tree.query_ball_point(points[rest], radii)
                counts = np.fromiter((len(b) for b in balls), dtype=np.int64,
                                     count=rest.size)
                if counts.sum():
                    v_ids = np.concatenate(
                        [np.asarray(b, dtype=np.int64) for b in balls if b]
                    )
                    pt_ids = np.repeat(rest, counts)
                    pair_pt, pair_face = self._incident_pairs(pt_ids, v_ids)
                    self._pairs_best(points, pair_pt, pair_face, best_d, best_cp)
        return best_d, best_cp
