"""Mesh extraction from an SDF and surface-reconstruction metrics.

Metrics are computed over seeded area-weighted surface samples with KD-tree
nearest neighbors; identical meshes therefore produce identical sample sets
and exact zero/one metric values.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from skimage import measure


@dataclass
class TriangleMesh:
    vertices: np.ndarray   # (V, 3)
    triangles: np.ndarray  # (T, 3) int
    normals: np.ndarray    # (V, 3) per-vertex

    @property
    def n_vertices(self):
        return self.vertices.shape[0]

    @property
    def n_triangles(self):
        return self.triangles.shape[0]

    def is_empty(self):
        return self.n_triangles == 0


class EmptyMeshError(RuntimeError):
    pass


def _vertex_normals(vertices, triangles):
    """Area-weighted per-vertex normals."""
    v0 = vertices[triangles[:, 0]]
    v1 = vertices[triangles[:, 1]]
    v2 = vertices[triangles[:, 2]]
    face_n = np.cross(v1 - v0, v2 - v0)
    normals = np.zeros_like(vertices)
    for k in range(3):
        np.add.at(normals, triangles[:, k], face_n)
    norm = np.linalg.norm(normals, axis=1, keepdims=True)
    return normals / np.where(norm < 1e-20, 1.0, norm)


def _drop_degenerate(vertices, triangles):
    v0 = vertices[triangles[:, 0]]
    v1 = vertices[triangles[:, 1]]
    v2 = vertices[triangles[:, 2]]
    area2 = np.linalg.norm(np.cross(v1 - v0, v2 - v0), axis=1)
    return triangles[area2 > 1e-20]


def largest_component(vertices, triangles):
    """Keep the largest vertex-connected component (floater removal)."""
    n = vertices.shape[0]
    if triangles.shape[0] == 0:
        return vertices, triangles
    edges = np.concatenate([triangles[:, [0, 1]], triangles[:, [1, 2]],
                            triangles[:, [2, 0]]], axis=0)
    adj = coo_matrix((np.ones(edges.shape[0]), (edges[:, 0], edges[:, 1])),
                     shape=(n, n))
    _, labels = connected_components(adj, directed=False)
    counts = np.bincount(labels)
    keep_label = counts.argmax()
    keep_tri = triangles[labels[triangles[:, 0]] == keep_label]
    used = np.unique(keep_tri)
    remap = np.full(n, -1, dtype=np.int64)
    remap[used] = np.arange(used.size)
    return vertices[used], remap[keep_tri]


def extract_mesh(sdf_fn, resolution, lo=-1.0, hi=1.0, chunk=65536,
                 keep_largest=True):
    """Marching cubes of `sdf_fn` over a regular grid on [lo, hi]^3."""
    if resolution < 16:
        raise ValueError("resolution must be >= 16")
    axis = np.linspace(lo, hi, resolution)
    grid = np.empty((resolution,) * 3)
    xs, ys = np.meshgrid(axis, axis, indexing="ij")
    plane = np.stack([xs.ravel(), ys.ravel()], axis=-1)
    for k, z in enumerate(axis):
        pts = np.concatenate([plane, np.full((plane.shape[0], 1), z)], axis=1)
        vals = np.empty(pts.shape[0])
        for start in range(0, pts.shape[0], chunk):
            sl = slice(start, start + chunk)
            vals[sl] = np.asarray(sdf_fn(pts[sl])).ravel()
        grid[:, :, k] = vals.reshape(resolution, resolution)
    if grid.min() > 0.0 or grid.max() < 0.0:
        raise EmptyMeshError("no zero crossing inside the domain")
    spacing = (hi - lo) / (resolution - 1)
    verts, faces, _, _ = measure.marching_cubes(grid, level=0.0,
                                                spacing=(spacing,) * 3)
    verts = verts + lo
    faces = _drop_degenerate(verts, faces.astype(np.int64))
    if keep_largest:
        verts, faces = largest_component(verts, faces)
    if faces.shape[0] == 0:
        raise EmptyMeshError("mesh vanished during cleanup")
    return TriangleMesh(vertices=verts.astype(np.float64), triangles=faces,
                        normals=_vertex_normals(verts, faces))


# ---------------------------------------------------------------------------
# surface sampling and metrics
# ---------------------------------------------------------------------------

def sample_surface(mesh, n_samples, seed=0):
    """Area-weighted point samples with interpolated unit normals."""
    if mesh.is_empty():
        raise EmptyMeshError("cannot sample an empty mesh")
    rng = np.random.default_rng(seed)
    v0 = mesh.vertices[mesh.triangles[:, 0]]
    v1 = mesh.vertices[mesh.triangles[:, 1]]
    v2 = mesh.vertices[mesh.triangles[:, 2]]
    areas = 0.5 * np.linalg.norm(np.cross(v1 - v0, v2 - v0), axis=1)
    pdf = areas / areas.sum()
    tri = rng.choice(areas.size, size=n_samples, p=pdf)
    r1 = np.sqrt(rng.random(n_samples))
    r2 = rng.random(n_samples)
    a = 1.0 - r1
    b = r1 * (1.0 - r2)
    c = r1 * r2
    pts = (a[:, None] * v0[tri] + b[:, None] * v1[tri] + c[:, None] * v2[tri])
    n0 = mesh.normals[mesh.triangles[:, 0]]
    n1 = mesh.normals[mesh.triangles[:, 1]]
    n2 = mesh.normals[mesh.triangles[:, 2]]
    nrm = (a[:, None] * n0[tri] + b[:, None] * n1[tri] + c[:, None] * n2[tri])
    ln = np.linalg.norm(nrm, axis=1, keepdims=True)
    nrm = nrm / np.where(ln < 1e-20, 1.0, ln)
    return pts, nrm


def _nearest(from_pts, to_pts):
    tree = cKDTree(to_pts)
    dist, idx = tree.query(from_pts, k=1)
    return dist, idx


def chamfer_metrics(pred, gt, n_samples=100000, seed=0):
    """(accuracy, completeness, chamfer) over seeded surface samples."""
    p, _ = sample_surface(pred, n_samples, seed)
    g, _ = sample_surface(gt, n_samples, seed)
    d_pg, _ = _nearest(p, g)
    d_gp, _ = _nearest(g, p)
    acc = float(d_pg.mean())
    comp = float(d_gp.mean())
    return acc, comp, 0.5 * (acc + comp)


def f_score(pred, gt, threshold=0.02, n_samples=100000, seed=0):
    """(precision, recall, F) at a distance threshold in scene units."""
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    p, _ = sample_surface(pred, n_samples, seed)
    g, _ = sample_surface(gt, n_samples, seed)
    d_pg, _ = _nearest(p, g)
    d_gp, _ = _nearest(g, p)
    precision = float((d_pg < threshold).mean())
    recall = float((d_gp < threshold).mean())
    if precision + recall == 0.0:
        return 0.0, 0.0, 0.0
    return precision, recall, 2 * precision * recall / (precision + recall)


def normal_consistency(pred, gt, n_samples=100000, seed=0):
    """Mean absolute normal cosine at nearest neighbors, both directions."""
    p, pn = sample_surface(pred, n_samples, seed)
    g, gn = sample_surface(gt, n_samples, seed)
    _, idx_pg = _nearest(p, g)
    _, idx_gp = _nearest(g, p)
    cos_pg = np.abs(np.einsum("ij,ij->i", pn, gn[idx_pg]))
    cos_gp = np.abs(np.einsum("ij,ij->i", gn, pn[idx_gp]))
    return float(0.5 * (cos_pg.mean() + cos_gp.mean()))


def all_metrics(pred, gt, threshold=0.02, n_samples=100000, seed=0):
    acc, comp, chamfer = chamfer_metrics(pred, gt, n_samples, seed)
    precision, recall, f1 = f_score(pred, gt, threshold, n_samples, seed)
    nc = normal_consistency(pred, gt, n_samples, seed)
    return {
        "accuracy": acc,
        "completeness": comp,
        "chamfer": chamfer,
        "precision": precision,
        "recall": recall,
        "fscore": f1,
        "normal_consistency": nc,
    }


def write_metrics_json(path, metrics):
    with open(path, "w") as f:
        json.dump(metrics, f, indent=1, sort_keys=True)


# ---------------------------------------------------------------------------
# mesh I/O (binary little-endian PLY, plus OBJ export)
# ---------------------------------------------------------------------------

def write_ply(path, vertices, triangles, normals=None):
    vertices = np.asarray(vertices, dtype="<f4")
    triangles = np.asarray(triangles, dtype="<i4")
    if normals is None:
        normals = _vertex_normals(vertices.astype(np.float64), triangles)
    normals = np.asarray(normals, dtype="<f4")
    header = [
        "ply",
        "format binary_little_endian 1.0",
        f"element vertex {vertices.shape[0]}",
        "property float x", "property float y", "property float z",
        "property float nx", "property float ny", "property float nz",
        f"element face {triangles.shape[0]}",
        "property list uchar int vertex_indices",
        "end_header",
    ]
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        inter = np.concatenate([vertices, normals], axis=1).astype("<f4")
        f.write(inter.tobytes())
        counts = np.full((triangles.shape[0], 1), 3, dtype=np.uint8)
        for cnt, tri in zip(counts, triangles):
            f.write(cnt.tobytes())
            f.write(tri.astype("<i4").tobytes())
    return Path(path)


def read_ply(path):
    with open(path, "rb") as f:
        line = f.readline().strip()
        if line != b"ply":
            raise ValueError("not a PLY file")
        n_vert = n_face = 0
        props = []
        while True:
            line = f.readline().strip().decode("ascii")
            if line.startswith("element vertex"):
                n_vert = int(line.split()[-1])
            elif line.startswith("element face"):
                n_face = int(line.split()[-1])
            elif line.startswith("property float"):
                props.append(line.split()[-1])
            elif line == "end_header":
                break
        per_vertex = len(props)
        vert_data = np.frombuffer(f.read(4 * per_vertex * n_vert),
                                  dtype="<f4").reshape(n_vert, per_vertex)
        faces = np.empty((n_face, 3), dtype=np.int64)
        for i in range(n_face):
            cnt = np.frombuffer(f.read(1), dtype=np.uint8)[0]
            idx = np.frombuffer(f.read(4 * cnt), dtype="<i4")
            faces[i] = idx[:3]
    vertices = vert_data[:, :3].astype(np.float64)
    if per_vertex >= 6:
        normals = vert_data[:, 3:6].astype(np.float64)
    else:
        normals = _vertex_normals(vertices, faces)
    return TriangleMesh(vertices=vertices, triangles=faces, normals=normals)


def write_obj(path, mesh):
    with open(path, "w") as f:
        for v in mesh.vertices:
            f.write(f"v {v[0]} {v[1]} {v[2]}\n")
        for n in mesh.normals:
            f.write(f"vn {n[0]} {n[1]} {n[2]}\n")
        for t in mesh.triangles + 1:
            f.write(f"f {t[0]}//{t[0]} {t[1]}//{t[1]} {t[2]}//{t[2]}\n")
    return Path(path)
