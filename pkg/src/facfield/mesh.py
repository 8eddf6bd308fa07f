"""Isosurface extraction, OBJ export and point-set geometry metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from skimage import measure

from .field import fd_gradient


class NoSurface(Exception):
    """The scalar field has no zero crossing inside the grid."""


@dataclass
class TriangleMesh:
    vertices: np.ndarray    # (V,3)
    triangles: np.ndarray   # (T,3) int
    normals: np.ndarray     # (V,3) unit, per vertex
    boundary_tris: np.ndarray = None  # (T,) bool: touches the grid AABB

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, float)
        self.triangles = np.asarray(self.triangles, int)
        self.normals = np.asarray(self.normals, float)
        if len(self.triangles) and (self.triangles.min() < 0
                                    or self.triangles.max()
                                    >= len(self.vertices)):
            raise ValueError("triangle indices out of range")
        # drop degenerate (zero-area) triangles
        v = self.vertices
        t = self.triangles
        area2 = np.linalg.norm(np.cross(v[t[:, 1]] - v[t[:, 0]],
                                        v[t[:, 2]] - v[t[:, 0]]), axis=1)
        keep = area2 > 1e-14
        self.triangles = t[keep]
        if self.boundary_tris is None:
            self.boundary_tris = np.zeros(len(self.triangles), bool)
        else:
            self.boundary_tris = np.asarray(self.boundary_tris, bool)[keep]

    def face_areas(self):
        v, t = self.vertices, self.triangles
        return 0.5 * np.linalg.norm(np.cross(v[t[:, 1]] - v[t[:, 0]],
                                             v[t[:, 2]] - v[t[:, 0]]), axis=1)

    def face_normals(self):
        v, t = self.vertices, self.triangles
        n = np.cross(v[t[:, 1]] - v[t[:, 0]], v[t[:, 2]] - v[t[:, 0]])
        return n / np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-18)


def grid_eval(fn, resolution, bounds, chunk_slabs=4):
    """Evaluate a batched scalar field on a regular grid, sharded by z-slab;
    returns (values (r,r,r), axis coordinates)."""
    lo, hi = (np.asarray(b, float) for b in bounds)
    axes = [np.linspace(lo[k], hi[k], resolution) for k in range(3)]
    out = np.empty((resolution,) * 3)
    for z0 in range(0, resolution, chunk_slabs):
        z1 = min(z0 + chunk_slabs, resolution)
        X, Y, Z = np.meshgrid(axes[0], axes[1], axes[2][z0:z1],
                              indexing="ij")
        pts = np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1)
        out[:, :, z0:z1] = fn(pts).reshape(resolution, resolution, z1 - z0)
    return out, axes


def marching_cubes_fn(sdf_fn, resolution, bounds, grad_h=1e-3) -> TriangleMesh:
    """Zero-isosurface of a batched SDF callable on a resolution^3 grid."""
    if resolution < 16:
        raise ValueError("grid resolution must be at least 16")
    vol, axes = grid_eval(sdf_fn, resolution, bounds)
    if vol.min() > 0 or vol.max() < 0:
        raise NoSurface("field has no zero crossing inside the bounds")
    lo, hi = (np.asarray(b, float) for b in bounds)
    spacing = (hi - lo) / (resolution - 1)
    verts, faces, _, _ = measure.marching_cubes(vol, level=0.0,
                                                spacing=tuple(spacing))
    verts = verts + lo
    normals = fd_gradient(sdf_fn, verts, h=grad_h)
    normals /= np.maximum(np.linalg.norm(normals, axis=1, keepdims=True),
                          1e-18)
    eps = spacing.max() * 0.5
    on_bound = np.any((verts <= lo + eps) | (verts >= hi - eps), axis=1)
    boundary_tris = on_bound[faces].any(axis=1)
    return TriangleMesh(verts, faces, normals, boundary_tris)


def marching_cubes(fp, resolution, bounds, mode="independent", theta=None,
                   grad_h=None) -> TriangleMesh:
    """Extract the learned surface in canonical space."""
    which = {"full": "combined", "independent": "independent",
             "dependent": "dependent"}[mode]
    sdf_fn = lambda pts: fp.sdf_np(pts, theta, which)
    h = fp.cfg.grad_h if grad_h is None else grad_h
    return marching_cubes_fn(sdf_fn, resolution, bounds, grad_h=h)


def save_obj(path, mesh: TriangleMesh):
    with open(path, "w") as f:
        for v in mesh.vertices:
            f.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        for n in mesh.normals:
            f.write(f"vn {n[0]:.9g} {n[1]:.9g} {n[2]:.9g}\n")
        for t in mesh.triangles:
            f.write(f"f {t[0]+1}//{t[0]+1} {t[1]+1}//{t[1]+1} "
                    f"{t[2]+1}//{t[2]+1}\n")


def sample_mesh(mesh: TriangleMesh, n, rng):
    """Area-weighted surface samples with face normals. Deterministic given
    the rng state."""
    if len(mesh.triangles) == 0:
        raise ValueError("cannot sample an empty mesh")
    areas = mesh.face_areas()
    probs = areas / areas.sum()
    tri = rng.choice(len(probs), size=n, p=probs)
    u = rng.uniform(size=(n, 1))
    v = rng.uniform(size=(n, 1))
    flip = (u + v) > 1
    u = np.where(flip, 1 - u, u)
    v = np.where(flip, 1 - v, v)
    t = mesh.triangles[tri]
    a, b, c = (mesh.vertices[t[:, k]] for k in range(3))
    pts = a + u * (b - a) + v * (c - a)
    return pts, mesh.face_normals()[tri]


def chamfer_and_nc(pred: TriangleMesh, gt: TriangleMesh, n_samples=4096,
                   seed=0):
    """Bidirectional Chamfer distance (mean squared nearest-neighbor
    distance) and normal consistency (mean |cos| of matched normals).
    Sampling is seeded per mesh, so the metric is symmetric in its
    arguments."""
    if n_samples < 1000:
        raise ValueError("use at least 10^3 samples")
    pa, na = sample_mesh(pred, n_samples, np.random.default_rng(seed))
    pb, nb = sample_mesh(gt, n_samples, np.random.default_rng(seed))
    d_ab, i_ab = cKDTree(pb).query(pa)
    d_ba, i_ba = cKDTree(pa).query(pb)
    cd = 0.5 * (float(np.mean(((pa - pb[i_ab]) ** 2).sum(axis=1)))
                + float(np.mean(((pb - pa[i_ba]) ** 2).sum(axis=1))))
    nc = 0.5 * (float(np.mean(np.abs((na * nb[i_ab]).sum(axis=1))))
                + float(np.mean(np.abs((nb * na[i_ba]).sum(axis=1)))))
    return cd, nc
