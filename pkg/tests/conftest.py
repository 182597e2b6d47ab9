"""Shared fixtures and independent oracles for the test suite."""

from __future__ import annotations

import numpy as np
import pytest

from wearfit.mesh import TriMesh
from wearfit.shapes import blob, cube, cylinder, grid_sheet, icosphere, torus, tube


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def unit_sphere():
    return icosphere(subdivisions=3, radius=1.0)


@pytest.fixture(scope="session")
def small_sphere():
    return icosphere(subdivisions=2, radius=0.5)


@pytest.fixture(scope="session")
def asym_blob():
    return blob()


def with_canonical(mesh: TriMesh) -> TriMesh:
    """Attach canonical coordinates: vertex position normalized to the
    mesh's own bounding box."""
    lo = mesh.vertices.min(axis=0)
    hi = mesh.vertices.max(axis=0)
    span = np.where(hi - lo > 1e-12, hi - lo, 1.0)
    return TriMesh(mesh.vertices, mesh.faces, (mesh.vertices - lo) / span)


def ray_parity_inside(points: np.ndarray, mesh: TriMesh,
                      direction=(0.577215, 0.423310, 0.699001)) -> np.ndarray:
    """Point-in-polyhedron by ray-crossing parity (Moller-Trumbore),
    vectorized over faces per probe chunk. Independent of the package's
    winding-number machinery."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    d = np.asarray(direction, dtype=np.float64)
    d = d / np.linalg.norm(d)
    v0 = mesh.vertices[mesh.faces[:, 0]]
    e1 = mesh.vertices[mesh.faces[:, 1]] - v0
    e2 = mesh.vertices[mesh.faces[:, 2]] - v0
    pvec = np.cross(d, e2)
    det = np.einsum("fc,fc->f", e1, pvec)
    ok = np.abs(det) > 1e-14
    inv_det = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    inside = np.empty(len(pts), dtype=bool)
    chunk = 256
    for s in range(0, len(pts), chunk):
        p = pts[s:s + chunk]
        tvec = p[:, None, :] - v0[None, :, :]  # (m, f, 3)
        u = np.einsum("mfc,fc->mf", tvec, pvec) * inv_det
        qvec = np.cross(tvec, e1[None, :, :])
        v = np.einsum("mfc,c->mf", qvec, d) * inv_det
        t = np.einsum("mfc,fc->mf", qvec, e2) * inv_det
        hit = ok[None, :] & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > 0)
        inside[s:s + chunk] = hit.sum(axis=1) % 2 == 1
    return inside


def geodesic_angle_deg(r_a: np.ndarray, r_b: np.ndarray) -> float:
    """Angle of the relative rotation between two rotation matrices."""
    c = 0.5 * (np.trace(r_a.T @ r_b) - 1.0)
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


def two_spheres() -> TriMesh:
    """Concentric spheres as one mesh; the inner one is fully occluded."""
    outer = icosphere(subdivisions=3, radius=1.0)
    inner = icosphere(subdivisions=2, radius=0.5)
    verts = np.concatenate([outer.vertices, inner.vertices])
    faces = np.concatenate([outer.faces, inner.faces + outer.n_vertices])
    return TriMesh(verts, faces)


__all__ = [
    "with_canonical", "ray_parity_inside", "geodesic_angle_deg", "two_spheres",
]
