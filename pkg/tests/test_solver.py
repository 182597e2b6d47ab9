import numpy as np
import pytest

from wearfit.mesh import aabb
from wearfit.sdf import build_sdf, sample
from wearfit.shapes import cylinder, grid_sheet, icosphere, tube
from wearfit.solver import (
    Contact,
    SolverParams,
    SolverState,
    SpatialHash,
    StretchConstraint,
    adjacency_csr,
    hash_build,
    hash_query,
    max_penetration,
    neighbor_pairs_brute,
    neighbor_pairs_hash,
    project_body_collision,
    project_friction,
    project_self_collision,
    project_stretch,
    resolve_penetration,
    rms_edge_strain,
)


def brute_ball_query(positions, p, radius):
    d = np.linalg.norm(positions - p, axis=1)
    return np.nonzero(d <= radius)[0]


def test_spatial_hash_matches_brute_force(rng):
    pts = rng.random((500, 3)) * 2 - 1
    h = hash_build(pts, cell_size=0.15)
    for _ in range(50):
        p = rng.random(3) * 2 - 1
        got = hash_query(h, p, 0.15)
        want = brute_ball_query(pts, p, 0.15)
        assert np.array_equal(got, want)


def test_spatial_hash_validates_cell_size():
    with pytest.raises(ValueError):
        SpatialHash(np.zeros((1, 3)), 0.0)


def test_neighbor_pairs_hash_equals_brute(rng):
    edges = np.array([[0, 1], [2, 3]], dtype=np.int64)
    indptr, indices = adjacency_csr(40, edges)
    for _ in range(10):
        pts = rng.random((40, 3))
        a = neighbor_pairs_hash(pts, 0.2, indptr, indices)
        b = neighbor_pairs_brute(pts, 0.2, indptr, indices)
        assert np.array_equal(a, b)


def test_neighbor_pairs_exclude_adjacent():
    pts = np.zeros((2, 3))
    pts[1, 0] = 0.01
    no_edges = adjacency_csr(2, np.zeros((0, 2), dtype=np.int64))
    with_edge = adjacency_csr(2, np.array([[0, 1]]))
    assert len(neighbor_pairs_hash(pts, 0.1, *no_edges)) == 1
    assert len(neighbor_pairs_hash(pts, 0.1, *with_edge)) == 0


def test_adjacency_csr_symmetric_sorted():
    indptr, indices = adjacency_csr(4, np.array([[0, 2], [0, 1], [2, 3]]))
    assert list(indices[indptr[0]:indptr[1]]) == [1, 2]
    assert list(indices[indptr[2]:indptr[3]]) == [0, 3]


def test_project_stretch_restores_rest_length():
    state = SolverState.from_positions(np.array([[0.0, 0, 0], [2.0, 0, 0]]), n_stretch=1)
    c = StretchConstraint(0, 1, rest_length=1.0)
    project_stretch(state, c, dt=1 / 60, lambda_index=0)
    d = np.linalg.norm(state.positions[0] - state.positions[1])
    assert d == pytest.approx(1.0, abs=1e-12)
    # equal masses move symmetrically
    assert state.positions[0, 0] == pytest.approx(0.5)
    assert state.lambda_stretch[0] != 0.0


def test_project_stretch_respects_compliance():
    state = SolverState.from_positions(np.array([[0.0, 0, 0], [2.0, 0, 0]]), n_stretch=1)
    c = StretchConstraint(0, 1, rest_length=1.0, compliance=1e-3)
    project_stretch(state, c, dt=1 / 60, lambda_index=0)
    d = np.linalg.norm(state.positions[0] - state.positions[1])
    assert 1.0 < d < 2.0  # compliant constraint corrects only partially


def test_stretch_constraint_validation():
    with pytest.raises(ValueError):
        StretchConstraint(1, 1, 1.0)
    with pytest.raises(ValueError):
        StretchConstraint(0, 1, 0.0)


def test_project_body_collision_pushes_to_margin():
    g = build_sdf(icosphere(3, radius=0.5), resolution=64)
    margin = 0.01
    state = SolverState.from_positions(np.array([[0.45, 0.0, 0.0]]))
    contact = project_body_collision(state, 0, g, margin, dt=1 / 60)
    assert contact is not None
    phi, _ = sample(g, state.positions[0])
    assert phi == pytest.approx(margin, abs=2e-3)
    assert contact.normal @ np.array([1.0, 0, 0]) > 0.9
    # already-separated vertex is untouched
    state2 = SolverState.from_positions(np.array([[0.8, 0.0, 0.0]]))
    assert project_body_collision(state2, 0, g, margin, dt=1 / 60) is None


def test_project_friction_static_and_kinetic():
    n = np.array([0.0, 1.0, 0.0])
    # static: small tangential slide is cancelled entirely
    state = SolverState.from_positions(np.array([[0.001, 0.0, 0.0]]))
    state.prev_positions = np.zeros((1, 3))
    project_friction(state, Contact(0, n, correction=0.01), mu=0.4)
    assert np.allclose(state.positions[0], 0.0, atol=1e-15)
    # kinetic: large slide keeps exactly mu * correction of tangential motion
    state = SolverState.from_positions(np.array([[0.1, 0.0, 0.0]]))
    state.prev_positions = np.zeros((1, 3))
    project_friction(state, Contact(0, n, correction=0.01), mu=0.4)
    assert state.positions[0, 0] == pytest.approx(0.4 * 0.01)


def test_project_self_collision_separates():
    state = SolverState.from_positions(np.array([[0.0, 0, 0], [0.05, 0, 0.0]]))
    project_self_collision(state, np.array([[0, 1]]), radius=0.1)
    assert np.linalg.norm(state.positions[0] - state.positions[1]) == pytest.approx(0.1)


def test_rms_edge_strain_oracle():
    pos = np.array([[0.0, 0, 0], [1.1, 0, 0], [0.0, 0.9, 0]])
    edges = np.array([[0, 1], [0, 2]])
    rest = np.array([1.0, 1.0])
    want = np.sqrt((0.1**2 + 0.1**2) / 2)
    assert rms_edge_strain(pos, edges, rest) == pytest.approx(want)


def test_max_penetration_oracle():
    g = build_sdf(icosphere(3, radius=0.5), resolution=64)
    inside = np.array([[0.3, 0.0, 0.0]])
    outside = np.array([[0.9, 0.0, 0.0]])
    assert max_penetration(inside, g) == pytest.approx(0.2, abs=2 * g.cell_size)
    assert max_penetration(outside, g) == 0.0


def test_resolve_sheet_on_sphere_smoke():
    body = icosphere(3, radius=0.5)
    g = build_sdf(body, resolution=64)
    sheet = grid_sheet(16, 16, 0.8, 0.8, center=(0, 0.48, 0))
    params = SolverParams.for_scale(aabb(body).diagonal)
    pos, diag = resolve_penetration(sheet, g, params)
    assert max_penetration(pos, g) <= params.penetration_tol
    edges = sheet.edges()
    rest = np.linalg.norm(sheet.vertices[edges[:, 0]] - sheet.vertices[edges[:, 1]], axis=1)
    assert rms_edge_strain(pos, edges, rest) <= 0.05
    assert len(diag) <= params.max_outer_loops
    assert diag[-1]["max_pen"] <= params.penetration_tol


def test_resolve_rejects_degenerate_proxy():
    from wearfit.mesh import TriMesh
    from wearfit.solver import SolverError

    v = np.array([[0, 0, 0], [0, 0, 0], [1, 0, 0.0]])
    m = TriMesh(v, [[0, 1, 2]])
    g = build_sdf(icosphere(2, radius=0.5), resolution=32)
    with pytest.raises(SolverError):
        resolve_penetration(m, g, SolverParams())


def test_resolve_preserves_input_mesh():
    body = icosphere(2, radius=0.5)
    g = build_sdf(body, resolution=32)
    sheet = grid_sheet(6, 6, 0.5, 0.5, center=(0, 0.45, 0))
    before = sheet.vertices.copy()
    resolve_penetration(sheet, g, SolverParams.for_scale(aabb(body).diagonal))
    assert np.array_equal(sheet.vertices, before)
