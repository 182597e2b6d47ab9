"""Quasi-static XPBD solver resolving asset-body penetration against an SDF.

Constraint order within an iteration is fixed (stretch, body collision,
friction, self-collision), Gauss-Seidel in index order, so runs are
deterministic. Gravity is never applied: the solve settles to the nearest
penetration-free equilibrium while preserving shape via stretch constraints.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .mesh import TriMesh
from .sdf import SdfGrid, _sample_with_gradient

logger = logging.getLogger(__name__)


class SolverError(RuntimeError):
    pass


class SolverDivergence(SolverError):
    def __init__(self, msg, diagnostics):
        super().__init__(msg)
        self.diagnostics = diagnostics


@dataclass
class SolverParams:
    substeps: int = 4
    iterations: int = 8
    dt: float = 1.0 / 60.0
    collision_margin: float = 1e-3
    friction_mu: float = 0.4
    self_collision_radius: float = 0.0  # 0 means derive from mean edge length
    max_outer_loops: int = 200
    penetration_tol: float = 1e-3
    stretch_compliance: float = 0.0
    damping: float = 0.98
    enable_self_collision: bool = True

    @classmethod
    def for_scale(cls, body_diagonal: float, **overrides) -> "SolverParams":
        """Defaults with length tolerances scaled to the body AABB diagonal."""
        kw = dict(
            collision_margin=1e-3 * body_diagonal,
            penetration_tol=1e-3 * body_diagonal,
        )
        kw.update(overrides)
        return cls(**kw)


@dataclass
class SolverState:
    positions: np.ndarray
    prev_positions: np.ndarray
    inv_mass: np.ndarray
    lambda_stretch: np.ndarray

    @classmethod
    def from_positions(cls, positions: np.ndarray, n_stretch: int = 0) -> "SolverState":
        p = np.asarray(positions, dtype=np.float64).copy()
        return cls(p, p.copy(), np.ones(len(p)), np.zeros(n_stretch))


@dataclass(frozen=True)
class StretchConstraint:
    i: int
    j: int
    rest_length: float
    compliance: float = 0.0

    def __post_init__(self):
        if self.i == self.j:
            raise ValueError("stretch constraint endpoints must differ")
        if self.rest_length <= 0:
            raise ValueError("rest_length must be positive")


@dataclass(frozen=True)
class Contact:
    vertex: int
    normal: np.ndarray
    correction: float  # magnitude of the normal position correction


# ---------------------------------------------------------------------------
# spatial hash


class SpatialHash:
    """Uniform-grid point hash: exact closed-ball queries over the 27-cell
    neighborhood (requires query radius <= 2 * cell_size)."""

    def __init__(self, positions: np.ndarray, cell_size: float):
        if cell_size <= 0:
            raise ValueError("cell_size must be positive")
        self.cell_size = cell_size
        self.positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        self.table: dict[tuple[int, int, int], list[int]] = {}
        cells = np.floor(self.positions / cell_size).astype(np.int64)
        for idx, c in enumerate(cells):
            self.table.setdefault((int(c[0]), int(c[1]), int(c[2])), []).append(idx)

    def query(self, p: np.ndarray, radius: float) -> np.ndarray:
        p = np.asarray(p, dtype=np.float64)
        c = np.floor(p / self.cell_size).astype(np.int64)
        found = []
        for di in (-1, 0, 1):
            for dj in (-1, 0, 1):
                for dk in (-1, 0, 1):
                    bucket = self.table.get((int(c[0] + di), int(c[1] + dj), int(c[2] + dk)))
                    if bucket:
                        found.extend(bucket)
        if not found:
            return np.zeros(0, dtype=np.int64)
        found = np.array(sorted(found), dtype=np.int64)
        d = np.linalg.norm(self.positions[found] - p, axis=1)
        return found[d <= radius]


def hash_build(positions: np.ndarray, cell_size: float) -> SpatialHash:
    return SpatialHash(positions, cell_size)


def hash_query(h: SpatialHash, p: np.ndarray, radius: float) -> np.ndarray:
    return h.query(p, radius)


# ---------------------------------------------------------------------------
# neighbor-pair generation (hash-accelerated and brute force)


@njit(cache=True)
def _pairs_kernel(pos, order, keys, cell, radius, adj_indptr, adj_indices, out, count_only):
    n = pos.shape[0]
    r2 = radius * radius
    m = 0
    for i in range(n):
        ci = int(np.floor(pos[i, 0] / cell))
        cj = int(np.floor(pos[i, 1] / cell))
        ck = int(np.floor(pos[i, 2] / cell))
        for di in range(-1, 2):
            for dj in range(-1, 2):
                for dk in range(-1, 2):
                    key = ((ci + di) * 73856093) ^ ((cj + dj) * 19349663) ^ ((ck + dk) * 83492791)
                    lo = np.searchsorted(keys, key)
                    hi = np.searchsorted(keys, key, side="right")
                    for s in range(lo, hi):
                        j = order[s]
                        if j <= i:
                            continue
                        # verify exact cell (hash collisions possible)
                        if int(np.floor(pos[j, 0] / cell)) != ci + di:
                            continue
                        if int(np.floor(pos[j, 1] / cell)) != cj + dj:
                            continue
                        if int(np.floor(pos[j, 2] / cell)) != ck + dk:
                            continue
                        dx = pos[i, 0] - pos[j, 0]
                        dy = pos[i, 1] - pos[j, 1]
                        dz = pos[i, 2] - pos[j, 2]
                        if dx * dx + dy * dy + dz * dz > r2:
                            continue
                        # skip edge-adjacent vertices
                        skip = False
                        for a in range(adj_indptr[i], adj_indptr[i + 1]):
                            if adj_indices[a] == j:
                                skip = True
                                break
                        if skip:
                            continue
                        if not count_only:
                            out[m, 0] = i
                            out[m, 1] = j
                        m += 1
    return m


def _hash_keys(pos, cell):
    c = np.floor(pos / cell).astype(np.int64)
    keys = (c[:, 0] * 73856093) ^ (c[:, 1] * 19349663) ^ (c[:, 2] * 83492791)
    order = np.argsort(keys, kind="stable").astype(np.int64)
    return keys[order], order


def neighbor_pairs_hash(pos: np.ndarray, radius: float, adj_indptr, adj_indices) -> np.ndarray:
    keys, order = _hash_keys(pos, radius)
    n = _pairs_kernel(pos, order, keys, radius, radius, adj_indptr, adj_indices,
                      np.zeros((1, 2), dtype=np.int64), True)
    out = np.zeros((n, 2), dtype=np.int64)
    _pairs_kernel(pos, order, keys, radius, radius, adj_indptr, adj_indices, out, False)
    return out[np.lexsort((out[:, 1], out[:, 0]))]


def neighbor_pairs_brute(pos: np.ndarray, radius: float, adj_indptr, adj_indices) -> np.ndarray:
    n = len(pos)
    d = np.linalg.norm(pos[:, None, :] - pos[None, :, :], axis=2)
    ii, jj = np.nonzero((d <= radius) & (np.arange(n)[:, None] < np.arange(n)[None, :]))
    keep = []
    for i, j in zip(ii, jj):
        if j not in adj_indices[adj_indptr[i]:adj_indptr[i + 1]]:
            keep.append((i, j))
    out = np.array(keep, dtype=np.int64).reshape(-1, 2)
    return out[np.lexsort((out[:, 1], out[:, 0]))]


def adjacency_csr(n_vertices: int, edges: np.ndarray):
    """Symmetric adjacency in CSR form with sorted neighbor lists."""
    neigh = [[] for _ in range(n_vertices)]
    for a, b in edges:
        neigh[a].append(b)
        neigh[b].append(a)
    indptr = np.zeros(n_vertices + 1, dtype=np.int64)
    for i, ns in enumerate(neigh):
        indptr[i + 1] = indptr[i] + len(ns)
    indices = np.zeros(indptr[-1], dtype=np.int64)
    for i, ns in enumerate(neigh):
        indices[indptr[i]:indptr[i + 1]] = sorted(ns)
    return indptr, indices


# ---------------------------------------------------------------------------
# single-constraint projections (reference implementations)


def project_stretch(state: SolverState, c: StretchConstraint, dt: float,
                    lambda_index: int | None = None) -> None:
    x = state.positions
    d = x[c.i] - x[c.j]
    length = float(np.linalg.norm(d))
    if length < 1e-12:
        logger.warning("project_stretch: coincident vertices %d,%d skipped", c.i, c.j)
        return
    wi, wj = state.inv_mass[c.i], state.inv_mass[c.j]
    wsum = wi + wj
    if wsum == 0:
        return
    alpha_t = c.compliance / (dt * dt)
    lam = state.lambda_stretch[lambda_index] if lambda_index is not None else 0.0
    constraint = length - c.rest_length
    dlam = (-constraint - alpha_t * lam) / (wsum + alpha_t)
    n = d / length
    x[c.i] += wi * dlam * n
    x[c.j] -= wj * dlam * n
    if lambda_index is not None:
        state.lambda_stretch[lambda_index] = lam + dlam


def project_body_collision(state: SolverState, vertex: int, sdf: SdfGrid,
                           margin: float, dt: float) -> Contact | None:
    from .sdf import sample

    x = state.positions[vertex]
    phi, grad = sample(sdf, x)
    if phi >= margin:
        return None
    g2 = float(grad @ grad)
    if g2 < 1e-16:
        logger.warning("project_body_collision: zero SDF gradient at vertex %d", vertex)
        grad = np.array([0.0, 1.0, 0.0])
        g2 = 1.0
    corr = (margin - phi)
    state.positions[vertex] = x + corr * grad / g2
    n = grad / np.sqrt(g2)
    return Contact(vertex=vertex, normal=n, correction=corr / np.sqrt(g2) * 1.0)


def project_friction(state: SolverState, contact: Contact, mu: float) -> None:
    if mu <= 0:
        return
    i = contact.vertex
    dx = state.positions[i] - state.prev_positions[i]
    n = contact.normal
    dx_t = dx - (dx @ n) * n
    mag = float(np.linalg.norm(dx_t))
    limit = mu * contact.correction
    if mag < 1e-15:
        return
    if mag <= limit:
        state.positions[i] -= dx_t  # static: cancel all tangential motion
    else:
        state.positions[i] -= dx_t * (1.0 - limit / mag)  # kinetic: clamp to limit


def project_self_collision(state: SolverState, pairs: np.ndarray, radius: float) -> None:
    x = state.positions
    for i, j in pairs:
        d = x[i] - x[j]
        length = float(np.linalg.norm(d))
        if length >= radius:
            continue
        if length < 1e-12:
            d = np.array([1.0, 0.0, 0.0])  # deterministic separation axis
            length = 1e-12
        wi, wj = state.inv_mass[i], state.inv_mass[j]
        wsum = wi + wj
        if wsum == 0:
            continue
        corr = (radius - length) / wsum
        n = d / length
        x[i] += wi * corr * n
        x[j] -= wj * corr * n


# ---------------------------------------------------------------------------
# batched kernels (same math, sequential Gauss-Seidel order)


@njit(cache=True)
def _kernel_stretch(pos, inv_mass, edges, rest, compliance, dt, lam):
    alpha_t = compliance / (dt * dt)
    for e in range(edges.shape[0]):
        i = edges[e, 0]
        j = edges[e, 1]
        dx = pos[i, 0] - pos[j, 0]
        dy = pos[i, 1] - pos[j, 1]
        dz = pos[i, 2] - pos[j, 2]
        length = np.sqrt(dx * dx + dy * dy + dz * dz)
        if length < 1e-12:
            continue
        wi = inv_mass[i]
        wj = inv_mass[j]
        wsum = wi + wj
        if wsum == 0.0:
            continue
        c = length - rest[e]
        dlam = (-c - alpha_t * lam[e]) / (wsum + alpha_t)
        lam[e] += dlam
        nx = dx / length
        ny = dy / length
        nz = dz / length
        pos[i, 0] += wi * dlam * nx
        pos[i, 1] += wi * dlam * ny
        pos[i, 2] += wi * dlam * nz
        pos[j, 0] -= wj * dlam * nx
        pos[j, 1] -= wj * dlam * ny
        pos[j, 2] -= wj * dlam * nz


@njit(cache=True)
def _kernel_body_collision(pos, inv_mass, values, ox, oy, oz, h, margin,
                           c_flag, c_normal, c_corr):
    bad_grad = 0
    for i in range(pos.shape[0]):
        c_flag[i] = 0
        if inv_mass[i] == 0.0:
            continue
        phi, gx, gy, gz = _sample_with_gradient(values, ox, oy, oz, h,
                                                pos[i, 0], pos[i, 1], pos[i, 2])
        if phi >= margin:
            continue
        g2 = gx * gx + gy * gy + gz * gz
        if g2 < 1e-16:
            gx, gy, gz = 0.0, 1.0, 0.0
            g2 = 1.0
            bad_grad += 1
        corr = margin - phi
        pos[i, 0] += corr * gx / g2
        pos[i, 1] += corr * gy / g2
        pos[i, 2] += corr * gz / g2
        gn = np.sqrt(g2)
        c_flag[i] = 1
        c_normal[i, 0] = gx / gn
        c_normal[i, 1] = gy / gn
        c_normal[i, 2] = gz / gn
        c_corr[i] = corr / gn
    return bad_grad


@njit(cache=True)
def _kernel_friction(pos, prev, c_flag, c_normal, c_corr, mu):
    for i in range(pos.shape[0]):
        if c_flag[i] == 0:
            continue
        dx = pos[i, 0] - prev[i, 0]
        dy = pos[i, 1] - prev[i, 1]
        dz = pos[i, 2] - prev[i, 2]
        nx = c_normal[i, 0]
        ny = c_normal[i, 1]
        nz = c_normal[i, 2]
        dn = dx * nx + dy * ny + dz * nz
        tx = dx - dn * nx
        ty = dy - dn * ny
        tz = dz - dn * nz
        mag = np.sqrt(tx * tx + ty * ty + tz * tz)
        if mag < 1e-15:
            continue
        limit = mu * c_corr[i]
        if mag <= limit:
            pos[i, 0] -= tx
            pos[i, 1] -= ty
            pos[i, 2] -= tz
        else:
            f = 1.0 - limit / mag
            pos[i, 0] -= tx * f
            pos[i, 1] -= ty * f
            pos[i, 2] -= tz * f


@njit(cache=True)
def _kernel_pairs(pos, inv_mass, pairs, radius):
    for e in range(pairs.shape[0]):
        i = pairs[e, 0]
        j = pairs[e, 1]
        dx = pos[i, 0] - pos[j, 0]
        dy = pos[i, 1] - pos[j, 1]
        dz = pos[i, 2] - pos[j, 2]
        length = np.sqrt(dx * dx + dy * dy + dz * dz)
        if length >= radius:
            continue
        if length < 1e-12:
            dx, dy, dz = 1.0, 0.0, 0.0
            length = 1.0
        else:
            dx /= length
            dy /= length
            dz /= length
        wi = inv_mass[i]
        wj = inv_mass[j]
        wsum = wi + wj
        if wsum == 0.0:
            continue
        corr = (radius - length) / wsum
        pos[i, 0] += wi * corr * dx
        pos[i, 1] += wi * corr * dy
        pos[i, 2] += wi * corr * dz
        pos[j, 0] -= wj * corr * dx
        pos[j, 1] -= wj * corr * dy
        pos[j, 2] -= wj * corr * dz


# ---------------------------------------------------------------------------
# full solve


def max_penetration(positions: np.ndarray, sdf: SdfGrid) -> float:
    from .sdf import sample

    vals, _ = sample(sdf, positions)
    return float(max(0.0, -vals.min()))


def rms_edge_strain(positions: np.ndarray, edges: np.ndarray, rest: np.ndarray) -> float:
    if not len(edges):
        return 0.0
    lengths = np.linalg.norm(positions[edges[:, 0]] - positions[edges[:, 1]], axis=1)
    return float(np.sqrt(np.mean(((lengths - rest) / rest) ** 2)))


def resolve_penetration(proxy: TriMesh, sdf: SdfGrid, params: SolverParams,
                        inv_mass: np.ndarray | None = None,
                        use_hash: bool = True):
    """Deform ``proxy`` to a penetration-free state against the body SDF.

    Returns (positions, diagnostics): the equilibrium positions (rest lengths
    are never rewritten; the caller treats the result as the asset's updated
    pose) and one diagnostics dict per outer loop.
    """
    edges = proxy.edges()
    pos = proxy.vertices.copy()
    rest = np.linalg.norm(pos[edges[:, 0]] - pos[edges[:, 1]], axis=1)
    if np.any(rest < 1e-12):
        raise SolverError("proxy has zero-length edges")
    n = len(pos)
    w = np.ones(n) if inv_mass is None else np.asarray(inv_mass, dtype=np.float64)
    vel = np.zeros_like(pos)
    lam = np.zeros(len(edges))
    c_flag = np.zeros(n, dtype=np.int8)
    c_normal = np.zeros((n, 3))
    c_corr = np.zeros(n)
    radius = params.self_collision_radius
    if radius <= 0 and params.enable_self_collision:
        radius = 0.5 * float(rest.mean()) if len(rest) else 0.0
    indptr, indices = adjacency_csr(n, edges)
    o = sdf.origin
    dt = params.dt / params.substeps

    diagnostics: list[dict] = []
    best_pos = pos.copy()
    best_pen = max_penetration(pos, sdf)
    pair_fn = neighbor_pairs_hash if use_hash else neighbor_pairs_brute

    for loop in range(params.max_outer_loops):
        pen0 = max_penetration(pos, sdf)
        if pen0 <= params.penetration_tol:
            diagnostics.append({
                "loop": loop, "max_pen": pen0,
                "rms_strain": rms_edge_strain(pos, edges, rest),
                "active_contacts": 0,
            })
            return pos, diagnostics
        active = 0
        for _ in range(params.substeps):
            prev = pos.copy()
            pos = pos + vel * dt
            lam[:] = 0.0
            pairs = (pair_fn(pos, radius, indptr, indices)
                     if params.enable_self_collision and radius > 0
                     else np.zeros((0, 2), dtype=np.int64))
            for _ in range(params.iterations):
                _kernel_stretch(pos, w, edges, rest, params.stretch_compliance, dt, lam)
                _kernel_body_collision(pos, w, sdf.values, o[0], o[1], o[2],
                                       sdf.cell_size, params.collision_margin,
                                       c_flag, c_normal, c_corr)
                _kernel_friction(pos, prev, c_flag, c_normal, c_corr, params.friction_mu)
                if len(pairs):
                    _kernel_pairs(pos, w, pairs, radius)
            active += int(c_flag.sum())
            vel = (pos - prev) / dt * params.damping
        if not np.all(np.isfinite(pos)):
            raise SolverDivergence("solver diverged to non-finite positions", diagnostics)
        pen = max_penetration(pos, sdf)
        diagnostics.append({
            "loop": loop, "max_pen": pen,
            "rms_strain": rms_edge_strain(pos, edges, rest),
            "active_contacts": active,
        })
        if pen < best_pen:
            best_pen = pen
            best_pos = pos.copy()
        if pen <= params.penetration_tol:
            return pos, diagnostics
    warnings.warn("resolve_penetration: did not reach penetration tolerance, "
                  f"best max penetration {best_pen:.3g}")
    return best_pos, diagnostics
