"""Single-layer proxy construction: visibility culling from a surrounding
camera rig, centroidal-Voronoi mesh simplification, and weighted displacement
transfer back to the visual mesh."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .mesh import (
    Aabb,
    TriMesh,
    aabb,
    face_areas,
    is_manifold,
    prune_unreferenced,
    remove_nonmanifold,
    save_mesh,
    load_mesh,
)
from .render import OrthoCamera, rasterize_face_ids

logger = logging.getLogger(__name__)


class ProxyError(ValueError):
    pass


# ---------------------------------------------------------------------------
# visibility culling


@dataclass(frozen=True)
class CullCameraRig:
    positions: np.ndarray  # (k, 3) viewpoints around the body center
    resolution: int = 1024

    def __post_init__(self):
        object.__setattr__(self, "positions",
                           np.asarray(self.positions, dtype=np.float64).reshape(-1, 3))
        if self.count < 6:
            raise ProxyError("rig needs at least 6 viewpoints")

    @property
    def count(self) -> int:
        return len(self.positions)

    @property
    def center(self) -> np.ndarray:
        return self.positions.mean(axis=0)


def default_rig(body_box: Aabb, resolution: int = 1024) -> CullCameraRig:
    """26 viewpoints (cube face, edge, and corner directions) at twice the
    body's AABB half-diagonal."""
    dirs = []
    for dx in (-1, 0, 1):
        for dy in (-1, 0, 1):
            for dz in (-1, 0, 1):
                if dx == dy == dz == 0:
                    continue
                d = np.array([dx, dy, dz], dtype=np.float64)
                dirs.append(d / np.linalg.norm(d))
    radius = body_box.diagonal  # = 2 * half-diagonal
    pos = body_box.center + radius * np.array(dirs)
    return CullCameraRig(positions=pos, resolution=resolution)


def _camera_toward(center: np.ndarray, position: np.ndarray,
                   half_extent: float, resolution: int) -> OrthoCamera:
    d = position - center
    r = np.linalg.norm(d)
    d = d / r
    elevation = np.rad2deg(np.arcsin(np.clip(d[1], -1.0, 1.0)))
    azimuth = np.rad2deg(np.arctan2(d[0], d[2]))
    return OrthoCamera(azimuth=azimuth, elevation=elevation,
                       half_extent=half_extent, image_size=resolution,
                       center=tuple(center))


def visibility_cull(asset: TriMesh, rig: CullCameraRig) -> TriMesh:
    """Keep exactly the faces that win the depth buffer in at least one pixel
    of at least one rig view. The result is typically open: that is the
    point (single outer layer of a thick, watertight asset)."""
    if asset.n_faces == 0:
        raise ProxyError("cannot cull empty mesh")
    center = rig.center
    he = float(np.max(np.linalg.norm(asset.vertices - center, axis=1))) * 1.02
    visible = np.zeros(asset.n_faces, dtype=bool)
    for p in rig.positions:
        cam = _camera_toward(center, p, he, rig.resolution)
        face_id, _, _ = rasterize_face_ids(asset, cam)
        ids = np.unique(face_id)
        visible[ids[ids >= 0]] = True
    if not visible.any():
        raise ProxyError("no faces visible from the rig (fully occluded input)")
    return prune_unreferenced(TriMesh(asset.vertices, asset.faces[visible],
                                      asset.canonical_coords))


# ---------------------------------------------------------------------------
# centroidal Voronoi simplification


def _vertex_masses(mesh: TriMesh) -> np.ndarray:
    areas = face_areas(mesh)
    m = np.zeros(mesh.n_vertices)
    for k in range(3):
        np.add.at(m, mesh.faces[:, k], areas / 3.0)
    return m


def _farthest_point_seeds(verts: np.ndarray, k: int) -> np.ndarray:
    n = len(verts)
    seeds = np.empty(k, dtype=np.int64)
    seeds[0] = 0
    dist = np.linalg.norm(verts - verts[0], axis=1)
    for s in range(1, k):
        seeds[s] = int(np.argmax(dist))
        dist = np.minimum(dist, np.linalg.norm(verts - verts[seeds[s]], axis=1))
    return seeds


def _grow_labels(neigh: list[list[int]], seeds: np.ndarray, n: int) -> np.ndarray:
    labels = np.full(n, -1, dtype=np.int64)
    frontier = list(seeds)
    for lab, s in enumerate(seeds):
        labels[s] = lab
    head = 0
    while head < len(frontier):
        v = frontier[head]
        head += 1
        for u in neigh[v]:
            if labels[u] < 0:
                labels[u] = labels[v]
                frontier.append(u)
    # disconnected leftovers: nearest seed by euclidean distance
    left = np.nonzero(labels < 0)[0]
    if len(left):
        for v in left:
            labels[v] = -1
    return labels


def cvt_cluster(mesh: TriMesh, k: int, max_passes: int = 60):
    """Partition mesh vertices into k connected clusters by boundary swaps
    minimizing the area-weighted centroidal Voronoi energy on the mesh graph.

    Returns (labels, energy_trace)."""
    n = mesh.n_vertices
    if k < 4 or k > n:
        raise ProxyError("target_clusters must be in [4, vertex_count]")
    verts = mesh.vertices
    mass = _vertex_masses(mesh)
    mass = np.maximum(mass, 1e-12 * max(mass.max(), 1e-30))
    edges = mesh.edges()
    neigh: list[list[int]] = [[] for _ in range(n)]
    for a, b in edges:
        neigh[a].append(int(b))
        neigh[b].append(int(a))

    seeds = _farthest_point_seeds(verts, k)
    labels = _grow_labels(neigh, seeds, n)
    # unreachable vertices (disconnected from all seeds): nearest seed
    left = np.nonzero(labels < 0)[0]
    if len(left):
        tree = cKDTree(verts[seeds])
        _, near = tree.query(verts[left])
        labels[left] = near

    # cluster accumulators
    m_sum = np.zeros(k)
    p_sum = np.zeros((k, 3))
    cnt = np.zeros(k, dtype=np.int64)
    np.add.at(m_sum, labels, mass)
    np.add.at(p_sum, labels, mass[:, None] * verts)
    np.add.at(cnt, labels, 1)

    total_second_moment = float(np.sum(mass * np.einsum("ij,ij->i", verts, verts)))

    def energy() -> float:
        with np.errstate(invalid="ignore", divide="ignore"):
            f = np.where(m_sum > 0, np.einsum("ij,ij->i", p_sum, p_sum) / np.maximum(m_sum, 1e-300), 0.0)
        return total_second_moment - float(f.sum())

    trace = [energy()]
    for _ in range(max_passes):
        changed = 0
        for v in range(n):
            a = labels[v]
            if cnt[a] <= 1:
                continue
            mv = mass[v]
            xv = verts[v]
            best_gain = 1e-12
            best_b = -1
            fa_old = p_sum[a] @ p_sum[a] / m_sum[a]
            pa_new = p_sum[a] - mv * xv
            ma_new = m_sum[a] - mv
            if ma_new <= 0:
                continue
            fa_new = pa_new @ pa_new / ma_new
            seen = set()
            for u in neigh[v]:
                b = labels[u]
                if b == a or b in seen:
                    continue
                seen.add(b)
                fb_old = p_sum[b] @ p_sum[b] / m_sum[b]
                pb_new = p_sum[b] + mv * xv
                fb_new = pb_new @ pb_new / (m_sum[b] + mv)
                gain = (fa_new + fb_new) - (fa_old + fb_old)
                if gain > best_gain:
                    best_gain = gain
                    best_b = b
            if best_b >= 0:
                b = best_b
                p_sum[a] -= mv * xv
                m_sum[a] -= mv
                cnt[a] -= 1
                p_sum[b] += mv * xv
                m_sum[b] += mv
                cnt[b] += 1
                labels[v] = b
                changed += 1
        trace.append(energy())
        if changed == 0:
            break

    labels = _fix_cluster_connectivity(labels, neigh, verts, mass, k)
    return labels, trace


def _fix_cluster_connectivity(labels, neigh, verts, mass, k):
    """Split disconnected clusters: keep the largest component, reassign the
    rest to the adjacent cluster with the longest shared boundary."""
    n = len(labels)
    for _ in range(4):
        moved = 0
        for lab in range(k):
            members = np.nonzero(labels == lab)[0]
            if len(members) <= 1:
                continue
            member_set = set(members.tolist())
            comps = []
            seen: set[int] = set()
            for v in members:
                if v in seen:
                    continue
                comp = [int(v)]
                seen.add(int(v))
                head = 0
                while head < len(comp):
                    u = comp[head]
                    head += 1
                    for w in neigh[u]:
                        if w in member_set and w not in seen:
                            seen.add(w)
                            comp.append(w)
                comps.append(comp)
            if len(comps) <= 1:
                continue
            comps.sort(key=len, reverse=True)
            for comp in comps[1:]:
                counts: dict[int, int] = {}
                for v in comp:
                    for u in neigh[v]:
                        lu = labels[u]
                        if lu != lab:
                            counts[lu] = counts.get(lu, 0) + 1
                target = max(sorted(counts), key=lambda key: counts[key]) if counts else lab
                for v in comp:
                    labels[v] = target
                    moved += 1
        if moved == 0:
            break
    return labels


def cvt_simplify(mesh: TriMesh, target_clusters: int,
                 return_trace: bool = False):
    """Uniform simplification: cluster vertices into a centroidal Voronoi
    partition, place one output vertex per cluster at its area-weighted
    centroid, and emit one triangle per input face whose corners span three
    distinct clusters."""
    labels, trace = cvt_cluster(mesh, target_clusters)
    k = target_clusters
    mass = _vertex_masses(mesh)
    mass = np.maximum(mass, 1e-12 * max(mass.max(), 1e-30))
    m_sum = np.zeros(k)
    p_sum = np.zeros((k, 3))
    np.add.at(m_sum, labels, mass)
    np.add.at(p_sum, labels, mass[:, None] * mesh.vertices)

    fl = labels[mesh.faces]
    distinct = (fl[:, 0] != fl[:, 1]) & (fl[:, 1] != fl[:, 2]) & (fl[:, 0] != fl[:, 2])
    tris = fl[distinct]
    # dedupe by unordered triple, keep first orientation
    seen: set[tuple[int, int, int]] = set()
    out_faces = []
    for tri in tris:
        key = tuple(sorted(tri.tolist()))
        if key in seen:
            continue
        seen.add(key)
        out_faces.append(tri.tolist())
    if not out_faces:
        raise ProxyError("target_clusters too small to triangulate")

    used = sorted({i for f in out_faces for i in f} | set(np.nonzero(m_sum > 0)[0].tolist()))
    remap = {old: new for new, old in enumerate(used)}
    centroids = np.array([p_sum[i] / m_sum[i] for i in used])
    faces = np.array([[remap[a] for a in f] for f in out_faces], dtype=np.int64)
    out = prune_unreferenced(TriMesh(centroids, faces))
    out = remove_nonmanifold(out)
    if return_trace:
        return out, trace
    return out


# ---------------------------------------------------------------------------
# LBS weights and deformation transfer


@dataclass(frozen=True)
class ProxySkin:
    proxy: TriMesh
    rest_proxy_vertices: np.ndarray
    weight_indices: np.ndarray  # (n_visual, k) proxy vertex indices
    weight_values: np.ndarray  # (n_visual, k), nonnegative, rows sum to 1

    def __post_init__(self):
        wi = np.asarray(self.weight_indices, dtype=np.int64)
        wv = np.asarray(self.weight_values, dtype=np.float64)
        object.__setattr__(self, "weight_indices", wi)
        object.__setattr__(self, "weight_values", wv)
        object.__setattr__(self, "rest_proxy_vertices",
                           np.asarray(self.rest_proxy_vertices, dtype=np.float64))
        if wi.shape != wv.shape:
            raise ProxyError("weight arrays must have the same shape")
        if wv.size:
            if wv.min() < -1e-9:
                raise ProxyError("weights must be nonnegative")
            if np.abs(wv.sum(axis=1) - 1.0).max() > 1e-6:
                raise ProxyError("weights must sum to 1 per vertex")
            if wi.min() < 0 or wi.max() >= self.proxy.n_vertices:
                raise ProxyError("weight index out of range")

    @property
    def weights(self) -> list[list[tuple[int, float]]]:
        """Per visual vertex, the (proxy index, weight) pairs."""
        return [
            [(int(i), float(w)) for i, w in zip(ri, rw)]
            for ri, rw in zip(self.weight_indices, self.weight_values)
        ]


def compute_lbs_weights(visual_vertices: np.ndarray, proxy_vertices: np.ndarray,
                        k: int = 4):
    """Inverse-distance weights over the k nearest rest-proxy vertices."""
    k = min(k, len(proxy_vertices))
    tree = cKDTree(proxy_vertices)
    dist, idx = tree.query(visual_vertices, k=k)
    if k == 1:
        dist = dist[:, None]
        idx = idx[:, None]
    inv = 1.0 / np.maximum(dist, 1e-12)
    w = inv / inv.sum(axis=1, keepdims=True)
    # exact coincidence: all weight to the nearest
    exact = dist[:, 0] < 1e-12
    if np.any(exact):
        w[exact] = 0.0
        w[exact, 0] = 1.0
    return idx.astype(np.int64), w


def build_proxy(asset: TriMesh, body: TriMesh, rig: CullCameraRig | None = None,
                target_clusters: int | None = None) -> ProxySkin:
    """Full proxy pipeline: visibility culling, CVT simplification, manifold
    repair, and LBS weights from the visual mesh to the proxy."""
    if rig is None:
        rig = default_rig(aabb(body))
    culled = visibility_cull(asset, rig)
    if target_clusters is None:
        target_clusters = min(4000, max(4, -(-culled.n_faces // 4)))
    target_clusters = min(target_clusters, culled.n_vertices)
    proxy = cvt_simplify(culled, target_clusters)
    proxy = remove_nonmanifold(proxy)
    if not is_manifold(proxy):
        raise ProxyError("proxy failed the manifold predicate after repair")
    idx, w = compute_lbs_weights(asset.vertices, proxy.vertices)
    return ProxySkin(proxy=proxy, rest_proxy_vertices=proxy.vertices.copy(),
                     weight_indices=idx, weight_values=w)


def propagate_deformation(skin: ProxySkin, deformed_proxy_vertices: np.ndarray,
                          visual: TriMesh) -> TriMesh:
    """Weighted displacement transfer: v' = v + sum_j w_j (p'_j - p_j)."""
    d = np.asarray(deformed_proxy_vertices, dtype=np.float64)
    if d.shape != skin.rest_proxy_vertices.shape:
        raise ProxyError("deformed vertex count must match proxy vertex count")
    disp = d - skin.rest_proxy_vertices
    delta = np.einsum("nk,nkc->nc", skin.weight_values, disp[skin.weight_indices])
    return TriMesh(visual.vertices + delta, visual.faces, visual.canonical_coords)


# ---------------------------------------------------------------------------
# serialization


def save_proxy_skin(skin: ProxySkin, mesh_path, weights_path) -> None:
    save_mesh(skin.proxy, mesh_path)
    payload = {
        "k": int(skin.weight_indices.shape[1]) if skin.weight_indices.size else 0,
        "rest_proxy_vertices": skin.rest_proxy_vertices.tolist(),
        "indices": skin.weight_indices.tolist(),
        "weights": skin.weight_values.tolist(),
    }
    with open(weights_path, "w") as fh:
        json.dump(payload, fh)


def load_proxy_skin(mesh_path, weights_path) -> ProxySkin:
    proxy = load_mesh(mesh_path)
    with open(weights_path) as fh:
        payload = json.load(fh)
    return ProxySkin(
        proxy=proxy,
        rest_proxy_vertices=np.asarray(payload["rest_proxy_vertices"]),
        weight_indices=np.asarray(payload["indices"], dtype=np.int64),
        weight_values=np.asarray(payload["weights"]),
    )
