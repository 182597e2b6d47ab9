"""Similarity-transform estimation from multiview silhouettes.

The transform y = s * R(omega) * x + t (7 parameters) is fitted by
minimizing the mean absolute pixel difference between rendered soft
silhouettes and the input silhouettes, using Adam over central
finite-difference gradients.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .mesh import TriMesh
from .render import (
    OrthoCamera,
    SilhouetteImage,
    rasterize_silhouette,
    signed_boundary_distance,
    soft_alpha,
)

logger = logging.getLogger(__name__)


class FitError(ValueError):
    pass


@dataclass
class Sim3Params:
    s: float = 1.0
    omega: np.ndarray = field(default_factory=lambda: np.zeros(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.omega = np.asarray(self.omega, dtype=np.float64).reshape(3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if self.s <= 0:
            raise FitError("scale must be positive")

    def as_vector(self) -> np.ndarray:
        return np.concatenate([[self.s], self.omega, self.t])

    @classmethod
    def from_vector(cls, p: np.ndarray) -> "Sim3Params":
        return cls(s=float(p[0]), omega=p[1:4].copy(), t=p[4:7].copy())

    def to_dict(self) -> dict:
        return {"s": self.s, "omega": self.omega.tolist(), "t": self.t.tolist()}


@dataclass
class FitConfig:
    learning_rate: float = 0.05  # for s and omega
    translation_lr: float | None = None  # default 0.02 * translation_scale
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    max_iters: int = 300
    fd_step_s: float = 1e-2
    fd_step_omega: float = 1e-2
    fd_step_t: float | None = None  # default 1e-2 * translation_scale
    sharpness_coarse: float = 2.0
    sharpness_fine: float = 8.0
    convergence_tol: float = 1e-5
    patience: int = 25
    translation_scale: float | None = None  # scene-size proxy, e.g. body AABB diagonal

    def resolved(self, cameras: list[OrthoCamera]) -> "FitConfig":
        cfg = FitConfig(**self.__dict__)
        if cfg.translation_scale is None:
            cfg.translation_scale = 4.0 * cameras[0].half_extent
        if cfg.translation_lr is None:
            cfg.translation_lr = 0.02 * cfg.translation_scale
        if cfg.fd_step_t is None:
            cfg.fd_step_t = 1e-2 * cfg.translation_scale
        if cfg.max_iters < 1:
            raise FitError("max_iters must be >= 1")
        return cfg


@dataclass
class FitResult:
    params: Sim3Params
    loss_history: list[float]
    final_loss_soft: float
    final_loss_hard: float
    iters: int

    def to_dict(self) -> dict:
        d = self.params.to_dict()
        d.update(
            final_loss_soft=self.final_loss_soft,
            final_loss_hard=self.final_loss_hard,
            iters=self.iters,
        )
        return d


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix: skew(v) @ w == cross(v, w)."""
    x, y, z = np.asarray(v, dtype=np.float64).reshape(3)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def exp_so3(omega: np.ndarray) -> np.ndarray:
    """Rodrigues' formula; 2nd-order Taylor expansion for tiny angles."""
    omega = np.asarray(omega, dtype=np.float64).reshape(3)
    theta = np.linalg.norm(omega)
    k = skew(omega)
    if theta < 1e-8:
        return np.eye(3) + k + 0.5 * (k @ k)
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / (theta * theta)
    return np.eye(3) + a * k + b * (k @ k)


def apply_sim3(params: Sim3Params, mesh: TriMesh) -> TriMesh:
    """y_i = s * exp(omega^) * x_i + t, applied about the world origin."""
    R = exp_so3(params.omega)
    v = params.s * (mesh.vertices @ R.T) + params.t
    return TriMesh(v, mesh.faces, mesh.canonical_coords)


def silhouette_loss(rendered: list[SilhouetteImage], inputs: list[SilhouetteImage]) -> float:
    """Mean absolute pixel difference over all views jointly."""
    if len(rendered) != len(inputs):
        raise FitError("silhouette stacks must have equal view counts")
    total = 0.0
    n = 0
    for r, g in zip(rendered, inputs):
        if r.alpha.shape != g.alpha.shape:
            raise FitError("silhouette dimensions mismatch")
        total += float(np.abs(r.alpha - g.alpha).sum())
        n += r.alpha.size
    return total / n


def _wrap_omega(omega: np.ndarray) -> np.ndarray:
    """Re-normalize axis-angle into the canonical |omega| < pi chart."""
    theta = np.linalg.norm(omega)
    if theta >= np.pi:
        wrapped = theta - 2.0 * np.pi * np.ceil((theta - np.pi) / (2.0 * np.pi))
        omega = omega * (wrapped / theta)
    return omega


def _render_views(verts: np.ndarray, faces: np.ndarray, cameras) -> list[np.ndarray]:
    mesh = TriMesh(verts, faces)
    return [rasterize_silhouette(mesh, cam).alpha for cam in cameras]


def _soft_loss(verts, faces, cameras, inputs, sharpness) -> float:
    total = 0.0
    n = 0
    for cam, ref in zip(cameras, inputs):
        hard = rasterize_silhouette(TriMesh(verts, faces), cam).alpha
        sd = signed_boundary_distance(hard)
        alpha = soft_alpha(sd, sharpness)
        total += float(np.abs(alpha - ref.alpha).sum())
        n += alpha.size
    return total / n


def centroid_translation_init(asset: TriMesh, input_sils: list[SilhouetteImage],
                              cameras: list[OrthoCamera]) -> np.ndarray:
    """Closed-form translation so the asset's projected centroid matches the
    input silhouettes' centroid, solved by least squares over all views with
    coverage."""
    rows = []
    rhs = []
    for cam, sil in zip(cameras, input_sils):
        ref = sil.alpha
        if ref.sum() < 1.0:
            continue
        rend = rasterize_silhouette(asset, cam).alpha
        if rend.sum() < 1.0:
            continue
        s = cam.image_size
        jj, ii = np.mgrid[0:s, 0:s]

        def centroid(img):
            m = img.sum()
            cx = float((img * (ii + 0.5)).sum() / m)
            cy = float((img * (jj + 0.5)).sum() / m)
            # pixel -> camera-plane scene units
            return (
                (cx / s - 0.5) * 2.0 * cam.half_extent,
                (0.5 - cy / s) * 2.0 * cam.half_extent,
            )

        (rx, ry) = centroid(ref)
        (ax, ay) = centroid(rend)
        right, up, _ = cam.axes()
        rows += [right, up]
        rhs += [rx - ax, ry - ay]
    if len(rows) < 3:
        return np.zeros(3)
    sol, *_ = np.linalg.lstsq(np.asarray(rows), np.asarray(rhs), rcond=None)
    return sol


def fit_sim3(asset: TriMesh, input_sils: list[SilhouetteImage],
             cameras: list[OrthoCamera], config: FitConfig | None = None,
             init: Sim3Params | None = None) -> FitResult:
    """Estimate the similarity transform aligning ``asset`` to the input
    silhouettes by Adam over central finite-difference gradients of the
    soft-silhouette loss. Coarse-to-fine: low sharpness first, then high."""
    config = (config or FitConfig()).resolved(cameras)
    covered = sum(1 for s in input_sils if s.alpha.sum() >= 1.0)
    if covered < 2:
        raise FitError("input silhouettes must have coverage in at least 2 views")

    faces = asset.faces
    base_verts = asset.vertices

    if init is None:
        t0 = centroid_translation_init(asset, input_sils, cameras)
        p = np.concatenate([[1.0], np.zeros(3), t0])
    else:
        p = init.as_vector()

    fd = np.array(
        [config.fd_step_s] + [config.fd_step_omega] * 3 + [config.fd_step_t] * 3
    )
    lr = np.array([config.learning_rate] * 4 + [config.translation_lr] * 3)

    def transform(pvec):
        R = exp_so3(pvec[1:4])
        return pvec[0] * (base_verts @ R.T) + pvec[4:7]

    def loss_at(pvec, sharpness):
        val = _soft_loss(transform(pvec), faces, cameras, input_sils, sharpness)
        if not np.isfinite(val):
            raise FitError("non-finite silhouette loss (degenerate configuration)")
        return val

    m = np.zeros(7)
    v = np.zeros(7)
    history: list[float] = []
    phase_fine = False
    sharp = config.sharpness_coarse
    best_loss = np.inf
    best_p = p.copy()
    best_iter = -1
    it = 0
    adam_t = 0
    while it < config.max_iters:
        cur = loss_at(p, sharp)
        history.append(cur)
        if cur < best_loss - 1e-15:
            best_loss = cur
            best_p = p.copy()
            best_iter = it
        plateau = it - best_iter >= config.patience and (
            len(history) > config.patience
            and history[-config.patience - 1] - best_loss < config.convergence_tol
        )
        half_done = it >= config.max_iters // 2
        if not phase_fine and (half_done or plateau):
            phase_fine = True
            sharp = config.sharpness_fine
            p = best_p.copy()
            best_loss = np.inf
            best_iter = it
            m[:] = 0.0
            v[:] = 0.0
            adam_t = 0
            it += 1
            continue
        if phase_fine and plateau:
            break

        grad = np.zeros(7)
        for k in range(7):
            dp = np.zeros(7)
            dp[k] = fd[k]
            grad[k] = (loss_at(p + dp, sharp) - loss_at(p - dp, sharp)) / (2.0 * fd[k])

        adam_t += 1
        m = config.adam_beta1 * m + (1 - config.adam_beta1) * grad
        v = config.adam_beta2 * v + (1 - config.adam_beta2) * grad * grad
        mh = m / (1 - config.adam_beta1 ** adam_t)
        vh = v / (1 - config.adam_beta2 ** adam_t)
        p = p - lr * mh / (np.sqrt(vh) + config.adam_epsilon)
        p[0] = max(p[0], 1e-3)
        p[1:4] = _wrap_omega(p[1:4])
        it += 1

    p = best_p
    params = Sim3Params.from_vector(p)
    final_soft = loss_at(p, config.sharpness_fine)
    rendered_hard = [
        SilhouetteImage(a) for a in _render_views(transform(p), faces, cameras)
    ]
    final_hard = silhouette_loss(rendered_hard, input_sils)
    return FitResult(
        params=params,
        loss_history=history,
        final_loss_soft=final_soft,
        final_loss_hard=final_hard,
        iters=len(history),
    )
