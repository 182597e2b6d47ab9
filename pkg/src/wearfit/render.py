"""Orthographic software rasterizer: canonical-XYZ attribute maps, hard and
soft silhouettes, four-view camera rig, 2x2 tiling, and PNG I/O.

Conventions (pinned for golden-file reproducibility):
  right-handed world, +Y up; the front camera (azimuth 0) looks along -Z;
  azimuth rotates the eye counterclockwise about +Y seen from above;
  pixel centers at (col + 0.5, row + 0.5), row 0 at the top of the image.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
from numba import njit
from scipy.special import expit

from .mesh import TriMesh

logger = logging.getLogger(__name__)

VIEW_ORDER = ("front", "left", "back", "right")
VIEW_AZIMUTHS = (0.0, 90.0, 180.0, 270.0)


class RenderError(ValueError):
    pass


@dataclass(frozen=True)
class OrthoCamera:
    azimuth: float  # degrees
    elevation: float  # degrees
    half_extent: float  # scene units, half width of the square view volume
    image_size: int  # pixels, square
    near: float = -1e9  # bounds on depth along the eye direction
    far: float = 1e9
    center: tuple[float, float, float] = (0.0, 0.0, 0.0)  # view volume center

    def __post_init__(self):
        if self.image_size < 16:
            raise RenderError("image_size must be >= 16")
        if self.half_extent <= 0:
            raise RenderError("half_extent must be positive")
        if not self.near < self.far:
            raise RenderError("near must be < far")

    def axes(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Returns (right, up, eye_dir). Camera looks along -eye_dir."""
        az = np.deg2rad(self.azimuth)
        el = np.deg2rad(self.elevation)
        eye = np.array([np.cos(el) * np.sin(az), np.sin(el), np.cos(el) * np.cos(az)])
        world_up = np.array([0.0, 1.0, 0.0])
        fwd = -eye
        right = np.cross(fwd, world_up)
        nr = np.linalg.norm(right)
        if nr < 1e-12:  # looking straight up/down
            right = np.array([1.0, 0.0, 0.0])
        else:
            right = right / nr
        up = np.cross(right, fwd)
        return right, up, eye

    def project(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """World points -> (pixel xy (n,2), depth (n,)). Depth grows toward
        the eye: larger depth means closer to the camera."""
        right, up, eye = self.axes()
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        pts = pts - np.asarray(self.center, dtype=np.float64)
        xc = pts @ right
        yc = pts @ up
        depth = pts @ eye
        s = self.image_size
        px = (xc / self.half_extent * 0.5 + 0.5) * s
        py = (0.5 - yc / self.half_extent * 0.5) * s
        return np.stack([px, py], axis=1), depth


def four_view_cameras(half_extent: float, image_size: int,
                      near: float = -1e9, far: float = 1e9) -> list[OrthoCamera]:
    """Fixed rig: azimuths 0/90/180/270 (front/left/back/right), elevation 0."""
    return [
        OrthoCamera(az, 0.0, half_extent, image_size, near, far)
        for az in VIEW_AZIMUTHS
    ]


@dataclass(frozen=True)
class XyzMap:
    rgb: np.ndarray  # (h, w, 3) float64 in [0,1]; zeros on background
    mask: np.ndarray  # (h, w) uint8 {0,1}

    @property
    def width(self) -> int:
        return self.rgb.shape[1]

    @property
    def height(self) -> int:
        return self.rgb.shape[0]


@dataclass(frozen=True)
class SilhouetteImage:
    alpha: np.ndarray  # (h, w) float64 in [0,1]

    @property
    def width(self) -> int:
        return self.alpha.shape[1]

    @property
    def height(self) -> int:
        return self.alpha.shape[0]


@dataclass(frozen=True)
class TiledFrame:
    """2x2 grid of equally sized images in view order front/left/back/right."""
    image: np.ndarray  # (2h, 2w) or (2h, 2w, 3)

    @property
    def tile_shape(self) -> tuple[int, int]:
        return self.image.shape[0] // 2, self.image.shape[1] // 2


@njit(cache=True)
def _raster_core(px, py, depth, faces, h, w, near, far):
    """Face-id z-buffer rasterization at pixel centers.

    Returns (face_id int32, bary float64 (h,w,3), zbuf). face_id is -1 on
    background. Deterministic: faces processed in index order, strict
    depth test.
    """
    face_id = np.full((h, w), -1, dtype=np.int32)
    bary = np.zeros((h, w, 3), dtype=np.float64)
    zbuf = np.full((h, w), -1e300, dtype=np.float64)
    for fi in range(faces.shape[0]):
        a = faces[fi, 0]
        b = faces[fi, 1]
        c = faces[fi, 2]
        ax, ay = px[a], py[a]
        bx, by = px[b], py[b]
        cx, cy = px[c], py[c]
        area = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
        if abs(area) < 1e-14:
            continue
        inv_area = 1.0 / area
        xmin = min(ax, min(bx, cx))
        xmax = max(ax, max(bx, cx))
        ymin = min(ay, min(by, cy))
        ymax = max(ay, max(by, cy))
        i0 = max(0, int(np.floor(xmin - 0.5)))
        i1 = min(w - 1, int(np.ceil(xmax - 0.5)))
        j0 = max(0, int(np.floor(ymin - 0.5)))
        j1 = min(h - 1, int(np.ceil(ymax - 0.5)))
        da, db, dc = depth[a], depth[b], depth[c]
        for j in range(j0, j1 + 1):
            yp = j + 0.5
            for i in range(i0, i1 + 1):
                xp = i + 0.5
                w0 = ((bx - xp) * (cy - yp) - (by - yp) * (cx - xp)) * inv_area
                w1 = ((cx - xp) * (ay - yp) - (cy - yp) * (ax - xp)) * inv_area
                w2 = 1.0 - w0 - w1
                if w0 >= -1e-12 and w1 >= -1e-12 and w2 >= -1e-12:
                    z = w0 * da + w1 * db + w2 * dc
                    if z < near or z > far:
                        continue
                    if z > zbuf[j, i]:
                        zbuf[j, i] = z
                        face_id[j, i] = fi
                        bary[j, i, 0] = w0
                        bary[j, i, 1] = w1
                        bary[j, i, 2] = w2
    return face_id, bary, zbuf


def rasterize_face_ids(mesh: TriMesh, camera: OrthoCamera):
    """Low-level entry: (face_id, bary, zbuf) buffers for one view."""
    if mesh.n_vertices == 0:
        raise RenderError("cannot rasterize empty mesh")
    xy, depth = camera.project(mesh.vertices)
    s = camera.image_size
    return _raster_core(
        np.ascontiguousarray(xy[:, 0]), np.ascontiguousarray(xy[:, 1]),
        np.ascontiguousarray(depth), mesh.faces, s, s,
        camera.near, camera.far,
    )


def rasterize_attribute(mesh: TriMesh, camera: OrthoCamera, attribute: np.ndarray) -> XyzMap:
    """Z-buffered rasterization of a per-vertex 3-vector attribute."""
    attribute = np.asarray(attribute, dtype=np.float64)
    if attribute.shape != (mesh.n_vertices, 3):
        raise RenderError("attribute must be one 3-vector per vertex")
    face_id, bary, _ = rasterize_face_ids(mesh, camera)
    mask = (face_id >= 0).astype(np.uint8)
    rgb = np.zeros((camera.image_size, camera.image_size, 3), dtype=np.float64)
    cov = face_id >= 0
    if np.any(cov):
        f = mesh.faces[face_id[cov]]
        w = bary[cov]
        vals = (
            attribute[f[:, 0]] * w[:, 0:1]
            + attribute[f[:, 1]] * w[:, 1:2]
            + attribute[f[:, 2]] * w[:, 2:3]
        )
        rgb[cov] = np.clip(vals, 0.0, 1.0)
    return XyzMap(rgb=rgb, mask=mask)


def rasterize_silhouette(mesh: TriMesh, camera: OrthoCamera) -> SilhouetteImage:
    face_id, _, _ = rasterize_face_ids(mesh, camera)
    return SilhouetteImage(alpha=(face_id >= 0).astype(np.float64))


def signed_boundary_distance(mask: np.ndarray) -> np.ndarray:
    """Per-pixel signed distance (pixels) to the coverage boundary, positive
    inside. Exact euclidean distance transform of pixel centers, shifted by
    half a pixel so the zero level sits between covered and uncovered."""
    m = (np.asarray(mask) > 0.5).astype(np.uint8)
    if m.all():
        return np.full(m.shape, 1e6)
    if not m.any():
        return np.full(m.shape, -1e6)
    d_in = cv2.distanceTransform(m, cv2.DIST_L2, cv2.DIST_MASK_PRECISE)
    d_out = cv2.distanceTransform(1 - m, cv2.DIST_L2, cv2.DIST_MASK_PRECISE)
    return np.where(m > 0, d_in.astype(np.float64) - 0.5, 0.5 - d_out.astype(np.float64))


def soft_alpha(signed_distance, sharpness: float):
    """Sigmoid of the signed boundary distance; 0.5 exactly on the boundary."""
    return expit(sharpness * np.asarray(signed_distance, dtype=np.float64))


def rasterize_soft_silhouette(mesh: TriMesh, camera: OrthoCamera, sharpness: float) -> SilhouetteImage:
    if sharpness <= 0:
        raise RenderError("sharpness must be positive")
    hard = rasterize_silhouette(mesh, camera)
    sd = signed_boundary_distance(hard.alpha)
    return SilhouetteImage(alpha=soft_alpha(sd, sharpness))


def tile_2x2(images: list[np.ndarray]) -> TiledFrame:
    if len(images) != 4:
        raise RenderError("tile_2x2 needs exactly 4 images")
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise RenderError("tile_2x2 images must share dimensions")
    top = np.concatenate([images[0], images[1]], axis=1)
    bot = np.concatenate([images[2], images[3]], axis=1)
    return TiledFrame(image=np.concatenate([top, bot], axis=0))


def untile_2x2(frame: TiledFrame | np.ndarray) -> list[np.ndarray]:
    img = frame.image if isinstance(frame, TiledFrame) else frame
    h, w = img.shape[0], img.shape[1]
    if h % 2 or w % 2:
        raise RenderError("tiled frame dimensions must be even")
    h2, w2 = h // 2, w // 2
    return [img[:h2, :w2], img[:h2, w2:], img[h2:, :w2], img[h2:, w2:]]


# ---------------------------------------------------------------------------
# PNG I/O


def save_image(path, image: np.ndarray, bits: int = 8) -> None:
    """Save a float image in [0,1] as 8- or 16-bit PNG (grayscale or RGB)."""
    path = str(path)
    img = np.asarray(image, dtype=np.float64)
    if bits == 8:
        q = np.rint(np.clip(img, 0, 1) * 255.0).astype(np.uint8)
    elif bits == 16:
        q = np.rint(np.clip(img, 0, 1) * 65535.0).astype(np.uint16)
    else:
        raise RenderError("bits must be 8 or 16")
    if q.ndim == 3:
        q = q[:, :, ::-1]  # RGB -> BGR for OpenCV
    if not cv2.imwrite(path, q):
        raise RenderError(f"cannot write image {path}")


def load_image(path) -> np.ndarray:
    """Load a PNG to float in [0,1] (RGB order for color images)."""
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise RenderError(f"cannot read image {Path(path)}")
    if img.ndim == 3:
        img = img[:, :, :3][:, :, ::-1]
    scale = 65535.0 if img.dtype == np.uint16 else 255.0
    return img.astype(np.float64) / scale
