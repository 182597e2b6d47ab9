"""wearfit: deterministic geometry pipeline for fitting wearable assets
onto body meshes — canonical-coordinate body rendering, Sim(3) silhouette
registration, single-layer proxy construction, and XPBD penetration
resolution."""

from .mesh import Aabb, MeshError, TriMesh, aabb, load_mesh, remove_nonmanifold, save_mesh, vertex_normals
from .render import (
    OrthoCamera,
    SilhouetteImage,
    TiledFrame,
    XyzMap,
    four_view_cameras,
    rasterize_attribute,
    rasterize_silhouette,
    rasterize_soft_silhouette,
    tile_2x2,
    untile_2x2,
)
from .sim3 import FitConfig, FitResult, Sim3Params, apply_sim3, exp_so3, fit_sim3, silhouette_loss, skew
from .sdf import SdfGrid, build_sdf, sample
from .proxy import CullCameraRig, ProxySkin, build_proxy, cvt_simplify, propagate_deformation, visibility_cull
from .solver import SolverParams, SolverState, SpatialHash, hash_build, hash_query, resolve_penetration

__version__ = "0.1.0"
