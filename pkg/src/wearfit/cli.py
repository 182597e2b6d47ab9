"""Command-line pipeline: render-body, fit-sim3, make-proxy, resolve, pipeline.

Stages communicate via files under the output directory so each step is
independently runnable and resumable. Exit codes: 0 ok, 2 validation error,
3 numerical failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .mesh import MeshError, TriMesh, aabb, load_mesh, save_mesh
from .proxy import (
    ProxyError,
    build_proxy,
    default_rig,
    load_proxy_skin,
    propagate_deformation,
    save_proxy_skin,
    CullCameraRig,
)
from .render import (
    RenderError,
    SilhouetteImage,
    four_view_cameras,
    load_image,
    rasterize_attribute,
    rasterize_silhouette,
    save_image,
    tile_2x2,
    untile_2x2,
)
from .sdf import SdfError, build_sdf, load_sdf, sample, save_sdf
from .sim3 import FitConfig, FitError, Sim3Params, apply_sim3, fit_sim3
from .solver import SolverDivergence, SolverError, SolverParams, resolve_penetration

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3
EXIT_IO = 4


class ValidationError(ValueError):
    pass


@dataclass
class RunConfig:
    body_mesh: str | None = None
    asset_mesh: str | None = None
    silhouettes: list[str] | None = None  # four mask image paths
    silhouette_tile: str | None = None  # or one 2x2 tiled mask image
    image_size: int = 320
    half_extent: float | None = None  # None: 0.55 * max body AABB half-extent
    target_clusters: int | None = None
    rig_views: int = 26
    rig_resolution: int = 1024
    sdf_resolution: int = 128
    fit: dict = field(default_factory=dict)
    solver: dict = field(default_factory=dict)
    out_dir: str = "out"
    seed: int = 0

    @classmethod
    def load(cls, path: str | None, overrides: dict) -> "RunConfig":
        data = {}
        if path:
            try:
                with open(path) as fh:
                    data = json.load(fh)
            except OSError as exc:
                raise ValidationError(f"cannot read config {path}: {exc}") from exc
            except json.JSONDecodeError as exc:
                raise ValidationError(f"malformed config {path}: {exc}") from exc
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        data.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**{k: v for k, v in data.items() if k in known})

    def require(self, *names: str) -> None:
        for name in names:
            if getattr(self, name) is None:
                raise ValidationError(f"config field '{name}' is required")

    def resolve_path(self, name: str) -> Path:
        p = Path(getattr(self, name))
        if not p.exists():
            raise ValidationError(f"{name}: no such file {p}")
        return p


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    h.update(path.read_bytes())
    return h.hexdigest()


def _load_body(config: RunConfig, need_canonical: bool) -> TriMesh:
    body = load_mesh(config.resolve_path("body_mesh"))
    if need_canonical and body.canonical_coords is None:
        raise ValidationError("body mesh has no canonical coordinates "
                              "(per-vertex colors)")
    return body


def _body_half_extent(config: RunConfig, body: TriMesh) -> float:
    if config.half_extent is not None:
        return float(config.half_extent)
    return 0.55 * float(aabb(body).half_extents.max())


def _load_silhouettes(config: RunConfig, image_size: int) -> list[SilhouetteImage]:
    if config.silhouettes is not None:
        if len(config.silhouettes) != 4:
            raise ValidationError("exactly 4 silhouette paths required")
        imgs = []
        for p in config.silhouettes:
            if not Path(p).exists():
                raise ValidationError(f"silhouette file missing: {p}")
            imgs.append(load_image(p))
    elif config.silhouette_tile is not None:
        if not Path(config.silhouette_tile).exists():
            raise ValidationError(f"silhouette tile missing: {config.silhouette_tile}")
        tiled = load_image(config.silhouette_tile)
        if tiled.shape[0] % 2 or tiled.shape[1] % 2:
            raise ValidationError("tiled silhouette dimensions must be divisible by 2")
        imgs = untile_2x2(tiled)
    else:
        raise ValidationError("silhouettes or silhouette_tile required")
    out = []
    for img in imgs:
        if img.ndim == 3:
            img = img.mean(axis=2)
        if img.shape != (image_size, image_size):
            raise ValidationError("silhouette size does not match image_size "
                                  f"({img.shape} vs {image_size})")
        out.append(SilhouetteImage(alpha=np.clip(img, 0.0, 1.0)))
    return out


def _out_dir(config: RunConfig) -> Path:
    d = Path(config.out_dir)
    d.mkdir(parents=True, exist_ok=True)
    return d


# ---------------------------------------------------------------------------
# stages


def cmd_render_body(config: RunConfig) -> dict:
    config.require("body_mesh")
    body = _load_body(config, need_canonical=True)
    out = _out_dir(config)
    he = _body_half_extent(config, body)
    cams = four_view_cameras(he, config.image_size)
    xyz_tiles = []
    sil_tiles = []
    for cam in cams:
        m = rasterize_attribute(body, cam, body.canonical_coords)
        xyz_tiles.append(m.rgb)
        sil_tiles.append(m.mask.astype(np.float64))
    xyz_path = out / "body_xyz.png"
    sil_path = out / "body_silhouette.png"
    save_image(xyz_path, tile_2x2(xyz_tiles).image, bits=16)
    save_image(sil_path, tile_2x2(sil_tiles).image, bits=8)
    logger.info("wrote %s and %s", xyz_path, sil_path)
    return {"outputs": [str(xyz_path), str(sil_path)], "half_extent": he}


def cmd_fit(config: RunConfig) -> dict:
    config.require("asset_mesh")
    asset = load_mesh(config.resolve_path("asset_mesh"))
    sils = _load_silhouettes(config, config.image_size)
    out = _out_dir(config)
    if config.body_mesh is not None:
        body = _load_body(config, need_canonical=False)
        he = _body_half_extent(config, body)
        scale = aabb(body).diagonal
    else:
        if config.half_extent is None:
            raise ValidationError("half_extent required when no body mesh given")
        he = float(config.half_extent)
        scale = None
    cams = four_view_cameras(he, config.image_size)
    fit_kwargs = dict(config.fit)
    if scale is not None and "translation_scale" not in fit_kwargs:
        fit_kwargs["translation_scale"] = scale
    fit_cfg = FitConfig(**fit_kwargs)

    # pre-center so scale/rotation do not induce large translations
    centroid = asset.vertices.mean(axis=0)
    centered = TriMesh(asset.vertices - centroid, asset.faces, asset.canonical_coords)
    result = fit_sim3(centered, sils, cams, fit_cfg)
    if not np.isfinite(result.final_loss_soft):
        raise SolverError("non-finite silhouette loss")
    # fold the centering back into the reported transform of the raw asset
    from .sim3 import exp_so3
    R = exp_so3(result.params.omega)
    t_full = result.params.t - result.params.s * (R @ centroid)
    params = Sim3Params(s=result.params.s, omega=result.params.omega, t=t_full)
    fitted = apply_sim3(params, asset)

    mesh_path = out / "asset_fitted.ply"
    json_path = out / "sim3.json"
    save_mesh(fitted, mesh_path)
    payload = params.to_dict()
    payload.update(
        final_loss_soft=result.final_loss_soft,
        final_loss_hard=result.final_loss_hard,
        iters=result.iters,
    )
    with open(json_path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
    logger.info("fit: hard loss %.3g after %d iters", result.final_loss_hard, result.iters)
    return {"outputs": [str(mesh_path), str(json_path)], **payload}


def cmd_make_proxy(config: RunConfig, asset_path: Path | None = None) -> dict:
    config.require("body_mesh")
    body = _load_body(config, need_canonical=False)
    if asset_path is None:
        config.require("asset_mesh")
        asset_path = config.resolve_path("asset_mesh")
    asset = load_mesh(asset_path)
    if config.target_clusters is not None and config.target_clusters > asset.n_vertices:
        raise ValidationError("target_clusters exceeds asset vertex count")
    if config.rig_views != 26:
        raise ValidationError("only the 26-view rig is supported")
    out = _out_dir(config)
    rig = default_rig(aabb(body), resolution=config.rig_resolution)
    skin = build_proxy(asset, body, rig, config.target_clusters)
    mesh_path = out / "proxy.ply"
    weights_path = out / "proxy_weights.json"
    save_proxy_skin(skin, mesh_path, weights_path)
    logger.info("proxy: %d vertices, %d faces", skin.proxy.n_vertices, skin.proxy.n_faces)
    return {
        "outputs": [str(mesh_path), str(weights_path)],
        "proxy_vertices": skin.proxy.n_vertices,
        "proxy_faces": skin.proxy.n_faces,
    }


def cmd_resolve(config: RunConfig, asset_path: Path | None = None,
                proxy_paths: tuple[Path, Path] | None = None) -> dict:
    config.require("body_mesh")
    body = _load_body(config, need_canonical=False)
    if asset_path is None:
        config.require("asset_mesh")
        asset_path = config.resolve_path("asset_mesh")
    asset = load_mesh(asset_path)
    out = _out_dir(config)

    sdf_path = out / "body_sdf.bin"
    if sdf_path.exists():
        grid = load_sdf(sdf_path)
    else:
        grid = build_sdf(body, resolution=config.sdf_resolution)
        save_sdf(grid, sdf_path)

    if proxy_paths is not None and proxy_paths[0].exists():
        skin = load_proxy_skin(*proxy_paths)
    else:
        rig = default_rig(aabb(body), resolution=config.rig_resolution)
        skin = build_proxy(asset, body, rig, config.target_clusters)

    params = SolverParams.for_scale(aabb(body).diagonal, **config.solver)
    positions, diagnostics = resolve_penetration(skin.proxy, grid, params)
    final = propagate_deformation(skin, positions, asset)

    mesh_path = out / "asset_final.ply"
    diag_path = out / "resolve_diagnostics.jsonl"
    save_mesh(final, mesh_path)
    with open(diag_path, "w") as fh:
        for row in diagnostics:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    vals, _ = sample(grid, final.vertices)
    visual_pen = float(max(0.0, -vals.min()))
    report = {
        "outputs": [str(mesh_path), str(diag_path)],
        "outer_loops": len(diagnostics),
        "max_penetration_proxy": diagnostics[-1]["max_pen"] if diagnostics else 0.0,
        "max_penetration_visual": visual_pen,
    }
    # the on-disk report stays byte-identical across output directories
    disk_report = dict(report, outputs=[mesh_path.name, diag_path.name])
    with open(out / "resolve_report.json", "w") as fh:
        json.dump(disk_report, fh, indent=2, sort_keys=True)
    report["outputs"].append(str(out / "resolve_report.json"))
    logger.info("resolve: visual max penetration %.3g", visual_pen)
    return report


def cmd_pipeline(config: RunConfig) -> dict:
    config.require("body_mesh", "asset_mesh")
    out = _out_dir(config)
    manifest = []

    def run_stage(name, fn, inputs):
        t0 = time.perf_counter()
        result = fn()
        wall = time.perf_counter() - t0
        entry = {
            "stage": name,
            "inputs": {str(p): _sha256(Path(p)) for p in inputs if Path(p).exists()},
            "outputs": {p: _sha256(Path(p)) for p in result.get("outputs", [])},
            "wall_time_s": wall,
        }
        manifest.append(entry)
        return result

    run_stage("render_body", lambda: cmd_render_body(config), [config.body_mesh])
    fit_res = run_stage("fit_sim3", lambda: cmd_fit(config),
                        [config.asset_mesh] + list(config.silhouettes or []))
    fitted = Path(fit_res["outputs"][0])
    proxy_res = run_stage("make_proxy", lambda: cmd_make_proxy(config, fitted),
                          [config.body_mesh, str(fitted)])
    proxy_paths = (Path(proxy_res["outputs"][0]), Path(proxy_res["outputs"][1]))
    run_stage("resolve", lambda: cmd_resolve(config, fitted, proxy_paths),
              [config.body_mesh, str(fitted)])

    manifest_path = out / "manifest.json"
    with open(manifest_path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return {"outputs": [str(manifest_path)], "stages": len(manifest)}


# ---------------------------------------------------------------------------
# argument parsing


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run config")
    p.add_argument("--out", dest="out_dir", help="output directory")
    p.add_argument("--seed", type=int, help="fixes stochastic tie-breaks")
    p.add_argument("--body", dest="body_mesh", help="body mesh (OBJ/PLY)")
    p.add_argument("--asset", dest="asset_mesh", help="asset mesh (OBJ/PLY)")
    p.add_argument("--image-size", dest="image_size", type=int)
    p.add_argument("--half-extent", dest="half_extent", type=float)
    p.add_argument("--silhouettes", nargs=4, help="four mask images")
    p.add_argument("--silhouette-tile", dest="silhouette_tile")
    p.add_argument("--clusters", dest="target_clusters", type=int)
    p.add_argument("--rig-views", dest="rig_views", type=int)
    p.add_argument("--sdf-res", dest="sdf_resolution", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wearfit",
                                     description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("render-body", "fit-sim3", "make-proxy", "resolve", "pipeline"):
        _add_common(sub.add_parser(name))
    return parser


_COMMANDS = {
    "render-body": cmd_render_body,
    "fit-sim3": cmd_fit,
    "make-proxy": cmd_make_proxy,
    "resolve": cmd_resolve,
    "pipeline": cmd_pipeline,
}


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    overrides = {
        k: v for k, v in vars(args).items()
        if k not in ("command", "config") and v is not None
    }
    try:
        config = RunConfig.load(args.config, overrides)
        if config.seed:
            np.random.seed(config.seed)
        result = _COMMANDS[args.command](config)
    except (ValidationError, ProxyError, FitError, RenderError, SdfError, TypeError) as exc:
        logger.error("validation error: %s", exc)
        return EXIT_VALIDATION
    except MeshError as exc:
        logger.error("mesh error: %s", exc)
        return EXIT_VALIDATION
    except (SolverDivergence, SolverError, FloatingPointError) as exc:
        logger.error("numerical failure: %s", exc)
        return EXIT_NUMERICAL
    except OSError as exc:
        logger.error("I/O error: %s", exc)
        return EXIT_IO
    print(json.dumps(result, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
