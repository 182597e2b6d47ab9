"""Regenerate the golden rendering fixture under tests/golden/.

The golden frame pins the rendering conventions (camera axes, pixel centers,
view order, 16-bit quantization). Rerun this script only after a deliberate
convention change, and review the diff.
"""

from pathlib import Path

from wearfit.render import OrthoCamera, VIEW_AZIMUTHS, rasterize_attribute, save_image, tile_2x2
from wearfit.shapes import blob

import sys

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "tests"))
from conftest import with_canonical  # noqa: E402

GOLDEN_HALF_EXTENT = 2.0
GOLDEN_IMAGE_SIZE = 128


def render_golden_frame():
    body = with_canonical(blob())
    tiles = []
    for az in VIEW_AZIMUTHS:
        cam = OrthoCamera(az, 0.0, GOLDEN_HALF_EXTENT, GOLDEN_IMAGE_SIZE)
        tiles.append(rasterize_attribute(body, cam, body.canonical_coords).rgb)
    return tile_2x2(tiles).image


def main():
    out = Path(__file__).resolve().parent.parent / "tests" / "golden" / "tiled_xyz.png"
    out.parent.mkdir(parents=True, exist_ok=True)
    save_image(out, render_golden_frame(), bits=16)
    print(f"wrote {out}")


if __name__ == "__main__":
    main()
