"""
Rendering the synthetic scene two ways
======================================

The synthetic scene is a handful of coloured Gaussian blobs with closed-form
density and spectra.  The brute-force oracle integrates each ray on a very
fine grid; the volume renderer uses a few stratified samples like the neural
field will.  Both images are written to ``demo_out/`` as PNGs.
"""

from pathlib import Path

import numpy as np

from bsnerf.renderer import QuadratureSpec, render_image
from bsnerf.scenedata import default_scene, export_png, grid_cameras, oracle_render
from bsnerf.spectral import build_response, default_filters, default_sensor

out = Path("demo_out")
out.mkdir(exist_ok=True)

scene = default_scene()
cameras = grid_cameras()  # 3 x 3 views, 64 x 48 pixels, all aimed at the origin
M = build_response(default_filters(scene.grid), default_sensor(scene.grid))

view = 4  # centre of the array
oracle = oracle_render(scene, cameras, view, M.weights[view])

# The scene itself satisfies the field protocol, so the renderer can draw it
for samples in (16, 64, 256):
    quad = QuadratureSpec(samples, scene.t_near, scene.t_far)
    img = render_image(scene, cameras, view, quad, M, seed=0)
    rms = np.sqrt(np.mean((img - oracle) ** 2) / np.mean(oracle**2))
    print(f"{samples:4d} samples per ray: relative RMS error {rms:.4f}")
    export_png(out / f"render_{samples}.png", img, oracle.max())

export_png(out / "oracle.png", oracle)

# The same view through every filter: one row of the 9 x 9 grid
for d in range(M.views):
    export_png(out / f"view{view}_filter{d}.png", oracle_render(scene, cameras, view, M.weights[d]), oracle.max())
print(f"images written to {out}/")
