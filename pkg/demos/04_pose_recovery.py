"""
Recovering perturbed camera poses
=================================

The cameras of views 1..8 are rotated by a few degrees and shifted slightly;
view 0 stays put to fix the global frame.  Training then refines the field,
the poses and the focal length together.  Rotation errors are measured after
aligning the estimate to the ground truth through view 0.
"""

import numpy as np

from bsnerf.field import FieldArch
from bsnerf.geometry import rodrigues, rotation_to_axis_angle
from bsnerf.optim import TrainConfig, pose_errors, train
from bsnerf.scenedata import default_scene, grid_cameras, make_dataset

stack = make_dataset(default_scene(), grid_cameras(width=32, height=24, focal=36.0))
truth = stack.camera
rng = np.random.default_rng(1)

rotations, translations = truth.rotations.copy(), truth.translations.copy()
for d in range(1, truth.views):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    kick = rodrigues(axis * np.radians(rng.uniform(2, 5)))
    rotations[d] = rotation_to_axis_angle(kick @ truth.rotation_matrix(d))
    translations[d] += rng.normal(size=3) * 0.01
start = truth.replace(rotations=rotations, translations=translations)
print("initial mean rotation error: %.2f deg" % pose_errors(start, truth)[0])

cfg = TrainConfig(epochs=300, rays_per_batch=256, samples=32, arch=FieldArch(width=64, view_width=32))
result = train(stack, cfg, init_camera=start)

rot, trans = pose_errors(result.camera, truth)
print(f"final mean rotation error: {rot:.2f} deg, translation error {trans:.4f}")
print(f"focal: {result.camera.focal:.2f} px (truth {truth.focal:.2f})")
