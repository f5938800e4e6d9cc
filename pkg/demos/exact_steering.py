"""Steering a 4-jet by the representation of a local affine map.

A Gaussian-blob scene is warped by an affine map A.  The jet of the warped
scene at A(x) is compared with the jet at x pushed through rho(A).
"""
import numpy as np

from gl2steer.descriptors import jet_descriptor, jet_steerer_spec
from gl2steer.geometry import Affine2, random_affine
from gl2steer.scene_synth import random_scene, scene_jet, warp_scene

scene = random_scene(0, 12, (-10, -10, 10, 10), scale_range=(1.0, 3.0))
spec = jet_steerer_spec()
print(f"steerer: degrees {spec.degrees}, xi {spec.xis.tolist()}, convention {spec.convention}")

rng = np.random.default_rng(0)
for k in range(5):
    A = Affine2(random_affine(2.0, True, 2.0, k), rng.uniform(-1, 1, 2))
    x = rng.uniform(-4, 4, 2)
    before = jet_descriptor(scene_jet(scene, x), 2.0)
    after = jet_descriptor(scene_jet(warp_scene(scene, A), A(x)), 2.0)
    steered = spec.matrix(A.linear) @ before
    print(
        f"warp {k}: |d_B - d_A| = {np.linalg.norm(after - before):8.4f}   "
        f"|d_B - rho(A) d_A| = {np.linalg.norm(after - steered):.2e}"
    )
