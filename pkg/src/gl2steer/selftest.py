"""Invariant checks grouped for the ``selftest`` command.

Each group returns (passed, detail).  Groups are independent so a failure in
one does not hide the others.
"""
from __future__ import annotations

import numpy as np

from .descriptors import jet_descriptor, jet_steerer_spec
from .geometry import Affine2, HomographyDifficulty, random_affine, random_homography
from .repr_gl2 import IrrepSpec, SteererSpec, irrep_matrix, irrep_scaled
from .robust_estimation import corner_error, ransac_homography
from .scene_synth import random_scene, scene_jet, warp_scene
from .steer_train import LOSSES, TrainBatch, grad, initial_state, loss_finetune, loss_stage1


def _random_gl2(rng, n):
    M = rng.normal(size=(n, 2, 2))
    bad = np.abs(np.linalg.det(M)) < 0.1
    M[bad] += np.eye(2)
    return M


def _rel_fro(A, B):
    return np.linalg.norm(A - B, axis=(-2, -1)) / np.maximum(np.linalg.norm(B, axis=(-2, -1)), 1e-300)


def check_homomorphism(n_pairs: int = 200, seed: int = 0, tol: float = 1e-9):
    rng = np.random.default_rng(seed)
    M1, M2 = _random_gl2(rng, n_pairs), _random_gl2(rng, n_pairs)
    worst = 0.0
    for n in range(5):
        worst = max(worst, _rel_fro(irrep_matrix(n, M2 @ M1), irrep_matrix(n, M2) @ irrep_matrix(n, M1)).max())
        spec = IrrepSpec(n, rng.normal())
        lhs = irrep_scaled(spec, M2 @ M1)
        worst = max(worst, _rel_fro(lhs, irrep_scaled(spec, M2) @ irrep_scaled(spec, M1)).max())
    degrees = [0, 1, 1, 2, 3, 4]
    d = sum(k + 1 for k in degrees)
    spec = SteererSpec(degrees, rng.normal(size=len(degrees)), np.eye(d) + 0.3 * rng.normal(size=(d, d)))
    worst = max(worst, _rel_fro(spec.matrix(M2 @ M1), spec.matrix(M2) @ spec.matrix(M1)).max())
    return bool(worst <= tol), f"max relative error {worst:.2e}"


def rho2_closed_form(M) -> np.ndarray:
    """The degree-2 irrep written out entry by entry."""
    a, b, c, d = M[..., 0, 0], M[..., 0, 1], M[..., 1, 0], M[..., 1, 1]
    rows = [
        [d * d, 2 * c * d, c * c],
        [b * d, a * d + b * c, a * c],
        [b * b, 2 * a * b, a * a],
    ]
    return np.stack([np.stack(r, -1) for r in rows], -2)


def check_rho2_closed_form(n: int = 100, seed: int = 1, tol: float = 1e-12):
    rng = np.random.default_rng(seed)
    M = _random_gl2(rng, n)
    ref = rho2_closed_form(M)
    err = np.max(np.abs(irrep_matrix(2, M) - ref) / np.maximum(np.abs(ref), 1.0))
    return bool(err <= tol), f"max entry error {err:.2e}"


def check_jet_equivariance(n: int = 50, seed: int = 2, tol: float = 1e-8):
    rng = np.random.default_rng(seed)
    spec = jet_steerer_spec()
    worst = 0.0
    for _ in range(n):
        scene = random_scene(int(rng.integers(2**31)), 5, (-6, -6, 6, 6), scale_range=(1.0, 3.0))
        x = rng.uniform(-3, 3, size=2)
        A = Affine2(random_affine(2.0, True, 2.0, int(rng.integers(2**31))), rng.uniform(-2, 2, size=2))
        lhs = spec.matrix(A.linear) @ jet_descriptor(scene_jet(scene, x))
        rhs = jet_descriptor(scene_jet(warp_scene(scene, A), A(x)))
        worst = max(worst, float(np.max(np.abs(lhs - rhs))))
    return bool(worst <= tol), f"max abs error {worst:.2e}"


def gradient_check_batch(seed: int, dim: int = 15, k_a: int = 12, k_b: int = 10) -> TrainBatch:
    """Random descriptors; B partly made of A steered by random affines."""
    rng = np.random.default_rng([seed, 11])
    A = rng.standard_normal((k_a, dim))
    M = np.stack([random_affine(1.5, True, 1.5, [seed, 12, i]) for i in range(k_a)])
    B = rng.standard_normal((k_b, dim))
    gt = np.array([[0, 1], [3, 2], [5, 5], [7, 0]])
    return TrainBatch(A, B, gt, M, np.eye(2), seed=seed)


def gradient_check_state(seed: int, dim: int = 15):
    rng = np.random.default_rng([seed, 13])
    st = initial_state(dim, seed, prototype_noise=0.3)
    Q = np.eye(dim) + 0.1 * rng.standard_normal((dim, dim))
    xi = rng.normal(0.0, 0.5, size=len(st.spec.degrees))
    return st.with_params({"Q": Q, "xi": xi, "prototypes": st.prototypes})


def fd_gradient_errors(state, batch, which: str, n_coords: int = 20, step: float = 1e-5, seed: int = 0):
    """Relative errors of the analytic gradient against central differences.

    The error is |g - g_fd| / max(|g|, |g_fd|, floor) with floor
    1e-8 * max(1, |L|): below that level central differences with this step
    only resolve rounding noise.
    """
    loss_fn = loss_stage1 if which == "stage1" else loss_finetune
    L, g = grad(state, batch, which)
    floor = 1e-8 * max(1.0, abs(L))
    params = state.params()
    names = [k for k in ("Q", "xi", "prototypes") if not (which == "stage1" and k == "prototypes")]
    rng = np.random.default_rng([seed, 17])
    errs = []
    for t in range(n_coords):
        name = names[t % len(names)]
        idx = tuple(int(rng.integers(0, s)) for s in params[name].shape)

        def f(delta):
            q = {k: v.copy() for k, v in params.items()}
            q[name][idx] += delta
            return loss_fn(state.with_params(q), batch)

        fd = (f(step) - f(-step)) / (2 * step)
        an = g[name][idx]
        errs.append(abs(an - fd) / max(abs(an), abs(fd), floor))
    return np.array(errs)


def check_gradients(n_states: int = 10, n_coords: int = 20, tol: float = 1e-4):
    worst = 0.0
    for s in range(n_states):
        st, b = gradient_check_state(s), gradient_check_batch(s)
        for which in LOSSES:
            worst = max(worst, float(fd_gradient_errors(st, b, which, n_coords, seed=s).max()))
    return bool(worst <= tol), f"max relative error {worst:.2e}"


def outlier_trial(seed: int, n: int = 100, outlier_frac: float = 0.5, noise: float = 0.5, size: float = 256.0):
    """(estimated result, ground-truth homography) for one synthetic trial."""
    rng = np.random.default_rng([seed, 19])
    H = random_homography(HomographyDifficulty(10.0, 0.5, 0.3, 0.2, 3e-4), [seed, 20], (size / 2, size / 2))
    src = rng.uniform(0, size, (n, 2))
    dst = H(src) + rng.normal(0.0, noise, (n, 2))
    out = rng.permutation(n)[: int(round(outlier_frac * n))]
    dst[out] = rng.uniform(0, size, (len(out), 2))
    return ransac_homography(src, dst, 2.0, rng_seed=seed), H


def check_ransac(n_trials: int = 100, size: float = 256.0):
    good = 0
    for s in range(n_trials):
        res, H = outlier_trial(s, size=size)
        good += corner_error(res.H_est, H, size, size) <= 1.0
    return bool(good >= 0.95 * n_trials), f"{good}/{n_trials} trials with corner error <= 1 px"


GROUPS = {
    "homomorphism": check_homomorphism,
    "rho2_closed_form": check_rho2_closed_form,
    "jet_equivariance": check_jet_equivariance,
    "gradients": check_gradients,
    "ransac": check_ransac,
}


def run(groups=None, quick: bool = False) -> dict:
    """{group: (passed, detail)}; ``quick`` shrinks the Monte-Carlo group."""
    out = {}
    for name in groups or GROUPS:
        fn = GROUPS[name]
        try:
            if quick and name == "ransac":
                out[name] = fn(n_trials=20)
            elif quick and name == "gradients":
                out[name] = fn(n_states=3)
            else:
                out[name] = fn()
        except Exception as exc:  # a crashing group is a failing group
            out[name] = (False, f"{type(exc).__name__}: {exc}")
    return out
