"""Keypoint detection and description.

Two descriptors are provided, both laid out like a degree-4 jet (15 values,
degree blocks 0..4 in the scaled monomial basis):

* ``jet_descriptor``: the exact Taylor jet of an analytic scene, exactly
  steerable by the degree-0..4 irreps.
* ``moment_descriptor``: a Gaussian-windowed local polynomial fit on a raster,
  i.e. the windowed moments against the basis polynomials whitened by the
  window Gram matrix.  It estimates the same jet and is only approximately
  steerable.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import ndimage

from . import polynomials as poly
from .errors import CalibrationError, CoverageError
from .geometry import Affine2, random_affine
from .raster import RasterImage
from .repr_gl2 import CONVENTIONS, SteererSpec, default_spec, element_map, steer
from .scene_synth import Jet, random_scene, scene_jet, warp_scene

JET_DEGREES = (0, 1, 2, 3, 4)
DESC_DIM = 15
HARRIS_K = 0.06
HARRIS_SIGMA = 1.5


@dataclass
class Keypoint:
    position: np.ndarray
    score: float = 0.0

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float).reshape(2)
        if not np.all(np.isfinite(self.position)):
            raise ValueError("keypoint coordinates must be finite")


def keypoint_array(kps) -> np.ndarray:
    if len(kps) == 0:
        return np.zeros((0, 2))
    return np.stack([kp.position for kp in kps])


def _degree_scales(scale: float) -> np.ndarray:
    return np.concatenate([np.full(k + 1, float(scale) ** k) for k in JET_DEGREES])


def jet_descriptor(jet: Jet, scale: float = 1.0) -> np.ndarray:
    """Concatenated degree blocks; block k is multiplied by ``scale**k``.

    ``scale`` is the length unit of the descriptor.  Rescaling a degree block
    by a constant commutes with block-diagonal steering.
    """
    return jet.coeffs * _degree_scales(scale)


def split_blocks(desc) -> list[np.ndarray]:
    desc = np.asarray(desc)
    return [desc[..., poly.degree_slice(k)] for k in JET_DEGREES]


# --------------------------------------------------------------------------
# steering convention


def _calibration_trials(n_trials: int, seed):
    rng = np.random.default_rng(seed)
    for t in range(n_trials):
        scene = random_scene(int(rng.integers(2**31)), 4, (-4, -4, 4, 4), scale_range=(1.0, 2.5))
        x = rng.uniform(-2, 2, size=2)
        L = random_affine(2.0, True, 2.0, int(rng.integers(2**31)))
        A = Affine2(L, rng.uniform(-3, 3, size=2))
        yield scene, x, A


def calibrate_convention(spec: SteererSpec | None = None, n_trials: int = 100, seed=0, tol: float = 1e-8) -> str:
    """Find the map g in {M, M^T, M^-1, M^-T} making jets exactly steerable.

    Checks steer(g(A), jet_s(x)) == jet_{W_A s}(A x) on random trials with the
    determinant exponents pinned to xi_j = n_j / 2.
    """
    spec = default_spec(DESC_DIM) if spec is None else spec
    if spec.degrees != JET_DEGREES or not np.array_equal(spec.Q, np.eye(DESC_DIM)):
        raise ValueError("calibration expects the plain block-diagonal degree 0..4 steerer")
    pinned = spec.replace(xis=[n / 2 for n in spec.degrees], convention="M")
    survivors = set(CONVENTIONS)
    for scene, x, A in _calibration_trials(n_trials, seed):
        if np.allclose(A.linear, np.eye(2)):
            continue
        d_src = jet_descriptor(scene_jet(scene, x))
        d_dst = jet_descriptor(scene_jet(warp_scene(scene, A), A(x)))
        for conv in list(survivors):
            pred = steer(pinned, element_map(conv, A.linear), d_src)
            if np.max(np.abs(pred - d_dst)) > tol:
                survivors.discard(conv)
    if len(survivors) != 1:
        raise CalibrationError(f"expected one consistent convention, found {sorted(survivors)}")
    return survivors.pop()


@lru_cache(maxsize=1)
def _cached_convention() -> str:
    return calibrate_convention()


def jet_steerer_spec() -> SteererSpec:
    """The degree 0..4 steerer under which jet descriptors are exactly steerable."""
    spec = default_spec(DESC_DIM)
    return spec.replace(xis=[n / 2 for n in spec.degrees], convention=_cached_convention())


# --------------------------------------------------------------------------
# windowed moment descriptor


def _basis(u, v) -> np.ndarray:
    """Scaled monomials C(k,j) u^j v^(k-j), trailing axis of length 15."""
    cols = []
    for k in JET_DEGREES:
        for j in range(k + 1):
            cols.append(poly.binomial_weights()[poly.index(k, j)] * u**j * v ** (k - j))
    return np.stack(cols, axis=-1)


def moment_descriptor(image: RasterImage, kp, window_radius: float = 6.0) -> np.ndarray:
    """Gaussian-windowed polynomial moments, whitened by the window Gram matrix.

    With offsets u = (x - kp) / window_radius and weights w (sigma =
    window_radius / 2, truncated at window_radius) the raw moments are
    m = sum w I p(u) / sum w.  Returning G^-1 m, with G = sum w p p^T / sum w,
    makes the result the weighted least-squares jet of the image in units of
    ``window_radius``.
    """
    pos = kp.position if isinstance(kp, Keypoint) else np.asarray(kp, dtype=float)
    r = float(window_radius)
    h, w = image.data.shape
    x_lo, x_hi = int(np.ceil(pos[0] - r)), int(np.floor(pos[0] + r))
    y_lo, y_hi = int(np.ceil(pos[1] - r)), int(np.floor(pos[1] + r))
    if x_lo < 0 or y_lo < 0 or x_hi > w - 1 or y_hi > h - 1:
        raise CoverageError("descriptor window leaves the image")
    ys, xs = np.mgrid[y_lo : y_hi + 1, x_lo : x_hi + 1]
    dx, dy = xs - pos[0], ys - pos[1]
    inside = dx**2 + dy**2 <= r**2
    if not np.all(image.valid[ys[inside], xs[inside]]):
        raise CoverageError("descriptor window touches invalid pixels")
    sigma = r / 2
    wts = np.exp(-0.5 * (dx[inside] ** 2 + dy[inside] ** 2) / sigma**2)
    P = _basis(dx[inside] / r, dy[inside] / r)
    mass = wts.sum()
    moments = P.T @ (wts * image.data[ys[inside], xs[inside]]) / mass
    gram = (P.T * wts) @ P / mass
    return np.linalg.solve(gram, moments)


def describe(image: RasterImage, kps, window_radius: float = 6.0):
    """Moment descriptors for every keypoint whose window is fully covered.

    Returns (descriptors (K, 15), indices of the kept keypoints).
    """
    descs, kept = [], []
    for i, kp in enumerate(kps):
        try:
            descs.append(moment_descriptor(image, kp, window_radius))
        except CoverageError:
            continue
        kept.append(i)
    return np.array(descs).reshape(-1, DESC_DIM), np.array(kept, dtype=int)


# --------------------------------------------------------------------------
# Harris detector


def harris_response(image: RasterImage, k: float = HARRIS_K, sigma: float = HARRIS_SIGMA) -> np.ndarray:
    I = image.data
    gx = ndimage.sobel(I, axis=1, mode="nearest")
    gy = ndimage.sobel(I, axis=0, mode="nearest")
    sxx = ndimage.gaussian_filter(gx * gx, sigma, mode="nearest")
    syy = ndimage.gaussian_filter(gy * gy, sigma, mode="nearest")
    sxy = ndimage.gaussian_filter(gx * gy, sigma, mode="nearest")
    return sxx * syy - sxy**2 - k * (sxx + syy) ** 2


def harris_detect(
    image: RasterImage,
    k: float = HARRIS_K,
    top_k: int = 100,
    nms_radius: float = 4.0,
    sigma: float = HARRIS_SIGMA,
    border: int = 3,
    subpixel: bool = True,
) -> list[Keypoint]:
    """Harris corners, greedy non-maximum suppression, best ``top_k`` first.

    Ties in response are broken by (row, col).  Positions are refined to
    sub-pixel accuracy with a separable parabola fit.
    """
    if min(image.data.shape) < 16:
        raise ValueError("harris_detect needs an image of at least 16x16")
    R = harris_response(image, k, sigma)
    h, w = R.shape
    valid = ndimage.binary_erosion(image.valid, iterations=border, border_value=0)
    peak = R == ndimage.maximum_filter(R, size=3, mode="nearest")
    cand = np.argwhere(peak & valid & (R > 0))
    if len(cand) == 0:
        return []
    scores = R[cand[:, 0], cand[:, 1]]
    order = np.lexsort((cand[:, 1], cand[:, 0], -scores))
    accepted: list[tuple[int, int]] = []
    r2 = nms_radius**2
    for idx in order:
        row, col = cand[idx]
        if any((row - a) ** 2 + (col - b) ** 2 <= r2 for a, b in accepted):
            continue
        accepted.append((int(row), int(col)))
        if len(accepted) >= top_k:
            break
    out = []
    for row, col in accepted:
        x, y = float(col), float(row)
        if subpixel and 0 < row < h - 1 and 0 < col < w - 1:
            x += _parabola_offset(R[row, col - 1], R[row, col], R[row, col + 1])
            y += _parabola_offset(R[row - 1, col], R[row, col], R[row + 1, col])
        out.append(Keypoint((x, y), float(R[row, col])))
    return out


def _parabola_offset(left, mid, right) -> float:
    denom = left - 2 * mid + right
    if denom >= 0:
        return 0.0
    return float(np.clip(0.5 * (left - right) / denom, -0.5, 0.5))
