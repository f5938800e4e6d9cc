"""Planar warps, their local linearizations and least-squares affine fits.

Points are arrays with a trailing axis of length 2 holding (x, y).  Every warp
object is callable on such arrays and exposes ``jacobian`` and ``inverse``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DegeneracyError, DomainError
from .raster import RasterImage
from .repr_gl2 import DET_EPS, check_invertible, det2, inv2, rotation

FD_STEP = 1e-5
DEN_EPS = 1e-12


class Affine2:
    """x -> linear @ x + translation."""

    has_analytic_jacobian = True

    def __init__(self, linear, translation=(0.0, 0.0)):
        self.linear = np.array(linear, dtype=float).reshape(2, 2)
        self.translation = np.array(translation, dtype=float).reshape(2)
        check_invertible(self.linear)

    @classmethod
    def identity(cls) -> "Affine2":
        return cls(np.eye(2))

    def __call__(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        return pts @ self.linear.T + self.translation

    def jacobian(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        return np.broadcast_to(self.linear, pts.shape[:-1] + (2, 2)).copy()

    def inverse(self) -> "Affine2":
        L_inv = inv2(self.linear)
        return Affine2(L_inv, -L_inv @ self.translation)

    def compose(self, inner: "Affine2") -> "Affine2":
        """self after inner."""
        return Affine2(self.linear @ inner.linear, self.linear @ inner.translation + self.translation)

    def as_matrix(self) -> np.ndarray:
        out = np.eye(3)
        out[:2, :2] = self.linear
        out[:2, 2] = self.translation
        return out

    def to_list(self) -> list[float]:
        return [float(v) for v in self.as_matrix()[:2].ravel()]

    @classmethod
    def from_list(cls, values) -> "Affine2":
        m = np.asarray(values, dtype=float).reshape(2, 3)
        return cls(m[:, :2], m[:, 2])

    def __repr__(self):
        return f"Affine2(linear={self.linear.tolist()}, translation={self.translation.tolist()})"


def normalize_homography(h) -> np.ndarray:
    """Scale to unit Frobenius norm with a canonical sign; idempotent bitwise."""
    h = np.array(h, dtype=float).reshape(3, 3)
    if h[2, 2] != 0:
        sign = np.sign(h[2, 2])
    else:
        flat = h.ravel()
        sign = np.sign(flat[np.flatnonzero(flat)[0]])
    h = h * sign
    for _ in range(8):
        n = np.linalg.norm(h)
        if n == 1.0:
            break
        h2 = h / n
        if np.array_equal(h2, h):
            break
        h = h2
    return h


class Homography:
    has_analytic_jacobian = True

    def __init__(self, h):
        h = np.asarray(h, dtype=float).reshape(3, 3)
        if not np.all(np.isfinite(h)) or abs(np.linalg.det(h)) < DET_EPS * np.linalg.norm(h) ** 3:
            raise DomainError("singular homography")
        self.h = normalize_homography(h)

    @classmethod
    def identity(cls) -> "Homography":
        return cls(np.eye(3))

    @classmethod
    def from_affine(cls, A: Affine2) -> "Homography":
        return cls(A.as_matrix())

    def _project(self, pts):
        pts = np.asarray(pts, dtype=float)
        h = self.h
        num_x = h[0, 0] * pts[..., 0] + h[0, 1] * pts[..., 1] + h[0, 2]
        num_y = h[1, 0] * pts[..., 0] + h[1, 1] * pts[..., 1] + h[1, 2]
        den = h[2, 0] * pts[..., 0] + h[2, 1] * pts[..., 1] + h[2, 2]
        return num_x, num_y, den

    def __call__(self, pts) -> np.ndarray:
        num_x, num_y, den = self._project(pts)
        if np.any(np.abs(den) <= DEN_EPS):
            raise DomainError("point maps to infinity under homography")
        return np.stack([num_x / den, num_y / den], axis=-1)

    def jacobian(self, pts) -> np.ndarray:
        num_x, num_y, den = self._project(pts)
        if np.any(np.abs(den) <= DEN_EPS):
            raise DomainError("point maps to infinity under homography")
        h = self.h
        u, v = num_x / den, num_y / den
        J = np.empty(np.shape(den) + (2, 2))
        J[..., 0, 0] = (h[0, 0] - u * h[2, 0]) / den
        J[..., 0, 1] = (h[0, 1] - u * h[2, 1]) / den
        J[..., 1, 0] = (h[1, 0] - v * h[2, 0]) / den
        J[..., 1, 1] = (h[1, 1] - v * h[2, 1]) / den
        return J

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.h))

    def compose(self, inner: "Homography") -> "Homography":
        """self after inner."""
        return Homography(self.h @ inner.h)

    def to_list(self) -> list[float]:
        return [float(v) for v in self.h.ravel()]

    @classmethod
    def from_list(cls, values) -> "Homography":
        return cls(np.asarray(values, dtype=float).reshape(3, 3))

    def __repr__(self):
        return f"Homography({self.h.tolist()})"


class CompositeWarp:
    """Warps applied in sequence: ``CompositeWarp([f, g])(x) == g(f(x))``."""

    def __init__(self, warps: Sequence):
        self.warps = list(warps)
        self.has_analytic_jacobian = all(w.has_analytic_jacobian for w in self.warps)

    def __call__(self, pts):
        for w in self.warps:
            pts = w(pts)
        return pts

    def jacobian(self, pts):
        pts = np.asarray(pts, dtype=float)
        J = np.broadcast_to(np.eye(2), pts.shape[:-1] + (2, 2))
        for w in self.warps:
            J = local_jacobian(w, pts, check=False) @ J
            pts = w(pts)
        return J

    def inverse(self) -> "CompositeWarp":
        return CompositeWarp([w.inverse() for w in reversed(self.warps)])


class FunctionWarp:
    """Wraps an arbitrary point function; Jacobians come from finite differences."""

    has_analytic_jacobian = False

    def __init__(self, fn, inverse_fn=None):
        self.fn = fn
        self.inverse_fn = inverse_fn

    def __call__(self, pts):
        return np.asarray(self.fn(np.asarray(pts, dtype=float)), dtype=float)

    def inverse(self) -> "FunctionWarp":
        if self.inverse_fn is None:
            raise DomainError("no inverse available for this warp")
        return FunctionWarp(self.inverse_fn, self.fn)


def apply_warp(phi, x) -> np.ndarray:
    return phi(x)


def finite_difference_jacobian(phi, x, step: float = FD_STEP) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    cols = []
    for axis in range(2):
        e = np.zeros(2)
        e[axis] = step
        cols.append((phi(x + e) - phi(x - e)) / (2 * step))
    return np.stack(cols, axis=-1)


def local_jacobian(phi, x, check: bool = True) -> np.ndarray:
    """M(x), the derivative of phi at x, as a (..., 2, 2) array."""
    if getattr(phi, "has_analytic_jacobian", False):
        J = phi.jacobian(x)
    else:
        J = finite_difference_jacobian(phi, x)
    if check and np.any(np.abs(det2(J)) < DET_EPS):
        raise DegeneracyError("degenerate local Jacobian")
    return J


# --------------------------------------------------------------------------
# least-squares affine fits


def fit_affine(src, dst) -> Affine2:
    """Least-squares affine map taking ``src`` points to ``dst`` points."""
    src = np.asarray(src, dtype=float).reshape(-1, 2)
    dst = np.asarray(dst, dtype=float).reshape(-1, 2)
    if len(src) != len(dst):
        raise ValueError("point count mismatch")
    if len(src) < 3:
        raise DegeneracyError("need at least 3 correspondences for an affine fit")
    # center for conditioning; translation recovered afterwards
    c_src, c_dst = src.mean(0), dst.mean(0)
    X, Y = src - c_src, dst - c_dst
    N = X.T @ X
    scale = max(np.trace(N), np.finfo(float).tiny)
    if np.linalg.matrix_rank(N / scale, tol=1e-10) < 2:
        raise DegeneracyError("collinear or coincident source points")
    L = np.linalg.solve(N, X.T @ Y).T
    if abs(det2(L)) < DET_EPS:
        raise DegeneracyError("fitted affine map is singular")
    return Affine2(L, c_dst - L @ c_src)


def octagon_points(x, radius: float) -> np.ndarray:
    angles = 2 * np.pi * np.arange(8) / 8
    ring = radius * np.stack([np.cos(angles), np.sin(angles)], axis=-1)
    return np.asarray(x, dtype=float)[..., None, :] + ring


def octagon_affine(phi, x, radius: float = 2.0) -> Affine2:
    """Affine fit to phi on eight points on a circle of ``radius`` around x."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    pts = octagon_points(x, radius)
    return fit_affine(pts, phi(pts))


def global_affine(src, dst) -> Affine2:
    return fit_affine(src, dst)


# --------------------------------------------------------------------------
# raster warping


def _bilinear(image: RasterImage, sx, sy):
    h, w = image.data.shape
    eps = 1e-9
    inside = (sx >= -eps) & (sx <= w - 1 + eps) & (sy >= -eps) & (sy <= h - 1 + eps)
    sx_c = np.clip(sx, 0, w - 1)
    sy_c = np.clip(sy, 0, h - 1)
    x0 = np.clip(np.floor(sx_c).astype(int), 0, w - 2)
    y0 = np.clip(np.floor(sy_c).astype(int), 0, h - 2)
    fx, fy = sx_c - x0, sy_c - y0
    d, m = image.data, image.valid
    out = (
        d[y0, x0] * (1 - fx) * (1 - fy)
        + d[y0, x0 + 1] * fx * (1 - fy)
        + d[y0 + 1, x0] * (1 - fx) * fy
        + d[y0 + 1, x0 + 1] * fx * fy
    )
    # a neighbour only matters if it carries weight
    ok = inside.copy()
    for dy, dx, wgt in ((0, 0, (1 - fx) * (1 - fy)), (0, 1, fx * (1 - fy)), (1, 0, (1 - fx) * fy), (1, 1, fx * fy)):
        ok &= m[y0 + dy, x0 + dx] | (wgt <= eps)
    return np.where(ok, out, 0.0), ok


def warp_raster(image: RasterImage, phi, out_size=None) -> RasterImage:
    """W_phi[I](x) = I(phi^-1(x)) with bilinear sampling and a validity mask."""
    w, h = out_size if out_size is not None else (image.width, image.height)
    phi_inv = phi.inverse()
    ys, xs = np.mgrid[0:h, 0:w].astype(float)
    pts = np.stack([xs, ys], axis=-1)
    if isinstance(phi_inv, Homography):
        num_x, num_y, den = phi_inv._project(pts)
        good = np.abs(den) > DEN_EPS
        safe = np.where(good, den, 1.0)
        src = np.stack([num_x / safe, num_y / safe], axis=-1)
    else:
        src = phi_inv(pts)
        good = np.all(np.isfinite(src), axis=-1)
    data, ok = _bilinear(image, src[..., 0], src[..., 1])
    ok &= good
    return RasterImage(np.where(ok, data, 0.0), ok)


# --------------------------------------------------------------------------
# random transformations


@dataclass(frozen=True)
class HomographyDifficulty:
    translation_px: float = 0.0
    rotation_range: float = 0.0  # radians, symmetric
    scale_range: float = 0.0  # natural-log scale, symmetric
    anisotropy_range: float = 0.0  # natural-log aspect, symmetric
    perspective_range: float = 0.0  # per pixel, symmetric

    def __post_init__(self):
        for name in ("translation_px", "rotation_range", "scale_range", "anisotropy_range", "perspective_range"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


def random_homography(difficulty: HomographyDifficulty, rng_seed, center=(0.0, 0.0)) -> Homography:
    """center . perspective . affine . center^-1, deterministic per seed."""
    rng = np.random.default_rng(rng_seed)
    u = rng.uniform(-1.0, 1.0, size=8)
    dif = difficulty
    theta = dif.rotation_range * u[0]
    s = np.exp(dif.scale_range * u[1])
    a = np.exp(dif.anisotropy_range * u[2])
    psi = np.pi * u[3]
    R_psi = rotation(psi)
    L = rotation(theta) @ R_psi @ np.diag([s * a, s / a]) @ R_psi.T
    A = np.eye(3)
    A[:2, :2] = L
    A[:2, 2] = dif.translation_px * u[4:6]
    P = np.eye(3)
    P[2, :2] = dif.perspective_range * u[6:8]
    C = np.eye(3)
    C[:2, 2] = center
    C_inv = np.eye(3)
    C_inv[:2, 2] = -np.asarray(center, dtype=float)
    return Homography(C @ P @ A @ C_inv)


def random_affine(
    scale_max: float,
    full_rotations: bool,
    anisotropy_max: float = 1.0,
    rng_seed=None,
    rotation_jitter: float = 0.0,
) -> np.ndarray:
    """M = R(t1) diag(s a, s/a) R(t2), s log-uniform in [1/scale_max, scale_max]."""
    if scale_max < 1 or anisotropy_max < 1:
        raise ValueError("scale_max and anisotropy_max must be >= 1")
    rng = np.random.default_rng(rng_seed)
    u = rng.uniform(-1.0, 1.0, size=4)
    s = np.exp(np.log(scale_max) * u[0])
    a = np.exp(np.log(anisotropy_max) * abs(u[1]))
    if full_rotations:
        t1, t2 = np.pi * u[2], np.pi * u[3]
    else:
        t1, t2 = rotation_jitter * u[2], rotation_jitter * u[3]
    return rotation(t1) @ np.diag([s * a, s / a]) @ rotation(t2)


def normalize_det(M) -> np.ndarray:
    """M / sqrt(|det M|), so |det| becomes 1."""
    M = np.asarray(M, dtype=float)
    det = check_invertible(M)
    return M / np.sqrt(np.abs(det))[..., None, None]
