"""Analytic scenes: sums of anisotropic Gaussian blobs over an affine ramp.

The family is closed under affine warps and has closed-form derivatives of
every order, so steerability of Taylor-jet descriptors can be checked exactly.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import polynomials as poly
from .errors import DomainError
from .geometry import Affine2, Homography
from .raster import RasterImage
from .repr_gl2 import check_invertible, rotation

JET_DEGREE = poly.DEGREE
JET_SIZE = poly.SIZE


@dataclass
class Blob:
    amplitude: float
    center: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float).reshape(2)
        cov = np.asarray(self.covariance, dtype=float).reshape(2, 2)
        if not np.allclose(cov, cov.T, rtol=0, atol=1e-12 * max(1.0, np.abs(cov).max())):
            raise ValueError("blob covariance must be symmetric")
        if np.linalg.eigvalsh(cov).min() < 1e-6:
            raise ValueError("blob covariance must be positive definite (eigenvalues >= 1e-6)")
        self.covariance = 0.5 * (cov + cov.T)


@dataclass
class SceneImage:
    blobs: list[Blob]
    ramp: np.ndarray = field(default_factory=lambda: np.zeros(3))  # r0 + rx*x + ry*y
    intensity_range: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        if len(self.blobs) < 1:
            raise ValueError("a scene needs at least one blob")
        self.ramp = np.asarray(self.ramp, dtype=float).reshape(3)
        lo, hi = (float(v) for v in self.intensity_range)
        if not hi > lo:
            raise ValueError("intensity_range must be increasing")
        self.intensity_range = (lo, hi)

    def _stack(self):
        amps = np.array([b.amplitude for b in self.blobs])
        centers = np.stack([b.center for b in self.blobs])
        precisions = np.linalg.inv(np.stack([b.covariance for b in self.blobs]))
        return amps, centers, precisions

    def to_dict(self) -> dict:
        return {
            "blobs": [
                {
                    "amp": float(b.amplitude),
                    "cx": float(b.center[0]),
                    "cy": float(b.center[1]),
                    "sxx": float(b.covariance[0, 0]),
                    "sxy": float(b.covariance[0, 1]),
                    "syy": float(b.covariance[1, 1]),
                }
                for b in self.blobs
            ],
            "ramp": [float(v) for v in self.ramp],
            "intensity_range": list(self.intensity_range),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SceneImage":
        blobs = [
            Blob(b["amp"], (b["cx"], b["cy"]), [[b["sxx"], b["sxy"]], [b["sxy"], b["syy"]]])
            for b in data["blobs"]
        ]
        return cls(blobs, data["ramp"], tuple(data["intensity_range"]))


def save_scene(path, scene: SceneImage) -> None:
    Path(path).write_text(json.dumps(scene.to_dict(), indent=1) + "\n", encoding="utf-8")


def load_scene(path) -> SceneImage:
    return SceneImage.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def eval_scene(scene: SceneImage, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    r0, rx, ry = scene.ramp
    out = r0 + rx * x[..., 0] + ry * x[..., 1]
    amps, centers, P = scene._stack()
    # one blob at a time keeps memory flat for large rasters
    for a, c, p in zip(amps, centers, P):
        ux = x[..., 0] - c[0]
        uy = x[..., 1] - c[1]
        out = out + a * np.exp(-0.5 * (p[0, 0] * ux * ux + 2 * p[0, 1] * ux * uy + p[1, 1] * uy * uy))
    return out


def _monomial_jet(scene: SceneImage, x) -> np.ndarray:
    """Taylor polynomial of the scene at x in plain monomials x^j y^(k-j)."""
    x = np.asarray(x, dtype=float)
    amps, centers, P = scene._stack()
    u = x[..., None, :] - centers  # (..., B, 2)
    Pu = np.einsum("bij,...bj->...bi", P, u)
    g0 = amps * np.exp(-0.5 * np.einsum("...bi,...bi->...b", u, Pu))
    # exponent change s(d) = -(Pu).d - d^T P d / 2
    s = np.zeros(u.shape[:-1] + (JET_SIZE,))
    s[..., poly.index(1, 1)] = -Pu[..., 0]
    s[..., poly.index(1, 0)] = -Pu[..., 1]
    s[..., poly.index(2, 2)] = -0.5 * P[:, 0, 0]
    s[..., poly.index(2, 1)] = -P[:, 0, 1]
    s[..., poly.index(2, 0)] = -0.5 * P[:, 1, 1]
    jet = np.sum(g0[..., None] * poly.exp_nilpotent(s), axis=-2)
    r0, rx, ry = scene.ramp
    jet[..., 0] += r0 + rx * x[..., 0] + ry * x[..., 1]
    jet[..., poly.index(1, 1)] += rx
    jet[..., poly.index(1, 0)] += ry
    return jet


@dataclass
class Jet:
    """Taylor coefficients up to degree 4 in the scaled basis C(k,j) x^j y^(k-j).

    ``coeffs`` has a trailing axis of length 15: block k occupies slots
    k(k+1)/2 .. k(k+1)/2 + k.
    """

    coeffs: np.ndarray

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=float)
        if self.coeffs.shape[-1] != JET_SIZE:
            raise ValueError("a jet has 15 coefficients")

    def block(self, k: int) -> np.ndarray:
        return self.coeffs[..., poly.degree_slice(k)]

    @classmethod
    def from_blocks(cls, blocks) -> "Jet":
        if [np.shape(b)[-1] for b in blocks] != [1, 2, 3, 4, 5]:
            raise ValueError("jet blocks must have lengths 1..5")
        return cls(np.concatenate([np.asarray(b, dtype=float) for b in blocks], axis=-1))


def scene_jet(scene: SceneImage, x) -> Jet:
    return Jet(_monomial_jet(scene, x) / poly.binomial_weights())


def _inverse_taylor(phi, y):
    """Polynomials T with phi^-1(y + e) = phi^-1(y) + T(e), to degree 4."""
    y = np.asarray(y, dtype=float)
    batch = y.shape[:-1]
    if isinstance(phi, Affine2):
        L_inv = phi.inverse().linear
        tx = np.zeros(batch + (JET_SIZE,))
        ty = np.zeros(batch + (JET_SIZE,))
        tx[..., poly.index(1, 1)], tx[..., poly.index(1, 0)] = L_inv[0, 0], L_inv[0, 1]
        ty[..., poly.index(1, 1)], ty[..., poly.index(1, 0)] = L_inv[1, 0], L_inv[1, 1]
        return phi.inverse()(y), tx, ty
    if isinstance(phi, Homography):
        g = phi.inverse().h
        x0 = phi.inverse()(y)

        def lin(row):
            p = np.zeros(batch + (JET_SIZE,))
            p[..., 0] = row[0] * y[..., 0] + row[1] * y[..., 1] + row[2]
            p[..., poly.index(1, 1)] = row[0]
            p[..., poly.index(1, 0)] = row[1]
            return p

        nx, ny, den = lin(g[0]), lin(g[1]), lin(g[2])
        d0 = den[..., 0]
        if np.any(np.abs(d0) < 1e-12):
            raise DomainError("point at infinity")
        rest = den.copy()
        rest[..., 0] = 0.0
        # 1/den = (1/d0) * sum_m (-rest/d0)^m
        r = -rest / d0[..., None]
        inv = poly.constant(np.ones(batch))
        term = inv
        for _ in range(JET_DEGREE):
            term = poly.mul(term, r)
            inv = inv + term
        inv = inv / d0[..., None]
        tx = poly.mul(nx, inv)
        ty = poly.mul(ny, inv)
        tx[..., 0] = 0.0
        ty[..., 0] = 0.0
        return x0, tx, ty
    raise TypeError("jets of warped scenes need an Affine2 or Homography warp")


def warped_scene_jet(scene: SceneImage, phi, y) -> Jet:
    """Jet of W_phi[scene] at y, by composing the scene jet with phi^-1."""
    x0, tx, ty = _inverse_taylor(phi, y)
    p = _monomial_jet(scene, x0)
    return Jet(poly.compose(p, tx, ty) / poly.binomial_weights())


def warp_scene(scene: SceneImage, A: Affine2) -> SceneImage:
    """Closed-form W_A[scene]: eval(warp_scene(s, A), A(x)) == eval(s, x)."""
    L = A.linear
    check_invertible(L)
    L_inv = np.linalg.inv(L)
    blobs = [Blob(b.amplitude, A(b.center), L @ b.covariance @ L.T) for b in scene.blobs]
    r0, rx, ry = scene.ramp
    grad = L_inv.T @ np.array([rx, ry])
    r0_new = r0 - np.array([rx, ry]) @ (L_inv @ A.translation)
    return SceneImage(blobs, [r0_new, grad[0], grad[1]], scene.intensity_range)


def pixel_centers(width: int, height: int, world_bbox) -> np.ndarray:
    """World coordinates of pixel centers, shape (height, width, 2)."""
    x0, y0, x1, y1 = (float(v) for v in world_bbox)
    if not (x1 > x0 and y1 > y0):
        raise ValueError("degenerate world bbox")
    xs = x0 + (np.arange(width) + 0.5) * (x1 - x0) / width
    ys = y0 + (np.arange(height) + 0.5) * (y1 - y0) / height
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx, gy], axis=-1)


def pixel_bbox(width: int, height: int) -> tuple[float, float, float, float]:
    """The bbox under which world coordinates equal pixel coordinates."""
    return (-0.5, -0.5, width - 0.5, height - 0.5)


def render(
    scene: SceneImage,
    width: int,
    height: int,
    world_bbox=None,
    warp=None,
    noise_sigma: float = 0.0,
    rng_seed=None,
) -> RasterImage:
    """Sample the scene at pixel centers and map intensity_range to [0, 1].

    With ``warp`` the raster shows W_warp[scene]: the pixel at world point p
    holds the scene value at warp^-1(p).
    """
    if world_bbox is None:
        world_bbox = pixel_bbox(width, height)
    pts = pixel_centers(width, height, world_bbox)
    if warp is not None:
        pts = warp.inverse()(pts)
    vals = eval_scene(scene, pts)
    lo, hi = scene.intensity_range
    img = (vals - lo) / (hi - lo)
    if noise_sigma > 0:
        img = img + np.random.default_rng(rng_seed).normal(0.0, noise_sigma, img.shape)
    return RasterImage(np.clip(img, 0.0, 1.0))


def random_scene(
    seed,
    n_blobs: int,
    bbox,
    scale_range=(2.0, 5.0),
    anisotropy_max: float = 2.0,
    ramp_strength: float = 0.0,
    max_tries: int = 10000,
) -> SceneImage:
    """Random blobs with centers at least one blob sigma apart."""
    if n_blobs < 1:
        raise ValueError("n_blobs must be >= 1")
    rng = np.random.default_rng(seed)
    x0, y0, x1, y1 = (float(v) for v in bbox)
    blobs: list[Blob] = []
    sig_max: list[float] = []
    tries = 0
    while len(blobs) < n_blobs:
        tries += 1
        if tries > max_tries:
            raise RuntimeError("could not place well-separated blobs; lower n_blobs")
        c = rng.uniform((x0, y0), (x1, y1))
        sigma = rng.uniform(*scale_range)
        aspect = np.exp(rng.uniform(0.0, np.log(anisotropy_max)))
        theta = rng.uniform(0.0, np.pi)
        amp = rng.choice([-1.0, 1.0]) * rng.uniform(0.3, 1.0)
        sx, sy = sigma * np.sqrt(aspect), sigma / np.sqrt(aspect)
        if any(np.hypot(*(c - b.center)) < max(sx, m) for b, m in zip(blobs, sig_max)):
            continue
        R = rotation(theta)
        blobs.append(Blob(amp, c, R @ np.diag([sx**2, sy**2]) @ R.T))
        sig_max.append(sx)
    g = ramp_strength * rng.uniform(-1.0, 1.0, size=2) / max(x1 - x0, y1 - y0)
    ramp = np.array([0.0, g[0], g[1]])
    scene = SceneImage(blobs, ramp)
    probe = eval_scene(scene, pixel_centers(64, 64, bbox))
    span = max(probe.max() - probe.min(), 1e-6)
    scene.intensity_range = (float(probe.min() - 0.1 * span), float(probe.max() + 0.1 * span))
    return scene
