"""Homography estimation from matches and the corner-error / AUC metrics."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegeneracyError
from .geometry import Homography

CONFIDENCE = 0.9999
MAX_ITERS = 10000
AUC_THRESHOLDS = (3.0, 5.0, 10.0)
_COLLINEAR_TOL = 1e-9


@dataclass
class EstimationResult:
    H_est: Homography | None
    inliers: np.ndarray  # (N,) bool
    iterations: int
    n_inliers: int

    @property
    def success(self) -> bool:
        return self.H_est is not None


def _hartley(pts: np.ndarray) -> np.ndarray:
    """Similarity taking pts to zero mean and RMS distance sqrt(2)."""
    c = pts.mean(axis=0)
    rms = np.sqrt(np.mean(np.sum((pts - c) ** 2, axis=1)))
    if rms <= 0:
        raise DegeneracyError("all points coincide")
    s = np.sqrt(2) / rms
    return np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1.0]])


def _has_collinear_triple(pts: np.ndarray) -> bool:
    n = len(pts)
    scale = max(np.ptp(pts, axis=0).max(), 1e-300) ** 2
    for i in range(n):
        for j in range(i + 1, n):
            for k in range(j + 1, n):
                a, b = pts[j] - pts[i], pts[k] - pts[i]
                if abs(a[0] * b[1] - a[1] * b[0]) <= _COLLINEAR_TOL * scale:
                    return True
    return False


def dlt_homography(src, dst) -> Homography:
    """Normalized DLT: least-squares homography with H(src) ~ dst."""
    src = np.asarray(src, dtype=float).reshape(-1, 2)
    dst = np.asarray(dst, dtype=float).reshape(-1, 2)
    if len(src) != len(dst):
        raise ValueError("src and dst must have the same length")
    if len(src) < 4:
        raise DegeneracyError("need at least 4 correspondences")
    if len(src) == 4 and (_has_collinear_triple(src) or _has_collinear_triple(dst)):
        raise DegeneracyError("three of the four points are collinear")
    Ts, Td = _hartley(src), _hartley(dst)
    p = src @ Ts[:2, :2].T + Ts[:2, 2]
    q = dst @ Td[:2, :2].T + Td[:2, 2]
    n = len(p)
    A = np.zeros((2 * n, 9))
    one = np.ones(n)
    A[0::2, 0:3] = np.column_stack([p, one])
    A[0::2, 6:9] = -q[:, :1] * np.column_stack([p, one])
    A[1::2, 3:6] = np.column_stack([p, one])
    A[1::2, 6:9] = -q[:, 1:] * np.column_stack([p, one])
    _, sv, Vt = np.linalg.svd(A)
    # a second null direction means the points do not pin H down
    if len(sv) >= 9 and sv[-2] <= 1e-12 * sv[0]:
        raise DegeneracyError("degenerate point configuration")
    Hn = Vt[-1].reshape(3, 3)
    H = np.linalg.solve(Td, Hn @ Ts)
    if abs(np.linalg.det(H)) <= 1e-12 * np.linalg.norm(H) ** 3:
        raise DegeneracyError("estimated homography is singular")
    return Homography(H)


def _project(H: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Projection without domain checks; points at infinity come out inf/nan."""
    hom = pts @ H[:, :2].T + H[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        return hom[:, :2] / hom[:, 2:]


def symmetric_transfer_error(H: np.ndarray, src, dst) -> np.ndarray:
    """Mean of forward and backward reprojection distances, per pair."""
    src = np.asarray(src, dtype=float).reshape(-1, 2)
    dst = np.asarray(dst, dtype=float).reshape(-1, 2)
    fwd = np.linalg.norm(_project(H, src) - dst, axis=1)
    bwd = np.linalg.norm(_project(np.linalg.inv(H), dst) - src, axis=1)
    err = 0.5 * (fwd + bwd)
    err[~np.isfinite(err)] = np.inf
    return err


def _required_iters(inlier_ratio: float, confidence: float, sample: int = 4) -> float:
    good = inlier_ratio**sample
    if good <= 0:
        return np.inf
    if good >= 1:
        return 0
    return np.log(1 - confidence) / np.log(1 - good)


def ransac_homography(
    src,
    dst,
    inlier_threshold: float = 3.0,
    max_iters: int = MAX_ITERS,
    confidence: float = CONFIDENCE,
    rng_seed=0,
) -> EstimationResult:
    """RANSAC over minimal DLT samples, scored by symmetric transfer error.

    The best hypothesis is refit on its inliers, and the inlier set is then
    recomputed once for the refit model.  Fewer than four matches, or no
    hypothesis with four inliers, give a failed result instead of raising.
    """
    src = np.asarray(src, dtype=float).reshape(-1, 2)
    dst = np.asarray(dst, dtype=float).reshape(-1, 2)
    n = len(src)
    fail = EstimationResult(None, np.zeros(n, dtype=bool), 0, 0)
    if n < 4:
        return fail
    rng = np.random.default_rng(rng_seed)
    best_mask, best_count, best_cost = None, 0, np.inf
    needed = float(max_iters)
    it = 0
    while it < min(max_iters, needed):
        it += 1
        idx = rng.choice(n, size=4, replace=False)
        try:
            H = dlt_homography(src[idx], dst[idx]).h
        except DegeneracyError:
            continue
        err = symmetric_transfer_error(H, src, dst)
        mask = err <= inlier_threshold
        count = int(mask.sum())
        cost = float(np.sum(np.minimum(err, inlier_threshold)))
        if count > best_count or (count == best_count and count > 0 and cost < best_cost):
            best_mask, best_count, best_cost = mask, count, cost
            needed = _required_iters(count / n, confidence)
    if best_mask is None or best_count < 4:
        return EstimationResult(None, np.zeros(n, dtype=bool), it, 0)
    try:
        H = dlt_homography(src[best_mask], dst[best_mask])
    except DegeneracyError:
        return EstimationResult(None, np.zeros(n, dtype=bool), it, 0)
    mask = symmetric_transfer_error(H.h, src, dst) <= inlier_threshold
    if mask.sum() >= 4 and not np.array_equal(mask, best_mask):
        try:
            H = dlt_homography(src[mask], dst[mask])
        except DegeneracyError:
            mask = best_mask
    return EstimationResult(H, mask, it, int(mask.sum()))


def image_corners(width: float, height: float) -> np.ndarray:
    return np.array([[0.0, 0.0], [width, 0.0], [width, height], [0.0, height]])


def corner_error(H_est, H_gt, width: float, height: float) -> float:
    """Mean distance between the image corners mapped by the two homographies.

    A corner sent to infinity by either map gives an infinite error.
    """
    if H_est is None:
        return np.inf
    he = H_est.h if isinstance(H_est, Homography) else np.asarray(H_est, dtype=float)
    hg = H_gt.h if isinstance(H_gt, Homography) else np.asarray(H_gt, dtype=float)
    c = image_corners(width, height)
    d = np.linalg.norm(_project(he, c) - _project(hg, c), axis=1)
    if not np.all(np.isfinite(d)):
        return np.inf
    return float(d.mean())


def auc(errors, thresholds=AUC_THRESHOLDS) -> dict:
    """Normalized area under the empirical error CDF on [0, t] for each t.

    The CDF is a step function, so the area is exactly
    sum_i max(0, t - e_i) / (N t).
    """
    e = np.asarray(errors, dtype=float).ravel()
    if e.size == 0:
        raise ValueError("no errors to summarize")
    if np.any(np.isnan(e)) or np.any(e < 0):
        raise ValueError("errors must be non-negative")
    out = {}
    for t in thresholds:
        t = float(t)
        if t <= 0:
            raise ValueError("thresholds must be positive")
        out[t] = float(np.sum(np.clip(t - e, 0.0, None)) / (e.size * t))
    return out
