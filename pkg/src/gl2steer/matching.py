"""Descriptor similarities, mutual-nearest-neighbour matching and the
dual-softmax training loss.

Similarities are negative Euclidean distances, so every entry is <= 0.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import log_softmax

from .geometry import fit_affine, normalize_det, octagon_affine
from .errors import DegeneracyError, DomainError
from .repr_gl2 import SteererSpec

log = logging.getLogger(__name__)

INV_TEMPERATURE = 5.0
DUAL_SOFTMAX_THRESHOLD = 0.01
GT_DISTANCE_FRACTION = 0.005
PIXEL_TOL = 3.0


@dataclass
class MatchSet:
    pairs: np.ndarray  # (N, 2) int: (index_A, index_B)
    scores: np.ndarray  # (N,) dual-softmax score

    def __len__(self):
        return len(self.pairs)


@dataclass
class GtMatches:
    pairs: np.ndarray  # (N, 2)
    local_affines: np.ndarray  # (N, 2, 2), the M_i of each matched A-keypoint
    global_affine: np.ndarray  # (2, 2)
    n_a: int
    fallback: bool = False  # global affine unavailable, identity used
    point_affines: np.ndarray = field(init=False)  # (K_A, 2, 2)

    def __post_init__(self):
        aff = np.broadcast_to(self.global_affine, (self.n_a, 2, 2)).copy()
        if len(self.pairs):
            aff[self.pairs[:, 0]] = self.local_affines
        self.point_affines = aff

    def __len__(self):
        return len(self.pairs)


def _pairwise_distance(A, B) -> np.ndarray:
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    if A.shape[-1] != B.shape[-1]:
        raise ValueError(f"descriptor dimensions differ: {A.shape[-1]} vs {B.shape[-1]}")
    diff = A[..., :, None, :] - B[..., None, :, :]
    return np.sqrt(np.einsum("...k,...k->...", diff, diff))


def similarity_l2(descs_A, descs_B) -> np.ndarray:
    """S[i, j] = -||d_A,i - d_B,j||."""
    return -_pairwise_distance(descs_A, descs_B)


def steer_rows(spec: SteererSpec, affines, descs) -> np.ndarray:
    """rho(M_i) d_i for one affine per row (or one shared affine)."""
    descs = np.asarray(descs, dtype=float)
    if descs.shape[-1] != spec.dim:
        raise ValueError(f"descriptor dimension {descs.shape[-1]} != steerer dimension {spec.dim}")
    R = spec.matrix(affines)
    return np.einsum("...ij,...j->...i", R, descs)


def similarity_steered(descs_A, descs_B, spec: SteererSpec, affines) -> np.ndarray:
    """S[i, j] = -||rho(M_i) d_A,i - d_B,j||."""
    affines = np.asarray(affines, dtype=float)
    if affines.ndim == 3 and len(affines) != len(descs_A):
        raise ValueError("need one affine per A-keypoint")
    return similarity_l2(steer_rows(spec, affines, descs_A), descs_B)


def max_similarity(descs_A, descs_B, spec: SteererSpec, prototypes, return_argmax: bool = False):
    """S[i, j] = max over prototypes M of -||rho(M) d_A,i - d_B,j||.

    The argmax is the first maximizing prototype in the given order.
    """
    prototypes = np.asarray(prototypes, dtype=float).reshape(-1, 2, 2)
    if len(prototypes) == 0:
        raise ValueError("prototype set must be non-empty")
    stack = np.stack([similarity_steered(descs_A, descs_B, spec, P) for P in prototypes])
    arg = np.argmax(stack, axis=0)
    S = np.take_along_axis(stack, arg[None], axis=0)[0]
    return (S, arg) if return_argmax else S


def dual_softmax(S, inv_temperature: float = INV_TEMPERATURE) -> np.ndarray:
    Z = inv_temperature * np.asarray(S, dtype=float)
    return np.exp(log_softmax(Z, axis=1) + log_softmax(Z, axis=0))


def mnn_match(S, inv_temperature: float = INV_TEMPERATURE, threshold: float = DUAL_SOFTMAX_THRESHOLD) -> MatchSet:
    """Mutual nearest neighbours of S whose dual-softmax score exceeds ``threshold``."""
    if inv_temperature <= 0:
        raise ValueError("inverse temperature must be positive")
    if not 0 <= threshold < 1:
        raise ValueError("threshold must lie in [0, 1)")
    S = np.asarray(S, dtype=float)
    if S.size == 0:
        return MatchSet(np.zeros((0, 2), dtype=int), np.zeros(0))
    nn_ab = np.argmax(S, axis=1)
    nn_ba = np.argmax(S, axis=0)
    rows = np.arange(S.shape[0])
    mutual = nn_ba[nn_ab] == rows
    P = dual_softmax(S, inv_temperature)
    i = rows[mutual]
    j = nn_ab[mutual]
    score = P[i, j]
    keep = score > threshold
    return MatchSet(np.stack([i[keep], j[keep]], axis=1).astype(int), score[keep])


def dual_log_softmax_loss(S, gt_pairs, inv_temperature: float = INV_TEMPERATURE, return_grad: bool = False):
    """Mean over gt pairs of -log softmax_row - log softmax_col of inv_T * S."""
    gt = np.asarray(gt_pairs, dtype=int).reshape(-1, 2)
    if len(gt) == 0:
        raise ValueError("need at least one ground-truth pair")
    if inv_temperature <= 0:
        raise ValueError("inverse temperature must be positive")
    S = np.asarray(S, dtype=float)
    if gt.min() < 0 or gt[:, 0].max() >= S.shape[0] or gt[:, 1].max() >= S.shape[1]:
        raise IndexError("ground-truth pair outside the similarity matrix")
    Z = inv_temperature * S
    lr = log_softmax(Z, axis=1)
    lc = log_softmax(Z, axis=0)
    i, j = gt[:, 0], gt[:, 1]
    n = len(gt)
    loss = -(lr[i, j] + lc[i, j]).sum() / n
    if not return_grad:
        return float(loss)
    # d/dZ of -log softmax_row[i, j] is P_row[i, :] - e_j on row i
    G = np.zeros_like(S)
    Pr, Pc = np.exp(lr), np.exp(lc)
    np.add.at(G, i, Pr[i])
    np.add.at(G, (slice(None), j), Pc[:, j])
    np.add.at(G, (i, j), -2.0)
    return float(loss), G * inv_temperature / n


def gt_matches(
    kps_A,
    kps_B,
    phi,
    image_width: float,
    octagon_radius: float = 2.0,
    distance_fraction: float = GT_DISTANCE_FRACTION,
) -> GtMatches:
    """Mutual closest pairs after warping A into B, annotated with local affines.

    Unmatched A-keypoints get the least-squares global affine of all matches.
    """
    xa = np.asarray(kps_A, dtype=float).reshape(-1, 2)
    xb = np.asarray(kps_B, dtype=float).reshape(-1, 2)
    n_a = len(xa)
    empty = np.zeros((0, 2), dtype=int)
    if n_a == 0 or len(xb) == 0:
        return GtMatches(empty, np.zeros((0, 2, 2)), np.eye(2), n_a, fallback=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        try:
            wa = phi(xa)
        except DomainError:
            wa = np.array([_safe_point(phi, x) for x in xa])
    D = _pairwise_distance(wa, xb)
    D[~np.isfinite(D)] = np.inf
    nn_ab = np.argmin(D, axis=1)
    nn_ba = np.argmin(D, axis=0)
    rows = np.arange(n_a)
    ok = (nn_ba[nn_ab] == rows) & (D[rows, nn_ab] < distance_fraction * image_width)
    pairs = np.stack([rows[ok], nn_ab[ok]], axis=1).astype(int)
    local = np.array([octagon_affine(phi, xa[i], octagon_radius).linear for i in pairs[:, 0]]).reshape(-1, 2, 2)
    fallback = False
    try:
        G = fit_affine(xa[pairs[:, 0]], xb[pairs[:, 1]]).linear
    except DegeneracyError:
        log.warning("fewer than 3 usable ground-truth matches; global affine falls back to identity")
        G = np.eye(2)
        fallback = True
    return GtMatches(pairs, local, G, n_a, fallback)


def _safe_point(phi, x):
    try:
        return phi(x)
    except DomainError:
        return np.array([np.inf, np.inf])


def oracle_steered_match(
    descs_A,
    descs_B,
    gt: GtMatches,
    spec: SteererSpec,
    inv_temperature: float = INV_TEMPERATURE,
    threshold: float = DUAL_SOFTMAX_THRESHOLD,
    normalize: bool = False,
) -> MatchSet:
    """MNN matching after steering each A-description by its ground-truth affine.

    With ``normalize`` each affine is rescaled to unit |det| first.
    """
    affines = gt.point_affines
    if normalize:
        affines = normalize_det(affines)
    S = similarity_steered(descs_A, descs_B, spec, affines)
    return mnn_match(S, inv_temperature, threshold)


def count_correct(matches: MatchSet, kps_A, kps_B, phi, pixel_tol: float = PIXEL_TOL) -> int:
    if len(matches) == 0:
        return 0
    xa = np.asarray(kps_A, dtype=float).reshape(-1, 2)[matches.pairs[:, 0]]
    xb = np.asarray(kps_B, dtype=float).reshape(-1, 2)[matches.pairs[:, 1]]
    err = np.linalg.norm(phi(xa) - xb, axis=1)
    return int(np.sum(err <= pixel_tol))


def correct_mask(matches: MatchSet, kps_A, kps_B, phi, pixel_tol: float = PIXEL_TOL) -> np.ndarray:
    if len(matches) == 0:
        return np.zeros(0, dtype=bool)
    xa = np.asarray(kps_A, dtype=float).reshape(-1, 2)[matches.pairs[:, 0]]
    xb = np.asarray(kps_B, dtype=float).reshape(-1, 2)[matches.pairs[:, 1]]
    return np.linalg.norm(phi(xa) - xb, axis=1) <= pixel_tol
