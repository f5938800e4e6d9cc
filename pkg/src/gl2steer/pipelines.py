"""Two-view data generation and the oracle-steering benchmark.

Coordinates of view A are pixel coordinates, and the analytic scene lives in
those same coordinates.  View B is W_phi[A] for an affine or homography phi.

The *exact* pipeline describes both views with analytic jets and places the
B keypoints at phi(x_A), so steering is exact.  The *discrete* pipeline
renders both views, detects Harris corners independently and uses windowed
moment descriptors.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .descriptors import describe, harris_detect, jet_descriptor, keypoint_array
from .geometry import Affine2, CompositeWarp, Homography, random_affine
from .matching import (
    DUAL_SOFTMAX_THRESHOLD,
    INV_TEMPERATURE,
    PIXEL_TOL,
    GtMatches,
    count_correct,
    gt_matches,
    mnn_match,
    oracle_steered_match,
    similarity_l2,
)
from .repr_gl2 import SteererSpec
from .scene_synth import SceneImage, random_scene, render, warped_scene_jet, scene_jet


@dataclass(frozen=True)
class PipelineConfig:
    image_size: int = 256
    n_blobs: int = 60
    blob_sigma: tuple[float, float] = (4.0, 10.0)
    top_k: int = 120
    nms_radius: float = 4.0
    descriptor_unit: float = 5.0  # jet length unit == moment window radius
    descriptor_gain: float = 8.0  # see calibrate_descriptor_gain
    octagon_radius: float = 2.0
    inv_temperature: float = INV_TEMPERATURE
    threshold: float = DUAL_SOFTMAX_THRESHOLD
    pixel_tol: float = PIXEL_TOL

    @property
    def center(self) -> np.ndarray:
        c = (self.image_size - 1) / 2
        return np.array([c, c])


@dataclass
class ViewPair:
    scene: SceneImage
    phi: object  # A -> B warp
    kps_A: np.ndarray
    kps_B: np.ndarray
    descs_A: np.ndarray
    descs_B: np.ndarray
    gt: GtMatches
    image_A: object = None
    image_B: object = None
    meta: dict = field(default_factory=dict)


def centered_affine(M, center) -> Affine2:
    """x -> center + M (x - center)."""
    M = np.asarray(M, dtype=float)
    c = np.asarray(center, dtype=float)
    return Affine2(M, c - M @ c)


def make_scene(seed, cfg: PipelineConfig) -> SceneImage:
    n = cfg.image_size
    return random_scene(seed, cfg.n_blobs, (0, 0, n - 1, n - 1), cfg.blob_sigma)


def exact_pair(seed, phi, cfg: PipelineConfig = PipelineConfig(), scene=None) -> ViewPair:
    """Jet descriptors at Harris corners of A and at their exact images in B."""
    rng = np.random.default_rng([int(seed), 1])
    scene = make_scene(seed, cfg) if scene is None else scene
    n = cfg.image_size
    img_A = render(scene, n, n)
    det_A = harris_detect(img_A, top_k=cfg.top_k, nms_radius=cfg.nms_radius)
    kps_A = keypoint_array(det_A)
    scores_A = np.array([kp.score for kp in det_A])
    perm = rng.permutation(len(kps_A))
    kps_B = phi(kps_A)[perm] if len(kps_A) else np.zeros((0, 2))
    descs_A = cfg.descriptor_gain * jet_descriptor(scene_jet(scene, kps_A), cfg.descriptor_unit)
    descs_B = cfg.descriptor_gain * jet_descriptor(warped_scene_jet(scene, phi, kps_B), cfg.descriptor_unit)
    gt = gt_matches(kps_A, kps_B, phi, n, cfg.octagon_radius)
    meta = {"seed": int(seed), "scores_A": scores_A, "scores_B": scores_A[perm]}
    return ViewPair(scene, phi, kps_A, kps_B, descs_A, descs_B, gt, img_A, None, meta)


def fit_canvas(phi, size: int, max_size: int = 1024):
    """Shift phi so the warped A frame starts at the origin of B.

    Returns (shifted warp, (width, height)); B then shows all of A.
    """
    corners = np.array([[-0.5, -0.5], [size - 0.5, -0.5], [-0.5, size - 0.5], [size - 0.5, size - 0.5]])
    w = phi(corners)
    lo = np.floor(w.min(0) + 0.5)
    shift = Affine2(np.eye(2), -lo)
    dims = np.minimum(np.ceil(w.max(0) - lo + 0.5), max_size).astype(int)
    if isinstance(phi, Affine2):
        warp = shift.compose(phi)
    elif isinstance(phi, Homography):
        warp = Homography.from_affine(shift).compose(phi)
    else:
        warp = CompositeWarp([phi, shift])
    return warp, (int(dims[0]), int(dims[1]))


def frame_mask(phi, size: int, shape) -> np.ndarray:
    """Pixels of B whose preimage lies inside A's frame."""
    h, w = shape
    ys, xs = np.mgrid[0:h, 0:w].astype(float)
    src = phi.inverse()(np.stack([xs, ys], axis=-1))
    return np.all((src >= -0.5) & (src <= size - 0.5), axis=-1)


def discrete_pair(seed, phi, cfg: PipelineConfig = PipelineConfig(), scene=None) -> ViewPair:
    """Rendered views, independent Harris detections, moment descriptors.

    B is rendered on a canvas holding the whole warped A frame; pixels whose
    preimage falls outside A are masked invalid.
    """
    scene = make_scene(seed, cfg) if scene is None else scene
    n = cfg.image_size
    phi, (wb, hb) = fit_canvas(phi, n)
    img_A = render(scene, n, n)
    img_B = render(scene, wb, hb, warp=phi)
    img_B.valid = frame_mask(phi, n, img_B.data.shape)
    kA = harris_detect(img_A, top_k=cfg.top_k, nms_radius=cfg.nms_radius)
    kB = harris_detect(img_B, top_k=cfg.top_k, nms_radius=cfg.nms_radius)
    descs_A, keep_A = describe(img_A, kA, cfg.descriptor_unit)
    descs_B, keep_B = describe(img_B, kB, cfg.descriptor_unit)
    descs_A = descs_A * cfg.descriptor_gain
    descs_B = descs_B * cfg.descriptor_gain
    kps_A = keypoint_array(kA)[keep_A].reshape(-1, 2)
    kps_B = keypoint_array(kB)[keep_B].reshape(-1, 2)
    # distances are measured in B, so the tolerance follows its long side
    gt = gt_matches(kps_A, kps_B, phi, max(img_B.width, img_B.height), cfg.octagon_radius)
    meta = {
        "seed": int(seed),
        "scores_A": np.array([kA[i].score for i in keep_A]),
        "scores_B": np.array([kB[i].score for i in keep_B]),
    }
    return ViewPair(scene, phi, kps_A, kps_B, descs_A, descs_B, gt, img_A, img_B, meta)


PIPELINES = {"jet": exact_pair, "moment": discrete_pair}


@dataclass(frozen=True)
class Arm:
    name: str
    scale_max: float
    full_rotations: bool
    anisotropy_max: float
    normalize: bool = False


# The four difficulty levels of the oracle-steering benchmark.
BENCH_ARMS = (
    Arm("no_affine", 1.0, False, 1.0),
    Arm("scale1_rot", 1.0, True, 1.0),
    Arm("scale2_rot", 2.0, True, 2.0),
    Arm("scale2_rot_norm", 2.0, True, 2.0, normalize=True),
)


def arm_warp(arm: Arm, seed, cfg: PipelineConfig) -> Affine2:
    M = random_affine(arm.scale_max, arm.full_rotations, arm.anisotropy_max, [int(seed), 2])
    return centered_affine(M, cfg.center)


def match_counts(pair: ViewPair, spec: SteererSpec, cfg: PipelineConfig, normalize: bool = False) -> dict:
    """Correct matches with the oracle steerer and with no steering."""
    oracle = oracle_steered_match(
        pair.descs_A, pair.descs_B, pair.gt, spec, cfg.inv_temperature, cfg.threshold, normalize
    )
    plain = mnn_match(similarity_l2(pair.descs_A, pair.descs_B), cfg.inv_temperature, cfg.threshold)
    return {
        "oracle": count_correct(oracle, pair.kps_A, pair.kps_B, pair.phi, cfg.pixel_tol),
        "identity": count_correct(plain, pair.kps_A, pair.kps_B, pair.phi, cfg.pixel_tol),
        "n_gt": len(pair.gt),
        "n_A": len(pair.kps_A),
        "n_B": len(pair.kps_B),
    }


def steer_bench(pipeline: str, spec: SteererSpec, seeds, cfg: PipelineConfig = PipelineConfig(), arms=BENCH_ARMS):
    """Per-seed, per-arm correct-match counts; the scene for a seed is shared by all arms."""
    make_pair = PIPELINES[pipeline]
    rows = []
    for seed in seeds:
        scene = make_scene(seed, cfg)
        for arm in arms:
            phi = arm_warp(arm, seed, cfg)
            pair = make_pair(seed, phi, cfg, scene=scene)
            counts = match_counts(pair, spec, cfg, normalize=arm.normalize)
            rows.append({"seed": int(seed), "arm": arm.name, **counts})
    return rows


def totals(rows, key: str) -> dict:
    out: dict[str, int] = {}
    for r in rows:
        out[r["arm"]] = out.get(r["arm"], 0) + r[key]
    return out


def calibrate_descriptor_gain(
    pipeline: str = "moment",
    cfg: PipelineConfig = PipelineConfig(),
    seeds=range(10),
    gains=(1, 2, 4, 8, 16, 32, 64),
    keep: float = 0.99,
) -> float:
    """Smallest gain at which the dual-softmax threshold costs < 1% of no-warp matches.

    Dual-softmax scores depend on the absolute descriptor scale, so the gain is
    fixed from the no-warp baseline: thresholded MNN must keep ``keep`` of the
    correct matches that plain MNN finds.
    """
    pairs = []
    for seed in seeds:
        pair = PIPELINES[pipeline](seed, centered_affine(np.eye(2), cfg.center), replace(cfg, descriptor_gain=1.0))
        pairs.append(pair)
    for g in gains:
        plain = thresholded = 0
        for p in pairs:
            S = similarity_l2(g * p.descs_A, g * p.descs_B)
            plain += count_correct(mnn_match(S, cfg.inv_temperature, 0.0), p.kps_A, p.kps_B, p.phi, cfg.pixel_tol)
            m = mnn_match(S, cfg.inv_temperature, cfg.threshold)
            thresholded += count_correct(m, p.kps_A, p.kps_B, p.phi, cfg.pixel_tol)
        if thresholded >= keep * plain:
            return float(g)
    return float(gains[-1])
