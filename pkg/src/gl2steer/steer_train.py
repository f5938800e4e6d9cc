"""Training the steerer parameters (Q, xi) and the max-similarity prototypes.

Only the steerer is learned; descriptors come from a fixed pipeline.  Gradients
are derived by hand and checked against finite differences in the tests.

Notation for one A-description a_i steered by group element E_i:

    w_i = Q a_i,    v_i = B(E_i) w_i,    u_i = Q^-1 v_i,    S_ij = -||u_i - b_j||

where B(E) is the block-diagonal part of the steerer.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConditioningError, DomainError
from .geometry import HomographyDifficulty, random_homography, rotation
from .matching import (
    INV_TEMPERATURE,
    MatchSet,
    _pairwise_distance,
    count_correct,
    dual_log_softmax_loss,
    max_similarity,
    mnn_match,
)
from .pipelines import PIPELINES, PipelineConfig, centered_affine
from .repr_gl2 import SteererSpec, default_spec, det2, element_map, element_map_vjp, inv2, irrep_matrix_jacobian

log = logging.getLogger(__name__)

MIN_TRAIN_RCOND = 1e-8
MIN_PROTOTYPE_DET = 1e-8
LOSSES = ("stage1", "finetune")
PARAMS = ("Q", "xi", "prototypes")

# scale <= 2, all rotations, anisotropy <= 2, mild perspective
DEFAULT_DIFFICULTY = HomographyDifficulty(
    translation_px=0.0,
    rotation_range=np.pi,
    scale_range=float(np.log(2.0)),
    anisotropy_range=float(np.log(2.0)),
    perspective_range=3e-4,
)
UPRIGHT_DIFFICULTY = HomographyDifficulty(rotation_range=0.1, scale_range=0.1, anisotropy_range=0.05)


class TrainingHalted(ConditioningError):
    """Raised when Q or a prototype degenerates; ``state`` holds the last good state."""

    def __init__(self, message, state):
        super().__init__(message)
        self.state = state


@dataclass
class TrainState:
    spec: SteererSpec
    prototypes: np.ndarray  # (2, 2, 2): M1, M2
    step: int = 0
    moments: dict = field(default_factory=dict)  # name -> (first, second)
    rng_seed: int = 0
    loss_trace: list = field(default_factory=list)  # (step, loss)

    def __post_init__(self):
        self.prototypes = np.array(self.prototypes, dtype=float).reshape(2, 2, 2)
        if np.any(np.abs(det2(self.prototypes)) < MIN_PROTOTYPE_DET):
            raise DomainError("prototypes must be invertible")

    @property
    def prototype_set(self) -> np.ndarray:
        """{I, M1, M2} in matching order."""
        return np.concatenate([np.eye(2)[None], self.prototypes])

    def params(self) -> dict:
        return {"Q": self.spec.Q.copy(), "xi": self.spec.xis.copy(), "prototypes": self.prototypes.copy()}

    def with_params(self, params: dict) -> "TrainState":
        spec = self.spec.replace(Q=params["Q"], xis=params["xi"])
        return replace(self, spec=spec, prototypes=params["prototypes"])


def initial_state(dim: int = 15, seed: int = 0, prototype_noise: float = 0.05, convention: str = "M") -> TrainState:
    """Identity Q, zero xi, prototypes near the identity."""
    spec = default_spec(dim).replace(convention=convention)
    rng = np.random.default_rng([int(seed), 7])
    protos = np.eye(2) + prototype_noise * rng.standard_normal((2, 2, 2))
    return TrainState(spec, protos, rng_seed=int(seed))


# --------------------------------------------------------------------------
# batches


@dataclass
class TrainBatch:
    descs_A: np.ndarray
    descs_B: np.ndarray
    gt_pairs: np.ndarray
    affines: np.ndarray  # (K_A, 2, 2): M_i, global M for unmatched keypoints
    global_affine: np.ndarray
    kps_A: np.ndarray = None
    kps_B: np.ndarray = None
    phi: object = None
    seed: int = 0

    def __post_init__(self):
        self.descs_A = np.asarray(self.descs_A, dtype=float)
        self.descs_B = np.asarray(self.descs_B, dtype=float)
        self.gt_pairs = np.asarray(self.gt_pairs, dtype=int).reshape(-1, 2)
        self.affines = np.asarray(self.affines, dtype=float).reshape(-1, 2, 2)
        if self.descs_A.ndim != 2 or self.descs_B.ndim != 2 or self.descs_A.shape[1] != self.descs_B.shape[1]:
            raise ValueError("descriptor arrays must be (K, d) with a common d")
        if len(self.affines) != len(self.descs_A):
            raise ValueError("need one affine per A-description")
        if len(self.gt_pairs) == 0:
            raise ValueError("a training batch needs at least one ground-truth pair")


@dataclass(frozen=True)
class BatchConfig:
    pipeline: str = "moment"
    pipeline_cfg: PipelineConfig = PipelineConfig()
    difficulty: HomographyDifficulty = DEFAULT_DIFFICULTY
    min_matches: int = 8
    max_retries: int = 10


def _attempt_seed(seed: int, attempt: int) -> int:
    if attempt == 0:
        return int(seed)
    return int(np.random.SeedSequence([int(seed), attempt]).generate_state(1)[0])


def batch_from_pair(pair, seed: int = 0) -> TrainBatch:
    return TrainBatch(
        pair.descs_A,
        pair.descs_B,
        pair.gt.pairs,
        pair.gt.point_affines,
        pair.gt.global_affine,
        pair.kps_A,
        pair.kps_B,
        pair.phi,
        seed,
    )


def make_batch_affine(seed: int, cfg: BatchConfig = BatchConfig()) -> TrainBatch:
    """Scene, random homography, detections, octagon affines and descriptors.

    Pairs with fewer than ``min_matches`` ground-truth matches are rejected and
    a derived seed is tried, at most ``max_retries`` times.
    """
    make_pair = PIPELINES[cfg.pipeline]
    pc = cfg.pipeline_cfg
    for attempt in range(cfg.max_retries):
        s = _attempt_seed(seed, attempt)
        phi = random_homography(cfg.difficulty, [s, 3], center=pc.center)
        pair = make_pair(s, phi, pc)
        if len(pair.gt) >= cfg.min_matches:
            return batch_from_pair(pair, s)
        log.info("batch seed %d rejected: %d gt matches", s, len(pair.gt))
    raise DomainError(f"no usable batch for seed {seed} after {cfg.max_retries} attempts")


def make_batch_fixed(seed: int, M, cfg: BatchConfig = BatchConfig()) -> TrainBatch:
    """A pair warped by the fixed linear map M about the image center."""
    pc = cfg.pipeline_cfg
    pair = PIPELINES[cfg.pipeline](int(seed), centered_affine(M, pc.center), pc)
    if len(pair.gt) == 0:
        raise DomainError(f"seed {seed} has no ground-truth matches")
    return batch_from_pair(pair, int(seed))


# --------------------------------------------------------------------------
# forward and backward passes


def _steer_forward(spec: SteererSpec, E, A):
    B = spec.block_diagonal(E)
    w = A @ spec.Q.T
    v = np.einsum("...ij,...j->...i", B, w)
    u = v @ spec.Q_inv.T
    return B, w, v, u


def _similarity_backward(u, b, D, G):
    """dL/du from dL/dS, with S = -D; zero distance contributes zero."""
    with np.errstate(divide="ignore", invalid="ignore"):
        W = np.where(D > 0, G / D, 0.0)
    return -(W.sum(axis=1)[:, None] * u - W @ b)


def _steer_backward(spec: SteererSpec, E, A, B, w, v, u, g_u, need_E: bool):
    """Gradients w.r.t. Q, xi and (optionally) the group elements E.

    E is either one shared element or one per row; the E-gradient is summed
    accordingly.
    """
    h = g_u @ spec.Q_inv  # rows h_i = Q^-T g_i
    Bt_h = np.einsum("...ji,...j->...i", B, h)
    dQ = Bt_h.T @ A - h.T @ u
    shared = np.ndim(E) == 2
    logdet = np.log(np.abs(det2(E)))
    dxi = np.zeros(len(spec.degrees))
    dE = np.zeros(E.shape) if need_E else None
    if need_E:
        Einv_T = np.swapaxes(inv2(E), -1, -2)
        absdet = np.abs(det2(E))
        jac = {}
    for k, (n, xi, sl) in enumerate(zip(spec.degrees, spec.xis, spec.slices)):
        hv = np.einsum("ni,ni->n", h[:, sl], v[:, sl])
        dxi[k] = np.sum(logdet * hv)
        if not need_E:
            continue
        p = xi - n / 2
        if n not in jac:
            jac[n] = irrep_matrix_jacobian(n, E)
        if shared:
            outer = h[:, sl].T @ w[:, sl]  # sum_i h_i w_i^T over the block
            dE += absdet**p * np.einsum("rcab,ab->rc", jac[n], outer) + p * hv.sum() * Einv_T
        else:
            scale = (absdet**p)[:, None, None]
            dE += scale * np.einsum("nrcab,na,nb->nrc", jac[n], h[:, sl], w[:, sl])
            dE += p * hv[:, None, None] * Einv_T
    return dQ, dxi, dE


def _zero_grads(state: TrainState) -> dict:
    return {"Q": np.zeros_like(state.spec.Q), "xi": np.zeros_like(state.spec.xis), "prototypes": np.zeros((2, 2, 2))}


def _stage1(state: TrainState, batch: TrainBatch, inv_temperature: float, want_grad: bool):
    spec = state.spec
    E = element_map(spec.convention, batch.affines)
    B, w, v, u = _steer_forward(spec, E, batch.descs_A)
    D = _pairwise_distance(u, batch.descs_B)
    out = dual_log_softmax_loss(-D, batch.gt_pairs, inv_temperature, return_grad=want_grad)
    if not want_grad:
        return out, None
    loss, G = out
    g_u = _similarity_backward(u, batch.descs_B, D, G)
    dQ, dxi, _ = _steer_backward(spec, E, batch.descs_A, B, w, v, u, g_u, need_E=False)
    grads = _zero_grads(state)
    grads["Q"], grads["xi"] = dQ, dxi
    return loss, grads


def _finetune(state: TrainState, batch: TrainBatch, inv_temperature: float, want_grad: bool):
    spec = state.spec
    protos = state.prototype_set
    cache = []
    for P in protos:
        E = element_map(spec.convention, P)
        B, w, v, u = _steer_forward(spec, E, batch.descs_A)
        cache.append((E, B, w, v, u, _pairwise_distance(u, batch.descs_B)))
    stack = -np.stack([c[5] for c in cache])
    arg = np.argmax(stack, axis=0)  # first maximizer wins
    S = np.take_along_axis(stack, arg[None], axis=0)[0]
    out = dual_log_softmax_loss(S, batch.gt_pairs, inv_temperature, return_grad=want_grad)
    if not want_grad:
        return out, None
    loss, G = out
    grads = _zero_grads(state)
    for k, (E, B, w, v, u, D) in enumerate(cache):
        Gk = np.where(arg == k, G, 0.0)
        if not Gk.any():
            continue
        g_u = _similarity_backward(u, batch.descs_B, D, Gk)
        dQ, dxi, dE = _steer_backward(spec, E, batch.descs_A, B, w, v, u, g_u, need_E=k > 0)
        grads["Q"] += dQ
        grads["xi"] += dxi
        if k > 0:
            grads["prototypes"][k - 1] = element_map_vjp(spec.convention, protos[k], dE)
    return loss, grads


_LOSS_FUNCS = {"stage1": _stage1, "finetune": _finetune}


def loss_stage1(state: TrainState, batch: TrainBatch, inv_temperature: float = INV_TEMPERATURE) -> float:
    """Dual log-softmax loss of the similarity steered by each keypoint's M_i."""
    return _stage1(state, batch, inv_temperature, False)[0]


def loss_finetune(state: TrainState, batch: TrainBatch, inv_temperature: float = INV_TEMPERATURE) -> float:
    """Dual log-softmax loss of the max similarity over {I, M1, M2}."""
    return _finetune(state, batch, inv_temperature, False)[0]


def grad(state: TrainState, batch: TrainBatch, which: str = "stage1", inv_temperature: float = INV_TEMPERATURE):
    """(loss, {"Q", "xi", "prototypes"} gradients) of the selected loss."""
    if which not in _LOSS_FUNCS:
        raise ValueError(f"unknown loss {which!r}; expected one of {LOSSES}")
    return _LOSS_FUNCS[which](state, batch, inv_temperature, True)


def mean_loss(state: TrainState, batches, which: str = "stage1", inv_temperature: float = INV_TEMPERATURE) -> float:
    fn = loss_stage1 if which == "stage1" else loss_finetune
    return float(np.mean([fn(state, b, inv_temperature) for b in batches]))


def mean_grad(state: TrainState, batches, which: str = "stage1", inv_temperature: float = INV_TEMPERATURE):
    """Loss and gradients averaged over a list of batches."""
    total, acc = 0.0, _zero_grads(state)
    for b in batches:
        loss, g = grad(state, b, which, inv_temperature)
        total += loss
        for k in acc:
            acc[k] += g[k]
    n = len(batches)
    return total / n, {k: v / n for k, v in acc.items()}


# --------------------------------------------------------------------------
# optimization


@dataclass(frozen=True)
class TrainConfig:
    stage: str = "stage1"  # stage1 | finetune | both
    iterations: int = 200
    learning_rate: float = 1e-3
    batch_seeds: tuple = tuple(range(8))
    inv_temperature: float = INV_TEMPERATURE
    batch: BatchConfig = BatchConfig()
    finetune_batch: BatchConfig = BatchConfig(difficulty=UPRIGHT_DIFFICULTY)
    finetune_affine: tuple | None = None  # fixed linear warp for fine-tuning pairs
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.stage not in ("stage1", "finetune", "both"):
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if not self.batch_seeds:
            raise ValueError("need at least one batch seed")


# parameters updated in each stage
TRAINABLE = {"stage1": ("Q", "xi"), "finetune": ("xi", "prototypes")}


def make_batches(cfg: TrainConfig, stage: str) -> list[TrainBatch]:
    if stage == "stage1":
        return [make_batch_affine(s, cfg.batch) for s in cfg.batch_seeds]
    if cfg.finetune_affine is not None:
        M = np.asarray(cfg.finetune_affine, dtype=float).reshape(2, 2)
        return [make_batch_fixed(s, M, cfg.finetune_batch) for s in cfg.batch_seeds]
    return [make_batch_affine(s, cfg.finetune_batch) for s in cfg.batch_seeds]


def _check_state(params: dict) -> str | None:
    for name, val in params.items():
        if not np.all(np.isfinite(val)):
            return f"non-finite {name}"
    rcond = 1.0 / np.linalg.cond(params["Q"])
    if not rcond >= MIN_TRAIN_RCOND:
        return f"Q reciprocal condition {rcond:.3g} below {MIN_TRAIN_RCOND}"
    if np.any(np.abs(det2(params["prototypes"])) < MIN_PROTOTYPE_DET):
        return "prototype became singular"
    return None


def _run_stage(state: TrainState, cfg: TrainConfig, stage: str, batches) -> TrainState:
    names = TRAINABLE[stage]
    params = state.params()
    moments = {k: (m.copy(), v.copy()) for k, (m, v) in state.moments.items()}
    trace = list(state.loss_trace)
    step = state.step
    for _ in range(cfg.iterations):
        loss, g = mean_grad(state, batches, stage, cfg.inv_temperature)
        trace.append((step, float(loss)))
        step += 1
        new = dict(params)
        for name in names:
            m, v = moments.get(name, (np.zeros_like(params[name]), np.zeros_like(params[name])))
            m = cfg.beta1 * m + (1 - cfg.beta1) * g[name]
            v = cfg.beta2 * v + (1 - cfg.beta2) * g[name] ** 2
            moments[name] = (m, v)
            t = step
            m_hat = m / (1 - cfg.beta1**t)
            v_hat = v / (1 - cfg.beta2**t)
            new[name] = params[name] - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.eps)
        problem = _check_state(new)
        if problem:
            raise TrainingHalted(f"training halted at step {step}: {problem}", replace(state, loss_trace=trace))
        params = new
        state = replace(state.with_params(params), step=step, moments=moments, loss_trace=trace)
    return state


def train(cfg: TrainConfig, state: TrainState | None = None, batches=None) -> TrainState:
    """Adam on the stage's trainable parameters; every step averages all batches.

    ``batches`` may be given as {stage: [TrainBatch]} to reuse precomputed data.
    """
    state = initial_state(seed=cfg.seed) if state is None else state
    stages = ("stage1", "finetune") if cfg.stage == "both" else (cfg.stage,)
    if cfg.iterations == 0:
        return state
    for stage in stages:
        data = (batches or {}).get(stage) or make_batches(cfg, stage)
        state = _run_stage(state, cfg, stage, data)
    return state


# --------------------------------------------------------------------------
# evaluation


def candidate_affines(n_rotations: int = 8, scales=(2**-0.5, 1.0, 2**0.5)) -> np.ndarray:
    """A fixed grid of rotations times isotropic scales, identity first."""
    out = [np.eye(2)]
    for s in scales:
        for k in range(n_rotations):
            M = s * rotation(2 * np.pi * k / n_rotations)
            if not np.allclose(M, np.eye(2)):
                out.append(M)
    return np.array(out)


def steered_matches(
    spec: SteererSpec | None,
    batch: TrainBatch,
    candidates,
    inv_temperature: float = INV_TEMPERATURE,
    threshold: float = 0.01,
) -> MatchSet:
    """Max-similarity matching over a fixed candidate set; no ground truth used.

    ``spec=None`` is the frozen identity steerer, i.e. plain matching.
    """
    if spec is None:
        S = -_pairwise_distance(batch.descs_A, batch.descs_B)
    else:
        S = max_similarity(batch.descs_A, batch.descs_B, spec, candidates)
    return mnn_match(S, inv_temperature, threshold)


def count_batch_correct(matches: MatchSet, batch: TrainBatch, pixel_tol: float = 3.0) -> int:
    return count_correct(matches, batch.kps_A, batch.kps_B, batch.phi, pixel_tol)


def ablation_no_steerer(
    cfg: TrainConfig,
    eval_batches,
    state: TrainState | None = None,
    candidates=None,
    pixel_tol: float = 3.0,
) -> dict:
    """Correct-match counts of the trained steerer versus rho frozen to identity.

    Both arms see the same held-out batches; matching is oracle-free
    max similarity over ``candidates``.
    """
    candidates = candidate_affines() if candidates is None else candidates
    if state is None:
        state = train(cfg)
    rows = []
    for b in eval_batches:
        trained = count_batch_correct(steered_matches(state.spec, b, candidates, cfg.inv_temperature), b, pixel_tol)
        plain = count_batch_correct(steered_matches(None, b, candidates, cfg.inv_temperature), b, pixel_tol)
        rows.append({"seed": b.seed, "steerer": trained, "identity": plain})
    return {
        "rows": rows,
        "steerer": sum(r["steerer"] for r in rows),
        "identity": sum(r["identity"] for r in rows),
        "state": state,
    }
