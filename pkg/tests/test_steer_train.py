import numpy as np
import pytest

from gl2steer.descriptors import jet_descriptor, jet_steerer_spec
from gl2steer.errors import DomainError
from gl2steer.geometry import Affine2, random_affine, rotation
from gl2steer.matching import dual_log_softmax_loss, similarity_l2
from gl2steer.pipelines import PipelineConfig
from gl2steer.scene_synth import random_scene, scene_jet, warp_scene
from gl2steer.steer_train import (
    BatchConfig,
    TrainBatch,
    TrainConfig,
    TrainState,
    ablation_no_steerer,
    candidate_affines,
    grad,
    initial_state,
    loss_finetune,
    loss_stage1,
    make_batch_fixed,
    mean_loss,
    train,
)


def random_batch(seed, dim=6, k_a=9, k_b=8, rotations_only=False):
    rng = np.random.default_rng(seed)
    if rotations_only:
        M = rotation(rng.uniform(-np.pi, np.pi, k_a))
    else:
        M = np.stack([random_affine(1.5, True, 1.5, [seed, i]) for i in range(k_a)])
    gt = np.array([[0, 1], [2, 2], [4, 0], [6, 5]])
    return TrainBatch(rng.normal(size=(k_a, dim)), rng.normal(size=(k_b, dim)), gt, M, np.eye(2), seed=seed)


def perturbed_state(seed, dim=6):
    rng = np.random.default_rng(seed)
    st = initial_state(dim, seed, prototype_noise=0.3)
    return st.with_params(
        {"Q": np.eye(dim) + 0.1 * rng.normal(size=(dim, dim)), "xi": rng.normal(0, 0.5, len(st.spec.degrees)), "prototypes": st.prototypes}
    )


def test_initial_state():
    st = initial_state(15, seed=3)
    np.testing.assert_array_equal(st.spec.Q, np.eye(15))
    np.testing.assert_array_equal(st.spec.xis, np.zeros(5))
    assert st.prototype_set.shape == (3, 2, 2)
    np.testing.assert_array_equal(st.prototype_set[0], np.eye(2))
    with pytest.raises(DomainError):
        TrainState(st.spec, np.zeros((2, 2, 2)))


@pytest.mark.parametrize("which, loss_fn", [("stage1", loss_stage1), ("finetune", loss_finetune)])
@pytest.mark.parametrize("seed", range(3))
def test_full_gradient_against_finite_differences(which, loss_fn, seed):
    """Every coordinate of every trainable parameter, central differences."""
    st, b = perturbed_state(seed), random_batch(seed)
    L, g = grad(st, b, which)
    assert L == pytest.approx(loss_fn(st, b), rel=1e-14)
    params = st.params()
    h = 1e-6
    for name in ("Q", "xi", "prototypes"):
        fd = np.zeros_like(params[name])
        for idx in np.ndindex(params[name].shape):
            plus = {k: v.copy() for k, v in params.items()}
            minus = {k: v.copy() for k, v in params.items()}
            plus[name][idx] += h
            minus[name][idx] -= h
            fd[idx] = (loss_fn(st.with_params(plus), b) - loss_fn(st.with_params(minus), b)) / (2 * h)
        np.testing.assert_allclose(g[name], fd, atol=1e-6 * max(1.0, abs(L)))


def test_xi_gradient_vanishes_for_rotations():
    st, b = perturbed_state(4), random_batch(4, rotations_only=True)
    _, g = grad(st, b, "stage1")
    assert np.max(np.abs(g["xi"])) <= 1e-12 * max(1.0, np.abs(g["Q"]).max())


def test_identity_prototypes_reduce_to_plain_matching():
    st = perturbed_state(5)
    st = st.with_params({**st.params(), "prototypes": np.tile(np.eye(2), (2, 1, 1))})
    b = random_batch(5)
    plain = dual_log_softmax_loss(similarity_l2(b.descs_A, b.descs_B), b.gt_pairs)
    assert loss_finetune(st, b) == pytest.approx(plain, rel=1e-10)


def test_exact_steerer_lowers_stage1_loss():
    rng = np.random.default_rng(6)
    scene = random_scene(6, 10, (-8, -8, 8, 8), scale_range=(1.0, 3.0))
    x = rng.uniform(-5, 5, (20, 2))
    M = np.stack([random_affine(2.0, True, 1.5, [6, i]) for i in range(20)])
    dA = jet_descriptor(scene_jet(scene, x), 2.0)
    dB = np.stack([jet_descriptor(scene_jet(warp_scene(scene, Affine2(M[i])), M[i] @ x[i]), 2.0) for i in range(20)])
    b = TrainBatch(dA, dB, np.stack([np.arange(20)] * 2, 1), M, np.eye(2))
    st = initial_state(15)
    exact = TrainState(jet_steerer_spec(), st.prototypes)
    plain = TrainState(st.spec, st.prototypes)  # identity Q and zero xi, convention M
    assert loss_stage1(exact, b) < loss_stage1(plain, b)
    # the steered A-descriptions coincide with their partners, so the loss is that of S_ii = 0
    S = -np.linalg.norm(np.einsum("nij,nj->ni", np.stack([exact.spec.matrix(m) for m in M]), dA)[:, None] - dB[None], axis=-1)
    assert loss_stage1(exact, b) == pytest.approx(dual_log_softmax_loss(S, b.gt_pairs), rel=1e-9)


def test_zero_iterations_returns_initial_state():
    st = perturbed_state(7)
    out = train(TrainConfig(iterations=0), st)
    assert out is st


def test_training_decreases_loss_and_is_deterministic():
    batches = [random_batch(s) for s in range(3)]
    cfg = TrainConfig(stage="stage1", iterations=40, learning_rate=1e-2)
    st = initial_state(6)
    a = train(cfg, st, {"stage1": batches})
    b = train(cfg, st, {"stage1": batches})
    np.testing.assert_array_equal(a.spec.Q, b.spec.Q)
    assert a.step == 40 and len(a.loss_trace) == 40
    assert mean_loss(a, batches) < mean_loss(st, batches)
    assert all(np.isfinite(l) for _, l in a.loss_trace)
    np.testing.assert_array_equal(a.prototypes, st.prototypes)  # not trained in stage 1


def test_finetune_leaves_q_fixed():
    batches = [random_batch(s) for s in range(2)]
    st = perturbed_state(8)
    out = train(TrainConfig(stage="finetune", iterations=5, learning_rate=1e-2), st, {"finetune": batches})
    np.testing.assert_array_equal(out.spec.Q, st.spec.Q)
    assert not np.array_equal(out.prototypes, st.prototypes)


def test_finetune_beats_identity_prototypes_on_held_out_pairs():
    A_star = np.array([[1.3, 0.4], [-0.5, 0.9]])
    bc = BatchConfig(pipeline="jet", pipeline_cfg=PipelineConfig(image_size=128, n_blobs=20))
    cfg = TrainConfig(stage="finetune", iterations=100, learning_rate=2e-2, batch_seeds=(0, 1, 2), finetune_batch=bc,
                      finetune_affine=tuple(A_star.ravel()))
    start = TrainState(jet_steerer_spec(), np.eye(2) + 0.05 * np.random.default_rng(0).normal(size=(2, 2, 2)))
    st = train(cfg, start)
    held_out = [make_batch_fixed(s, A_star, bc) for s in (10, 11, 12)]
    identity = st.with_params({**st.params(), "prototypes": np.tile(np.eye(2), (2, 1, 1))})
    assert mean_loss(st, held_out, "finetune") <= mean_loss(identity, held_out, "finetune") + 1e-6
    assert min(np.linalg.norm(P - A_star) for P in st.prototypes) < 0.3


def test_ablation_ties_without_warp():
    cfg = TrainConfig(stage="stage1", iterations=30, learning_rate=1e-2, batch_seeds=(0, 1))
    state = train(cfg)
    held_out = [make_batch_fixed(s, np.eye(2), cfg.batch) for s in (100, 101, 102)]
    res = ablation_no_steerer(cfg, held_out, state=state)
    assert res["identity"] > 0
    assert abs(res["steerer"] - res["identity"]) <= 0.1 * res["identity"]


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(stage="other")
    with pytest.raises(ValueError):
        TrainConfig(iterations=-1)
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(ValueError):
        TrainBatch(np.zeros((2, 3)), np.zeros((2, 3)), np.zeros((0, 2)), np.tile(np.eye(2), (2, 1, 1)), np.eye(2))


def test_candidate_affines():
    C = candidate_affines()
    np.testing.assert_array_equal(C[0], np.eye(2))
    assert len(C) == 24  # 8 rotations x 3 scales, identity counted once
    dets = np.linalg.det(C)
    np.testing.assert_allclose(sorted(set(np.round(dets, 12))), [0.5, 1.0, 2.0])
