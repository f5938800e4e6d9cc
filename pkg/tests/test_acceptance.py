"""Acceptance suite: one test per criterion, each recording a summary line."""
import time
from dataclasses import replace

import numpy as np
from scipy.optimize import linear_sum_assignment

from conftest import random_gl2
from gl2steer import cli
from gl2steer.descriptors import jet_descriptor, jet_steerer_spec
from gl2steer.geometry import Affine2, HomographyDifficulty, random_affine, random_homography
from gl2steer.matching import GtMatches, count_correct, max_similarity, mnn_match, oracle_steered_match
from gl2steer.pipelines import BENCH_ARMS, PipelineConfig, steer_bench
from gl2steer.repr_gl2 import IrrepSpec, SteererSpec, irrep_matrix, irrep_scaled, rotation
from gl2steer.robust_estimation import auc, corner_error, dlt_homography, ransac_homography
from gl2steer.scene_synth import random_scene, scene_jet, warp_scene
from gl2steer.selftest import fd_gradient_errors, gradient_check_batch, gradient_check_state, outlier_trial
from gl2steer.steer_train import (
    BatchConfig,
    TrainConfig,
    ablation_no_steerer,
    initial_state,
    make_batch_affine,
    make_batch_fixed,
    make_batches,
    mean_loss,
    train,
)


def rel_fro(A, B):
    return np.linalg.norm(A - B, axis=(-2, -1)) / np.linalg.norm(B, axis=(-2, -1))


def test_criterion_01_homomorphism(acceptance):
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    M1, M2 = random_gl2(rng, 1000), random_gl2(rng, 1000)
    worst = 0.0
    for n in range(5):
        worst = max(worst, rel_fro(irrep_matrix(n, M2 @ M1), irrep_matrix(n, M2) @ irrep_matrix(n, M1)).max())
        for xi in rng.normal(0, 1.5, size=4):
            s = IrrepSpec(n, float(xi))
            worst = max(worst, rel_fro(irrep_scaled(s, M2 @ M1), irrep_scaled(s, M2) @ irrep_scaled(s, M1)).max())
    for trial in range(5):
        degrees = list(rng.integers(0, 5, size=6))
        d = sum(int(k) + 1 for k in degrees)
        Q = np.eye(d) + 0.3 * rng.normal(size=(d, d))
        for conv in ("M", "MinvT"):  # the product-preserving element maps
            spec = SteererSpec(degrees, rng.normal(size=len(degrees)), Q, conv)
            worst = max(worst, rel_fro(spec.matrix(M2 @ M1), spec.matrix(M2) @ spec.matrix(M1)).max())
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-9 and elapsed <= 5.0
    acceptance(1, ok, f"max relative Frobenius error {worst:.2e} (tol 1e-9), {elapsed:.2f} s (limit 5 s)")
    assert ok


def test_criterion_02_degree2_closed_form(acceptance):
    rng = np.random.default_rng(102)
    M = random_gl2(rng, 100)
    a, b, c, d = M[:, 0, 0], M[:, 0, 1], M[:, 1, 0], M[:, 1, 1]
    ref = np.array(
        [
            [d * d, 2 * c * d, c * c],
            [b * d, a * d + b * c, a * c],
            [b * b, 2 * a * b, a * a],
        ]
    ).transpose(2, 0, 1)
    got = irrep_matrix(2, M)
    err = np.max(np.abs(got - ref) / np.maximum(np.abs(ref), 1.0))
    ok = err <= 8 * np.finfo(float).eps
    acceptance(2, ok, f"max entrywise error {err:.2e} over 100 matrices")
    assert ok


def test_criterion_03_unimodular(acceptance):
    rng = np.random.default_rng(103)
    M = random_gl2(rng, 1000)
    worst = 0.0
    for n in range(5):
        dets = np.linalg.det(irrep_scaled(IrrepSpec(n, 0.0), M))
        worst = max(worst, float(np.max(np.abs(np.abs(dets) - 1.0))))
    ok = worst <= 1e-9
    acceptance(3, ok, f"max | |det| - 1 | = {worst:.2e}")
    assert ok


def test_criterion_04_rotation_frequencies(acceptance):
    worst = 0.0
    for theta in np.linspace(0, 2 * np.pi, 36, endpoint=False):
        for n in range(5):
            ev = np.linalg.eigvals(irrep_matrix(n, rotation(theta)))
            expected = np.exp(1j * (2 * np.arange(n + 1) - n) * theta)
            cost = np.abs(ev[:, None] - expected[None, :])
            r, c = linear_sum_assignment(cost)
            worst = max(worst, float(cost[r, c].max()))
    ok = worst <= 1e-8
    acceptance(4, ok, f"max eigenvalue deviation {worst:.2e} over 36 angles, n=0..4")
    assert ok


def test_criterion_05_exact_equivariance(acceptance):
    rng = np.random.default_rng(105)
    spec = jet_steerer_spec()
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(500):
        scene = random_scene(int(rng.integers(2**31)), 5, (-6, -6, 6, 6), scale_range=(1.0, 3.0))
        x = rng.uniform(-3, 3, size=2)
        A = Affine2(random_affine(2.0, True, 2.0, int(rng.integers(2**31))), rng.uniform(-2, 2, size=2))
        lhs = spec.matrix(A.linear) @ jet_descriptor(scene_jet(scene, x))
        rhs = jet_descriptor(scene_jet(warp_scene(scene, A), A(x)))
        worst = max(worst, float(np.max(np.abs(lhs - rhs))))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-8 and elapsed <= 30
    acceptance(5, ok, f"max abs error {worst:.2e} over 500 trials, {elapsed:.1f} s (limit 30 s)")
    assert ok


def test_criterion_06_exact_pipeline_arms(acceptance):
    t0 = time.perf_counter()
    rows = steer_bench("jet", jet_steerer_spec(), range(50))
    elapsed = time.perf_counter() - t0
    oracle = {a.name: sum(r["oracle"] for r in rows if r["arm"] == a.name) for a in BENCH_ARMS}
    ident = {a.name: sum(r["identity"] for r in rows if r["arm"] == a.name) for a in BENCH_ARMS}
    base = oracle["no_affine"]
    within = {k: abs(v - base) <= 0.01 * base for k, v in oracle.items()}
    collapse = ident["scale2_rot"] < 0.5 * base
    ok = all(within.values()) and collapse and elapsed <= 120
    arms = ", ".join(f"{k}={v}{'' if within[k] else ' (outside 1%)'}" for k, v in oracle.items())
    acceptance(
        6,
        ok,
        f"oracle counts {arms}; identity scale2_rot={ident['scale2_rot']} vs 50% bound {0.5 * base:.0f}; "
        f"{elapsed:.0f} s",
    )
    assert collapse, "identity steerer should collapse on the scale-2 arm"
    assert elapsed <= 120
    assert all(within.values()), f"arms outside 1% of no_affine ({base}): {oracle}"


def test_criterion_07_discrete_pipeline_wins(acceptance):
    cfg = PipelineConfig()
    arms = [a for a in BENCH_ARMS if a.name in ("no_affine", "scale2_rot")]
    rows = steer_bench("moment", jet_steerer_spec(), range(50), cfg, arms)
    hard = [r for r in rows if r["arm"] == "scale2_rot"]
    wins = sum(r["oracle"] > r["identity"] for r in hard)
    base = sum(r["oracle"] for r in rows if r["arm"] == "no_affine")
    ok = wins >= 45
    acceptance(
        7,
        ok,
        f"oracle beats identity on {wins}/50 seeds (need 45); no-warp baseline {base} correct matches, "
        f"scale2_rot oracle {sum(r['oracle'] for r in hard)} vs identity {sum(r['identity'] for r in hard)}; "
        f"descriptor gain {cfg.descriptor_gain:g}",
    )
    assert ok


def test_criterion_08_gradients(acceptance):
    worst = {}
    for which in ("stage1", "finetune"):
        errs = [fd_gradient_errors(gradient_check_state(s), gradient_check_batch(s), which, 20, seed=s) for s in range(10)]
        worst[which] = float(np.max(errs))
    ok = max(worst.values()) <= 1e-4
    acceptance(8, ok, f"max relative FD error stage1 {worst['stage1']:.2e}, finetune {worst['finetune']:.2e}")
    assert ok


def test_criterion_09_training_efficacy(acceptance):
    cfg = TrainConfig(stage="stage1", iterations=200)
    batches = make_batches(cfg, "stage1")
    init = initial_state(seed=cfg.seed)
    state = train(cfg, init, {"stage1": batches})
    loss0, loss1 = mean_loss(init, batches), mean_loss(state, batches)
    held_out = [make_batch_affine(s, cfg.batch) for s in range(1000, 1010)]
    res = ablation_no_steerer(cfg, held_out, state)
    ok = loss1 < loss0 and res["steerer"] > res["identity"]
    acceptance(
        9,
        ok,
        f"mean loss {loss0:.3f} -> {loss1:.3f}; held-out correct matches trained {res['steerer']} "
        f"vs frozen identity {res['identity']}",
    )
    assert loss1 < loss0
    assert res["steerer"] > res["identity"]


def test_criterion_10_finetune_recovers_hidden_affine(acceptance):
    A_star = rotation(0.7) @ np.diag([1.4, 0.9])
    bc = BatchConfig(pipeline="jet")
    cfg = TrainConfig(
        stage="finetune",
        iterations=200,
        learning_rate=1e-2,
        batch_seeds=(0, 1, 2, 3),
        finetune_batch=bc,
        finetune_affine=tuple(A_star.ravel()),
    )
    start = replace(initial_state(seed=0), spec=jet_steerer_spec())
    state = train(cfg, start)
    pc = bc.pipeline_cfg
    oracle = maxsim = 0
    for seed in range(100, 120):
        b = make_batch_fixed(seed, A_star, bc)
        gt = b.gt_pairs
        gtm = GtMatches(gt, b.affines[gt[:, 0]], b.global_affine, len(b.kps_A))
        m_or = oracle_steered_match(b.descs_A, b.descs_B, gtm, state.spec, pc.inv_temperature, pc.threshold)
        oracle += count_correct(m_or, b.kps_A, b.kps_B, b.phi, pc.pixel_tol)
        S = max_similarity(b.descs_A, b.descs_B, state.spec, state.prototype_set)
        m_ms = mnn_match(S, pc.inv_temperature, pc.threshold)
        maxsim += count_correct(m_ms, b.kps_A, b.kps_B, b.phi, pc.pixel_tol)
    ratio = maxsim / oracle
    ok = ratio >= 0.95
    acceptance(10, ok, f"max-similarity {maxsim} vs oracle {oracle} correct matches, ratio {ratio:.3f} (need 0.95)")
    assert ok


def test_criterion_11_robust_estimation(acceptance):
    worst = 0.0
    for s in range(20):
        H = random_homography(HomographyDifficulty(20.0, 1.0, 0.5, 0.3, 5e-4), [s, 1], (128, 128))
        src = np.random.default_rng(s).uniform(0, 256, (30, 2))
        dst = H(src)
        for est in (dlt_homography(src[:4], dst[:4]), dlt_homography(src, dst), ransac_homography(src, dst).H_est):
            h_est = est.h / np.linalg.norm(est.h)
            h_gt = H.h / np.linalg.norm(H.h)
            h_est = h_est * np.sign(np.vdot(h_est, h_gt))
            worst = max(worst, float(np.max(np.abs(h_est - h_gt))))
    good = 0
    for s in range(100):
        res, H = outlier_trial(s)
        good += corner_error(res.H_est, H, 256, 256) <= 1.0
    auc_ok = (
        auc([0.0, 0.0]) == {3.0: 1.0, 5.0: 1.0, 10.0: 1.0}
        and auc([11.0, 50.0]) == {3.0: 0.0, 5.0: 0.0, 10.0: 0.0}
        and auc([1.5], [3])[3.0] == 0.5
    )
    ok = worst <= 1e-6 and good >= 95 and auc_ok
    acceptance(
        11,
        ok,
        f"exact recovery error {worst:.2e}; {good}/100 outlier trials within 1 px; AUC examples {'exact' if auc_ok else 'wrong'}",
    )
    assert ok


def _run_twice(tmp_path, argv):
    outs = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        assert cli.main(argv + ["--out", str(out)]) == 0
        outs.append({p.relative_to(out): p.read_bytes() for p in sorted(out.rglob("*")) if p.is_file()})
    return outs


def test_criterion_12_determinism(acceptance, tmp_path):
    commands = {
        "gen": ["gen", "--seed", "3"],
        "match": ["match", "--seed", "3"],
        "steer-bench": ["steer-bench", "--seed", "3", "--n-seeds", "2"],
        "train": ["train", "--seed", "3", "--iterations", "3", "--n-batches", "2", "--stage", "both"],
    }
    bad = []
    n_files = 0
    for name, argv in commands.items():
        a, b = _run_twice(tmp_path / name, argv)
        n_files += len(a)
        if not a or a != b:
            bad.append(name)
    ok = not bad
    acceptance(12, ok, f"{n_files} files byte-identical across two runs" if ok else f"differences in {bad}")
    assert ok
