import numpy as np
import pytest

from gl2steer import selftest
from gl2steer.descriptors import jet_steerer_spec
from gl2steer.geometry import HomographyDifficulty, random_homography
from gl2steer.pipelines import BENCH_ARMS, PipelineConfig, centered_affine, discrete_pair, exact_pair, steer_bench, totals
from gl2steer.repr_gl2 import injected_fault, steer

SMALL = PipelineConfig(image_size=128, n_blobs=20)


def test_centered_affine_fixes_center():
    A = centered_affine([[1.2, 0.3], [-0.4, 0.9]], SMALL.center)
    np.testing.assert_allclose(A(SMALL.center), SMALL.center, atol=1e-12)


def test_exact_pair_descriptors_are_steerable():
    phi = centered_affine([[1.3, 0.2], [-0.3, 0.8]], SMALL.center)
    pair = exact_pair(1, phi, SMALL)
    assert len(pair.gt) == len(pair.kps_A)
    spec = jet_steerer_spec()
    i, j = pair.gt.pairs.T
    steered = np.stack([steer(spec, M, d) for M, d in zip(pair.gt.local_affines, pair.descs_A[i])])
    np.testing.assert_allclose(steered, pair.descs_B[j], atol=1e-7 * np.abs(pair.descs_B).max())


def test_discrete_pair_is_deterministic():
    phi = random_homography(HomographyDifficulty(0, 0.5, 0.2, 0.2, 1e-4), 2, SMALL.center)
    a, b = discrete_pair(2, phi, SMALL), discrete_pair(2, phi, SMALL)
    np.testing.assert_array_equal(a.descs_A, b.descs_A)
    np.testing.assert_array_equal(a.kps_B, b.kps_B)
    assert len(a.meta["scores_A"]) == len(a.kps_A)


def test_steer_bench_rows_and_totals():
    rows = steer_bench("jet", jet_steerer_spec(), [0, 1], SMALL)
    assert [(r["seed"], r["arm"]) for r in rows] == [(s, a.name) for s in (0, 1) for a in BENCH_ARMS]
    for r in rows:
        assert 0 <= r["oracle"] <= min(r["n_A"], r["n_B"])
    t = totals(rows, "oracle")
    assert t["no_affine"] == rows[0]["oracle"] + rows[4]["oracle"]


def test_selftest_quick_run_passes():
    res = selftest.run(quick=True)
    assert set(res) == set(selftest.GROUPS)
    assert all(ok for ok, _ in res.values()), res


def test_selftest_fault_is_detected():
    with injected_fault("rho2-sign"):
        res = selftest.run(["homomorphism", "rho2_closed_form", "jet_equivariance"])
    assert not any(ok for ok, _ in res.values())


def test_selftest_unknown_group():
    with pytest.raises(KeyError):
        selftest.run(["nope"])
