import numpy as np
import pytest

_ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def acceptance():
    """Record one (passed, detail) line per acceptance criterion."""

    def record(number: int, passed: bool, detail: str):
        _ACCEPTANCE[number] = (bool(passed), detail)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        ok, detail = _ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


def random_gl2(rng, n, min_abs_det=0.1):
    """Random invertible 2x2 matrices with |det| bounded away from zero."""
    M = rng.normal(size=(n, 2, 2))
    bad = np.abs(np.linalg.det(M)) < min_abs_det
    while np.any(bad):
        M[bad] = rng.normal(size=(int(bad.sum()), 2, 2))
        bad = np.abs(np.linalg.det(M)) < min_abs_det
    return M


def substitution_rep(n, M):
    """Independent oracle for the degree-n irrep.

    A coefficient vector a in the basis C(n,k) x^k y^(n-k) is a polynomial p;
    the image is the coefficient vector of p(a x + c y, b x + d y), recovered
    by solving an interpolation system on n+1 sample points.
    """
    from math import comb

    (a, b), (c, d) = M
    t = np.linspace(0.1, 2.9, n + 1)
    xs, ys = np.cos(t), np.sin(t)
    basis = lambda x, y: np.stack([comb(n, k) * x**k * y ** (n - k) for k in range(n + 1)], -1)  # noqa: E731
    V = basis(xs, ys)
    W = basis(a * xs + c * ys, b * xs + d * ys)
    return np.linalg.solve(V, W)
