"""Finite-dimensional representations of GL(2) used as descriptor steerers.

The degree-n irrep acts on homogeneous polynomials of degree n in (x, y)
through ``(rho_n(M) q)(x, y) = q((x, y) M)`` with ``(x, y)`` a row vector.
Coefficient vectors are expressed in the basis ``C(n, k) x^k y^(n-k)`` with
``k`` ascending, so ``y^n`` comes first and ``x^n`` last.  In this basis
``rho_1(M) = J M J`` with ``J`` the 2x2 exchange matrix; this is the
standard representation up to the change of basis ``J``.

All functions accept a single 2x2 matrix or a stack of shape ``(..., 2, 2)``.
"""
from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass
from functools import lru_cache
from math import comb
from typing import Sequence

import numpy as np
from scipy import linalg as sla

from .errors import ConditioningError, DomainError

DET_EPS = 1e-12
MAX_DEGREE = 4
MIN_RCOND = 1e-10

# How a geometric local affine M is turned into the group element fed to rho.
CONVENTIONS = ("M", "MT", "Minv", "MinvT")

# Deliberate corruptions for checking that the self-test notices them.
FAULTS = ("rho2-sign",)
_active_faults: set[str] = set()


@contextmanager
def injected_fault(name: str):
    """Temporarily corrupt the library; ``rho2-sign`` flips one entry of rho_2."""
    if name not in FAULTS:
        raise ValueError(f"unknown fault {name!r}; known: {FAULTS}")
    _active_faults.add(name)
    try:
        yield
    finally:
        _active_faults.discard(name)


def as_mat2(M) -> np.ndarray:
    M = np.asarray(M, dtype=float)
    if M.shape[-2:] != (2, 2):
        raise ValueError(f"expected (..., 2, 2) matrices, got shape {M.shape}")
    return M


def det2(M) -> np.ndarray:
    M = as_mat2(M)
    return M[..., 0, 0] * M[..., 1, 1] - M[..., 0, 1] * M[..., 1, 0]


def check_invertible(M) -> np.ndarray:
    det = det2(M)
    if np.any(~np.isfinite(det)) or np.any(np.abs(det) < DET_EPS):
        raise DomainError("singular or non-finite 2x2 matrix (|det| < 1e-12)")
    return det


def inv2(M) -> np.ndarray:
    M = as_mat2(M)
    det = check_invertible(M)
    out = np.empty_like(M)
    out[..., 0, 0] = M[..., 1, 1]
    out[..., 1, 1] = M[..., 0, 0]
    out[..., 0, 1] = -M[..., 0, 1]
    out[..., 1, 0] = -M[..., 1, 0]
    return out / det[..., None, None]


def element_map(convention: str, M) -> np.ndarray:
    """Apply one of the four candidate maps M, M^T, M^-1, M^-T.

    M and M^-T preserve products, so the steerer stays a homomorphism in M;
    M^T and M^-1 reverse them and give an anti-homomorphism.
    """
    M = as_mat2(M)
    if convention == "M":
        return M
    if convention == "MT":
        return np.swapaxes(M, -1, -2)
    if convention == "Minv":
        return inv2(M)
    if convention == "MinvT":
        return np.swapaxes(inv2(M), -1, -2)
    raise ValueError(f"unknown convention {convention!r}")


def element_map_vjp(convention: str, M, grad_E) -> np.ndarray:
    """Pull a gradient w.r.t. ``E = element_map(convention, M)`` back to M."""
    M = as_mat2(M)
    grad_E = np.asarray(grad_E, dtype=float)
    T = lambda X: np.swapaxes(X, -1, -2)  # noqa: E731
    if convention == "M":
        return grad_E
    if convention == "MT":
        return T(grad_E)
    E = element_map(convention, M)
    if convention == "Minv":
        # dE = -E dM E
        return -T(E) @ grad_E @ T(E)
    # E = M^-T, dE = -E dM^T E
    return -E @ T(grad_E) @ E


def rotation(theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    c, s = np.cos(theta), np.sin(theta)
    return np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)


# --------------------------------------------------------------------------
# polynomial irreps


@dataclass(frozen=True)
class _TermTable:
    # one row per monomial contribution alpha^pa beta^pb gamma^pc delta^pd
    coef: np.ndarray
    powers: np.ndarray  # (n_terms, 4)
    scatter: np.ndarray  # (n_terms, (n+1)^2) 0/1 matrix
    n: int

    def evaluate(self, M: np.ndarray) -> np.ndarray:
        flat = M.reshape(M.shape[:-2] + (4,))
        # pw[..., v, p] = entry_v ** p
        pw = flat[..., :, None] ** np.arange(self.n + 1)
        vals = self.coef * np.prod(
            np.stack([pw[..., v, self.powers[:, v]] for v in range(4)], axis=-1), axis=-1
        )
        out = vals @ self.scatter
        return out.reshape(M.shape[:-2] + (self.n + 1, self.n + 1))


def _build_table(n: int, rows, cols, coef, powers) -> _TermTable:
    size = n + 1
    scatter = np.zeros((len(coef), size * size))
    scatter[np.arange(len(coef)), np.asarray(rows) * size + np.asarray(cols)] = 1.0
    return _TermTable(
        coef=np.asarray(coef, dtype=float),
        powers=np.asarray(powers, dtype=int).reshape(-1, 4),
        scatter=scatter,
        n=n,
    )


@lru_cache(maxsize=None)
def _irrep_terms(n: int) -> tuple[_TermTable, tuple[_TermTable, ...]]:
    """Monomial tables for rho_n and for its four partial derivatives.

    Entry [m, k] is C(n,k)/C(n,m) times the coefficient of x^m y^(n-m) in
    (alpha x + gamma y)^k (beta x + delta y)^(n-k).
    """
    rows, cols, coef, powers = [], [], [], []
    for m in range(n + 1):
        for k in range(n + 1):
            scale = comb(n, k) / comb(n, m)
            for j in range(max(0, m - (n - k)), min(k, m) + 1):
                rows.append(m)
                cols.append(k)
                coef.append(scale * comb(k, j) * comb(n - k, m - j))
                powers.append((j, m - j, k - j, n - k - m + j))
    base = _build_table(n, rows, cols, coef, powers)
    derivs = []
    for v in range(4):
        d_rows, d_cols, d_coef, d_pow = [], [], [], []
        for r, c, cf, pw in zip(rows, cols, coef, powers):
            if pw[v] == 0:
                continue
            pw2 = list(pw)
            pw2[v] -= 1
            d_rows.append(r)
            d_cols.append(c)
            d_coef.append(cf * pw[v])
            d_pow.append(pw2)
        derivs.append(_build_table(n, d_rows, d_cols, d_coef, d_pow))
    return base, tuple(derivs)


def _check_degree(n: int) -> int:
    if not isinstance(n, (int, np.integer)) or not 0 <= n <= MAX_DEGREE:
        raise ValueError(f"irrep degree must be an integer in 0..{MAX_DEGREE}, got {n!r}")
    return int(n)


def irrep_matrix(n: int, M) -> np.ndarray:
    """Matrix of rho_n(M) on the scaled monomial basis, shape (..., n+1, n+1)."""
    n = _check_degree(n)
    M = as_mat2(M)
    check_invertible(M)
    if n == 0:
        return np.ones(M.shape[:-2] + (1, 1))
    out = _irrep_terms(n)[0].evaluate(M)
    if n == 2 and "rho2-sign" in _active_faults:
        out[..., 0, 1] *= -1
    return out


def irrep_matrix_jacobian(n: int, M) -> np.ndarray:
    """Partial derivatives of rho_n(M), shape (..., 2, 2, n+1, n+1).

    ``out[..., r, c]`` is the derivative with respect to ``M[..., r, c]``.
    """
    n = _check_degree(n)
    M = as_mat2(M)
    if n == 0:
        return np.zeros(M.shape[:-2] + (2, 2, 1, 1))
    derivs = _irrep_terms(n)[1]
    out = np.stack([d.evaluate(M) for d in derivs], axis=-3)
    return out.reshape(M.shape[:-2] + (2, 2, n + 1, n + 1))


def det_rep(xi: float, M) -> np.ndarray | float:
    """One-dimensional representation |det M|^xi."""
    det = check_invertible(M)
    out = np.abs(det) ** float(xi)
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class IrrepSpec:
    degree: int
    xi: float = 0.0

    def __post_init__(self):
        _check_degree(self.degree)

    @property
    def dim(self) -> int:
        return self.degree + 1


def irrep_scaled(spec: IrrepSpec, M) -> np.ndarray:
    """rho_{n,xi}(M) = |det M|^(xi - n/2) rho_n(M)."""
    M = as_mat2(M)
    det = check_invertible(M)
    scale = np.abs(det) ** (spec.xi - spec.degree / 2)
    return np.asarray(scale)[..., None, None] * irrep_matrix(spec.degree, M)


# --------------------------------------------------------------------------
# composite steerers


class SteererSpec:
    """Block-diagonal irreps in a learned basis: Q^-1 (+)_j rho_{n_j,xi_j} Q.

    ``convention`` selects the map from a geometric local affine to the group
    element fed to the irreps (see :func:`element_map`).  The pure algebraic
    object corresponds to ``convention="M"``.
    """

    def __init__(self, degrees: Sequence[int], xis=None, Q=None, convention: str = "M"):
        self.degrees = tuple(_check_degree(int(n)) for n in degrees)
        if not self.degrees:
            raise ValueError("a steerer needs at least one block")
        d = sum(n + 1 for n in self.degrees)
        xis = np.zeros(len(self.degrees)) if xis is None else np.array(xis, dtype=float)
        if xis.shape != (len(self.degrees),):
            raise ValueError("need one determinant exponent per block")
        Q = np.eye(d) if Q is None else np.array(Q, dtype=float)
        if Q.shape != (d, d):
            raise ValueError(f"Q must be {d}x{d}, got {Q.shape}")
        if convention not in CONVENTIONS:
            raise ValueError(f"unknown convention {convention!r}")
        if not np.all(np.isfinite(Q)) or not np.all(np.isfinite(xis)):
            raise ValueError("non-finite steerer parameters")
        rcond = 1.0 / np.linalg.cond(Q)
        if not rcond >= MIN_RCOND:
            raise ConditioningError(f"Q reciprocal condition {rcond:.3g} below {MIN_RCOND}")
        self.xis = xis
        self.Q = Q
        self.convention = convention
        self.rcond = rcond
        self._lu = sla.lu_factor(Q)
        self.Q_inv = sla.lu_solve(self._lu, np.eye(d))
        self.xis.setflags(write=False)
        self.Q.setflags(write=False)
        self.Q_inv.setflags(write=False)
        offsets = np.cumsum((0,) + tuple(n + 1 for n in self.degrees))
        self.slices = tuple(slice(int(a), int(b)) for a, b in zip(offsets[:-1], offsets[1:]))

    @property
    def dim(self) -> int:
        return self.Q.shape[0]

    @property
    def blocks(self) -> list[IrrepSpec]:
        return [IrrepSpec(n, float(x)) for n, x in zip(self.degrees, self.xis)]

    def replace(self, **changes) -> "SteererSpec":
        kw = dict(degrees=self.degrees, xis=self.xis, Q=self.Q, convention=self.convention)
        kw.update(changes)
        return SteererSpec(**kw)

    def block_diagonal(self, E) -> np.ndarray:
        """(+)_j rho_{n_j,xi_j}(E) for group elements E (already mapped)."""
        E = as_mat2(E)
        det = np.abs(check_invertible(E))
        out = np.zeros(E.shape[:-2] + (self.dim, self.dim))
        cache = {}
        for n, xi, sl in zip(self.degrees, self.xis, self.slices):
            if n not in cache:
                cache[n] = irrep_matrix(n, E)
            scale = det ** (xi - n / 2)
            out[..., sl, sl] = np.asarray(scale)[..., None, None] * cache[n]
        return out

    def matrix(self, M) -> np.ndarray:
        E = element_map(self.convention, as_mat2(M))
        return self.Q_inv @ self.block_diagonal(E) @ self.Q

    def to_dict(self) -> dict:
        return {
            "degrees": list(self.degrees),
            "xis": [float(x) for x in self.xis],
            "Q": [float(q) for q in self.Q.ravel()],
            "convention": self.convention,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SteererSpec":
        degrees = [int(n) for n in data["degrees"]]
        d = sum(n + 1 for n in degrees)
        Q = np.array(data["Q"], dtype=float).reshape(d, d)
        return cls(degrees, data["xis"], Q, data.get("convention", "M"))

    def __eq__(self, other):
        if not isinstance(other, SteererSpec):
            return NotImplemented
        return (
            self.degrees == other.degrees
            and self.convention == other.convention
            and np.array_equal(self.xis, other.xis)
            and np.array_equal(self.Q, other.Q)
        )

    def __repr__(self):
        return (
            f"SteererSpec(degrees={self.degrees}, xis={self.xis.tolist()}, "
            f"dim={self.dim}, convention={self.convention!r})"
        )


def steerer_matrix(spec: SteererSpec, M) -> np.ndarray:
    return spec.matrix(M)


def steer(spec: SteererSpec, M, desc) -> np.ndarray:
    """Apply rho(M) to descriptors.

    ``desc`` is ``(d,)`` or ``(K, d)``; ``M`` is one matrix or one per row.
    """
    desc = np.asarray(desc, dtype=float)
    if desc.shape[-1] != spec.dim:
        raise ValueError(f"descriptor dimension {desc.shape[-1]} != steerer dimension {spec.dim}")
    R = spec.matrix(M)
    return np.einsum("...ij,...j->...i", R, desc)


def default_spec(d: int, degree_cutoff: int = MAX_DEGREE) -> SteererSpec:
    """Equal multiplicity of every degree 0..cutoff; leftovers go to low degrees.

    A full round of degrees 0..cutoff spans (cutoff+1)(cutoff+2)/2 dimensions.
    Remaining dimensions are filled by sweeping degrees upward from 0 and
    adding a block whenever it still fits.
    """
    _check_degree(degree_cutoff)
    if d < 1:
        raise ValueError("dimension must be positive")
    round_size = (degree_cutoff + 1) * (degree_cutoff + 2) // 2
    reps, rest = divmod(d, round_size)
    counts = [reps] * (degree_cutoff + 1)
    while rest:
        for n in range(degree_cutoff + 1):
            if n + 1 <= rest:
                counts[n] += 1
                rest -= n + 1
    degrees = [n for n in range(degree_cutoff + 1) for _ in range(counts[n])]
    return SteererSpec(degrees)
