"""Bivariate polynomials truncated at total degree 4.

Coefficients live in a length-15 vector ordered by total degree k and then by
x-power j ascending: index ``k(k+1)/2 + j`` holds the coefficient of
``x^j y^(k-j)``.  A leading batch shape is allowed.
"""
from __future__ import annotations

from functools import lru_cache
from math import comb

import numpy as np

DEGREE = 4
SIZE = (DEGREE + 1) * (DEGREE + 2) // 2


def index(k: int, j: int) -> int:
    return k * (k + 1) // 2 + j


def degree_slice(k: int) -> slice:
    return slice(index(k, 0), index(k, k) + 1)


@lru_cache(maxsize=None)
def _mul_table() -> np.ndarray:
    T = np.zeros((SIZE, SIZE, SIZE))
    for k1 in range(DEGREE + 1):
        for j1 in range(k1 + 1):
            for k2 in range(DEGREE + 1 - k1):
                for j2 in range(k2 + 1):
                    T[index(k1, j1), index(k2, j2), index(k1 + k2, j1 + j2)] = 1.0
    return T


@lru_cache(maxsize=None)
def binomial_weights() -> np.ndarray:
    """C(k, j) for every slot; dividing monomial coefficients by it gives the
    coefficients in the scaled basis C(k, j) x^j y^(k-j)."""
    return np.array([comb(k, j) for k in range(DEGREE + 1) for j in range(k + 1)], dtype=float)


def constant(c) -> np.ndarray:
    c = np.asarray(c, dtype=float)
    out = np.zeros(c.shape + (SIZE,))
    out[..., 0] = c
    return out


def mul(p, q) -> np.ndarray:
    p, q = np.broadcast_arrays(np.asarray(p, dtype=float), np.asarray(q, dtype=float))
    outer = p[..., :, None] * q[..., None, :]
    return outer.reshape(p.shape[:-1] + (SIZE * SIZE,)) @ _mul_table().reshape(SIZE * SIZE, SIZE)


def exp_nilpotent(s) -> np.ndarray:
    """exp(s) truncated, for s with zero constant term."""
    out = constant(np.ones(np.shape(s)[:-1]))
    term = out
    for m in range(1, DEGREE + 1):
        term = mul(term, s) / m
        out = out + term
    return out


def compose(p, tx, ty) -> np.ndarray:
    """p(tx, ty) for tx, ty with zero constant term (a change of variables)."""
    p = np.asarray(p, dtype=float)
    batch = np.broadcast_shapes(p.shape[:-1], np.shape(tx)[:-1], np.shape(ty)[:-1])
    one = constant(np.ones(batch))
    x_pows = [one]
    y_pows = [one]
    for _ in range(DEGREE):
        x_pows.append(mul(x_pows[-1], tx))
        y_pows.append(mul(y_pows[-1], ty))
    out = np.zeros(batch + (SIZE,))
    for k in range(DEGREE + 1):
        for j in range(k + 1):
            out = out + p[..., index(k, j), None] * mul(x_pows[j], y_pows[k - j])
    return out


def evaluate(p, dx, dy) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    out = 0.0
    for k in range(DEGREE + 1):
        for j in range(k + 1):
            out = out + p[..., index(k, j)] * dx**j * dy ** (k - j)
    return out
