"""Deterministic numeric primitives: cosines, stable log-sum-exp, seeded RNG,
finite-difference gradients.

Everything here runs in float64. Matrix products go through :func:`matmul`,
which computes each output row independently, so evaluating a batch and
evaluating its rows one by one give bit-identical results (BLAS-backed
``@`` does not guarantee that).
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import DegenerateVector, EmptyInput, NonFiniteEvaluation, ShapeMismatch

# Norm guard below which a vector is considered degenerate for cosines.
EPS_NORM = 1e-12

# Generator backing every seeded stream in the package. PCG64 streams are
# reproducible across platforms for a fixed seed; bump this identifier if the
# generator is ever changed.
RNG_ALGORITHM = "numpy-pcg64"


def make_rng(seed: int) -> np.random.Generator:
    """Seeded generator; equal seeds yield bit-identical streams."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))


def derive_rng(seed: int, *key: int) -> np.random.Generator:
    """Generator for a sub-stream (seed, key) pair, e.g. one batch of one run."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=key)))


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """2-D float64 matrix product with row-independent accumulation order."""
    return np.einsum("ij,jk->ik", a, b)


def as_float_vector(x, name: str = "vector") -> np.ndarray:
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise ShapeMismatch(f"{name} must be 1-D, got shape {v.shape}")
    return v


def as_float_matrix(x, name: str = "matrix") -> np.ndarray:
    m = np.asarray(x, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeMismatch(f"{name} must be 2-D, got shape {m.shape}")
    return m


def cosine(u, v) -> float:
    """Cosine similarity u·v / (|u||v|), clamped to [-1, 1].

    Raises DegenerateVector if either norm is <= EPS_NORM; a zero vector has
    no direction and silently scoring it as 0 would mask broken training
    states.
    """
    u = as_float_vector(u, "u")
    v = as_float_vector(v, "v")
    if u.shape != v.shape:
        raise ShapeMismatch(f"cosine dims differ: {u.shape} vs {v.shape}")
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu <= EPS_NORM or nv <= EPS_NORM:
        raise DegenerateVector(f"cosine of near-zero vector (norms {nu:.3e}, {nv:.3e})")
    return float(np.clip(float(np.dot(u, v)) / (nu * nv), -1.0, 1.0))


def log_sum_exp(xs) -> float:
    """max(xs) + log(sum(exp(xs - max))); overflow-safe for any finite input."""
    xs = as_float_vector(xs, "xs")
    if xs.size == 0:
        raise EmptyInput("log_sum_exp of empty vector")
    m = float(np.max(xs))
    return m + float(np.log(np.sum(np.exp(xs - m))))


def row_log_sum_exp(z: np.ndarray) -> np.ndarray:
    """log-sum-exp over each row of a 2-D array."""
    z = as_float_matrix(z, "z")
    if z.shape[1] == 0:
        raise EmptyInput("row_log_sum_exp of zero-width matrix")
    m = np.max(z, axis=1, keepdims=True)
    return (m + np.log(np.sum(np.exp(z - m), axis=1, keepdims=True)))[:, 0]


def sigmoid(x):
    """Logistic function, stable for large |x|."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else float(out)


def finite_difference_gradient(
    f: Callable[[np.ndarray], float], x, h: float = 1e-6
) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time.

    Args:
        f: scalar-valued function of a 1-D float64 vector.
        x: evaluation point.
        h: step size, must lie in (0, 1e-3].

    Raises NonFiniteEvaluation if any probe of f returns NaN/inf.
    """
    x = as_float_vector(x, "x")
    if not (0.0 < h <= 1e-3):
        raise ValueError(f"step h must be in (0, 1e-3], got {h}")
    grad = np.empty_like(x)
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        fp = float(f(xp))
        fm = float(f(xm))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteEvaluation(f"f returned non-finite value near coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_gradient_error(analytic: np.ndarray, reference: np.ndarray) -> float:
    """|g_a - g_ref| / max(|g_a|, |g_ref|, 1e-12), norms over the flattened vectors."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    r = np.asarray(reference, dtype=np.float64).ravel()
    if a.shape != r.shape:
        raise ShapeMismatch(f"gradient shapes differ: {a.shape} vs {r.shape}")
    denom = max(float(np.linalg.norm(a)), float(np.linalg.norm(r)), 1e-12)
    return float(np.linalg.norm(a - r)) / denom
