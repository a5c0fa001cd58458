"""Separated (Kronecker-sum) representations of dense matrices.

A ``SeparatedMatrix`` stores a target shape plus terms ``weight * F1 (x)
F2 (x) ... (x) Fr``; the number of terms is the separation rank.  Besides
construction and evaluation, this module provides:

* conditioning diagnostics (``condition_number``, ``check_precision``),
* the block rearrangement ``rearrange`` under which every Kronecker
  product becomes a rank-1 matrix, so that a truncated SVD of the
  rearranged matrix yields the Frobenius-optimal sum-of-Kronecker
  approximation with fixed two-factor shapes (``nearest_kron_sum``),
* a constructive route from a rank decomposition ``sum_k u_k v_k^T`` to a
  multi-factor representation via recursive best rank-1 vector reshaping
  (``from_rank_decomposition``).
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .kron_core import (
    Matrix,
    Shape,
    Vector,
    as_matrix,
    as_vector,
    kron_multi,
    apply_kron2,
)


class NumericalError(RuntimeError):
    """A numerical routine failed to converge or produced invalid output."""


@dataclass(frozen=True, eq=False)
class KronTerm:
    """One summand of a separated representation: weight * (x)_i factors[i]."""

    weight: float
    factors: tuple[Matrix, ...]

    def __init__(self, weight: float, factors):
        facs = tuple(as_matrix(f, f"factor {i}") for i, f in enumerate(factors))
        if not facs:
            raise ValueError("a term needs at least one factor")
        object.__setattr__(self, "weight", float(weight))
        object.__setattr__(self, "factors", facs)

    @property
    def order(self) -> int:
        return len(self.factors)


@dataclass(frozen=True, eq=False)
class SeparatedMatrix:
    """Target shape plus an ordered list of Kronecker terms."""

    shape: Shape
    terms: tuple[KronTerm, ...] = field(default=())

    def __init__(self, shape, terms=()):
        shape = Shape(int(shape[0]), int(shape[1]))
        if shape.rows < 1 or shape.cols < 1:
            raise ValueError(f"shape must be positive, got {shape}")
        terms = tuple(terms)
        orders = {t.order for t in terms}
        if len(orders) > 1:
            raise ValueError(f"terms disagree on factor count: {sorted(orders)}")
        for k, t in enumerate(terms):
            rows = math.prod(f.shape[0] for f in t.factors)
            cols = math.prod(f.shape[1] for f in t.factors)
            if (rows, cols) != (shape.rows, shape.cols):
                raise ValueError(
                    f"term {k} materializes to {rows}x{cols}, expected "
                    f"{shape.rows}x{shape.cols}")
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "terms", terms)

    @property
    def separation_rank(self) -> int:
        return len(self.terms)


@dataclass(frozen=True)
class PrecisionBudget:
    """Round-off of the target arithmetic and the tolerated approximation
    error (e.g. mu = 2**-11 for 16-bit arithmetic)."""

    mu: float
    epsilon: float

    def __post_init__(self):
        if not self.mu > 0:
            raise ValueError("mu must be positive")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")


def materialize(S: SeparatedMatrix) -> Matrix:
    """Dense sum of all weighted Kronecker terms (zero matrix if empty)."""
    out = np.zeros((S.shape.rows, S.shape.cols))
    for t in S.terms:
        out += t.weight * kron_multi(t.factors)
    return out


def apply(S: SeparatedMatrix, x) -> Vector:
    """Matrix-free materialize(S) @ x for two-factor terms.

    Representations with a factor count other than 2 fall back to
    materialize-then-multiply.
    """
    x = as_vector(x, "x")
    if x.size != S.shape.cols:
        raise ValueError(f"length mismatch: {x.size} != {S.shape.cols}")
    if not S.terms:
        return np.zeros(S.shape.rows)
    if S.terms[0].order != 2:
        return materialize(S) @ x
    out = np.zeros(S.shape.rows)
    for t in S.terms:
        out += t.weight * apply_kron2(t.factors[0], t.factors[1], x)
    return out


def condition_number(S: SeparatedMatrix) -> float:
    """Ratio of the term-weight l2 norm to the Frobenius norm of the
    materialized matrix (cancellation indicator for the representation)."""
    fro = float(np.linalg.norm(materialize(S)))
    if fro == 0.0:
        raise ZeroDivisionError(
            "condition number undefined: representation materializes to the "
            "zero matrix (terms cancel or are empty)")
    return math.sqrt(sum(t.weight * t.weight for t in S.terms)) / fro


def check_precision(S: SeparatedMatrix, budget: PrecisionBudget) -> bool:
    """True when the representation meets the precision rule
    ``gamma * mu * ||M||_F <= epsilon`` (inclusive)."""
    fro = float(np.linalg.norm(materialize(S)))
    gamma = condition_number(S)
    return bool(gamma * budget.mu * fro <= budget.epsilon)


def normalize_terms(S: SeparatedMatrix) -> SeparatedMatrix:
    """Rescale every factor to unit Frobenius norm, folding magnitudes into
    the term weights (sign absorbed into the first factor), and sort terms
    by descending weight.  Exactly-zero-weight terms are dropped.  The
    materialization is unchanged.
    """
    new_terms = []
    for k, t in enumerate(S.terms):
        norms = [float(np.linalg.norm(f)) for f in t.factors]
        if any(n == 0.0 for n in norms):
            raise ValueError(f"term {k} is degenerate: factor with zero norm")
        weight = t.weight * math.prod(norms)
        if weight == 0.0:
            continue
        factors = [f / n for f, n in zip(t.factors, norms)]
        if weight < 0.0:
            factors[0] = -factors[0]
            weight = -weight
        new_terms.append(KronTerm(weight, factors))
    new_terms.sort(key=lambda t: t.weight, reverse=True)
    return SeparatedMatrix(S.shape, new_terms)


def rearrange(M, left: Shape, right: Shape) -> Matrix:
    """Block rearrangement R(M) with R(P (x) Q) = vec(P) vec(Q)^T.

    Row j*left.rows + i of the result is vec(block(i, j))^T, where
    block(i, j) is the (right.rows x right.cols) block of M at block
    position (i, j).
    """
    M = as_matrix(M, "M")
    lr, lc = int(left[0]), int(left[1])
    rr, rc = int(right[0]), int(right[1])
    if lr * rr != M.shape[0] or lc * rc != M.shape[1]:
        raise ValueError(
            f"shapes do not factor {M.shape[0]}x{M.shape[1]}: "
            f"left {lr}x{lc}, right {rr}x{rc}")
    blocks = M.reshape(lr, rr, lc, rc)
    return np.ascontiguousarray(
        blocks.transpose(2, 0, 3, 1).reshape(lr * lc, rr * rc))


def truncated_svd(M, k: int) -> tuple[Matrix, Vector, Matrix]:
    """Rank-k truncated SVD: U (cols orthonormal), sigma (non-increasing,
    non-negative), V (cols orthonormal) with M ~= U @ diag(sigma) @ V.T
    the best rank-k Frobenius approximation."""
    M = as_matrix(M, "M")
    if not 1 <= k <= min(M.shape):
        raise ValueError(f"k={k} out of range for {M.shape[0]}x{M.shape[1]}")
    try:
        U, sigma, Vt = np.linalg.svd(M, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"SVD failed to converge: {exc}") from exc
    return (np.ascontiguousarray(U[:, :k]), sigma[:k].copy(),
            np.ascontiguousarray(Vt[:k].T))


def nearest_kron_sum(M, left: Shape, right: Shape, s: int) -> SeparatedMatrix:
    """Best s-term two-factor Kronecker-sum approximation of M with the
    given factor shapes (optimal in Frobenius norm).

    Terms come out normalized: unit-Frobenius factors, weights descending.
    Numerically-zero weights (below sigma_max * max_dim * eps) are dropped.
    """
    M = as_matrix(M, "M")
    R = rearrange(M, left, right)
    if not 1 <= s <= min(R.shape):
        raise ValueError(f"s={s} out of range for rearranged {R.shape}")
    U, sigma, V = truncated_svd(R, s)
    left = Shape(int(left[0]), int(left[1]))
    right = Shape(int(right[0]), int(right[1]))
    cutoff = sigma[0] * max(R.shape) * np.finfo(np.float64).eps if sigma.size else 0.0
    terms = []
    for t in range(s):
        if sigma[t] <= cutoff:
            break
        P = U[:, t].reshape((left.rows, left.cols), order="F")
        Q = V[:, t].reshape((right.rows, right.cols), order="F")
        terms.append(KronTerm(float(sigma[t]), [P, Q]))
    return SeparatedMatrix(Shape(M.shape[0], M.shape[1]), terms)


def factor_vector(u, dims) -> tuple[list[Vector], float]:
    """Factor u into a Kronecker chain of vectors with the given lengths,
    by recursive best rank-1 reshaping.

    At each level u is reshaped column-major to (prod(dims[1:]), dims[0]);
    for a separable u this matrix is the outer product rest * u1^T, so its
    leading singular pair recovers the split exactly.  All factors except
    the last have unit norm with their largest-magnitude entry positive.
    Returns the factors and ||u - kron_chain(factors)||_2 (0 for separable
    u; residuals at different levels are orthogonal, so the squared errors
    add).
    """
    u = as_vector(u, "u")
    dims = [int(d) for d in dims]
    if any(d < 1 for d in dims):
        raise ValueError(f"factor lengths must be positive, got {dims}")
    if math.prod(dims) != u.size:
        raise ValueError(f"length {u.size} != prod{tuple(dims)}")
    if len(dims) == 1:
        return [u.copy()], 0.0
    rest_len = math.prod(dims[1:])
    X = u.reshape((rest_len, dims[0]), order="F")
    try:
        U, sigma, Vt = np.linalg.svd(X, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"SVD failed to converge: {exc}") from exc
    head = Vt[0].copy()
    rest = sigma[0] * U[:, 0]
    pivot = int(np.argmax(np.abs(head)))
    if head[pivot] < 0.0:
        head = -head
        rest = -rest
    err_here_sq = float(np.sum(sigma[1:] ** 2))
    rest_factors, rest_err = factor_vector(rest, dims[1:])
    return [head] + rest_factors, math.sqrt(err_here_sq + rest_err**2)


def from_rank_decomposition(us, vs, row_factors, col_factors):
    """Turn a rank decomposition sum_k u_k v_k^T into a separated
    representation with factor shapes row_factors[i] x col_factors[i].

    Each u_k and v_k is factored into a Kronecker chain of vectors
    (``factor_vector``); term k gets factors outer(u_k_i, v_k_i).  The
    reshaping is exact only for separable vectors, so the per-term rank-1
    truncation error ||u_k v_k^T - reshaped term||_F is returned alongside
    the representation rather than silently ignored.

    Returns (SeparatedMatrix, per-term truncation errors).
    """
    us = [as_vector(u, f"u[{k}]") for k, u in enumerate(us)]
    vs = [as_vector(v, f"v[{k}]") for k, v in enumerate(vs)]
    if len(us) != len(vs):
        raise ValueError(f"need as many u as v vectors: {len(us)} != {len(vs)}")
    row_factors = [int(d) for d in row_factors]
    col_factors = [int(d) for d in col_factors]
    if len(row_factors) != len(col_factors):
        raise ValueError("row_factors and col_factors must have equal length")
    if len(row_factors) < 2:
        raise ValueError("need at least two factor dimensions")
    shape = Shape(math.prod(row_factors), math.prod(col_factors))
    terms = []
    errors = []
    for u, v in zip(us, vs):
        u_parts, _ = factor_vector(u, row_factors)
        v_parts, _ = factor_vector(v, col_factors)
        terms.append(KronTerm(1.0, [np.outer(a, b)
                                    for a, b in zip(u_parts, v_parts)]))
        # u v^T - u^ v^^T = u^ (v - v^)^T + (u - u^) v^T; evaluating the
        # norm through the small differences avoids the cancellation the
        # direct inner-product expansion suffers when the error is tiny
        u_hat = _kron_chain(u_parts)
        v_hat = _kron_chain(v_parts)
        du = u - u_hat
        dv = v - v_hat
        err_sq = (np.dot(u_hat, u_hat) * np.dot(dv, dv)
                  + 2.0 * np.dot(u_hat, du) * np.dot(dv, v)
                  + np.dot(du, du) * np.dot(v, v))
        errors.append(math.sqrt(max(err_sq, 0.0)))
    return SeparatedMatrix(shape, terms), errors


def _kron_chain(parts):
    out = parts[0]
    for p in parts[1:]:
        out = np.kron(out, p)
    return out
