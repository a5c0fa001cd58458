"""Kronecker-sum factored low-rank adapter on a frozen linear layer.

The layer computes ``y = W x + alpha * A_sum (B_sum x)`` where the usual
low-rank update factors are themselves sums of s Kronecker products of
small matrices:

    A_sum = sum_k A1[k] (x) A2[k]      (w1 x r)
    B_sum = sum_k B1[k] (x) B2[k]      (r  x w2)

with a1*a2 = w1, r1*r2 = r, b1*b2 = w2.  Forward and backward never
materialize the update; every term is applied through the two-factor
vec identity (see ``kron_core``).

Gradients are hand-derived.  With h = A_sum^T g and the column-major
unvec shorthands G = unvec(g), U = unvec(B_sum x), H = unvec(h),
X = unvec(x):

    dA1[k] = alpha * G^T A2[k] U        dA2[k] = alpha * G A1[k] U^T
    dB1[k] = alpha * H^T B2[k] X        dB2[k] = alpha * H B1[k] X^T
    dx     = W^T g + alpha * B_sum^T h

A plain low-rank adapter (``LoraLayer``) with the same forward contract
is included as the comparison baseline.
"""

import math
from dataclasses import dataclass

import numpy as np

from .kron_core import (
    Matrix,
    Vector,
    _apply2,
    as_matrix,
    as_vector,
    kron,
)
from .lsr_repr import KronTerm, SeparatedMatrix, Shape
from .rng import rng_stream

DEFAULT_ALPHA = 32.0


@dataclass(frozen=True)
class ShapePlan:
    """Resolved dimension factorizations for one adapter layer."""

    w1: int
    w2: int
    r: int
    a1: int
    a2: int
    r1: int
    r2: int
    b1: int
    b2: int

    def __post_init__(self):
        for name in ("w1", "w2", "r", "a1", "a2", "r1", "r2", "b1", "b2"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.a1 * self.a2 != self.w1:
            raise ValueError(f"a1*a2 = {self.a1 * self.a2} != w1 = {self.w1}")
        if self.r1 * self.r2 != self.r:
            raise ValueError(f"r1*r2 = {self.r1 * self.r2} != r = {self.r}")
        if self.b1 * self.b2 != self.w2:
            raise ValueError(f"b1*b2 = {self.b1 * self.b2} != w2 = {self.w2}")


def _balanced_split(n: int) -> tuple[int, int]:
    # largest divisor <= sqrt(n) gives the most balanced pair
    d = math.isqrt(n)
    while d > 1 and n % d:
        d -= 1
    return n // d, d


def plan_shapes(w1: int, w2: int, r: int) -> ShapePlan:
    """Most-balanced divisor split of each dimension (a 1 x n split always
    exists, so any positive dims work)."""
    if min(w1, w2, r) < 1:
        raise ValueError("dimensions must be positive")
    a1, a2 = _balanced_split(w1)
    b1, b2 = _balanced_split(w2)
    r1, r2 = _balanced_split(r)
    return ShapePlan(w1=w1, w2=w2, r=r, a1=a1, a2=a2, r1=r1, r2=r2,
                     b1=b1, b2=b2)


@dataclass(eq=False)
class LsrAdaptLayer:
    """Frozen base weight plus the four Kronecker factor families.

    Factor families are stacked along the leading axis: A1[k] is the k-th
    a1 x r1 factor, etc.  The factor arrays are the trainable state; W is
    never updated.
    """

    W: Matrix
    alpha: float
    plan: ShapePlan
    s: int
    A1: np.ndarray  # (s, a1, r1)
    A2: np.ndarray  # (s, a2, r2)
    B1: np.ndarray  # (s, r1, b1)
    B2: np.ndarray  # (s, r2, b2)

    def __post_init__(self):
        p = self.plan
        self.W = as_matrix(self.W, "W")
        if self.W.shape != (p.w1, p.w2):
            raise ValueError(f"W is {self.W.shape}, plan wants ({p.w1}, {p.w2})")
        if self.s < 1:
            raise ValueError("separation rank s must be >= 1")
        expected = {"A1": (self.s, p.a1, p.r1), "A2": (self.s, p.a2, p.r2),
                    "B1": (self.s, p.r1, p.b1), "B2": (self.s, p.r2, p.b2)}
        for name, shape in expected.items():
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.float64)
            if arr.shape != shape:
                raise ValueError(f"{name} is {arr.shape}, expected {shape}")
            setattr(self, name, arr)


@dataclass(eq=False)
class LoraLayer:
    """Plain low-rank adapter baseline: y = W x + alpha * A (B x)."""

    W: Matrix
    alpha: float
    A: Matrix  # w1 x r
    B: Matrix  # r x w2

    def __post_init__(self):
        self.W = as_matrix(self.W, "W")
        self.A = as_matrix(self.A, "A")
        self.B = as_matrix(self.B, "B")
        w1, w2 = self.W.shape
        if self.A.shape[0] != w1 or self.B.shape[1] != w2 \
                or self.A.shape[1] != self.B.shape[0]:
            raise ValueError(
                f"inconsistent shapes: W {self.W.shape}, A {self.A.shape}, "
                f"B {self.B.shape}")

    @property
    def r(self) -> int:
        return self.A.shape[1]


@dataclass(eq=False)
class GradientBundle:
    """Gradients of a scalar loss w.r.t. every factor family and the input."""

    dA1: np.ndarray
    dA2: np.ndarray
    dB1: np.ndarray
    dB2: np.ndarray
    dx: Vector


def init(W, plan: ShapePlan, s: int, alpha: float = DEFAULT_ALPHA,
         seed: int = 0) -> LsrAdaptLayer:
    """Fresh layer: A1, A2, B1 Gaussian, B2 zero.

    The zero B2 family makes the materialized update exactly zero, so the
    layer reproduces W x at step 0 while still receiving gradient through
    B2 from the first step on.
    """
    W = as_matrix(W, "W")
    if W.shape != (plan.w1, plan.w2):
        raise ValueError(f"W is {W.shape}, plan wants ({plan.w1}, {plan.w2})")
    g = rng_stream(seed, "adapter-init")
    a_std = np.sqrt(1.0 / plan.w2)
    b1_std = np.sqrt(1.0 / plan.r)
    return LsrAdaptLayer(
        W=W, alpha=float(alpha), plan=plan, s=int(s),
        A1=g.normal(0.0, a_std, size=(s, plan.a1, plan.r1)),
        A2=g.normal(0.0, a_std, size=(s, plan.a2, plan.r2)),
        B1=g.normal(0.0, b1_std, size=(s, plan.r1, plan.b1)),
        B2=np.zeros((s, plan.r2, plan.b2)),
    )


def forward(layer: LsrAdaptLayer, x) -> Vector:
    """y = W x + alpha * A_sum (B_sum x), term by term, matrix-free."""
    x = as_vector(x, "x")
    p = layer.plan
    if x.size != p.w2:
        raise ValueError(f"x has length {x.size}, expected {p.w2}")
    base = layer.W @ x
    mid = _apply_b(layer, x)
    if layer.alpha == 0.0 or not mid.any():
        return base
    out = _apply_a(layer, mid)
    return base + layer.alpha * out


def _apply_b(layer: LsrAdaptLayer, x) -> Vector:
    mid = _apply2(layer.B1[0], layer.B2[0], x)
    for k in range(1, layer.s):
        mid = mid + _apply2(layer.B1[k], layer.B2[k], x)
    return mid


def _apply_a(layer: LsrAdaptLayer, mid) -> Vector:
    out = _apply2(layer.A1[0], layer.A2[0], mid)
    for k in range(1, layer.s):
        out = out + _apply2(layer.A1[k], layer.A2[k], mid)
    return out


def materialize_delta(layer: LsrAdaptLayer) -> Matrix:
    """Dense w1 x w2 update (without alpha): A_sum @ B_sum."""
    p = layer.plan
    a_sum = np.zeros((p.w1, p.r))
    b_sum = np.zeros((p.r, p.w2))
    for k in range(layer.s):
        a_sum += kron(layer.A1[k], layer.A2[k])
        b_sum += kron(layer.B1[k], layer.B2[k])
    return a_sum @ b_sum


def backward(layer: LsrAdaptLayer, x, g) -> GradientBundle:
    """Exact gradients of L w.r.t. all factors and x, given g = dL/dy.

    See the module docstring for the derivation; everything is evaluated
    matrix-free at the cost of a forward pass plus one transposed pass.
    """
    x = as_vector(x, "x")
    g = as_vector(g, "g")
    p = layer.plan
    if x.size != p.w2:
        raise ValueError(f"x has length {x.size}, expected {p.w2}")
    if g.size != p.w1:
        raise ValueError(f"g has length {g.size}, expected {p.w1}")
    alpha = layer.alpha
    if alpha == 0.0:
        return GradientBundle(
            dA1=np.zeros_like(layer.A1), dA2=np.zeros_like(layer.A2),
            dB1=np.zeros_like(layer.B1), dB2=np.zeros_like(layer.B2),
            dx=layer.W.T @ g)

    mid = _apply_b(layer, x)                       # B_sum x, length r
    h = _apply2(layer.A1[0].T, layer.A2[0].T, g)   # A_sum^T g
    for k in range(1, layer.s):
        h = h + _apply2(layer.A1[k].T, layer.A2[k].T, g)

    G = g.reshape((p.a2, p.a1), order="F")
    U = np.ascontiguousarray(mid).reshape((p.r2, p.r1), order="F")
    H = np.ascontiguousarray(h).reshape((p.r2, p.r1), order="F")
    X = x.reshape((p.b2, p.b1), order="F")

    dA1 = np.empty_like(layer.A1)
    dA2 = np.empty_like(layer.A2)
    dB1 = np.empty_like(layer.B1)
    dB2 = np.empty_like(layer.B2)
    Gt_ = G.T
    Ht_ = H.T
    for k in range(layer.s):
        dA1[k] = alpha * (Gt_ @ layer.A2[k] @ U)
        dA2[k] = alpha * (G @ layer.A1[k] @ U.T)
        dB1[k] = alpha * (Ht_ @ layer.B2[k] @ X)
        dB2[k] = alpha * (H @ layer.B1[k] @ X.T)

    hflat = np.ascontiguousarray(h)
    dx = layer.W.T @ g
    for k in range(layer.s):
        dx += alpha * _apply2(layer.B1[k].T, layer.B2[k].T, hflat)
    return GradientBundle(dA1=dA1, dA2=dA2, dB1=dB1, dB2=dB2, dx=dx)


def count_params_lsr(plan: ShapePlan, s: int) -> int:
    """Trainable scalars in the factored adapter."""
    return s * (plan.a1 * plan.r1 + plan.a2 * plan.r2) \
        + s * (plan.r1 * plan.b1 + plan.r2 * plan.b2)


def count_params_lora(w1: int, w2: int, r: int) -> int:
    """Trainable scalars in the plain low-rank adapter."""
    return w1 * r + r * w2


def lora_init(W, r: int, alpha: float = DEFAULT_ALPHA,
              seed: int = 0) -> LoraLayer:
    """Standard baseline init: A Gaussian, B zero (update starts at zero)."""
    W = as_matrix(W, "W")
    w1, w2 = W.shape
    g = rng_stream(seed, "lora-init")
    return LoraLayer(W=W, alpha=float(alpha),
                     A=g.normal(0.0, np.sqrt(1.0 / w2), size=(w1, r)),
                     B=np.zeros((r, w2)))


def lora_forward(layer: LoraLayer, x) -> Vector:
    x = as_vector(x, "x")
    if x.size != layer.W.shape[1]:
        raise ValueError(f"x has length {x.size}, expected {layer.W.shape[1]}")
    base = layer.W @ x
    mid = layer.B @ x
    if layer.alpha == 0.0 or not mid.any():
        return base
    return base + layer.alpha * (layer.A @ mid)


def lora_backward(layer: LoraLayer, x, g):
    """Gradients (dA, dB, dx) for the baseline forward map."""
    x = as_vector(x, "x")
    g = as_vector(g, "g")
    if x.size != layer.W.shape[1] or g.size != layer.W.shape[0]:
        raise ValueError("x/g length mismatch with W")
    mid = layer.B @ x
    at_g = layer.A.T @ g
    dA = layer.alpha * np.outer(g, mid)
    dB = layer.alpha * np.outer(at_g, x)
    dx = layer.W.T @ g + layer.alpha * (layer.B.T @ at_g)
    return dA, dB, dx


def export_delta_as_separated(layer: LsrAdaptLayer) -> SeparatedMatrix:
    """Expand the update into s^2 explicit Kronecker terms via the mixed
    product: A_sum @ B_sum = sum_{k,j} (A1[k] B1[j]) (x) (A2[k] B2[j])."""
    p = layer.plan
    terms = []
    for k in range(layer.s):
        for j in range(layer.s):
            terms.append(KronTerm(1.0, [layer.A1[k] @ layer.B1[j],
                                        layer.A2[k] @ layer.B2[j]]))
    return SeparatedMatrix(Shape(p.w1, p.w2), terms)
