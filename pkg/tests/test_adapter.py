"""Adapter kernel: shape planning, init, forward/backward, accounting.

The binding gradient contract is agreement with central finite
differences of a probe loss, not any particular formula.
"""

import numpy as np
import pytest

from lsradapt import (
    LoraLayer,
    LsrAdaptLayer,
    backward,
    count_params_lora,
    count_params_lsr,
    export_delta_as_separated,
    forward,
    init,
    lora_backward,
    lora_forward,
    lora_init,
    materialize_delta,
    materialize,
    plan_shapes,
)

from oracles import central_diff, naive_kron, rel_err


def random_layer(g, w1, w2, r, s, alpha=1.0):
    plan = plan_shapes(w1, w2, r)
    return LsrAdaptLayer(
        W=g.normal(size=(w1, w2)), alpha=alpha, plan=plan, s=s,
        A1=g.normal(size=(s, plan.a1, plan.r1)),
        A2=g.normal(size=(s, plan.a2, plan.r2)),
        B1=g.normal(size=(s, plan.r1, plan.b1)),
        B2=g.normal(size=(s, plan.r2, plan.b2)))


def dense_delta_oracle(layer):
    """Materialize the update through the naive Kronecker oracle."""
    p = layer.plan
    a_sum = np.zeros((p.w1, p.r))
    b_sum = np.zeros((p.r, p.w2))
    for k in range(layer.s):
        a_sum += naive_kron(layer.A1[k], layer.A2[k])
        b_sum += naive_kron(layer.B1[k], layer.B2[k])
    return a_sum @ b_sum


class TestPlanShapes:
    def test_attention_layer_dims(self):
        plan = plan_shapes(768, 768, 4)
        assert (plan.a1, plan.a2) == (32, 24)
        assert (plan.b1, plan.b2) == (32, 24)
        assert (plan.r1, plan.r2) == (2, 2)

    def test_prime_dims(self):
        plan = plan_shapes(7, 7, 1)
        assert (plan.a1, plan.a2) == (7, 1)
        assert (plan.b1, plan.b2) == (7, 1)
        assert (plan.r1, plan.r2) == (1, 1)

    def test_perfect_squares(self):
        plan = plan_shapes(36, 16, 9)
        assert (plan.a1, plan.a2) == (6, 6)
        assert (plan.b1, plan.b2) == (4, 4)
        assert (plan.r1, plan.r2) == (3, 3)

    def test_deterministic_and_ordered(self):
        for n in (12, 24, 48, 60, 100):
            plan = plan_shapes(n, n, 4)
            assert plan == plan_shapes(n, n, 4)
            assert plan.a1 >= plan.a2
            assert plan.a1 * plan.a2 == n

    def test_invalid_plan_rejected(self):
        from lsradapt import ShapePlan
        with pytest.raises(ValueError):
            ShapePlan(w1=6, w2=6, r=2, a1=2, a2=2, r1=1, r2=2, b1=3, b2=2)


class TestInit:
    def test_update_starts_at_zero(self):
        g = np.random.default_rng(60)
        layer = init(g.normal(size=(12, 8)), plan_shapes(12, 8, 4), s=2,
                     alpha=16.0, seed=1)
        assert np.array_equal(materialize_delta(layer), np.zeros((12, 8)))

    def test_forward_is_base_exactly(self):
        g = np.random.default_rng(61)
        W = g.normal(size=(12, 8))
        layer = init(W, plan_shapes(12, 8, 4), s=2, seed=1)
        x = g.normal(size=8)
        assert np.array_equal(forward(layer, x), W @ x)

    def test_seed_reproducibility(self):
        W = np.zeros((12, 8))
        a = init(W, plan_shapes(12, 8, 4), s=3, seed=9)
        b = init(W, plan_shapes(12, 8, 4), s=3, seed=9)
        for name in ("A1", "A2", "B1", "B2"):
            assert getattr(a, name).tobytes() == getattr(b, name).tobytes()

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            init(np.zeros((5, 5)), plan_shapes(12, 8, 4), s=1)


class TestForward:
    def test_identity_update(self):
        # square plan with r = w1 = w2; identity factors make the update
        # the identity, so y = W x + x at alpha = 1
        g = np.random.default_rng(62)
        plan = plan_shapes(4, 4, 4)
        W = g.normal(size=(4, 4))
        eye = np.eye(2)[None]
        layer = LsrAdaptLayer(W=W, alpha=1.0, plan=plan, s=1,
                              A1=eye, A2=eye, B1=eye, B2=eye)
        x = g.normal(size=4)
        assert rel_err(forward(layer, x), W @ x + x) <= 1e-14

    def test_matches_materialized_oracle(self):
        g = np.random.default_rng(63)
        layer = random_layer(g, 24, 24, 4, 3, alpha=1.3)
        x = g.normal(size=24)
        want = (layer.W + layer.alpha * dense_delta_oracle(layer)) @ x
        assert rel_err(forward(layer, x), want) <= 1e-10

    def test_rectangular_dims(self):
        g = np.random.default_rng(64)
        for w1, w2, r, s in ((6, 15, 2, 1), (16, 9, 3, 2), (10, 10, 5, 4)):
            layer = random_layer(g, w1, w2, r, s, alpha=0.7)
            x = g.normal(size=w2)
            want = (layer.W + layer.alpha * dense_delta_oracle(layer)) @ x
            assert rel_err(forward(layer, x), want) <= 1e-10

    def test_length_mismatch(self):
        g = np.random.default_rng(65)
        layer = random_layer(g, 6, 6, 2, 1)
        with pytest.raises(ValueError):
            forward(layer, np.ones(7))


class TestMaterializeDelta:
    def test_zero_b2(self):
        g = np.random.default_rng(66)
        layer = init(g.normal(size=(12, 8)), plan_shapes(12, 8, 4), s=2)
        assert np.array_equal(materialize_delta(layer), np.zeros((12, 8)))

    def test_single_term_mixed_product(self):
        g = np.random.default_rng(67)
        layer = random_layer(g, 12, 8, 4, 1)
        want = naive_kron(layer.A1[0] @ layer.B1[0], layer.A2[0] @ layer.B2[0])
        assert rel_err(materialize_delta(layer), want) <= 1e-12

    def test_two_terms_expansion_oracle(self):
        g = np.random.default_rng(68)
        layer = random_layer(g, 12, 8, 4, 2)
        want = np.zeros((12, 8))
        for k in range(2):
            for j in range(2):
                want += naive_kron(layer.A1[k] @ layer.B1[j],
                                   layer.A2[k] @ layer.B2[j])
        assert rel_err(materialize_delta(layer), want) <= 1e-12


class TestBackward:
    def test_zero_init_gradient_structure(self):
        g = np.random.default_rng(69)
        layer = init(g.normal(size=(12, 8)), plan_shapes(12, 8, 4), s=2,
                     seed=3)
        x = g.normal(size=8)
        gvec = g.normal(size=12)
        bundle = backward(layer, x, gvec)
        assert not bundle.dA1.any()
        assert not bundle.dA2.any()
        assert bundle.dB2.any()

    def test_alpha_zero(self):
        g = np.random.default_rng(70)
        layer = random_layer(g, 8, 6, 2, 2, alpha=0.0)
        x = g.normal(size=6)
        gvec = g.normal(size=8)
        bundle = backward(layer, x, gvec)
        for arr in (bundle.dA1, bundle.dA2, bundle.dB1, bundle.dB2):
            assert not arr.any()
        assert rel_err(bundle.dx, layer.W.T @ gvec) <= 1e-14

    def test_matches_finite_differences(self):
        g = np.random.default_rng(71)
        layer = random_layer(g, 12, 12, 4, 2, alpha=1.4)
        x = g.normal(size=12)
        c = g.normal(size=12)
        bundle = backward(layer, x, c)
        probe = lambda: float(c @ forward(layer, x))
        for name, got in (("A1", bundle.dA1), ("A2", bundle.dA2),
                          ("B1", bundle.dB1), ("B2", bundle.dB2)):
            fd = central_diff(probe, getattr(layer, name))
            assert rel_err(got, fd) <= 1e-5, name
        fd_x = central_diff(probe, x)
        assert rel_err(bundle.dx, fd_x) <= 1e-5

    def test_dimension_mismatch(self):
        g = np.random.default_rng(72)
        layer = random_layer(g, 8, 6, 2, 1)
        with pytest.raises(ValueError):
            backward(layer, np.ones(6), np.ones(6))


class TestParamCounts:
    def test_lora_reference_config(self):
        assert count_params_lora(768, 768, 8) == 12288

    def test_lsr_reference_config(self):
        assert count_params_lsr(plan_shapes(768, 768, 4), 16) == 3584

    def test_lsr_higher_rank_by_formula(self):
        # factor pairs (32x4), (24x4) on both sides at s=16
        plan = plan_shapes(768, 768, 16)
        assert (plan.r1, plan.r2) == (4, 4)
        assert count_params_lsr(plan, 16) == 7168

    def test_degenerate_dims(self):
        assert count_params_lora(1, 1, 1) == 2
        # four 1x1 factor matrices: the formula counts every scalar
        assert count_params_lsr(plan_shapes(1, 1, 1), 1) == 4

    def test_lsr_beats_lora_budget(self):
        assert count_params_lsr(plan_shapes(768, 768, 4), 16) \
            < count_params_lora(768, 768, 8)


class TestLora:
    def test_zero_b_is_base(self):
        g = np.random.default_rng(73)
        layer = lora_init(g.normal(size=(10, 7)), r=3, seed=2)
        x = g.normal(size=7)
        assert not layer.B.any()
        assert np.array_equal(lora_forward(layer, x), layer.W @ x)

    def test_planted_full_rank_update(self):
        g = np.random.default_rng(74)
        W = g.normal(size=(6, 8))
        A = g.normal(size=(6, 6))
        B = g.normal(size=(6, 8))
        layer = LoraLayer(W=W, alpha=2.0, A=A, B=B)
        x = g.normal(size=8)
        want = (W + 2.0 * (A @ B)) @ x
        assert rel_err(lora_forward(layer, x), want) <= 1e-12

    def test_gradients_match_finite_differences(self):
        g = np.random.default_rng(75)
        layer = LoraLayer(W=g.normal(size=(9, 7)), alpha=1.2,
                          A=g.normal(size=(9, 3)), B=g.normal(size=(3, 7)))
        x = g.normal(size=7)
        c = g.normal(size=9)
        dA, dB, dx = lora_backward(layer, x, c)
        probe = lambda: float(c @ lora_forward(layer, x))
        assert rel_err(dA, central_diff(probe, layer.A)) <= 1e-5
        assert rel_err(dB, central_diff(probe, layer.B)) <= 1e-5
        assert rel_err(dx, central_diff(probe, x)) <= 1e-5


class TestExportDelta:
    def test_zero_init(self):
        g = np.random.default_rng(76)
        layer = init(g.normal(size=(12, 8)), plan_shapes(12, 8, 4), s=2)
        S = export_delta_as_separated(layer)
        assert len(S.terms) == 4
        assert np.array_equal(materialize(S), np.zeros((12, 8)))

    def test_single_term(self):
        g = np.random.default_rng(77)
        layer = random_layer(g, 12, 8, 4, 1)
        S = export_delta_as_separated(layer)
        assert len(S.terms) == 1
        want = naive_kron(layer.A1[0] @ layer.B1[0], layer.A2[0] @ layer.B2[0])
        assert rel_err(materialize(S), want) <= 1e-12

    def test_matches_materialize_delta(self):
        g = np.random.default_rng(78)
        layer = random_layer(g, 12, 12, 4, 2)
        S = export_delta_as_separated(layer)
        assert len(S.terms) == 4
        assert rel_err(materialize(S), materialize_delta(layer)) <= 1e-12


def test_term_scaling_is_quartic():
    # two factors per side and two sides: scaling one term's factors by c
    # scales its update by c^4
    g = np.random.default_rng(79)
    layer = random_layer(g, 12, 8, 4, 1)
    base = materialize_delta(layer)
    c = 1.7
    scaled = LsrAdaptLayer(W=layer.W, alpha=layer.alpha, plan=layer.plan,
                           s=1, A1=c * layer.A1, A2=c * layer.A2,
                           B1=c * layer.B1, B2=c * layer.B2)
    assert rel_err(materialize_delta(scaled), c**4 * base) <= 1e-12


def test_forward_equivalence_sweep():
    g = np.random.default_rng(80)
    for _ in range(15):
        w1, w2 = (int(v) for v in g.integers(2, 65, size=2))
        r = int(g.integers(1, 9))
        s = int(g.integers(1, 9))
        layer = random_layer(g, w1, w2, r, s, alpha=float(g.uniform(0.1, 2)))
        x = g.normal(size=w2)
        want = (layer.W + layer.alpha * materialize_delta(layer)) @ x
        assert rel_err(forward(layer, x), want) <= 1e-10
