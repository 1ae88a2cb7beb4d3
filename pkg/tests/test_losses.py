import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mpcnet import losses, model, solver
from mpcnet.losses import (HamiltonianBatch, LossKind, batch_loss, cross_entropy, evaluate_loss,
                           map_mode_probabilities, posterior)
from mpcnet.policy import men_forward

from _support import directional_check, random_policy, random_tuple

COST = model.walker_cost()


def _hb(rng, n):
    return HamiltonianBatch.from_tuples([random_tuple(rng) for _ in range(n)], COST)


def _probs(draw_vals):
    v = np.exp(np.asarray(draw_vals, float))
    return v / v.sum()


logits = st.lists(st.floats(-5, 5), min_size=2, max_size=6)


class TestLossKind:
    def test_defaults(self):
        k = LossKind()
        assert (k.variant, k.guided, k.beta, k.lam) == ("l3", False, 1.0, 1.0)

    def test_validation(self):
        with pytest.raises(ValueError):
            LossKind("l4")
        with pytest.raises(ValueError):
            LossKind("l3", beta=0.0)
        with pytest.raises(ValueError):
            LossKind("l2", lam=-1.0)
        with pytest.raises(ValueError):
            LossKind("bc", guided=True)
        assert LossKind("L2").variant == "l2"


class TestHamiltonianBatch:
    def test_matches_solver_evaluation(self):
        rng = np.random.default_rng(0)
        cost = model.walker_cost(model.TrackingReference(forward_velocity=0.4))
        data = []
        for _ in range(20):
            mode = model.Mode(int(rng.integers(3)))
            rows = model.mode_constraints(mode)[0].shape[0]
            data.append(solver.HamiltonianData(model.default_state() + rng.normal(0, 0.1, 6),
                                               float(rng.uniform(0, 2)), rng.normal(0, 5, 6),
                                               float(rng.normal()), rng.normal(0, 1, rows), mode))
        hb = HamiltonianBatch.from_data(data, cost)
        U = rng.normal(0, 20, (20, 6)) + 30
        H, dH = hb.evaluate(U)
        for j, d in enumerate(data):
            Hs, dHs = solver.eval_hamiltonian(d, U[j], cost)
            assert H[j] == pytest.approx(Hs, rel=1e-12, abs=1e-9)
            np.testing.assert_allclose(dH[j], dHs, rtol=1e-12, atol=1e-9)

    def test_expert_axis(self):
        rng = np.random.default_rng(1)
        hb = _hb(rng, 3)
        U = rng.normal(0, 10, (3, 4, 6))
        H, _ = hb.evaluate(U)
        for e in range(4):
            np.testing.assert_allclose(H[:, e], hb.evaluate(U[:, e])[0])

    def test_multiplier_length_checked(self):
        t = random_tuple(np.random.default_rng(2))
        t.nu = np.zeros(7)
        with pytest.raises(ValueError):
            HamiltonianBatch.from_tuples([t], COST)


class TestExamples:
    def _hb_with_values(self, rng):
        return _hb(rng, 1)

    def test_l1_degenerate_cases(self):
        rng = np.random.default_rng(3)
        hb = _hb(rng, 1)
        pi = rng.normal(30, 10, (1, 3, 6))
        H_each, _ = hb.evaluate(pi)
        # E = 1
        ev = evaluate_loss(LossKind("l1"), np.ones((1, 1)), pi[:, :1], hb)
        assert ev.value[0] == pytest.approx(H_each[0, 0])
        # identical experts
        same = np.repeat(pi[:, :1], 3, axis=1)
        for p in ([0.2, 0.3, 0.5], [0.9, 0.05, 0.05]):
            ev = evaluate_loss(LossKind("l1"), np.array([p]), same, hb)
            assert ev.value[0] == pytest.approx(H_each[0, 0])
        # one-hot
        ev = evaluate_loss(LossKind("l1"), np.array([[0.0, 1.0, 0.0]]), pi, hb)
        assert ev.value[0] == pytest.approx(H_each[0, 1])

    def test_l2_examples(self):
        rng = np.random.default_rng(4)
        hb = _hb(rng, 1)
        pi = rng.normal(30, 10, (1, 2, 6))
        H, _ = hb.evaluate(pi)
        ev = evaluate_loss(LossKind("l2"), np.array([[0.0, 1.0]]), pi, hb)
        assert ev.value[0] == pytest.approx(H[0, 1])
        ev = evaluate_loss(LossKind("l2"), np.array([[0.25, 0.75]]), pi, hb)
        assert ev.value[0] == pytest.approx(0.25 * H[0, 0] + 0.75 * H[0, 1])

    def test_l2_hand_example(self):
        # shift the constant so that the two experts have H = (4, 0)
        rng = np.random.default_rng(5)
        hb = _hb(rng, 1)
        pi = rng.normal(30, 10, (1, 2, 6))
        H, _ = hb.evaluate(pi)
        hb.const = hb.const - H[0, 1]
        scale = 4.0 / (H[0, 0] - H[0, 1])
        hb.const, hb.lin, hb.R = hb.const * scale, hb.lin * scale, hb.R * scale
        hb.mu = hb.mu * scale
        H2, _ = hb.evaluate(pi)
        np.testing.assert_allclose(H2[0], [4.0, 0.0], atol=1e-9)
        ev = evaluate_loss(LossKind("l2"), np.array([[0.25, 0.75]]), pi, hb)
        assert ev.value[0] == pytest.approx(1.0)

    def test_posterior_examples(self):
        q = posterior(np.array([0.5, 0.5]), np.array([0.0, math.log(3)]), 0.0, 1.0)
        np.testing.assert_allclose(q, [0.75, 0.25])
        p = np.array([0.1, 0.6, 0.3])
        np.testing.assert_allclose(posterior(p, np.full(3, 2.5), 1.0, 1.0), p)

    def test_l3_examples(self):
        rng = np.random.default_rng(6)
        hb = _hb(rng, 1)
        pi = rng.normal(30, 10, (1, 3, 6))
        H, _ = hb.evaluate(pi)
        ev = evaluate_loss(LossKind("l3"), np.ones((1, 1)), pi[:, :1], hb)
        assert ev.value[0] == pytest.approx(H[0, 0] + hb.dVdt[0])
        same = np.repeat(pi[:, :1], 3, axis=1)
        ev = evaluate_loss(LossKind("l3", beta=0.7), np.array([[0.2, 0.3, 0.5]]), same, hb)
        assert ev.value[0] == pytest.approx(H[0, 0] + hb.dVdt[0])

    def test_reformulated_examples(self):
        rng = np.random.default_rng(7)
        hb = _hb(rng, 1)
        pi = rng.normal(30, 10, (1, 3, 6))
        H, _ = hb.evaluate(pi)
        ev = losses._l3_reformulated(np.ones((1, 1)), pi[:, :1], hb, 1.0)
        assert ev.value[0] == pytest.approx(H[0, 0])
        same = np.repeat(pi[:, :1], 3, axis=1)
        p = np.array([[0.2, 0.3, 0.5]])
        beta = 2.0
        ev = losses._l3_reformulated(p, same, hb, beta)
        entropy = -np.sum(p * np.log(p))
        assert ev.value[0] == pytest.approx(H[0, 0] + entropy / beta)

    def test_cross_entropy_examples(self):
        assert cross_entropy(np.eye(4)[1], np.eye(4)[1]) == pytest.approx(0.0)
        assert cross_entropy(np.eye(4)[0], np.full(4, 0.25)) == pytest.approx(math.log(4))
        val = cross_entropy(np.eye(3)[0], np.array([0.0, 0.5, 0.5]))
        assert val == pytest.approx(-math.log(1e-12))

    def test_mode_map(self):
        out = map_mode_probabilities(np.array([0.2, 0.3, 0.5]), [3, 0, 1], 4)
        np.testing.assert_allclose(out, [0.3, 0.5, 0.0, 0.2])
        with pytest.raises(ValueError):
            map_mode_probabilities(np.array([1.0, 0, 0]), [0, 1], 4)
        with pytest.raises(ValueError):
            map_mode_probabilities(np.array([1.0, 0, 0]), [0, 1, 4], 4)

    def test_guided_zero_lambda(self):
        rng = np.random.default_rng(8)
        hb = _hb(rng, 5)
        p = rng.dirichlet(np.ones(4), 5)
        pi = rng.normal(30, 10, (5, 4, 6))
        mp = np.eye(3)[rng.integers(0, 3, 5)]
        for v in ("l1", "l2", "l3"):
            a = evaluate_loss(LossKind(v), p, pi, hb)
            b = evaluate_loss(LossKind(v, guided=True, lam=0.0), p, pi, hb, mode_probs=mp)
            np.testing.assert_array_equal(a.value, b.value)
            np.testing.assert_array_equal(a.a, b.a)
            np.testing.assert_array_equal(a.b, b.b)

    def test_guided_matching_selection(self):
        rng = np.random.default_rng(9)
        hb = _hb(rng, 1)
        pi = rng.normal(30, 10, (1, 3, 6))
        p = np.array([[1.0, 0.0, 0.0]])
        base = evaluate_loss(LossKind("l2"), p, pi, hb)
        guided = evaluate_loss(LossKind("l2", guided=True), p, pi, hb, mode_probs=np.array([[1.0, 0, 0]]))
        assert guided.value[0] == pytest.approx(base.value[0])

    def test_guided_needs_mode_probabilities(self):
        rng = np.random.default_rng(10)
        with pytest.raises(ValueError):
            evaluate_loss(LossKind("l3", guided=True), np.full((1, 2), 0.5), np.zeros((1, 2, 6)), _hb(rng, 1))

    def test_bc_examples(self):
        u = np.zeros((1, 6))
        ev = evaluate_loss(LossKind("bc"), np.ones((1, 1)), np.eye(6)[None, :1], u_mpc=u)
        assert ev.value[0] == pytest.approx(1 / 6)
        pi = np.stack([np.full(6, 3.0), np.zeros(6)])[None]
        ev = evaluate_loss(LossKind("bc"), np.array([[1e-9, 1 - 1e-9]]), pi, u_mpc=u)
        assert ev.value[0] == pytest.approx(0.0, abs=1e-8)
        with pytest.raises(ValueError):
            evaluate_loss(LossKind("bc"), np.ones((1, 1)), np.zeros((1, 1, 6)))


class TestProperties:
    @given(logits, st.lists(st.floats(-20, 20), min_size=6, max_size=6), st.floats(-50, 50),
           st.floats(0.1, 5.0), st.floats(-100, 100))
    def test_posterior_normalised_and_shift_invariant(self, lg, H, dVdt, beta, shift):
        p = _probs(lg)
        H = np.array(H[:len(p)])
        q = posterior(p, H, dVdt, beta)
        assert abs(q.sum() - 1.0) < 1e-12
        np.testing.assert_allclose(posterior(p, H + shift, dVdt, beta), q, atol=1e-12)

    @given(logits, st.lists(st.floats(-20, 20), min_size=6, max_size=6), st.floats(0.1, 5.0))
    def test_jensen_bound(self, lg, H, beta):
        p = _probs(lg)
        z = np.array(H[:len(p)])
        l3 = -np.log(np.sum(p * np.exp(-beta * z))) / beta
        assert l3 <= np.sum(p * z) + 1e-9
        if np.ptp(z) == 0:
            assert l3 == pytest.approx(np.sum(p * z))

    @given(logits, st.lists(st.floats(-2, 2), min_size=6, max_size=6))
    def test_beta_limit(self, lg, H):
        p = _probs(lg)
        np.testing.assert_allclose(posterior(p, np.array(H[:len(p)]), 0.0, 1e-6), p, atol=1e-4)

    def test_gating_sign_structure(self):
        rng = np.random.default_rng(11)
        hb = _hb(rng, 64)
        p = rng.dirichlet(np.ones(4), 64)
        pi = rng.normal(30, 10, (64, 4, 6))
        H, _ = hb.evaluate(pi)
        hb.const = hb.const - H.min() + 1.0  # all H_i positive
        l2 = evaluate_loss(LossKind("l2"), p, pi, hb)
        l3 = evaluate_loss(LossKind("l3"), p, pi, hb)
        assert np.all(l2.b > 0)
        np.testing.assert_allclose(l2.b, hb.evaluate(pi)[0])
        assert np.all(l3.b <= 0)
        np.testing.assert_allclose(l3.b, -l3.q / p)

    def test_reformulated_coefficients_agree(self):
        rng = np.random.default_rng(12)
        worst = 0.0
        for _ in range(200):
            E = int(rng.integers(1, 6))
            hb = _hb(rng, 1)
            p = rng.dirichlet(np.ones(E), 1)
            pi = rng.normal(30, 15, (1, E, 6))
            beta = float(rng.uniform(0.2, 3.0))
            a = losses._l3(p, pi, hb, beta)
            b = losses._l3_reformulated(p, pi, hb, beta)
            worst = max(worst, np.abs(a.a - b.a).max(), np.abs(a.b - b.b).max())
        assert worst <= 1e-10


KINDS = [LossKind("l1"), LossKind("l2"), LossKind("l3"), LossKind("l3", beta=0.5),
         LossKind("l1", guided=True), LossKind("l2", guided=True), LossKind("l3", guided=True, lam=0.7),
         LossKind("bc")]


@pytest.mark.parametrize("kind", KINDS, ids=lambda k: f"{k.variant}{'-guided' if k.guided else ''}-b{k.beta}")
def test_batch_gradient_matches_differences(kind):
    rng = np.random.default_rng(13)
    worst = 0.0
    for _ in range(20):
        pol = random_policy(rng, int(rng.integers(3 if kind.guided else 1, 6)))
        batch = [random_tuple(rng) for _ in range(3)]
        worst = max(worst, directional_check(kind, pol, batch, rng))
    assert worst < 1e-4


class TestBatch:
    def test_identical_tuples(self):
        rng = np.random.default_rng(14)
        pol = random_policy(rng)
        t = random_tuple(rng)
        for kind in KINDS:
            one, _ = batch_loss(kind, [t], pol, COST, accumulate=False)
            many, _ = batch_loss(kind, [t] * 5, pol, COST, accumulate=False)
            assert many == pytest.approx(one, rel=1e-12)

    def test_single_sample_api(self):
        rng = np.random.default_rng(15)
        pol = random_policy(rng)
        t = random_tuple(rng)
        tr = men_forward(pol, t.gt, t.xr)
        data = solver.HamiltonianData(t.x_abs, t.t_abs, t.dVdx, t.dVdt, t.nu, t.mode)
        # HamiltonianData measures the tracking error against cost.desired; match the tuple's xr
        cost = model.CostSpec(COST.Q, COST.R, COST.Qf, lambda s: t.x_abs - t.xr)
        J2, _ = batch_loss(LossKind("l2"), [t], pol, cost, accumulate=False)
        assert losses.loss_l2(tr, data, cost).value[0] == pytest.approx(J2)
        J3, _ = batch_loss(LossKind("l3", beta=2.0), [t], pol, cost, accumulate=False)
        assert losses.loss_l3(tr, data, cost, beta=2.0).value[0] == pytest.approx(J3)
        J1, _ = batch_loss(LossKind("l1"), [t], pol, cost, accumulate=False)
        assert losses.loss_l1(tr, data, cost).value[0] == pytest.approx(J1)
        Jg, _ = batch_loss(LossKind("l3", guided=True), [t], pol, cost, accumulate=False)
        ev = losses.loss_guided(LossKind("l3", guided=True), tr, data, cost, t.mode_probs)
        assert ev.value[0] == pytest.approx(Jg)
        Jb, _ = batch_loss(LossKind("bc"), [t], pol, cost, accumulate=False)
        assert losses.loss_bc(tr, t.u_mpc).value[0] == pytest.approx(Jb)
        with pytest.raises(ValueError):
            losses.loss_guided(LossKind("l3"), tr, data, cost, t.mode_probs)

    def test_empty_batch(self):
        with pytest.raises(ValueError):
            batch_loss(LossKind(), [], random_policy(np.random.default_rng(0)), COST)
