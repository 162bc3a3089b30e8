"""Hand-derived oracles and algebraic properties of every training loss.

Each numeric expectation below is worked out in a comment from the loss
definition alone, so these tests cannot drift with the implementation.
"""

import math
from collections import deque

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from dira import objectives
from dira.objectives import (LossBundle, NegativeQueue, combine, cross_correlation,
                             loss_adversary_disc, loss_adversary_gen, loss_barlow,
                             loss_classwise, loss_infonce, loss_restoration,
                             loss_simsiam)


def t64(rows):
    return torch.tensor(rows, dtype=torch.float64)


# --------------------------------------------------------------------------
# InfoNCE
# --------------------------------------------------------------------------

class TestInfoNCE:
    def test_uniform_logits_give_log4(self):
        # z1=e1, z2=e2, queue={e3, e4, -e2}: every similarity is 0, so the
        # softmax is uniform over 1 positive + 3 negatives -> loss = log 4.
        q = NegativeQueue(8, 4, dtype=torch.float64)
        q.enqueue(t64([[0, 0, 1, 0], [0, 0, 0, 1], [0, -1, 0, 0]]))
        loss = loss_infonce(t64([[1, 0, 0, 0]]), t64([[0, 1, 0, 0]]), q, tau=1.0)
        assert abs(float(loss) - math.log(4.0)) < 1e-12

    def test_temperature_cancels_on_equal_logits(self):
        # positive and single negative both have similarity 1: logits are
        # [1/tau, 1/tau] for any tau -> loss = log 2 regardless of tau.
        q = NegativeQueue(4, 2, dtype=torch.float64)
        q.enqueue(t64([[1, 0]]))
        for tau in (0.07, 0.2, 1.0, 5.0):
            loss = loss_infonce(t64([[1, 0]]), t64([[1, 0]]), q, tau=tau)
            assert abs(float(loss) - math.log(2.0)) < 1e-12

    def test_separating_positive_drives_loss_down(self):
        # pos sim 1, one negative at sim -1, tau=0.5: logits [2, -2],
        # loss = log(1 + e^-4).
        q = NegativeQueue(4, 2, dtype=torch.float64)
        q.enqueue(t64([[-1, 0]]))
        loss = loss_infonce(t64([[1, 0]]), t64([[1, 0]]), q, tau=0.5)
        assert abs(float(loss) - math.log(1.0 + math.exp(-4.0))) < 1e-12

    def test_gradient_reaches_z1_only(self):
        q = NegativeQueue(4, 3, dtype=torch.float64)
        q.enqueue(torch.nn.functional.normalize(torch.randn(3, 3, dtype=torch.float64), dim=1))
        z1 = torch.nn.functional.normalize(torch.randn(2, 3, dtype=torch.float64), dim=1)
        z2 = torch.nn.functional.normalize(torch.randn(2, 3, dtype=torch.float64), dim=1)
        z1.requires_grad_(True)
        z2.requires_grad_(True)
        loss_infonce(z1, z2, q).backward()
        assert z1.grad is not None and z1.grad.abs().sum() > 0
        assert z2.grad is None or z2.grad.abs().sum() == 0

    def test_preconditions(self):
        q = NegativeQueue(4, 2, dtype=torch.float64)
        q.enqueue(t64([[1, 0]]))
        unit = t64([[1, 0]])
        with pytest.raises(ValueError, match="temperature"):
            loss_infonce(unit, unit, q, tau=0.0)
        with pytest.raises(ValueError, match="normalized"):
            loss_infonce(t64([[2, 0]]), unit, q)
        empty = NegativeQueue(4, 2, dtype=torch.float64)
        with pytest.raises(ValueError, match="at least one negative"):
            loss_infonce(unit, unit, empty)


# --------------------------------------------------------------------------
# negative queue
# --------------------------------------------------------------------------

def unit_rows(rng, k, d=4):
    z = rng.standard_normal((k, d))
    return torch.from_numpy(z / np.linalg.norm(z, axis=1, keepdims=True))


class TestNegativeQueue:
    def test_oldest_first_order(self):
        q = NegativeQueue(3, 2, dtype=torch.float64)
        a, b, c, d = t64([[1, 0]]), t64([[0, 1]]), t64([[-1, 0]]), t64([[0, -1]])
        q.enqueue(a)
        q.enqueue(b)
        assert torch.equal(q.tensor(), torch.cat([a, b]))
        q.enqueue(c)
        q.enqueue(d)  # evicts a
        assert torch.equal(q.tensor(), torch.cat([b, c, d]))

    def test_oversize_enqueue_keeps_newest_rows(self):
        q = NegativeQueue(2, 4, dtype=torch.float64)
        z = unit_rows(np.random.default_rng(0), 5)
        q.enqueue(z)
        assert q.fill == 2
        assert torch.equal(q.tensor(), z[-2:])

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.integers(min_value=0, max_value=7), min_size=1, max_size=60),
           st.integers(min_value=1, max_value=9))
    def test_fifo_law_matches_deque_oracle(self, batch_sizes, capacity):
        rng = np.random.default_rng(7)
        q = NegativeQueue(capacity, 4)
        oracle: deque = deque(maxlen=capacity)
        for k in batch_sizes:
            z = unit_rows(rng, k) if k else torch.zeros(0, 4, dtype=torch.float64)
            q.enqueue(z)
            for row in z:
                oracle.append(row.numpy().astype(np.float32))
            assert q.fill == len(oracle)
            got = q.tensor().numpy()
            want = np.stack(list(oracle)) if oracle else np.zeros((0, 4), np.float32)
            np.testing.assert_array_equal(got, want)

    def test_state_round_trip(self):
        rng = np.random.default_rng(1)
        q = NegativeQueue(5, 4)
        q.enqueue(unit_rows(rng, 7))
        st_ = q.state()
        q2 = NegativeQueue(5, 4)
        q2.load_state(st_)
        assert torch.equal(q.tensor(), q2.tensor())
        q.enqueue(unit_rows(rng, 2))
        q2.enqueue(unit_rows(np.random.default_rng(1), 9)[-2:])  # may differ; only shape law matters
        assert q2.fill == q.fill

    def test_rejects_unnormalized_and_bad_dim(self):
        q = NegativeQueue(4, 3)
        with pytest.raises(ValueError, match="normalized"):
            q.enqueue(t64([[3, 0, 0]]))
        with pytest.raises(ValueError, match="dim"):
            q.enqueue(t64([[1, 0]]))


# --------------------------------------------------------------------------
# SimSiam
# --------------------------------------------------------------------------

class TestSimSiam:
    def test_hand_value_neg_inv_sqrt2(self):
        # D(p1, y2): cos([1,0],[1,1]) = 1/sqrt(2); D(p2, y1) likewise.
        # loss = -(0.5 + 0.5)/sqrt(2) = -1/sqrt(2).
        p1, p2 = t64([[1, 0]]), t64([[0, 1]])
        y1, y2 = t64([[1, 1]]), t64([[1, 1]])
        loss = loss_simsiam(p1, p2, y1, y2)
        assert abs(float(loss) + 1.0 / math.sqrt(2.0)) < 1e-12

    def test_perfect_alignment_gives_minus_one(self):
        z = t64([[0.6, 0.8], [1, 0]])
        assert abs(float(loss_simsiam(z, z, z, z)) + 1.0) < 1e-12

    def test_stop_gradient_blocks_projector_branch(self):
        p = torch.randn(3, 4, dtype=torch.float64, requires_grad=True)
        y = torch.randn(3, 4, dtype=torch.float64, requires_grad=True)
        loss_simsiam(p, p, y, y, stop_gradient=True).backward()
        assert p.grad is not None and p.grad.abs().sum() > 0
        assert y.grad is None or y.grad.abs().sum() == 0

    def test_without_stop_gradient_both_branches_get_grad(self):
        p = torch.randn(3, 4, dtype=torch.float64, requires_grad=True)
        y = torch.randn(3, 4, dtype=torch.float64, requires_grad=True)
        loss_simsiam(p, p, y, y, stop_gradient=False).backward()
        assert y.grad is not None and y.grad.abs().sum() > 0

    def test_symmetry_under_branch_swap(self):
        rng = torch.Generator().manual_seed(3)
        p1, p2 = torch.randn(4, 8, generator=rng), torch.randn(4, 8, generator=rng)
        y1, y2 = torch.randn(4, 8, generator=rng), torch.randn(4, 8, generator=rng)
        a = loss_simsiam(p1, p2, y1, y2)
        b = loss_simsiam(p2, p1, y2, y1)
        assert torch.allclose(a, b)

    def test_zero_norm_rejected(self):
        with pytest.raises(ValueError, match="zero-norm"):
            loss_simsiam(t64([[0, 0]]), t64([[1, 0]]), t64([[1, 0]]), t64([[1, 0]]))


# --------------------------------------------------------------------------
# Barlow
# --------------------------------------------------------------------------

class TestBarlow:
    def test_cross_correlation_hand_case(self):
        # za = zb = [[1,-1],[-1,1]]: per-dim mean 0, biased std 1, so
        # zhat = z/(1+eps) and C = zhat^T zhat / 2 =
        # [[1,-1],[-1,1]] / (1+eps)^2 exactly.
        eps = 1e-5
        z = t64([[1, -1], [-1, 1]])
        c = cross_correlation(z, z, eps=eps)
        rho = 1.0 / (1.0 + eps) ** 2
        expected = t64([[rho, -rho], [-rho, rho]])
        assert torch.allclose(c, expected, atol=1e-14)

    def test_loss_hand_value(self):
        # With C from the case above: on-diag term 2*(1-rho)^2,
        # off-diag term lambda * 2 * rho^2.
        eps, lam = 1e-5, 0.005
        z = t64([[1, -1], [-1, 1]])
        rho = 1.0 / (1.0 + eps) ** 2
        expected = 2.0 * (1.0 - rho) ** 2 + lam * 2.0 * rho ** 2
        assert abs(float(loss_barlow(z, z, lambda_bt=lam, eps=eps)) - expected) < 1e-12

    def test_anticorrelated_pays_on_diagonal(self):
        eps = 1e-5
        za = t64([[1, -1], [-1, 1]])
        zb = -za
        rho = 1.0 / (1.0 + eps) ** 2
        expected = 2.0 * (1.0 + rho) ** 2 + 0.005 * 2.0 * rho ** 2
        assert abs(float(loss_barlow(za, zb, eps=eps)) - expected) < 1e-12

    def test_lambda_zero_ignores_off_diagonal(self):
        rng = torch.Generator().manual_seed(5)
        za, zb = torch.randn(8, 4, generator=rng), torch.randn(8, 4, generator=rng)
        c = cross_correlation(za, zb)
        expected = float(((1.0 - torch.diagonal(c)) ** 2).sum())
        assert abs(float(loss_barlow(za, zb, lambda_bt=0.0)) - expected) < 1e-10

    def test_batch_of_one_rejected(self):
        with pytest.raises(ValueError, match="at least 2"):
            loss_barlow(t64([[1, 2]]), t64([[1, 2]]))


# --------------------------------------------------------------------------
# class-wise CE, restoration, adversary
# --------------------------------------------------------------------------

class TestClasswise:
    def test_hand_value(self):
        # logits [[2,0]] label 0: CE = -log(e^2/(e^2+1)) = log(1+e^-2);
        # symmetric second row gives the same, so the mean equals it too.
        logits = t64([[2, 0], [0, 2]])
        labels = torch.tensor([0, 1])
        expected = math.log(1.0 + math.exp(-2.0))
        assert abs(float(loss_classwise(logits, labels)) - expected) < 1e-12

    def test_uniform_logits_give_log_k(self):
        logits = torch.zeros(5, 7, dtype=torch.float64)
        labels = torch.arange(5) % 7
        assert abs(float(loss_classwise(logits, labels)) - math.log(7.0)) < 1e-12

    def test_label_range_enforced(self):
        logits = torch.zeros(2, 3, dtype=torch.float64)
        with pytest.raises(ValueError, match=r"\[0, 3\)"):
            loss_classwise(logits, torch.tensor([0, 3]))
        with pytest.raises(ValueError, match=r"\[0, 3\)"):
            loss_classwise(logits, torch.tensor([-1, 0]))


class TestRestoration:
    def test_hand_value(self):
        # diffs are (1, -1, 0, 2) over 4 pixels -> mean of (1,1,0,4) = 1.5
        x = t64([[1, 2], [3, 4]])[None, None]
        y = t64([[0, 3], [3, 2]])[None, None]
        assert abs(float(loss_restoration(x, y)) - 1.5) < 1e-12

    def test_zero_when_identical(self):
        x = torch.rand(2, 1, 8, 8, dtype=torch.float64)
        assert float(loss_restoration(x, x.clone())) == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape mismatch"):
            loss_restoration(torch.zeros(1, 1, 4, 4), torch.zeros(1, 1, 4, 5))


class TestAdversary:
    def test_critic_at_zero_logits_is_2log2(self):
        # softplus(0) + softplus(0) = 2 log 2
        z = torch.zeros(3, dtype=torch.float64)
        assert abs(float(loss_adversary_disc(z, z)) - 2.0 * math.log(2.0)) < 1e-12

    def test_critic_hand_value(self):
        # real logit log 3: -log sigmoid(log 3) = log(4/3);
        # fake logit -log 3: -log(1 - sigmoid(-log 3)) = log(4/3) as well.
        r = t64([math.log(3.0)]).ravel()
        f = t64([-math.log(3.0)]).ravel()
        assert abs(float(loss_adversary_disc(r, f)) - 2.0 * math.log(4.0 / 3.0)) < 1e-12

    def test_generator_at_zero_is_log2(self):
        z = torch.zeros(4, dtype=torch.float64)
        assert abs(float(loss_adversary_gen(z)) - math.log(2.0)) < 1e-12

    def test_generator_saturating_variant(self):
        # saturating form is -softplus(fake) = log(1 - sigmoid(fake))
        f = t64([0.7, -1.3]).ravel()
        expected = float((-torch.nn.functional.softplus(f)).mean())
        assert abs(float(loss_adversary_gen(f, saturating=True)) - expected) < 1e-12

    def test_fooling_the_critic_reduces_generator_loss(self):
        low = loss_adversary_gen(t64([5.0]).ravel())
        high = loss_adversary_gen(t64([-5.0]).ravel())
        assert float(low) < float(high)

    def test_logits_must_be_flat(self):
        with pytest.raises(ValueError, match="shape"):
            loss_adversary_disc(torch.zeros(2, 1), torch.zeros(2))
        with pytest.raises(ValueError, match="shape"):
            loss_adversary_gen(torch.zeros(2, 1))


# --------------------------------------------------------------------------
# combination
# --------------------------------------------------------------------------

class TestCombine:
    def test_hand_value_with_default_weights(self):
        # 1*1 + 10*0.5 + 0.001*0.2 = 6.0002
        bundle = combine(1.0, 0.5, 0.2)
        assert abs(bundle.total - 6.0002) < 1e-12
        assert bundle.weights == (1.0, 10.0, 0.001)

    def test_custom_weights(self):
        bundle = combine(2.0, 3.0, 4.0, lambda_dis=0.5, lambda_res=0.25, lambda_adv=2.0)
        assert abs(bundle.total - (1.0 + 0.75 + 8.0)) < 1e-12

    def test_tensor_inputs_stay_differentiable(self):
        dis = torch.tensor(1.0, requires_grad=True)
        bundle = combine(dis, 0.0, 0.0)
        bundle.total.backward()
        assert dis.grad is not None

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError, match="lambda_res"):
            combine(1.0, 1.0, 1.0, lambda_res=-0.1)

    def test_detached_bundle_is_plain_floats(self):
        bundle = combine(torch.tensor(1.0, requires_grad=True), torch.tensor(2.0), 0.0)
        d = bundle.detached()
        assert isinstance(d, LossBundle)
        assert all(isinstance(v, float) for v in (d.dis, d.res, d.adv_gen, d.total, d.adv_disc))


# --------------------------------------------------------------------------
# scale coherence of the defaults
# --------------------------------------------------------------------------

def test_default_weights_exposed():
    assert objectives.DEFAULT_LAMBDA_DIS == 1.0
    assert objectives.DEFAULT_LAMBDA_RES == 10.0
    assert objectives.DEFAULT_LAMBDA_ADV == 0.001
