"""Objective checks: CTC vs the path-enumeration oracle, smoothed CE, hybrid."""

import itertools
import math

import numpy as np
import pytest

from ctc_oracle import brute_force_ctc_nll, random_instance

from blockasr.losses import (
    UnalignableError,
    ctc_loss,
    hybrid_loss,
    hybrid_utterance_loss,
    label_smoothed_ce,
)
from blockasr.model import ASRModel, toy_config
from blockasr.tensor import Tensor, finite_diff_gradient, max_rel_err


def uniform_log_probs(T, classes):
    return Tensor(np.full((T, classes), -math.log(classes)))


def random_log_probs(rng, T, classes):
    logits = rng.normal(size=(T, classes)) * 2.0
    return Tensor(logits - np.log(np.exp(logits).sum(axis=1, keepdims=True)))


class TestCtcLoss:
    def test_single_blank_frame(self):
        loss = ctc_loss(uniform_log_probs(1, 3), [])
        assert abs(loss.item() - math.log(3)) < 1e-12

    def test_two_frames_one_label_three_paths(self):
        rng = np.random.default_rng(0)
        lp = random_log_probs(rng, 2, 3)
        a = lp.data
        # label 1 in 2 frames: paths (1,0), (0,1), (1,1)
        expected = -np.log(np.exp(a[0, 1] + a[1, 0])
                           + np.exp(a[0, 0] + a[1, 1])
                           + np.exp(a[0, 1] + a[1, 1]))
        assert abs(ctc_loss(lp, [1]).item() - expected) < 1e-12

    def test_matches_enumeration_on_random_instances(self):
        rng = np.random.default_rng(1)
        for _ in range(40):
            lp, labels = random_instance(rng)
            got = ctc_loss(Tensor(lp), labels).item()
            want = brute_force_ctc_nll(lp, labels)
            assert abs(got - want) < 1e-8, (lp.shape, labels)

    def test_unalignable_repeat(self):
        lp = uniform_log_probs(2, 3)
        with pytest.raises(UnalignableError):
            ctc_loss(lp, [1, 1])  # needs 3 frames

    def test_unalignable_too_long(self):
        with pytest.raises(UnalignableError):
            ctc_loss(uniform_log_probs(2, 4), [1, 2, 3])

    def test_zero_valid_frames(self):
        with pytest.raises(UnalignableError):
            ctc_loss(uniform_log_probs(3, 3), [], valid_frames=0)

    def test_valid_frames_ignores_padding(self):
        rng = np.random.default_rng(2)
        lp = random_log_probs(rng, 4, 3)
        padded = Tensor(np.concatenate([lp.data, rng.normal(size=(3, 3))]))
        a = ctc_loss(lp, [1, 2]).item()
        b = ctc_loss(padded, [1, 2], valid_frames=4).item()
        assert a == b

    def test_blank_label_rejected(self):
        with pytest.raises(ValueError):
            ctc_loss(uniform_log_probs(3, 3), [0])

    def test_permutation_covariance(self):
        rng = np.random.default_rng(3)
        lp = random_log_probs(rng, 5, 4)
        labels = [1, 3, 2]
        perm = np.array([0, 3, 1, 2])  # blank fixed, classes relabeled
        relabeled = Tensor(lp.data[:, np.argsort(perm)])
        a = ctc_loss(lp, labels).item()
        b = ctc_loss(relabeled, [int(perm[l]) for l in labels]).item()
        assert abs(a - b) < 1e-12

    def test_total_probability_over_label_space(self):
        rng = np.random.default_rng(4)
        T, V = 3, 2
        lp = random_log_probs(rng, T, V + 1)
        total = 0.0
        for L in range(T + 1):
            for labels in itertools.product(range(1, V + 1), repeat=L):
                try:
                    total += math.exp(-ctc_loss(lp, list(labels)).item())
                except UnalignableError:
                    pass
        assert total <= 1.0 + 1e-12
        assert abs(total - 1.0) < 1e-9  # label space of length <= T is exhaustive

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(5)
        for _ in range(5):
            lp, labels = random_instance(rng, max_T=6)
            x = Tensor(lp, requires_grad=True)
            ctc_loss(x, labels).backward()
            fd = finite_diff_gradient(lambda t: ctc_loss(t, labels), x)
            assert max_rel_err(x.grad, fd.data) < 1e-5


class TestLabelSmoothedCe:
    def test_zero_smoothing_is_plain_ce(self):
        rng = np.random.default_rng(6)
        logits = rng.normal(size=(4, 5))
        targets = [0, 3, 2, 4]
        lp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
        expected = -lp[np.arange(4), targets].mean()
        got = label_smoothed_ce(Tensor(logits), targets, 0.0).item()
        assert abs(got - expected) < 1e-12

    def test_uniform_logits_give_log_vocab(self):
        for eps in (0.0, 0.1, 0.5):
            got = label_smoothed_ce(Tensor(np.zeros((3, 7))), [1, 2, 3], eps).item()
            assert abs(got - math.log(7)) < 1e-12

    def test_pad_positions_excluded(self):
        rng = np.random.default_rng(7)
        logits = rng.normal(size=(4, 5))
        full = label_smoothed_ce(Tensor(logits[:2]), [1, 2], 0.1).item()
        padded = label_smoothed_ce(Tensor(logits), [1, 2, 4, 4], 0.1, pad_id=4).item()
        assert abs(full - padded) < 1e-12

    def test_target_out_of_range(self):
        with pytest.raises(ValueError):
            label_smoothed_ce(Tensor(np.zeros((2, 4))), [1, 4], 0.1)

    def test_grad(self):
        rng = np.random.default_rng(8)
        x = Tensor(rng.normal(size=(3, 6)), requires_grad=True)
        targets = [5, 0, 2]
        label_smoothed_ce(x, targets, 0.1).backward()
        fd = finite_diff_gradient(lambda t: label_smoothed_ce(t, targets, 0.1), x)
        assert max_rel_err(x.grad, fd.data) < 1e-6


class TestHybridLoss:
    def test_weighted_combination(self):
        assert abs(hybrid_loss(Tensor([2.0]).sum(), Tensor([1.0]).sum(), 0.3).item()
                   - 1.3) < 1e-12

    def test_equal_branches_fixed_point(self):
        for lam in (0.1, 0.5, 0.9):
            assert abs(hybrid_loss(Tensor([4.2]).sum(), Tensor([4.2]).sum(),
                                   lam).item() - 4.2) < 1e-12

    def test_partial_derivatives_are_the_weights(self):
        ctc = Tensor([2.0], requires_grad=True)
        aed = Tensor([1.0], requires_grad=True)
        hybrid_loss(ctc.sum(), aed.sum(), 0.3).backward()
        assert abs(ctc.grad[0] - 0.3) < 1e-15
        assert abs(aed.grad[0] - 0.7) < 1e-15

    def test_lambda_bounds(self):
        with pytest.raises(ValueError):
            hybrid_loss(Tensor([1.0]).sum(), Tensor([1.0]).sum(), 0.0)
        with pytest.raises(ValueError):
            hybrid_loss(Tensor([1.0]).sum(), Tensor([1.0]).sum(), 1.0)


class TestUtteranceLoss:
    def test_runs_and_is_finite(self):
        rng = np.random.default_rng(9)
        model = ASRModel(toy_config("base"), rng)
        feats = Tensor(rng.normal(size=(20, 8)))
        total, ctc, aed = hybrid_utterance_loss(model, feats, [1, 2, 3],
                                                lam=0.3, smoothing=0.1)
        assert np.isfinite(total.item())
        expected = 0.3 * ctc.item() + 0.7 * aed.item()
        assert abs(total.item() - expected) < 1e-12

    def test_gradients_reach_every_parameter(self):
        # seed picked so the squeeze-excitation relu has live units; a dead
        # bottleneck legitimately zeroes its own weight gradients
        rng = np.random.default_rng(11)
        model = ASRModel(toy_config("se"), rng)
        feats = Tensor(rng.normal(size=(16, 8)))
        total, _, _ = hybrid_utterance_loss(model, feats, [2, 4], lam=0.3,
                                            smoothing=0.1)
        total.backward()
        for name, p in model.named_parameters():
            assert np.abs(p.grad_or_zeros()).max() > 0.0, name
