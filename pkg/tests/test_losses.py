"""Loss equations against brute-force oracles, gradients, gate semantics."""

import numpy as np
import pytest

from oracles import (
    boundary_loss_oracle,
    dice_loss_oracle,
    finite_difference_grad,
    random_probmap_array,
)
from semiseg import autodiff as ad
from semiseg.autodiff import Tensor
from semiseg.core import MaskMap, ProbMap, PseudoLabel, desk_config
from semiseg.losses import (
    boundary_loss,
    boundary_loss_graph,
    dice_loss_graph,
    one_hot,
    soft_dice_loss,
    supervised_loss,
    total_loss,
    unsupervised_loss,
)
from semiseg.pseudolabel import make_pseudolabel


def onehot_probmap(labels, num_classes):
    return ProbMap(np.eye(num_classes)[labels])


def mask(labels, num_classes):
    return MaskMap(np.asarray(labels, dtype=np.int32), num_classes)


class TestSoftDice:
    def test_perfect_prediction_is_zero(self):
        labels = np.array([[0, 1, 2], [2, 1, 0], [0, 0, 1]])
        loss = soft_dice_loss(onehot_probmap(labels, 3), mask(labels, 3))
        assert loss == pytest.approx(0.0, abs=1e-6)

    def test_hand_expanded_2x2_case(self):
        # two classes, target all class 0, prediction uniform 0.5:
        # class 0 dice = 4/6, class 1 dice ~ 0  ->  loss = 1 - 1/3
        target = mask(np.zeros((2, 2), dtype=int), 2)
        pred = ProbMap(np.full((2, 2, 2), 0.5))
        loss = soft_dice_loss(pred, target)
        assert loss == pytest.approx(1.0 - 1.0 / 3.0, abs=1e-4)

    def test_total_miss_is_one(self):
        target = mask(np.zeros((2, 2), dtype=int), 2)
        pred = onehot_probmap(np.ones((2, 2), dtype=int), 2)
        assert soft_dice_loss(pred, target) == pytest.approx(1.0, abs=1e-5)

    def test_matches_loop_oracle_on_random_instances(self):
        rng = np.random.default_rng(0)
        for _ in range(25):
            h, w = rng.integers(2, 9, size=2)
            num_classes = int(rng.integers(2, 5))
            probs = random_probmap_array(rng, h, w, num_classes)
            labels = rng.integers(0, num_classes, size=(h, w))
            got = soft_dice_loss(ProbMap(probs), mask(labels, num_classes))
            want = dice_loss_oracle(probs, labels)
            assert got == pytest.approx(want, abs=1e-10)

    def test_shape_mismatch_rejected(self):
        pred = ProbMap(np.full((2, 2, 2), 0.5))
        with pytest.raises(ValueError, match="target"):
            soft_dice_loss(pred, mask(np.zeros((3, 2), dtype=int), 2))

    def test_class_count_mismatch_rejected(self):
        pred = ProbMap(np.full((2, 2, 2), 0.5))
        with pytest.raises(ValueError, match="classes"):
            soft_dice_loss(pred, mask(np.zeros((2, 2), dtype=int), 3))

    def test_range_bounds(self):
        rng = np.random.default_rng(1)
        for _ in range(30):
            probs = random_probmap_array(rng, 5, 5, 3)
            labels = rng.integers(0, 3, size=(5, 5))
            val = soft_dice_loss(ProbMap(probs), mask(labels, 3))
            assert 0.0 <= val <= 1.0


class TestBoundaryLoss:
    def test_perfect_prediction_near_zero(self):
        labels = np.zeros((10, 10), dtype=int)
        labels[3:7, 3:7] = 1
        loss = boundary_loss(onehot_probmap(labels, 2), mask(labels, 2),
                             boundary_width=1, theta=2)
        assert loss == pytest.approx(0.0, abs=1e-4)

    def test_far_apart_boundaries_score_one(self):
        target = np.zeros((16, 16), dtype=int)
        target[1:4, 1:4] = 1
        pred = np.zeros((16, 16), dtype=int)
        pred[11:15, 11:15] = 1
        loss = boundary_loss(onehot_probmap(pred, 2), mask(target, 2),
                             boundary_width=1, theta=2)
        assert loss == pytest.approx(1.0, abs=1e-4)

    def test_one_pixel_shift_matches_exhaustive_oracle(self):
        target = np.zeros((8, 8), dtype=int)
        target[2:6, 2:6] = 1
        pred = np.zeros((8, 8), dtype=int)
        pred[2:6, 3:7] = 1  # shifted one pixel right
        got = boundary_loss(onehot_probmap(pred, 2), mask(target, 2),
                            boundary_width=1, theta=2)
        want = boundary_loss_oracle(pred, target, 2, width=1, theta=2)
        assert got == pytest.approx(want, abs=1e-4)

    def test_matches_oracle_on_random_hard_instances(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            h, w = rng.integers(4, 9, size=2)
            num_classes = int(rng.integers(2, 5))
            target = rng.integers(0, num_classes, size=(h, w))
            pred = rng.integers(0, num_classes, size=(h, w))
            theta = int(rng.integers(1, 4))
            got = boundary_loss(onehot_probmap(pred, num_classes),
                                mask(target, num_classes),
                                boundary_width=1, theta=theta)
            want = boundary_loss_oracle(pred, target, num_classes,
                                        width=1, theta=theta)
            assert got == pytest.approx(want, abs=1e-4)

    def test_uniform_target_without_boundary_scores_zero(self):
        target = mask(np.zeros((6, 6), dtype=int), 2)
        pred = onehot_probmap(np.zeros((6, 6), dtype=int), 2)
        assert boundary_loss(pred, target) == 0.0

    def test_range_bounds(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            probs = random_probmap_array(rng, 6, 6, 3)
            labels = rng.integers(0, 3, size=(6, 6))
            val = boundary_loss(ProbMap(probs), mask(labels, 3),
                                boundary_width=1, theta=2)
            assert 0.0 <= val <= 1.0 + 1e-12

    def test_invalid_width_rejected(self):
        pred = ProbMap(np.full((4, 4, 2), 0.5))
        with pytest.raises(ValueError):
            boundary_loss(pred, mask(np.zeros((4, 4), dtype=int), 2),
                          boundary_width=0)


class TestGradients:
    def _relative_check(self, analytic, numeric, tol=1e-3, floor=1e-8):
        err = np.abs(analytic - numeric)
        scale = np.maximum(np.abs(numeric), floor)
        assert (err / scale).max() < tol or err.max() < floor

    def test_dice_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        probs = random_probmap_array(rng, 6, 6, 3)
        labels = rng.integers(0, 3, size=(6, 6))
        target = one_hot(labels[None], 3)
        batch = probs.transpose(2, 0, 1)[None]

        t = Tensor(batch.copy(), requires_grad=True)
        dice_loss_graph(t, target, 1e-6).sum().backward()

        def f(x):
            with ad.no_grad():
                return float(dice_loss_graph(Tensor(x), target, 1e-6).value[0])

        numeric = finite_difference_grad(f, batch.copy())
        self._relative_check(t.grad, numeric)

    def test_boundary_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        probs = random_probmap_array(rng, 6, 6, 3)
        labels = np.zeros((6, 6), dtype=int)
        labels[2:5, 1:4] = 1
        labels[0:2, 4:6] = 2
        target = one_hot(labels[None], 3)
        batch = probs.transpose(2, 0, 1)[None]

        t = Tensor(batch.copy(), requires_grad=True)
        boundary_loss_graph(t, target, 1, 2).sum().backward()

        def f(x):
            with ad.no_grad():
                return float(boundary_loss_graph(Tensor(x), target, 1, 2).value[0])

        numeric = finite_difference_grad(f, batch.copy())
        self._relative_check(t.grad, numeric)


class TestSupervisedLoss:
    def _random_batch(self, rng, n, h=5, w=5, num_classes=3):
        preds, targets = [], []
        for _ in range(n):
            preds.append(ProbMap(random_probmap_array(rng, h, w, num_classes)))
            targets.append(mask(rng.integers(0, num_classes, (h, w)), num_classes))
        return preds, targets

    def test_perfect_batch_is_zero(self):
        labels = np.zeros((8, 8), dtype=int)
        labels[2:5, 2:5] = 1
        cfg = desk_config(num_classes=2)
        loss = supervised_loss([onehot_probmap(labels, 2)], [mask(labels, 2)], cfg)
        assert loss == pytest.approx(0.0, abs=1e-4)

    def test_mean_of_per_sample_losses(self):
        rng = np.random.default_rng(5)
        cfg = desk_config()
        preds, targets = self._random_batch(rng, 4)
        from semiseg.losses import _sample_loss
        per_sample = [_sample_loss(p, t, cfg) for p, t in zip(preds, targets)]
        assert supervised_loss(preds, targets, cfg) == pytest.approx(
            np.mean(per_sample), abs=1e-12)

    def test_two_sample_arithmetic_mean(self):
        rng = np.random.default_rng(6)
        cfg = desk_config()
        preds, targets = self._random_batch(rng, 2)
        from semiseg.losses import _sample_loss
        a = _sample_loss(preds[0], targets[0], cfg)
        b = _sample_loss(preds[1], targets[1], cfg)
        assert supervised_loss(preds, targets, cfg) == pytest.approx((a + b) / 2)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(7)
        cfg = desk_config()
        preds, targets = self._random_batch(rng, 5)
        base = supervised_loss(preds, targets, cfg)
        order = [3, 1, 4, 0, 2]
        shuffled = supervised_loss([preds[i] for i in order],
                                   [targets[i] for i in order], cfg)
        assert shuffled == pytest.approx(base, abs=1e-12)

    def test_empty_batch_rejected(self):
        with pytest.raises(ValueError, match="nonempty"):
            supervised_loss([], [], desk_config())

    def test_length_mismatch_rejected(self):
        rng = np.random.default_rng(8)
        preds, targets = self._random_batch(rng, 2)
        with pytest.raises(ValueError, match="mismatch"):
            supervised_loss(preds, targets[:1], desk_config())


class TestUnsupervisedLoss:
    def _batch(self, rng, verdicts, h=5, w=5, num_classes=3):
        preds, pls = [], []
        for accepted in verdicts:
            preds.append(ProbMap(random_probmap_array(rng, h, w, num_classes)))
            pls.append(PseudoLabel(
                label_mask=mask(rng.integers(0, num_classes, (h, w)), num_classes),
                confidence=0.99 if accepted else 0.01,
                accepted=accepted))
        return preds, pls

    def test_all_rejected_is_exactly_zero(self):
        rng = np.random.default_rng(9)
        preds, pls = self._batch(rng, [False] * 4)
        assert unsupervised_loss(preds, pls, desk_config()) == 0.0

    def test_one_accepted_one_rejected_halves(self):
        rng = np.random.default_rng(10)
        cfg = desk_config()
        preds, pls = self._batch(rng, [True, False])
        from semiseg.losses import _sample_loss
        accepted_loss = _sample_loss(preds[0], pls[0].label_mask, cfg)
        assert unsupervised_loss(preds, pls, cfg) == pytest.approx(accepted_loss / 2)

    def test_accept_all_equals_recomposition(self):
        rng = np.random.default_rng(11)
        cfg = desk_config()
        preds, pls = self._batch(rng, [True] * 5)
        from semiseg.losses import _sample_loss
        per_sample = [_sample_loss(p, pl.label_mask, cfg)
                      for p, pl in zip(preds, pls)]
        assert unsupervised_loss(preds, pls, cfg) == pytest.approx(
            np.mean(per_sample), abs=1e-12)

    def test_perturbing_rejected_sample_changes_nothing(self):
        rng = np.random.default_rng(12)
        cfg = desk_config()
        preds, pls = self._batch(rng, [True, False, True])
        base = unsupervised_loss(preds, pls, cfg)
        perturbed = list(preds)
        perturbed[1] = ProbMap(random_probmap_array(rng, 5, 5, 3))
        assert unsupervised_loss(perturbed, pls, cfg) == base

    def test_length_mismatch_rejected(self):
        rng = np.random.default_rng(13)
        preds, pls = self._batch(rng, [True, True])
        with pytest.raises(ValueError, match="mismatch"):
            unsupervised_loss(preds[:1], pls, desk_config())


class TestStopGradient:
    def test_pseudolabel_blocks_gradient_to_weak_branch(self):
        rng = np.random.default_rng(14)
        weak_logits = Tensor(rng.standard_normal((1, 3, 6, 6)), requires_grad=True)
        weak_probs = ad.softmax(weak_logits, axis=1)
        pm = ProbMap(weak_probs.value[0].transpose(1, 2, 0))
        pl = make_pseudolabel(pm, tau=0.0)  # constant mask: no graph link

        strong = Tensor(
            random_probmap_array(rng, 6, 6, 3).transpose(2, 0, 1)[None].copy(),
            requires_grad=True)
        target = one_hot(pl.label_mask.labels[None], 3)
        loss = dice_loss_graph(strong, target, 1e-6).sum() \
            + boundary_loss_graph(strong, target, 1, 2).sum()
        loss.backward()
        assert strong.grad is not None and np.abs(strong.grad).sum() > 0
        assert weak_logits.grad is None


class TestTotalLoss:
    def test_lambda_zero_reduces_to_supervised(self):
        assert total_loss(0.37, 0.9, 0.0) == 0.37

    def test_unit_weight(self):
        assert total_loss(0.3, 0.2, 1.0) == pytest.approx(0.5)

    def test_double_weight(self):
        assert total_loss(0.0, 0.1, 2.0) == pytest.approx(0.2)
