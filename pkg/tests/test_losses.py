import math

import pytest
import torch
from hypothesis import assume, given, settings
from hypothesis import strategies as st

import checks
import oracles
from cgdd.errors import DimensionError, NumericError, UndefinedMetricError
from cgdd.losses import (
    LossWeights,
    MetricsReport,
    PresetLabelBatch,
    attention_energy,
    attention_transfer_loss,
    class_matching_loss,
    discrepancy_estimation_loss,
    distillation_loss,
    generator_loss,
    ground_truth_loss,
    information_entropy_loss,
    one_hot_loss,
    relative_accuracy,
    unsupervised_loss,
)

LN10 = math.log(10)

# frozen from tests/oracles.py (mpmath, 50 digits)
CE_2_0_0_LABEL0 = 0.23954476622188450
CE_2_0_0_LABEL1 = 2.2395447662218845
ONE_HOT_3_1_0 = 0.16984601955628565
ENTROPY_TWO_ROWS = -0.34657359027997265
US_ZERO_LOGITS_LAMBDA1 = 2.0723265836946411


def t(x):
    return torch.tensor(x, dtype=torch.float64)


class TestClassMatching:
    def test_uniform_logits(self):
        assert class_matching_loss(torch.zeros(4, 10, dtype=torch.float64), torch.tensor([0, 3, 7, 9])).item() == pytest.approx(LN10, abs=1e-12)

    def test_single_sample(self):
        assert class_matching_loss(t([[2.0, 0.0, 0.0]]), torch.tensor([0])).item() == pytest.approx(CE_2_0_0_LABEL0, abs=1e-12)

    def test_confident_limit(self):
        logits = t([[60.0, 0.0, 0.0]])
        assert class_matching_loss(logits, torch.tensor([0])).item() < 1e-20

    def test_accepts_preset_label_batch(self):
        labels = PresetLabelBatch(torch.tensor([1]), torch.full((3,), 1 / 3, dtype=torch.float64))
        assert class_matching_loss(t([[2.0, 0.0, 0.0]]), labels).item() == pytest.approx(CE_2_0_0_LABEL1, abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            class_matching_loss(torch.zeros(3, 10), torch.tensor([0, 1]))
        with pytest.raises(DimensionError):
            class_matching_loss(torch.zeros(2, 10), torch.tensor([0, 10]))

    def test_non_finite(self):
        with pytest.raises(NumericError):
            class_matching_loss(t([[float("nan"), 0.0]]), torch.tensor([0]))


class TestInformationEntropy:
    def test_uniform_minimum(self):
        assert information_entropy_loss(torch.zeros(5, 10, dtype=torch.float64)).item() == pytest.approx(-LN10 / 10, abs=1e-12)

    def test_degenerate_is_zero(self):
        assert information_entropy_loss(t([[1e4, 0.0], [1e4, 0.0]])).item() == 0.0

    def test_two_rows(self):
        logits = t([[math.log(9), 0.0], [0.0, math.log(9)]])
        assert information_entropy_loss(logits).item() == pytest.approx(ENTROPY_TWO_ROWS, abs=1e-12)

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.floats(-8, 8), min_size=2, max_size=12), st.integers(1, 6))
    def test_bounds(self, row, n):
        c = len(row)
        logits = t([row] * n) + torch.linspace(0, 1, n, dtype=torch.float64)[:, None]
        value = information_entropy_loss(logits).item()
        assert -math.log(c) / c - 1e-12 <= value <= 0.0


class TestOneHot:
    def test_single(self):
        assert one_hot_loss(t([[3.0, 1.0, 0.0]])).item() == pytest.approx(ONE_HOT_3_1_0, abs=1e-12)

    def test_tie_breaks_to_class_zero(self):
        assert one_hot_loss(torch.zeros(1, 10, dtype=torch.float64)).item() == pytest.approx(LN10, abs=1e-12)

    def test_confident_limit(self):
        assert one_hot_loss(t([[0.0, 80.0, 0.0]])).item() < 1e-30

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(-5, 5), min_size=2, max_size=10), st.floats(-50, 50))
    def test_shift_invariance(self, row, shift):
        a = t([row])
        top2 = a.topk(2, dim=1).values[0]
        assume(float(top2[0] - top2[1]) > 1e-6)
        assert one_hot_loss(a + shift).item() == pytest.approx(one_hot_loss(a).item(), abs=1e-9)
        assert torch.equal((a + shift).argmax(1), a.argmax(1))


class TestUnsupervised:
    def test_lambda_zero_is_one_hot(self):
        x = torch.randn(6, 10, dtype=torch.float64)
        assert unsupervised_loss(x, LossWeights(lambda_ie=0)).item() == one_hot_loss(x).item()

    def test_zero_logits(self):
        value = unsupervised_loss(torch.zeros(3, 10, dtype=torch.float64), LossWeights(lambda_ie=1))
        assert value.item() == pytest.approx(US_ZERO_LOGITS_LAMBDA1, abs=1e-12)

    def test_linear_in_lambda(self):
        x = torch.randn(6, 10, dtype=torch.float64)
        diff = unsupervised_loss(x, LossWeights(lambda_ie=5)) - unsupervised_loss(x, LossWeights(lambda_ie=0))
        assert diff.item() == pytest.approx(5 * information_entropy_loss(x).item(), abs=1e-12)


class TestDiscrepancy:
    def test_identity(self):
        x = torch.randn(4, 10)
        assert discrepancy_estimation_loss(x, x.clone()).item() == 0.0

    def test_single(self):
        assert discrepancy_estimation_loss(t([[1.0, 2.0]]), t([[0.0, 0.0]])).item() == 3.0

    def test_batch_mean(self):
        value = discrepancy_estimation_loss(t([[1.0, 2.0], [0.5, 0.5]]), t([[0.0, 0.0], [0.0, 0.0]]))
        assert value.item() == 2.0

    def test_symmetric(self):
        a, b = torch.randn(5, 7), torch.randn(5, 7)
        assert discrepancy_estimation_loss(a, b).item() == discrepancy_estimation_loss(b, a).item()

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            discrepancy_estimation_loss(torch.zeros(2, 10), torch.zeros(2, 9))


class TestComposites:
    def setup_method(self):
        g = torch.Generator().manual_seed(0)
        self.t = torch.randn(8, 10, generator=g, dtype=torch.float64) * 3
        self.s = torch.randn(8, 10, generator=g, dtype=torch.float64) * 3
        self.y = torch.randint(0, 10, (8,), generator=g)
        self.maps_s = [torch.randn(8, 3, 6, 6, generator=g, dtype=torch.float64)]
        self.maps_t = [torch.randn(8, 5, 6, 6, generator=g, dtype=torch.float64)]

    def test_generator_adversarial_only(self):
        w = LossWeights(lambda_US=0, lambda_CM=0)
        assert generator_loss(self.t, self.s, self.y, w).item() == -discrepancy_estimation_loss(self.t, self.s).item()

    def test_generator_algebraic_sum(self):
        w = LossWeights(lambda_ie=1, lambda_US=1, lambda_CM=1, lambda_bn=1)
        expected = (
            -oracles.l1_discrepancy(self.t.tolist(), self.s.tolist())
            + oracles.one_hot(self.t.tolist())
            + oracles.information_entropy(self.t.tolist())
            + oracles.cross_entropy(self.t.tolist(), self.y.tolist())
            + 0.25
        )
        assert generator_loss(self.t, self.s, self.y, w, bn_penalty=0.25).item() == pytest.approx(float(expected), abs=1e-9)

    def test_generator_identity_pair(self):
        w = LossWeights()
        expected = w.lambda_US * unsupervised_loss(self.t, w) + w.lambda_CM * class_matching_loss(self.t, self.y)
        assert generator_loss(self.t, self.t.clone(), self.y, w).item() == pytest.approx(expected.item(), abs=1e-12)

    def test_ground_truth_matches_class_matching(self):
        assert ground_truth_loss(self.t, self.y).item() == class_matching_loss(self.t, self.y).item()
        assert ground_truth_loss(torch.zeros(2, 10), torch.tensor([1, 2])).item() == pytest.approx(LN10, abs=1e-6)
        assert ground_truth_loss(t([[2.0, 0.0, 0.0]]), torch.tensor([1])).item() == pytest.approx(CE_2_0_0_LABEL1, abs=1e-12)

    def test_distillation_baseline(self):
        w = LossWeights(lambda_GT=0, lambda_AT=0)
        value = distillation_loss(self.t, self.s, self.y, self.maps_s, self.maps_t, w)
        assert value.item() == discrepancy_estimation_loss(self.t, self.s).item()

    def test_distillation_identity(self):
        w = LossWeights(lambda_GT=0)
        assert distillation_loss(self.t, self.t.clone(), self.y, self.maps_t, self.maps_t, w).item() == 0.0

    def test_distillation_algebraic_sum(self):
        w = LossWeights(lambda_GT=1, lambda_AT=1)
        at = sum(
            oracles.attention_distance(s.tolist(), tt.tolist())
            for s, tt in zip(self.maps_s[0], self.maps_t[0])
        ) / 8
        expected = (
            oracles.l1_discrepancy(self.t.tolist(), self.s.tolist())
            + oracles.cross_entropy(self.s.tolist(), self.y.tolist())
            + at
        )
        value = distillation_loss(self.t, self.s, self.y, self.maps_s, self.maps_t, w)
        assert value.item() == pytest.approx(float(expected), abs=1e-9)

    @pytest.mark.parametrize("name", ["lambda_US", "lambda_CM", "lambda_bn"])
    def test_generator_affine_in_each_lambda(self, name):
        base = LossWeights()
        f = lambda lam: generator_loss(self.t, self.s, self.y, base.replace(**{name: lam}), 0.3).item()
        assert f(2.0) - f(1.0) == pytest.approx(f(1.0) - f(0.0), abs=1e-9)

    @pytest.mark.parametrize("name", ["lambda_GT", "lambda_AT"])
    def test_distillation_affine_in_each_lambda(self, name):
        base = LossWeights()
        f = lambda lam: distillation_loss(self.t, self.s, self.y, self.maps_s, self.maps_t, base.replace(**{name: lam})).item()
        assert f(3.0) - f(1.5) == pytest.approx(f(1.5) - f(0.0), abs=1e-9)

    def test_adversarial_sign_structure(self):
        # d L_G / d L_DE = -1 and d L_KD / d L_DE = +1
        w = LossWeights()
        shift = t([[0.5] + [0.0] * 9] + [[0.0] * 10] * 7)
        s2 = self.s - shift * torch.sign(self.t - self.s)
        d_de = (discrepancy_estimation_loss(self.t, s2) - discrepancy_estimation_loss(self.t, self.s)).item()
        d_g = generator_loss(self.t, s2, self.y, w).item() - generator_loss(self.t, self.s, self.y, w).item()
        w0 = w.replace(lambda_AT=0)
        d_kd = (distillation_loss(self.t, s2, self.y, [], [], w0.replace(lambda_GT=0))
                - distillation_loss(self.t, self.s, self.y, [], [], w0.replace(lambda_GT=0))).item()
        assert d_de == pytest.approx(0.5 / 8, abs=1e-12)
        assert d_g == pytest.approx(-d_de, abs=1e-12)
        assert d_kd == pytest.approx(d_de, abs=1e-12)


class TestAttention:
    def test_energy_single_channel(self):
        assert torch.equal(attention_energy(t([[[1, 2], [3, 4]]])), t([[1, 4], [9, 16]]))

    def test_energy_two_channels(self):
        assert torch.equal(attention_energy(torch.ones(2, 2, 2)), torch.full((2, 2), 2.0))

    def test_energy_zero(self):
        assert torch.equal(attention_energy(torch.zeros(3, 4, 4)), torch.zeros(4, 4))

    def test_identical_maps(self):
        maps = [torch.randn(4, 6, 5, 5), torch.randn(4, 2, 3, 3)]
        assert attention_transfer_loss(maps, [m.clone() for m in maps]).item() == 0.0

    def test_scale_invariance(self):
        s, tt = [torch.rand(3, 4, 4, dtype=torch.float64)], [torch.rand(3, 4, 4, dtype=torch.float64)]
        a = attention_transfer_loss(s, tt).item()
        assert attention_transfer_loss([2.5 * s[0]], tt).item() == pytest.approx(a, abs=1e-12)

    def test_orthogonal_vectors(self):
        s = [t([[[1.0, 0.0], [0.0, 0.0]]])]
        tt = [t([[[0.0, 1.0], [0.0, 0.0]]])]
        assert attention_transfer_loss(s, tt).item() == pytest.approx(math.sqrt(2), abs=1e-12)

    def test_per_pair_bound(self):
        g = torch.Generator().manual_seed(3)
        s = [torch.randn(8, 3, 5, 5, generator=g) for _ in range(3)]
        tt = [torch.randn(8, 4, 5, 5, generator=g) for _ in range(3)]
        assert 0.0 <= attention_transfer_loss(s, tt).item() <= 2.0 * 3

    def test_zero_map_is_guarded(self):
        value = attention_transfer_loss([torch.zeros(2, 3, 3)], [torch.ones(2, 3, 3)])
        assert value.item() == pytest.approx(1.0, abs=1e-12)

    def test_mismatched_grids_are_pooled(self):
        s = [torch.ones(1, 3, 8, 8)]
        tt = [torch.ones(1, 5, 4, 4)]
        assert attention_transfer_loss(s, tt).item() == pytest.approx(0.0, abs=1e-7)

    def test_mismatched_counts(self):
        with pytest.raises(DimensionError):
            attention_transfer_loss([torch.ones(1, 2, 2)], [])
        with pytest.raises(DimensionError):
            attention_transfer_loss([torch.ones(2, 1, 2, 2)], [torch.ones(3, 1, 2, 2)])


class TestRelativeAccuracy:
    def test_table_values(self):
        assert round(relative_accuracy(0.9897, 0.9862), 2) == 99.65
        assert round(relative_accuracy(0.9554, 0.9519), 2) == 99.63
        assert relative_accuracy(0.7, 0.7) == 100.0

    def test_zero_teacher(self):
        with pytest.raises(UndefinedMetricError):
            relative_accuracy(0.0, 0.5)

    def test_report(self):
        r = MetricsReport(0.9897, 0.9862)
        assert r.to_dict()["relative_accuracy"] == pytest.approx(100 * 0.9862 / 0.9897)


def test_weights_reject_negative():
    with pytest.raises(ValueError):
        LossWeights(lambda_AT=-1)


class TestGradients:
    @pytest.mark.parametrize("case", sorted(checks.GRADIENT_CASES))
    def test_matches_central_differences(self, case):
        assert checks.worst_gradient_error(case, instances=10) < checks.REL_TOL

    def test_discrepancy_gradient_is_sign_over_n(self):
        t_, s_ = torch.zeros(4, 3, dtype=torch.float64), t([[1.0, -1.0, 2.0]] * 4).requires_grad_(True)
        (grad,) = torch.autograd.grad(discrepancy_estimation_loss(t_, s_), s_)
        assert torch.equal(grad, torch.sign(s_.detach()) / 4)


class TestMaeVersusMse:
    @pytest.mark.parametrize("gap", [1.0, 1e-1, 1e-2, 1e-3])
    def test_mae_gradient_constant(self, gap):
        mae, _ = checks.mae_mse_gradient_ratio(gap)
        assert mae == pytest.approx(1 / 8, abs=1e-15)

    def test_mse_gradient_decays_linearly(self):
        _, a = checks.mae_mse_gradient_ratio(1e-2)
        _, b = checks.mae_mse_gradient_ratio(1e-3)
        assert a / b == pytest.approx(10, rel=1e-6)

    def test_ratio_at_small_gap(self):
        mae, mse = checks.mae_mse_gradient_ratio(1e-3)
        assert mae / mse >= 100


@pytest.mark.parametrize("seed", range(20))
def test_attention_scale_invariance(seed):
    assert checks.attention_scale_error(seed) < 1e-7
