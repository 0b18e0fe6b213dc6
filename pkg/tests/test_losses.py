import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from iosrlab import autodiff as ad
from iosrlab import etf, losses


def bank_with_active(d=4, K=4, active=2, seed=0):
    bank = etf.build_bank(d, K, seed=seed)
    etf.activate(bank, list(range(active)))
    return bank


def tensor(x):
    return ad.constant(np.asarray(x, dtype=np.float64))


class TestLossWeights:
    def test_defaults_valid(self):
        w = losses.LossWeights()
        assert w.lambda_vii == 0.01
        assert w.mix == 0.5

    def test_onbr_shift_range_enforced(self):
        with pytest.raises(ValueError):
            losses.LossWeights(onbr_shift=2.0 / math.pi)
        with pytest.raises(ValueError):
            losses.LossWeights(onbr_shift=-0.1)

    def test_mix_open_interval(self):
        with pytest.raises(ValueError):
            losses.LossWeights(mix=0.0)
        with pytest.raises(ValueError):
            losses.LossWeights(mix=1.0)


class TestCosineLogits:
    def test_feature_on_prototype_unit_logit(self):
        bank = bank_with_active()
        feat = tensor(bank.matrix[:, 0][None, :])
        logits, mask = losses.cosine_logits(feat, bank, eta=1.0)
        assert logits.data[0, 0] == pytest.approx(1.0, abs=1e-12)
        assert mask.sum() == 2

    def test_equidistant_feature_uniform_softmax(self):
        bank = bank_with_active(d=3, K=3, active=3)
        cols = [bank.assignment[i] for i in range(3)]
        centroid = bank.matrix[:, cols].sum(axis=1)
        # centroid of a full frame vanishes; nudge along the first prototype's
        # orthogonal complement is unnecessary -- use pairwise symmetric point
        feat = tensor((bank.matrix[:, 0] + bank.matrix[:, 1])[None, :])
        logits, mask = losses.cosine_logits(feat, bank, eta=1.0)
        probs = ad.masked_softmax(logits, mask)
        assert probs.data[0, bank.assignment[0]] == pytest.approx(probs.data[0, bank.assignment[1]], abs=1e-12)
        assert centroid == pytest.approx([0.0, 0.0, 0.0], abs=1e-12)

    def test_two_active_of_three_closed_form(self):
        # feature = first prototype, active {0, 1}: softmax_0 = e / (e + e^-0.5)
        bank = bank_with_active(d=3, K=3, active=2)
        feat = tensor(bank.matrix[:, bank.assignment[0]][None, :])
        logits, mask = losses.cosine_logits(feat, bank, eta=1.0)
        probs = ad.masked_softmax(logits, mask)
        expected = math.e / (math.e + math.exp(-0.5))
        assert probs.data[0, bank.assignment[0]] == pytest.approx(expected, abs=1e-10)
        assert probs.data[0, bank.assignment[0]] == pytest.approx(0.8176, abs=1e-4)

    def test_zero_norm_feature_identified(self):
        bank = bank_with_active()
        with pytest.raises(ad.DomainError) as exc:
            losses.cosine_logits(tensor(np.zeros((2, 4))), bank, eta=1.0)
        assert "instance 0" in str(exc.value)


class TestActiveCrossEntropy:
    def test_perfect_probability_near_zero_loss(self):
        bank = bank_with_active(d=8, K=8, active=2)
        feat = tensor(bank.matrix[:, 0][None, :])
        loss = losses.active_cross_entropy(feat, [0], bank, eta=50.0)
        assert float(loss.data) < 1e-6

    def test_uniform_two_class_is_ln2(self):
        bank = bank_with_active(d=4, K=4, active=2)
        # orthogonal complement of both prototypes: equal cosines
        m0, m1 = bank.matrix[:, 0], bank.matrix[:, 1]
        feat = tensor((m0 + m1)[None, :])
        loss = losses.active_cross_entropy(feat, [0], bank, eta=3.0)
        assert float(loss.data) == pytest.approx(math.log(2), abs=1e-10)

    def test_three_class_asymmetric_matches_scalar_oracle(self):
        bank = bank_with_active(d=5, K=5, active=3)
        rng = np.random.default_rng(3)
        feats = rng.standard_normal((4, 5))
        labels = [0, 1, 2, 0]
        eta = 4.0
        loss = losses.active_cross_entropy(tensor(feats), labels, bank, eta=eta)
        # independent arithmetic: plain numpy, no tape
        z = feats / np.linalg.norm(feats, axis=1, keepdims=True)
        cols = [bank.assignment[l] for l in labels]
        active_cols = [bank.assignment[l] for l in bank.active_labels()]
        logits = eta * (z @ bank.matrix[:, active_cols])
        expected = 0.0
        for i, c in enumerate(cols):
            row = logits[i]
            expected += -(row[active_cols.index(c)] - np.log(np.exp(row).sum()))
        expected /= len(labels)
        assert float(loss.data) == pytest.approx(expected, abs=1e-10)

    def test_label_on_inactive_prototype_rejected(self):
        bank = bank_with_active(d=4, K=4, active=2)
        with pytest.raises(KeyError):
            losses.active_cross_entropy(tensor(np.ones((1, 4))), [3], bank, eta=1.0)

    def test_inactive_columns_do_not_change_loss(self):
        # same active prototype vectors, more spare columns: loss unchanged
        bank = bank_with_active(d=8, K=8, active=3, seed=5)
        cols = [bank.assignment[l] for l in bank.active_labels()]
        truncated = etf.PrototypeBank(
            matrix=bank.matrix[:, cols],
            d=bank.d,
            K=3,
            seed=bank.seed,
            active=np.ones(3, dtype=bool),
            assignment={l: i for i, l in enumerate(bank.active_labels())},
        )
        rng = np.random.default_rng(11)
        feats = rng.standard_normal((6, 8))
        labels = [0, 1, 2, 1, 0, 2]
        full = losses.active_cross_entropy(tensor(feats), labels, bank, eta=7.0)
        trunc = losses.active_cross_entropy(tensor(feats), labels, truncated, eta=7.0)
        assert abs(float(full.data) - float(trunc.data)) < 1e-12

    def test_softmax_all_mode_is_sensitive_to_spare_columns(self):
        bank = bank_with_active(d=8, K=8, active=3, seed=5)
        rng = np.random.default_rng(11)
        feats = rng.standard_normal((6, 8))
        labels = [0, 1, 2, 1, 0, 2]
        act = losses.active_cross_entropy(tensor(feats), labels, bank, eta=7.0, mode="active_only")
        full = losses.active_cross_entropy(tensor(feats), labels, bank, eta=7.0, mode="all")
        assert abs(float(full.data) - float(act.data)) > 1e-6


class TestSynthesis:
    def test_two_class_midpoint(self):
        out = losses.synthesize_virtual([[1.0, 0.0], [0.0, 1.0]], [0, 1], mix=0.5)
        virtual, labels = out
        np.testing.assert_allclose(virtual[0], [0.5, 0.5])
        np.testing.assert_allclose(virtual[1], [0.5, 0.5])
        np.testing.assert_array_equal(labels, [0, 1])

    def test_three_class_blend(self):
        x = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
        virtual, _ = losses.synthesize_virtual(x, [0, 1, 2], mix=0.5)
        np.testing.assert_allclose(virtual[0], [0.75, 0.5])

    def test_mix_near_one_approaches_identity(self):
        x = np.array([[1.0, 0.0], [0.0, 1.0]])
        virtual, _ = losses.synthesize_virtual(x, [0, 1], mix=1.0 - 1e-12)
        np.testing.assert_allclose(virtual, x, atol=1e-10)

    def test_single_class_batch_skipped(self):
        assert losses.synthesize_virtual([[1.0, 0.0], [2.0, 0.0]], [0, 0], mix=0.5) is None

    def test_class_means_used_not_instances(self):
        # two instances of class 1 average before blending
        x = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 3.0]])
        virtual, _ = losses.synthesize_virtual(x, [0, 1, 1], mix=0.5)
        np.testing.assert_allclose(virtual[0], 0.5 * x[0] + 0.5 * np.array([0.0, 2.0]))


class TestPnbr:
    def test_zero_bound_is_identity(self):
        cos = tensor([0.3, -0.8, 1.0])
        out = losses.pnbr(cos, tensor(0.0))
        np.testing.assert_allclose(out.data, cos.data, atol=1e-15)

    def test_fixed_point_at_one(self):
        for a in (0.1, 0.5, 0.9):
            assert float(losses.pnbr(tensor(1.0), tensor(a)).data) == pytest.approx(1.0, abs=1e-12)

    def test_half_half_is_zero(self):
        assert float(losses.pnbr(tensor(0.5), tensor(0.5)).data) == pytest.approx(0.0, abs=1e-15)

    @given(
        st.floats(min_value=0.01, max_value=0.99),
        st.floats(min_value=-1.0, max_value=0.999),
    )
    @settings(max_examples=60, deadline=None)
    def test_strictly_subtractive_below_one(self, a, cos):
        out = float(losses.pnbr(tensor(cos), tensor(a)).data)
        assert out < cos

    @given(st.floats(min_value=0.01, max_value=0.99))
    @settings(max_examples=30, deadline=None)
    def test_strictly_increasing_preserves_ranking(self, a):
        cos = np.linspace(-1, 1, 9)
        out = losses.pnbr(tensor(cos), tensor(a)).data
        assert (np.diff(out) > 0).all()


class TestOnbr:
    def _matrix(self):
        return tensor([[0.9, 0.1], [0.4, 0.6]])

    def test_zero_shift_identity(self):
        out = losses.onbr(self._matrix(), 0.0, [0], [0])
        np.testing.assert_allclose(out.data, self._matrix().data)

    def test_unit_cosine_fixed_point(self):
        out = losses.onbr(tensor([[1.0]]), 0.4, [0], [0])
        assert float(out.data[0, 0]) == pytest.approx(1.0, abs=1e-12)

    def test_shift_half_value(self):
        out = losses.onbr(tensor([[0.9]]), 0.5, [0], [0])
        s = 0.5 * math.pi / 2
        assert float(out.data[0, 0]) == pytest.approx((0.9 - s) / (1 - s), abs=1e-12)
        assert float(out.data[0, 0]) == pytest.approx(0.5340, abs=1e-4)

    def test_untouched_entries(self):
        out = losses.onbr(self._matrix(), 0.5, [0], [0])
        assert out.data[0, 1] == pytest.approx(0.1)
        np.testing.assert_allclose(out.data[1], [0.4, 0.6])

    def test_angular_mode_matches_trig(self):
        theta = math.acos(0.3)
        s = 0.2 * math.pi / 2
        out = losses.onbr(tensor([[0.3]]), 0.2, [0], [0], mode="angular")
        assert float(out.data[0, 0]) == pytest.approx(math.cos(theta + s), abs=1e-10)

    def test_reduces_old_class_similarity(self):
        out = losses.onbr(tensor([[0.9]]), 0.3, [0], [0])
        assert float(out.data[0, 0]) < 0.9

    @given(st.floats(min_value=0.01, max_value=0.6))
    @settings(max_examples=30, deadline=None)
    def test_monotone_in_cosine(self, shift):
        cos = np.linspace(-1, 1, 7)[None, :]
        out = losses.onbr(tensor(cos), shift, [0] * 7, list(range(7)))
        assert (np.diff(out.data[0]) > 0).all()


class TestSigmoidProb:
    def test_unit_cosine(self):
        out = losses.sigmoid_prob(tensor(1.0), eta=1.0)
        assert float(out.data) == pytest.approx(0.7311, abs=1e-4)

    def test_zero_cosine(self):
        assert float(losses.sigmoid_prob(tensor(0.0), eta=1.0).data) == 0.5

    def test_rectified_cosine(self):
        out = losses.sigmoid_prob(tensor(0.8), eta=1.0, bound=tensor(0.5))
        assert float(out.data) == pytest.approx(1.0 / (1.0 + math.exp(-0.6)), abs=1e-12)
        assert float(out.data) == pytest.approx(0.6457, abs=1e-4)


class TestVirtualCrossEntropy:
    def _protos(self, d=4):
        rng = np.random.default_rng(4)
        protos = {}
        for lbl in (0, 1, 2):
            v = rng.standard_normal(d)
            protos[lbl] = tensor(v / np.linalg.norm(v))
        return protos

    def test_aligned_feature_low_loss(self):
        protos = self._protos()
        feat = protos[1].data[None, :]
        loss = losses.virtual_cross_entropy(tensor(feat), [1], protos, eta=60.0)
        assert float(loss.data) < 0.05

    def test_symmetric_two_class_ln2(self):
        protos = {0: tensor([1.0, 0.0]), 1: tensor([0.0, 1.0])}
        feat = tensor([[1.0, 1.0]])
        loss = losses.virtual_cross_entropy(feat, [0], protos, eta=5.0)
        assert float(loss.data) == pytest.approx(math.log(2), abs=1e-12)

    def test_missing_prototype_rejected(self):
        protos = {0: tensor([1.0, 0.0])}
        with pytest.raises(KeyError):
            losses.virtual_cross_entropy(tensor([[1.0, 0.0]]), [5], protos, eta=1.0)

    def test_random_three_class_matches_scalar_oracle(self):
        protos = self._protos()
        rng = np.random.default_rng(9)
        feats = rng.standard_normal((5, 4))
        labels = [0, 2, 1, 0, 2]
        eta = 3.0
        loss = losses.virtual_cross_entropy(tensor(feats), labels, protos, eta=eta)
        z = feats / np.linalg.norm(feats, axis=1, keepdims=True)
        order = sorted(protos)
        pm = np.stack([protos[l].data / np.linalg.norm(protos[l].data) for l in order])
        logits = eta * (z @ pm.T)
        expected = np.mean(
            [-(logits[i, order.index(l)] - np.log(np.exp(logits[i]).sum())) for i, l in enumerate(labels)]
        )
        assert float(loss.data) == pytest.approx(expected, abs=1e-10)


class TestInteractionLoss:
    def test_single_virtual_instance_value(self):
        # feature equals the only virtual prototype, eta=1: -log sigmoid(1)
        proto = {0: tensor([1.0, 0.0, 0.0])}
        feats = tensor([[1.0, 0.0, 0.0]])
        loss, sat = losses.interaction_loss(None, [], feats, [0], proto, eta=1.0)
        assert float(loss.data) == pytest.approx(-math.log(1 / (1 + math.exp(-1))), abs=1e-12)
        assert float(loss.data) == pytest.approx(0.3133, abs=1e-4)
        assert sat == 0

    def test_single_intrinsic_instance_value(self):
        # cosine 0 to its own virtual prototype: -log(1 - 0.5) = ln 2
        proto = {0: tensor([1.0, 0.0])}
        feats = tensor([[0.0, 1.0]])
        loss, _ = losses.interaction_loss(feats, [0], None, [], proto, eta=1.0)
        assert float(loss.data) == pytest.approx(math.log(2), abs=1e-12)

    def test_mean_over_union_of_both_sides(self):
        proto = {0: tensor([1.0, 0.0]), 1: tensor([0.0, 1.0])}
        fi = tensor([[0.0, 1.0]])
        fv = tensor([[1.0, 0.0]])
        loss, _ = losses.interaction_loss(fi, [1], fv, [0], proto, eta=1.0)
        sigma = lambda x: 1 / (1 + math.exp(-x))
        expected = (
            (-math.log(sigma(1.0)) - math.log(1 - sigma(0.0)))  # virtual: pull own, push other
            + (-math.log(1 - sigma(1.0)))  # intrinsic: pushed from own virtual prototype
        ) / 2.0
        assert float(loss.data) == pytest.approx(expected, abs=1e-12)

    def test_triple_separation_gradient_signs(self):
        # finite differences on the three cosine slots
        def build(p):
            sigma_own = losses.sigmoid_prob(p["cos_v_own"], eta=1.0)
            sigma_other = losses.sigmoid_prob(p["cos_v_other"], eta=1.0)
            sigma_intr = losses.sigmoid_prob(p["cos_t_own"], eta=1.0)
            term_v = ad.neg(ad.log(sigma_own)) - ad.log(ad.sub(1.0, sigma_other))
            term_t = ad.neg(ad.log(ad.sub(1.0, sigma_intr)))
            return ad.mul(ad.add(term_v, term_t), 0.5)

        point = {"cos_v_own": np.asarray(0.4), "cos_v_other": np.asarray(-0.1), "cos_t_own": np.asarray(0.2)}
        tape = ad.Tape()
        params = {k: tape.parameter(v) for k, v in point.items()}
        tape.backward(build(params))
        assert float(params["cos_v_own"].grad) < 0
        assert float(params["cos_v_other"].grad) > 0
        assert float(params["cos_t_own"].grad) > 0
        report = ad.finite_diff_check(build, point)
        assert report.max_rel_error < 1e-4

    def test_saturation_counted_and_clamped(self):
        proto = {0: tensor([1.0, 0.0])}
        feats = tensor([[1.0, 0.0]])
        loss, sat = losses.interaction_loss(feats, [0], None, [], proto, eta=5000.0)
        assert sat == 1
        assert np.isfinite(loss.data)

    def test_pnbr_increases_target_gradient_magnitude(self):
        # |d(-log sigma(eta f(cos, a)))/d cos| at cos = 0.5 grows with a
        def grad_at(a):
            def f(p):
                bound = None if a is None else tensor(a)
                return ad.neg(ad.log(losses.sigmoid_prob(p["cos"], eta=1.0, bound=bound)))

            tape = ad.Tape()
            params = {"cos": tape.parameter(np.asarray(0.5))}
            tape.backward(f(params))
            analytic = abs(float(params["cos"].grad))
            report = ad.finite_diff_check(f, {"cos": np.asarray(0.5)})
            assert report.max_rel_error < 1e-4
            return analytic

        g0, g02, g05 = grad_at(None), grad_at(0.2), grad_at(0.5)
        assert g02 > g0
        assert g05 > g02


class TestDistillation:
    def test_identical_directions_zero(self):
        feats = np.random.default_rng(0).standard_normal((4, 3))
        loss = losses.alignment_distillation(tensor(feats), 2.0 * feats)
        assert float(loss.data) == pytest.approx(0.0, abs=1e-12)

    def test_orthogonal_directions_one(self):
        live = tensor([[1.0, 0.0]])
        loss = losses.alignment_distillation(live, np.array([[0.0, 1.0]]))
        assert float(loss.data) == pytest.approx(1.0)

    def test_antipodal_directions_two(self):
        live = tensor([[1.0, 0.0]])
        loss = losses.alignment_distillation(live, np.array([[-1.0, 0.0]]))
        assert float(loss.data) == pytest.approx(2.0)

    def test_no_gradient_reaches_snapshot(self):
        tape = ad.Tape()
        live = tape.parameter(np.random.default_rng(1).standard_normal((3, 2)))
        snap = np.random.default_rng(2).standard_normal((3, 2))
        tape.backward(losses.alignment_distillation(live, snap))
        assert live.grad is not None
        assert len(tape.parameters) == 1


class TestCombine:
    def test_ce_only(self):
        w = losses.LossWeights()
        total, br = losses.combine(w, task_index=1, new_class_count=2, old_class_count=0, l_ce=tensor(0.7))
        assert float(total.data) == pytest.approx(0.7)
        assert br.l_v == 0.0 and br.l_vii == 0.0 and br.l_dis == 0.0
        assert br.identity_gap() < 1e-12

    def test_weighted_sum_identity(self):
        w = losses.LossWeights(use_virtual_ce=True, use_vii=True, use_distill=True, lambda_dis_base=2.0)
        total, br = losses.combine(
            w,
            task_index=3,
            new_class_count=4,
            old_class_count=4,
            l_ce=tensor(0.5),
            l_v=tensor(0.3),
            l_vii=tensor(2.0),
            l_dis=tensor(0.25),
        )
        expected = 0.5 + 0.3 + 0.01 * 2.0 + 2.0 * math.sqrt(4 / 4) * 0.25
        assert float(total.data) == pytest.approx(expected, abs=1e-12)
        assert br.identity_gap() < 1e-10

    def test_first_task_distillation_weight_zero(self):
        w = losses.LossWeights(use_distill=True)
        total, br = losses.combine(
            w, task_index=1, new_class_count=2, old_class_count=0, l_ce=tensor(0.5), l_dis=tensor(1.0)
        )
        assert br.lambda_dis == 0.0
        assert float(total.data) == pytest.approx(0.5)

    def test_adaptive_distillation_weight(self):
        w = losses.LossWeights(use_distill=True, lambda_dis_base=5.0)
        _, br = losses.combine(
            w, task_index=2, new_class_count=2, old_class_count=8, l_ce=tensor(0.1), l_dis=tensor(1.0)
        )
        assert br.lambda_dis == pytest.approx(5.0 * math.sqrt(2 / 8))

    def test_non_finite_component_aborts_with_breakdown(self):
        w = losses.LossWeights()
        with pytest.raises(losses.LossComputationError) as exc:
            losses.combine(
                w, task_index=1, new_class_count=2, old_class_count=0, l_ce=tensor(float("nan"))
            )
        assert exc.value.breakdown is not None


class TestGradientFidelity:
    """Finite-difference certification of each loss at random micro-points."""

    def _bank(self):
        return bank_with_active(d=4, K=4, active=3, seed=2)

    def test_active_ce_gradients(self):
        bank = self._bank()
        labels = [0, 1, 2]

        def f(p):
            return losses.active_cross_entropy(p["z"], labels, bank, p["eta"])

        rng = np.random.default_rng(0)
        for trial in range(3):
            point = {"z": rng.standard_normal((3, 4)), "eta": np.asarray(2.0 + trial)}
            report = ad.finite_diff_check(f, point)
            assert report.max_rel_error < 1e-4, report.per_param

    def test_onbr_rectified_ce_gradients(self):
        bank = self._bank()
        labels = [0, 1, 2]

        def f(p):
            return losses.active_cross_entropy(
                p["z"], labels, bank, p["eta"], onbr_shift=0.3, old_rows=[0, 2]
            )

        rng = np.random.default_rng(1)
        point = {"z": rng.standard_normal((3, 4)), "eta": np.asarray(3.0)}
        report = ad.finite_diff_check(f, point)
        assert report.max_rel_error < 1e-4

    def test_virtual_ce_gradients(self):
        labels = [0, 1]

        def f(p):
            protos = {0: p["v0"], 1: p["v1"]}
            return losses.virtual_cross_entropy(p["z"], labels, protos, p["eta"])

        rng = np.random.default_rng(2)
        point = {
            "z": rng.standard_normal((2, 4)),
            "v0": rng.standard_normal(4),
            "v1": rng.standard_normal(4),
            "eta": np.asarray(2.5),
        }
        report = ad.finite_diff_check(f, point)
        assert report.max_rel_error < 1e-4

    @pytest.mark.parametrize("with_pnbr", [False, True])
    def test_interaction_gradients(self, with_pnbr):
        def f(p):
            protos = {0: p["v0"], 1: p["v1"]}
            bound = losses.pnbr_bound(p["raw"]) if with_pnbr else None
            loss, _ = losses.interaction_loss(p["zt"], [0, 1], p["zv"], [1, 0], protos, p["eta"], bound)
            return loss

        rng = np.random.default_rng(3)
        point = {
            "zt": rng.standard_normal((2, 4)),
            "zv": rng.standard_normal((2, 4)),
            "v0": rng.standard_normal(4),
            "v1": rng.standard_normal(4),
            "eta": np.asarray(2.0),
            "raw": np.asarray(-1.0),
        }
        report = ad.finite_diff_check(f, point)
        assert report.max_rel_error < 1e-4

    def test_distillation_gradients(self):
        rng = np.random.default_rng(4)
        snap = rng.standard_normal((3, 4))

        def f(p):
            return losses.alignment_distillation(p["z"], snap)

        report = ad.finite_diff_check(f, {"z": rng.standard_normal((3, 4))})
        assert report.max_rel_error < 1e-4
