import numpy as np
import pytest
from hypothesis import given, strategies as st

from rbplab import autodiff as ad
from rbplab import rbp


def one_hot(i, k):
    v = np.zeros(k)
    v[i] = 1.0
    return v


class TestDrConfig:
    def test_unit_count_formulas(self):
        cfg = rbp.DrConfig(vocab_size=12, context_length=3)
        assert cfg.pair_count == 3
        assert cfg.drn_count == 36  # vocab size per pair, three pairs
        assert cfg.drp_count == 3
        assert cfg.drp_out_count == 3
        assert cfg.drn_out_count == 36

    def test_context_five_has_ten_pairs(self):
        cfg = rbp.DrConfig(vocab_size=12, context_length=5)
        assert cfg.drp_count == 10

    def test_pairs_are_lexicographic(self):
        assert rbp.token_pairs(3) == [(0, 1), (0, 2), (1, 2)]

    def test_invalid_sizes_rejected(self):
        with pytest.raises(ValueError):
            rbp.DrConfig(0, 3)


class TestDrnLayer:
    def test_identical_pair_is_all_zero(self):
        k = 12
        ctx = np.stack([one_hot(0, k), one_hot(0, k)])
        out = rbp.drn_layer(ctx)
        assert out.shape == (1, k)
        assert np.array_equal(out, np.zeros((1, k)))

    def test_distinct_pair_has_exactly_two_ones(self):
        k = 12
        ctx = np.stack([one_hot(0, k), one_hot(1, k)])
        out = rbp.drn_layer(ctx)
        assert out.sum() == 2.0
        assert set(np.unique(out)) == {0.0, 1.0}

    def test_triple_shape(self):
        k = 12
        ctx = np.stack([one_hot(0, k), one_hot(1, k), one_hot(0, k)])
        assert rbp.drn_layer(ctx).shape == (3, k)

    def test_non_one_hot_rejected(self):
        with pytest.raises(ValueError, match="one-hot"):
            rbp.drn_layer(np.array([[0.5, 0.5], [1.0, 0.0]]))
        with pytest.raises(ValueError, match="one-hot"):
            rbp.drn_layer(np.array([[1.0, 1.0], [1.0, 0.0]]))


class TestDrpAggregate:
    def test_aba_triple_signature(self):
        # hand enumeration: pairs (1,2),(1,3),(2,3) -> (2, 0, 2)
        k = 12
        ctx = np.stack([one_hot(0, k), one_hot(1, k), one_hot(0, k)])
        drp = rbp.drp_aggregate(rbp.drn_layer(ctx))
        assert np.array_equal(drp, [2.0, 0.0, 2.0])

    def test_aaa_triple_is_zero(self):
        k = 12
        ctx = np.stack([one_hot(4, k)] * 3)
        drp = rbp.drp_aggregate(rbp.drn_layer(ctx))
        assert np.array_equal(drp, [0.0, 0.0, 0.0])

    def test_matches_direct_feature_route(self):
        rng = np.random.default_rng(0)
        tokens = rng.integers(0, 7, size=(50, 4))
        via_drn = rbp.drn_features(tokens, 7)
        summed = via_drn.reshape(50, 6, 7).sum(axis=2)
        assert np.array_equal(summed, rbp.drp_features(tokens))

    def test_drp_sum_matrix_route(self):
        rng = np.random.default_rng(1)
        tokens = rng.integers(0, 5, size=(20, 3))
        m = rbp.drp_sum_matrix(5, 3)
        assert np.array_equal(rbp.drn_features(tokens, 5) @ m, rbp.drp_features(tokens))

    @given(st.lists(st.tuples(st.integers(0, 11), st.integers(0, 11), st.integers(0, 11)),
                    min_size=1, max_size=30))
    def test_values_are_zero_or_two_iff_identity(self, triples):
        tokens = np.asarray(triples)
        drp = rbp.drp_features(tokens)
        assert set(np.unique(drp)) <= {0.0, 2.0}
        for q, (i, j) in enumerate(rbp.token_pairs(3)):
            assert np.array_equal(drp[:, q] == 0.0, tokens[:, i] == tokens[:, j])

    @given(st.lists(st.tuples(st.integers(0, 11), st.integers(0, 11), st.integers(0, 11)),
                    min_size=1, max_size=30),
           st.permutations(list(range(12))))
    def test_vocabulary_permutation_equivariance(self, triples, perm):
        tokens = np.asarray(triples)
        permuted = np.asarray(perm)[tokens]
        assert np.array_equal(rbp.drp_features(tokens), rbp.drp_features(permuted))

    def test_causal_masking_zeroes_unseen_pairs(self):
        tokens = np.array([[0, 1, 0]])
        assert np.array_equal(rbp.drp_features(tokens, visible=1), [[0.0, 0.0, 0.0]])
        assert np.array_equal(rbp.drp_features(tokens, visible=2), [[2.0, 0.0, 0.0]])
        assert np.array_equal(rbp.drp_features(tokens, visible=3), [[2.0, 0.0, 2.0]])


class TestAugmentSizes:
    def test_early_fusion_input_lengths(self):
        # base 3*12 = 36; DRn adds vocab * pairs = 36; DRp adds pairs = 3
        tokens = np.array([[0, 1, 2], [3, 3, 3]])
        base = ad.Tensor(np.eye(12)[tokens].reshape(2, -1))
        with_drn = rbp.augment_input(base, ad.Tensor(rbp.drn_features(tokens, 12)))
        assert with_drn.shape == (2, 72)
        with_drp = rbp.augment_input(base, ad.Tensor(rbp.drp_features(tokens)))
        assert with_drp.shape == (2, 39)

    def test_mid_fusion_size(self):
        hidden = ad.Tensor(np.zeros((4, 50)))
        drp = ad.Tensor(np.zeros((4, 3)))
        assert rbp.augment_hidden(hidden, drp).shape == (4, 53)

    def test_identical_triple_appends_zero_block(self):
        tokens = np.array([[5, 5, 5]])
        assert np.array_equal(rbp.drp_features(tokens), [[0.0, 0.0, 0.0]])


class TestDrpOutTargets:
    def test_repeat_first(self):
        out = rbp.drp_out_targets(np.array([[0, 1]]), np.array([0]))
        assert np.array_equal(out, [[1.0, -1.0]])

    def test_repeat_both(self):
        out = rbp.drp_out_targets(np.array([[2, 2]]), np.array([2]))
        assert np.array_equal(out, [[1.0, 1.0]])

    def test_no_repeat(self):
        out = rbp.drp_out_targets(np.array([[0, 1]]), np.array([2]))
        assert np.array_equal(out, [[-1.0, -1.0]])

    def test_inference_without_next_token_rejected(self):
        with pytest.raises(ValueError, match="head estimates"):
            rbp.drp_out_targets(np.array([[0, 1]]), None)


class TestOffsets:
    def test_distinct_context_scatter(self):
        # estimate (+1,-1), context (a,b): mean 0, offsets land on a and b
        out = rbp.rbp3_offsets(np.array([[1.0, -1.0]]), np.array([[0, 1]]), 4)
        assert np.allclose(out, [[1.0, -1.0, 0.0, 0.0]])

    def test_duplicate_context_mean_annihilates(self):
        out = rbp.rbp3_offsets(np.array([[1.0, 1.0]]), np.array([[0, 0]]), 4)
        assert np.allclose(out, np.zeros((1, 4)))

    def test_constant_estimate_gives_zero_offsets(self):
        out = rbp.rbp3_offsets(np.array([[0.3, 0.3]]), np.array([[0, 2]]), 4)
        assert np.allclose(out, np.zeros((1, 4)))

    def test_duplicate_contributions_sum(self):
        out = rbp.rbp3_offsets(np.array([[1.0, -0.5, 1.0]]), np.array([[2, 0, 2]]), 3)
        mean = 0.5
        assert np.allclose(out, [[-1.0, 0.0, 1.0]])
        assert out[0, 2] == pytest.approx((1.0 - mean) * 2)

    @given(st.lists(st.tuples(st.integers(0, 5), st.integers(0, 5)), min_size=1, max_size=20))
    def test_offsets_sum_to_zero_for_distinct_contexts(self, contexts):
        ctx = np.asarray([c for c in contexts if c[0] != c[1]])
        if len(ctx) == 0:
            return
        rng = np.random.default_rng(0)
        est = rng.uniform(-1, 1, size=ctx.shape)
        out = rbp.rbp3_offsets(est, ctx, 6)
        assert np.allclose(out.sum(axis=1), 0.0, atol=1e-12)


def make_head(k=4, n=2, hidden=5, seed=0):
    cfg = rbp.DrConfig(k, n)
    return rbp.Rbp3Head.create(cfg, hidden, np.random.default_rng(seed))


class TestMixture:
    def test_spec_pipeline_hand_example(self):
        # p uniform over 4, offsets (+1,-1,0,0), weights 0.5/0.5:
        # pre-clip (0.625,-0.375,0.125,0.125) -> clip -> renormalize
        head = make_head()
        base = ad.Tensor(np.full((1, 4), 0.25))
        offsets = np.array([[1.0, -1.0, 0.0, 0.0]])
        head.set_mixture_weights(0.5, 0.5)
        out = rbp.rbp3_mix(base, offsets, head).data
        assert np.allclose(out, [[0.7143, 0.0, 0.1429, 0.1429]], atol=1e-4)

    def test_zero_offsets_reproduce_base(self):
        head = make_head()
        base = ad.Tensor(np.array([[0.1, 0.2, 0.3, 0.4]]))
        out = rbp.rbp3_mix(base, np.zeros((1, 4)), head).data
        assert np.allclose(out, base.data, atol=1e-12)

    def test_zero_offset_weight_reproduces_base(self):
        head = make_head()
        head.set_mixture_weights(1.0, 0.0)
        base = ad.Tensor(np.array([[0.7, 0.1, 0.1, 0.1]]))
        out = rbp.rbp3_mix(base, np.array([[1.0, -1.0, 0.0, 0.0]]), head).data
        assert np.allclose(out, base.data, atol=1e-12)

    def test_collapsed_row_falls_back_to_base(self, caplog):
        head = make_head()
        head.set_mixture_weights(0.0, 1.0)
        base = ad.Tensor(np.array([[0.25, 0.25, 0.25, 0.25]]))
        offsets = np.array([[-1.0, -1.0, -1.0, -1.0]])
        with caplog.at_level("WARNING"):
            out = rbp.rbp3_mix(base, offsets, head).data
        assert np.allclose(out, base.data)
        assert any("zero mass" in r.message for r in caplog.records)

    def test_matches_independent_pipeline_on_random_instances(self):
        # oracle: plain numpy reimplementation of clip-and-renormalize
        rng = np.random.default_rng(42)
        head = make_head()
        for _ in range(100):
            k = int(rng.integers(2, 8))
            b = rng.random((3, k)) + 1e-9
            b /= b.sum(axis=1, keepdims=True)
            offsets = rng.uniform(-1, 1, size=(3, k))
            head.set_mixture_weights(*rng.uniform(0.05, 1.5, size=2))
            wb, wo = head.mixture_weights()
            got = rbp.rbp3_mix(ad.Tensor(b), offsets, head).data

            pre = np.clip(wb * b + wo * offsets, 0.0, 1.0)
            sums = pre.sum(axis=1, keepdims=True)
            expected = np.where(sums > 0, pre / np.where(sums > 0, sums, 1.0), b)
            assert np.max(np.abs(got - expected)) < 1e-9

    def test_output_is_distribution(self):
        rng = np.random.default_rng(5)
        head = make_head()
        for _ in range(50):
            b = rng.random((4, 6))
            b /= b.sum(axis=1, keepdims=True)
            offsets = rng.uniform(-1, 1, size=(4, 6))
            out = rbp.rbp3_mix(ad.Tensor(b), offsets, head).data
            assert np.all(out >= 0)
            assert np.allclose(out.sum(axis=1), 1.0, atol=1e-9)


class TestHeadTraining:
    def _train_head(self, drp_value, target, steps=300):
        """Regression of the head alone against fixed targets, to convergence."""
        head = make_head(seed=3)
        params = head.parameters()
        hyper = ad.AdamHyper(learning_rate=0.05)
        drp_in = ad.Tensor(np.full((8, 1), drp_value))
        targets = np.tile(target, (8, 1))
        for _ in range(steps):
            loss = ad.mse(head.forward(drp_in), targets)
            ad.zero_grads(params)
            loss.backward()
            ad.adam_step(params, hyper)
        return head.forward(ad.Tensor(np.array([[drp_value]]))).data[0]

    def test_learns_aba_repetition_code(self):
        est = self._train_head(2.0, np.array([1.0, -1.0]))
        assert abs(est[0] - 1.0) < 0.2 and abs(est[1] + 1.0) < 0.2

    def test_learns_abb_repetition_code(self):
        est = self._train_head(2.0, np.array([-1.0, 1.0]))
        assert abs(est[0] + 1.0) < 0.2 and abs(est[1] - 1.0) < 0.2

    def test_zero_weight_head_estimates_zero(self):
        head = make_head()
        for p in (head.w1, head.b1, head.w2, head.b2):
            p.data = np.zeros_like(p.data)
        out = head.forward(ad.Tensor(np.array([[2.0]]))).data
        assert np.array_equal(out, np.zeros((1, 2)))

    def test_mixture_weights_start_at_half(self):
        head = make_head()
        assert head.mixture_weights() == (0.5, 0.5)

    def test_mixture_weights_stay_on_simplex(self):
        head = make_head()
        head.gate_base.data = np.asarray(3.7)
        head.gate_offset.data = np.asarray(-1.2)
        wb, wo = head.mixture_weights()
        assert wb > 0 and wo > 0
        assert wb + wo == pytest.approx(1.0)

    def test_negative_weight_request_rejected(self):
        head = make_head()
        with pytest.raises(ValueError, match="nonnegative"):
            head.set_mixture_weights(-0.1, 0.5)
