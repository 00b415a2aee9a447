import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tokenppo import config as cfgmod
from tokenppo.datagen import (
    AnnotatorConfig,
    CorpusConfig,
    TokenBatch,
    build_vocab,
    encode_episodes,
    generate_corpus,
    get_tokenizer,
    separable_batch,
)
from tokenppo.gradcheck import compare_gradients
from tokenppo.reward_model import (
    LengthPenaltyConfig,
    RewardModelError,
    RMOutput,
    RMTrainConfig,
    TrainingDivergedError,
    apply_length_penalty,
    build_valid_set,
    global_loss,
    init_rm_params,
    local_loss,
    loss_and_grads,
    lwp,
    predict_token_rewards,
    rm_auc,
    rm_forward,
    rm_token_accuracy,
    total_loss,
    train_reward_model,
)


@pytest.fixture(scope="module")
def vocab():
    return build_vocab(get_tokenizer("chunk2"), CorpusConfig(), AnnotatorConfig())


@pytest.fixture(scope="module")
def small_batch(vocab):
    records = generate_corpus(0, 16)
    return encode_episodes(records, get_tokenizer("chunk2"), vocab)


def single_response_batch(cats, vocab):
    """One episode whose response has the given categories (content id 5)."""
    T = len(cats) + 2
    ids = np.full((1, T), 5, dtype=np.int64)
    attention = np.ones((1, T), dtype=bool)
    activation = np.zeros((1, T), dtype=bool)
    activation[0, 2:] = True
    categories = np.zeros((1, T), dtype=np.int64)
    categories[0, 2:] = cats
    return TokenBatch(ids, attention, activation, categories, np.array([2]))


class TestForward:
    def test_zero_output_layer_uniform(self, vocab, small_batch):
        params = init_rm_params(len(vocab), seed=0)
        out = rm_forward(params, small_batch)
        assert np.allclose(out.class_probs, 1.0 / 3.0)

    def test_probabilities_normalized(self, vocab, small_batch):
        params = init_rm_params(len(vocab), seed=0)
        rng = np.random.default_rng(1)
        for arr in params.arrays().values():
            arr += rng.normal(0, 0.3, arr.shape)
        out = rm_forward(params, small_batch)
        assert np.abs(out.class_probs.sum(axis=-1) - 1.0).max() < 1e-9
        assert out.class_probs.min() >= 0

    def test_deterministic(self, vocab, small_batch):
        params = init_rm_params(len(vocab), seed=3)
        a = rm_forward(params, small_batch)
        b = rm_forward(params, small_batch)
        assert np.array_equal(a.class_probs, b.class_probs)

    def test_out_of_vocab_id_rejected(self, vocab, small_batch):
        params = init_rm_params(len(vocab), seed=0)
        bad = TokenBatch(
            token_ids=np.full_like(small_batch.token_ids, len(vocab) + 3),
            attention_mask=small_batch.attention_mask,
            activation_mask=small_batch.activation_mask,
            token_categories=small_batch.token_categories,
            sentence_rewards=small_batch.sentence_rewards,
        )
        with pytest.raises(RewardModelError):
            rm_forward(params, bad)

    def test_output_layer_must_be_three_wide(self, vocab):
        params = init_rm_params(len(vocab), seed=0)
        with pytest.raises(RewardModelError):
            type(params)(emb=params.emb, w_hidden=params.w_hidden,
                         b_hidden=params.b_hidden, w_out=np.zeros((params.w_out.shape[0], 4)))


class TestValidSet:
    def test_boundary_ratio_all_kept(self, vocab):
        batch = single_response_batch([0, 1, 1, 1, 1, 1, 1, 2, 2], vocab)
        vs = build_valid_set(batch, 0)
        assert vs.kept_counts == {0: 1, 1: 6, 2: 2}
        assert vs.membership.sum() == 9

    def test_majority_downsampled_to_three_to_one(self, vocab):
        batch = single_response_batch([1] * 10 + [2] * 2 + [0], vocab)
        vs = build_valid_set(batch, 7)
        # oracle: recount categories among kept tokens
        assert vs.kept_counts == {0: 1, 1: 6, 2: 2}

    def test_minority_class_never_dropped(self, vocab):
        batch = single_response_batch([2] * 20 + [1], vocab)
        vs = build_valid_set(batch, 3)
        assert vs.kept_counts[1] == 1
        assert vs.kept_counts[2] == 3

    def test_all_padding_empty_with_warning(self):
        batch = TokenBatch(
            token_ids=np.zeros((2, 4), dtype=np.int64),
            attention_mask=np.zeros((2, 4), dtype=bool),
            activation_mask=np.zeros((2, 4), dtype=bool),
            token_categories=np.zeros((2, 4), dtype=np.int64),
            sentence_rewards=np.array([1, 1]),
        )
        with pytest.warns(UserWarning, match="empty"):
            vs = build_valid_set(batch, 0)
        assert vs.empty

    def test_never_increases_counts_never_drops_cat0(self, vocab, small_batch):
        resp = small_batch.activation_mask
        cats = small_batch.token_categories
        vs = build_valid_set(small_batch, 11)
        for c in (0, 1, 2):
            assert vs.kept_counts[c] <= int(((cats == c) & resp).sum())
        assert vs.kept_counts[0] == int(((cats == 0) & resp).sum())

    def test_deterministic_per_seed(self, vocab):
        batch = single_response_batch([1] * 30 + [2] * 3, vocab)
        a = build_valid_set(batch, 5)
        b = build_valid_set(batch, 5)
        assert np.array_equal(a.membership, b.membership)


def uniform_output(batch):
    probs = np.full(batch.token_ids.shape + (3,), 1.0 / 3.0)
    return RMOutput(class_probs=probs, predicted_category=np.argmax(probs, axis=-1),
                    expected_reward=probs @ np.array([0.0, 1.0, 2.0]))


def output_from_probs(probs):
    probs = np.asarray(probs, dtype=float)
    return RMOutput(class_probs=probs, predicted_category=np.argmax(probs, axis=-1),
                    expected_reward=probs @ np.array([0.0, 1.0, 2.0]))


class TestLosses:
    def one_token_setup(self, cat, triple, w=(1.0, 1.0, 1.0)):
        ids = np.array([[5, 5]], dtype=np.int64)
        attention = np.ones((1, 2), dtype=bool)
        activation = np.array([[False, True]])
        categories = np.array([[0, cat]])
        batch = TokenBatch(ids, attention, activation, categories, np.array([2]))
        vs = build_valid_set(batch, 0)
        probs = np.full((1, 2, 3), 1.0 / 3.0)
        probs[0, 1] = triple
        cfg = RMTrainConfig(w0=w[0], w1=w[1], w2=w[2])
        return output_from_probs(probs), batch, vs, cfg

    def test_perfect_prediction_zero_loss(self):
        out, batch, vs, cfg = self.one_token_setup(2, [0.0, 0.0, 1.0])
        assert local_loss(out, batch, vs, cfg) == 0.0

    def test_uniform_triple_log3(self):
        out, batch, vs, cfg = self.one_token_setup(1, [1 / 3, 1 / 3, 1 / 3])
        assert local_loss(out, batch, vs, cfg) == pytest.approx(np.log(3.0), abs=1e-12)

    def test_class_weight_linearity(self):
        out, batch, vs, cfg = self.one_token_setup(1, [0.5, 0.25, 0.25])
        base = local_loss(out, batch, vs, cfg)
        doubled = local_loss(out, batch, vs, RMTrainConfig(w1=2.0))
        assert doubled == pytest.approx(2.0 * base, rel=1e-12)

    def test_empty_valid_set_zero_with_warning(self, vocab):
        batch = TokenBatch(
            token_ids=np.zeros((1, 3), dtype=np.int64),
            attention_mask=np.zeros((1, 3), dtype=bool),
            activation_mask=np.zeros((1, 3), dtype=bool),
            token_categories=np.zeros((1, 3), dtype=np.int64),
            sentence_rewards=np.array([1]),
        )
        with pytest.warns(UserWarning):
            vs = build_valid_set(batch, 0)
        with pytest.warns(UserWarning):
            assert local_loss(uniform_output(batch), batch, vs, RMTrainConfig()) == 0.0

    def test_global_eval_zero_when_argmax_matches(self, vocab):
        batch = single_response_batch([2, 2, 2], vocab)
        probs = np.zeros((1, 5, 3))
        probs[..., 2] = 1.0
        vs = build_valid_set(batch, 0)
        assert global_loss(output_from_probs(probs), batch, vs, variant="eval") == 0.0

    def test_global_train_expected_reward(self, vocab):
        # two valid tokens with triples (0, .5, .5): expected reward 1.5 each,
        # mean 1.5 vs sentence reward 2 -> 0.25
        batch = single_response_batch([2, 2], vocab)
        probs = np.zeros((1, 4, 3))
        probs[..., 1] = 0.5
        probs[..., 2] = 0.5
        vs = build_valid_set(batch, 0)
        assert global_loss(output_from_probs(probs), batch, vs, variant="train") == \
            pytest.approx(0.25, abs=1e-12)

    def test_global_zero_residual(self, vocab):
        batch = single_response_batch([2, 2], vocab)
        probs = np.zeros((1, 4, 3))
        probs[..., 2] = 1.0
        vs = build_valid_set(batch, 0)
        assert global_loss(output_from_probs(probs), batch, vs, variant="train") == 0.0

    def test_eval_variant_invariant_under_argmax_preserving_change(self, vocab):
        batch = single_response_batch([2, 1, 2], vocab)
        vs = build_valid_set(batch, 0)
        p1 = np.zeros((1, 5, 3))
        p1[..., 2] = 0.9
        p1[..., 1] = 0.1
        p2 = np.zeros((1, 5, 3))
        p2[..., 2] = 0.6
        p2[..., 1] = 0.4
        assert global_loss(output_from_probs(p1), batch, vs, "eval") == \
            global_loss(output_from_probs(p2), batch, vs, "eval")

    def test_total_loss_combination(self, vocab):
        batch = single_response_batch([1, 2], vocab)
        vs = build_valid_set(batch, 0)
        out = uniform_output(batch)
        for lam in (1.0, 0.0, 0.5):
            cfg = RMTrainConfig(lambda_local=lam, lambda_global=1.0 - lam)
            expect = lam * local_loss(out, batch, vs, cfg) + \
                (1 - lam) * global_loss(out, batch, vs, "train")
            assert total_loss(out, batch, vs, cfg) == pytest.approx(expect, rel=1e-12)

    def test_total_loss_arithmetic(self, vocab):
        # lambda_local=0.5 with L_local=2 and L_global=0.25 -> 1.125
        assert 0.5 * 2.0 + 0.5 * 0.25 == 1.125

    def test_lambda_weights_must_sum_to_one(self):
        with pytest.raises(RewardModelError):
            RMTrainConfig(lambda_local=0.7, lambda_global=0.7)


class TestPredict:
    def test_argmax(self):
        probs = np.array([[[0.1, 0.2, 0.7]]])
        assert output_from_probs(probs).predicted_category[0, 0] == 2

    def test_tie_goes_to_lowest_class(self):
        probs = np.array([[[0.4, 0.4, 0.2]]])
        assert output_from_probs(probs).predicted_category[0, 0] == 0

    def test_padding_forced_to_zero(self, vocab):
        params = init_rm_params(len(vocab), seed=0)
        rng = np.random.default_rng(0)
        for arr in params.arrays().values():
            arr += rng.normal(0, 0.3, arr.shape)
        batch = single_response_batch([1, 2, 1], vocab)
        pred = predict_token_rewards(params, batch)
        assert np.all(pred[~batch.activation_mask] == 0)


class TestLengthPenalty:
    def test_value_at_suggested_length(self):
        for alpha in (0.3, 1.0, 2.5):
            cfg = LengthPenaltyConfig(alpha=alpha, sl=10)
            assert lwp(10, cfg) == pytest.approx(1.0 / (1.0 + np.exp(-6.0)), rel=1e-12)

    def test_midpoint(self):
        cfg = LengthPenaltyConfig(alpha=1.0, sl=10)
        assert lwp(16, cfg) == pytest.approx(0.5, abs=1e-12)

    def test_far_tail(self):
        cfg = LengthPenaltyConfig(alpha=0.5, sl=10)
        assert lwp(34, cfg) == pytest.approx(1.0 / (1.0 + np.exp(6.0)), rel=1e-12)

    def test_positions_one_indexed(self):
        with pytest.raises(RewardModelError):
            lwp(0, LengthPenaltyConfig())

    @given(alpha=st.floats(0.1, 2.0), sl=st.integers(1, 12))
    def test_strictly_decreasing_in_open_unit_interval(self, alpha, sl):
        # ranges keep the sigmoid clear of float64 saturation at either end
        cfg = LengthPenaltyConfig(alpha=alpha, sl=sl)
        values = lwp(np.arange(1, 4 * sl + 2), cfg)
        assert np.all(np.diff(values) < 0)
        assert np.all((values > 0) & (values < 1))

    def test_decreasing_in_alpha_past_knee(self):
        sl = 10
        l = sl + 6.0 / 0.5 + 4  # beyond the knee for both alphas
        assert lwp(l, LengthPenaltyConfig(alpha=1.0, sl=sl)) < \
            lwp(l, LengthPenaltyConfig(alpha=0.5, sl=sl))

    def test_apply_zero_rewards(self):
        out = apply_length_penalty(np.zeros(7), LengthPenaltyConfig())
        assert np.array_equal(out, np.zeros(7))

    def test_apply_scales_at_sl(self):
        cfg = LengthPenaltyConfig(alpha=1.0, sl=3)
        rewards = np.array([0.0, 0.0, 2.0])
        out = apply_length_penalty(rewards, cfg)
        assert out[2] == pytest.approx(2.0 / (1.0 + np.exp(-6.0)), rel=1e-12)

    def test_apply_monotone_for_constant_reward(self):
        out = apply_length_penalty(np.ones(30), LengthPenaltyConfig(alpha=1.0, sl=5))
        assert np.all(np.diff(out) < 0)

    def test_invalid_config(self):
        with pytest.raises(RewardModelError):
            LengthPenaltyConfig(alpha=0.0)
        with pytest.raises(RewardModelError):
            LengthPenaltyConfig(sl=0)


class TestAUC:
    def make(self, cats, scores2):
        """Valid-set batch with P(2)-leaning scores per token."""
        cats = np.array([cats])
        n, T = cats.shape
        ids = np.full((n, T), 5, dtype=np.int64)
        batch = TokenBatch(ids, np.ones_like(cats, dtype=bool),
                           np.ones_like(cats, dtype=bool), cats,
                           np.array([2]))
        probs = np.zeros((n, T, 3))
        probs[..., 2] = scores2
        probs[..., 1] = 1.0 - np.array(scores2)
        vs = build_valid_set(batch, 0)
        return output_from_probs(probs), batch, vs

    def test_perfect_separation(self):
        out, batch, vs = self.make([1, 1, 2, 2], [0.1, 0.2, 0.8, 0.9])
        assert rm_auc(out, batch, vs) == 1.0

    def test_identical_scores_half(self):
        out, batch, vs = self.make([1, 1, 2, 2], [0.5, 0.5, 0.5, 0.5])
        assert rm_auc(out, batch, vs) == 0.5

    def test_inverted_scores_zero(self):
        out, batch, vs = self.make([1, 1, 2, 2], [0.9, 0.8, 0.2, 0.1])
        assert rm_auc(out, batch, vs) == 0.0

    def test_single_class_absent(self):
        out, batch, vs = self.make([2, 2, 2], [0.5, 0.6, 0.7])
        assert rm_auc(out, batch, vs) is None


class TestTraining:
    def test_same_seed_identical_curves(self, vocab):
        batch = separable_batch(0, 48, vocab)
        cfg = RMTrainConfig(steps=40, eval_every=5)
        a = train_reward_model(batch, cfg, len(vocab), eval_batch=batch)
        b = train_reward_model(batch, cfg, len(vocab), eval_batch=batch)
        assert [(r.step, r.train_loss, r.eval_loss, r.auc) for r in a.curve] == \
            [(r.step, r.train_loss, r.eval_loss, r.auc) for r in b.curve]
        for k in a.params.arrays():
            assert np.array_equal(a.params.arrays()[k], b.params.arrays()[k])

    def test_loss_decreases_on_separable_data(self, vocab):
        batch = separable_batch(1, 64, vocab)
        cfg = RMTrainConfig(steps=300, eval_every=50)
        res = train_reward_model(batch, cfg, len(vocab), eval_batch=batch)
        assert res.curve[-1].train_loss < res.curve[0].train_loss
        assert rm_token_accuracy(res.params, batch) > 0.8

    def test_divergence_aborts(self, vocab, monkeypatch):
        # the saturating architecture cannot overflow from the learning rate
        # alone, so force a non-finite loss to exercise the abort path
        import tokenppo.reward_model as rm_mod

        batch = separable_batch(2, 16, vocab)

        def bad_loss(params, mini, vs, cfg):
            grads = {k: np.zeros_like(v) for k, v in params.arrays().items()}
            return float("nan"), grads, {}

        monkeypatch.setattr(rm_mod, "loss_and_grads", bad_loss)
        with pytest.raises(TrainingDivergedError, match="step 0"):
            train_reward_model(batch, RMTrainConfig(steps=5), len(vocab))


class TestGradients:
    def test_analytic_matches_finite_differences(self, vocab, small_batch):
        params = init_rm_params(len(vocab), seed=0)
        rng = np.random.default_rng(5)
        for arr in params.arrays().values():
            arr += rng.normal(0, 0.05, arr.shape)
        vs = build_valid_set(small_batch, 0)
        cfg = RMTrainConfig()
        _, grads, _ = loss_and_grads(params, small_batch, vs, cfg)

        def loss_fn():
            out = rm_forward(params, small_batch)
            return total_loss(out, small_batch, vs, cfg, variant="train")

        report = compare_gradients(loss_fn, params.arrays(), grads, n_coords=100, seed=0)
        assert report.passed, str(report)

    def test_corrupted_gradient_detected(self, vocab, small_batch):
        params = init_rm_params(len(vocab), seed=0)
        rng = np.random.default_rng(5)
        for arr in params.arrays().values():
            arr += rng.normal(0, 0.05, arr.shape)
        vs = build_valid_set(small_batch, 0)
        cfg = RMTrainConfig()
        _, grads, _ = loss_and_grads(params, small_batch, vs, cfg)
        grads["w_hidden"] = grads["w_hidden"] + 0.5  # deliberate corruption

        def loss_fn():
            out = rm_forward(params, small_batch)
            return total_loss(out, small_batch, vs, cfg, variant="train")

        report = compare_gradients(loss_fn, params.arrays(), grads, n_coords=100, seed=0)
        assert not report.passed
