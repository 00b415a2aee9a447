import numpy as np
import pytest
from dataclasses import replace

from tokenppo.datagen import (
    EOS_ID,
    AnnotatorConfig,
    CorpusConfig,
    build_vocab,
    encode_episodes,
    encode_prompt,
    generate_corpus,
    get_tokenizer,
)
from tokenppo.policy import (
    PolicyError,
    PretrainConfig,
    check_gradients,
    init_policy_params,
    policy_logits,
    pretrain_policy,
    response_windows,
    sample_response,
    sample_responses_batch,
    sequence_log_probs,
    state_window,
    value_estimates,
)
from tokenppo.tppo import Rollout, TPPOConfig, compute_advantages, score_rollouts
from tokenppo.reward_model import LengthPenaltyConfig, init_rm_params
from tokenppo.policy import _log_softmax, logits_for_windows, values_for_windows


@pytest.fixture(scope="module")
def vocab():
    return build_vocab(get_tokenizer("chunk2"), CorpusConfig(), AnnotatorConfig())


@pytest.fixture(scope="module")
def records():
    return generate_corpus(0, 32)


@pytest.fixture(scope="module")
def batch(records, vocab):
    return encode_episodes(records, get_tokenizer("chunk2"), vocab)


def perturbed_params(vocab, seed=0, scale=0.1):
    params = init_policy_params(len(vocab), seed=seed)
    rng = np.random.default_rng([seed, 99])
    for arr in params.arrays().values():
        arr += rng.normal(0, scale, arr.shape)
    params.emb[0] = 0.0
    return params


class TestLogits:
    def test_zero_heads_uniform(self, vocab):
        params = init_policy_params(len(vocab), seed=0)
        logits = policy_logits(params, [3, 4, 5])
        p = np.exp(_log_softmax(logits[None, :]))[0]
        assert np.allclose(p, 1.0 / len(vocab))

    def test_probabilities_sum_to_one(self, vocab):
        params = perturbed_params(vocab)
        logits = policy_logits(params, [3, 4, 5])
        p = np.exp(_log_softmax(logits[None, :]))[0]
        assert abs(p.sum() - 1.0) < 1e-9

    def test_same_state_same_logits(self, vocab):
        params = perturbed_params(vocab)
        a = policy_logits(params, [3, 4, 5, 6])
        b = policy_logits(params, [3, 4, 5, 6])
        assert np.array_equal(a, b)

    def test_tokens_beyond_window_ignored(self, vocab):
        params = perturbed_params(vocab)
        k = params.k_ctx
        tail = list(range(3, 3 + k))
        a = policy_logits(params, [7] * 5 + tail)
        b = policy_logits(params, [9] * 2 + tail)
        assert np.allclose(a, b)

    def test_left_padding_inert(self, vocab):
        # short states are left-padded; the pad slots must not affect logits
        params = perturbed_params(vocab)
        params.emb[0] = 123.0  # even a poisoned pad embedding row is masked out
        a = policy_logits(params, [4, 5])
        params.emb[0] = 0.0
        b = policy_logits(params, [4, 5])
        assert np.array_equal(a, b)


class TestSampling:
    def test_greedy_reproducible(self, vocab):
        params = perturbed_params(vocab)
        a = sample_response(params, [3, 4], max_len=10, temperature=0.0)
        b = sample_response(params, [3, 4], max_len=10, temperature=0.0)
        assert a == b

    def test_max_len_one(self, vocab):
        params = perturbed_params(vocab)
        out = sample_response(params, [3], max_len=1, temperature=1.0, seed=0)
        assert len(out) == 1

    def test_same_seed_identical(self, vocab):
        params = perturbed_params(vocab)
        a = sample_response(params, [3, 4], max_len=12, temperature=1.0, seed=11)
        b = sample_response(params, [3, 4], max_len=12, temperature=1.0, seed=11)
        assert a == b

    def test_stops_at_eos(self, vocab):
        params = perturbed_params(vocab)
        params.w_policy[:, EOS_ID] = 0.0
        params.b_trunk += 0.0
        out = sample_response(params, [3], max_len=50, temperature=1.0, seed=5)
        if EOS_ID in out:
            assert out.index(EOS_ID) == len(out) - 1

    def test_invalid_args(self, vocab):
        params = perturbed_params(vocab)
        with pytest.raises(PolicyError):
            sample_response(params, [3], max_len=0, temperature=1.0, seed=0)
        with pytest.raises(PolicyError):
            sample_response(params, [3], max_len=3, temperature=-0.5, seed=0)

    def test_batch_matches_solo_sampling(self, vocab):
        params = perturbed_params(vocab)
        prompts = [[3, 4], [5], [6, 7, 8]]
        solo = [sample_response(params, p, 15, 1.0, rng=np.random.default_rng([7, i]))
                for i, p in enumerate(prompts)]
        batched = sample_responses_batch(params, prompts, 15, 1.0,
                                         [np.random.default_rng([7, i]) for i in range(3)])
        assert solo == batched


class TestLogProbs:
    def test_uniform_policy_log_quarter(self, vocab):
        params = init_policy_params(len(vocab), seed=0)  # zero heads -> uniform
        lp = sequence_log_probs(params, [3], [4, 5, 6])
        assert np.allclose(lp, -np.log(len(vocab)))

    def test_never_positive(self, vocab):
        params = perturbed_params(vocab)
        lp = sequence_log_probs(params, [3, 4], [5, 6, 7, 8])
        assert np.all(lp <= 0)

    def test_consistent_with_logits(self, vocab):
        params = perturbed_params(vocab)
        prompt, actions = [3, 4], [5, 6, 7]
        lp = sequence_log_probs(params, prompt, actions)
        state = list(prompt)
        for t, a in enumerate(actions):
            logits = policy_logits(params, state)
            p = np.exp(_log_softmax(logits[None, :]))[0]
            assert abs(np.exp(lp[t]) - p[a]) < 1e-9
            state.append(a)

    def test_action_outside_vocab(self, vocab):
        params = perturbed_params(vocab)
        with pytest.raises(PolicyError):
            sequence_log_probs(params, [3], [len(vocab) + 1])


class TestValues:
    def test_zero_value_head_zero(self, vocab):
        params = init_policy_params(len(vocab), seed=0)
        vals = value_estimates(params, [[3, 4], [5]])
        assert np.array_equal(vals, np.zeros(2))

    def test_deterministic(self, vocab):
        params = perturbed_params(vocab)
        a = value_estimates(params, [[3, 4, 5]])
        b = value_estimates(params, [[3, 4, 5]])
        assert np.array_equal(a, b)

    def test_window_invariance(self, vocab):
        params = perturbed_params(vocab)
        k = params.k_ctx
        tail = [4] * k
        a = value_estimates(params, [[9, 9, 9] + tail])
        b = value_estimates(params, [[5] + tail])
        assert np.allclose(a, b)


class TestPretrain:
    def test_loss_decreases(self, batch, vocab):
        params, losses = pretrain_policy(batch, PretrainConfig(steps=200), len(vocab))
        assert losses[-1] < losses[0]

    def test_deterministic(self, batch, vocab):
        cfg = PretrainConfig(steps=50)
        a_params, a_losses = pretrain_policy(batch, cfg, len(vocab))
        b_params, b_losses = pretrain_policy(batch, cfg, len(vocab))
        assert a_losses == b_losses
        for k in a_params.arrays():
            assert np.array_equal(a_params.arrays()[k], b_params.arrays()[k])


def build_rollouts(params, records, vocab, tok, n=6, seed=0):
    rollouts = []
    for i in range(n):
        prompt = encode_prompt(records[i].prompt_words, tok, vocab)
        actions = sample_response(params, prompt, 12, 1.0, seed=[seed, i])
        win = response_windows(prompt, actions, params.k_ctx)
        logp = _log_softmax(logits_for_windows(params, win))
        rollouts.append(Rollout(
            prompt_ids=prompt, action_ids=actions,
            ref_log_probs=logp[np.arange(len(actions)), actions],
            rewards=np.zeros(len(actions)),
            values=values_for_windows(params, win),
        ))
    return rollouts


class TestCheckGradients:
    def make(self, vocab, records):
        tok = get_tokenizer("chunk2")
        ref = perturbed_params(vocab, seed=1)
        rollouts = build_rollouts(ref, records, vocab, tok)
        rm = init_rm_params(len(vocab), seed=0)
        rng = np.random.default_rng(4)
        for arr in rm.arrays().values():
            arr += rng.normal(0, 0.05, arr.shape)
        cfg = TPPOConfig(seed=0)
        token_r, _, _ = score_rollouts(rm, rollouts, LengthPenaltyConfig(), cfg)
        rollouts = [compute_advantages(replace(r, rewards=tr), cfg)
                    for r, tr in zip(rollouts, token_r)]
        params = perturbed_params(vocab, seed=2, scale=0.05)
        return params, rollouts, ref, cfg

    def test_passes_for_correct_gradients(self, vocab, records):
        params, rollouts, ref, cfg = self.make(vocab, records)
        report = check_gradients(params, rollouts, ref, cfg, seed=3)
        assert report.passed, str(report)
        assert report.max_rel_error < 1e-4

    def test_failure_names_worst_parameter(self, vocab, records):
        from tokenppo.gradcheck import compare_gradients
        from tokenppo.tppo import flatten_rollouts, ppo_loss_and_grads

        params, rollouts, ref, cfg = self.make(vocab, records)
        flat = flatten_rollouts(rollouts, ref, params.k_ctx)
        _, grads, _ = ppo_loss_and_grads(params, flat, cfg)
        grads["w_trunk"] = grads["w_trunk"] + 1.0  # corrupted on purpose

        report = compare_gradients(
            lambda: ppo_loss_and_grads(params, flat, cfg)[0],
            params.arrays(), grads, n_coords=120, seed=0)
        assert not report.passed
        assert report.worst_param == "w_trunk"
        assert "w_trunk" in str(report)

    def test_zero_advantage_zero_policy_gradient(self, vocab, records):
        from tokenppo.tppo import flatten_rollouts, ppo_loss_and_grads

        _, rollouts, ref, cfg = self.make(vocab, records)
        rollouts = [replace(r, advantages=np.zeros_like(r.advantages),
                            returns=np.zeros_like(r.returns)) for r in rollouts]
        # at params == ref the KL gradient also vanishes, isolating the
        # surrogate term; with zero advantages everything must be exactly 0
        cfg = TPPOConfig(seed=0, value_coef=0.0, entropy_coef=0.0)
        flat = flatten_rollouts(rollouts, ref, ref.k_ctx)
        _, grads, parts = ppo_loss_and_grads(ref, flat, cfg)
        assert parts["policy"] == 0.0
        for name, g in grads.items():
            assert np.array_equal(g, np.zeros_like(g)), name
