"""Tiny autoregressive policy-and-value network.

Stands in for the LLM: a shared tanh trunk over the trailing context window
feeds a next-token head and a scalar value head. The context is the last
``k_ctx`` token ids, left-padded with the padding id whose embedding is
pinned at zero, so padding can never influence logits and nothing beyond
the window matters architecturally.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datagen import EOS_ID, PAD_ID, TokenBatch
from .gradcheck import GradCheckReport, compare_gradients
from .reward_model import TrainingDivergedError, context_windows


class PolicyError(ValueError):
    pass


@dataclass
class PolicyParams:
    emb: np.ndarray       # [vocab, d_e]
    w_trunk: np.ndarray   # [d_e * k_ctx, h]
    b_trunk: np.ndarray   # [h]
    w_policy: np.ndarray  # [h, vocab]
    w_value: np.ndarray   # [h]

    def __post_init__(self):
        if self.w_policy.shape[1] != self.emb.shape[0]:
            raise PolicyError("policy head width must equal vocab size")
        for name, arr in self.arrays().items():
            if not np.all(np.isfinite(arr)):
                raise PolicyError(f"non-finite values in parameter {name}")

    @property
    def vocab_size(self) -> int:
        return self.emb.shape[0]

    @property
    def k_ctx(self) -> int:
        return self.w_trunk.shape[0] // self.emb.shape[1]

    def arrays(self) -> dict[str, np.ndarray]:
        return {"emb": self.emb, "w_trunk": self.w_trunk, "b_trunk": self.b_trunk,
                "w_policy": self.w_policy, "w_value": self.w_value}

    def copy(self) -> "PolicyParams":
        return PolicyParams(**{k: v.copy() for k, v in self.arrays().items()})


def init_policy_params(vocab_size: int, seed: int, d_embed: int = 16, context: int = 24,
                       hidden: int = 32, scale: float = 0.1) -> PolicyParams:
    """Seeded init; both heads start at zero (uniform policy, zero values)."""
    rng = np.random.default_rng([seed, 23])
    emb = rng.normal(0.0, scale, size=(vocab_size, d_embed))
    emb[PAD_ID] = 0.0
    return PolicyParams(
        emb=emb,
        w_trunk=rng.normal(0.0, scale, size=(d_embed * context, hidden)),
        b_trunk=np.zeros(hidden),
        w_policy=np.zeros((hidden, vocab_size)),
        w_value=np.zeros(hidden),
    )


# ---------------------------------------------------------------------------
# Forward pieces
# ---------------------------------------------------------------------------


def state_window(state, k_ctx: int) -> np.ndarray:
    """Last k_ctx ids of a state sequence, left-padded to length k_ctx."""
    state = list(state)
    tail = state[-k_ctx:]
    return np.array([PAD_ID] * (k_ctx - len(tail)) + tail, dtype=np.int64)


def trunk_forward(params: PolicyParams, windows: np.ndarray):
    """Hidden activations for a stack of context windows [m, k_ctx]."""
    x = params.emb[windows]
    x[windows == PAD_ID] = 0.0  # padding is masked out, not merely zero-initialized
    x = x.reshape(windows.shape[0], -1)
    h = np.tanh(x @ params.w_trunk + params.b_trunk)
    return x, h


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def policy_logits(params: PolicyParams, state) -> np.ndarray:
    """Next-token logits for one state (prompt plus generated prefix)."""
    _, h = trunk_forward(params, state_window(state, params.k_ctx)[None, :])
    return (h @ params.w_policy)[0]


def logits_for_windows(params: PolicyParams, windows: np.ndarray) -> np.ndarray:
    _, h = trunk_forward(params, windows)
    return h @ params.w_policy


def response_windows(prompt, actions, k_ctx: int) -> np.ndarray:
    """Context windows of the states preceding each action in a response."""
    seq = list(prompt) + list(actions)
    m = len(prompt)
    return np.stack([state_window(seq[: m + t], k_ctx) for t in range(len(actions))])


def sample_response(params: PolicyParams, prompt, max_len: int, temperature: float,
                    seed=None, rng: np.random.Generator | None = None) -> list[int]:
    """Sample tokens until the end-of-sequence id or max_len.

    temperature scales logits before the softmax; 0 selects the argmax.
    Deterministic for a fixed seed.
    """
    if rng is None:
        rng = np.random.default_rng(seed)
    return sample_responses_batch(params, [prompt], max_len, temperature, [rng])[0]


def sample_responses_batch(params: PolicyParams, prompts, max_len: int, temperature: float,
                           rngs) -> list[list[int]]:
    """Sample several episodes in lockstep.

    Each episode draws from its own generator only while it is still live,
    so the result per episode is identical to sampling it alone with the
    same generator; batch composition cannot change outcomes.
    """
    if max_len < 1:
        raise PolicyError(f"max_len must be >= 1, got {max_len}")
    if temperature < 0:
        raise PolicyError("temperature must be >= 0")
    if len(prompts) != len(rngs):
        raise PolicyError("one generator per prompt is required")
    states = [list(p) for p in prompts]
    actions: list[list[int]] = [[] for _ in prompts]
    live = list(range(len(prompts)))
    k = params.k_ctx
    for _ in range(max_len):
        if not live:
            break
        win = np.stack([state_window(states[i], k) for i in live])
        logits = logits_for_windows(params, win)
        if temperature == 0:
            picks = np.argmax(logits, axis=1)
        else:
            p = np.exp(_log_softmax(logits / temperature))
            cdf = np.cumsum(p, axis=1)
            picks = [min(int(np.searchsorted(cdf[row], rngs[i].random(), side="right")),
                         params.vocab_size - 1)
                     for row, i in enumerate(live)]
        next_live = []
        for row, i in enumerate(live):
            a = int(picks[row])
            actions[i].append(a)
            states[i].append(a)
            if a != EOS_ID:
                next_live.append(i)
        live = next_live
    return actions


def sequence_log_probs(params: PolicyParams, prompt, actions) -> np.ndarray:
    """log pi(a_t | prompt, a_<t) for each action."""
    actions = np.asarray(actions, dtype=np.int64)
    if actions.min() < 0 or actions.max() >= params.vocab_size:
        raise PolicyError("action id outside vocabulary")
    win = response_windows(prompt, actions, params.k_ctx)
    logp = _log_softmax(logits_for_windows(params, win))
    return logp[np.arange(len(actions)), actions]


def value_estimates(params: PolicyParams, states) -> np.ndarray:
    """Scalar value for each state sequence."""
    win = np.stack([state_window(s, params.k_ctx) for s in states])
    _, h = trunk_forward(params, win)
    return h @ params.w_value


def values_for_windows(params: PolicyParams, windows: np.ndarray) -> np.ndarray:
    _, h = trunk_forward(params, windows)
    return h @ params.w_value


# ---------------------------------------------------------------------------
# Maximum-likelihood pretraining (the SFT stand-in)
# ---------------------------------------------------------------------------


@dataclass
class PretrainConfig:
    steps: int = 1500
    learning_rate: float = 0.5
    batch_size: int = 32
    seed: int = 0
    d_embed: int = 16
    context: int = 24
    hidden: int = 32


def _prediction_windows(token_ids: np.ndarray, k_ctx: int) -> np.ndarray:
    """Windows ending just before each position (the state that predicts it)."""
    win = context_windows(token_ids, k_ctx)
    inp = np.empty_like(win)
    inp[:, 0, :] = PAD_ID
    inp[:, 1:, :] = win[:, :-1, :]
    return inp


def mle_loss_and_grads(params: PolicyParams, windows: np.ndarray, targets: np.ndarray):
    """Cross-entropy of target tokens given their context windows."""
    m = len(targets)
    x, h = trunk_forward(params, windows)
    logp = _log_softmax(h @ params.w_policy)
    loss = float(-logp[np.arange(m), targets].mean())

    p = np.exp(logp)
    dz = p / m
    dz[np.arange(m), targets] -= 1.0 / m
    dh = dz @ params.w_policy.T
    da = dh * (1.0 - h ** 2)
    grads = {
        "emb": np.zeros_like(params.emb),
        "w_trunk": x.T @ da,
        "b_trunk": da.sum(axis=0),
        "w_policy": h.T @ dz,
        "w_value": np.zeros_like(params.w_value),
    }
    dx = (da @ params.w_trunk.T).reshape(m, params.k_ctx, -1)
    np.add.at(grads["emb"], windows, dx)
    grads["emb"][PAD_ID] = 0.0
    return loss, grads


def pretrain_policy(batch: TokenBatch, cfg: PretrainConfig, vocab_size: int) -> tuple[PolicyParams, list[float]]:
    """Teach the raw policy to imitate corpus responses given their prompts."""
    params = init_policy_params(vocab_size, cfg.seed, cfg.d_embed, cfg.context, cfg.hidden)
    win = _prediction_windows(batch.token_ids, cfg.context)
    rows, cols = np.nonzero(batch.activation_mask)
    all_windows = win[rows, cols]
    all_targets = batch.token_ids[rows, cols]

    rng = np.random.default_rng([cfg.seed, 29])
    losses = []
    for step in range(cfg.steps):
        idx = rng.choice(len(all_targets), size=min(cfg.batch_size * 8, len(all_targets)), replace=False)
        loss, grads = mle_loss_and_grads(params, all_windows[idx], all_targets[idx])
        if not np.isfinite(loss):
            raise TrainingDivergedError(step, loss)
        for name, g in grads.items():
            arr = getattr(params, name)
            arr -= cfg.learning_rate * g
        losses.append(loss)
    return params, losses


# ---------------------------------------------------------------------------
# Gradient verification
# ---------------------------------------------------------------------------


def check_gradients(params: PolicyParams, rollouts, ref: PolicyParams, cfg,
                    n_coords: int = 100, step: float = 1e-5, seed: int = 0,
                    tolerance: float = 1e-4) -> GradCheckReport:
    """Compare analytic policy-update gradients to central finite differences.

    The loss is the full update objective (clipped surrogate, value error,
    entropy bonus, KL term) on a fixed rollout batch. Returns a report
    naming the worst coordinate; report.passed is False above tolerance.
    """
    from .tppo import flatten_rollouts, ppo_loss_and_grads

    flat = flatten_rollouts(rollouts, ref, params.k_ctx)
    _, analytic, _ = ppo_loss_and_grads(params, flat, cfg)

    def loss_fn():
        return ppo_loss_and_grads(params, flat, cfg)[0]

    return compare_gradients(loss_fn, params.arrays(), analytic,
                             n_coords=n_coords, step=step, seed=seed, tolerance=tolerance)
