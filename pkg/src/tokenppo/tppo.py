"""Token-level PPO: advantages, clipped updates, and the exact tabular oracle.

Two reward modes share one trainer. Token mode feeds each generated token
its own penalized reward from the token reward model; sentence mode is the
sparse baseline that places one aggregated reward on the final token and
zero elsewhere.

The tabular side treats a single state with an enumerable action set, where
the KL-regularized objective

    J(pi) = sum_a pi(a) A(a) - beta * KL(pi || pi_ref)

has the closed-form maximizer pi*(a) = pi_ref(a) exp(A(a)/beta) / Z. The
oracle verifies both optimality (against brute-force perturbations) and the
first-order stationarity condition A(a) - beta*(1 + log(pi*/pi_ref)) being
constant across actions.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .datagen import (
    CAT_IRRELEVANT,
    CAT_RELEVANT,
    EOS_ID,
    PAD_ID,
    TokenBatch,
    Vocab,
    encode_prompt,
)
from .policy import (
    PolicyParams,
    _log_softmax,
    logits_for_windows,
    response_windows,
    sample_responses_batch,
    values_for_windows,
)
from .reward_model import LengthPenaltyConfig, RMParams, lwp, predict_token_rewards

_RATIO_CLAMP = 60.0


class TPPOError(ValueError):
    pass


@dataclass
class TPPOConfig:
    clip_epsilon: float = 0.2
    kl_beta: float = 0.05
    gamma: float = 1.0
    lambda_gae: float = 0.95
    advantage_mode: str = "monte_carlo"   # or "gae"
    reward_mode: str = "token"            # or "sentence"
    value_coef: float = 0.5
    entropy_coef: float = 0.003
    epochs: int = 4
    learning_rate: float = 0.05
    seed: int = 0
    iterations: int = 200
    batch_size: int = 64
    max_len: int = 40
    temperature: float = 1.0
    minibatch_size: int = 256
    center_advantages: bool = False
    normalize_advantages: bool = True
    max_grad_norm: float = 1.0
    kl_stop: float = 1.0
    reward_irrelevant: float = -1.0
    reward_relevant: float = 1.0
    sentence_tau: float = 0.5

    def __post_init__(self):
        if not 0 < self.clip_epsilon < 1:
            raise TPPOError(f"clip epsilon must lie in (0,1), got {self.clip_epsilon}")
        if self.kl_beta <= 0:
            raise TPPOError(f"KL coefficient must be positive, got {self.kl_beta}")
        if not 0 < self.gamma <= 1:
            raise TPPOError(f"discount must lie in (0,1], got {self.gamma}")
        if not 0 <= self.lambda_gae <= 1:
            raise TPPOError(f"GAE lambda must lie in [0,1], got {self.lambda_gae}")
        if self.advantage_mode not in ("monte_carlo", "gae"):
            raise TPPOError(f"unknown advantage mode {self.advantage_mode!r}")
        if self.reward_mode not in ("token", "sentence"):
            raise TPPOError(f"unknown reward mode {self.reward_mode!r}")


@dataclass
class Rollout:
    """One sampled episode with everything the update step needs."""

    prompt_ids: list[int]
    action_ids: list[int]
    ref_log_probs: np.ndarray   # behavior log pi_ref(a_t | s_t)
    rewards: np.ndarray         # per-token penalized rewards R'_t
    values: np.ndarray          # V(s_t)
    returns: np.ndarray | None = None
    advantages: np.ndarray | None = None
    done: bool = False


# ---------------------------------------------------------------------------
# Advantages
# ---------------------------------------------------------------------------


def discounted_returns(rewards: np.ndarray, gamma: float) -> np.ndarray:
    out = np.zeros(len(rewards))
    acc = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        acc = rewards[t] + gamma * acc
        out[t] = acc
    return out


def compute_advantages(rollout: Rollout, cfg: TPPOConfig) -> Rollout:
    """Fill returns and advantages.

    monte_carlo: A_t = G_t - V(s_t) with G the discounted reward-to-go.
    gae: the lambda-weighted TD recursion with terminal value 0. Returns
    are always the Monte-Carlo reward-to-go, so G_t = R'_t + gamma*G_{t+1}
    holds in either mode. Centering happens at batch level, not here.
    """
    r = np.asarray(rollout.rewards, dtype=float)
    v = np.asarray(rollout.values, dtype=float)
    g = discounted_returns(r, cfg.gamma)
    if cfg.advantage_mode == "monte_carlo":
        adv = g - v
    else:
        v_next = np.append(v[1:], 0.0)
        delta = r + cfg.gamma * v_next - v
        adv = np.zeros_like(delta)
        acc = 0.0
        for t in range(len(delta) - 1, -1, -1):
            acc = delta[t] + cfg.gamma * cfg.lambda_gae * acc
            adv[t] = acc
    return replace(rollout, returns=g, advantages=adv)


# ---------------------------------------------------------------------------
# Surrogate pieces
# ---------------------------------------------------------------------------


def ppo_ratio(logp_new: float, logp_ref: float) -> float:
    """exp(logp_new - logp_ref), overflow-guarded by clamping the exponent."""
    d = logp_new - logp_ref
    if abs(d) > _RATIO_CLAMP:
        warnings.warn(f"ppo_ratio exponent clamped from {d:.3g}")
        d = float(np.clip(d, -_RATIO_CLAMP, _RATIO_CLAMP))
    return float(np.exp(d))


def clipped_objective(ratio: float, advantage: float, epsilon: float) -> float:
    """min(r*A, clip(r, 1-eps, 1+eps)*A), the per-token surrogate."""
    if ratio <= 0:
        raise TPPOError(f"ratio must be positive, got {ratio}")
    clipped = min(max(ratio, 1.0 - epsilon), 1.0 + epsilon)
    return min(ratio * advantage, clipped * advantage)


# ---------------------------------------------------------------------------
# Tabular oracle for the KL-regularized objective
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TabularInstance:
    """Single-state decision problem: reference policy, advantages, beta."""

    pi_ref: np.ndarray
    advantages: np.ndarray
    beta: float

    def __post_init__(self):
        pi = np.asarray(self.pi_ref, dtype=float)
        adv = np.asarray(self.advantages, dtype=float)
        object.__setattr__(self, "pi_ref", pi)
        object.__setattr__(self, "advantages", adv)
        if pi.ndim != 1 or adv.shape != pi.shape:
            raise TPPOError("pi_ref and advantages must be equal-length vectors")
        if np.any(pi <= 0):
            raise TPPOError("pi_ref must be strictly positive")
        if abs(pi.sum() - 1.0) > 1e-9:
            raise TPPOError("pi_ref must sum to 1")
        if self.beta <= 0:
            raise TPPOError("beta must be positive")

    @property
    def m(self) -> int:
        return len(self.pi_ref)


def kl_regularized_objective(inst: TabularInstance, pi: np.ndarray) -> float:
    """sum_a pi(a) A(a) - beta * KL(pi || pi_ref); -inf on support violations."""
    pi = np.asarray(pi, dtype=float)
    if pi.shape != inst.pi_ref.shape:
        raise TPPOError("pi has the wrong number of actions")
    if np.any(pi < -1e-12) or abs(pi.sum() - 1.0) > 1e-9:
        raise TPPOError("pi is not a probability distribution")
    pi = np.clip(pi, 0.0, None)
    support = pi > 0
    if np.any(support & (inst.pi_ref <= 0)):
        return float("-inf")
    kl = float(np.sum(pi[support] * np.log(pi[support] / inst.pi_ref[support])))
    return float(pi @ inst.advantages - inst.beta * kl)


def closed_form_optimal_policy(inst: TabularInstance) -> np.ndarray:
    """pi*(a) = pi_ref(a) exp(A(a)/beta) / Z, stabilized against overflow."""
    w = inst.advantages / inst.beta
    w = w - w.max()
    unnorm = inst.pi_ref * np.exp(w)
    return unnorm / unnorm.sum()


def _perturbation_candidates(inst: TabularInstance, pi_star: np.ndarray,
                             rng: np.random.Generator, n: int) -> np.ndarray:
    """Mix of random simplex draws, shrunk mixtures around pi*, and pairwise
    mass exchanges on a delta grid."""
    m = inst.m
    taus = np.array([1e-4, 1e-3, 1e-2, 0.1, 0.3, 0.7])
    n_mix = min(n // 3, 2000)
    q = rng.dirichlet(np.ones(m), size=n_mix)
    tau = taus[rng.integers(0, len(taus), size=n_mix)][:, None]
    mix = (1.0 - tau) * pi_star + tau * q

    exchanges = []
    deltas = np.geomspace(1e-6, 0.2, 12)
    for i in range(m):
        for j in range(m):
            if i == j:
                continue
            for d in deltas:
                step = min(d, pi_star[j])
                cand = pi_star.copy()
                cand[i] += step
                cand[j] -= step
                exchanges.append(cand)
    exchanges = np.array(exchanges) if exchanges else np.zeros((0, m))

    n_rand = max(n - len(mix) - len(exchanges), 0)
    rand = rng.dirichlet(np.ones(m), size=n_rand)
    return np.vstack([mix, exchanges, rand])[:n]


def _objective_rows(inst: TabularInstance, candidates: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(candidates > 0,
                         candidates * np.log(candidates / inst.pi_ref), 0.0)
    return candidates @ inst.advantages - inst.beta * terms.sum(axis=1)


def lemma1_trial(inst: TabularInstance, pi: np.ndarray, rng: np.random.Generator,
                 n_candidates: int = 10_000) -> dict:
    """Optimality margin and stationarity spread for a claimed optimum ``pi``."""
    candidates = _perturbation_candidates(inst, pi, rng, n_candidates)
    obj_pi = kl_regularized_objective(inst, pi / pi.sum())
    worst_margin = float(obj_pi - _objective_rows(inst, candidates).max())
    grad = inst.advantages - inst.beta * (1.0 + np.log(pi / inst.pi_ref))
    spread = float(grad.max() - grad.min())
    return {"margin": worst_margin, "stationarity_spread": spread}


@dataclass
class Lemma1Report:
    trials: int
    n_candidates: int
    margin_tolerance: float
    stationarity_tolerance: float
    worst_margin: float
    worst_spread: float
    violations: list[dict] = field(default_factory=list)
    elapsed_seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return not self.violations


def random_instance(rng: np.random.Generator, max_actions: int = 8) -> TabularInstance:
    m = int(rng.integers(2, max_actions + 1))
    pi_ref = rng.dirichlet(np.ones(m))
    pi_ref = np.maximum(pi_ref, 1e-3)
    pi_ref = pi_ref / pi_ref.sum()
    return TabularInstance(
        pi_ref=pi_ref,
        advantages=rng.uniform(-3.0, 3.0, size=m),
        beta=float(rng.uniform(0.1, 5.0)),
    )


def verify_lemma1(seed: int, trials: int, n_candidates: int = 10_000,
                  margin_tol: float = 1e-9, stationarity_tol: float = 1e-7) -> Lemma1Report:
    """Check the closed-form policy on random instances.

    Per instance: (a) its objective beats every one of ``n_candidates``
    perturbed distributions within -margin_tol, and (b) the first-order
    condition is constant across actions within stationarity_tol. Violating
    instances are serialized into the report.
    """
    if trials < 1:
        raise TPPOError(f"trials must be >= 1, got {trials}")
    t0 = time.perf_counter()
    worst_margin = np.inf
    worst_spread = 0.0
    violations = []
    for i in range(trials):
        rng = np.random.default_rng([seed, i])
        inst = random_instance(rng)
        pi_star = closed_form_optimal_policy(inst)
        res = lemma1_trial(inst, pi_star, rng, n_candidates)
        worst_margin = min(worst_margin, res["margin"])
        worst_spread = max(worst_spread, res["stationarity_spread"])
        if res["margin"] < -margin_tol or res["stationarity_spread"] > stationarity_tol:
            violations.append({
                "trial": i,
                "pi_ref": inst.pi_ref.tolist(),
                "advantages": inst.advantages.tolist(),
                "beta": inst.beta,
                **res,
            })
    return Lemma1Report(
        trials=trials, n_candidates=n_candidates,
        margin_tolerance=margin_tol, stationarity_tolerance=stationarity_tol,
        worst_margin=float(worst_margin), worst_spread=float(worst_spread),
        violations=violations, elapsed_seconds=time.perf_counter() - t0,
    )


# ---------------------------------------------------------------------------
# Flattened update batches
# ---------------------------------------------------------------------------


@dataclass
class FlatBatch:
    """Token-level view of a rollout batch for minibatch updates."""

    windows: np.ndarray       # [M, k_ctx]
    actions: np.ndarray       # [M]
    behavior_logp: np.ndarray  # [M]
    advantages: np.ndarray    # [M]
    returns: np.ndarray       # [M]
    ref_logp: np.ndarray      # [M, vocab], full reference distribution

    def subset(self, idx) -> "FlatBatch":
        return FlatBatch(self.windows[idx], self.actions[idx], self.behavior_logp[idx],
                         self.advantages[idx], self.returns[idx], self.ref_logp[idx])

    @property
    def n_tokens(self) -> int:
        return len(self.actions)


def flatten_rollouts(rollouts: list[Rollout], ref: PolicyParams, k_ctx: int) -> FlatBatch:
    windows, actions, blp, adv, ret = [], [], [], [], []
    for r in rollouts:
        if r.advantages is None or r.returns is None:
            raise TPPOError("rollout advantages not computed; call compute_advantages first")
        windows.append(response_windows(r.prompt_ids, r.action_ids, k_ctx))
        actions.append(np.asarray(r.action_ids, dtype=np.int64))
        blp.append(r.ref_log_probs)
        adv.append(r.advantages)
        ret.append(r.returns)
    w = np.concatenate(windows)
    ref_logp = _log_softmax(logits_for_windows(ref, w))
    return FlatBatch(w, np.concatenate(actions), np.concatenate(blp),
                     np.concatenate(adv), np.concatenate(ret), ref_logp)


def ppo_loss_and_grads(params: PolicyParams, flat: FlatBatch, cfg: TPPOConfig):
    """Update loss and analytic gradients over a flattened token batch.

    loss = -mean surrogate + value_coef * value MSE
           - entropy_coef * mean entropy + kl_beta * mean KL(pi || pi_ref)

    The KL term is exact (the action set is small enough to enumerate),
    which realizes the reward-side KL penalty: the sampled form is zero at
    collection time because the collector is the refreshed reference.
    """
    m = flat.n_tokens
    x = params.emb[flat.windows]
    x[flat.windows == PAD_ID] = 0.0
    x = x.reshape(m, -1)
    h = np.tanh(x @ params.w_trunk + params.b_trunk)
    logp = _log_softmax(h @ params.w_policy)
    p = np.exp(logp)
    rows = np.arange(m)

    lp_a = logp[rows, flat.actions]
    diff = np.clip(lp_a - flat.behavior_logp, -_RATIO_CLAMP, _RATIO_CLAMP)
    ratio = np.exp(diff)
    unclipped = ratio * flat.advantages
    clipped = np.clip(ratio, 1.0 - cfg.clip_epsilon, 1.0 + cfg.clip_epsilon) * flat.advantages
    surr = np.minimum(unclipped, clipped)
    policy_loss = -float(surr.mean())

    v = h @ params.w_value
    vdiff = v - flat.returns
    value_loss = cfg.value_coef * float((vdiff ** 2).mean())

    entropy = -(p * logp).sum(axis=1)
    entropy_loss = -cfg.entropy_coef * float(entropy.mean())

    kl = (p * (logp - flat.ref_logp)).sum(axis=1)
    kl_loss = cfg.kl_beta * float(kl.mean())

    loss = policy_loss + value_loss + entropy_loss + kl_loss

    # gradients through the logits
    active = (unclipped <= clipped).astype(float)
    g_surr = -(ratio * flat.advantages * active) / m        # d policy_loss / d lp_a
    dz = g_surr[:, None] * (-p)
    dz[rows, flat.actions] += g_surr
    dz += (cfg.entropy_coef / m) * p * (logp + entropy[:, None])
    dz += (cfg.kl_beta / m) * p * ((logp - flat.ref_logp) - kl[:, None])

    dv = cfg.value_coef * 2.0 * vdiff / m
    dh = dz @ params.w_policy.T + dv[:, None] * params.w_value[None, :]
    da = dh * (1.0 - h ** 2)
    grads = {
        "emb": np.zeros_like(params.emb),
        "w_trunk": x.T @ da,
        "b_trunk": da.sum(axis=0),
        "w_policy": h.T @ dz,
        "w_value": h.T @ dv,
    }
    dx = (da @ params.w_trunk.T).reshape(m, params.k_ctx, -1)
    np.add.at(grads["emb"], flat.windows, dx)
    grads["emb"][PAD_ID] = 0.0

    parts = {"policy": policy_loss, "value": value_loss,
             "entropy": entropy_loss, "kl": kl_loss}
    return loss, grads, parts


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale gradients in place so their global norm is at most max_norm."""
    total = float(np.sqrt(sum(float((g ** 2).sum()) for g in grads.values())))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


def mean_exact_kl(params: PolicyParams, flat: FlatBatch) -> float:
    """Mean over states of KL(pi_params || pi_ref) on the flat batch."""
    logp = _log_softmax(logits_for_windows(params, flat.windows))
    p = np.exp(logp)
    return float((p * (logp - flat.ref_logp)).sum(axis=1).mean())


# ---------------------------------------------------------------------------
# Rollout scoring
# ---------------------------------------------------------------------------


def rollout_batch(rollouts: list[Rollout]) -> TokenBatch:
    """Pack sampled sequences into a TokenBatch for reward-model scoring."""
    seqs = [list(r.prompt_ids) + list(r.action_ids) for r in rollouts]
    T = max(len(s) for s in seqs)
    n = len(seqs)
    ids = np.full((n, T), PAD_ID, dtype=np.int64)
    attention = np.zeros((n, T), dtype=bool)
    activation = np.zeros((n, T), dtype=bool)
    for i, (r, s) in enumerate(zip(rollouts, seqs)):
        ids[i, : len(s)] = s
        attention[i, : len(s)] = True
        activation[i, len(r.prompt_ids) : len(s)] = True
    return TokenBatch(ids, attention, activation,
                      np.zeros((n, T), dtype=np.int64), np.ones(n, dtype=np.int64))


def score_rollouts(rm: RMParams, rollouts: list[Rollout], penalty: LengthPenaltyConfig,
                   cfg: TPPOConfig):
    """Per-token penalized rewards plus the sparse sentence-mode alternative.

    Returns (token_rewards, sentence_rewards, predicted_cats) as lists of
    per-episode arrays. Category 0 contributes zero reward; categories 1/2
    map to the configured scalar values, then the length penalty applies at
    each 1-indexed response position. The sentence variant aggregates the
    predicted categories with the tau rule and pays out on the final token
    only, with no length penalty.
    """
    batch = rollout_batch(rollouts)
    cats_grid = predict_token_rewards(rm, batch)
    value_map = np.array([0.0, cfg.reward_irrelevant, cfg.reward_relevant])

    token_rewards, sentence_rewards, cats_out = [], [], []
    for i, r in enumerate(rollouts):
        L = len(r.action_ids)
        cats = cats_grid[i, len(r.prompt_ids) : len(r.prompt_ids) + L]
        raw = value_map[cats]
        token_rewards.append(raw * lwp(np.arange(1, L + 1), penalty))

        content = cats[np.isin(cats, (CAT_IRRELEVANT, CAT_RELEVANT))]
        if len(content) and (content == CAT_RELEVANT).mean() >= cfg.sentence_tau:
            s_val = cfg.reward_relevant
        else:
            s_val = cfg.reward_irrelevant
        sparse = np.zeros(L)
        sparse[-1] = s_val
        sentence_rewards.append(sparse)
        cats_out.append(cats)
    return token_rewards, sentence_rewards, cats_out


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class TPPOCurveRow:
    iteration: int
    mean_reward: float
    reward_std: float
    mean_kl: float
    mean_len: float
    seed: int
    mode: str


@dataclass
class TPPOTrainResult:
    params: PolicyParams
    curve: list[TPPOCurveRow]
    early_stopped: bool = False
    stop_reason: str | None = None


def train_tppo(policy: PolicyParams, rm: RMParams, data, cfg: TPPOConfig, *,
               vocab: Vocab, tok, penalty: LengthPenaltyConfig) -> TPPOTrainResult:
    """Iterated rollout / advantage / clipped-surrogate training.

    The reference policy is refreshed to the current policy at the top of
    every outer iteration and is both the rollout collector and the KL
    anchor. The logged mean_reward is always the token-level penalized
    reward, measured identically in both reward modes so their curves are
    directly comparable; sentence mode merely trains on its sparse signal.
    """
    if not data:
        raise TPPOError("no training episodes")
    params = policy.copy()
    k_ctx = params.k_ctx
    prompts = [encode_prompt(r.prompt_words, tok, vocab) for r in data]
    curve: list[TPPOCurveRow] = []
    early, reason = False, None

    for it in range(cfg.iterations):
        ref = params.copy()
        rng_it = np.random.default_rng([cfg.seed, 31, it])
        idx = np.sort(rng_it.choice(len(data), size=min(cfg.batch_size, len(data)), replace=False))
        batch_prompts = [prompts[i] for i in idx]
        rngs = [np.random.default_rng([cfg.seed, 37, it, int(i)]) for i in idx]
        sampled = sample_responses_batch(ref, batch_prompts, cfg.max_len, cfg.temperature, rngs)

        rollouts = []
        for prompt, actions in zip(batch_prompts, sampled):
            win = response_windows(prompt, actions, k_ctx)
            logp = _log_softmax(logits_for_windows(ref, win))
            lp = logp[np.arange(len(actions)), actions]
            values = values_for_windows(ref, win)
            rollouts.append(Rollout(
                prompt_ids=prompt, action_ids=actions, ref_log_probs=lp,
                rewards=np.zeros(len(actions)), values=values,
                done=bool(actions and actions[-1] == EOS_ID),
            ))

        token_r, sentence_r, _ = score_rollouts(rm, rollouts, penalty, cfg)
        train_r = token_r if cfg.reward_mode == "token" else sentence_r
        rollouts = [compute_advantages(replace(r, rewards=tr), cfg)
                    for r, tr in zip(rollouts, train_r)]
        if cfg.center_advantages:
            mean_adv = np.concatenate([r.advantages for r in rollouts]).mean()
            rollouts = [replace(r, advantages=r.advantages - mean_adv) for r in rollouts]
        if cfg.normalize_advantages:
            # scale only, no re-centering: zero-advantage actions (stopping in
            # the reward-dead region) must stay exactly neutral
            scale = np.concatenate([r.advantages for r in rollouts]).std() + 1e-8
            rollouts = [replace(r, advantages=r.advantages / scale) for r in rollouts]

        flat = flatten_rollouts(rollouts, ref, k_ctx)
        rng_up = np.random.default_rng([cfg.seed, 41, it])
        for _ in range(cfg.epochs):
            perm = rng_up.permutation(flat.n_tokens)
            for start in range(0, flat.n_tokens, cfg.minibatch_size):
                mb = flat.subset(perm[start : start + cfg.minibatch_size])
                _, grads, _ = ppo_loss_and_grads(params, mb, cfg)
                clip_gradients(grads, cfg.max_grad_norm)
                for name, g in grads.items():
                    arr = getattr(params, name)
                    arr -= cfg.learning_rate * g

        per_ep_mean = np.array([r.mean() if len(r) else 0.0 for r in token_r])
        mean_kl = mean_exact_kl(params, flat)
        curve.append(TPPOCurveRow(
            iteration=it,
            mean_reward=float(np.concatenate(token_r).mean()),
            reward_std=float(per_ep_mean.std()),
            mean_kl=mean_kl,
            mean_len=float(np.mean([len(r.action_ids) for r in rollouts])),
            seed=cfg.seed, mode=cfg.reward_mode,
        ))
        if mean_kl > cfg.kl_stop:
            early, reason = True, f"KL {mean_kl:.4f} exceeded threshold {cfg.kl_stop} at iteration {it}"
            warnings.warn(reason)
            break

    return TPPOTrainResult(params=params, curve=curve, early_stopped=early, stop_reason=reason)
