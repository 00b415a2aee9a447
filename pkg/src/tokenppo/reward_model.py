"""Token-level reward model: a 3-class per-token classifier.

The model scores each response token with a probability triple over the
reward categories {0 masked, 1 irrelevant, 2 relevant}. Training combines
two objectives on the class-balanced valid set:

  local   weighted cross-entropy on per-token categories,
          L = -(1/n) sum_i sum_{t in V} sum_c w_c 1[cat=c] log P(c)
  global  MSE between the per-episode mean token reward and the sentence
          reward, L = (1/n) sum_i (mean_{t in V} R(t) - R_global)^2

The printed global loss uses the argmax token reward, which has no gradient;
training therefore substitutes the expected reward sum_c c*P(c) and the
argmax form is reported for evaluation.

Everything is plain float64 numpy with hand-derived gradients so the
finite-difference gate can be exact.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit
from scipy.stats import rankdata

from .datagen import PAD_ID, TokenBatch

PROB_FLOOR = 1e-12
_CLASS_VALUES = np.array([0.0, 1.0, 2.0])


class RewardModelError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    """Training loss became non-finite."""

    def __init__(self, step: int, loss: float):
        super().__init__(f"training diverged at step {step}: loss={loss}")
        self.step = step


@dataclass
class RMParams:
    """Classifier parameters. The output layer is exactly 3 wide."""

    emb: np.ndarray       # [vocab, d_e]
    w_hidden: np.ndarray  # [d_e * k_ctx, h]
    b_hidden: np.ndarray  # [h]
    w_out: np.ndarray     # [h, 3]

    def __post_init__(self):
        if self.w_out.shape[1] != 3:
            raise RewardModelError(f"output layer must have width 3, got {self.w_out.shape[1]}")
        for name, arr in self.arrays().items():
            if not np.all(np.isfinite(arr)):
                raise RewardModelError(f"non-finite values in parameter {name}")

    @property
    def vocab_size(self) -> int:
        return self.emb.shape[0]

    @property
    def k_ctx(self) -> int:
        return self.w_hidden.shape[0] // self.emb.shape[1]

    def arrays(self) -> dict[str, np.ndarray]:
        return {"emb": self.emb, "w_hidden": self.w_hidden,
                "b_hidden": self.b_hidden, "w_out": self.w_out}

    def copy(self) -> "RMParams":
        return RMParams(**{k: v.copy() for k, v in self.arrays().items()})


def init_rm_params(vocab_size: int, seed: int, d_embed: int = 16, context: int = 24,
                   hidden: int = 32, scale: float = 0.1) -> RMParams:
    rng = np.random.default_rng([seed, 7])
    emb = rng.normal(0.0, scale, size=(vocab_size, d_embed))
    emb[PAD_ID] = 0.0  # padding embedding stays zero so left-pad never leaks in
    return RMParams(
        emb=emb,
        w_hidden=rng.normal(0.0, scale, size=(d_embed * context, hidden)),
        b_hidden=np.zeros(hidden),
        w_out=np.zeros((hidden, 3)),
    )


@dataclass
class RMOutput:
    """Per-token class probabilities and derived quantities."""

    class_probs: np.ndarray         # [n, T, 3]
    predicted_category: np.ndarray  # [n, T], argmax with ties to the lowest class
    expected_reward: np.ndarray     # [n, T], sum_c c * P(c)


@dataclass
class ValidSet:
    """Token positions that contribute to the reward-model loss."""

    membership: np.ndarray  # bool [n, T]
    kept_counts: dict[int, int]
    empty: bool = False


@dataclass
class RMTrainConfig:
    w0: float = 0.2
    w1: float = 1.0
    w2: float = 1.0
    lambda_local: float = 0.5
    lambda_global: float = 0.5
    learning_rate: float = 0.05
    steps: int = 2000
    batch_size: int = 32
    seed: int = 0
    d_embed: int = 16
    context: int = 24
    hidden: int = 32
    resample_valid: bool = True
    eval_every: int = 1

    def __post_init__(self):
        if min(self.w0, self.w1, self.w2) < 0:
            raise RewardModelError("class weights must be nonnegative")
        if self.lambda_local < 0 or self.lambda_global < 0:
            raise RewardModelError("loss weights must be nonnegative")
        if abs(self.lambda_local + self.lambda_global - 1.0) > 1e-9:
            raise RewardModelError("lambda_local + lambda_global must equal 1")

    @property
    def class_weights(self) -> np.ndarray:
        return np.array([self.w0, self.w1, self.w2])


@dataclass(frozen=True)
class LengthPenaltyConfig:
    """Sigmoid length penalty: alpha is the sharpness, sl the suggested length."""

    alpha: float = 1.0
    sl: int = 8

    def __post_init__(self):
        if self.alpha <= 0:
            raise RewardModelError(f"alpha must be positive, got {self.alpha}")
        if self.sl < 1:
            raise RewardModelError(f"sl must be >= 1, got {self.sl}")


# ---------------------------------------------------------------------------
# Forward pass
# ---------------------------------------------------------------------------


def context_windows(token_ids: np.ndarray, k_ctx: int) -> np.ndarray:
    """Window of the k_ctx trailing ids ending at each position, inclusive.

    Positions before the sequence start are filled with the padding id,
    whose embedding is pinned at zero.
    """
    n, T = token_ids.shape
    padded = np.concatenate(
        [np.full((n, k_ctx - 1), PAD_ID, dtype=np.int64), token_ids], axis=1
    )
    idx = np.arange(T)[:, None] + np.arange(k_ctx)[None, :]
    return padded[:, idx]


def _forward_cache(params: RMParams, token_ids: np.ndarray):
    if token_ids.min() < 0 or token_ids.max() >= params.vocab_size:
        raise RewardModelError(
            f"token id outside vocabulary [0, {params.vocab_size})"
        )
    win = context_windows(token_ids, params.k_ctx)              # [n, T, k]
    x = params.emb[win]
    x[win == PAD_ID] = 0.0  # padding is masked out, not merely zero-initialized
    x = x.reshape(win.shape[0], win.shape[1], -1)                # [n, T, k*d_e]
    h = np.tanh(x @ params.w_hidden + params.b_hidden)           # [n, T, hid]
    z = h @ params.w_out                                         # [n, T, 3]
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    probs = e / e.sum(axis=-1, keepdims=True)
    return win, x, h, probs


def rm_forward(params: RMParams, batch: TokenBatch) -> RMOutput:
    """Score every position of the batch; deterministic in (params, batch)."""
    _, _, _, probs = _forward_cache(params, batch.token_ids)
    return RMOutput(
        class_probs=probs,
        predicted_category=np.argmax(probs, axis=-1),
        expected_reward=probs @ _CLASS_VALUES,
    )


# ---------------------------------------------------------------------------
# Valid set
# ---------------------------------------------------------------------------


def build_valid_set(batch: TokenBatch, seed) -> ValidSet:
    """Class-balanced token mask.

    Starts from response tokens (activation and attention masks), then
    down-samples the majority class among {1, 2} until the kept ratio lies
    in [1:3, 3:1]. Category-0 response tokens are always kept. The draw is
    seeded and without replacement, so the kept count is exact.
    """
    member = (batch.activation_mask & batch.attention_mask).copy()
    cats = batch.token_categories
    n1 = int(((cats == 1) & member).sum())
    n2 = int(((cats == 2) & member).sum())
    if n1 > 0 and n2 > 0:
        if n1 > 3 * n2:
            _downsample(member, cats == 1, 3 * n2, seed)
        elif n2 > 3 * n1:
            _downsample(member, cats == 2, 3 * n1, seed)
    counts = {c: int(((cats == c) & member).sum()) for c in (0, 1, 2)}
    empty = not member.any()
    if empty:
        warnings.warn("valid set is empty: no response tokens survive masking")
    return ValidSet(membership=member, kept_counts=counts, empty=empty)


def _downsample(member: np.ndarray, class_mask: np.ndarray, keep: int, seed) -> None:
    rows, cols = np.nonzero(class_mask & member)
    rng = np.random.default_rng(seed)
    kept = rng.choice(len(rows), size=keep, replace=False)
    drop = np.ones(len(rows), dtype=bool)
    drop[kept] = False
    member[rows[drop], cols[drop]] = False


# ---------------------------------------------------------------------------
# Losses (value-only; gradients live in loss_and_grads)
# ---------------------------------------------------------------------------


def local_loss(out: RMOutput, batch: TokenBatch, vs: ValidSet, cfg: RMTrainConfig) -> float:
    """Weighted cross-entropy over the valid set, averaged over episodes."""
    m = vs.membership
    if not m.any():
        warnings.warn("local loss over an empty valid set is 0")
        return 0.0
    n = batch.n_episodes
    cats = batch.token_categories
    pc = np.take_along_axis(out.class_probs, cats[..., None], axis=2)[..., 0]
    wc = cfg.class_weights[cats]
    return float(-(wc * np.log(np.maximum(pc, PROB_FLOOR)) * m).sum() / n)


def global_loss(out: RMOutput, batch: TokenBatch, vs: ValidSet, variant: str = "train") -> float:
    """Squared gap between mean valid-set token reward and the sentence reward.

    ``variant="train"`` uses the differentiable expected reward;
    ``variant="eval"`` uses the argmax category as printed. Episodes whose
    valid set is empty are excluded (the mean is undefined there).
    """
    if variant == "train":
        reward = out.expected_reward
    elif variant == "eval":
        reward = out.predicted_category.astype(float)
    else:
        raise RewardModelError(f"unknown global loss variant {variant!r}")
    m = vs.membership
    sizes = m.sum(axis=1)
    included = sizes > 0
    if not included.any():
        warnings.warn("global loss: every episode has an empty valid set")
        return 0.0
    if not included.all():
        warnings.warn(f"global loss: excluded {int((~included).sum())} episodes with empty valid set")
    means = (reward * m).sum(axis=1) / np.maximum(sizes, 1)
    resid = means[included] - batch.sentence_rewards[included]
    return float((resid ** 2).mean())


def total_loss(out: RMOutput, batch: TokenBatch, vs: ValidSet, cfg: RMTrainConfig,
               variant: str = "train") -> float:
    return cfg.lambda_local * local_loss(out, batch, vs, cfg) + \
        cfg.lambda_global * global_loss(out, batch, vs, variant)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def loss_and_grads(params: RMParams, batch: TokenBatch, vs: ValidSet, cfg: RMTrainConfig):
    """Training-variant total loss and its analytic gradients."""
    win, x, h, probs = _forward_cache(params, batch.token_ids)
    n, T, _ = probs.shape
    cats = batch.token_categories
    m = vs.membership

    dz = np.zeros_like(probs)

    # local: weighted cross-entropy
    pc = np.take_along_axis(probs, cats[..., None], axis=2)[..., 0]
    wc = cfg.class_weights[cats]
    l_local = float(-(wc * np.log(np.maximum(pc, PROB_FLOOR)) * m).sum() / n)
    onehot = np.eye(3)[cats]
    flow = m & (pc >= PROB_FLOOR)  # the floor freezes the gradient below it
    coeff = (cfg.lambda_local / n) * wc * flow
    dz += coeff[..., None] * (probs - onehot)

    # global (training variant): expected reward vs sentence reward
    er = probs @ _CLASS_VALUES
    sizes = m.sum(axis=1)
    included = sizes > 0
    n_inc = int(included.sum())
    if n_inc:
        means = (er * m).sum(axis=1) / np.maximum(sizes, 1)
        resid = np.where(included, means - batch.sentence_rewards, 0.0)
        l_global = float((resid[included] ** 2).mean())
        d_mean = 2.0 * resid / n_inc
        d_er = (d_mean / np.maximum(sizes, 1))[:, None] * m
        dz += cfg.lambda_global * d_er[..., None] * probs * (
            _CLASS_VALUES[None, None, :] - er[..., None]
        )
    else:
        l_global = 0.0

    total = cfg.lambda_local * l_local + cfg.lambda_global * l_global

    dz_f = dz.reshape(-1, 3)
    h_f = h.reshape(-1, h.shape[-1])
    dh = dz_f @ params.w_out.T
    dw_out = h_f.T @ dz_f
    da = dh * (1.0 - h_f ** 2)
    x_f = x.reshape(-1, x.shape[-1])
    dw_hidden = x_f.T @ da
    db_hidden = da.sum(axis=0)
    dx = (da @ params.w_hidden.T).reshape(n, T, params.k_ctx, -1)
    demb = np.zeros_like(params.emb)
    np.add.at(demb, win, dx)
    demb[PAD_ID] = 0.0

    grads = {"emb": demb, "w_hidden": dw_hidden, "b_hidden": db_hidden, "w_out": dw_out}
    return total, grads, {"local": l_local, "global": l_global}


@dataclass
class RMCurveRow:
    step: int
    train_loss: float
    eval_loss: float
    auc: float | None
    seed: int


@dataclass
class RMTrainResult:
    params: RMParams
    curve: list[RMCurveRow] = field(default_factory=list)


def train_reward_model(train_batch: TokenBatch, cfg: RMTrainConfig, vocab_size: int,
                       eval_batch: TokenBatch | None = None) -> RMTrainResult:
    """SGD on the combined loss; deterministic per cfg.seed.

    The balancing mask is re-sampled for every minibatch unless
    ``cfg.resample_valid`` is off, in which case one mask drawn over the
    full training batch is reused. Divergence (non-finite loss) aborts.
    """
    params = init_rm_params(vocab_size, cfg.seed, cfg.d_embed, cfg.context, cfg.hidden)
    rng = np.random.default_rng([cfg.seed, 11])
    n = train_batch.n_episodes
    curve: list[RMCurveRow] = []

    fixed_vs = None if cfg.resample_valid else build_valid_set(train_batch, [cfg.seed, 13])
    eval_vs = build_valid_set(eval_batch, [cfg.seed, 17]) if eval_batch is not None else None

    for step in range(cfg.steps):
        idx = rng.choice(n, size=min(cfg.batch_size, n), replace=False)
        mini = train_batch.subset(np.sort(idx))
        if cfg.resample_valid:
            vs = build_valid_set(mini, [cfg.seed, 13, step])
        else:
            vs = ValidSet(fixed_vs.membership[np.sort(idx)], fixed_vs.kept_counts)
        loss, grads, _ = loss_and_grads(params, mini, vs, cfg)
        if not np.isfinite(loss):
            raise TrainingDivergedError(step, loss)
        for name, g in grads.items():
            arr = getattr(params, name)
            arr -= cfg.learning_rate * g

        if step % cfg.eval_every == 0 or step == cfg.steps - 1:
            if eval_batch is not None:
                out = rm_forward(params, eval_batch)
                e_loss = total_loss(out, eval_batch, eval_vs, cfg, variant="eval")
                auc = rm_auc(out, eval_batch, eval_vs)
            else:
                e_loss, auc = float("nan"), None
            curve.append(RMCurveRow(step, loss, e_loss, auc, cfg.seed))

    return RMTrainResult(params=params, curve=curve)


# ---------------------------------------------------------------------------
# Prediction, penalty, metrics
# ---------------------------------------------------------------------------


def predict_token_rewards(params: RMParams, batch: TokenBatch) -> np.ndarray:
    """Argmax category per token, forced to 0 outside the activation mask."""
    out = rm_forward(params, batch)
    return np.where(batch.activation_mask, out.predicted_category, 0)


def lwp(l, cfg: LengthPenaltyConfig):
    """Length-weighted penalty 1 / (1 + exp(alpha*(l - sl) - 6)).

    Approximately 1 up to the suggested length, then decays toward 0 with
    sharpness alpha. Accepts scalars or arrays of positions (1-indexed).
    """
    l = np.asarray(l, dtype=float)
    if np.any(l < 1):
        raise RewardModelError("token positions are 1-indexed")
    out = expit(-(cfg.alpha * (l - cfg.sl) - 6.0))
    return float(out) if out.ndim == 0 else out


def apply_length_penalty(rewards: np.ndarray, cfg: LengthPenaltyConfig) -> np.ndarray:
    """Scale per-token rewards by the penalty at their 1-indexed position."""
    rewards = np.asarray(rewards, dtype=float)
    positions = np.arange(1, rewards.shape[-1] + 1)
    return rewards * lwp(positions, cfg)


def rm_auc(out: RMOutput, batch: TokenBatch, vs: ValidSet) -> float | None:
    """ROC-AUC separating relevant from irrelevant tokens on the valid set.

    The score is P(2) / (P(1) + P(2)); masked tokens are excluded. Returns
    None when only one class is present (AUC undefined).
    """
    m = vs.membership & np.isin(batch.token_categories, (1, 2))
    if not m.any():
        return None
    cats = batch.token_categories[m]
    probs = out.class_probs[m]
    pos = cats == 2
    if pos.all() or not pos.any():
        return None
    denom = probs[:, 1] + probs[:, 2]
    scores = np.divide(probs[:, 2], denom, out=np.full(len(denom), 0.5), where=denom > 0)
    ranks = rankdata(scores)
    n_pos = int(pos.sum())
    n_neg = len(scores) - n_pos
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def rm_token_accuracy(params: RMParams, batch: TokenBatch) -> float:
    """Fraction of response tokens whose predicted category is exact."""
    pred = predict_token_rewards(params, batch)
    m = batch.activation_mask
    return float((pred[m] == batch.token_categories[m]).mean())
