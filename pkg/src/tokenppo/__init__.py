"""Token-level PPO workbench for query generation.

Modules:
    datagen       synthetic corpus, rule-oracle annotation, tokenization, batching
    reward_model  token-level 3-class reward model with dual losses and length penalty
    policy        tiny autoregressive policy-and-value network
    tppo          token-level PPO trainer and the closed-form tabular oracle
    harness       metrics, ablations, plot data, pipeline assembly
    cli           command-line entry points
"""

__version__ = "0.1.0"

from .datagen import (  # noqa: F401
    AnnotatorConfig,
    CorpusConfig,
    EpisodeRecord,
    TokenBatch,
    Tokenizer,
    WordAnnotation,
    annotate_episode,
    generate_corpus,
    load_dataset,
    map_word_rewards,
    store_dataset,
    tokenize_word,
)
from .reward_model import (  # noqa: F401
    LengthPenaltyConfig,
    RMParams,
    RMTrainConfig,
    apply_length_penalty,
    build_valid_set,
    lwp,
    rm_auc,
    rm_forward,
    train_reward_model,
)
from .policy import PolicyParams, init_policy_params, sample_response  # noqa: F401
from .tppo import (  # noqa: F401
    TabularInstance,
    TPPOConfig,
    clipped_objective,
    closed_form_optimal_policy,
    compute_advantages,
    kl_regularized_objective,
    ppo_ratio,
    train_tppo,
    verify_lemma1,
)
from .harness import relevance_rate, win_tie_lose  # noqa: F401
