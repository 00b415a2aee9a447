"""Flat key-value run configuration.

Config files are plain text, one ``key = value`` per line, ``#`` comments.
Keys live in a single flat namespace (the dots are just naming convention).
Unknown keys are rejected so typos fail loudly. The resolved mapping is
echoed into every output artifact.
"""

from __future__ import annotations

from .datagen import AnnotatorConfig, CorpusConfig, get_tokenizer
from .policy import PretrainConfig
from .reward_model import LengthPenaltyConfig, RMTrainConfig
from .tppo import TPPOConfig


class ConfigError(ValueError):
    pass


DEFAULTS: dict = {
    "seed": 0,
    # corpus
    "corpus.train_episodes": 512,
    "corpus.eval_episodes": 200,
    "corpus.data_seed": 0,
    "corpus.words_per_topic": 4,
    "corpus.min_history": 1,
    "corpus.max_history": 8,
    "corpus.max_interests": 2,
    "corpus.min_response_words": 3,
    "corpus.max_response_words": 5,
    "corpus.on_topic_rate": 0.7,
    "corpus.separator_rate": 0.15,
    "corpus.fragment_rate": 0.12,
    "corpus.target_query_num": 3,
    # annotator
    "annotator.tau": 0.5,
    # tokenizer / shared model scale
    "tokenizer.name": "chunk2",
    "model.d_embed": 16,
    "model.context": 24,
    "model.hidden": 32,
    # reward model training
    "rm.w0": 0.2,
    "rm.w1": 1.0,
    "rm.w2": 1.0,
    "rm.lambda_local": 0.5,
    "rm.learning_rate": 0.05,
    "rm.steps": 2000,
    "rm.batch_size": 32,
    "rm.eval_every": 10,
    "rm.resample_valid": True,
    # length penalty
    "penalty.alpha": 1.0,
    "penalty.sl": 8,
    # policy pretraining (the SFT stand-in)
    "pretrain.steps": 1500,
    "pretrain.learning_rate": 0.5,
    "pretrain.batch_size": 32,
    # PPO
    "ppo.clip_epsilon": 0.2,
    "ppo.kl_beta": 0.05,
    "ppo.gamma": 1.0,
    "ppo.lambda_gae": 0.95,
    "ppo.advantage_mode": "monte_carlo",
    "ppo.reward_mode": "token",
    "ppo.value_coef": 0.5,
    "ppo.entropy_coef": 0.003,
    "ppo.epochs": 4,
    "ppo.learning_rate": 0.05,
    "ppo.iterations": 200,
    "ppo.batch_size": 64,
    "ppo.max_len": 40,
    "ppo.temperature": 1.0,
    "ppo.minibatch_size": 256,
    "ppo.center_advantages": False,
    "ppo.normalize_advantages": True,
    "ppo.max_grad_norm": 1.0,
    "ppo.kl_stop": 1.0,
    "ppo.reward_irrelevant": -1.0,
    "ppo.reward_relevant": 1.0,
    # evaluation
    "eval.episodes": 200,
    "eval.judge": "sentence",
}


def _parse_value(text: str, default):
    text = text.strip()
    if isinstance(default, bool):
        if text.lower() in ("true", "1", "yes", "on"):
            return True
        if text.lower() in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"expected a boolean, got {text!r}")
    if isinstance(default, int):
        try:
            return int(text)
        except ValueError as e:
            raise ConfigError(f"expected an integer, got {text!r}") from e
    if isinstance(default, float):
        try:
            return float(text)
        except ValueError as e:
            raise ConfigError(f"expected a number, got {text!r}") from e
    return text


def load_config(path) -> dict:
    """Defaults overridden by the file at ``path``. Unknown keys fail."""
    cfg = dict(DEFAULTS)
    try:
        fh = open(path, "r", encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e.strerror}") from e
    with fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{line_no}: expected 'key = value', got {raw.rstrip()!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in DEFAULTS:
                raise ConfigError(f"{path}:{line_no}: unknown key {key!r}")
            cfg[key] = _parse_value(value, DEFAULTS[key])
    return cfg


def resolve(path=None, overrides: dict | None = None) -> dict:
    """Final config: defaults, then file, then explicit overrides."""
    cfg = load_config(path) if path else dict(DEFAULTS)
    for k, v in (overrides or {}).items():
        if k not in DEFAULTS:
            raise ConfigError(f"unknown config key {k!r}")
        cfg[k] = v
    return cfg


# ---------------------------------------------------------------------------
# Typed views
# ---------------------------------------------------------------------------


def corpus_config(cfg: dict) -> CorpusConfig:
    return CorpusConfig(
        words_per_topic=cfg["corpus.words_per_topic"],
        min_history=cfg["corpus.min_history"],
        max_history=cfg["corpus.max_history"],
        max_interests=cfg["corpus.max_interests"],
        min_response_words=cfg["corpus.min_response_words"],
        max_response_words=cfg["corpus.max_response_words"],
        on_topic_rate=cfg["corpus.on_topic_rate"],
        separator_rate=cfg["corpus.separator_rate"],
        fragment_rate=cfg["corpus.fragment_rate"],
        target_query_num=cfg["corpus.target_query_num"],
    )


def annotator_config(cfg: dict) -> AnnotatorConfig:
    return AnnotatorConfig(tau=cfg["annotator.tau"])


def tokenizer_from(cfg: dict):
    return get_tokenizer(cfg["tokenizer.name"])


def rm_config(cfg: dict, seed: int) -> RMTrainConfig:
    lam = cfg["rm.lambda_local"]
    return RMTrainConfig(
        w0=cfg["rm.w0"], w1=cfg["rm.w1"], w2=cfg["rm.w2"],
        lambda_local=lam, lambda_global=1.0 - lam,
        learning_rate=cfg["rm.learning_rate"], steps=cfg["rm.steps"],
        batch_size=cfg["rm.batch_size"], seed=seed,
        d_embed=cfg["model.d_embed"], context=cfg["model.context"],
        hidden=cfg["model.hidden"],
        resample_valid=cfg["rm.resample_valid"], eval_every=cfg["rm.eval_every"],
    )


def penalty_config(cfg: dict) -> LengthPenaltyConfig:
    return LengthPenaltyConfig(alpha=cfg["penalty.alpha"], sl=cfg["penalty.sl"])


def pretrain_config(cfg: dict, seed: int) -> PretrainConfig:
    return PretrainConfig(
        steps=cfg["pretrain.steps"], learning_rate=cfg["pretrain.learning_rate"],
        batch_size=cfg["pretrain.batch_size"], seed=seed,
        d_embed=cfg["model.d_embed"], context=cfg["model.context"],
        hidden=cfg["model.hidden"],
    )


def tppo_config(cfg: dict, seed: int, reward_mode: str | None = None) -> TPPOConfig:
    return TPPOConfig(
        clip_epsilon=cfg["ppo.clip_epsilon"], kl_beta=cfg["ppo.kl_beta"],
        gamma=cfg["ppo.gamma"], lambda_gae=cfg["ppo.lambda_gae"],
        advantage_mode=cfg["ppo.advantage_mode"],
        reward_mode=reward_mode or cfg["ppo.reward_mode"],
        value_coef=cfg["ppo.value_coef"], entropy_coef=cfg["ppo.entropy_coef"],
        epochs=cfg["ppo.epochs"], learning_rate=cfg["ppo.learning_rate"],
        seed=seed, iterations=cfg["ppo.iterations"], batch_size=cfg["ppo.batch_size"],
        max_len=cfg["ppo.max_len"], temperature=cfg["ppo.temperature"],
        minibatch_size=cfg["ppo.minibatch_size"],
        center_advantages=cfg["ppo.center_advantages"],
        normalize_advantages=cfg["ppo.normalize_advantages"],
        max_grad_norm=cfg["ppo.max_grad_norm"], kl_stop=cfg["ppo.kl_stop"],
        reward_irrelevant=cfg["ppo.reward_irrelevant"],
        reward_relevant=cfg["ppo.reward_relevant"],
        sentence_tau=cfg["annotator.tau"],
    )
