"""Evaluation metrics, pipeline assembly, ablations, and plot-data emission.

The judge here is the same deterministic rule oracle that labeled the
corpus, applied to generated responses: a response scores 1 when its
relevant fraction clears the annotator threshold. Two judge configurations
exist, mirroring the sentence-template / token-template consistency check:
``sentence`` applies the rule at word level, ``token`` recomputes the
fraction over mapped token categories.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import config as cfgmod
from .artifacts import ArtifactError, read_report, write_report
from .datagen import (
    CAT_IRRELEVANT,
    CAT_RELEVANT,
    AnnotationError,
    AnnotatorConfig,
    EpisodeRecord,
    TokenBatch,
    Tokenizer,
    Vocab,
    annotate_episode,
    build_vocab,
    decode_response,
    encode_episodes,
    encode_prompt,
    generate_corpus,
    map_word_rewards,
)
from .policy import PolicyParams, pretrain_policy, sample_response
from .reward_model import RMParams, RMTrainResult, train_reward_model
from .tppo import TPPOTrainResult, train_tppo


class HarnessError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def relevance_rate(scores) -> float:
    """Mean of {0,1} relevance scores."""
    scores = list(scores)
    if not scores:
        raise HarnessError("relevance rate of an empty score list is undefined")
    return float(np.mean(scores))


def win_tie_lose(scores_a, scores_b) -> tuple[float, float, float]:
    """Pairwise comparison percentages (win, tie, lose) for a against b."""
    a = np.asarray(list(scores_a), dtype=float)
    b = np.asarray(list(scores_b), dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise HarnessError(f"score lists must align, got lengths {len(a)} and {len(b)}")
    if len(a) == 0:
        raise HarnessError("win/tie/lose of empty score lists is undefined")
    win = float((a > b).mean() * 100.0)
    tie = float((a == b).mean() * 100.0)
    lose = float((a < b).mean() * 100.0)
    return win, tie, lose


def judge_response(history, words: list[str], rules: AnnotatorConfig, tok: Tokenizer,
                   judge: str = "sentence") -> int:
    """Relevance score in {0,1} for a generated word list.

    ``sentence`` scores 1 iff the word-level sentence category is relevant;
    ``token`` recomputes the relevant fraction over mapped tokens. A response
    with no content words scores 0.
    """
    try:
        annotations, sentence = annotate_episode(history, words, rules)
    except AnnotationError:
        return 0
    if judge == "sentence":
        return int(sentence == CAT_RELEVANT)
    if judge == "token":
        cats = [c for _, c in map_word_rewards(annotations, tok)
                if c in (CAT_IRRELEVANT, CAT_RELEVANT)]
        if not cats:
            return 0
        frac = sum(c == CAT_RELEVANT for c in cats) / len(cats)
        return int(frac >= rules.tau)
    raise HarnessError(f"unknown judge {judge!r}")


@dataclass
class EvalReport:
    scores: list[int]
    rate: float
    mean_len: float
    responses: list[list[str]] = field(default_factory=list)


def evaluate_policy(params: PolicyParams, records: list[EpisodeRecord], vocab: Vocab,
                    tok: Tokenizer, rules: AnnotatorConfig, judge: str = "sentence",
                    max_len: int = 40, temperature: float = 1.0, seed: int = 2024) -> EvalReport:
    """Decode one response per episode and score it with the judge.

    Sampled decoding (the default) measures the whole policy distribution
    rather than its mode; each episode gets its own generator stream, so
    scores are deterministic in the seed and independent of episode order.
    """
    scores, lens, responses = [], [], []
    for i, rec in enumerate(records):
        prompt = encode_prompt(rec.prompt_words, tok, vocab)
        actions = sample_response(params, prompt, max_len, temperature, seed=[seed, i])
        words = decode_response(actions, vocab)
        scores.append(judge_response(list(rec.history), words, rules, tok, judge))
        lens.append(len(actions))
        responses.append(words)
    return EvalReport(scores=scores, rate=relevance_rate(scores),
                      mean_len=float(np.mean(lens)), responses=responses)


# ---------------------------------------------------------------------------
# Pipeline assembly
# ---------------------------------------------------------------------------


@dataclass
class Workbench:
    """Everything downstream stages share: data, vocab, tokenizer, batches."""

    cfg: dict
    tok: Tokenizer
    vocab: Vocab
    rules: AnnotatorConfig
    train_records: list[EpisodeRecord]
    eval_records: list[EpisodeRecord]
    train_batch: TokenBatch
    eval_batch: TokenBatch


def build_workbench(cfg: dict, train_records: list[EpisodeRecord] | None = None) -> Workbench:
    tok = cfgmod.tokenizer_from(cfg)
    corpus = cfgmod.corpus_config(cfg)
    rules = cfgmod.annotator_config(cfg)
    vocab = build_vocab(tok, corpus, rules)
    if train_records is None:
        train_records = generate_corpus(cfg["corpus.data_seed"], cfg["corpus.train_episodes"],
                                        corpus, rules)
    eval_records = generate_corpus(cfg["corpus.data_seed"] + 1, cfg["eval.episodes"],
                                   corpus, rules)
    return Workbench(
        cfg=cfg, tok=tok, vocab=vocab, rules=rules,
        train_records=train_records, eval_records=eval_records,
        train_batch=encode_episodes(train_records, tok, vocab),
        eval_batch=encode_episodes(eval_records, tok, vocab),
    )


def train_rm_stage(wb: Workbench, seed: int, lambda_local: float | None = None) -> RMTrainResult:
    cfg = dict(wb.cfg)
    if lambda_local is not None:
        cfg["rm.lambda_local"] = lambda_local
    rm_cfg = cfgmod.rm_config(cfg, seed)
    return train_reward_model(wb.train_batch, rm_cfg, vocab_size=len(wb.vocab),
                              eval_batch=wb.eval_batch)


def pretrain_stage(wb: Workbench, seed: int) -> PolicyParams:
    params, _ = pretrain_policy(wb.train_batch, cfgmod.pretrain_config(wb.cfg, seed),
                                vocab_size=len(wb.vocab))
    return params


def ppo_stage(wb: Workbench, policy: PolicyParams, rm: RMParams, seed: int,
              reward_mode: str | None = None, alpha: float | None = None) -> TPPOTrainResult:
    cfg = dict(wb.cfg)
    if alpha is not None:
        cfg["penalty.alpha"] = alpha
    return train_tppo(policy, rm, wb.train_records, cfgmod.tppo_config(cfg, seed, reward_mode),
                      vocab=wb.vocab, tok=wb.tok, penalty=cfgmod.penalty_config(cfg))


# ---------------------------------------------------------------------------
# Reward-mode comparison (token vs sentence stability)
# ---------------------------------------------------------------------------


@dataclass
class ModeComparison:
    initial_rate: float
    rates: dict
    curve_std: dict
    curves: dict
    mean_rates: dict

    def to_rows(self):
        rows = []
        for (mode, seed), rate in sorted(self.rates.items()):
            rows.append({"mode": mode, "seed": seed, "final_relevance_rate": rate,
                         "initial_relevance_rate": self.initial_rate,
                         "curve_std": self.curve_std[mode]})
        return rows


def compare_reward_modes(cfg: dict, seeds, wb: Workbench | None = None,
                         rm: RMParams | None = None,
                         policy0: PolicyParams | None = None) -> ModeComparison:
    """Run both reward modes over a seed set from one shared starting point.

    The data, reward model, and pretrained policy are shared; only the PPO
    seed and reward mode vary. curve_std is the across-seed standard
    deviation of the logged mean reward, averaged over iterations, the
    stability statistic of the comparison.
    """
    wb = wb or build_workbench(cfg)
    rm = rm or train_rm_stage(wb, cfg["seed"]).params
    policy0 = policy0 or pretrain_stage(wb, cfg["seed"])
    initial = evaluate_policy(policy0, wb.eval_records, wb.vocab, wb.tok, wb.rules,
                              judge=cfg["eval.judge"], max_len=cfg["ppo.max_len"])

    rates, curves = {}, {}
    curve_std, mean_rates = {}, {}
    for mode in ("token", "sentence"):
        per_seed = []
        for seed in seeds:
            res = ppo_stage(wb, policy0, rm, seed, reward_mode=mode)
            rep = evaluate_policy(res.params, wb.eval_records, wb.vocab, wb.tok, wb.rules,
                                  judge=cfg["eval.judge"], max_len=cfg["ppo.max_len"])
            rates[(mode, seed)] = rep.rate
            curves[(mode, seed)] = res.curve
            per_seed.append([row.mean_reward for row in res.curve])
        horizon = min(len(c) for c in per_seed)
        stack = np.array([c[:horizon] for c in per_seed])
        curve_std[mode] = float(stack.std(axis=0).mean())
        mean_rates[mode] = float(np.mean([rates[(mode, s)] for s in seeds]))
    return ModeComparison(initial_rate=initial.rate, rates=rates, curve_std=curve_std,
                          curves=curves, mean_rates=mean_rates)


# ---------------------------------------------------------------------------
# Ablations
# ---------------------------------------------------------------------------

_ABLATION_RANGES = {
    "lambda_local": (0.0, 1.0),
    "alpha": (0.0, float("inf")),
}


@dataclass(frozen=True)
class AblationSpec:
    parameter: str
    values: tuple
    seeds: tuple
    out: str = "ablation.csv"

    def __post_init__(self):
        if self.parameter not in _ABLATION_RANGES:
            raise HarnessError(f"unknown ablation parameter {self.parameter!r}")
        if len(self.values) < 2:
            raise HarnessError("an ablation needs at least 2 values")
        lo, hi = _ABLATION_RANGES[self.parameter]
        for v in self.values:
            if not lo < v < hi:
                raise HarnessError(f"value {v} outside legal range for {self.parameter}")
        if not self.seeds:
            raise HarnessError("an ablation needs at least 1 seed")


def run_ablation(spec: AblationSpec, cfg: dict, wb: Workbench | None = None) -> list[dict]:
    """Grid of (value, seed) runs; failures become marked rows, not aborts.

    lambda_local sweeps record the converged reward-model eval loss (mean of
    the last tenth of the curve). alpha sweeps run PPO with the shared
    reward model and pretrained policy, recording the mean response length
    over the last quarter of training.
    """
    wb = wb or build_workbench(cfg)
    rows: list[dict] = []
    shared = None
    if spec.parameter == "alpha":
        shared = (train_rm_stage(wb, cfg["seed"]).params, pretrain_stage(wb, cfg["seed"]))

    for value in spec.values:
        for seed in spec.seeds:
            row = {"parameter": spec.parameter, "value": value, "seed": seed,
                   "metric": "", "metric_value": "", "status": "ok", "detail": ""}
            try:
                if spec.parameter == "lambda_local":
                    res = train_rm_stage(wb, seed, lambda_local=value)
                    tail = res.curve[-max(1, len(res.curve) // 10):]
                    row["metric"] = "converged_eval_loss"
                    row["metric_value"] = float(np.mean([r.eval_loss for r in tail]))
                else:
                    rm, policy0 = shared
                    res = ppo_stage(wb, policy0, rm, seed, alpha=value)
                    tail = res.curve[-max(1, len(res.curve) // 4):]
                    row["metric"] = "final_mean_len"
                    row["metric_value"] = float(np.mean([r.mean_len for r in tail]))
            except Exception as e:  # failure markers, partial report survives
                row["status"] = "failed"
                row["detail"] = f"{type(e).__name__}: {e}"
            rows.append(row)
    return rows


# ---------------------------------------------------------------------------
# Plot-data emission
# ---------------------------------------------------------------------------

_STEP_COLUMNS = ("step", "iteration")
_METADATA_COLUMNS = {"seed", "mode"}


def emit_plot_data(curve_paths, out_path) -> list[dict]:
    """Merge curve CSVs into tidy (run_id, series, step, value) rows.

    Each numeric non-step column becomes one series; rows with empty values
    are dropped. The run id is the source file stem.
    """
    tidy: list[dict] = []
    for path in curve_paths:
        run_id = os.path.splitext(os.path.basename(path))[0]
        _, columns, rows = read_report(path)
        step_col = next((c for c in _STEP_COLUMNS if c in columns), None)
        if step_col is None:
            raise ArtifactError(f"{path}: missing a step or iteration column")
        for col in columns:
            if col == step_col or col in _METADATA_COLUMNS:
                continue
            points = []
            for r in rows:
                if r[col] == "":
                    continue
                try:
                    points.append((int(float(r[step_col])), float(r[col])))
                except ValueError:
                    points = None
                    break
            if points:
                for step, value in points:
                    tidy.append({"run_id": run_id, "series": col, "step": step, "value": value})
    tidy.sort(key=lambda r: (r["run_id"], r["series"], r["step"]))
    write_report(out_path, ["run_id", "series", "step", "value"], tidy,
                 config={"inputs": ";".join(os.path.basename(str(p)) for p in curve_paths)})
    return tidy
