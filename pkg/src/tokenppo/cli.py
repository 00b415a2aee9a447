"""Command-line interface.

Subcommands: gen-data, annotate, train-rm, train-ppo, eval, ablate,
verify-lemma, plot-data. Every report embeds the resolved config and seed;
report paths also render PNG figures next to the CSV output.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, replace

import numpy as np

from . import config as cfgmod
from .artifacts import ArtifactError, ensure_dir, load_checkpoint, save_checkpoint, write_report
from .datagen import (
    DatagenError,
    annotate_episode,
    generate_corpus,
    load_dataset,
    store_dataset,
)
from .harness import (
    AblationSpec,
    HarnessError,
    emit_plot_data,
    evaluate_policy,
    pretrain_stage,
    build_workbench,
    run_ablation,
    train_rm_stage,
    ppo_stage,
    win_tie_lose,
)
from .plotting import line_figure, panel_figure
from .policy import PolicyParams
from .reward_model import RewardModelError, RMParams, rm_token_accuracy
from .tppo import TPPOError, verify_lemma1

_ERRORS = (cfgmod.ConfigError, DatagenError, ArtifactError, HarnessError,
           RewardModelError, TPPOError, OSError)

RM_CURVE_COLUMNS = ["step", "train_loss", "eval_loss", "auc", "seed"]
PPO_CURVE_COLUMNS = ["iteration", "mean_reward", "reward_std", "mean_kl", "mean_len", "seed", "mode"]


def _common(sub):
    sub.add_argument("--seed", type=int, default=None, help="run seed (default: config 'seed')")
    sub.add_argument("--config", default=None, help="key=value config file")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tokenppo",
                                description="Token-level PPO workbench for query generation")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    s = sub.add_parser("gen-data", help="generate an annotated synthetic dataset")
    _common(s)
    s.add_argument("--n", type=int, default=None, help="episode count")
    s.add_argument("--out", required=True, help="output JSONL path")
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("annotate", help="re-annotate a dataset with the rule oracle")
    _common(s)
    s.add_argument("--data", required=True, help="input JSONL path")
    s.add_argument("--out", required=True, help="output JSONL path")
    s.set_defaults(func=cmd_annotate)

    s = sub.add_parser("train-rm", help="train the token reward model")
    _common(s)
    s.add_argument("--data", default=None, help="training JSONL (default: generated corpus)")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_train_rm)

    s = sub.add_parser("train-ppo", help="train the policy with token or sentence PPO")
    _common(s)
    s.add_argument("--data", default=None, help="training JSONL (default: generated corpus)")
    s.add_argument("--rm", default=None, help="reward-model checkpoint (default: train one)")
    s.add_argument("--policy", default=None, help="initial policy checkpoint (default: pretrain)")
    s.add_argument("--mode", choices=("token", "sentence"), default=None,
                   help="reward mode (default: config 'ppo.reward_mode')")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_train_ppo)

    s = sub.add_parser("eval", help="relevance rate (and win/tie/lose vs a baseline)")
    _common(s)
    s.add_argument("--policy", required=True, help="policy checkpoint")
    s.add_argument("--baseline", default=None, help="baseline policy checkpoint")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("ablate", help="sweep lambda_local or alpha over seeds")
    _common(s)
    s.add_argument("--param", required=True, choices=("lambda_local", "alpha"))
    s.add_argument("--values", required=True, help="comma-separated values")
    s.add_argument("--seeds", default="0,1,2", help="comma-separated seeds")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("verify-lemma", help="closed-form optimal-policy oracle")
    _common(s)
    s.add_argument("--trials", type=int, default=100)
    s.add_argument("--out", default=None, help="report JSON path (default: lemma1_report.json)")
    s.set_defaults(func=cmd_verify_lemma)

    s = sub.add_parser("plot-data", help="merge curve CSVs into tidy plot data + figures")
    _common(s)
    s.add_argument("--curves", nargs="+", required=True, help="input curve CSV files")
    s.add_argument("--out", required=True, help="tidy CSV output path")
    s.add_argument("--fig-dir", default=None, help="figure directory (default: beside --out)")
    s.set_defaults(func=cmd_plot_data)
    return p


def _setup(args):
    cfg = cfgmod.resolve(args.config)
    seed = args.seed if args.seed is not None else cfg["seed"]
    cfg["seed"] = seed
    return cfg, seed


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg, seed = _setup(args)
    n = args.n if args.n is not None else cfg["corpus.train_episodes"]
    records = generate_corpus(seed, n, cfgmod.corpus_config(cfg), cfgmod.annotator_config(cfg))
    store_dataset(args.out, records)
    with open(str(args.out) + ".meta.json", "w", encoding="utf-8") as fh:
        json.dump({"seed": seed, "config": cfg}, fh, sort_keys=True, indent=1)
    print(f"wrote {len(records)} episodes to {args.out}")
    return 0


def cmd_annotate(args) -> int:
    cfg, _ = _setup(args)
    rules = cfgmod.annotator_config(cfg)
    records = load_dataset(args.data)
    out, skipped = [], 0
    for rec in records:
        words = [a.word for a in rec.response_words]
        try:
            annotations, sentence = annotate_episode(list(rec.history), words, rules)
        except DatagenError:
            skipped += 1
            continue
        out.append(replace(rec, response_words=tuple(annotations), sentence_reward=sentence))
    store_dataset(args.out, out)
    msg = f"re-annotated {len(out)} episodes to {args.out}"
    if skipped:
        msg += f" ({skipped} skipped: no content words)"
    print(msg)
    return 0


def _load_records(args, cfg):
    return load_dataset(args.data) if getattr(args, "data", None) else None


def cmd_train_rm(args) -> int:
    cfg, seed = _setup(args)
    wb = build_workbench(cfg, train_records=_load_records(args, cfg))
    res = train_rm_stage(wb, seed)
    out = ensure_dir(args.out)

    save_checkpoint(os.path.join(out, "rm_checkpoint.json"), "reward_model",
                    res.params.arrays(), config=cfg)
    rows = [[r.step, r.train_loss, r.eval_loss, r.auc, r.seed] for r in res.curve]
    csv_path = os.path.join(out, "rm_curve.csv")
    write_report(csv_path, RM_CURVE_COLUMNS, rows, config=cfg, seed=seed)
    steps = [r.step for r in res.curve]
    panel_figure(
        [("loss", {"train": (steps, [r.train_loss for r in res.curve]),
                   "eval": (steps, [r.eval_loss for r in res.curve])}),
         ("auc", {"auc": ([r.step for r in res.curve if r.auc is not None],
                          [r.auc for r in res.curve if r.auc is not None])})],
        os.path.join(out, "rm_curve.png"))

    acc = rm_token_accuracy(res.params, wb.eval_batch)
    last = res.curve[-1]
    print(f"reward model trained: eval accuracy {acc:.4f}, auc {last.auc:.4f}, "
          f"eval loss {last.eval_loss:.4f}")
    print(f"artifacts in {out}: rm_checkpoint.json, rm_curve.csv, rm_curve.png")
    return 0


def _load_rm(path) -> RMParams:
    kind, arrays, _ = load_checkpoint(path)
    if kind != "reward_model":
        raise ArtifactError(f"{path}: expected a reward_model checkpoint, got {kind!r}")
    return RMParams(**arrays)


def _load_policy(path) -> PolicyParams:
    kind, arrays, _ = load_checkpoint(path)
    if kind != "policy":
        raise ArtifactError(f"{path}: expected a policy checkpoint, got {kind!r}")
    arrays["w_value"] = arrays["w_value"].reshape(-1)
    return PolicyParams(**arrays)


def cmd_train_ppo(args) -> int:
    cfg, seed = _setup(args)
    if args.mode:
        cfg["ppo.reward_mode"] = args.mode
    wb = build_workbench(cfg, train_records=_load_records(args, cfg))
    rm = _load_rm(args.rm) if args.rm else train_rm_stage(wb, seed).params
    policy0 = _load_policy(args.policy) if args.policy else pretrain_stage(wb, seed)
    res = ppo_stage(wb, policy0, rm, seed)

    out = ensure_dir(args.out)
    save_checkpoint(os.path.join(out, "policy_checkpoint.json"), "policy",
                    res.params.arrays(), config=cfg)
    rows = [[r.iteration, r.mean_reward, r.reward_std, r.mean_kl, r.mean_len, r.seed, r.mode]
            for r in res.curve]
    csv_path = os.path.join(out, "ppo_curve.csv")
    write_report(csv_path, PPO_CURVE_COLUMNS, rows, config=cfg, seed=seed)
    its = [r.iteration for r in res.curve]
    panel_figure(
        [("mean reward", {"mean_reward": (its, [r.mean_reward for r in res.curve])}),
         ("response tokens", {"mean_len": (its, [r.mean_len for r in res.curve])}),
         ("KL to reference", {"mean_kl": (its, [r.mean_kl for r in res.curve])})],
        os.path.join(out, "ppo_curve.png"), xlabel="iteration")

    rep = evaluate_policy(res.params, wb.eval_records, wb.vocab, wb.tok, wb.rules,
                          judge=cfg["eval.judge"], max_len=cfg["ppo.max_len"])
    if res.early_stopped:
        print(f"early stop: {res.stop_reason}")
    print(f"ppo ({res.curve[-1].mode} mode) finished: eval relevance rate {rep.rate:.4f}, "
          f"mean length {rep.mean_len:.2f}")
    print(f"artifacts in {out}: policy_checkpoint.json, ppo_curve.csv, ppo_curve.png")
    return 0


def cmd_eval(args) -> int:
    cfg, seed = _setup(args)
    wb = build_workbench(cfg)
    policy = _load_policy(args.policy)
    rep = evaluate_policy(policy, wb.eval_records, wb.vocab, wb.tok, wb.rules,
                          judge=cfg["eval.judge"], max_len=cfg["ppo.max_len"])
    out = ensure_dir(args.out)
    summary = [["relevance_rate", rep.rate], ["mean_len", rep.mean_len],
               ["episodes", len(rep.scores)]]
    scores_rows = [[i, s] for i, s in enumerate(rep.scores)]
    score_cols = ["sample", "policy_score"]

    if args.baseline:
        base = _load_policy(args.baseline)
        rep_b = evaluate_policy(base, wb.eval_records, wb.vocab, wb.tok, wb.rules,
                                judge=cfg["eval.judge"], max_len=cfg["ppo.max_len"])
        win, tie, lose = win_tie_lose(rep.scores, rep_b.scores)
        summary += [["baseline_relevance_rate", rep_b.rate],
                    ["win_pct", win], ["tie_pct", tie], ["lose_pct", lose]]
        scores_rows = [[i, a, b] for i, (a, b) in enumerate(zip(rep.scores, rep_b.scores))]
        score_cols = ["sample", "policy_score", "baseline_score"]
        line_figure({"win": ([0], [win]), "tie": ([1], [tie]), "lose": ([2], [lose])},
                    os.path.join(out, "eval_summary.png"), title="win / tie / lose (%)",
                    xlabel="outcome", ylabel="percent")

    write_report(os.path.join(out, "eval_summary.csv"), ["metric", "value"], summary,
                 config=cfg, seed=seed)
    write_report(os.path.join(out, "eval_scores.csv"), score_cols, scores_rows,
                 config=cfg, seed=seed)
    for metric, value in summary:
        print(f"{metric} = {value}")
    return 0


def cmd_ablate(args) -> int:
    cfg, seed = _setup(args)
    try:
        values = tuple(float(v) for v in args.values.split(","))
        seeds = tuple(int(s) for s in args.seeds.split(","))
    except ValueError:
        print("error: --values and --seeds must be comma-separated numbers", file=sys.stderr)
        return 2
    out = ensure_dir(args.out)
    spec = AblationSpec(parameter=args.param, values=values, seeds=seeds,
                        out=os.path.join(out, "ablation.csv"))
    rows = run_ablation(spec, cfg)
    columns = ["parameter", "value", "seed", "metric", "metric_value", "status", "detail"]
    write_report(spec.out, columns, rows, config=cfg, seed=seed)

    ok = [r for r in rows if r["status"] == "ok"]
    groups = {}
    for s in seeds:
        pts = sorted((r["value"], r["metric_value"]) for r in ok if r["seed"] == s)
        if pts:
            groups[f"seed {s}"] = ([p[0] for p in pts], [p[1] for p in pts])
    if groups:
        metric = ok[0]["metric"]
        line_figure(groups, os.path.join(out, "ablation.png"),
                    title=f"{args.param} sweep", xlabel=args.param, ylabel=metric)
    failed = len(rows) - len(ok)
    print(f"ablation rows: {len(ok)} ok, {failed} failed -> {spec.out}")
    return 0 if failed == 0 else 1


def cmd_verify_lemma(args) -> int:
    cfg, seed = _setup(args)
    report = verify_lemma1(seed, args.trials)
    out_path = args.out or "lemma1_report.json"
    with open(out_path, "w", encoding="utf-8") as fh:
        json.dump({"seed": seed, "passed": report.passed, **asdict(report)}, fh,
                  sort_keys=True, indent=1)
    status = "passed" if report.passed else f"FAILED ({len(report.violations)} violations)"
    print(f"lemma oracle {status}: {report.trials} trials x {report.n_candidates} candidates, "
          f"worst margin {report.worst_margin:.3e}, worst stationarity spread "
          f"{report.worst_spread:.3e}, {report.elapsed_seconds:.2f}s -> {out_path}")
    return 0 if report.passed else 1


def cmd_plot_data(args) -> int:
    _setup(args)
    tidy = emit_plot_data(args.curves, args.out)
    fig_dir = ensure_dir(args.fig_dir or (os.path.dirname(os.path.abspath(args.out)) or "."))
    by_series: dict[str, dict[str, tuple]] = {}
    for row in tidy:
        by_series.setdefault(row["series"], {}).setdefault(row["run_id"], ([], []))
        xs, ys = by_series[row["series"]][row["run_id"]]
        xs.append(row["step"])
        ys.append(row["value"])
    figures = []
    for series, groups in sorted(by_series.items()):
        path = os.path.join(fig_dir, f"plot_{series}.png")
        line_figure(groups, path, title=series, ylabel=series)
        figures.append(path)
    print(f"wrote {len(tidy)} tidy rows to {args.out} and {len(figures)} figures to {fig_dir}")
    return 0


def cli_dispatch(argv) -> int:
    """Parse and run; returns the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except _ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def main() -> None:
    np.seterr(all="warn")
    sys.exit(cli_dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
