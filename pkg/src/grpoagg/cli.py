"""Command-line interface: verify, analyze, simulate, compare.

Exit codes: 0 success, 1 verification or validation failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import sys
from math import fsum
from pathlib import Path

import numpy as np

from .aggregate import RULES, ClipConfig, evaluate_arrays, _ratio_arrays
from .decompose import length_stats, regime_report
from .groups import DegenerateGroupError, AdvantageSet, normalize_advantages
from .rollout_io import (
    MetricRecord,
    RolloutLogError,
    parse_rollout_line,
    write_metrics,
)
from .sim import TASK_KINDS, TaskSpec, TrainConfig, run_training
from .verify import SUITE, run_suite

__all__ = ["main", "build_parser"]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="grpoagg",
        description=(
            "Aggregation rules for group-relative RL objectives: identity "
            "verification, rollout-log analysis, and a toy training simulator."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p: argparse.ArgumentParser, eps_default: float) -> None:
        p.add_argument("--seed", type=int, default=0, help="RNG seed")
        p.add_argument("--out", type=Path, default=Path("."), help="output directory")
        p.add_argument(
            "--eps-var",
            type=float,
            default=eps_default,
            help="variance floor inside the advantage normalizer",
        )
        p.add_argument("--clip-low", type=float, default=0.2, help="lower clip width")
        p.add_argument("--clip-high", type=float, default=0.28, help="upper clip width")

    p_verify = sub.add_parser("verify", help="run the identity suite")
    add_common(p_verify, 0.0)
    p_verify.add_argument("--inject-fault", default=None, help=argparse.SUPPRESS)

    p_analyze = sub.add_parser("analyze", help="analyze a JSONL rollout log")
    add_common(p_analyze, 0.0)
    p_analyze.add_argument("--input", type=Path, required=True, help="JSONL rollout log")
    p_analyze.add_argument(
        "--window", type=int, default=16, help="groups per pooled metrics window"
    )

    def add_sim_flags(p: argparse.ArgumentParser) -> None:
        add_common(p, 1e-6)
        p.add_argument("--task", choices=TASK_KINDS, default="count")
        p.add_argument("--steps", type=int, default=200)
        p.add_argument("--group-size", type=int, default=16)
        p.add_argument("--lr", type=float, default=1e-2, help="learning rate")
        p.add_argument("--prompts", type=int, default=4, help="number of prompts")
        p.add_argument("--vocab-size", type=int, default=3)
        p.add_argument("--t-max", type=int, default=8, help="maximum response length")
        p.add_argument("--inner-epochs", type=int, default=1)
        p.add_argument(
            "--dump-rollouts", action="store_true", help="also write rollout JSONL"
        )

    p_sim = sub.add_parser("simulate", help="train the toy policy under one rule")
    add_sim_flags(p_sim)
    p_sim.add_argument("--rule", choices=RULES, default="balanced")

    p_cmp = sub.add_parser("compare", help="train all four rules on shared seeds")
    add_sim_flags(p_cmp)
    p_cmp.add_argument(
        "--locked-rollouts",
        action="store_true",
        help="evaluate all rules on the token-rule rollouts (single lineage)",
    )
    return parser


def _clip_from_args(args) -> ClipConfig:
    return ClipConfig(args.clip_low, args.clip_high)


def cmd_verify(args) -> int:
    try:
        clip = _clip_from_args(args)
        if args.inject_fault is not None and args.inject_fault not in {
            c.name for c in SUITE
        }:
            print(f"error: unknown identity {args.inject_fault!r}", file=sys.stderr)
            return 2
        ok = run_suite(
            seed=args.seed, clip=clip, inject_fault=args.inject_fault, stream=sys.stdout
        )
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0 if ok else 1


def _window_records(
    step: int, groups, advs, clip: ClipConfig
) -> tuple[list[MetricRecord], str]:
    stats = length_stats(groups, advs)
    n_resp = sum(g.size for g in groups)
    mean_reward = fsum(r.reward for g in groups for r in g.responses) / n_resp
    k_mean = fsum(a.k for a in advs) / len(advs)
    evaluable = [(g, a) for g, a in zip(groups, advs) if g.has_ratios]
    records = []
    for rule in RULES:
        objective = pg_loss = clip_fraction = None
        if evaluable:
            values = []
            clipped = tokens = 0
            for g, a in evaluable:
                value, _, sums, _ = evaluate_arrays(
                    rule, a, _ratio_arrays(g), clip, need_grad=False
                )
                values.append(value)
                clipped += sums.clipped
                tokens += sums.total_tokens
            objective = fsum(values) / len(values)
            pg_loss = -objective
            clip_fraction = clipped / tokens
        records.append(
            MetricRecord(
                step=step,
                rule=rule,
                objective=objective,
                pg_loss=pg_loss,
                len_cv=stats.len_cv,
                len_gap=stats.len_gap,
                tbar_pos=stats.tbar_pos,
                tbar_neg=stats.tbar_neg,
                mean_reward=mean_reward,
                k_mean=k_mean,
                clip_fraction=clip_fraction,
            )
        )
    return records, regime_report(stats)


def cmd_analyze(args) -> int:
    clip = _clip_from_args(args)
    if args.window < 1:
        print("error: --window must be >= 1", file=sys.stderr)
        return 2
    groups = []
    parse_errors = 0
    try:
        with open(args.input, "r", encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    groups.append(parse_rollout_line(line, line_no, args.eps_var))
                except RolloutLogError as exc:
                    print(f"error: {exc}", file=sys.stderr)
                    parse_errors += 1
    except OSError as exc:
        print(f"error: cannot read {args.input}: {exc}", file=sys.stderr)
        return 1
    if not groups:
        print("error: no groups parsed", file=sys.stderr)
        return 1

    advs = []
    degenerate = 0
    length_only = sum(1 for g in groups if not g.has_ratios)
    for g in groups:
        try:
            advs.append(normalize_advantages(g))
        except DegenerateGroupError:
            # all rewards equal at eps_var=0: treat as zero advantage
            degenerate += 1
            advs.append(AdvantageSet.from_advantages([0.0] * g.size))
    if degenerate:
        print(f"notice: {degenerate} degenerate group(s) treated as zero-advantage")
    if length_only:
        print(f"notice: {length_only} length-only group(s); objectives skipped for them")

    args.out.mkdir(parents=True, exist_ok=True)
    records = []
    regime_lines = []
    for w, start in enumerate(range(0, len(groups), args.window)):
        window_groups = groups[start : start + args.window]
        window_advs = advs[start : start + args.window]
        recs, label = _window_records(w, window_groups, window_advs, clip)
        records.extend(recs)
        stats = length_stats(window_groups, window_advs)
        gap = "n/a" if stats.len_gap is None else f"{stats.len_gap:.4f}"
        regime_lines.append(
            f"window {w}: groups={len(window_groups)} len_cv={stats.len_cv:.4f} "
            f"len_gap={gap} regime={label}"
        )
    overall = regime_report(length_stats(groups, advs))
    regime_lines.append(f"overall: groups={len(groups)} regime={overall}")

    csv_path = args.out / "analysis.csv"
    write_metrics(records, csv_path)
    regime_path = args.out / "regime.txt"
    regime_path.write_text("\n".join(regime_lines) + "\n", encoding="utf-8")
    for line in regime_lines:
        print(line)
    print(f"wrote {csv_path} and {regime_path}")
    return 0


def _task_from_args(args) -> TaskSpec:
    return TaskSpec(
        kind=args.task,
        vocab_size=args.vocab_size,
        t_max=args.t_max,
        num_prompts=args.prompts,
    )


def _config_from_args(args, rule: str) -> TrainConfig:
    return TrainConfig(
        rule=rule,
        steps=args.steps,
        group_size=args.group_size,
        learning_rate=args.lr,
        clip=_clip_from_args(args),
        eps_var=args.eps_var,
        seed=args.seed,
        inner_epochs=args.inner_epochs,
    )


def _run_one(args, rule: str, tag: str) -> list[MetricRecord]:
    task = _task_from_args(args)
    config = _config_from_args(args, rule)
    args.out.mkdir(parents=True, exist_ok=True)
    rollouts_path = args.out / f"rollouts_{tag}.jsonl" if args.dump_rollouts else None
    records, policy = run_training(task, config, rollouts_path=rollouts_path)
    np.savez(args.out / f"policy_{tag}.npz", logits=np.asarray(policy.logits))
    return records

def _write_comparison(per_rule: dict[str, list[MetricRecord]], path: Path) -> None:
    header = ["step"]
    for rule in RULES:
        header += [f"{rule}_objective", f"{rule}_pg_loss", f"{rule}_mean_reward"]
    steps = sorted({rec.step for recs in per_rule.values() for rec in recs})
    by_step = {
        rule: {rec.step: rec for rec in recs} for rule, recs in per_rule.items()
    }
    lines = [",".join(header)]
    for step in steps:
        row = [str(step)]
        for rule in RULES:
            rec = by_step[rule].get(step)
            if rec is None:
                row += ["", "", ""]
            else:
                row += [
                    f"{rec.objective:.10g}",
                    f"{rec.pg_loss:.10g}",
                    f"{rec.mean_reward:.10g}",
                ]
        lines.append(",".join(row))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def cmd_simulate(args) -> int:
    try:
        records = _run_one(args, args.rule, args.rule)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    csv_path = args.out / f"metrics_{args.rule}.csv"
    write_metrics(records, csv_path)
    own = [r for r in records if r.rule == args.rule]
    if own:
        print(
            f"{args.rule}: {len(own)} steps, final mean_reward="
            f"{own[-1].mean_reward:.4f} final pg_loss={own[-1].pg_loss:.6g}"
        )
    print(f"wrote {csv_path}")
    return 0


def cmd_compare(args) -> int:
    args.out.mkdir(parents=True, exist_ok=True)
    per_rule: dict[str, list[MetricRecord]] = {}
    try:
        if args.locked_rollouts:
            # one token-rule lineage; every rule evaluated on its rollouts
            records = _run_one(args, "token", "locked")
            for rule in RULES:
                per_rule[rule] = [r for r in records if r.rule == rule]
        else:
            for rule in RULES:
                records = _run_one(args, rule, rule)
                per_rule[rule] = [r for r in records if r.rule == rule]
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    for rule in RULES:
        write_metrics(per_rule[rule], args.out / f"metrics_{rule}.csv")
    cmp_path = args.out / "comparison.csv"
    _write_comparison(per_rule, cmp_path)
    for rule in RULES:
        recs = per_rule[rule]
        tail = recs[-min(100, len(recs)) :]
        mean_loss = fsum(r.pg_loss for r in tail) / len(tail) if tail else 0.0
        final_reward = recs[-1].mean_reward if recs else float("nan")
        print(
            f"{rule:>12}: final mean_reward={final_reward:.4f} "
            f"tail mean pg_loss={mean_loss:.6g}"
        )
    print(f"wrote {cmp_path} and per-rule metrics_<rule>.csv")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "verify":
            return cmd_verify(args)
        if args.command == "analyze":
            return cmd_analyze(args)
        if args.command == "simulate":
            return cmd_simulate(args)
        return cmd_compare(args)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
