"""``pbcn-attack`` command line.

Exit codes: 0 success, 2 validation failure, 3 dense-table budget refusal.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import bench
from .attack_env import ProblemKind, check_problem, load_experiment, validate_rprime
from .netlang import NetworkError, load_network
from .oracle import OracleCapError, evaluate_policy_exact, exact_q
from .pbcn import format_bits
from .qlearn import (
    FinalPolicy,
    LearnerConfig,
    TableBudgetError,
    evaluate_policy_mc,
    rng_streams,
    select_final_policy,
    train_dense,
    train_improved,
)

EXIT_OK, EXIT_INVALID, EXIT_BUDGET = 0, 2, 3

log = logging.getLogger("pbcn_attack")


class ValidationFailure(Exception):
    pass


def _settings(exp, kind: str) -> dict:
    """Reference step size and penalty for a bundled network, if any."""
    table = bench.REFERENCE_SETTINGS.get(exp.name) or bench.REFERENCE_SETTINGS.get(exp.net.name, {})
    return table.get(kind, {})


def _load(args):
    """Experiment from ``--spec`` (a file or a bundled name) with CLI overrides."""
    if args.spec is None:
        raise ValidationFailure("--spec is required")
    path = Path(args.spec)
    try:
        exp = load_experiment(path) if path.exists() else bench.load_bundled(args.spec)
    except FileNotFoundError:
        raise ValidationFailure(f"no experiment file or bundled example {args.spec!r}") from None
    except (NetworkError, ValueError) as exc:
        raise ValidationFailure(str(exc)) from None
    if getattr(args, "net", None):
        try:
            exp.net = load_network(args.net)
        except NetworkError as exc:
            raise ValidationFailure(f"{args.net}: {exc}") from None
    spec = exp.spec
    if getattr(args, "problem", None):
        spec = spec.with_problem(args.problem)
        settings = _settings(exp, spec.kind.value)
        if settings and getattr(args, "rprime", None) is None:
            spec = replace(spec, rprime=settings["rprime"])
    if getattr(args, "rprime", None) is not None:
        spec = replace(spec, rprime=args.rprime)
    if getattr(args, "gamma", None) is not None:
        spec = replace(spec, gamma=args.gamma)
    try:
        check_problem(exp.net, spec)
    except ValueError as exc:
        raise ValidationFailure(str(exc)) from None
    exp.spec = spec
    return exp


def _learner_config(args, exp) -> LearnerConfig:
    alpha = args.alpha
    if alpha is None:
        alpha = _settings(exp, exp.spec.kind.value).get("alpha", 0.01)
    return LearnerConfig(alpha=alpha, gamma=args.gamma, epsilon=args.epsilon, episodes=args.episodes,
                         seed=args.seed, algo=args.algo, eval_rollouts=args.rollouts)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# --------------------------------------------------------------------------
# commands


def cmd_validate(args) -> int:
    if args.net is None and args.spec is None:
        raise ValidationFailure("give --net and/or --spec")
    if args.net is not None and args.spec is None:
        try:
            net = load_network(args.net)
        except NetworkError as exc:
            raise ValidationFailure(f"{args.net}: {exc}") from None
        print(f"{args.net}: network {net.name!r} with {net.n} nodes, {net.m} inputs, "
              f"{len(net.probabilistic_nodes)} probabilistic node(s)")
        return EXIT_OK
    exp = _load(args)
    net, spec = exp.net, exp.spec
    print(f"network {net.name!r}: {net.n} nodes, {net.m} inputs")
    print(f"problem {spec.kind.value}: T={spec.horizon}, gamma={spec.gamma}")
    print(f"  initial {format_bits(spec.initial, net.n)}")
    print(f"  target  {format_bits(spec.target, net.n)}")
    if spec.kind is not ProblemKind.P1 and net.m == 0:
        raise ValidationFailure("attack penalties need at least one control input")
    check = validate_rprime(spec.kind, spec.rprime, spec.horizon, max(net.m, 1))
    if not check.ok:
        raise ValidationFailure(check.message)
    print(f"  {check.message}")
    return EXIT_OK


def cmd_train(args) -> int:
    exp = _load(args)
    net, spec = exp.net, exp.spec
    cfg = _learner_config(args, exp)
    out = _out_dir(args)
    summary = {"network": net.name, "problem": spec.kind.value, "algo": cfg.algo, "alpha": cfg.alpha,
               "epsilon": cfg.epsilon, "episodes": cfg.episodes, "seed": cfg.seed}
    if cfg.algo == "dense":
        res = train_dense(net, spec, cfg)
        policy = FinalPolicy.greedy(res.q, spec.horizon)
        policy.estimate, policy.stderr = evaluate_policy_mc(
            net, spec, policy, cfg.eval_rollouts, rng_streams(cfg.seed)[2])
        summary["q_entries"] = res.q.entry_count
    else:
        res = train_improved(net, spec, cfg)
        policy = select_final_policy(net, spec, cfg, res.q, res.max_r, res.max_A)
        summary.update(q_states=len(res.q), visited_sequences=len(res.visited),
                       max_r=res.max_r, max_A=list(res.max_A))
    summary.update(final_policy=policy.kind, estimate=policy.estimate, stderr=policy.stderr)

    with open(out / "returns.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["episode", "return"])
        for i, g in enumerate(res.returns, start=1):
            w.writerow([i, repr(float(g))])
    (out / "policy.json").write_text(json.dumps(policy.to_dict()) + "\n", encoding="utf-8")
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    print(f"final policy: {policy.kind}, estimated return {policy.estimate:.6g} +/- {policy.stderr:.3g}")
    if policy.kind == "open_loop":
        print("attack sequence: " + " ".join(format_bits(a, net.m) for a in policy.actions))
    print(f"wrote {out / 'returns.csv'}, {out / 'policy.json'}, {out / 'summary.json'}")
    return EXIT_OK


def _oracle_entries(exp, problem_arg):
    if problem_arg == "all":
        kinds = [k.value for k in ProblemKind]
    else:
        kinds = [exp.spec.kind.value]
    entries = []
    for kind in kinds:
        spec = exp.spec
        if problem_arg == "all":
            spec = spec.with_problem(kind, _settings(exp, kind).get("rprime"))
        entries.append((kind, exact_q(exp.net, spec)))
    return entries


def cmd_oracle(args) -> int:
    problem = args.problem
    args.problem = None if problem == "all" else problem
    exp = _load(args)
    entries = _oracle_entries(exp, problem or exp.spec.kind.value)
    text = bench.oracle_report_text(exp.net, entries)
    print(text, end="")
    if args.out:
        out = _out_dir(args)
        (out / "oracle_report.csv").write_text(bench.oracle_report_csv(entries), encoding="utf-8")
        (out / "oracle_report.txt").write_text(text, encoding="utf-8")
    return EXIT_OK


def cmd_eval(args) -> int:
    exp = _load(args)
    try:
        policy = FinalPolicy.from_dict(json.loads(Path(args.policy).read_text(encoding="utf-8")))
    except (OSError, ValueError, KeyError) as exc:
        raise ValidationFailure(f"cannot read policy {args.policy}: {exc}") from None
    if policy.horizon != exp.spec.horizon:
        raise ValidationFailure(f"policy horizon {policy.horizon} does not match T={exp.spec.horizon}")
    mean, stderr = evaluate_policy_mc(exp.net, exp.spec, policy, args.rollouts, args.seed)
    print(f"mean return {mean:.6g} +/- {stderr:.3g} over {args.rollouts} rollouts")
    row = {"rollouts": args.rollouts, "mean_return": repr(mean), "stderr": repr(stderr)}
    if args.exact:
        value, success = evaluate_policy_exact(exp.net, exp.spec, policy)
        print(f"exact return {value:.6g}, success probability {success:.6g}")
        row.update(exact_return=repr(value), success_prob=repr(success))
    if args.out:
        out = _out_dir(args)
        with open(out / "eval.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=list(row), lineterminator="\n")
            w.writeheader()
            w.writerow(row)
    return EXIT_OK


def cmd_reproduce(args) -> int:
    plan = bench.reference_plan(args.example, args.problem, runs=args.runs, episodes=args.episodes,
                            full=args.full, master_seed=args.seed, out_dir=Path(args.out),
                            workers=args.workers, eval_rollouts=args.rollouts, epsilon=args.epsilon,
                            svg=not args.no_svg)
    settings = bench.REFERENCE_SETTINGS[args.example][plan.experiment.spec.kind.value]
    print(f"{args.example} {args.problem}: alpha={settings['alpha']} r'={plan.experiment.spec.rprime} "
          f"gamma={plan.experiment.spec.gamma} T={plan.experiment.spec.horizon} algos={','.join(plan.algos)}")
    print(f"reward curve: {plan.reward_runs} runs x {plan.reward_episodes} episodes; "
          f"probability curve: {plan.prob_runs} runs per budget {list(plan.budgets)}")
    outputs = bench.run_study(plan, args.problem)
    print(outputs["oracle_report.txt"], end="")
    for algo in plan.algos:
        print(f"[{algo}] prob_optimal by budget:")
        print(outputs[f"prob_optimal_{algo}.csv"], end="")
    print(f"wrote {len(outputs)} files to {args.out}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    exp = _load(args)
    cfg = _learner_config(args, exp)
    budgets = tuple(int(b) for b in args.budgets.split(","))
    plan = bench.ExperimentPlan(exp, cfg, algos=(cfg.algo,), prob_runs=args.runs, budgets=budgets,
                                master_seed=args.seed, workers=args.workers, eval_rollouts=args.rollouts)
    eq = exact_q(exp.net, exp.spec)
    rows = bench.probability_curve(exp.net, exp.spec, replace(cfg, eval_rollouts=args.rollouts), budgets,
                                   args.runs, eq.value, plan.seeds, args.workers)
    text = bench.probability_csv(rows)
    print(text, end="")
    if args.out:
        (_out_dir(args) / f"prob_optimal_{cfg.algo}.csv").write_text(text, encoding="utf-8")
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing


def _common(p: argparse.ArgumentParser, learner: bool = True, problems=(), out: str | None = "out") -> None:
    p.add_argument("--spec", help="experiment YAML file or bundled example name (lac10, tcr28)")
    p.add_argument("--net", help="network file overriding the one named in the spec")
    p.add_argument("--problem", choices=[k.value for k in ProblemKind] + list(problems))
    p.add_argument("--rprime", type=float, help="attack penalty r' (P2/P3)")
    p.add_argument("--gamma", type=float)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=out)
    if learner:
        p.add_argument("--algo", choices=["dense", "improved"], default="improved")
        p.add_argument("--alpha", type=float)
        p.add_argument("--epsilon", type=float, default=0.05)
        p.add_argument("--episodes", type=int, default=10_000)
        p.add_argument("--rollouts", type=int, default=10_000, help="Monte Carlo rollouts for policy scoring")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pbcn-attack", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check a network file and the r' bound of a problem")
    _common(p, learner=False)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("train", help="run one learner and save its policy")
    _common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("oracle", help="exact optimal values by backward induction")
    _common(p, learner=False, problems=["all"], out=None)
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("eval", help="score a saved policy")
    _common(p, learner=False, out=None)
    p.add_argument("--policy", required=True)
    p.add_argument("--rollouts", type=int, default=10_000)
    p.add_argument("--exact", action="store_true", help="also evaluate with the exact model")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("reproduce", help="rerun the reference convergence studies")
    p.add_argument("example", choices=sorted(bench.REFERENCE_SETTINGS))
    p.add_argument("problem", choices=[k.value for k in ProblemKind])
    p.add_argument("--runs", type=int, help="runs per curve point (default: 100 reward / 10 probability)")
    p.add_argument("--episodes", type=int, help="episodes for the reward curve and largest budget")
    p.add_argument("--full", action="store_true", help="full-scale run counts and budgets")
    p.add_argument("--seed", type=int, default=0, help="master seed")
    p.add_argument("--epsilon", type=float, default=0.05)
    p.add_argument("--rollouts", type=int, default=1000, help="Monte Carlo rollouts for final-policy selection")
    p.add_argument("--workers", type=int, default=bench.default_workers())
    p.add_argument("--no-svg", action="store_true")
    p.add_argument("--out", default="out")
    p.set_defaults(func=cmd_reproduce)

    p = sub.add_parser("sweep", help="probability of learning the optimum over an episode grid")
    _common(p, out=None)
    p.add_argument("--budgets", default="10,100,1000")
    p.add_argument("--runs", type=int, default=100)
    p.add_argument("--workers", type=int, default=bench.default_workers())
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ValidationFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except TableBudgetError as exc:
        print(f"refused: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    except OracleCapError as exc:
        print(f"oracle: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
