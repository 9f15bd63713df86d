"""Replicated learning studies: reward curves and probability of learning the optimum.

Run seeds come from :func:`derive_seed`, which feeds ``(master, run, budget)``
to ``numpy.random.SeedSequence`` and takes the first 64-bit word. Results are
reduced in run-index order, so worker count never changes the output.
"""
from __future__ import annotations

import csv
import io
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from importlib.resources import files
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .attack_env import Experiment, ProblemKind, ProblemSpec, load_experiment
from .netlang import NetworkDef
from .oracle import ExactQ, evaluate_greedy_exact, evaluate_policy_exact, exact_q
from .pbcn import format_bits
from .qlearn import FinalPolicy, LearnerConfig, select_final_policy, train_dense, train_improved

OPTIMALITY_TOL = 1e-6

# step size and attack penalty per bundled example and problem
REFERENCE_SETTINGS = {
    "lac10": {
        "P1": {"alpha": 0.01, "rprime": 0.0},
        "P2": {"alpha": 0.01, "rprime": -0.1},
        "P3": {"alpha": 0.09, "rprime": -0.05},
        "algos": ("dense", "improved"),
    },
    "tcr28": {
        "P1": {"alpha": 0.05, "rprime": 0.0},
        "P2": {"alpha": 0.05, "rprime": -0.1},
        "P3": {"alpha": 0.05, "rprime": -0.05},
        "algos": ("improved",),
    },
}
FULL_SCALE = {
    "reward_runs": 1000,
    "prob_runs": 100,
    "reward_episodes": 10_000,
    "budgets": (10, 20, 50, 100, 200, 500, 1000, 2000, 5000, 10_000, 20_000, 50_000),
}
SCALE_DOWN = 10


def scaled_defaults(full: bool = False) -> dict:
    """Study sizes; the CI default divides runs and budgets by ten."""
    if full:
        return dict(FULL_SCALE)
    return {
        "reward_runs": FULL_SCALE["reward_runs"] // SCALE_DOWN,
        "prob_runs": FULL_SCALE["prob_runs"] // SCALE_DOWN,
        "reward_episodes": FULL_SCALE["reward_episodes"] // SCALE_DOWN,
        "budgets": tuple(max(1, b // SCALE_DOWN) for b in FULL_SCALE["budgets"]),
    }


def bundled_path(name: str) -> Path:
    return Path(str(files("pbcn_attack.data").joinpath(name)))


def load_bundled(example: str) -> Experiment:
    if example not in REFERENCE_SETTINGS and not bundled_path(f"{example}.yaml").exists():
        raise FileNotFoundError(f"no bundled experiment named {example!r}")
    return load_experiment(bundled_path(f"{example}.yaml"))


def derive_seed(master: int, run: int, budget_index: int = 0) -> int:
    words = np.random.SeedSequence([master, run, budget_index]).generate_state(1, dtype=np.uint64)
    return int(words[0])


@dataclass
class ExperimentPlan:
    experiment: Experiment
    config: LearnerConfig
    algos: tuple[str, ...] = ("dense", "improved")
    reward_runs: int = 100
    reward_episodes: int = 1000
    prob_runs: int = 10
    budgets: tuple[int, ...] = ()
    master_seed: int = 0
    out_dir: Path | None = None
    workers: int = 1
    eval_rollouts: int = 1000
    svg: bool = True

    def seeds(self, runs: int, budget_index: int) -> list[int]:
        seeds = [derive_seed(self.master_seed, r, budget_index) for r in range(runs)]
        if len(set(seeds)) != len(seeds):
            raise RuntimeError("seed collision; pick another master seed")
        return seeds


def _map(fn, jobs: list, workers: int) -> list:
    if workers <= 1 or len(jobs) <= 1:
        return [fn(job) for job in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs, chunksize=max(1, len(jobs) // (4 * workers))))


def _train_returns(job) -> np.ndarray:
    net, spec, cfg = job
    train = train_dense if cfg.algo == "dense" else train_improved
    return train(net, spec, cfg).returns


def final_policy(net: NetworkDef, spec: ProblemSpec, cfg: LearnerConfig):
    """Train once and return ``(final policy, training result)``."""
    if cfg.algo == "dense":
        res = train_dense(net, spec, cfg)
        return FinalPolicy.greedy(res.q, spec.horizon), res
    res = train_improved(net, spec, cfg)
    return select_final_policy(net, spec, cfg, res.q, res.max_r, res.max_A), res


def exact_policy_value(net: NetworkDef, spec: ProblemSpec, policy: FinalPolicy) -> float:
    if policy.kind == "greedy":
        return evaluate_greedy_exact(net, spec, policy.q)[0]
    return evaluate_policy_exact(net, spec, policy)[0]


def _optimal_run(job) -> bool:
    net, spec, cfg, v_star = job
    policy, _ = final_policy(net, spec, cfg)
    return abs(exact_policy_value(net, spec, policy) - v_star) <= OPTIMALITY_TOL


def reward_curve(net, spec, cfg: LearnerConfig, runs: int, episodes: int, seeds: Sequence[int],
                 workers: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Per-episode mean training return and its standard error over ``runs`` runs."""
    jobs = [(net, spec, replace(cfg, episodes=episodes, seed=s)) for s in seeds[:runs]]
    table = np.vstack(_map(_train_returns, jobs, workers)) if jobs else np.zeros((0, episodes))
    mean = table.mean(axis=0)
    if runs > 1:
        stderr = table.std(axis=0, ddof=1) / math.sqrt(runs)
    else:
        stderr = np.zeros(episodes)
    return mean, stderr


def probability_curve(net, spec, cfg: LearnerConfig, budgets: Sequence[int], runs: int, v_star: float,
                      plan_seeds, workers: int = 1) -> list[tuple[int, float, int]]:
    """``(budget, fraction of runs whose final policy is optimal, runs)`` per budget."""
    jobs = []
    for bi, budget in enumerate(budgets):
        jobs.extend((net, spec, replace(cfg, episodes=budget, seed=s), v_star) for s in plan_seeds(runs, bi + 1))
    flags = _map(_optimal_run, jobs, workers)
    out = []
    for bi, budget in enumerate(budgets):
        hits = flags[bi * runs:(bi + 1) * runs]
        out.append((budget, sum(hits) / runs if runs else math.nan, runs))
    return out


# --------------------------------------------------------------------------
# file outputs


def _fmt(v: float) -> str:
    return repr(float(v))


def reward_curve_csv(mean: np.ndarray, stderr: np.ndarray) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["episode", "mean_return", "stderr"])
    for i, (m, s) in enumerate(zip(mean, stderr), start=1):
        w.writerow([i, _fmt(m), _fmt(s)])
    return buf.getvalue()


def probability_csv(rows: Iterable[tuple[int, float, int]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["episode_budget", "prob_optimal", "runs"])
    for budget, prob, runs in rows:
        w.writerow([budget, _fmt(prob), runs])
    return buf.getvalue()


def oracle_report_csv(entries: Sequence[tuple[str, ExactQ]]) -> str:
    """One row per problem: ``problem,v_star,layer_0,...,layer_T``."""
    horizon = max(eq.spec.horizon for _, eq in entries)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["problem", "v_star"] + [f"layer_{t}" for t in range(horizon + 1)])
    for problem, eq in entries:
        w.writerow([problem, _fmt(eq.value)] + eq.layers.sizes)
    return buf.getvalue()


def oracle_report_text(net: NetworkDef, entries: Sequence[tuple[str, ExactQ]]) -> str:
    lines = []
    for problem, eq in entries:
        spec = eq.spec
        lines.append(f"[{problem}] {net.name}: T={spec.horizon} gamma={spec.gamma} r'={spec.rprime}")
        lines.append(f"  v*(X(0), 0) = {eq.value!r}")
        lines.append(f"  reachable layer sizes: {eq.layers.sizes}")
        seq = eq.realization()
        lines.append("  optimal attack along most likely path: "
                     + " ".join(format_bits(a, net.m) for a in seq))
        lines.append(f"  Bellman residual: {eq.bellman_residual():.3g}")
    return "\n".join(lines) + "\n"


def svg_line_chart(series: dict[str, tuple[Sequence[float], Sequence[float]]], title: str,
                   xlabel: str, ylabel: str, width: int = 640, height: int = 400,
                   log_x: bool = False) -> str:
    """Minimal standalone SVG with one polyline per series."""
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"]
    left, right, top, bottom = 70, 20, 40, 50
    pts = [(float(x), float(y)) for xs, ys in series.values() for x, y in zip(xs, ys)]
    tx = (lambda v: math.log10(v)) if log_x else (lambda v: v)
    if not pts:
        pts = [(1.0, 0.0)]
    xmin, xmax = min(tx(p[0]) for p in pts), max(tx(p[0]) for p in pts)
    ymin, ymax = min(p[1] for p in pts), max(p[1] for p in pts)
    if xmax == xmin:
        xmax = xmin + 1
    if ymax == ymin:
        ymax = ymin + 1
    pw, ph = width - left - right, height - top - bottom

    def sx(v: float) -> float:
        return left + (tx(v) - xmin) / (xmax - xmin) * pw

    def sy(v: float) -> float:
        return top + (ymax - v) / (ymax - ymin) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" font-size="14">{title}</text>',
           f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
           f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>',
           f'<text x="{left + pw / 2:.1f}" y="{height - 10}" text-anchor="middle">{xlabel}</text>',
           f'<text x="15" y="{top + ph / 2:.1f}" text-anchor="middle" '
           f'transform="rotate(-90 15 {top + ph / 2:.1f})">{ylabel}</text>']
    for k in range(5):
        yv = ymin + (ymax - ymin) * k / 4
        out.append(f'<text x="{left - 5}" y="{sy(yv) + 4:.1f}" text-anchor="end">{yv:.3g}</text>')
        xv = xmin + (xmax - xmin) * k / 4
        label = 10 ** xv if log_x else xv
        out.append(f'<text x="{left + pw * k / 4:.1f}" y="{top + ph + 18}" text-anchor="middle">{label:.3g}</text>')
    for i, (name, (xs, ys)) in enumerate(series.items()):
        color = colors[i % len(colors)]
        coords = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in zip(xs, ys))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{coords}"/>')
        out.append(f'<text x="{left + pw - 5}" y="{top + 15 + 15 * i}" text-anchor="end" fill="{color}">{name}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _downsample(n: int, limit: int = 2000) -> np.ndarray:
    step = max(1, n // limit)
    return np.arange(0, n, step)


def run_study(plan: ExperimentPlan, problem: str) -> dict[str, str]:
    """Run reward and probability studies for every algorithm and write the files.

    Returns the written file contents keyed by file name.
    """
    exp = plan.experiment
    net, spec = exp.net, exp.spec
    cfg = replace(plan.config, eval_rollouts=plan.eval_rollouts)
    eq = exact_q(net, spec)
    outputs: dict[str, str] = {
        "oracle_report.csv": oracle_report_csv([(problem, eq)]),
        "oracle_report.txt": oracle_report_text(net, [(problem, eq)]),
    }
    curves, probs = {}, {}
    for algo in plan.algos:
        acfg = replace(cfg, algo=algo)
        mean, stderr = reward_curve(net, spec, acfg, plan.reward_runs, plan.reward_episodes,
                                    plan.seeds(plan.reward_runs, 0), plan.workers)
        outputs[f"reward_curve_{algo}.csv"] = reward_curve_csv(mean, stderr)
        rows = probability_curve(net, spec, acfg, plan.budgets, plan.prob_runs, eq.value,
                                 plan.seeds, plan.workers)
        outputs[f"prob_optimal_{algo}.csv"] = probability_csv(rows)
        idx = _downsample(len(mean))
        curves[algo] = (idx + 1, mean[idx])
        probs[algo] = ([r[0] for r in rows], [r[1] for r in rows])
    if plan.svg:
        outputs["reward_curve.svg"] = svg_line_chart(
            curves, f"{net.name} {problem}: mean return over {plan.reward_runs} runs", "episode", "mean return")
        outputs["prob_optimal.svg"] = svg_line_chart(
            probs, f"{net.name} {problem}: probability of learning the optimum", "episodes", "probability",
            log_x=True)
    if plan.out_dir is not None:
        out = Path(plan.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for name, text in outputs.items():
            (out / name).write_text(text, encoding="utf-8")
    return outputs


def reference_plan(example: str, problem: str, *, runs: int | None = None, episodes: int | None = None,
               full: bool = False, master_seed: int = 0, out_dir=None, workers: int = 1,
               eval_rollouts: int = 1000, epsilon: float = 0.05, svg: bool = True) -> ExperimentPlan:
    """The bundled example with its reference step size and penalty for ``problem``."""
    problem = ProblemKind(problem).value
    settings = REFERENCE_SETTINGS[example]
    exp = load_bundled(example)
    exp.spec = exp.spec.with_problem(problem, settings[problem]["rprime"])
    sizes = scaled_defaults(full)
    budgets = sizes["budgets"]
    reward_episodes = sizes["reward_episodes"]
    if episodes is not None:
        reward_episodes = episodes
        budgets = tuple(b for b in budgets if b < episodes) + (episodes,)
    cfg = LearnerConfig(alpha=settings[problem]["alpha"], gamma=exp.spec.gamma, epsilon=epsilon,
                        eval_rollouts=eval_rollouts)
    return ExperimentPlan(
        experiment=exp,
        config=cfg,
        algos=settings["algos"],
        reward_runs=runs if runs is not None else sizes["reward_runs"],
        reward_episodes=reward_episodes,
        prob_runs=runs if runs is not None else sizes["prob_runs"],
        budgets=budgets,
        master_seed=master_seed,
        out_dir=out_dir,
        workers=workers,
        eval_rollouts=eval_rollouts,
        svg=svg,
    )


def default_workers() -> int:
    return max(1, os.cpu_count() or 1)
