"""Acceptance criteria, one test per criterion, each at its stated tolerance."""
import itertools
import math
import random
import time
from collections import Counter

import numpy as np
import pytest

from pbcn_attack import bench
from pbcn_attack.attack_env import AttackEnv, ProblemSpec, reward, validate_rprime
from pbcn_attack.cli import main
from pbcn_attack.oracle import enumerate_open_loop, evaluate_policy_exact, exact_q
from pbcn_attack.pbcn import pack_bits, step_sample, transition_distribution
from pbcn_attack.qlearn import (
    LearnerConfig,
    TableBudgetError,
    VisitedReturns,
    select_final_policy,
    train_dense,
    train_improved,
)

from nets import random_net, random_spec, valid_rprime

REFERENCE = bench.REFERENCE_SETTINGS


def _spec(example: str, kind: str):
    exp = bench.load_bundled(example)
    return exp.net, exp.spec.with_problem(kind, REFERENCE[example if example in REFERENCE else "tcr28"][kind]["rprime"])


def _hit_target(net, rng, spec_kwargs):
    """Pick the target as the end state of a random open-loop run so a sure sequence may exist."""
    T = spec_kwargs["horizon"]
    x = spec_kwargs["initial"]
    srng = random.Random(rng.random())
    for t in range(T):
        x = step_sample(net, x, spec_kwargs["nominal"][t] ^ rng.randrange(1 << net.m), srng)
    return x


def test_criterion_01_oracle_correctness(report):
    rng = random.Random(2024)
    start = time.perf_counter()
    worst, checked, bad = 0.0, 0, []
    for i in range(60):
        stochastic = i % 2 == 1
        net = random_net(rng, rng.randint(1, 4), rng.randint(1, 2), stochastic)
        spec = random_spec(rng, net, "P1", rng.randint(1, 3))
        eq = exact_q(net, spec)
        best_open = max(ret for _, ret, _ in enumerate_open_loop(net, spec))
        worst = max(worst, eq.bellman_residual())
        ok = math.isclose(eq.value, best_open, abs_tol=1e-12) if not stochastic else eq.value >= best_open - 1e-12
        if not ok:
            bad.append(i)
        checked += 1
    elapsed = time.perf_counter() - start
    ok = checked >= 20 and not bad and worst <= 1e-12 and elapsed < 10
    report("criterion 1 (oracle correctness)", ok,
           f"{checked} nets, mismatches {bad}, max Bellman residual {worst:.2e}, {elapsed:.2f}s")


def _separation_instances(stochastic_share: float, seed: int):
    """Count tiny instances holding both sure and non-sure sequences, and the separation violations."""
    rng = random.Random(seed)
    start = time.perf_counter()
    counts = {"P2": 0, "P3": 0}
    violations = []
    attempts = 0
    while min(counts.values()) < 25 and attempts < 5000:
        attempts += 1
        kind = "P2" if attempts % 2 else "P3"
        net = random_net(rng, rng.randint(1, 3), rng.randint(1, 2), stochastic=rng.random() < stochastic_share)
        T = rng.randint(1, 3)
        rprime = valid_rprime(kind, T, net.m, rng.uniform(0.02, 0.98))
        assert validate_rprime(kind, rprime, T, net.m).ok
        kw = dict(horizon=T, initial=rng.randrange(1 << net.n), nominal=tuple(rng.randrange(1 << net.m) for _ in range(T)))
        spec = ProblemSpec(kind, target=_hit_target(net, rng, kw), rprime=rprime, **kw)
        rows = enumerate_open_loop(net, spec)
        sure = [ret for _, ret, succ in rows if succ == 1.0]
        other = [ret for _, ret, succ in rows if succ != 1.0]
        if not sure or not other:
            continue
        counts[kind] += 1
        if not min(sure) > max(other):
            violations.append((kind, round(min(sure), 4), round(max(other), 4)))
    return counts, violations, time.perf_counter() - start


@pytest.mark.xfail(strict=True, raises=AssertionError,
                   reason="on stochastic nets a non-sure sequence can return up to its success probability, above 1+T*r'")
def test_criterion_02_separation(report):
    counts, violations, elapsed = _separation_instances(0.5, 7)
    ok = min(counts.values()) >= 20 and not violations and elapsed < 30
    report("criterion 2 (separation bound)", ok,
           f"instances {counts} (half stochastic), {len(violations)} violations e.g. {violations[:2]} "
           f"as (kind, min sure return, max other return), {elapsed:.2f}s")


def test_criterion_02_supplement_deterministic(report):
    counts, violations, elapsed = _separation_instances(0.0, 8)
    ok = min(counts.values()) >= 20 and not violations and elapsed < 30
    report("criterion 2 supplement (deterministic nets)", ok,
           f"instances {counts}, violations {violations[:3]}, {elapsed:.2f}s")


def _c3_job(job):
    kind, seed = job
    net, spec = _spec("lac10", kind)
    cfg = LearnerConfig(alpha=REFERENCE["lac10"][kind]["alpha"], gamma=1.0, episodes=50_000, seed=seed,
                        eval_rollouts=10_000)
    res = train_improved(net, spec, cfg)
    policy = select_final_policy(net, spec, cfg, res.q, res.max_r, res.max_A)
    return evaluate_policy_exact(net, spec, policy)[0]


@pytest.mark.slow
def test_criterion_03_learner_matches_oracle(report):
    start = time.perf_counter()
    lines, ok = [], True
    for kind in ("P1", "P2", "P3"):
        net, spec = _spec("lac10", kind)
        v_star = exact_q(net, spec).value
        seeds = [bench.derive_seed(3, r) for r in range(100)]
        values = bench._map(_c3_job, [(kind, s) for s in seeds], bench.default_workers())
        hits = sum(abs(v - v_star) <= 1e-6 for v in values)
        ok &= hits >= 90
        lines.append(f"{kind} {hits}/100 (v*={v_star})")
    elapsed = time.perf_counter() - start
    ok &= elapsed < 300 * max(1, 4 // bench.default_workers())
    report("criterion 3 (lac10 learner vs oracle, 50000 episodes)", ok, "; ".join(lines) + f"; {elapsed:.0f}s")


@pytest.mark.slow
def test_criterion_04_improved_not_worse(report):
    budgets = bench.scaled_defaults()["budgets"]
    lines, ok = [], True
    for kind in ("P1", "P2", "P3"):
        plan = bench.reference_plan("lac10", kind, runs=100, master_seed=4, workers=bench.default_workers())
        net, spec = plan.experiment.net, plan.experiment.spec
        v_star = exact_q(net, spec).value
        curves = {}
        for algo in ("dense", "improved"):
            cfg = LearnerConfig(alpha=plan.config.alpha, gamma=1.0, algo=algo, eval_rollouts=plan.eval_rollouts)
            rows = bench.probability_curve(net, spec, cfg, budgets, 100, v_star, plan.seeds, plan.workers)
            curves[algo] = [p for _, p, _ in rows]
        gaps = [i - d for i, d in zip(curves["improved"], curves["dense"])]
        ok &= min(gaps) >= -0.05
        lines.append(f"{kind} min gap {min(gaps):+.2f}, improved {curves['improved']}, dense {curves['dense']}")
    report("criterion 4 (improved >= dense on the lac10 grid)", ok,
           f"budgets {list(budgets)}; " + "; ".join(lines))


def _criterion_05(example: str):
    start = time.perf_counter()
    net, spec = _spec(example, "P1")
    try:
        train_dense(net, spec, LearnerConfig(algo="dense", episodes=1))
        refused = False
    except TableBudgetError:
        refused = True
    parts, ok = [f"dense refused: {refused}"], refused
    for kind in ("P1", "P2", "P3"):
        net, spec = _spec(example, kind)
        cfg = LearnerConfig(alpha=0.05, gamma=1.0, episodes=100_000, seed=bench.derive_seed(5, 0))
        res = train_improved(net, spec, cfg)
        policy = select_final_policy(net, spec, cfg, res.q, res.max_r, res.max_A)
        value, success = evaluate_policy_exact(net, spec, policy)
        entries = len(res.q) * (1 << net.m)
        ok &= entries < 10**6 and success == 1.0
        parts.append(f"{kind} entries {entries}, success probability {success}, return {value:.3f}")
    elapsed = time.perf_counter() - start
    ok &= elapsed < 600
    return ok, "; ".join(parts) + f"; {elapsed:.1f}s"


@pytest.mark.slow
@pytest.mark.xfail(strict=True, raises=AssertionError,
                   reason="the bundled tcr28 target is unreachable from its initial state")
def test_criterion_05_tcr28_feasibility(report):
    ok, detail = _criterion_05("tcr28")
    report("criterion 5 (tcr28 feasibility)", ok, detail)


@pytest.mark.slow
def test_criterion_05_supplement_reachable_target(report):
    ok, detail = _criterion_05("tcr28_reachable")
    report("criterion 5 supplement (tcr28, reachable target)", ok, detail)


def test_criterion_06_dense_sparse_equivalence(report):
    net, spec = _spec("lac10", "P1")
    cfg = LearnerConfig(alpha=0.01, episodes=5000, seed=6)
    dense, sparse = train_dense(net, spec, cfg), train_improved(net, spec, cfg)
    same_returns = np.array_equal(dense.returns, sparse.returns)
    arr = dense.q.as_array()
    mismatched = sum(1 for (x, t), row in sparse.q.rows() if t < spec.horizon and list(arr[t, x]) != row)
    ok = same_returns and mismatched == 0
    report("criterion 6 (dense/sparse equivalence)", ok,
           f"returns equal {same_returns}, {len(sparse.q)} visited states, {mismatched} differing rows")


def _case_table(kind, T, rprime, t, a, hit):
    last = t == T - 1
    if kind == "P1":
        return float(last and hit)
    pen = (rprime if a else 0.0) if kind == "P2" else rprime * bin(a).count("1")
    return pen + (1.0 if last and hit else 0.0)


def test_criterion_07_reward_design(report):
    T, mismatches, cases = 5, 0, 0
    for m, kind in itertools.product((1, 2, 3), ("P1", "P2", "P3")):
        rprime = {"P1": 0.0, "P2": -0.1, "P3": -0.05}[kind]
        spec = ProblemSpec(kind, T, target=1, initial=0, nominal=(0,) * T, rprime=rprime)
        for t, a, hit in itertools.product(range(T), range(1 << m), (True, False)):
            cases += 1
            if abs(reward(spec, t, a, 1 if hit else 0) - _case_table(kind, T, rprime, t, a, hit)) > 1e-15:
                mismatches += 1
    range_bad = {}
    for kind in ("P1", "P2", "P3"):
        net, spec = _spec("lac10", kind)
        r = spec.rprime
        ks = range(T + 1) if kind == "P2" else range(net.m * T + 1)
        allowed = sorted({round(k * r, 12) for k in ks} | {round(1 + k * r, 12) for k in ks})
        env, rng = AttackEnv(net, spec, 70), random.Random(71)
        bad = 0
        for _ in range(100_000):
            env.reset()
            G = 0.0
            for _ in range(T):
                G += env.step(rng.randrange(8)).reward
            if round(G, 12) not in allowed:
                bad += 1
        range_bad[kind] = bad
    ok = mismatches == 0 and not any(range_bad.values())
    report("criterion 7 (reward design)", ok,
           f"{cases} table cases, {mismatches} mismatches; out-of-range returns per kind {range_bad} over 100000 episodes")


def _tv(net, state, u, n_samples, seed):
    rng = random.Random(seed)
    counts = Counter(step_sample(net, state, u, rng) for _ in range(n_samples))
    law = dict(transition_distribution(net, state, u))
    keys = set(counts) | set(law)
    return 0.5 * sum(abs(counts.get(k, 0) / n_samples - law.get(k, 0.0)) for k in keys), law


def test_criterion_08_sampling_fidelity(report):
    lac = bench.load_bundled("lac10").net
    tcr = bench.load_bundled("tcr28").net
    lac_state = pack_bits([0, 1, 0, 0, 1, 1, 0, 0, 0, 0])
    tcr_bits = [0, 0, 0, 0, 1, 1, 1, 0, 0, 0, 1, 0, 0, 0, 0, 0, 0, 0, 0, 1, 1, 0, 0, 0, 0, 0, 1, 0]
    tv_lac, law_lac = _tv(lac, lac_state, 0, 100_000, 8)
    tv_tcr, law_tcr = _tv(tcr, pack_bits(tcr_bits), 7, 100_000, 9)
    probs_ok = sorted(law_lac.values()) == pytest.approx([0.4, 0.6]) and sorted(law_tcr.values()) == pytest.approx([0.5, 0.5])
    ok = tv_lac <= 0.01 and tv_tcr <= 0.01 and probs_ok
    report("criterion 8 (sampling fidelity)", ok, f"TV lac10 {tv_lac:.4f}, TV tcr28 {tv_tcr:.4f} at 100000 samples")


def test_criterion_09_incremental_mean(report):
    rng = random.Random(9)
    worst = 0.0
    for _ in range(10_000):
        vr, batches = VisitedReturns(), {}
        for _ in range(rng.randint(1, 40)):
            key = (rng.randrange(4),)
            g = rng.choice([rng.uniform(-2, 2), rng.choice([0.0, 1.0, 0.9, -0.1])])
            vr.add(key, g)
            batches.setdefault(key, []).append(g)
        for key, rets in batches.items():
            n, avg = vr[key]
            assert n == len(rets)
            worst = max(worst, abs(avg - math.fsum(rets) / n))
    report("criterion 9 (incremental mean)", worst <= 1e-9, f"10000 cases, max deviation {worst:.2e}")


def test_criterion_10_reproducibility(report, tmp_path):
    args = ["reproduce", "lac10", "P1", "--runs", "10", "--episodes", "2000", "--seed", "0"]
    assert main(args + ["--out", str(tmp_path / "first")]) == 0
    assert main(args + ["--out", str(tmp_path / "second")]) == 0
    csvs = sorted(p.name for p in (tmp_path / "first").glob("*.csv"))
    diff = [n for n in csvs if (tmp_path / "first" / n).read_bytes() != (tmp_path / "second" / n).read_bytes()]
    report("criterion 10 (reproducibility)", bool(csvs) and not diff, f"{len(csvs)} CSV files, differing: {diff}")
