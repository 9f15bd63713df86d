"""Tabular Q-learning attackers.

``train_dense`` keeps a full ``T x 2^n x 2^m`` table. ``train_improved``
creates rows only for visited MDP states and additionally remembers the
running-mean return of every open-loop action sequence it has played, so a
good sequence seen during exploration is not lost when the greedy policy has
not caught up yet.

The learners talk to the network only through :class:`AttackEnv`.
"""
from __future__ import annotations

import logging
import math
import random
from array import array
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator

from .attack_env import AttackEnv, ProblemSpec, check_problem
from .netlang import NetworkDef

logger = logging.getLogger(__name__)

DEFAULT_DENSE_BUDGET = 1 << 28


class TableBudgetError(ValueError):
    """The dense action-value table would exceed the configured entry budget."""


@dataclass
class LearnerConfig:
    alpha: float = 0.01
    gamma: float | None = None  # None: take the problem's discount
    epsilon: float = 0.05
    episodes: int = 10_000
    seed: int = 0
    algo: str = "improved"
    M: float | None = None  # None: -gamma**(T-1) - 1
    eval_rollouts: int = 10_000
    dense_budget: int = DEFAULT_DENSE_BUDGET

    def resolved(self, spec: ProblemSpec) -> "LearnerConfig":
        """Copy with ``gamma`` and ``M`` filled in and every field checked."""
        gamma = spec.gamma if self.gamma is None else float(self.gamma)
        M = -gamma ** (spec.horizon - 1) - 1.0 if self.M is None else float(self.M)
        cfg = LearnerConfig(float(self.alpha), gamma, float(self.epsilon), int(self.episodes),
                            int(self.seed), str(self.algo).lower(), M, int(self.eval_rollouts),
                            int(self.dense_budget))
        check_config(cfg, spec.horizon)
        return cfg


def check_config(cfg: LearnerConfig, horizon: int) -> None:
    if not 0.0 < cfg.alpha <= 1.0:
        raise ValueError(f"alpha must lie in (0, 1], got {cfg.alpha}")
    if cfg.gamma is not None and not 0.0 < cfg.gamma <= 1.0:
        raise ValueError(f"gamma must lie in (0, 1], got {cfg.gamma}")
    if not 0.0 < cfg.epsilon < 1.0:
        raise ValueError(f"epsilon must lie in (0, 1), got {cfg.epsilon}")
    if cfg.episodes < 0:
        raise ValueError("episodes must be non-negative")
    if cfg.eval_rollouts < 1:
        raise ValueError("eval_rollouts must be at least 1")
    if cfg.algo not in ("dense", "improved"):
        raise ValueError(f"algo must be 'dense' or 'improved', got {cfg.algo!r}")
    if cfg.M is not None and cfg.gamma is not None and not cfg.M < -cfg.gamma ** (horizon - 1):
        raise ValueError(f"M = {cfg.M} must be below -gamma^(T-1) = {-cfg.gamma ** (horizon - 1)}")


def rng_streams(seed: int, count: int = 3) -> list[random.Random]:
    """Independent ``random.Random`` streams derived from one integer seed.

    Stream 0 drives the environment, 1 the exploration, 2 policy evaluation.
    """
    states = np.random.SeedSequence(seed).generate_state(count, dtype=np.uint64)
    return [random.Random(int(s)) for s in states]


def greedy_action(q_row: Sequence[float]) -> int:
    """Index of the largest value; the lowest index wins ties."""
    if len(q_row) == 0:
        raise ValueError("empty action-value row")
    best = max(q_row)
    for a, v in enumerate(q_row):
        if v == best:
            return a
    return 0  # all-NaN row


def ql_update(q_sa: float, reward: float, max_next: float, alpha: float, gamma: float) -> float:
    return q_sa + alpha * (reward + gamma * max_next - q_sa)


# --------------------------------------------------------------------------
# action-value storage


class DenseQ:
    """Flat double array laid out as ``[t][state][action]``."""

    def __init__(self, n: int, m: int, horizon: int):
        self.n, self.m, self.horizon = n, m, horizon
        self.n_actions = 1 << m
        self.values = array("d", bytes(8 * horizon * (1 << (n + m))))

    def offset(self, x: int, t: int) -> int:
        return ((t << self.n) | x) << self.m

    def row(self, x: int, t: int):
        if not 0 <= t < self.horizon:
            return None
        i = self.offset(x, t)
        return self.values[i:i + self.n_actions]

    def as_array(self) -> np.ndarray:
        """Zero-copy view of shape ``(T, 2^n, 2^m)``."""
        return np.frombuffer(self.values, dtype=np.float64).reshape(self.horizon, 1 << self.n, self.n_actions)

    @property
    def entry_count(self) -> int:
        return len(self.values)

    def rows(self):
        """``((x, t), row)`` for every row holding a non-zero value."""
        arr = self.as_array()
        for t, x in zip(*np.nonzero(np.any(arr != 0.0, axis=2))):
            yield (int(x), int(t)), list(arr[t, x])


class SparseQ:
    """Rows keyed by ``(x, t)``, created the first time the state is seen."""

    def __init__(self, m: int):
        self.m = m
        self.n_actions = 1 << m
        self.table: dict[tuple[int, int], list[float]] = {}

    def row(self, x: int, t: int):
        return self.table.get((x, t))

    def __len__(self) -> int:
        return len(self.table)

    def __contains__(self, key) -> bool:
        return tuple(key) in self.table

    def rows(self):
        return iter(self.table.items())


class VisitedReturns:
    """Visit count and running-mean return per open-loop action sequence."""

    def __init__(self):
        self.table: dict[tuple[int, ...], tuple[int, float]] = {}

    def add(self, seq: tuple[int, ...], ret: float) -> None:
        entry = self.table.get(seq)
        if entry is None:
            self.table[seq] = (1, ret)
        else:
            n, avg = entry
            self.table[seq] = (n + 1, avg + (ret - avg) / (n + 1))

    def best(self, M: float) -> tuple[float, tuple[int, ...]]:
        """First entry (in insertion order) with the largest average above ``M``."""
        max_r, max_A = M, ()
        for seq, (_, avg) in self.table.items():
            if avg > max_r:
                max_r, max_A = avg, seq
        return max_r, max_A

    def __len__(self) -> int:
        return len(self.table)

    def __getitem__(self, seq):
        return self.table[tuple(seq)]

    def items(self):
        return self.table.items()


# --------------------------------------------------------------------------
# training


@dataclass
class DenseResult:
    q: DenseQ
    returns: np.ndarray


@dataclass
class ImprovedResult:
    q: SparseQ
    visited: VisitedReturns
    max_r: float
    max_A: tuple[int, ...]
    returns: np.ndarray


def dense_table_size(net: NetworkDef, horizon: int) -> int:
    return (1 << (net.n + net.m)) * horizon


def train_dense(net: NetworkDef, spec: ProblemSpec, cfg: LearnerConfig, log: list | None = None) -> DenseResult:
    """Epsilon-greedy Q-learning over a full table.

    ``log``, when given, receives ``(episode, t, x, a, reward, x_next)`` per step.
    """
    check_problem(net, spec)
    cfg = cfg.resolved(spec)
    size = dense_table_size(net, spec.horizon)
    if size > cfg.dense_budget:
        raise TableBudgetError(
            f"dense table needs 2^{net.n + net.m} * {spec.horizon} = {size} entries, "
            f"over the budget of {cfg.dense_budget}; use the improved (sparse) algorithm")
    env_rng, agent_rng, _ = rng_streams(cfg.seed)
    env = AttackEnv(net, spec, env_rng)
    q = DenseQ(net.n, net.m, spec.horizon)
    vals = q.values
    n, m, nA = net.n, net.m, 1 << net.m
    alpha, gamma, eps = cfg.alpha, cfg.gamma, cfg.epsilon
    rnd = agent_rng.random
    reset, step = env.reset, env.step
    returns = np.zeros(cfg.episodes)

    for ep in range(cfg.episodes):
        x, t = reset()
        G, disc, done = 0.0, 1.0, False
        while not done:
            off = ((t << n) | x) << m
            if rnd() < eps:
                a = int(rnd() * nA)
            else:
                row = vals[off:off + nA]
                a = row.index(max(row))
            (x2, t2), r, done = step(a)
            if done:
                mx = 0.0
            else:
                off2 = ((t2 << n) | x2) << m
                mx = max(vals[off2:off2 + nA])
            i = off + a
            vals[i] = vals[i] + alpha * (r + gamma * mx - vals[i])
            if log is not None:
                log.append((ep, t, x, a, r, x2))
            G += disc * r
            disc *= gamma
            x, t = x2, t2
        returns[ep] = G
    return DenseResult(q, returns)


def train_improved(net: NetworkDef, spec: ProblemSpec, cfg: LearnerConfig, log: list | None = None) -> ImprovedResult:
    """Q-learning with lazily created rows plus best-sequence tracking."""
    check_problem(net, spec)
    cfg = cfg.resolved(spec)
    env_rng, agent_rng, _ = rng_streams(cfg.seed)
    env = AttackEnv(net, spec, env_rng)
    q = SparseQ(net.m)
    Q = q.table
    nA = 1 << net.m
    alpha, gamma, eps = cfg.alpha, cfg.gamma, cfg.epsilon
    rnd = agent_rng.random
    reset, step = env.reset, env.step
    visited = VisitedReturns()
    returns = np.zeros(cfg.episodes)

    for ep in range(cfg.episodes):
        s = tuple(reset())
        row = Q.get(s)
        if row is None:
            row = Q[s] = [0.0] * nA
        G, disc, done = 0.0, 1.0, False
        temp_A = []
        while not done:
            if rnd() < eps:
                a = int(rnd() * nA)
            else:
                a = row.index(max(row))
            s2, r, done = step(a)
            s2 = tuple(s2)
            row2 = Q.get(s2)
            if row2 is None:
                row2 = Q[s2] = [0.0] * nA
            row[a] = row[a] + alpha * (r + gamma * max(row2) - row[a])
            if log is not None:
                log.append((ep, s[1], s[0], a, r, s2[0]))
            G += disc * r
            disc *= gamma
            temp_A.append(a)
            s, row = s2, row2
        visited.add(tuple(temp_A), G)
        returns[ep] = G

    max_r, max_A = visited.best(cfg.M)
    return ImprovedResult(q, visited, max_r, max_A, returns)


# --------------------------------------------------------------------------
# final policy


@dataclass
class FinalPolicy:
    """Either greedy on a Q store or a fixed attack sequence, with its estimated return."""

    kind: str  # "greedy" or "open_loop"
    horizon: int
    q: object = None
    actions: tuple[int, ...] = ()
    estimate: float = math.nan
    stderr: float = math.nan
    misses: int = field(default=0, repr=False)

    def action(self, x: int, t: int) -> int:
        if self.kind == "open_loop":
            return self.actions[t]
        row = self.q.row(x, t)
        if row is None:
            self.misses += 1
            return 0
        return greedy_action(row)

    def to_dict(self) -> dict:
        doc = {"kind": self.kind, "horizon": self.horizon, "estimate": self.estimate, "stderr": self.stderr}
        if self.kind == "open_loop":
            doc["actions"] = list(self.actions)
        else:
            doc["n_actions"] = self.q.n_actions
            doc["rows"] = [[x, t, [float(v) for v in row]] for (x, t), row in self.q.rows()]
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "FinalPolicy":
        """Inverse of :meth:`to_dict`; greedy tables come back as a SparseQ."""
        if doc["kind"] == "open_loop":
            policy = cls.open_loop(doc["actions"])
        elif doc["kind"] == "greedy":
            q = SparseQ(max(0, int(doc["n_actions"]).bit_length() - 1))
            for x, t, row in doc["rows"]:
                q.table[(int(x), int(t))] = [float(v) for v in row]
            policy = cls.greedy(q, int(doc["horizon"]))
        else:
            raise ValueError(f"unknown policy kind {doc['kind']!r}")
        policy.estimate = float(doc.get("estimate", math.nan))
        policy.stderr = float(doc.get("stderr", math.nan))
        return policy

    @classmethod
    def greedy(cls, q, horizon: int) -> "FinalPolicy":
        return cls("greedy", horizon, q=q)

    @classmethod
    def open_loop(cls, actions: Sequence[int]) -> "FinalPolicy":
        return cls("open_loop", len(actions), actions=tuple(actions))


def evaluate_policy_mc(net: NetworkDef, spec: ProblemSpec, policy: FinalPolicy, K: int, seed) -> tuple[float, float]:
    """Mean and standard error of ``K`` sampled episode returns."""
    if K < 1:
        raise ValueError("need at least one rollout")
    env = AttackEnv(net, spec, seed)
    gamma = spec.gamma
    choose, reset, step = policy.action, env.reset, env.step
    misses_before = policy.misses
    rets = np.empty(K)
    for k in range(K):
        x, t = reset()
        G, disc, done = 0.0, 1.0, False
        while not done:
            (x, t), r, done = step(choose(x, t))
            G += disc * r
            disc *= gamma
        rets[k] = G
    if policy.misses > misses_before:
        logger.warning("greedy policy met %d unvisited states; used the no-attack action there",
                       policy.misses - misses_before)
    stderr = float(rets.std(ddof=1) / math.sqrt(K)) if K > 1 else 0.0
    return float(rets.mean()), stderr


def select_final_policy(net: NetworkDef, spec: ProblemSpec, cfg: LearnerConfig, q, max_r: float,
                        max_A: Sequence[int]) -> FinalPolicy:
    """Keep whichever of greedy-on-Q and the best recorded sequence scores higher.

    The greedy policy is scored by ``cfg.eval_rollouts`` sampled episodes; the
    recorded sequence by its running-mean return. Ties go to the greedy policy.
    """
    cfg = cfg.resolved(spec)
    greedy = FinalPolicy.greedy(q, spec.horizon)
    eval_rng = rng_streams(cfg.seed)[2]
    greedy.estimate, greedy.stderr = evaluate_policy_mc(net, spec, greedy, cfg.eval_rollouts, eval_rng)
    if max_A and max_r > greedy.estimate:
        best = FinalPolicy.open_loop(max_A)
        best.estimate = max_r
        return best
    return greedy


# --------------------------------------------------------------------------
# estimator interface


class QLearningAttacker(BaseEstimator):
    """Learn an attack policy on a PBCN without access to its model.

    Parameters mirror :class:`LearnerConfig`; ``random_state`` is the integer
    seed. After ``fit(net, spec)``:

    - ``q_``: the learned action values (DenseQ or SparseQ)
    - ``returns_``: discounted return of every training episode
    - ``policy_``: the final policy (greedy on ``q_`` for the dense algorithm)
    - ``visited_``, ``max_r_``, ``max_A_``: improved algorithm only
    """

    def __init__(self, algo="improved", alpha=0.01, gamma=None, epsilon=0.05, episodes=10_000,
                 M=None, eval_rollouts=10_000, dense_budget=DEFAULT_DENSE_BUDGET, random_state=0):
        self.algo = algo
        self.alpha = alpha
        self.gamma = gamma
        self.epsilon = epsilon
        self.episodes = episodes
        self.M = M
        self.eval_rollouts = eval_rollouts
        self.dense_budget = dense_budget
        self.random_state = random_state

    def _config(self) -> LearnerConfig:
        seed = 0 if self.random_state is None else self.random_state
        if not isinstance(seed, (int, np.integer)):
            raise ValueError("random_state must be an integer seed")
        return LearnerConfig(self.alpha, self.gamma, self.epsilon, self.episodes, int(seed),
                             self.algo, self.M, self.eval_rollouts, self.dense_budget)

    def fit(self, net: NetworkDef, spec: ProblemSpec, log: list | None = None):
        cfg = self._config().resolved(spec)
        self.spec_ = spec
        self.n_actions_ = 1 << net.m
        if cfg.algo == "dense":
            res = train_dense(net, spec, cfg, log)
            self.q_, self.returns_ = res.q, res.returns
            self.policy_ = FinalPolicy.greedy(res.q, spec.horizon)
            self.policy_.estimate, self.policy_.stderr = evaluate_policy_mc(
                net, spec, self.policy_, cfg.eval_rollouts, rng_streams(cfg.seed)[2])
        else:
            res = train_improved(net, spec, cfg, log)
            self.q_, self.returns_ = res.q, res.returns
            self.visited_, self.max_r_, self.max_A_ = res.visited, res.max_r, res.max_A
            self.policy_ = select_final_policy(net, spec, cfg, res.q, res.max_r, res.max_A)
        return self

    def predict(self, X) -> np.ndarray:
        """Attack code for each row ``(state code, t)`` of ``X``."""
        if not hasattr(self, "policy_"):
            raise RuntimeError("QLearningAttacker is not fitted yet; call fit(net, spec)")
        X = np.asarray(X, dtype=np.int64)
        if X.ndim != 2 or X.shape[1] != 2:
            raise ValueError(f"expected an array of (state, t) rows, got shape {X.shape}")
        if np.any(X[:, 1] < 0) or np.any(X[:, 1] >= self.spec_.horizon):
            raise ValueError(f"time indices must lie in [0, {self.spec_.horizon})")
        return np.array([self.policy_.action(int(x), int(t)) for x, t in X], dtype=np.int64)
