"""Exact model-based solver for the attack MDP.

Everything here reads the network's transition law directly, so it serves as
ground truth for the learners. Nothing in :mod:`pbcn_attack.qlearn` imports
this module.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable, Sequence

from .attack_env import ProblemSpec, check_problem, reward
from .netlang import NetworkDef
from .pbcn import dynamics
from .qlearn import greedy_action

DEFAULT_LAYER_CAP = 10**6
ENUMERATION_LIMIT = 12


class OracleCapError(RuntimeError):
    pass


@dataclass(frozen=True)
class ReachableLayers:
    layers: tuple[tuple[int, ...], ...]  # sorted state codes, one tuple per t = 0..T

    @property
    def sizes(self) -> list[int]:
        return [len(layer) for layer in self.layers]

    @property
    def total(self) -> int:
        return sum(self.sizes)


def reachable_states(net: NetworkDef, spec: ProblemSpec, cap: int = DEFAULT_LAYER_CAP) -> ReachableLayers:
    """Forward closure from ``X(0)`` over every attack action."""
    check_problem(net, spec)
    dyn = dynamics(net)
    n_actions = 1 << net.m
    layer = {spec.initial}
    layers = [tuple(sorted(layer))]
    for t in range(spec.horizon):
        u = spec.nominal[t]
        nxt = set()
        for x in layer:
            for a in range(n_actions):
                nxt.update(s for s, _ in dyn.distribution(x, u ^ a))
            if len(nxt) > cap:
                raise OracleCapError(f"layer {t + 1} exceeds {cap} states")
        layer = nxt
        layers.append(tuple(sorted(layer)))
    return ReachableLayers(tuple(layers))


@dataclass
class ExactQ:
    """Optimal action values on the reachable non-terminal MDP states."""

    spec: ProblemSpec
    layers: ReachableLayers
    q: dict[tuple[int, int], list[float]]
    v: dict[tuple[int, int], float]
    policy: dict[tuple[int, int], int]
    net: NetworkDef

    def row(self, x: int, t: int):
        return self.q.get((x, t))

    @property
    def value(self) -> float:
        """``v*(X(0), 0)``."""
        return self.v[(self.spec.initial, 0)]

    def bellman_residual(self) -> float:
        """Largest gap between stored q* and an independent fsum re-evaluation."""
        dyn = dynamics(self.net)
        spec = self.spec
        worst = 0.0
        for (x, t), row in self.q.items():
            u = spec.nominal[t]
            for a, qa in enumerate(row):
                terms = []
                for x2, p in dyn.distribution(x, u ^ a):
                    nxt = 0.0 if t + 1 == spec.horizon else max(self.q[(x2, t + 1)])
                    terms.append(p * (reward(spec, t, a, x2) + spec.gamma * nxt))
                worst = max(worst, abs(math.fsum(terms) - qa))
        return worst

    def realization(self) -> list[int]:
        """Optimal actions along the most likely path under the optimal policy."""
        dyn = dynamics(self.net)
        x, seq = self.spec.initial, []
        for t in range(self.spec.horizon):
            a = self.policy[(x, t)]
            seq.append(a)
            dist = dyn.distribution(x, self.spec.nominal[t] ^ a)
            x = max(dist, key=lambda sp: (sp[1], -sp[0]))[0]
        return seq


def exact_q(net: NetworkDef, spec: ProblemSpec, cap: int = DEFAULT_LAYER_CAP) -> ExactQ:
    """Backward induction from ``t = T`` (value 0) to ``t = 0``."""
    layers = reachable_states(net, spec, cap)
    dyn = dynamics(net)
    n_actions = 1 << net.m
    T, gamma = spec.horizon, spec.gamma
    q: dict[tuple[int, int], list[float]] = {}
    v: dict[tuple[int, int], float] = {(x, T): 0.0 for x in layers.layers[T]}
    policy: dict[tuple[int, int], int] = {}
    for t in range(T - 1, -1, -1):
        u = spec.nominal[t]
        for x in layers.layers[t]:
            row = []
            for a in range(n_actions):
                total = 0.0
                for x2, p in dyn.distribution(x, u ^ a):
                    total += p * (reward(spec, t, a, x2) + gamma * v[(x2, t + 1)])
                row.append(total)
            best = greedy_action(row)
            q[(x, t)] = row
            v[(x, t)] = row[best]
            policy[(x, t)] = best
    return ExactQ(spec, layers, q, v, policy, net)


def _propagate(net: NetworkDef, spec: ProblemSpec, choose: Callable[[int, int], int]) -> tuple[float, float]:
    """Push the state distribution through ``T`` steps under ``choose(x, t)``."""
    dyn = dynamics(net)
    dist = {spec.initial: 1.0}
    expected, disc = 0.0, 1.0
    for t in range(spec.horizon):
        u = spec.nominal[t]
        nxt: dict[int, float] = {}
        step_reward = 0.0
        for x, p in dist.items():
            a = choose(x, t)
            for x2, q in dyn.distribution(x, u ^ a):
                pq = p * q
                nxt[x2] = nxt.get(x2, 0.0) + pq
                step_reward += pq * reward(spec, t, a, x2)
        expected += disc * step_reward
        disc *= spec.gamma
        dist = nxt
    return expected, dist.get(spec.target, 0.0)


def evaluate_open_loop_exact(net: NetworkDef, spec: ProblemSpec, seq: Sequence[int]) -> tuple[float, float]:
    """``(expected return, Pr{X(T) = X_d})`` of a fixed attack sequence."""
    if len(seq) != spec.horizon:
        raise ValueError(f"sequence has {len(seq)} actions, horizon is {spec.horizon}")
    check_problem(net, spec)
    seq = tuple(seq)
    return _propagate(net, spec, lambda x, t: seq[t])


def evaluate_greedy_exact(net: NetworkDef, spec: ProblemSpec, q) -> tuple[float, float]:
    """Exact value of acting greedily on ``q`` (no-attack where ``q`` has no row)."""
    check_problem(net, spec)

    def choose(x: int, t: int) -> int:
        row = q.row(x, t)
        return 0 if row is None else greedy_action(row)

    return _propagate(net, spec, choose)


def evaluate_policy_exact(net: NetworkDef, spec: ProblemSpec, policy) -> tuple[float, float]:
    """Exact value of a :class:`~pbcn_attack.qlearn.FinalPolicy`."""
    check_problem(net, spec)
    return _propagate(net, spec, policy.action)


def enumerate_open_loop(net: NetworkDef, spec: ProblemSpec, limit: int = ENUMERATION_LIMIT):
    """All ``2^(m T)`` open-loop sequences with their exact return and success probability."""
    if net.m * spec.horizon > limit:
        raise OracleCapError(f"m*T = {net.m * spec.horizon} exceeds the enumeration limit {limit}")
    rows = []
    for seq in itertools.product(range(1 << net.m), repeat=spec.horizon):
        ret, succ = evaluate_open_loop_exact(net, spec, seq)
        rows.append((seq, ret, succ))
    return rows
