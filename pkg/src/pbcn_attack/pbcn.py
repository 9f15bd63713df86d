"""Stochastic dynamics of a PBCN on packed bit-vectors.

States and inputs are plain ints: bit ``i-1`` holds ``x_i`` (resp. ``u_i``).
"""
from __future__ import annotations

import math
from typing import Sequence

from .netlang import NetworkDef, compile_expr

TransitionDist = tuple[tuple[int, float], ...]

_CACHE_LIMIT = 1 << 21


def pack_bits(bits: Sequence[int]) -> int:
    """``(b1, ..., bn)`` -> int with ``b1`` in the least-significant bit."""
    code = 0
    for i, b in enumerate(bits):
        if b not in (0, 1, True, False):
            raise ValueError(f"bit {i + 1} is {b!r}, expected 0 or 1")
        code |= int(b) << i
    return code


def unpack_bits(code: int, width: int) -> tuple[int, ...]:
    return tuple((code >> i) & 1 for i in range(width))


def format_bits(code: int, width: int) -> str:
    """Tuple rendering used in logs and reports, e.g. ``(0, 1, 1)``."""
    return "(" + ", ".join(str(b) for b in unpack_bits(code, width)) + ")"


class Dynamics:
    """Compiled update rules of one network with a per-(state, input) cache.

    Each cache row holds the bits set by deterministic nodes plus, for every
    probabilistic node, its bit mask, cumulative alternative probabilities in
    file order and the value each alternative takes.
    """

    def __init__(self, net: NetworkDef):
        self.net = net
        self.n, self.m = net.n, net.m
        self._det = []
        self._prob = []
        for i, rule in enumerate(net.rules):
            fns = tuple(compile_expr(a.expr) for a in rule.alternatives)
            if rule.is_deterministic:
                self._det.append((1 << i, fns[0]))
            else:
                cum, acc = [], 0.0
                for a in rule.alternatives:
                    acc += a.prob
                    cum.append(acc)
                # absorb decimal rounding: the last live alternative closes [0, 1)
                last = max(j for j, a in enumerate(rule.alternatives) if a.prob > 0.0)
                cum[last:] = [1.0] * (len(cum) - last)
                probs = tuple(a.prob for a in rule.alternatives)
                self._prob.append((1 << i, tuple(cum), probs, fns))
        self._rows: dict[int, tuple] = {}
        self._dists: dict[int, TransitionDist] = {}

    def row(self, state: int, inputs: int) -> tuple:
        key = (state << self.m) | inputs
        row = self._rows.get(key)
        if row is None:
            base = 0
            for bit, fn in self._det:
                if fn(state, inputs):
                    base |= bit
            branches = tuple(
                (bit, cum, probs, tuple(fn(state, inputs) for fn in fns))
                for bit, cum, probs, fns in self._prob
            )
            row = (base, branches)
            if len(self._rows) >= _CACHE_LIMIT:
                self._rows.clear()
            self._rows[key] = row
        return row

    def sample(self, state: int, inputs: int, rng) -> int:
        base, branches = self.row(state, inputs)
        for bit, cum, _, values in branches:
            r = rng.random()
            j = 0
            while r >= cum[j]:
                j += 1
            if values[j]:
                base |= bit
        return base

    def distribution(self, state: int, inputs: int) -> TransitionDist:
        key = (state << self.m) | inputs
        dist = self._dists.get(key)
        if dist is not None:
            return dist
        base, branches = self.row(state, inputs)
        support = {base: 1.0}
        for bit, _, probs, values in branches:
            live = [v for p, v in zip(probs, values) if p > 0.0]
            if all(live) or not any(live):
                if live[0]:
                    support = {s | bit: p for s, p in support.items()}
                continue
            q = math.fsum(p for p, v in zip(probs, values) if v)
            q = q / math.fsum(probs)
            nxt = {}
            for s, p in support.items():
                nxt[s | bit] = p * q
                nxt[s] = p * (1.0 - q)
            support = nxt
        dist = tuple(sorted(support.items()))
        if len(self._dists) >= _CACHE_LIMIT:
            self._dists.clear()
        self._dists[key] = dist
        return dist


def dynamics(net: NetworkDef) -> Dynamics:
    """Compiled dynamics for ``net``, built once per NetworkDef instance."""
    dyn = net.__dict__.get("_dynamics")
    if dyn is None:
        dyn = Dynamics(net)
        net.__dict__["_dynamics"] = dyn  # frozen dataclass: bypass __setattr__
    return dyn


def _check_dims(net: NetworkDef, state: int, inputs: int) -> None:
    if not 0 <= state < (1 << net.n):
        raise ValueError(f"state code {state} does not fit {net.n} nodes")
    if not 0 <= inputs < (1 << net.m):
        raise ValueError(f"input code {inputs} does not fit {net.m} inputs")


def step_sample(net: NetworkDef, state: int, inputs: int, rng) -> int:
    """Sample ``X(t+1)``.

    Draws exactly one ``rng.random()`` per probabilistic node, in node order,
    and picks the alternative by inverting the cumulative probabilities.
    """
    _check_dims(net, state, inputs)
    return dynamics(net).sample(state, inputs, rng)


def transition_distribution(net: NetworkDef, state: int, inputs: int) -> TransitionDist:
    """Exact law of ``X(t+1)`` as sorted ``(state, prob)`` pairs with prob > 0."""
    _check_dims(net, state, inputs)
    return dynamics(net).distribution(state, inputs)


def is_equilibrium(net: NetworkDef, state: int, inputs: int) -> bool:
    dist = transition_distribution(net, state, inputs)
    return len(dist) == 1 and dist[0][0] == state
