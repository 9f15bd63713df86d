"""Finite-horizon attack MDP over a PBCN.

The MDP state is ``(X(t), t)``. An attack action is a bit-vector over the
control inputs; a set bit inverts that input before it reaches the network.
"""
from __future__ import annotations

import enum
import random
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple, Sequence

import yaml

from .netlang import NetworkDef, load_network
from .pbcn import dynamics, pack_bits, unpack_bits

NO_ATTACK = 0


class ProblemKind(str, enum.Enum):
    P1 = "P1"  # reach the target w.p. 1
    P2 = "P2"  # ... attacking at as few time points as possible
    P3 = "P3"  # ... flipping as few control bits as possible


class MdpState(NamedTuple):
    x: int
    t: int


class StepOutcome(NamedTuple):
    next: MdpState
    reward: float
    done: bool


@dataclass(frozen=True)
class ProblemSpec:
    kind: ProblemKind
    horizon: int
    target: int
    initial: int
    nominal: tuple[int, ...]
    rprime: float = 0.0
    gamma: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "kind", ProblemKind(self.kind))
        object.__setattr__(self, "nominal", tuple(self.nominal))
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")
        if len(self.nominal) != self.horizon:
            raise ValueError(f"nominal control sequence has {len(self.nominal)} rows, horizon is {self.horizon}")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")

    def with_problem(self, kind, rprime: float | None = None) -> "ProblemSpec":
        return replace(self, kind=ProblemKind(kind), rprime=self.rprime if rprime is None else rprime)


class RprimeCheck(NamedTuple):
    ok: bool
    bound: float
    margin: float
    message: str


def apply_attack(u: int, a: int) -> int:
    """Controls after tampering: every attacked bit is inverted."""
    return u ^ a


def apply_attack_bits(u: Sequence[int], a: Sequence[int]) -> tuple[int, ...]:
    if len(u) != len(a):
        raise ValueError(f"control has {len(u)} bits but attack has {len(a)}")
    return tuple(int(x) ^ int(y) for x, y in zip(u, a))


def hamming_weight(a: int) -> int:
    return bin(a).count("1")


def reward(spec: ProblemSpec, t: int, a: int, x_next: int) -> float:
    """Reward of the transition from time ``t`` to ``t + 1``."""
    T = spec.horizon
    if not 0 <= t < T:
        raise ValueError(f"no transition leaves time {t} (horizon {T})")
    kind = spec.kind
    if kind is ProblemKind.P1:
        penalty = 0.0
    elif kind is ProblemKind.P2:
        penalty = 0.0 if a == NO_ATTACK else spec.rprime
    else:
        penalty = spec.rprime * hamming_weight(a)
    if t == T - 1 and x_next == spec.target:
        return 1.0 + penalty
    return penalty


def validate_rprime(kind, rprime: float, horizon: int, m: int) -> RprimeCheck:
    """Check the admissible range of the attack penalty.

    P2 needs ``-1/T < r' < 0`` and P3 needs ``-1/(m T) < r' < 0``; P1 ignores r'.
    Inside the range every sure-success sequence outscores every sequence that
    never reaches the target. A sequence that reaches it with probability
    ``0 < p < 1`` can still score above ``1 + T r'`` on a stochastic network.
    """
    kind = ProblemKind(kind)
    if kind is ProblemKind.P1:
        return RprimeCheck(True, float("-inf"), float("inf"), "P1 has no attack penalty")
    if horizon < 1 or m < 1:
        raise ValueError("horizon and input count must be positive")
    if kind is ProblemKind.P2:
        bound, expr = -1.0 / horizon, f"-1/T = -1/{horizon}"
    else:
        bound, expr = -1.0 / (m * horizon), f"-1/(m*T) = -1/{m * horizon}"
    margin = rprime - bound
    if rprime >= 0.0:
        return RprimeCheck(False, bound, margin, f"r' = {rprime} must be negative for {kind.value}")
    if margin <= 0.0:
        return RprimeCheck(False, bound, margin,
                           f"r' = {rprime} violates r' > {expr} = {bound:.6g} (margin {margin:.6g})")
    return RprimeCheck(True, bound, margin, f"r' = {rprime} > {expr} = {bound:.6g} (margin {margin:.6g})")


def check_problem(net: NetworkDef, spec: ProblemSpec) -> None:
    """Raise ValueError when ``spec`` does not fit ``net``."""
    if not 0 <= spec.initial < (1 << net.n) or not 0 <= spec.target < (1 << net.n):
        raise ValueError(f"initial/target states must have {net.n} bits")
    for t, u in enumerate(spec.nominal):
        if not 0 <= u < (1 << net.m):
            raise ValueError(f"nominal control at t={t} must have {net.m} bits")


def env_reset(spec: ProblemSpec) -> MdpState:
    return MdpState(spec.initial, 0)


def env_step(net: NetworkDef, spec: ProblemSpec, s: MdpState, a: int, rng) -> StepOutcome:
    x, t = s
    if t >= spec.horizon:
        raise ValueError(f"episode already ended at t={t}")
    if not 0 <= a < (1 << net.m):
        raise ValueError(f"attack code {a} does not fit {net.m} inputs")
    x_next = dynamics(net).sample(x, spec.nominal[t] ^ a, rng)
    return StepOutcome(MdpState(x_next, t + 1), reward(spec, t, a, x_next), t + 1 == spec.horizon)


class AttackEnv:
    """Episodic environment; callers only ever see :class:`StepOutcome`.

    ``rng`` is a ``random.Random``-like stream or an int seed.
    """

    def __init__(self, net: NetworkDef, spec: ProblemSpec, rng=None):
        check_problem(net, spec)
        self.net = net
        self.spec = spec
        self.n_actions = 1 << net.m
        self.horizon = spec.horizon
        self.rng = rng if hasattr(rng, "random") else random.Random(rng)
        self.state: MdpState | None = None
        self._dyn = dynamics(net)

    def reset(self) -> MdpState:
        self.state = env_reset(self.spec)
        return self.state

    def step(self, a: int) -> StepOutcome:
        if self.state is None:
            raise RuntimeError("call reset() before step()")
        x, t = self.state
        spec = self.spec
        if t >= spec.horizon:
            raise ValueError(f"episode already ended at t={t}")
        x_next = self._dyn.sample(x, spec.nominal[t] ^ a, self.rng)
        out = StepOutcome(MdpState(x_next, t + 1), reward(spec, t, a, x_next), t + 1 == spec.horizon)
        self.state = out.next
        return out


# --------------------------------------------------------------------------
# experiment spec files


@dataclass
class Experiment:
    """A problem spec together with the network it attacks."""

    net: NetworkDef
    spec: ProblemSpec
    network_path: Path | None = None
    name: str = ""
    extra: dict = field(default_factory=dict)


def _bits(value, width: int, what: str) -> int:
    if isinstance(value, int) and width == 1:  # YAML turns a lone "1" into an int
        value = [value]
    elif isinstance(value, int):
        raise ValueError(f"{what}: write bits space-separated, e.g. '0 1 1'")
    if isinstance(value, str):
        value = [c for c in value if c in "01"]
    bits = [int(b) for b in value]
    if len(bits) != width:
        raise ValueError(f"{what} has {len(bits)} bits, expected {width}")
    return pack_bits(bits)


def load_experiment(path) -> Experiment:
    """Read a YAML experiment file (network path resolved relative to it)."""
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        doc = yaml.safe_load(fh)
    if not isinstance(doc, dict):
        raise ValueError(f"{path}: expected a mapping at top level")
    try:
        net_path = (path.parent / doc["network"]).resolve()
        net = load_network(net_path)
        horizon = int(doc["horizon"])
        nominal = doc.get("nominal")
        if nominal is None:
            nominal = [[0] * net.m] * horizon
        spec = ProblemSpec(
            kind=ProblemKind(doc.get("problem", "P1")),
            horizon=horizon,
            target=_bits(doc["target"], net.n, "target"),
            initial=_bits(doc["initial"], net.n, "initial"),
            nominal=tuple(_bits(row, net.m, f"nominal row {i}") for i, row in enumerate(nominal)),
            rprime=float(doc.get("rprime", 0.0)),
            gamma=float(doc.get("gamma", 1.0)),
        )
    except KeyError as exc:
        raise ValueError(f"{path}: missing key {exc.args[0]!r}") from None
    known = {"network", "horizon", "nominal", "problem", "target", "initial", "rprime", "gamma", "name"}
    extra = {k: v for k, v in doc.items() if k not in known}
    return Experiment(net, spec, net_path, str(doc.get("name", path.stem)), extra)


def dump_experiment(exp: Experiment, network: str) -> str:
    net, spec = exp.net, exp.spec

    def row(code: int, width: int) -> str:
        return " ".join(str(b) for b in unpack_bits(code, width))

    doc = {
        "name": exp.name,
        "network": network,
        "problem": spec.kind.value,
        "horizon": spec.horizon,
        "initial": row(spec.initial, net.n),
        "target": row(spec.target, net.n),
        "rprime": spec.rprime,
        "gamma": spec.gamma,
        "nominal": [row(u, net.m) for u in spec.nominal],
    }
    doc.update(exp.extra)
    return yaml.safe_dump(doc, sort_keys=False)
