"""
Scalar reverse-mode differentiation.

A ``Tape`` records scalar nodes in creation order; operands always precede
the node using them, so a single reverse sweep yields exact partials. The
``stop_gradient`` node passes its value forward and nothing backward.
"""

import math
from types import MappingProxyType
from typing import Callable, Dict, Hashable, Iterable, List, Mapping, Optional, Sequence

from pipalab.core.exceptions import DomainException, InvalidInputException, NumericalException

GradMap = Mapping[Hashable, float]

_CONST = "const"
_PARAM = "param"


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def _log_sigmoid(x: float) -> float:
    # -softplus(-x)
    return -(max(-x, 0.0) + math.log1p(math.exp(-abs(x))))


class Tape:
    """
    Append-only scalar computation graph.

    Nodes are integer indices. Parameters are leaves keyed by an external
    identifier; registering the same key twice returns the same node.
    ``overrides`` replaces the value of listed parameter keys, and
    ``pinned_stops`` replaces the forward value of the k-th stop-gradient node;
    both exist for finite-difference checking.
    """

    def __init__(self, overrides: Optional[Mapping[Hashable, float]] = None,
                 pinned_stops: Optional[Sequence[float]] = None):
        self.kinds: List[str] = []
        self.operands: List[tuple] = []
        self.values: List[float] = []
        self.aux: List[object] = []
        self.params: Dict[Hashable, int] = {}
        self.stop_values: List[float] = []
        self._overrides = dict(overrides or {})
        self._pinned = list(pinned_stops) if pinned_stops is not None else None

    def __len__(self) -> int:
        return len(self.values)

    def _push(self, kind: str, operands: tuple, value: float, aux: object = None) -> int:
        index = len(self.values)
        if not math.isfinite(value):
            raise NumericalException(f"{kind} produced non-finite value {value!r} at node {index}",
                                     node=index, op=kind, value=value)
        self.kinds.append(kind)
        self.operands.append(operands)
        self.values.append(value)
        self.aux.append(aux)
        return index

    def value(self, node: int) -> float:
        return self.values[node]

    # Leaves

    def constant(self, value: float) -> int:
        return self._push(_CONST, (), float(value))

    def parameter(self, key: Hashable, value: float = 0.0) -> int:
        """Register (or fetch) the leaf for ``key``."""
        if key in self.params:
            return self.params[key]
        value = float(self._overrides.get(key, value))
        node = self._push(_PARAM, (), value, key)
        self.params[key] = node
        return node

    # Primitives

    def add(self, a: int, b: int) -> int:
        return self._push("add", (a, b), self.values[a] + self.values[b])

    def sub(self, a: int, b: int) -> int:
        return self._push("sub", (a, b), self.values[a] - self.values[b])

    def mul(self, a: int, b: int) -> int:
        return self._push("mul", (a, b), self.values[a] * self.values[b])

    def div(self, a: int, b: int) -> int:
        denominator = self.values[b]
        if denominator == 0.0:
            raise DomainException("div", len(self.values), denominator)
        return self._push("div", (a, b), self.values[a] / denominator)

    def neg(self, a: int) -> int:
        return self._push("neg", (a,), -self.values[a])

    def exp(self, a: int) -> int:
        try:
            value = math.exp(self.values[a])
        except OverflowError:
            raise NumericalException(f"exp overflow at node {len(self.values)}", node=len(self.values),
                                     op="exp", value=self.values[a])
        return self._push("exp", (a,), value)

    def log(self, a: int) -> int:
        x = self.values[a]
        if x <= 0.0:
            raise DomainException("log", len(self.values), x)
        return self._push("log", (a,), math.log(x))

    def sigmoid(self, a: int) -> int:
        return self._push("sigmoid", (a,), _sigmoid(self.values[a]))

    def log_sigmoid(self, a: int) -> int:
        return self._push("log_sigmoid", (a,), _log_sigmoid(self.values[a]))

    def tau(self, a: int) -> int:
        """x / (x + 1)."""
        x = self.values[a]
        if x + 1.0 == 0.0:
            raise DomainException("tau", len(self.values), x)
        return self._push("tau", (a,), x / (x + 1.0))

    def clip(self, a: int, lo: float, hi: float) -> int:
        x = self.values[a]
        return self._push("clip", (a,), min(max(x, lo), hi), (lo, hi))

    def sum(self, nodes: Sequence[int]) -> int:
        nodes = tuple(nodes)
        total = 0.0
        for n in nodes:
            total += self.values[n]
        return self._push("sum", nodes, total)

    def logsumexp(self, nodes: Sequence[int]) -> int:
        nodes = tuple(nodes)
        if not nodes:
            raise InvalidInputException("logsumexp of an empty set", field="nodes")
        shift = max(self.values[n] for n in nodes)
        total = 0.0
        for n in nodes:
            total += math.exp(self.values[n] - shift)
        return self._push("logsumexp", nodes, shift + math.log(total))

    def stop_gradient(self, a: int) -> int:
        value = self.values[a]
        if self._pinned is not None:
            k = len(self.stop_values)
            if k >= len(self._pinned):
                raise InvalidInputException("more stop-gradient nodes than pinned values", field="pinned_stops")
            value = self._pinned[k]
        self.stop_values.append(value)
        return self._push("stop", (a,), value)


def stop_gradient(tape: Tape, node: int) -> int:
    """Forward identity whose backward contribution is zero."""
    return tape.stop_gradient(node)


def backward(tape: Tape, root: int) -> GradMap:
    """
    Exact reverse-mode partials of ``root`` with respect to every parameter.

    Returns a read-only map with an entry (possibly 0.0) for each registered
    parameter key.
    """
    if not 0 <= root < len(tape):
        raise InvalidInputException("root is not a node of this tape", field="root", value=root)
    values = tape.values
    adj = [0.0] * (root + 1)
    adj[root] = 1.0
    for i in range(root, -1, -1):
        a = adj[i]
        if a == 0.0:
            continue
        if not math.isfinite(a):
            raise NumericalException(f"non-finite adjoint at node {i} ({tape.kinds[i]})",
                                     node=i, op=tape.kinds[i], value=a)
        kind = tape.kinds[i]
        ops = tape.operands[i]
        if kind in (_CONST, _PARAM, "stop"):
            continue
        if kind == "add":
            adj[ops[0]] += a
            adj[ops[1]] += a
        elif kind == "sub":
            adj[ops[0]] += a
            adj[ops[1]] -= a
        elif kind == "mul":
            adj[ops[0]] += a * values[ops[1]]
            adj[ops[1]] += a * values[ops[0]]
        elif kind == "div":
            y = values[ops[1]]
            adj[ops[0]] += a / y
            adj[ops[1]] -= a * values[ops[0]] / (y * y)
        elif kind == "neg":
            adj[ops[0]] -= a
        elif kind == "exp":
            adj[ops[0]] += a * values[i]
        elif kind == "log":
            adj[ops[0]] += a / values[ops[0]]
        elif kind == "sigmoid":
            s = values[i]
            adj[ops[0]] += a * s * (1.0 - s)
        elif kind == "log_sigmoid":
            adj[ops[0]] += a * _sigmoid(-values[ops[0]])
        elif kind == "tau":
            d = values[ops[0]] + 1.0
            adj[ops[0]] += a / (d * d)
        elif kind == "clip":
            lo, hi = tape.aux[i]
            x = values[ops[0]]
            if lo <= x <= hi:
                adj[ops[0]] += a
        elif kind == "sum":
            for n in ops:
                adj[n] += a
        elif kind == "logsumexp":
            out = values[i]
            for n in ops:
                adj[n] += a * math.exp(values[n] - out)
        else:
            raise InvalidInputException(f"unknown node kind {kind}", field="kind", value=kind)

    grads = {key: (adj[node] if node <= root else 0.0) for key, node in tape.params.items()}
    for key, g in grads.items():
        if not math.isfinite(g):
            raise NumericalException(f"non-finite gradient for parameter {key!r}", node=tape.params[key], value=g)
    return MappingProxyType(grads)


def accumulate(maps: Iterable[GradMap], weights: Optional[Iterable[float]] = None) -> Dict[Hashable, float]:
    """Weighted sum of gradient maps; keys missing from a map count as zero."""
    total: Dict[Hashable, float] = {}
    maps = list(maps)
    weights = list(weights) if weights is not None else [1.0] * len(maps)
    for grad, w in zip(maps, weights):
        for key, g in grad.items():
            total[key] = total.get(key, 0.0) + w * g
    return total


def check_gradient(f: Callable[[Tape], int], params: Mapping[Hashable, float], eps: float = 1e-5,
                   freeze_stopped: bool = True) -> float:
    """
    Compare backward() against central finite differences.

    ``f`` builds a scalar on the tape it is given; its parameter leaves take
    their values from ``params``. With ``freeze_stopped`` the perturbed tapes
    hold every stop-gradient node at the value recorded on the base tape.

    Returns:
        max over parameters of |analytic - numeric| / max(1, |numeric|)
    """
    if not 0.0 < eps <= 1e-2:
        raise InvalidInputException("eps must lie in (0, 1e-2]", field="eps", value=eps)
    base = Tape(overrides=params)
    root = f(base)
    grads = backward(base, root)
    pinned = base.stop_values if freeze_stopped else None

    worst = 0.0
    for key, theta in params.items():
        probes = []
        for sign in (1.0, -1.0):
            shifted = dict(params)
            shifted[key] = theta + sign * eps
            tape = Tape(overrides=shifted, pinned_stops=pinned)
            value = tape.value(f(tape))
            if not math.isfinite(value):
                raise NumericalException(f"non-finite probe value for {key!r}", value=value)
            probes.append(value)
        numeric = (probes[0] - probes[1]) / (2.0 * eps)
        analytic = grads.get(key, 0.0)
        worst = max(worst, abs(analytic - numeric) / max(1.0, abs(numeric)))
    return worst
