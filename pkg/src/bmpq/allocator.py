"""Budgeted bit-width assignment as a multiple-choice knapsack.

Each decision group (a flexible layer plus anything tied to it) picks one
width ``q`` from the ascending support set.  The objective maximizes
``sum(g * q)`` over groups subject to ``sum(p * q) <= C`` bits.  Choosing
index ``omega`` into the sorted support is the same as choosing ``q``
because the index-to-width map is monotone.

Objectives are compared exactly: sensitivities are floats, hence dyadic
rationals, so they are rescaled to a common power-of-two denominator and
summed as Python integers.  That makes "equal objective" well defined for
the tie-break (larger objective, then smaller cost, then the lower width at
the highest group index).
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, List, Optional, Sequence, Tuple

from .errors import ContractError, InfeasibleError
from .models import FIXED_BITS, ModelSpec


def psi(omega: int, support: Sequence[int]) -> int:
    """Width selected by choice index ``omega``."""
    if not 0 <= omega < len(support):
        raise ContractError(f"choice index {omega} outside support of size {len(support)}")
    return int(sorted(support)[omega])


def phi(q: int, p: int) -> int:
    """Memory cost in bits of ``p`` weights stored at ``q`` bits."""
    return int(p) * int(q)


@dataclass
class LayerGroup:
    id: str
    members: List[str]
    sensitivity: float
    params: int


@dataclass
class ILPInstance:
    groups: List[LayerGroup]
    support: List[int]
    budget: int

    def __post_init__(self):
        self.support = sorted(int(q) for q in self.support)
        if not self.support or len(set(self.support)) != len(self.support):
            raise ContractError(f"support must be non-empty and distinct, got {self.support}")
        for g in self.groups:
            if not math.isfinite(g.sensitivity) or g.sensitivity < 0:
                raise ContractError(f"group {g.id} has invalid sensitivity {g.sensitivity}")
            if g.params < 0:
                raise ContractError(f"group {g.id} has negative parameter count")

    @property
    def min_cost(self) -> int:
        return sum(phi(self.support[0], g.params) for g in self.groups)

    @property
    def max_cost(self) -> int:
        return sum(phi(self.support[-1], g.params) for g in self.groups)

    @property
    def feasible(self) -> bool:
        return self.min_cost <= self.budget

    def to_dict(self) -> dict:
        layers = []
        for g in self.groups:
            layers.append({"id": g.id, "members": list(g.members),
                           "sensitivity": g.sensitivity, "params": g.params})
        return {"support": list(self.support), "budget_bits": int(self.budget), "groups": layers}

    @classmethod
    def from_dict(cls, d: dict) -> "ILPInstance":
        """Accept either pre-pooled ``groups`` or per-layer ``layers``.

        Per-layer entries may name a ``tie`` leader; tied layers join the
        leader's group, pooling parameters and summing sensitivities.
        """
        support = d["support"]
        budget = int(d["budget_bits"])
        if "groups" in d:
            groups = [LayerGroup(g["id"], list(g.get("members", [g["id"]])),
                                 float(g["sensitivity"]), int(g["params"])) for g in d["groups"]]
            return cls(groups, support, budget)
        by_id: Dict[str, LayerGroup] = {}
        order: List[str] = []
        entries = d["layers"]
        for e in entries:
            if e.get("tie") is None:
                by_id[e["id"]] = LayerGroup(e["id"], [e["id"]], float(e["sensitivity"]),
                                            int(e["params"]))
                order.append(e["id"])
        for e in entries:
            lead = e.get("tie")
            if lead is None:
                continue
            if lead not in by_id:
                raise ContractError(f"layer {e['id']} ties to unknown leader {lead}")
            grp = by_id[lead]
            grp.members.append(e["id"])
            grp.params += int(e["params"])
            grp.sensitivity += float(e.get("sensitivity", 0.0))
        return cls([by_id[k] for k in order], support, budget)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_json(cls, text: str) -> "ILPInstance":
        return cls.from_dict(json.loads(text))


@dataclass
class BitAssignment:
    """Layer name -> bit width, with the solver's objective and cost."""

    bits: Dict[str, int]
    fixed: List[str] = field(default_factory=list)
    interval: int = 0
    objective: Optional[float] = None
    cost: Optional[int] = None
    choices: Optional[Tuple[int, ...]] = None

    def to_dict(self) -> dict:
        return {"bits": dict(self.bits), "fixed": list(self.fixed), "interval": self.interval,
                "objective": self.objective, "cost": self.cost}


# ---------------------------------------------------------------- solvers


def _exact_coefficients(values: Sequence[float]) -> Tuple[List[int], int]:
    fracs = [Fraction(v) for v in values]
    den = max((f.denominator for f in fracs), default=1)
    return [int(f * den) for f in fracs], den


def _result(instance: ILPInstance, choices: Tuple[int, ...], value: int, den: int,
            cost: int) -> BitAssignment:
    bits = {}
    for g, j in zip(instance.groups, choices):
        for member in g.members:
            bits[member] = instance.support[j]
    return BitAssignment(bits, objective=float(Fraction(value, den)), cost=cost, choices=choices)


def _require_feasible(instance: ILPInstance) -> None:
    if not instance.feasible:
        raise InfeasibleError(
            f"budget {instance.budget} bits is below the minimum achievable cost "
            f"{instance.min_cost} bits", instance.min_cost)


def solve_exact(instance: ILPInstance) -> BitAssignment:
    """Exact optimum by dynamic programming over integer bit costs.

    The table is kept sparse: after each group only Pareto-optimal
    ``(cost, objective)`` states survive, and states that cannot be
    completed within budget are dropped.
    """
    _require_feasible(instance)
    support = instance.support
    coeffs, den = _exact_coefficients([g.sensitivity for g in instance.groups])
    params = [g.params for g in instance.groups]
    # cheapest completion cost from group i onward
    rest = [0] * (len(params) + 1)
    for i in range(len(params) - 1, -1, -1):
        rest[i] = rest[i + 1] + params[i] * support[0]

    states = [(0, 0, ())]  # (cost, value, choices)
    for i, (p, c) in enumerate(zip(params, coeffs)):
        limit = instance.budget - rest[i + 1]
        grown = []
        for cost, value, ch in states:
            for j, q in enumerate(support):
                nc = cost + p * q
                if nc <= limit:
                    grown.append((nc, value + c * q, ch + (j,)))
        grown.sort(key=lambda s: (s[0], -s[1], s[2][::-1]))
        states, best = [], None
        for s in grown:
            if best is None or s[1] > best:
                states.append(s)
                best = s[1]
    cost, value, choices = max(states, key=lambda s: (s[1], -s[0], tuple(-j for j in s[2][::-1])))
    return _result(instance, choices, value, den, cost)


def solve_bruteforce(instance: ILPInstance, limit: int = 10 ** 6) -> BitAssignment:
    """Exhaustive search with the same exact objective and tie-break."""
    _require_feasible(instance)
    n, k = len(instance.groups), len(instance.support)
    if k ** n > limit:
        raise ContractError(f"{k}^{n} assignments exceed the brute-force limit {limit}")
    coeffs, den = _exact_coefficients([g.sensitivity for g in instance.groups])
    params = [g.params for g in instance.groups]
    support = instance.support
    best_key, best = None, None
    for choices in itertools.product(range(k), repeat=n):
        cost = sum(p * support[j] for p, j in zip(params, choices))
        if cost > instance.budget:
            continue
        value = sum(c * support[j] for c, j in zip(coeffs, choices))
        key = (-value, cost, choices[::-1])
        if best_key is None or key < best_key:
            best_key, best = key, (choices, value, cost)
    choices, value, cost = best
    return _result(instance, choices, value, den, cost)


# ---------------------------------------------------------------- model glue


def build_instance(ledger, spec: ModelSpec, budget: int, support: Sequence[int]) -> ILPInstance:
    """Assemble the ILP from current ENBG values.

    Fixed layers are excluded from both the variables and the budget.  Tied
    layers pool their parameters into the leader's group and add their ENBG
    to the group coefficient, since they share one width.
    """
    if ledger.epochs_in_interval == 0:
        raise ContractError("sensitivity ledger has no finalized epochs in this interval")
    groups: Dict[str, LayerGroup] = {}
    for layer in spec.layers:
        if spec.is_fixed(layer.name):
            continue
        lead = spec.leader(layer.name)
        g = groups.setdefault(lead, LayerGroup(lead, [], 0.0, 0))
        g.members.append(layer.name)
        g.params += layer.param_count
        g.sensitivity += ledger.enbg(layer.name)
    ordered = [groups[l.name] for l in spec.layers if l.name in groups]
    return ILPInstance(ordered, list(support), int(budget))


def warmup_assignment(spec: ModelSpec, support: Sequence[int]) -> BitAssignment:
    """Every flexible layer at the widest support width, fixed layers at 16."""
    top = max(support)
    bits = {l.name: (FIXED_BITS if spec.is_fixed(l.name) else top) for l in spec.layers}
    fixed = [l.name for l in spec.layers if spec.is_fixed(l.name)]
    return BitAssignment(bits, fixed=fixed)


def merge_assignment(spec: ModelSpec, solved: BitAssignment, interval: int) -> BitAssignment:
    """Combine a solver result over flexible groups with the fixed layers."""
    bits = {}
    for l in spec.layers:
        bits[l.name] = FIXED_BITS if spec.is_fixed(l.name) else solved.bits[l.name]
    return BitAssignment(bits, fixed=[l.name for l in spec.layers if spec.is_fixed(l.name)],
                         interval=interval, objective=solved.objective, cost=solved.cost)


def apply_assignment(model, assignment: BitAssignment) -> None:
    """Retarget each layer's quantizer; shadow weights are not touched."""
    for name in assignment.fixed:
        if assignment.bits[name] != FIXED_BITS:
            raise ContractError(f"fixed layer {name} cannot change width")
    model.set_bits(assignment.bits)


def flexible_cost(spec: ModelSpec, bits: Dict[str, int]) -> int:
    return sum(phi(bits[l.name], l.param_count) for l in spec.layers if not spec.is_fixed(l.name))
