"""Bit allocation on a toy three-layer problem, by hand and by solver.

Run: python3 demos/allocation_walkthrough.py
"""

import itertools

import numpy as np

from bmpq.allocator import ILPInstance, LayerGroup, solve_bruteforce, solve_exact
from bmpq.sensitivity import bit_gradients, nbg, nbg_closed_form

rng = np.random.default_rng(0)

# gradients of three layers; the first is the most sensitive
grads = [rng.normal(0, s, size=n) for s, n in [(0.09, 100), (0.05, 100), (0.01, 100)]]
scale = 0.02

# bit gradients for one weight at 4 bits: sign bit first, then powers of two
print(bit_gradients(grads[0][:1], scale, 4))

# NBG per layer, via the explicit bit gradients and via the closed form
sens = [nbg(bit_gradients(g, scale, 4)) for g in grads]
print("nbg", np.round(sens, 5))
print("closed", np.round([nbg_closed_form(g, scale, 4) for g in grads], 5))

# 1000 bits for 300 weights: at most two layers can stay at 4 bits
groups = [LayerGroup(f"l{i}", [f"l{i}"], s, 100) for i, s in enumerate(sens)]
inst = ILPInstance(groups, [2, 4], 1000)
res = solve_exact(inst)
print("exact", res.bits, "cost", res.cost, "objective", round(res.objective, 5))
print("brute", solve_bruteforce(inst).bits)

# the whole search space, for comparison
for qs in itertools.product([2, 4], repeat=3):
    cost = sum(100 * q for q in qs)
    value = sum(s * q for s, q in zip(sens, qs))
    print(qs, cost, "ok" if cost <= 1000 else "over", round(value, 5))
