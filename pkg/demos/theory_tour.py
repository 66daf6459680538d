"""Aggregation error of a causal neighbourhood under shift, closed form
against Monte Carlo.

    python demos/theory_tour.py
"""
from dataclasses import replace

from coms2t.theory import (CausalNeighborhoodSpec, amplification_ratio, epsilon0, expected_aggregation,
                           mc_amplification, mc_expected_aggregation, optimal_ws)

s = CausalNeighborhoodSpec(d=4, p=0.3, mu_t=0.5, mu_c=1.5, mu_s=-1.0, w_c=0.8, w_s=0.3)
mean, se = mc_expected_aggregation(s, 200_000, seed=0)
print(f"E[aggregate]  closed {expected_aggregation(s):.5f}  MC {mean:.5f} +- {se:.5f}")

for p in (0.1, 0.5, 0.9):
    print(f"spurious error at p={p}: {epsilon0(replace(s, p=p, mu_s=1.5, w_s=0.7)):.4f}")

s = replace(s, mu_next=2.0)
print(f"optimal w_s {optimal_ws(s):.4f}")

base = CausalNeighborhoodSpec(d=4, p=0.5, mu0=10.0, w_c=1.0)
for q in (1, 2, 3):
    mc = mc_amplification(base, q=q, n_samples=100_000, seed=q)["ratio"]
    print(f"q={q}: exact ratio {amplification_ratio(replace(base, q=q))}  MC {mc:.3f}")
