"""
Where does the noise go?
========================

Aggregator-level privacy budgets for every noise placement, first as a
closed-form table and then from the round-by-round accountant.
"""

import math

from hflsim.dpcore import accountant_epsilon, classic_gm_epsilon, config_budget

# A single Gaussian mechanism at noise multiplier 1 and delta 1e-5.
eps = classic_gm_epsilon(1.0, 1e-5)
print(f"per-site epsilon at z=1: {eps:.5f}")

# 100 online clients spread over 10 zones, 10 per zone.
s, m = 10, 10
print("\nplacement  aggregator epsilon")
print(f"C1 (clients)   {config_budget('C1', eps, k=s * m):.4f}")
print(f"C2 (zones)     {config_budget('C2', eps, s=s):.4f}")
print(f"C4 (central)   {config_budget('C4', eps):.4f}")
print(f"C7 mixed       {config_budget('C7', eps, s=s, m=m, alpha=0.3, beta=0.2):.4f}")

# Zone noise sits between the two extremes by exactly a square root of s.
print(f"\nCDP / HDP = {config_budget('C4', eps) / config_budget('C2', eps, s=s):.4f} (sqrt 10 = {math.sqrt(10):.4f})")

# With an anonymous shuffler in front of the aggregator the square roots disappear.
print(f"C2 shuffled    {config_budget('C2', eps, s=s, shuffling=True):.4f}")

# Over many rounds the RDP accountant composes subsampled releases far more
# tightly than summing per-round epsilons would.
for rounds in (1, 10, 100):
    print(f"q=0.2, z=1, T={rounds:3d}: accountant eps {accountant_epsilon(0.2, 1.0, rounds):.3f}")
