"""The CBRL backup on a small random MDP.

Restricting the greedy step to a finite set of policies still gives a
gamma-contraction. When the set contains an optimal policy its fixed point
recovers the optimal values, and growing the set never hurts.

Run with ``python demos/02_tabular_operator.py``.
"""

import numpy as np

from cbrl.tabular import (
    PolicySet, all_deterministic_policies, bellman_optimal, cbrl_fixed_point,
    greedy_policy, random_mdp, refinement_experiment,
)

rng = np.random.default_rng(0)
mdp = random_mdp(6, 2, 0.9, rng)
v_star = bellman_optimal(mdp).max(axis=1)

# one random policy, with and without the optimal one
random_set = PolicySet(rng.integers(0, 2, size=(1, 6)))
with_opt = random_set.extended(greedy_policy(bellman_optimal(mdp))[None])
for name, F in [("random policy", random_set), ("plus optimal", with_opt)]:
    res = cbrl_fixed_point(mdp, F, tol=1e-10)
    gap = np.max(np.abs(res.q.max(axis=1) - v_star))
    print(f"{name:16s} |V - V*| = {gap:.2e} after {res.iterations} sweeps")

# nested sets growing to every deterministic policy
full = all_deterministic_policies(6, 2)
order = rng.permutation(len(full))
chain = [PolicySet(full[order[:k]]) for k in (1, 4, 16, len(full))]
print("refinement gaps:", np.round(refinement_experiment(mdp, chain), 6))
