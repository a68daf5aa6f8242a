"""Randomized check of the support lemmas behind permutation identifiability.

A random invertible L applied to vectors supported on a pattern S can only keep
the support as sparse as S if L is a permutation times a diagonal scaling. We
run the oracle on a pattern that meets the lemma's precondition, then on a
pattern with duplicated columns (precondition off) to show what a
counterexample looks like.

    python demos/02_support_lemmas.py
"""

import numpy as np

from mechdis import synthdata as sd
from mechdis import theory as th
from mechdis.diffengine import Rng

S = sd.adjacency("nt-t", 4, 4)[1]
res = th.verify_lemma_temporal(4, S, trials=300, rng=Rng(0))
print("NT-T pattern, dim 4:")
print(S)
print(f"ok={res.ok} trials={res.trials} sparse L draws={res.hits}")

cyclic = sd.adjacency("nt-a", 3, 3)[0]
res = th.verify_lemma_action(3, 3, cyclic, trials=300, rng=Rng(1))
print("\ncyclic action pattern, dim 3: ok =", res.ok, "trials =", res.trials)

dup = np.array([[1, 1, 0], [1, 1, 0], [0, 0, 1]])
try:
    th.verify_lemma_action(3, 3, dup, trials=10, rng=Rng(2))
except th.PreconditionError as exc:
    print("\nduplicated-column pattern rejected up front:", exc)
res = th.verify_lemma_action(3, 3, dup, trials=300, rng=Rng(2), check_precondition=False)
print("with the precondition check off: ok =", res.ok)
if res.counterexample is not None:
    print("counterexample L (not a scaled permutation):")
    print(np.round(np.asarray(res.counterexample["L"]), 3))
