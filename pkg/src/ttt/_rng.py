"""Random stream conventions.

Every randomized routine receives an integer seed and derives its streams with
``numpy.random.SeedSequence``. The split rule is fixed:

* ``streams(seed)`` returns ``(noise, regime)``, children 0 and 1 of
  ``SeedSequence(seed)``. Gaussian increments always come from ``noise`` and
  regime draws from ``regime``, so a one-regime switching simulation consumes
  exactly the same normals as the plain bridge simulation.
* ``task_seeds(seed, n)`` returns ``n`` independent child seed sequences used
  for replications, restarts and experiment cells (child ``i`` for task ``i``).
"""

import numpy as np


def _as_seq(seed):
    # fresh copy: spawn() mutates its parent, reuse must stay reproducible
    if isinstance(seed, np.random.SeedSequence):
        return np.random.SeedSequence(seed.entropy, spawn_key=seed.spawn_key)
    return np.random.SeedSequence(seed)


def streams(seed):
    noise, regime = _as_seq(seed).spawn(2)
    return np.random.default_rng(noise), np.random.default_rng(regime)


def task_seeds(seed, n):
    # offset the spawn key so task streams never coincide with streams(seed)
    seq = _as_seq(seed)
    root = np.random.SeedSequence(seq.entropy, spawn_key=seq.spawn_key + (7,))
    return root.spawn(n)
