"""Keyed random streams.

Every random draw in a simulation comes from a generator derived from the run
seed plus a structural key (group, delay index, repeat, ...), so any piece of
the experiment can be regenerated on its own and results do not depend on
execution order or worker count.
"""
from __future__ import annotations

import numpy as np


def stream(seed: int, *key: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))
