"""Counter-based random substreams.

Every unit of parallel work (a block of pulses, a CW time slab, a point on a
rate grid) draws from its own Philox stream keyed by the master seed and the
unit's coordinates.  Results therefore do not depend on how many workers run
or in which order units are processed.
"""

from __future__ import annotations

import numpy as np


def substream(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for the unit identified by ``key`` under ``seed``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))
