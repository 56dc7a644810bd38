"""Deterministic random streams.

Every Monte Carlo trial gets its own pair of counter-based Philox streams
derived from ``(seed, trial)``: the root seed fixes the two Philox keys
(one for model noise, one for the controller) and the trial index selects
a disjoint block of the 256-bit counter space.  Two strategies run on the
same model with the same seed therefore see identical disturbances
(common random numbers), and a trial's randomness is independent of how
many other trials run or in which order.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np

__all__ = ["trial_streams", "TrialStreams", "generator"]


@lru_cache(maxsize=64)
def _keys(seed: int) -> tuple[tuple[int, int], tuple[int, int]]:
    words = np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF).generate_state(4, np.uint64)
    return (int(words[0]), int(words[1])), (int(words[2]), int(words[3]))


def _counter(trial: int) -> np.ndarray:
    return np.array([0, 0, int(trial) & 0xFFFFFFFFFFFFFFFF, 0], dtype=np.uint64)


def trial_streams(seed: int, trial: int = 0) -> tuple[np.random.Generator, np.random.Generator]:
    """Return fresh ``(model_rng, controller_rng)`` generators for one trial."""
    mk, ck = _keys(seed)
    return (np.random.Generator(np.random.Philox(key=np.array(mk, np.uint64), counter=_counter(trial))),
            np.random.Generator(np.random.Philox(key=np.array(ck, np.uint64), counter=_counter(trial))))


class TrialStreams:
    """Reusable generators that are repositioned per trial.

    Equivalent to :func:`trial_streams` but avoids constructing new bit
    generators, which dominates the cost of short trials.
    """

    def __init__(self, seed: int):
        mk, ck = _keys(seed)
        self._bg = (np.random.Philox(key=np.array(mk, np.uint64)),
                    np.random.Philox(key=np.array(ck, np.uint64)))
        self.model = np.random.Generator(self._bg[0])
        self.controller = np.random.Generator(self._bg[1])

    def seek(self, trial: int, controller: bool = True) -> "TrialStreams":
        """Position both streams (or only the model stream) at ``trial``."""
        for bg in self._bg if controller else self._bg[:1]:
            s = bg.state
            s["state"]["counter"] = _counter(trial)
            s["buffer_pos"] = 4
            s["has_uint32"] = 0
            s["uinteger"] = 0
            bg.state = s
        return self


def generator(seed: int, *key: int) -> np.random.Generator:
    """Single generator keyed by ``(seed, *key)``, for samplers that are not
    trial-structured (falsifiers, random instance builders)."""
    ss = np.random.SeedSequence(entropy=int(seed) & 0xFFFFFFFFFFFFFFFF,
                                spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))
