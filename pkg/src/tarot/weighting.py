"""Integer repetition weights from transport dual potentials.

Selected samples are duplicated rather than loss-scaled: each sample i
receives an integer weight w_i >= 1 with sum(w) == R, where R is the
repetition budget.  Lower dual potential means a sample contributes more
to moving mass toward the target set, so it earns a larger share of the
budget.  Apportionment uses the largest-remainder method, which is the
only standard rounding scheme that satisfies the exact-sum and
monotonicity requirements at once.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, NumericalError

__all__ = ["WeightAssignment", "assign_weights", "default_repetition"]


@dataclass(frozen=True)
class WeightAssignment:
    """Positive integer weights over a selected subset.

    ``potentials`` keeps the raw dual values the weights were derived
    from, for diagnostics and serialization.
    """

    ids: tuple
    weights: tuple
    repetition: int
    potentials: tuple

    def __post_init__(self):
        if len(self.ids) != len(self.weights) or len(self.ids) != len(self.potentials):
            raise DataError(
                "ids, weights and potentials must have equal length, got "
                f"{len(self.ids)}/{len(self.weights)}/{len(self.potentials)}"
            )
        if not self.ids:
            raise DataError("weight assignment over an empty selection")
        total = 0
        for w in self.weights:
            if not isinstance(w, (int, np.integer)) or w < 1:
                raise DataError(f"weights must be integers >= 1, got {w!r}")
            total += int(w)
        if total != self.repetition:
            raise DataError(
                f"weights sum to {total}, expected repetition budget {self.repetition}"
            )

    @property
    def size(self) -> int:
        return len(self.ids)


def assign_weights(potentials, repetition: int, ids=None) -> WeightAssignment:
    """Apportion an integer budget across samples by dual potential.

    Every sample gets a mandatory weight of 1.  The remaining
    ``repetition - S`` units are split proportionally to the benefit
    score ``(max(potentials) - potential_i) + delta`` and rounded by
    largest remainder, remainder ties broken by ascending index.  The
    small ``delta`` (1e-9 of the potential range) keeps every benefit
    strictly positive so proportionality stays well defined.
    """
    pot = np.asarray(potentials, dtype=np.float64)
    if pot.ndim != 1 or pot.size == 0:
        raise DataError(f"potentials must be a non-empty 1-D vector, got shape {pot.shape}")
    if not np.all(np.isfinite(pot)):
        bad = int(np.flatnonzero(~np.isfinite(pot))[0])
        raise NumericalError(f"potential at index {bad} is not finite: {pot[bad]}")
    n = pot.size
    repetition = int(repetition)
    if repetition < n:
        raise ConfigError(
            f"repetition budget {repetition} is below selection size {n}; "
            "every selected sample must appear at least once"
        )
    if ids is None:
        ids = tuple(str(i) for i in range(n))
    else:
        ids = tuple(str(i) for i in ids)
        if len(ids) != n:
            raise DataError(f"{len(ids)} ids for {n} potentials")

    extras = repetition - n
    if extras == 0:
        weights = np.ones(n, dtype=np.int64)
    else:
        top = float(pot.max())
        rng = top - float(pot.min())
        benefit = (top - pot) + 1e-9 * rng
        total = float(benefit.sum())
        if total <= 0.0:
            # all potentials equal: split the extras evenly
            quota = np.full(n, extras / n)
        else:
            # divide before scaling: benefit_i <= total, so the share
            # stays in [0, 1] even when total is subnormal
            quota = (benefit / total) * extras
        floors = np.floor(quota).astype(np.int64)
        leftover = extras - int(floors.sum())
        # largest remainder first; equal remainders go to the lower
        # potential (distinct potentials can alias to one benefit in
        # float), then ascending index
        order = np.lexsort((np.arange(n), pot, -(quota - floors)))
        floors[order[:leftover]] += 1
        weights = 1 + floors
    return WeightAssignment(ids, tuple(int(w) for w in weights), repetition, tuple(map(float, pot)))


def default_repetition(n_candidates: int, n_targets: int, mode: str = "full-match", p: float | None = None) -> int:
    """Default repetition budget.

    ``full-match`` returns ``N + M`` so one duplicated pass over the
    selection costs the same number of steps as a pass over candidates
    plus targets.  ``fraction`` returns ``ceil(p * N)``; callers floor
    the result at the selection size.
    """
    n_candidates = int(n_candidates)
    n_targets = int(n_targets)
    if n_candidates < 0 or n_targets < 0:
        raise ConfigError(f"dataset sizes must be >= 0, got N={n_candidates}, M={n_targets}")
    if mode == "full-match":
        return n_candidates + n_targets
    if mode == "fraction":
        if p is None or not (0.0 < p <= 1.0):
            raise ConfigError(f"fraction mode needs 0 < p <= 1, got {p!r}")
        return math.ceil(p * n_candidates)
    raise ConfigError(f"unknown repetition mode {mode!r}; expected 'full-match' or 'fraction'")
