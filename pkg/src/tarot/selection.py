"""Greedy subset selection driven by transport distance.

Two schemes over a shared nearest-neighbor machinery: fixed-size
selection (grow by neighbor rank until the budget is hit, break ties at
the boundary by dual potential) and OT-distance minimization (expand
per held-out fold until the fold's transport distance stops improving).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, DataError, ShapeMismatchError
from .metric import WhitenedFeatures
from .ot import (
    DEFAULT_REG,
    CostMatrix,
    MassVector,
    candidate_potentials,
    cost_matrix,
    solve,
)

# Above this many cost entries the neighbor scan streams in blocks
# instead of materializing the full candidate x target matrix.
STREAM_THRESHOLD = 25_000_000

_STREAM_BLOCK = 4096


@dataclass(frozen=True)
class NeighborTable:
    """Per-target candidate indices in ascending distance order.

    ``ranks[j, r]`` is target j's rank-(r+1) nearest candidate.  Ties are
    broken by ascending candidate index.  ``extended`` rebuilds the table
    with a larger horizon using the captured source data.
    """

    ranks: np.ndarray
    n_candidates: int
    _extender: Callable[[int], "NeighborTable"] | None = field(
        default=None, repr=False, compare=False
    )

    def __post_init__(self):
        r = np.ascontiguousarray(self.ranks, dtype=np.int64)
        if r.ndim != 2:
            raise DataError(f"rank table must be 2-D, got shape {r.shape}")
        r.setflags(write=False)
        object.__setattr__(self, "ranks", r)

    @property
    def n_targets(self) -> int:
        return self.ranks.shape[0]

    @property
    def k_max(self) -> int:
        return self.ranks.shape[1]

    def extended(self, k_new: int) -> "NeighborTable":
        if k_new <= self.k_max:
            return self
        if self._extender is None:
            raise ConfigError(f"table holds {self.k_max} ranks and cannot be extended")
        return self._extender(min(k_new, self.n_candidates))


def _check_k_max(k_max: int, n: int) -> None:
    if not 1 <= k_max <= n:
        raise ConfigError(f"need 1 <= k_max <= {n} candidates, got {k_max}")


def build_neighbor_table(c: CostMatrix, k_max: int) -> NeighborTable:
    """Exact k-nearest candidates per target from a dense cost matrix."""
    n, m = c.shape
    _check_k_max(k_max, n)
    order = np.argsort(c.values, axis=0, kind="stable")
    ranks = np.ascontiguousarray(order[:k_max].T)
    return NeighborTable(ranks, n, lambda k: build_neighbor_table(c, k))


def build_neighbor_table_streamed(
    candidates: WhitenedFeatures,
    targets: WhitenedFeatures,
    k_max: int,
    block: int = _STREAM_BLOCK,
) -> NeighborTable:
    """Exact k-nearest without materializing the full cost matrix.

    Scans candidates in index-ascending blocks and merges each block into
    a per-target running top-k, reproducing the dense table's
    (distance, index) ordering exactly: the sort key is -dot, a strictly
    monotone proxy for the distance.  Each block is first cut down to its
    own top ``k_max`` plus slack with an O(block) partition; partition
    boundary ties that could reach the final top-k are re-resolved with a
    full sort of just the affected rows, so exactness never depends on
    the partition's arbitrary tie choices.
    """
    if candidates.d != targets.d:
        raise ShapeMismatchError("candidate and target dimensions differ")
    n, m = candidates.n, targets.n
    _check_k_max(k_max, n)
    best_key = np.empty((m, 0), dtype=np.float64)
    best_idx = np.empty((m, 0), dtype=np.int64)
    for lo in range(0, n, block):
        hi = min(lo + block, n)
        keys = -(targets.data @ candidates.data[lo:hi].T)
        width = hi - lo
        take = min(2 * k_max, width)
        if take < width:
            part = np.argpartition(keys, take - 1, axis=1)[:, :take]
            part_key = np.take_along_axis(keys, part, axis=1)
            # worst key the partition kept; every dropped key is >= this
            boundary = part_key.max(axis=1)
            blk_key = part_key
            blk_idx = part + lo
        else:
            boundary = None
            blk_key = keys
            blk_idx = np.broadcast_to(
                np.arange(lo, hi, dtype=np.int64), keys.shape
            )
        prev_key, prev_idx = best_key, best_idx
        cat_key = np.concatenate([prev_key, blk_key], axis=1)
        cat_idx = np.concatenate([prev_idx, blk_idx], axis=1)
        order = np.lexsort((cat_idx, cat_key), axis=1)[:, :k_max]
        best_key = np.take_along_axis(cat_key, order, axis=1)
        best_idx = np.take_along_axis(cat_idx, order, axis=1)
        if boundary is not None and best_key.shape[1] == k_max:
            # a kept entry tying the partition boundary may have displaced
            # an equal-key lower-index entry the partition dropped; redo
            # those rows against the whole block
            unsafe = np.flatnonzero(best_key[:, -1] >= boundary)
            blk_range = np.arange(lo, hi, dtype=np.int64)
            for r in unsafe:
                row_key = np.concatenate([prev_key[r], keys[r]])
                row_idx = np.concatenate([prev_idx[r], blk_range])
                full = np.lexsort((row_idx, row_key))[:k_max]
                best_key[r] = row_key[full]
                best_idx[r] = row_idx[full]
    return NeighborTable(
        best_idx, n, lambda k: build_neighbor_table_streamed(candidates, targets, k, block)
    )


def neighbor_table_for(
    candidates: WhitenedFeatures, targets: WhitenedFeatures, k_max: int
) -> NeighborTable:
    """Dense table when the cost matrix fits comfortably, streamed otherwise."""
    if candidates.n * targets.n <= STREAM_THRESHOLD:
        return build_neighbor_table(cost_matrix(candidates, targets), k_max)
    return build_neighbor_table_streamed(candidates, targets, k_max)


def nearest_rank_set(
    table: NeighborTable,
    k: int,
    targets: np.ndarray | Sequence[int] | None = None,
    exclude: np.ndarray | None = None,
) -> np.ndarray:
    """Deduplicated rank-k neighbors over the given targets, minus ``exclude``.

    ``exclude`` is a boolean mask over candidate indices (already-selected
    points).  Returns candidate indices in ascending order.
    """
    if not 1 <= k <= table.k_max:
        raise ConfigError(f"rank {k} outside table horizon 1..{table.k_max}")
    col = table.ranks[:, k - 1] if targets is None else table.ranks[np.asarray(targets), k - 1]
    out = np.unique(col)
    if exclude is not None:
        out = out[~exclude[out]]
    return out


@dataclass(frozen=True)
class SelectionResult:
    """Outcome of a selection run, serializable for training pipelines."""

    selected: tuple[int, ...]
    ids: tuple[str, ...]
    n_candidates: int
    trace: tuple[dict, ...]
    weights: tuple[int, ...] | None = None
    per_fold: dict | None = None
    config_fingerprint: str = ""

    def __post_init__(self):
        if len(set(self.selected)) != len(self.selected):
            raise DataError("selection contains duplicate candidate indices")
        if len(self.ids) != len(self.selected):
            raise ShapeMismatchError("selection ids and indices differ in length")
        if any(i < 0 or i >= self.n_candidates for i in self.selected):
            raise DataError("selection index outside the candidate range")
        if self.weights is not None:
            if len(self.weights) != len(self.selected):
                raise ShapeMismatchError("weights and selection differ in length")
            if any(w < 1 for w in self.weights):
                raise DataError("selection weights must be positive integers")

    @property
    def size(self) -> int:
        return len(self.selected)

    def with_weights(self, weights: Sequence[int]) -> "SelectionResult":
        return SelectionResult(
            self.selected,
            self.ids,
            self.n_candidates,
            self.trace,
            tuple(int(w) for w in weights),
            self.per_fold,
            self.config_fingerprint,
        )

    def to_json(self) -> str:
        return json.dumps(
            {
                "selected": list(self.ids),
                "weights": None if self.weights is None else list(self.weights),
                "ratio": selection_ratio(self, self.n_candidates),
                "trace": list(self.trace),
                "per_fold": self.per_fold,
                "fingerprint": self.config_fingerprint,
            },
            indent=2,
            sort_keys=True,
        )

    def write_csv(self, path: Path | str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("id,weight\n")
            weights = self.weights if self.weights is not None else [1] * self.size
            for sid, w in zip(self.ids, weights):
                fh.write(f"{sid},{w}\n")


def selection_ratio(result: SelectionResult, n: int) -> float:
    if n < 1:
        raise DataError("candidate pool size must be positive")
    return result.size / n


def _selection_fingerprint(
    candidates: WhitenedFeatures, targets: WhitenedFeatures, params: dict
) -> str:
    h = hashlib.sha256()
    h.update(candidates.data.tobytes())
    h.update(targets.data.tobytes())
    h.update(json.dumps(params, sort_keys=True).encode())
    return h.hexdigest()[:16]


def _subset(feats: WhitenedFeatures, idx: np.ndarray | Sequence[int]) -> WhitenedFeatures:
    idx = np.asarray(idx, dtype=np.int64)
    return WhitenedFeatures(
        feats.data[idx],
        tuple(feats.ids[int(i)] for i in idx),
        feats.transform_fingerprint,
    )


def select_fixed(
    candidates: WhitenedFeatures,
    targets: WhitenedFeatures,
    size: int,
    solver: str = "sinkhorn",
    reg: float = DEFAULT_REG,
    threads: int = 1,
) -> SelectionResult:
    """Pick exactly ``size`` candidates by expanding nearest-neighbor ranks.

    Rank k = 1, 2, ... contributes each target's k-th nearest unselected
    candidate.  A rank that fits inside the remaining budget is taken
    whole; the first rank that overflows is settled by one batched dual
    solve, keeping the candidates with the lowest potentials.
    """
    n, m = candidates.n, targets.n
    if not 1 <= size <= n:
        raise ConfigError(f"need 1 <= size <= {n} candidates, got {size}")
    params = {
        "mode": "fixed",
        "size": size,
        "solver": solver,
        "reg": reg if solver == "sinkhorn" else 0.0,
    }
    fingerprint = _selection_fingerprint(candidates, targets, params)

    table = neighbor_table_for(candidates, targets, min(n, max(32, -(-2 * size // m))))
    selected: list[int] = []
    sel_mask = np.zeros(n, dtype=bool)
    trace: list[dict] = []
    k = 1
    while len(selected) < size:
        if k > n:
            raise DataError("neighbor ranks exhausted before reaching the requested size")
        if k > table.k_max:
            table = table.extended(min(n, table.k_max * 2))
        d_k = nearest_rank_set(table, k, exclude=sel_mask)
        if d_k.size == 0:
            k += 1
            continue
        if len(selected) + d_k.size <= size:
            selected.extend(int(i) for i in d_k)
            sel_mask[d_k] = True
            trace.append({"k": k, "size": len(selected), "ot_distance": None})
        else:
            need = size - len(selected)
            sel_feats = _subset(candidates, selected) if selected else None
            solver_opts = {"threads": threads, "anneal": True} if solver == "sinkhorn" else {}
            pots = candidate_potentials(
                sel_feats, _subset(candidates, d_k), targets, solver, reg, **solver_opts
            )
            order = np.argsort(pots, kind="stable")[:need]
            selected.extend(int(d_k[i]) for i in order)
            trace.append({"k": k, "size": len(selected), "ot_distance": None})
            break
        k += 1
    return SelectionResult(
        selected=tuple(selected),
        ids=tuple(candidates.ids[i] for i in selected),
        n_candidates=n,
        trace=tuple(trace),
        config_fingerprint=fingerprint,
    )


def _fold_indices(m: int, k_folds: int, seed: int) -> list[np.ndarray]:
    rng = np.random.Generator(np.random.Philox(key=np.uint64(seed)))
    perm = rng.permutation(m)
    return [np.sort(part) for part in np.array_split(perm, k_folds)]


def select_otm(
    candidates: WhitenedFeatures,
    targets: WhitenedFeatures,
    k_folds: int = 10,
    seed: int = 0,
    solver: str = "sinkhorn",
    reg: float = DEFAULT_REG,
    split_mode: str = "algorithm",
    threads: int = 1,
) -> SelectionResult:
    """Grow the selection until fold-held-out transport distance rises.

    Targets are shuffled by ``seed`` into ``k_folds`` near-equal folds.
    With split_mode="algorithm", ranks expand over the targets outside
    the fold and the fold itself judges the stop; "prose" swaps the two
    roles.  One fold means both roles use the full target set.  The final
    selection is the deduplicated union over folds.
    """
    n, m = candidates.n, targets.n
    if not 1 <= k_folds <= m:
        raise ConfigError(f"need 1 <= k_folds <= {m} targets, got {k_folds}")
    if split_mode not in ("algorithm", "prose"):
        raise ConfigError(f"unknown split mode {split_mode!r}")
    params = {
        "mode": "otm",
        "k_folds": k_folds,
        "seed": seed,
        "solver": solver,
        "reg": reg if solver == "sinkhorn" else 0.0,
        "split_mode": split_mode,
    }
    fingerprint = _selection_fingerprint(candidates, targets, params)

    table = neighbor_table_for(candidates, targets, min(n, 32))
    folds = _fold_indices(m, k_folds, seed)
    all_idx = np.arange(m)

    union: list[int] = []
    union_mask = np.zeros(n, dtype=bool)
    trace: list[dict] = []
    per_fold: dict[str, dict] = {}

    for fold_no, fold in enumerate(folds):
        if k_folds == 1:
            expand_targets = eval_targets = all_idx
        elif split_mode == "algorithm":
            eval_targets = fold
            expand_targets = np.setdiff1d(all_idx, fold, assume_unique=True)
        else:
            expand_targets = fold
            eval_targets = np.setdiff1d(all_idx, fold, assume_unique=True)
        eval_feats = _subset(targets, eval_targets)
        eval_mass = MassVector.uniform(eval_feats.n)

        fold_sel: list[int] = []
        fold_mask = np.zeros(n, dtype=bool)
        cost_rows_cache: list[np.ndarray] = []
        d_pre = np.inf
        f_prev: np.ndarray | None = None
        g_prev: np.ndarray | None = None
        stop_k = 0
        k = 1
        while k <= n:
            if k > table.k_max:
                table = table.extended(min(n, table.k_max * 2))
            d_k = nearest_rank_set(table, k, targets=expand_targets, exclude=fold_mask)
            if d_k.size == 0:
                k += 1
                continue
            new_rows = cost_matrix(_subset(candidates, d_k), eval_feats).values
            trial_vals = np.concatenate(cost_rows_cache + [new_rows]) if cost_rows_cache else new_rows
            trial_idx = fold_sel + [int(i) for i in d_k]
            c = CostMatrix(
                trial_vals, tuple(candidates.ids[i] for i in trial_idx), eval_feats.ids
            )
            if solver == "sinkhorn":
                f0 = None
                if f_prev is not None:
                    f0 = np.concatenate([f_prev, np.full(d_k.size, f_prev.mean())])
                plan = solve(
                    c,
                    MassVector.uniform(len(trial_idx)),
                    eval_mass,
                    solver,
                    reg,
                    threads=threads,
                    anneal=g_prev is None,
                    f0=f0,
                    g0=g_prev,
                )
            else:
                plan = solve(c, MassVector.uniform(len(trial_idx)), eval_mass, solver, reg)
            d_new = plan.cost
            trace.append({"fold": fold_no, "k": k, "size": len(trial_idx), "ot_distance": d_new})
            if d_new > d_pre:
                stop_k = k
                break
            fold_sel = trial_idx
            fold_mask[d_k] = True
            cost_rows_cache.append(new_rows)
            d_pre = d_new
            f_prev, g_prev = plan.dual_row, plan.dual_col
            stop_k = k
            k += 1

        per_fold[str(fold_no)] = {
            "selected": [candidates.ids[i] for i in fold_sel],
            "stop_iteration": stop_k,
            "final_distance": None if not np.isfinite(d_pre) else d_pre,
        }
        for i in fold_sel:
            if not union_mask[i]:
                union_mask[i] = True
                union.append(i)

    return SelectionResult(
        selected=tuple(union),
        ids=tuple(candidates.ids[i] for i in union),
        n_candidates=n,
        trace=tuple(trace),
        per_fold=per_fold,
        config_fingerprint=fingerprint,
    )
