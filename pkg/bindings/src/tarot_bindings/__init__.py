"""In-process array interface to the tarot selection engine.

Five entry points mirroring the CLI pipeline over caller-provided dense
arrays, so pipelines can select, weight, and evaluate without writing
feature files: ``select``, ``ot_distance``, ``whiten``, ``weights``,
``lds``.  Inputs are validated through a zero-copy view and then copied
once into engine-owned storage; nothing the caller passes in is retained
past the call, and every call is a pure function of its arguments, so
concurrent calls from multiple threads are safe.

Results match the CLI byte for byte on the same data and options: the
same metric construction, solvers, and budget resolution run underneath.
"""

from __future__ import annotations

import json
from contextlib import contextmanager
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

import tarot
from tarot import ConfigError, ShapeMismatchError, TarotError

__all__ = [
    "BoundArrayView",
    "LdsOutcome",
    "SelectOutcome",
    "bound_select",
    "lds",
    "ot_distance",
    "select",
    "weights",
    "whiten",
]

__version__ = "0.1.0"


@contextmanager
def _stage(name: str):
    # mirror the CLI's stage-tagged errors so callers see the same messages
    try:
        yield
    except TarotError as exc:
        raise type(exc)(f"{name}: {exc}") from exc


@dataclass(frozen=True)
class BoundArrayView:
    """Zero-copy window onto a caller-owned (n, d) array.

    Exists only for validation-time reads; ``materialize`` performs the
    single copy into engine-owned storage, after which the view must be
    dropped.  Never stored by the engine.
    """

    data: np.ndarray
    label: str

    @classmethod
    def wrap(cls, x, label: str) -> "BoundArrayView":
        arr = np.asarray(x)
        if arr.ndim != 2 or arr.shape[0] == 0 or arr.shape[1] == 0:
            raise ShapeMismatchError(
                f"validate: {label} must be a non-empty 2-D array, got shape {arr.shape}"
            )
        if not (np.issubdtype(arr.dtype, np.floating) or np.issubdtype(arr.dtype, np.integer)):
            raise ConfigError(f"validate: {label} must hold real numbers, got dtype {arr.dtype}")
        if isinstance(x, np.ndarray) and not arr.flags.c_contiguous:
            raise ConfigError(f"validate: {label} must be C-contiguous row-major")
        if not np.isfinite(arr).all():
            raise ConfigError(f"validate: {label} contains non-finite values")
        return cls(arr, label)

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def d(self) -> int:
        return self.data.shape[1]

    def materialize(self, prefix: str) -> tarot.FeatureMatrix:
        copied = np.array(self.data, dtype=np.float64, order="C", copy=True)
        return tarot.FeatureMatrix(copied, tuple(f"{prefix}{i}" for i in range(self.n)))


class SelectOutcome(NamedTuple):
    indices: tuple[int, ...]
    weights: tuple[int, ...] | None
    ratio: float
    trace: tuple[dict, ...]


class LdsOutcome(NamedTuple):
    per_target: tuple[float, ...]
    mean: float
    mode: str


def _metric_pair(cand: BoundArrayView, targ: BoundArrayView, whitening, eps, projection):
    if cand.d != targ.d:
        raise ShapeMismatchError(
            f"validate: candidates have {cand.d} columns, targets have {targ.d}"
        )
    cand_raw = cand.materialize("c")
    targ_raw = targ.materialize("t")
    if projection:
        spec = tarot.ProjectionSpec(
            cand_raw.d,
            int(projection["dim"]),
            int(projection.get("seed", 0)),
            projection.get("family", "gaussian"),
        )
    else:
        spec = tarot.default_projection_spec(cand_raw.d, seed=0)
    with _stage("metric"):
        return tarot.build_metric(cand_raw, targ_raw, spec, method=whitening, eps=float(eps))


def _solver_opts(solver: str, reg: float, tol: float, max_iter: int, threads: int) -> dict:
    if solver == "exact":
        return {}
    return {"anneal": True, "tol": float(tol), "max_iter": int(max_iter), "threads": threads}


def select(
    candidates,
    targets,
    mode: str = "otm",
    size: int | None = None,
    k_folds: int = 10,
    seed: int = 0,
    split_mode: str = "algorithm",
    solver: str = "sinkhorn",
    reg: float = 0.01,
    tol: float = 1e-6,
    max_iter: int = 10_000,
    whitening: str = "cholesky",
    eps: float = 1e-5,
    projection: dict | None = None,
    weighting: dict | None = None,
    threads: int = 1,
) -> SelectOutcome:
    """Run the full selection pipeline over two dense arrays.

    Options carry the same names, defaults, and meaning as the CLI
    config sections; ``weighting`` is the same dict shape ({"mode":
    "budget", "R": ...} / {"mode": "match-full"} / {"mode": "fraction",
    "p": ...}) and None skips weighting, like a config without that
    section.  Returns candidate row indices into ``candidates``, their
    integer weights (or None), the selection ratio, and the per-step
    trace.
    """
    cand = BoundArrayView.wrap(candidates, "candidate array")
    targ = BoundArrayView.wrap(targets, "target array")
    cand_w, targ_w, _ = _metric_pair(cand, targ, whitening, eps, projection)

    with _stage("select"):
        if mode == "fixed":
            if size is None:
                raise ConfigError("fixed selection needs a size")
            result = tarot.select_fixed(
                cand_w, targ_w, int(size), solver=solver, reg=float(reg), threads=threads
            )
        elif mode == "otm":
            result = tarot.select_otm(
                cand_w, targ_w,
                k_folds=int(k_folds), seed=int(seed),
                solver=solver, reg=float(reg), split_mode=split_mode, threads=threads,
            )
        else:
            raise ConfigError(f"unknown selection mode {mode!r}; expected fixed or otm")

    out_weights = None
    if weighting is not None:
        with _stage("weights"):
            sub = tarot.WhitenedFeatures(
                cand_w.data[list(result.selected)], result.ids, cand_w.transform_fingerprint
            )
            plan = tarot.solve(
                tarot.cost_matrix(sub, targ_w),
                tarot.MassVector.uniform(sub.n),
                tarot.MassVector.uniform(targ_w.n),
                solver, reg=float(reg),
                **_solver_opts(solver, reg, tol, max_iter, threads),
            )
            budget = _resolve_budget(weighting, cand_w.n, targ_w.n, result.size)
            wa = tarot.assign_weights(
                np.asarray(plan.dual_row, dtype=np.float64), budget, ids=result.ids
            )
            out_weights = wa.weights

    return SelectOutcome(
        indices=result.selected,
        weights=out_weights,
        ratio=tarot.selection_ratio(result, cand_w.n),
        trace=result.trace,
    )


bound_select = select


def _resolve_budget(weighting: dict, n: int, m: int, selected: int) -> int:
    mode = weighting.get("mode")
    if mode == "budget":
        if "R" not in weighting:
            raise ConfigError("weighting mode 'budget' needs an R value")
        return int(weighting["R"])
    if mode == "match-full":
        return max(selected, tarot.default_repetition(n, m, mode="full-match"))
    if mode == "fraction":
        if "p" not in weighting:
            raise ConfigError("weighting mode 'fraction' needs a p value")
        return max(selected, tarot.default_repetition(n, m, mode="fraction", p=float(weighting["p"])))
    raise ConfigError(f"unknown weighting mode {mode!r}; expected budget, match-full or fraction")


def ot_distance(
    candidates,
    targets,
    solver: str = "sinkhorn",
    reg: float = 0.01,
    tol: float = 1e-6,
    max_iter: int = 10_000,
    whitening: str = "cholesky",
    eps: float = 1e-5,
    projection: dict | None = None,
    threads: int = 1,
) -> float:
    """Transport distance between two raw feature arrays, CLI-style.

    Builds the shared metric space first, exactly like ``tarot ot-dist``;
    for transport between already-whitened sets use the engine directly.
    """
    cand = BoundArrayView.wrap(candidates, "candidate array")
    targ = BoundArrayView.wrap(targets, "target array")
    cand_w, targ_w, _ = _metric_pair(cand, targ, whitening, eps, projection)
    with _stage("solve"):
        return tarot.ot_distance(
            cand_w, targ_w, solver, reg=float(reg),
            **_solver_opts(solver, reg, tol, max_iter, threads),
        )


def whiten(
    candidates,
    targets,
    whitening: str = "cholesky",
    eps: float = 1e-5,
    projection: dict | None = None,
) -> dict:
    """Fit the shared whitening transform and return it as plain data.

    The dict matches the CLI's whitening.json payload (method, eps,
    fit_count, mean, flattened whitener, fingerprint) and round-trips
    through the engine's transform loader.
    """
    cand = BoundArrayView.wrap(candidates, "candidate array")
    targ = BoundArrayView.wrap(targets, "target array")
    _, _, transform = _metric_pair(cand, targ, whitening, eps, projection)
    return json.loads(transform.to_json())


def weights(
    potentials,
    repetition: int | None = None,
    match_full: tuple[int, int] | None = None,
    fraction: tuple[float, int] | None = None,
) -> tuple[int, ...]:
    """Integer repetition weights for a selection's dual potentials.

    Exactly one budget option, mirroring the CLI flags: ``repetition``
    is a direct budget (--R), ``match_full`` is (pool size, target
    count) (--match-full), ``fraction`` is (p, pool size) (--fraction).
    The latter two never drop below one weight per selected sample.
    """
    given = [o is not None for o in (repetition, match_full, fraction)]
    if sum(given) != 1:
        raise ConfigError("give exactly one of repetition, match_full, fraction")
    pots = np.asarray(potentials, dtype=np.float64)
    if pots.ndim != 1 or pots.size == 0:
        raise ShapeMismatchError(
            f"validate: potentials must be a non-empty 1-D array, got shape {pots.shape}"
        )
    if repetition is not None:
        budget = int(repetition)
    elif match_full is not None:
        n, m = match_full
        budget = max(pots.size, tarot.default_repetition(int(n), int(m), mode="full-match"))
    else:
        p, n = fraction
        budget = max(
            pots.size, tarot.default_repetition(int(n), 1, mode="fraction", p=float(p))
        )
    with _stage("weights"):
        return tarot.assign_weights(pots, budget).weights


def lds(
    scores,
    masks,
    outputs,
    pooled: bool = False,
    method: str = "tracin",
) -> LdsOutcome:
    """Attribution quality against a retraining record, CLI-style.

    ``scores`` is (candidates, targets), ``masks`` is (runs, candidates)
    of 0/1 subset indicators, ``outputs`` is (runs, targets) of measured
    model outputs.  Returns per-target rank correlations and their mean
    (one pooled value when ``pooled``).
    """
    score_view = BoundArrayView.wrap(scores, "score matrix")
    mask_view = BoundArrayView.wrap(np.asarray(masks, dtype=np.float64), "mask matrix")
    out_view = BoundArrayView.wrap(outputs, "output matrix")
    if not np.isin(mask_view.data, (0.0, 1.0)).all():
        raise ConfigError("validate: mask matrix entries must be 0/1")
    with _stage("lds"):
        archive = tarot.SubsetArchive(
            mask_view.data.astype(bool),
            np.array(out_view.data, dtype=np.float64, copy=True),
        )
        sc = tarot.AttributionScores(
            np.array(score_view.data, dtype=np.float64, copy=True), method
        )
        res = tarot.lds(sc, archive, mode="pooled" if pooled else "per-target")
    return LdsOutcome(per_target=res.per_target, mean=res.mean, mode=res.mode)
