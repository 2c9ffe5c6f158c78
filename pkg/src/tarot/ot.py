"""Discrete optimal transport between weighted point sets.

Two solvers: a log-domain Sinkhorn iteration for entropic-regularized
transport (scales to large instances, never materializes the kernel
matrix), and an exact linear program used as the reference on small
instances and for dual potentials where exactness matters.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog

from ._kernels import cost_rows, lse_rows, row_sums
from .errors import ConfigError, DataError, NumericalError, ShapeMismatchError
from .metric import WhitenedFeatures

# Hard ceiling for the LP solver; beyond this use sinkhorn.
EXACT_GUARD = 1_000_000

# Above this many cost entries the coupling is stored row-sparse.
SPARSE_PLAN_THRESHOLD = 10_000_000

DEFAULT_REG = 0.01
DEFAULT_TOL = 1e-6
DEFAULT_MAX_ITER = 10_000


@dataclass(frozen=True)
class MassVector:
    """Strictly positive weights summing to one."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.ascontiguousarray(self.weights, dtype=np.float64)
        if w.ndim != 1 or w.size == 0:
            raise DataError(f"mass vector must be a non-empty 1-D array, got shape {w.shape}")
        if not np.isfinite(w).all():
            raise DataError("mass vector contains non-finite entries")
        if (w <= 0).any():
            raise DataError("mass vector entries must be strictly positive")
        total = float(w.sum())
        if abs(total - 1.0) > 1e-12:
            raise DataError(f"mass vector sums to {total!r}, expected 1 within 1e-12")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @classmethod
    def uniform(cls, n: int) -> "MassVector":
        if n < 1:
            raise DataError("cannot build a mass vector over zero points")
        return cls(np.full(n, 1.0 / n))

    @property
    def n(self) -> int:
        return self.weights.size


@dataclass(frozen=True)
class CostMatrix:
    """Non-negative pairwise costs with row/column sample IDs."""

    values: np.ndarray
    row_ids: tuple[str, ...]
    col_ids: tuple[str, ...]

    def __post_init__(self):
        v = np.ascontiguousarray(self.values)
        if v.dtype not in (np.float32, np.float64):
            v = v.astype(np.float64)
        if v.ndim != 2:
            raise DataError(f"cost matrix must be 2-D, got shape {v.shape}")
        if not np.isfinite(v).all():
            raise DataError("cost matrix contains non-finite entries")
        if (v < 0).any():
            raise DataError("cost matrix contains negative entries")
        if len(self.row_ids) != v.shape[0] or len(self.col_ids) != v.shape[1]:
            raise ShapeMismatchError(
                f"ids ({len(self.row_ids)}, {len(self.col_ids)}) do not match shape {v.shape}"
            )
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "row_ids", tuple(self.row_ids))
        object.__setattr__(self, "col_ids", tuple(self.col_ids))

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass(frozen=True)
class TransportPlan:
    """A coupling with its duals and diagnostics.

    ``cost`` is the transported cost <C, pi> (no entropy term), ``reg`` the
    entropic parameter used (0 for the exact solver), and
    ``marginal_violation`` the summed L1 deviation of row and column sums
    from the prescribed masses.
    """

    coupling: np.ndarray | sp.csr_matrix
    dual_row: np.ndarray
    dual_col: np.ndarray
    cost: float
    reg: float
    iterations: int
    marginal_violation: float
    converged: bool = True
    truncated_mass: float = 0.0

    def dense_coupling(self) -> np.ndarray:
        if sp.issparse(self.coupling):
            return np.asarray(self.coupling.todense())
        return self.coupling

    def to_json(self, include_coupling: bool = False) -> str:
        doc = {
            "cost": self.cost,
            "reg": self.reg,
            "iterations": self.iterations,
            "marginal_violation": self.marginal_violation,
            "converged": self.converged,
            "truncated_mass": self.truncated_mass,
            "dual_row": np.asarray(self.dual_row).tolist(),
            "dual_col": np.asarray(self.dual_col).tolist(),
        }
        if include_coupling:
            doc["coupling"] = self.dense_coupling().tolist()
        return json.dumps(doc)


def cost_matrix(src: WhitenedFeatures, dst: WhitenedFeatures, dtype=np.float64) -> CostMatrix:
    """Pairwise distances between unit rows: sqrt(2 - 2 * src @ dst.T)."""
    if src.d != dst.d:
        raise ShapeMismatchError(f"source is {src.d}-D, destination is {dst.d}-D")
    if np.dtype(dtype) == np.float32:
        # stay in f32 end to end: the result is stored f32 anyway, and a
        # f64 gram would dominate memory exactly when f32 was requested
        gram = src.data.astype(np.float32, copy=False) @ dst.data.astype(np.float32, copy=False).T
    else:
        gram = src.data @ dst.data.T
    vals = np.sqrt(np.clip(2.0 - 2.0 * gram, 0.0, 4.0))
    return CostMatrix(vals.astype(dtype, copy=False), src.ids, dst.ids)


def _check_instance(c: CostMatrix, a: MassVector, b: MassVector) -> None:
    n, m = c.shape
    if a.n != n or b.n != m:
        raise ShapeMismatchError(f"masses ({a.n}, {b.n}) do not match cost shape {c.shape}")


def _round_to_marginals(pi: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Project a non-negative matrix onto the transport polytope.

    Scales rows then columns down to their mass caps and patches the
    leftover mass with a rank-one layer, so the result carries exactly
    the requested marginals while moving at most the input's marginal
    violation worth of mass.
    """
    with np.errstate(divide="ignore"):
        pi = pi * np.minimum(1.0, a / pi.sum(axis=1))[:, None]
        pi = pi * np.minimum(1.0, b / pi.sum(axis=0))[None, :]
    err_r = np.maximum(a - pi.sum(axis=1), 0.0)
    err_c = np.maximum(b - pi.sum(axis=0), 0.0)
    leftover = float(err_r.sum())
    if leftover > 0.0:
        pi = pi + np.outer(err_r, err_c) / leftover
    return pi


def _plan_from_potentials(
    values: np.ndarray,
    values_t: np.ndarray,
    f: np.ndarray,
    g: np.ndarray,
    a: MassVector,
    b: MassVector,
    reg: float,
    iterations: int,
    tol: float,
    threads: int,
    sparse_topk: int,
    round_plan: bool = False,
) -> TransportPlan:
    inv_reg = 1.0 / reg
    n, m = values.shape
    rs = row_sums(values, f, g, inv_reg, threads)
    cs = row_sums(values_t, g, f, inv_reg, threads)
    violation = float(np.abs(rs - a.weights).sum() + np.abs(cs - b.weights).sum())
    converged = violation < tol
    cost = float(cost_rows(values, f, g, inv_reg, threads).sum())
    if not np.isfinite(cost):
        raise NumericalError("sinkhorn transported cost is non-finite")

    if n * m <= SPARSE_PLAN_THRESHOLD:
        pi = np.exp(
            (f[:, None] + g[None, :] - values.astype(np.float64, copy=False)) * inv_reg
        )
        if round_plan:
            pi = _round_to_marginals(pi, a.weights, b.weights)
            violation = float(
                np.abs(pi.sum(axis=1) - a.weights).sum()
                + np.abs(pi.sum(axis=0) - b.weights).sum()
            )
            cost = float((values.astype(np.float64, copy=False) * pi).sum())
        coupling: np.ndarray | sp.csr_matrix = pi
        truncated = 0.0
    else:
        if round_plan:
            raise ConfigError(
                f"round_plan needs a dense coupling; {n}x{m} exceeds "
                f"{SPARSE_PLAN_THRESHOLD} entries"
            )
        k = min(sparse_topk, m)
        rows = []
        kept = 0.0
        for lo in range(0, n, 1024):
            hi = min(lo + 1024, n)
            block = np.exp(
                (f[lo:hi, None] + g[None, :] - values[lo:hi].astype(np.float64, copy=False))
                * inv_reg
            )
            idx = np.argpartition(block, m - k, axis=1)[:, m - k :]
            vals = np.take_along_axis(block, idx, axis=1)
            kept += float(vals.sum())
            rows.append((idx, vals))
        indptr = np.arange(0, (n + 1) * k, k, dtype=np.int64)
        indices = np.concatenate([r[0].reshape(-1) for r in rows])
        data = np.concatenate([r[1].reshape(-1) for r in rows])
        coupling = sp.csr_matrix((data, indices, indptr), shape=(n, m))
        truncated = max(float(rs.sum()) - kept, 0.0)
    return TransportPlan(
        coupling=coupling,
        dual_row=f,
        dual_col=g,
        cost=max(cost, 0.0),
        reg=reg,
        iterations=iterations,
        marginal_violation=violation,
        converged=converged,
        truncated_mass=truncated,
    )


def _sinkhorn_loop(
    values: np.ndarray,
    values_t: np.ndarray,
    loga: np.ndarray,
    logb: np.ndarray,
    a_weights: np.ndarray,
    reg: float,
    max_iter: int,
    tol: float,
    f: np.ndarray,
    g: np.ndarray,
    threads: int,
) -> tuple[np.ndarray, np.ndarray, int]:
    inv_reg = 1.0 / reg
    iterations = 0
    while iterations < max_iter:
        f_new = reg * (loga - lse_rows(values, g, inv_reg, threads))
        if not np.isfinite(f_new).all():
            raise NumericalError(f"sinkhorn potentials diverged at reg={reg}; raise reg")
        if iterations > 0:
            # Row sums of the pre-update plan are a * exp((f - f_new)/reg),
            # so the marginal violation falls out of the update for free.
            # Overflow to inf just means "not converged yet".
            with np.errstate(over="ignore"):
                est = float(np.abs(a_weights * np.expm1((f - f_new) * inv_reg)).sum())
            if est < tol:
                f = f_new
                iterations += 1
                break
        f = f_new
        g = reg * (logb - lse_rows(values_t, f, inv_reg, threads))
        if not np.isfinite(g).all():
            raise NumericalError(f"sinkhorn potentials diverged at reg={reg}; raise reg")
        iterations += 1
    return f, g, iterations


def sinkhorn(
    c: CostMatrix,
    a: MassVector,
    b: MassVector,
    reg: float = DEFAULT_REG,
    max_iter: int = DEFAULT_MAX_ITER,
    tol: float = DEFAULT_TOL,
    f0: np.ndarray | None = None,
    g0: np.ndarray | None = None,
    anneal: bool = False,
    threads: int = 1,
    sparse_topk: int = 32,
    round_plan: bool = False,
) -> TransportPlan:
    """Entropic-regularized transport via log-domain Sinkhorn iteration.

    Stops once the estimated L1 marginal violation drops below ``tol`` or
    after ``max_iter`` sweeps; the returned plan carries the exactly
    recomputed violation either way, with ``converged`` saying which case
    occurred.  ``anneal`` solves a short schedule of decreasing reg values
    first, warm-starting each stage, which cuts iteration counts sharply
    for small reg.  ``f0``/``g0`` warm-start the potentials directly.

    ``round_plan`` projects the final coupling onto the exact marginals
    (dense instances only).  At small reg the iteration's tail can stall
    far from feasibility; the projection moves at most the leftover
    violation worth of mass, so the transported cost shifts by no more
    than that times the cost diameter.  ``cost`` and
    ``marginal_violation`` then describe the projected plan, while
    ``converged`` still reports the iteration's own stopping state.
    """
    if reg <= 0:
        raise ConfigError(f"reg must be positive, got {reg}")
    _check_instance(c, a, b)
    values = c.values
    values_t = np.ascontiguousarray(values.T)
    loga = np.log(a.weights)
    logb = np.log(b.weights)
    f = np.zeros(a.n) if f0 is None else np.asarray(f0, dtype=np.float64).copy()
    g = np.zeros(b.n) if g0 is None else np.asarray(g0, dtype=np.float64).copy()

    total_iters = 0
    if anneal and reg < 0.25:
        stage = 0.5
        stage_tol = max(tol * 1e3, 1e-5)
        while stage > reg * 4.0:
            f, g, used = _sinkhorn_loop(
                values, values_t, loga, logb, a.weights, stage, 200, stage_tol, f, g, threads
            )
            total_iters += used
            stage /= 4.0
    f, g, used = _sinkhorn_loop(
        values, values_t, loga, logb, a.weights, reg, max_iter, tol, f, g, threads
    )
    total_iters += used
    return _plan_from_potentials(
        values, values_t, f, g, a, b, reg, total_iters, tol, threads, sparse_topk, round_plan
    )


def exact_ot(c: CostMatrix, a: MassVector, b: MassVector) -> TransportPlan:
    """Exact transport as a linear program (HiGHS), with optimal LP duals."""
    _check_instance(c, a, b)
    n, m = c.shape
    if n * m > EXACT_GUARD:
        raise ConfigError(
            f"exact solver limited to {EXACT_GUARD} cost entries, got {n}x{m}; use sinkhorn"
        )
    cost_vec = c.values.astype(np.float64, copy=False).reshape(-1)
    a_rows = sp.kron(sp.eye(n, format="csr"), np.ones((1, m)), format="csr")
    a_cols = sp.kron(np.ones((1, n)), sp.eye(m, format="csr"), format="csr")
    a_eq = sp.vstack([a_rows, a_cols], format="csr")
    b_eq = np.concatenate([a.weights, b.weights])
    res = linprog(cost_vec, A_eq=a_eq, b_eq=b_eq, bounds=(0, None), method="highs")
    if res.status != 0:
        raise NumericalError(f"exact transport LP failed: {res.message}")
    pi = np.clip(res.x.reshape(n, m), 0.0, None)
    duals = np.asarray(res.eqlin.marginals, dtype=np.float64)
    violation = float(
        np.abs(pi.sum(axis=1) - a.weights).sum() + np.abs(pi.sum(axis=0) - b.weights).sum()
    )
    return TransportPlan(
        coupling=pi,
        dual_row=duals[:n],
        dual_col=duals[n:],
        cost=max(float(res.fun), 0.0),
        reg=0.0,
        iterations=int(getattr(res, "nit", 0)),
        marginal_violation=violation,
        converged=True,
    )


def solve(
    c: CostMatrix,
    a: MassVector,
    b: MassVector,
    solver: str = "sinkhorn",
    reg: float = DEFAULT_REG,
    **kwargs,
) -> TransportPlan:
    """Dispatch to a solver by name ("sinkhorn" or "exact")."""
    if solver == "sinkhorn":
        return sinkhorn(c, a, b, reg=reg, **kwargs)
    if solver == "exact":
        kwargs.pop("threads", None)
        if kwargs:
            raise ConfigError(f"exact solver takes no options {sorted(kwargs)}")
        return exact_ot(c, a, b)
    raise ConfigError(f"unknown solver {solver!r}; expected sinkhorn or exact")


def ot_distance(
    src: WhitenedFeatures,
    dst: WhitenedFeatures,
    solver: str = "sinkhorn",
    reg: float = DEFAULT_REG,
    **kwargs,
) -> float:
    """Transport cost between two point sets under uniform masses."""
    if src.n == 0 or dst.n == 0:
        raise DataError("transport distance needs non-empty sets on both sides")
    dtype = np.float32 if src.n * dst.n > SPARSE_PLAN_THRESHOLD else np.float64
    c = cost_matrix(src, dst, dtype=dtype)
    plan = solve(c, MassVector.uniform(src.n), MassVector.uniform(dst.n), solver, reg, **kwargs)
    return plan.cost


def concat_features(parts: Sequence[WhitenedFeatures]) -> WhitenedFeatures:
    """Stack unit-norm feature sets; IDs concatenate in order."""
    parts = [p for p in parts if p.n > 0]
    if not parts:
        raise DataError("nothing to concatenate")
    if len(parts) == 1:
        return parts[0]
    d = parts[0].d
    for p in parts[1:]:
        if p.d != d:
            raise ShapeMismatchError("feature dimensions differ between parts")
    data = np.concatenate([p.data for p in parts])
    ids = tuple(i for p in parts for i in p.ids)
    fp = parts[0].transform_fingerprint
    return WhitenedFeatures(data, ids, fp)


def candidate_potentials(
    selected: WhitenedFeatures | None,
    new_candidates: WhitenedFeatures,
    targets: WhitenedFeatures,
    solver: str = "sinkhorn",
    reg: float = DEFAULT_REG,
    **kwargs,
) -> np.ndarray:
    """Source dual value for each new candidate, from one batched solve.

    The source side is selected + new candidates under uniform masses; a
    lower dual means the candidate serves the targets more cheaply, so
    ascending potential is descending benefit.  All candidates in the
    batch share one solve, which prices them against each other as well
    as against the already-selected points.
    """
    if new_candidates.n == 0:
        raise DataError("no new candidates to score")
    if targets.n == 0:
        raise DataError("no targets to score against")
    n_sel = 0 if selected is None else selected.n
    combined = (
        new_candidates if n_sel == 0 else concat_features([selected, new_candidates])
    )
    dtype = np.float32 if combined.n * targets.n > SPARSE_PLAN_THRESHOLD else np.float64
    c = cost_matrix(combined, targets, dtype=dtype)
    plan = solve(
        c, MassVector.uniform(combined.n), MassVector.uniform(targets.n), solver, reg, **kwargs
    )
    return np.asarray(plan.dual_row[n_sel:], dtype=np.float64).copy()
