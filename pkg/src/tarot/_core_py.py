"""Pure-numpy kernels for the transport solver.

Mirrors the compiled extension's interface.  Row blocks are processed
sequentially with 64-bit accumulation, so results do not depend on the
thread count (the ``threads`` argument is accepted and ignored here).
"""

from __future__ import annotations

import numpy as np

BACKEND = "python"

# Rows per block: bounds temporary storage at ~block * m floats.
_BLOCK = 2048


def lse_rows(cost: np.ndarray, pot: np.ndarray, inv_reg: float, threads: int = 1) -> np.ndarray:
    """Row-wise log-sum-exp: out[i] = log sum_j exp((pot[j] - cost[i,j]) * inv_reg)."""
    n = cost.shape[0]
    pot = np.asarray(pot, dtype=np.float64)
    out = np.empty(n, dtype=np.float64)
    for lo in range(0, n, _BLOCK):
        hi = min(lo + _BLOCK, n)
        block = (pot[None, :] - cost[lo:hi].astype(np.float64, copy=False)) * inv_reg
        mx = block.max(axis=1)
        np.exp(block - mx[:, None], out=block)
        out[lo:hi] = mx + np.log(block.sum(axis=1))
    return out


def cost_rows(
    cost: np.ndarray,
    f: np.ndarray,
    g: np.ndarray,
    inv_reg: float,
    threads: int = 1,
) -> np.ndarray:
    """Per-row transported cost: out[i] = sum_j exp((f[i]+g[j]-cost[i,j])*inv_reg) * cost[i,j]."""
    n = cost.shape[0]
    f = np.asarray(f, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    out = np.empty(n, dtype=np.float64)
    for lo in range(0, n, _BLOCK):
        hi = min(lo + _BLOCK, n)
        c64 = cost[lo:hi].astype(np.float64, copy=False)
        pi = np.exp((f[lo:hi, None] + g[None, :] - c64) * inv_reg)
        out[lo:hi] = (pi * c64).sum(axis=1)
    return out


def row_sums(
    cost: np.ndarray,
    f: np.ndarray,
    g: np.ndarray,
    inv_reg: float,
    threads: int = 1,
) -> np.ndarray:
    """Row marginals of the implicit plan exp((f+g-cost)*inv_reg)."""
    return np.exp(np.asarray(f, dtype=np.float64) * inv_reg + lse_rows(cost, g, inv_reg))
