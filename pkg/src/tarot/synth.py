"""Synthetic fixtures: controllable point clouds on the unit sphere.

Used by tests, benchmarks, and the bundled demo data.  All generators
draw from counter-based streams, so a given seed yields the same data
on every platform.
"""

from __future__ import annotations

import numpy as np

from .featurestore import FeatureMatrix
from .metric import WhitenedFeatures, normalize_rows


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=np.uint64(seed)))


def _pole(d: int, sign: float) -> np.ndarray:
    v = np.zeros(d)
    v[0] = sign
    return v


def cluster_features(
    n_near: int,
    n_far: int,
    m_targets: int,
    d: int = 8,
    spread: float = 0.05,
    seed: int = 0,
) -> tuple[WhitenedFeatures, WhitenedFeatures, int]:
    """Two antipodal clusters of unit vectors.

    Candidates: ``n_near`` points around the target pole followed by
    ``n_far`` points around the opposite pole (pairwise distance near 2).
    Targets: ``m_targets`` points around the target pole.  Returns
    (candidates, targets, n_near); candidate indices below ``n_near`` are
    the in-distribution ones.
    """
    rng = _rng(seed)
    near = _pole(d, 1.0) + spread * rng.standard_normal((n_near, d))
    far = _pole(d, -1.0) + spread * rng.standard_normal((n_far, d))
    cand = np.concatenate([near, far]) if n_far else near
    targ = _pole(d, 1.0) + spread * rng.standard_normal((m_targets, d))
    candidates = normalize_rows(cand, ids=tuple(f"c{i}" for i in range(n_near + n_far)))
    targets = normalize_rows(targ, ids=tuple(f"t{i}" for i in range(m_targets)))
    return candidates, targets, n_near


def copies_plus_far(
    m_targets: int,
    n_far: int,
    d: int = 8,
    spread: float = 0.05,
    seed: int = 0,
    copies: int = 1,
) -> tuple[WhitenedFeatures, WhitenedFeatures]:
    """Candidate pool holding ``copies`` exact copies of every target plus far points.

    In-distribution candidates occupy indices below ``copies * m_targets``.
    """
    rng = _rng(seed)
    targ = normalize_rows(
        _pole(d, 1.0) + spread * rng.standard_normal((m_targets, d)),
        ids=tuple(f"t{i}" for i in range(m_targets)),
    )
    far = normalize_rows(
        _pole(d, -1.0) + spread * rng.standard_normal((n_far, d)),
        ids=tuple(f"far{i}" for i in range(n_far)),
    )
    cand = np.concatenate([np.tile(targ.data, (copies, 1)), far.data])
    ids = tuple(f"copy{i}" for i in range(copies * m_targets)) + far.ids
    return WhitenedFeatures(cand, ids), targ


def gaussian_mixture_raw(
    n: int,
    d: int,
    n_components: int = 4,
    seed: int = 0,
    component_weights: np.ndarray | None = None,
    dtype=np.float64,
) -> FeatureMatrix:
    """Raw (unnormalized) features from a random Gaussian mixture."""
    rng = _rng(seed)
    centers = 3.0 * rng.standard_normal((n_components, d))
    if component_weights is None:
        component_weights = np.full(n_components, 1.0 / n_components)
    labels = rng.choice(n_components, size=n, p=component_weights)
    data = centers[labels] + rng.standard_normal((n, d))
    return FeatureMatrix(data.astype(dtype), tuple(f"s{i}" for i in range(n)))


def linear_datamodel(
    n_candidates: int,
    n_targets: int,
    n_masks: int,
    mask_fraction: float = 0.5,
    noise: float = 0.01,
    seed: int = 0,
):
    """Synthetic retraining record with known ground-truth influence.

    Each model output is the sum of per-sample true weights over the
    training mask plus Gaussian noise scaled to the subset-sum spread.
    Returns ``(true_scores, masks, outputs)`` as plain arrays: a scorer
    equal to ``true_scores`` should rank-predict ``outputs`` almost
    perfectly.
    """
    rng = _rng(seed)
    true_scores = rng.standard_normal((n_candidates, n_targets))
    k = max(1, int(round(mask_fraction * n_candidates)))
    masks = np.zeros((n_masks, n_candidates), dtype=bool)
    for r in range(n_masks):
        masks[r, rng.choice(n_candidates, size=k, replace=False)] = True
    clean = masks.astype(np.float64) @ true_scores
    spread = clean.std(axis=0, keepdims=True)
    outputs = clean + noise * spread * rng.standard_normal(clean.shape)
    return true_scores, masks, outputs


def copies_plus_far_raw(
    m_targets: int,
    n_far: int,
    d: int = 8,
    spread: float = 0.05,
    seed: int = 0,
    copies: int = 1,
) -> tuple[FeatureMatrix, FeatureMatrix]:
    """Raw-feature variant of ``copies_plus_far`` for full-pipeline runs.

    Whitening amplifies any non-zero within-cluster spread to unit
    scale, so the only structure that survives the fitted transform is
    exact duplication: in-distribution candidates are exact tiles of
    the targets and every outlier is the same antipodal point.
    """
    rng = _rng(seed)
    targ = _pole(d, 1.0) + spread * rng.standard_normal((m_targets, d))
    far = np.tile((_pole(d, -1.0) + spread * rng.standard_normal(d))[None, :], (n_far, 1))
    cand = np.concatenate([np.tile(targ, (copies, 1)), far])
    cids = tuple(f"copy{i}" for i in range(copies * m_targets)) + tuple(
        f"far{i}" for i in range(n_far)
    )
    tids = tuple(f"t{i}" for i in range(m_targets))
    return FeatureMatrix(cand, cids), FeatureMatrix(targ, tids)
