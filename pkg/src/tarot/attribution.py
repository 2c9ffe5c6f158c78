"""Influence scoring and the linear-datamodel evaluation harness.

Two scorers are provided: a gradient-trace baseline that sums learning
rate weighted gradient inner products across training checkpoints, and
the negative whitened-feature-distance scorer.  Both produce a
candidate-by-target score matrix.  Scores are compared through the
linear datamodeling protocol: predict each retrained model's output as
the score sum over its training subset, then rank-correlate predictions
against the recorded outputs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .errors import ConfigError, DataError, NumericalError, ShapeMismatchError
from .featurestore import FeatureMatrix, load_features, write_features
from .metric import apply_whitening, fit_whitening, normalize_rows
from .ot import cost_matrix

__all__ = [
    "AttributionScores",
    "SubsetArchive",
    "LdsResult",
    "tracin_score",
    "neg_wfd_score",
    "neg_wfd_ensemble",
    "ensemble_scores",
    "spearman",
    "lds",
    "save_archive",
    "load_archive",
    "save_scores",
    "load_scores",
]

METHODS = ("tracin", "neg-wfd")


@dataclass(frozen=True)
class AttributionScores:
    """Candidate-by-target score matrix with its provenance tag."""

    matrix: np.ndarray
    method: str
    ensemble_size: int = 1

    def __post_init__(self):
        m = np.array(self.matrix, dtype=np.float64)
        if m.ndim != 2:
            raise DataError(f"score matrix must be 2-D, got shape {m.shape}")
        if not np.all(np.isfinite(m)):
            bad = np.argwhere(~np.isfinite(m))[0]
            raise NumericalError(f"non-finite score at ({bad[0]}, {bad[1]})")
        if self.method not in METHODS:
            raise ConfigError(f"unknown scoring method {self.method!r}; expected one of {METHODS}")
        if self.ensemble_size < 1:
            raise ConfigError(f"ensemble_size must be >= 1, got {self.ensemble_size}")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @property
    def n_candidates(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_targets(self) -> int:
        return self.matrix.shape[1]


@dataclass(frozen=True)
class SubsetArchive:
    """Retraining record: subset masks and the resulting model outputs.

    Row r of ``outputs`` holds the outputs of the model trained on the
    candidates flagged in ``masks[r]``.
    """

    masks: np.ndarray
    outputs: np.ndarray

    def __post_init__(self):
        masks = np.array(self.masks, dtype=bool)
        outputs = np.array(self.outputs, dtype=np.float64)
        if masks.ndim != 2 or outputs.ndim != 2:
            raise DataError(
                f"masks and outputs must be 2-D, got {masks.shape} and {outputs.shape}"
            )
        if masks.shape[0] != outputs.shape[0]:
            raise ShapeMismatchError(
                f"{masks.shape[0]} masks but {outputs.shape[0]} output rows"
            )
        if masks.shape[0] == 0:
            raise DataError("archive holds no retrained models")
        per_mask = masks.sum(axis=1)
        if per_mask.min() < 1:
            empty = int(np.flatnonzero(per_mask < 1)[0])
            raise DataError(f"mask {empty} selects no samples")
        if not np.all(np.isfinite(outputs)):
            bad = np.argwhere(~np.isfinite(outputs))[0]
            raise NumericalError(f"non-finite output at ({bad[0]}, {bad[1]})")
        masks.setflags(write=False)
        outputs.setflags(write=False)
        object.__setattr__(self, "masks", masks)
        object.__setattr__(self, "outputs", outputs)

    @property
    def n_models(self) -> int:
        return self.masks.shape[0]

    @property
    def n_candidates(self) -> int:
        return self.masks.shape[1]

    @property
    def n_targets(self) -> int:
        return self.outputs.shape[1]


@dataclass(frozen=True)
class LdsResult:
    """Rank-correlation summary of a scorer against an archive."""

    per_target: tuple
    mean: float
    mode: str = "per-target"


def tracin_score(candidate_grads, target_grads, lrs) -> AttributionScores:
    """Sum of learning rate weighted gradient inner products.

    ``candidate_grads`` and ``target_grads`` are parallel lists of
    per-checkpoint gradient matrices; ``lrs`` supplies one positive
    learning rate per checkpoint.
    """
    cands = list(candidate_grads)
    targs = list(target_grads)
    rates = np.asarray(lrs, dtype=np.float64)
    if len(cands) == 0:
        raise DataError("no checkpoints given")
    if len(cands) != len(targs) or rates.shape != (len(cands),):
        raise ShapeMismatchError(
            f"{len(cands)} candidate checkpoints, {len(targs)} target checkpoints, "
            f"{rates.size} learning rates"
        )
    if not np.all(np.isfinite(rates)) or rates.min() <= 0:
        raise ConfigError(f"learning rates must be positive finite, got {rates.tolist()}")
    total = None
    for ckpt, (c, t) in enumerate(zip(cands, targs)):
        if c.d != t.d:
            raise ShapeMismatchError(
                f"checkpoint {ckpt}: candidate dim {c.d} != target dim {t.d}"
            )
        if total is not None and (c.n, t.n) != total.shape:
            raise ShapeMismatchError(
                f"checkpoint {ckpt}: shape ({c.n}, {t.n}) disagrees with {total.shape}"
            )
        term = rates[ckpt] * (c.data.astype(np.float64) @ t.data.astype(np.float64).T)
        total = term if total is None else total + term
    return AttributionScores(total, "tracin")


def neg_wfd_score(candidates, targets) -> AttributionScores:
    """Negated whitened feature distance, entrywise."""
    return AttributionScores(-cost_matrix(candidates, targets).values, "neg-wfd")


def neg_wfd_ensemble(members, method: str = "cholesky", eps: float = 1e-5,
                     per_member_whitening: bool = False) -> AttributionScores:
    """Average the distance scorer over raw-feature runs.

    ``members`` is a list of ``(candidate_raw, target_raw)`` pairs, one
    per run.  With ``per_member_whitening`` each run fits its own
    whitening transform; the default fits a single transform on all
    runs pooled, so members differ only in their features.
    """
    pairs = list(members)
    if not pairs:
        raise DataError("no ensemble members given")
    runs = []
    if per_member_whitening:
        for c_raw, t_raw in pairs:
            tr = fit_whitening(np.concatenate([c_raw.data, t_raw.data]),
                               method=method, eps=eps)
            runs.append(neg_wfd_score(
                normalize_rows(apply_whitening(tr, c_raw.data), ids=c_raw.ids),
                normalize_rows(apply_whitening(tr, t_raw.data), ids=t_raw.ids)))
    else:
        pooled = np.concatenate([np.concatenate([c.data, t.data]) for c, t in pairs])
        tr = fit_whitening(pooled, method=method, eps=eps)
        for c_raw, t_raw in pairs:
            runs.append(neg_wfd_score(
                normalize_rows(apply_whitening(tr, c_raw.data), ids=c_raw.ids),
                normalize_rows(apply_whitening(tr, t_raw.data), ids=t_raw.ids)))
    return ensemble_scores(runs)


def ensemble_scores(score_runs) -> AttributionScores:
    """Entrywise mean across scoring runs of one method."""
    runs = list(score_runs)
    if not runs:
        raise DataError("no scoring runs given")
    shape = runs[0].matrix.shape
    method = runs[0].method
    for k, run in enumerate(runs):
        if run.matrix.shape != shape:
            raise ShapeMismatchError(f"run {k} has shape {run.matrix.shape}, expected {shape}")
        if run.method != method:
            raise ConfigError(f"run {k} method {run.method!r} differs from {method!r}")
    stack = np.stack([r.matrix for r in runs])
    return AttributionScores(stack.mean(axis=0), method, ensemble_size=len(runs))


def spearman(x, y) -> float:
    """Rank correlation with average ranks on ties."""
    xv = np.asarray(x, dtype=np.float64)
    yv = np.asarray(y, dtype=np.float64)
    if xv.shape != yv.shape or xv.ndim != 1 or xv.size < 2:
        raise DataError(f"need two equal-length vectors of size >= 2, got {xv.shape} and {yv.shape}")
    if not (np.all(np.isfinite(xv)) and np.all(np.isfinite(yv))):
        raise NumericalError("rank correlation inputs must be finite")
    rx = rankdata(xv)
    ry = rankdata(yv)
    sx = rx.std()
    sy = ry.std()
    if sx == 0.0 or sy == 0.0:
        which = "first" if sx == 0.0 else "second"
        raise NumericalError(f"{which} input is constant; rank correlation undefined")
    rx = rx - rx.mean()
    ry = ry - ry.mean()
    return float((rx * ry).mean() / (sx * sy))


def lds(scores: AttributionScores, archive: SubsetArchive, mode: str = "per-target") -> LdsResult:
    """Linear datamodeling score of a scorer against retrained models.

    For each archived mask the predicted output of target j is the sum
    of scores of the samples in the mask.  Per target, the result is
    the rank correlation between predictions and recorded outputs over
    all masks; the summary is the mean over targets.  ``mode="pooled"``
    instead ranks all (mask, target) pairs in one joint correlation.
    """
    if mode not in ("per-target", "pooled"):
        raise ConfigError(f"unknown lds mode {mode!r}")
    if scores.n_candidates != archive.n_candidates:
        raise ShapeMismatchError(
            f"scores cover {scores.n_candidates} candidates, archive {archive.n_candidates}"
        )
    if scores.n_targets != archive.n_targets:
        raise ShapeMismatchError(
            f"scores cover {scores.n_targets} targets, archive {archive.n_targets}"
        )
    # predictions[r, j] = sum of tau[i, j] over i in mask r
    preds = archive.masks.astype(np.float64) @ scores.matrix
    if mode == "pooled":
        rho = _spearman_ctx(preds.ravel(), archive.outputs.ravel(), "pooled values")
        return LdsResult((), rho, mode="pooled")
    per_target = []
    for j in range(scores.n_targets):
        per_target.append(_spearman_ctx(preds[:, j], archive.outputs[:, j], f"target {j}"))
    return LdsResult(tuple(per_target), float(np.mean(per_target)))


def _spearman_ctx(pred, out, label):
    try:
        return spearman(pred, out)
    except NumericalError as exc:
        raise NumericalError(f"{label}: {exc}") from exc


def save_archive(archive: SubsetArchive, directory, stem: str = "archive") -> Path:
    """Write masks and outputs as feature files linked by a manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    masks_path = directory / f"{stem}_masks.tfs"
    outputs_path = directory / f"{stem}_outputs.tfs"
    r = archive.n_models
    row_ids = tuple(f"m{i}" for i in range(r))
    write_features(FeatureMatrix(archive.masks.astype(np.float32), row_ids), masks_path)
    write_features(FeatureMatrix(archive.outputs, row_ids), outputs_path)
    manifest = directory / f"{stem}.archive.json"
    manifest.write_text(json.dumps(
        {"masks": masks_path.name, "outputs": outputs_path.name}, indent=2) + "\n")
    return manifest


def save_scores(scores: AttributionScores, directory, stem: str = "scores") -> Path:
    """Write a score matrix and its method manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    matrix_path = directory / f"{stem}.tfs"
    write_features(
        FeatureMatrix(scores.matrix, tuple(f"c{i}" for i in range(scores.n_candidates))),
        matrix_path,
    )
    manifest = directory / f"{stem}.scores.json"
    manifest.write_text(json.dumps(
        {"matrix": matrix_path.name, "method": scores.method,
         "ensemble_size": scores.ensemble_size}, indent=2) + "\n")
    return manifest


def load_scores(path) -> AttributionScores:
    """Load a score matrix from its manifest (or a directory holding one)."""
    path = Path(path)
    if path.is_dir():
        found = sorted(path.glob("*.scores.json"))
        if len(found) != 1:
            raise DataError(
                f"{path}: expected exactly one *.scores.json, found {len(found)}"
            )
        path = found[0]
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: cannot read scores manifest: {exc}") from exc
    if "matrix" not in doc:
        raise DataError(f"{path}: scores manifest missing 'matrix'")
    matrix = load_features(path.parent / doc["matrix"])
    return AttributionScores(matrix.data, doc.get("method", "tracin"),
                             ensemble_size=int(doc.get("ensemble_size", 1)))


def load_archive(path) -> SubsetArchive:
    """Load an archive from its manifest (or a directory holding one)."""
    path = Path(path)
    if path.is_dir():
        found = sorted(path.glob("*.archive.json"))
        if len(found) != 1:
            raise DataError(
                f"{path}: expected exactly one *.archive.json, found {len(found)}"
            )
        path = found[0]
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: cannot read archive manifest: {exc}") from exc
    for key in ("masks", "outputs"):
        if key not in doc:
            raise DataError(f"{path}: archive manifest missing {key!r}")
    masks = load_features(path.parent / doc["masks"])
    outputs = load_features(path.parent / doc["outputs"])
    vals = masks.data
    if not np.all((vals == 0.0) | (vals == 1.0)):
        raise DataError(f"{doc['masks']}: mask matrix must contain only 0/1 values")
    return SubsetArchive(vals != 0.0, outputs.data)
