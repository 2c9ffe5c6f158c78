"""Whitened feature distance pipeline.

Stages: optional random projection, centering, covariance whitening
(Cholesky or ZCA), row normalization.  After these stages the distance
between two samples is the plain Euclidean distance between their unit
vectors, which for unit vectors reduces to sqrt(2 - 2*cos).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, DataError, NumericalError, ShapeMismatchError
from .featurestore import FeatureMatrix, default_ids

PROJECTION_FAMILIES = ("gaussian", "rademacher")
WHITENING_METHODS = ("cholesky", "zca")

# Features wider than this get projected down to it unless told otherwise.
DEFAULT_PROJECTED_DIM = 4096


@dataclass(frozen=True)
class ProjectionSpec:
    """Deterministic random projection: same spec, same matrix, any platform."""

    input_dim: int
    output_dim: int
    seed: int
    family: str = "gaussian"

    def __post_init__(self):
        if self.family not in PROJECTION_FAMILIES:
            raise ConfigError(f"unknown projection family {self.family!r}")
        if not 1 <= self.output_dim <= self.input_dim:
            raise ConfigError(
                f"need 1 <= output_dim <= input_dim, got {self.output_dim} > {self.input_dim}"
            )


def make_projection(spec: ProjectionSpec) -> np.ndarray:
    """Build the out_dim x in_dim projection matrix for a spec.

    Entries come from a counter-based generator keyed on the seed, so the
    matrix is bit-identical across platforms and worker counts.  Gaussian
    entries are N(0, 1/d); rademacher entries are +-1/sqrt(d).
    """
    d, D = spec.output_dim, spec.input_dim
    rng = np.random.Generator(np.random.Philox(key=np.uint64(spec.seed)))
    if spec.family == "gaussian":
        mat = rng.standard_normal((d, D)) / np.sqrt(d)
    else:
        mat = np.where(rng.random((d, D)) < 0.5, -1.0, 1.0) / np.sqrt(d)
    return mat


def project(raw: FeatureMatrix, proj: np.ndarray) -> FeatureMatrix:
    """Apply a projection matrix to every row: row_i -> proj @ row_i."""
    proj = np.asarray(proj, dtype=np.float64)
    if proj.ndim != 2 or proj.shape[1] != raw.d:
        raise ShapeMismatchError(
            f"projection is {proj.shape}, features have {raw.d} columns"
        )
    out = raw.data.astype(np.float64, copy=False) @ proj.T
    return FeatureMatrix._wrap_owned(np.ascontiguousarray(out), raw.ids)


@dataclass(frozen=True)
class WhiteningTransform:
    """Affine map x -> W (x - mean) that decorrelates the fit population."""

    mean: np.ndarray
    whitener: np.ndarray
    method: str
    eps: float
    fit_count: int

    def __post_init__(self):
        mean = np.ascontiguousarray(self.mean, dtype=np.float64)
        w = np.ascontiguousarray(self.whitener, dtype=np.float64)
        if mean.ndim != 1 or w.shape != (mean.size, mean.size):
            raise ShapeMismatchError(f"mean {mean.shape} and whitener {w.shape} disagree")
        if not (np.isfinite(mean).all() and np.isfinite(w).all()):
            raise NumericalError("whitening transform contains non-finite values")
        mean.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "whitener", w)

    @property
    def dim(self) -> int:
        return self.mean.size

    @property
    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(self.method.encode())
        h.update(np.float64(self.eps).tobytes())
        h.update(self.mean.tobytes())
        h.update(self.whitener.tobytes())
        return h.hexdigest()[:16]

    def to_json(self) -> str:
        return json.dumps(
            {
                "method": self.method,
                "eps": self.eps,
                "fit_count": self.fit_count,
                "mean": self.mean.tolist(),
                "whitener": self.whitener.reshape(-1).tolist(),
                "fingerprint": self.fingerprint,
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "WhiteningTransform":
        doc = json.loads(text)
        mean = np.asarray(doc["mean"], dtype=np.float64)
        d = mean.size
        w = np.asarray(doc["whitener"], dtype=np.float64).reshape(d, d)
        t = cls(mean, w, doc["method"], float(doc["eps"]), int(doc["fit_count"]))
        stored = doc.get("fingerprint")
        if stored is not None and stored != t.fingerprint:
            raise DataError("whitening transform fingerprint does not match its payload")
        return t

    def save(self, path: Path | str) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: Path | str) -> "WhiteningTransform":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


@dataclass(frozen=True)
class WhitenedFeatures:
    """Unit-norm feature rows ready for distance evaluation."""

    data: np.ndarray
    ids: tuple[str, ...]
    transform_fingerprint: str = ""
    norms: np.ndarray | None = None  # pre-normalization row norms, for diagnostics

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float64)
        lens = np.linalg.norm(arr, axis=1)
        if not np.allclose(lens, 1.0, rtol=0, atol=1e-9):
            worst = int(np.argmax(np.abs(lens - 1.0)))
            raise NumericalError(
                f"row {worst} has norm {lens[worst]!r}, expected 1 within 1e-9"
            )
        if len(self.ids) != arr.shape[0]:
            raise ShapeMismatchError(f"{len(self.ids)} ids for {arr.shape[0]} rows")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "ids", tuple(str(i) for i in self.ids))

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def d(self) -> int:
        return self.data.shape[1]


def fit_whitening(
    feats: FeatureMatrix | np.ndarray,
    method: str = "cholesky",
    eps: float = 1e-5,
) -> WhiteningTransform:
    """Fit a whitening transform on the rows of ``feats``.

    Covariance is the population estimate (divide by N).  ``eps`` scales a
    ridge of eps * trace(cov)/d added to the diagonal before decomposition,
    which keeps rank-deficient fits (N <= d, collinear rows) factorizable.
    """
    x = feats.data if isinstance(feats, FeatureMatrix) else np.asarray(feats)
    x = x.astype(np.float64, copy=False)
    if x.ndim != 2:
        raise DataError(f"fit data must be 2-D, got shape {x.shape}")
    n, d = x.shape
    if n < 2:
        raise DataError(f"whitening needs at least 2 rows, got {n}")
    if method not in WHITENING_METHODS:
        raise ConfigError(f"unknown whitening method {method!r}")
    if eps < 0:
        raise ConfigError(f"eps must be non-negative, got {eps}")

    mean = x.mean(axis=0)
    centered = x - mean
    cov = (centered.T @ centered) / n
    ridge = eps * (np.trace(cov) / d)
    cov_reg = cov + ridge * np.eye(d)

    if method == "cholesky":
        try:
            chol = np.linalg.cholesky(cov_reg)
        except np.linalg.LinAlgError:
            lo = float(np.linalg.eigvalsh(cov_reg)[0])
            raise NumericalError(
                f"covariance is not positive definite after regularization "
                f"(smallest eigenvalue {lo:.3e}); raise eps"
            ) from None
        w = np.linalg.solve(chol, np.eye(d))
    else:
        evals, evecs = np.linalg.eigh(cov_reg)
        lo = float(evals[0])
        if lo <= 0:
            raise NumericalError(
                f"covariance is not positive definite after regularization "
                f"(smallest eigenvalue {lo:.3e}); raise eps"
            )
        w = (evecs * (1.0 / np.sqrt(evals))) @ evecs.T
    return WhiteningTransform(mean=mean, whitener=w, method=method, eps=eps, fit_count=n)


def apply_whitening(t: WhiteningTransform, feats: FeatureMatrix | np.ndarray) -> np.ndarray:
    """Whiten rows: row_i -> W (row_i - mean)."""
    x = feats.data if isinstance(feats, FeatureMatrix) else np.asarray(feats)
    x = x.astype(np.float64, copy=False)
    if x.ndim != 2 or x.shape[1] != t.dim:
        raise ShapeMismatchError(f"features have shape {x.shape}, transform is {t.dim}-D")
    return (x - t.mean) @ t.whitener.T


def normalize_rows(
    m: np.ndarray,
    ids: Sequence[str] | None = None,
    transform_fingerprint: str = "",
) -> WhitenedFeatures:
    """Scale each row to unit L2 norm.  A zero row is a hard error."""
    x = np.ascontiguousarray(m, dtype=np.float64)
    if x.ndim != 2:
        raise DataError(f"expected a 2-D matrix, got shape {x.shape}")
    if ids is None:
        ids = default_ids(x.shape[0])
    norms = np.linalg.norm(x, axis=1)
    if (norms == 0).any():
        bad = int(np.argmax(norms == 0))
        raise NumericalError(
            f"sample {ids[bad]!r} has a zero whitened feature vector; "
            "it carries no direction and cannot be normalized"
        )
    out = x / norms[:, None]
    norms.setflags(write=False)
    return WhitenedFeatures(out, tuple(ids), transform_fingerprint, norms)


def wfd(a: np.ndarray, b: np.ndarray) -> float:
    """Distance between two unit vectors: sqrt(2 - 2*<a, b>), in [0, 2]."""
    dot = float(np.dot(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)))
    return float(np.sqrt(max(2.0 - 2.0 * dot, 0.0)))


def default_projection_spec(input_dim: int, seed: int, family: str = "gaussian") -> ProjectionSpec | None:
    """Projection used when the caller gives none: squash anything wider than 4096."""
    if input_dim <= DEFAULT_PROJECTED_DIM:
        return None
    return ProjectionSpec(input_dim, DEFAULT_PROJECTED_DIM, seed, family)


def build_metric(
    candidate: FeatureMatrix,
    target: FeatureMatrix,
    spec: ProjectionSpec | None = None,
    method: str = "cholesky",
    eps: float = 1e-5,
) -> tuple[WhitenedFeatures, WhitenedFeatures, WhiteningTransform]:
    """Run the full pipeline over a candidate and a target set.

    Whitening statistics are fitted on the concatenation of both sets so
    candidates and targets land in one metric space; both are then
    transformed and normalized with the same fitted transform.
    """
    if candidate.d != target.d:
        raise ShapeMismatchError(
            f"candidate features have {candidate.d} columns, target has {target.d}"
        )
    if spec is not None:
        if spec.input_dim != candidate.d:
            raise ShapeMismatchError(
                f"projection expects {spec.input_dim} columns, features have {candidate.d}"
            )
        proj = make_projection(spec)
        candidate = project(candidate, proj)
        target = project(target, proj)
    joint = np.concatenate(
        [candidate.data.astype(np.float64, copy=False), target.data.astype(np.float64, copy=False)]
    )
    transform = fit_whitening(joint, method=method, eps=eps)
    fp = transform.fingerprint
    cand_w = normalize_rows(apply_whitening(transform, candidate), candidate.ids, fp)
    targ_w = normalize_rows(apply_whitening(transform, target), target.ids, fp)
    return cand_w, targ_w, transform
