"""Command-line front end.

Wires configuration files, dataset manifests and the pipeline stages
into reproducible batch runs.  Machine-readable results go to files
under the output directory; progress and per-stage timing go to
standard error.  Every output file embeds the run fingerprint, a stable
hash of the resolved configuration, so downstream stages can refuse
intermediates produced under a different setup.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .attribution import lds, load_archive, load_scores
from .errors import ConfigError, DataError, NumericalError, TarotError
from .featurestore import load_dataset, load_manifest
from .metric import ProjectionSpec, build_metric, default_projection_spec
from .ot import DEFAULT_REG, MassVector, cost_matrix, ot_distance, solve
from .selection import SelectionResult, select_fixed, select_otm, selection_ratio
from .weighting import assign_weights, default_repetition

# report objective line is skipped above this many cost entries
OBJECTIVE_REPORT_LIMIT = 25_000_000

_DEF_WHITENING = {"method": "cholesky", "eps": 1e-5}
_DEF_SOLVER = {"name": "sinkhorn", "reg": DEFAULT_REG, "tol": 1e-6, "max_iter": 10_000}
_DEF_SELECTION = {"mode": "otm", "k_folds": 10, "split_mode": "algorithm", "seed": 0}


@dataclass
class RunConfig:
    """Resolved run configuration; flags already folded in."""

    candidates: str | None
    targets: str | None
    projection: dict | None
    whitening: dict
    solver: dict
    selection: dict
    weighting: dict | None
    out: str
    threads: int

    def fingerprint(self) -> str:
        # out and threads are excluded: results must not depend on
        # where they are written or how many workers computed them
        doc = {
            "candidates": self.candidates,
            "targets": self.targets,
            "projection": self.projection,
            "whitening": self.whitening,
            "solver": self.solver,
            "selection": self.selection,
            "weighting": self.weighting,
        }
        blob = json.dumps(doc, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]

    def pipeline_fingerprint(self) -> str:
        """Hash of the fields that determine WHICH samples get selected.

        Weighting does not change the selection content, so the weights
        command checks intermediates against this narrower hash; adding
        a weighting section later must not invalidate a selection run.
        """
        doc = {
            "candidates": self.candidates,
            "targets": self.targets,
            "projection": self.projection,
            "whitening": self.whitening,
            "solver": self.solver,
            "selection": self.selection,
        }
        blob = json.dumps(doc, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def load_config(args) -> RunConfig:
    doc = {}
    if args.config is not None:
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file does not exist: {path}")
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
    known = {"candidates", "targets", "projection", "whitening", "solver",
             "selection", "weighting", "out"}
    extra = set(doc) - known
    if extra:
        raise ConfigError(f"unknown config keys: {sorted(extra)}")

    whitening = {**_DEF_WHITENING, **(doc.get("whitening") or {})}
    solver = {**_DEF_SOLVER, **(doc.get("solver") or {})}
    selection = {**_DEF_SELECTION, **(doc.get("selection") or {})}
    weighting = doc.get("weighting")
    projection = doc.get("projection")

    # flags win over the file
    if getattr(args, "solver", None):
        solver["name"] = args.solver
    if getattr(args, "reg", None) is not None:
        solver["reg"] = args.reg
    if getattr(args, "mode", None):
        selection["mode"] = args.mode
    if getattr(args, "size", None) is not None:
        selection["size"] = args.size
    if getattr(args, "k_folds", None) is not None:
        selection["k_folds"] = args.k_folds
    if getattr(args, "split_mode", None):
        selection["split_mode"] = args.split_mode
    if args.seed is not None:
        if not (0 <= args.seed < 2**64):
            raise ConfigError(f"--seed must fit in 64 bits, got {args.seed}")
        selection["seed"] = args.seed

    out = args.out or doc.get("out") or "tarot-out"
    threads = args.threads if args.threads is not None else (os.cpu_count() or 1)
    if threads < 1:
        raise ConfigError(f"--threads must be >= 1, got {threads}")

    if solver["name"] not in ("sinkhorn", "exact"):
        raise ConfigError(f"unknown solver {solver['name']!r}; expected sinkhorn or exact")
    if selection["mode"] not in ("fixed", "otm"):
        raise ConfigError(f"unknown selection mode {selection['mode']!r}; expected fixed or otm")
    if selection["mode"] == "fixed" and "size" not in selection:
        raise ConfigError("fixed selection needs a size (--size or selection.size)")
    if weighting is not None:
        mode = weighting.get("mode")
        if mode not in ("budget", "match-full", "fraction"):
            raise ConfigError(
                f"unknown weighting mode {mode!r}; expected budget, match-full or fraction"
            )
        if mode == "budget" and "R" not in weighting:
            raise ConfigError("weighting mode 'budget' needs an R value")
        if mode == "fraction" and "p" not in weighting:
            raise ConfigError("weighting mode 'fraction' needs a p value")

    for label, ref in (("candidates", doc.get("candidates")), ("targets", doc.get("targets"))):
        if ref is not None and not Path(ref).exists():
            raise ConfigError(f"{label} manifest does not exist: {ref}")

    return RunConfig(
        candidates=doc.get("candidates"),
        targets=doc.get("targets"),
        projection=projection,
        whitening=whitening,
        solver=solver,
        selection=selection,
        weighting=weighting,
        out=out,
        threads=threads,
    )


class _Stage:
    """Times a pipeline stage and tags its errors with the stage name."""

    def __init__(self, name: str):
        self.name = name

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        dt = time.perf_counter() - self.t0
        if exc is None:
            print(f"[{self.name}] {dt:.2f}s", file=sys.stderr)
            return False
        if isinstance(exc, TarotError):
            wrapper = {2: ConfigError, 3: DataError, 4: NumericalError}.get(
                exc.exit_code, TarotError
            )
            raise wrapper(f"{self.name}: {exc}") from exc
        return False


def _require_manifests(cfg: RunConfig):
    if cfg.candidates is None or cfg.targets is None:
        raise ConfigError("config must name both candidate and target manifests")


def _load_pair(cfg: RunConfig):
    cand = load_dataset(load_manifest(cfg.candidates))
    targ = load_dataset(load_manifest(cfg.targets))
    return cand, targ


def _metric_pair(cfg: RunConfig, cand_raw, targ_raw):
    if cfg.projection:
        p = cfg.projection
        spec = ProjectionSpec(
            cand_raw.d, int(p["dim"]), int(p.get("seed", 0)), p.get("family", "gaussian")
        )
    else:
        spec = default_projection_spec(cand_raw.d, seed=0)
    return build_metric(
        cand_raw, targ_raw, spec,
        method=cfg.whitening["method"], eps=float(cfg.whitening["eps"]),
    )


def _solver_kwargs(cfg: RunConfig) -> dict:
    if cfg.solver["name"] == "exact":
        return {}
    return {
        "tol": float(cfg.solver["tol"]),
        "max_iter": int(cfg.solver["max_iter"]),
        "threads": cfg.threads,
    }


def _write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _selected_features(cand_w, result: SelectionResult):
    from .metric import WhitenedFeatures

    idx = list(result.selected)
    return WhitenedFeatures(cand_w.data[idx], result.ids, cand_w.transform_fingerprint)


def _selection_potentials(cfg: RunConfig, cand_w, targ_w, result: SelectionResult):
    """Dual potentials of the selected subset against the full target set."""
    sub = _selected_features(cand_w, result)
    c = cost_matrix(sub, targ_w)
    plan = solve(
        c, MassVector.uniform(sub.n), MassVector.uniform(targ_w.n),
        cfg.solver["name"], reg=float(cfg.solver["reg"]),
        **({"anneal": True, **_solver_kwargs(cfg)} if cfg.solver["name"] == "sinkhorn" else {}),
    )
    return np.asarray(plan.dual_row, dtype=np.float64)


def _resolve_budget(cfg: RunConfig, n: int, m: int, selected: int) -> int:
    w = cfg.weighting
    mode = w.get("mode")
    if mode == "budget":
        return int(w["R"])
    if mode == "match-full":
        return max(selected, default_repetition(n, m, mode="full-match"))
    return max(selected, default_repetition(n, m, mode="fraction", p=float(w["p"])))


def cmd_select(cfg: RunConfig) -> int:
    _require_manifests(cfg)
    fp = cfg.fingerprint()
    with _Stage("load"):
        cand_raw, targ_raw = _load_pair(cfg)
    with _Stage("metric"):
        cand_w, targ_w, transform = _metric_pair(cfg, cand_raw, targ_raw)
    sel = cfg.selection
    with _Stage("select"):
        if sel["mode"] == "fixed":
            result = select_fixed(
                cand_w, targ_w, int(sel["size"]),
                solver=cfg.solver["name"], reg=float(cfg.solver["reg"]),
                threads=cfg.threads,
            )
        else:
            result = select_otm(
                cand_w, targ_w,
                k_folds=int(sel.get("k_folds", 10)), seed=int(sel.get("seed", 0)),
                solver=cfg.solver["name"], reg=float(cfg.solver["reg"]),
                split_mode=sel.get("split_mode", "algorithm"), threads=cfg.threads,
            )
    if cfg.weighting is not None:
        with _Stage("weights"):
            pots = _selection_potentials(cfg, cand_w, targ_w, result)
            budget = _resolve_budget(cfg, cand_w.n, targ_w.n, result.size)
            wa = assign_weights(pots, budget, ids=result.ids)
            result = result.with_weights(wa.weights)

    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    with _Stage("write"):
        doc = json.loads(result.to_json())
        doc["run_fingerprint"] = fp
        doc["pipeline_fingerprint"] = cfg.pipeline_fingerprint()
        _write_json(out / "selection.json", doc)
        result.write_csv(out / "selection.csv")
        report = _selection_report(cfg, fp, cand_w, targ_w, result)
        (out / "report.txt").write_text(report, encoding="utf-8")
    return 0


def _selection_report(cfg, fp, cand_w, targ_w, result) -> str:
    lines = []
    lines.append("selection report")
    lines.append("================")
    lines.append(f"run fingerprint: {fp}")
    lines.append(f"candidates: {cfg.candidates} (N={cand_w.n}, d={cand_w.d})")
    lines.append(f"targets: {cfg.targets} (M={targ_w.n})")
    lines.append(f"whitening: {cfg.whitening['method']} (eps={cfg.whitening['eps']!r})")
    lines.append(f"projection: {'none' if not cfg.projection else cfg.projection}")
    if cfg.solver["name"] == "exact":
        lines.append("solver: exact")
    else:
        lines.append(f"solver: sinkhorn (reg={cfg.solver['reg']!r})")
    sel = cfg.selection
    if sel["mode"] == "fixed":
        lines.append(f"mode: fixed (size={sel['size']})")
    else:
        lines.append(
            f"mode: otm (k_folds={sel.get('k_folds', 10)}, "
            f"split_mode={sel.get('split_mode', 'algorithm')}, seed={sel.get('seed', 0)})"
        )
    ratio = selection_ratio(result, cand_w.n)
    lines.append(f"selected: {result.size} of {cand_w.n} (ratio {ratio!r})")
    if result.weights is not None:
        lines.append(
            f"weights: R={sum(result.weights)} over {result.size} samples "
            f"(min={min(result.weights)}, max={max(result.weights)})"
        )
    if cand_w.n * targ_w.n <= OBJECTIVE_REPORT_LIMIT:
        kw = _solver_kwargs(cfg)
        if cfg.solver["name"] == "sinkhorn":
            kw["anneal"] = True
        d_sel = ot_distance(
            _selected_features(cand_w, result), targ_w,
            solver=cfg.solver["name"], reg=float(cfg.solver["reg"]), **kw,
        )
        d_pool = ot_distance(
            cand_w, targ_w,
            solver=cfg.solver["name"], reg=float(cfg.solver["reg"]), **kw,
        )
        verdict = "improved" if d_sel <= d_pool else "worse"
        lines.append(f"objective: selected {d_sel!r} vs pool {d_pool!r} ({verdict})")
    else:
        lines.append("objective: skipped (pool too large)")
    lines.append("transport distance trace:")
    for entry in result.trace:
        where = f"fold {entry['fold']} " if "fold" in entry else ""
        dist = entry.get("ot_distance")
        tail = "" if dist is None else f" distance {dist!r}"
        lines.append(f"  {where}k {entry['k']}: size {entry['size']}{tail}")
    return "\n".join(lines) + "\n"


def cmd_ot_dist(cfg: RunConfig) -> int:
    _require_manifests(cfg)
    fp = cfg.fingerprint()
    with _Stage("load"):
        cand_raw, targ_raw = _load_pair(cfg)
    with _Stage("metric"):
        cand_w, targ_w, _ = _metric_pair(cfg, cand_raw, targ_raw)
    with _Stage("solve"):
        c = cost_matrix(cand_w, targ_w)
        kwargs = _solver_kwargs(cfg)
        if cfg.solver["name"] == "sinkhorn":
            kwargs["anneal"] = True
        plan = solve(
            c, MassVector.uniform(cand_w.n), MassVector.uniform(targ_w.n),
            cfg.solver["name"], reg=float(cfg.solver["reg"]), **kwargs,
        )
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    doc = {
        "distance": plan.cost,
        "solver": cfg.solver["name"],
        "reg": float(cfg.solver["reg"]) if cfg.solver["name"] == "sinkhorn" else None,
        "iterations": plan.iterations,
        "converged": plan.converged,
        "marginal_violation": plan.marginal_violation,
        "run_fingerprint": fp,
    }
    _write_json(out / "ot_distance.json", doc)
    return 0


def cmd_whiten(cfg: RunConfig) -> int:
    _require_manifests(cfg)
    fp = cfg.fingerprint()
    with _Stage("load"):
        cand_raw, targ_raw = _load_pair(cfg)
    with _Stage("fit"):
        _, _, transform = _metric_pair(cfg, cand_raw, targ_raw)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    doc = json.loads(transform.to_json())
    doc["run_fingerprint"] = fp
    _write_json(out / "whitening.json", doc)
    return 0


def cmd_lds(cfg: RunConfig, scores_path: str, archive_path: str, pooled: bool) -> int:
    fp = cfg.fingerprint()
    with _Stage("load"):
        scores = load_scores(Path(scores_path))
        archive = load_archive(Path(archive_path))
    with _Stage("lds"):
        result = lds(scores, archive, mode="pooled" if pooled else "per-target")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    doc = {
        "mode": result.mode,
        "per_target": list(result.per_target),
        "mean": result.mean,
        "method": scores.method,
        "ensemble_size": scores.ensemble_size,
        "run_fingerprint": fp,
    }
    _write_json(out / "lds.json", doc)
    return 0


def cmd_weights(cfg: RunConfig, selection_path: str) -> int:
    _require_manifests(cfg)
    if cfg.weighting is None:
        raise ConfigError(
            "no weighting requested: pass --R, --match-full or --fraction, "
            "or add a weighting section to the config"
        )
    fp = cfg.fingerprint()
    with _Stage("load"):
        sel_file = Path(selection_path)
        if not sel_file.exists():
            raise ConfigError(f"selection file does not exist: {sel_file}")
        try:
            sel_doc = json.loads(sel_file.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise DataError(f"{sel_file}: invalid JSON: {exc}") from exc
        cand_raw, targ_raw = _load_pair(cfg)
    want = cfg.pipeline_fingerprint()
    stored = sel_doc.get("pipeline_fingerprint", sel_doc.get("run_fingerprint"))
    if stored != want:
        raise ConfigError(
            f"selection file {sel_file} was produced under pipeline fingerprint "
            f"{stored!r}, current configuration is {want}; refusing mismatched intermediates"
        )
    with _Stage("metric"):
        cand_w, targ_w, _ = _metric_pair(cfg, cand_raw, targ_raw)
    with _Stage("weights"):
        by_id = {i: k for k, i in enumerate(cand_w.ids)}
        missing = [i for i in sel_doc.get("selected", []) if i not in by_id]
        if missing:
            raise DataError(
                f"{len(missing)} selected ids are absent from the candidate set, "
                f"first: {missing[0]!r}"
            )
        idx = tuple(by_id[i] for i in sel_doc["selected"])
        result = SelectionResult(idx, tuple(sel_doc["selected"]), cand_w.n, ())
        pots = _selection_potentials(cfg, cand_w, targ_w, result)
        budget = _resolve_budget(cfg, cand_w.n, targ_w.n, result.size)
        wa = assign_weights(pots, budget, ids=result.ids)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    doc = {
        "ids": list(wa.ids),
        "weights": list(wa.weights),
        "repetition": wa.repetition,
        "potentials": list(wa.potentials),
        "run_fingerprint": fp,
    }
    _write_json(out / "weights.json", doc)
    result.with_weights(wa.weights).write_csv(out / "weights.csv")
    return 0


def _add_shared(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="path to a JSON run configuration")
    p.add_argument("--out", help="output directory (default: config out or ./tarot-out)")
    p.add_argument("--threads", type=int, help="worker threads (default: all cores)")
    p.add_argument("--seed", type=int, help="selection seed override")


def _add_selection_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--mode", choices=("fixed", "otm"), help="selection mode")
    p.add_argument("--size", type=int, help="subset size for fixed mode")
    p.add_argument("--k-folds", dest="k_folds", type=int, help="target folds for otm (default 10)")
    p.add_argument(
        "--split-mode", dest="split_mode", choices=("algorithm", "prose"),
        help="otm fold roles (default algorithm)",
    )
    p.add_argument("--solver", choices=("sinkhorn", "exact"), help="transport solver")
    p.add_argument("--reg", type=float, help="entropic regularization strength")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tarot",
        description="Targeted data selection by optimal transport over whitened features.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_select = sub.add_parser("select", help="select a training subset for the targets")
    _add_shared(p_select)
    _add_selection_flags(p_select)

    p_ot = sub.add_parser("ot-dist", help="transport distance between two datasets")
    _add_shared(p_ot)
    p_ot.add_argument("--solver", choices=("sinkhorn", "exact"))
    p_ot.add_argument("--reg", type=float)

    p_whiten = sub.add_parser("whiten", help="fit and save the whitening transform")
    _add_shared(p_whiten)

    p_lds = sub.add_parser("lds", help="score an attribution matrix against retrained models")
    _add_shared(p_lds)
    p_lds.add_argument("--scores", required=True, help="scores manifest or its directory")
    p_lds.add_argument("--archive", required=True, help="archive manifest or its directory")
    p_lds.add_argument("--pooled", action="store_true",
                       help="one joint correlation instead of per-target means")

    p_weights = sub.add_parser("weights", help="integer repetition weights for a selection")
    _add_shared(p_weights)
    p_weights.add_argument("--selection", required=True, help="selection.json from tarot select")
    group = p_weights.add_mutually_exclusive_group()
    group.add_argument("--R", dest="budget", type=int, help="total repetition budget")
    group.add_argument("--match-full", action="store_true",
                       help="budget = candidates + targets")
    group.add_argument("--fraction", type=float, help="budget = ceil(p * candidates)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "weights":
            # weight flags act like a config weighting section
            cfg = load_config(args)
            if args.budget is not None:
                cfg.weighting = {"mode": "budget", "R": args.budget}
            elif args.match_full:
                cfg.weighting = {"mode": "match-full"}
            elif args.fraction is not None:
                cfg.weighting = {"mode": "fraction", "p": args.fraction}
            return cmd_weights(cfg, args.selection)
        cfg = load_config(args)
        if args.command == "select":
            return cmd_select(cfg)
        if args.command == "ot-dist":
            return cmd_ot_dist(cfg)
        if args.command == "whiten":
            return cmd_whiten(cfg)
        if args.command == "lds":
            return cmd_lds(cfg, args.scores, args.archive, args.pooled)
        raise ConfigError(f"unknown command {args.command!r}")
    except TarotError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
