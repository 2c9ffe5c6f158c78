"""Regenerate the two-cluster fixture shipped with the repository.

Candidates are two tiled copies of the target cloud plus an equal count
of repeated far-away outliers, so half the pool is in-distribution and
the structure survives the fitted whitening transform.  Run from the
repository root:

    python3 fixtures/make_fixtures.py
"""

from pathlib import Path

from tarot.featurestore import FeatureMatrix, write_features
from tarot.synth import copies_plus_far_raw

HERE = Path(__file__).resolve().parent


def main() -> None:
    cand, targ = copies_plus_far_raw(20, 40, d=8, spread=0.05, seed=7, copies=2)
    write_features(cand, HERE / "candidates.tfs")
    write_features(targ, HERE / "targets.tfs")
    print(f"wrote {cand.n} candidates and {targ.n} targets under {HERE}")


if __name__ == "__main__":
    main()
