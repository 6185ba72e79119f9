"""Codebook-shape sweep over the four K x G settings at desk scale.

    python3 scripts/run_sweep.py [--updates N] [--workers W] [--out DIR]

Thin wrapper over ``vqspeech sweep``; the table lands in DIR/sweep.csv.
The comparison recipe (data-initialised codebook, per-utterance feature
normalisation, no commitment pull) is applied unless --plain is given; with
the plain defaults every shape collapses to a single code at this scale.
"""

import argparse
import sys

from vqspeech.cli import main as cli
from vqspeech.experiments import COMPARE_RECIPE, OBJECTIVE_OVERRIDES


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--updates", type=int, default=300)
    parser.add_argument("--workers", type=int, default=1)
    parser.add_argument("--objective", default="vqwav2vec-kmeans")
    parser.add_argument("--out", default="sweep")
    parser.add_argument("--plain", action="store_true", help="use the plain config defaults")
    args = parser.parse_args()
    settings = {} if args.plain else {**COMPARE_RECIPE, **OBJECTIVE_OVERRIDES[args.objective]}
    settings.update({"train.updates": args.updates, "train.objective": args.objective})
    argv = ["sweep", "--codebooks", "4x8,8x8,320x2,512x1", "--out", args.out, "--workers", str(args.workers)]
    for key, value in settings.items():
        argv += ["--set", f"{key}={value}"]
    return cli(argv)


if __name__ == "__main__":
    sys.exit(main())
