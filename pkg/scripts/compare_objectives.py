"""Train vq-vae and vq-wav2vec on the synthetic corpus and compare their codes.

    python3 scripts/compare_objectives.py [--objectives vqvae,vqwav2vec-kmeans] [--set key=value ...] [--out DIR]

Prints one row per model (the shared untrained baseline first) and writes
comparison.csv to --out.
"""

import argparse
from pathlib import Path

from vqspeech.config import parse_assignment, provenance_header
from vqspeech.experiments import COMPARE_RECIPE, compare_config, run_comparison
from vqspeech.trainer import write_table

COLUMNS = ("name", "abx_error", "purity", "perplexity", "final_task_loss", "seconds")


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--objectives", default="vqvae,vqwav2vec-kmeans")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    parser.add_argument("--out", default=".")
    args = parser.parse_args()
    overrides = dict(parse_assignment(o) for o in args.overrides)
    print("recipe:", ", ".join(f"{k}={v}" for k, v in {**COMPARE_RECIPE, **overrides}.items()))

    def log(row):
        print(f"{row.name:>18}  abx={row.abx_error:.4f}  purity={row.purity:.3f}  "
              f"perplexity={row.perplexity:.1f}  loss={row.final_task_loss:.4f}  {row.seconds:.0f}s", flush=True)

    rows = run_comparison(tuple(args.objectives.split(",")), overrides, log=log)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    header = provenance_header(compare_config("vqwav2vec-kmeans", overrides))
    write_table(out / "comparison.csv", [vars(r) for r in rows], header, COLUMNS)


if __name__ == "__main__":
    main()
