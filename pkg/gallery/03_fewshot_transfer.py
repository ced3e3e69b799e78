"""Compare the four few-shot regimes on one synthetic source/target pair.

Everything goes through a record store, so re-running skips finished cells.
"""

import argparse
from pathlib import Path

from oietd.experiment import RecordStore, aggregate, run_matrix, write_report
from oietd.regimes import RegimeConfig
from oietd.synth import SynthConfig, generate_pair


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--store", type=Path, default=Path("runs/gallery"))
    parser.add_argument("--shots", type=int, nargs="+", default=[0, 10, 50])
    parser.add_argument("--design", default="vanilla")
    args = parser.parse_args()

    source, target = generate_pair(SynthConfig(n_train=300, n_valid=60, n_test=120, seed=0))
    base = RegimeConfig(epochs=5, lr=3e-3)
    records = run_matrix(source, target, RecordStore(args.store), base, designs=[args.design],
                         shot_levels=args.shots, seeds=[0], samples=2)
    cells = aggregate(records, seeds=1, samples=2)
    for cell in cells:
        print(f"{cell.regime:>20} {cell.shots:>4} shots  F1 {cell.mean:.3f}")
    write_report(cells, args.store / "report.md", "md")
    print("report written to", args.store / "report.md")


if __name__ == "__main__":
    main()
