"""Run the desk-scale rotation-regime matrix and write CSV results.

Writes ``matrix_long.csv`` (one row per cell), ``matrix_table.csv`` (seed
means, one row per variant), ``loss_curves.csv`` (N/N training losses) and
``fingerprint.txt`` identifying the configuration.

    python scripts/run_matrix.py --out results/matrix
"""
from __future__ import annotations

import argparse
import logging
import time
from pathlib import Path

from spenet.harness.data import DEFAULT_CLASSES
from spenet.harness.export import export_loss_curves
from spenet.harness.matrix import REGIMES, run_regime_matrix
from spenet.harness.presets import desk_matrix_setup
from spenet.spe import VARIANTS


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="results/matrix")
    ap.add_argument("--variants", default=",".join(VARIANTS))
    ap.add_argument("--regimes", default=",".join(REGIMES))
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--epochs", type=int, default=None)
    ap.add_argument("--per-class", type=int, default=None)
    ap.add_argument("--classes", default=",".join(DEFAULT_CLASSES))
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    setup = desk_matrix_setup(
        variants=tuple(args.variants.split(",")), regimes=tuple(args.regimes.split(",")),
        seeds=tuple(int(s) for s in args.seeds.split(",")), epochs=args.epochs,
        per_class=args.per_class, classes=tuple(args.classes.split(",")))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()

    def progress(v, r, s, acc):
        logging.info("cell %s %s seed %d acc %.4f (%.0f s)", v, r, s, acc, time.perf_counter() - t0)

    m = run_regime_matrix(setup.net, setup.train, setup.dataset(), setup.variants,
                          setup.regimes, setup.seeds, on_cell=progress)
    m.write_long(out / "matrix_long.csv")
    m.write_table(out / "matrix_table.csv")
    nn = {f"{v}/seed{s}": h for (v, r, s), h in m.histories.items() if r == "nn"}
    if nn:
        export_loss_curves(nn, out / "loss_curves.csv")
    (out / "fingerprint.txt").write_text(setup.fingerprint() + "\n")
    logging.info("done in %.0f s", time.perf_counter() - t0)
    print((out / "matrix_table.csv").read_text(), end="")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
