"""Method comparison over several seeds: transfer vs SwAV-pretrained fine-tuning.

    python scripts/run_table1.py --seeds 0 1 2 --out results/table1

Writes report.csv (median over seeds), per_seed.csv and every fine-tuning
loss curve. The default configuration takes roughly 5 minutes per seed on
one CPU core.
"""

import argparse
import logging
import time
from pathlib import Path

from woundfill.experiments import METHODS, ExperimentConfig, make_basis, median_table, report_csv, run_seed
from woundfill.training import write_curve_csv


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--out", default="results/table1")
    ap.add_argument("--pool-epochs", type=int, default=None)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    cfg = ExperimentConfig()
    if args.pool_epochs is not None:
        cfg = ExperimentConfig(pool_epochs=args.pool_epochs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    basis = make_basis(cfg)
    runs = []
    rows = ["seed,untrained,pooled," + ",".join(METHODS) + ",seconds"]
    for seed in args.seeds:
        t0 = time.perf_counter()
        run = run_seed(cfg, seed, METHODS, basis=basis)
        runs.append(run)
        rows.append(
            f"{seed},{run.untrained:.6f},{run.pooled:.6f},"
            + ",".join(f"{run.results[m].test_distance:.6f}" for m in METHODS)
            + f",{time.perf_counter() - t0:.1f}"
        )
        for m, res in run.results.items():
            res.finetune_curves.to_csv(out / f"finetune_{m}_seed{seed}.csv")
            if res.ssl_curve:
                write_curve_csv(out / f"ssl_{m}_seed{seed}.csv", res.ssl_curve)
        print(rows[-1], flush=True)
    (out / "per_seed.csv").write_text("\n".join(rows) + "\n")
    table = median_table(runs)
    (out / "report.csv").write_text(report_csv(table))
    print(report_csv(table), end="")
    print(f"untrained,{table['untrained']:.6f}")


if __name__ == "__main__":
    main()
