"""Run the four tiny experiment configs and write a comparison of their reports.

    python3 scripts/run_matrix.py --out runs --seeds 0,1
"""

import argparse
import time
from pathlib import Path

from cmlid.evaluation import compare_runs
from cmlid.pipeline import load_experiment, run_experiment

ROOT = Path(__file__).resolve().parent.parent
MATRIX = ("baseline1-tiny", "baseline2-tiny", "model3-tiny", "model4-tiny")


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", default="runs")
    ap.add_argument("--seeds", default="0")
    ap.add_argument("--configs", nargs="*", default=[str(ROOT / "configs" / f"{m}.cfg") for m in MATRIX])
    args = ap.parse_args()
    seeds = [int(s) for s in args.seeds.split(",")]
    cfgs = [load_experiment(p) for p in args.configs]
    for cfg in cfgs:
        cfg.validate()
    for seed in seeds:
        named = []
        for cfg in cfgs:
            t0 = time.perf_counter()
            res = run_experiment(cfg, seed, args.out)
            print(f"{cfg.name:>18} seed {seed}: F1 {res.report.weighted.f1:.4f} "
                  f"({time.perf_counter() - t0:.1f}s)", flush=True)
            named.append((cfg.name, res.report))
        text = compare_runs(named)
        (Path(args.out) / f"compare-seed{seed}.md").write_text(text, encoding="utf-8")
        print(text)


if __name__ == "__main__":
    main()
