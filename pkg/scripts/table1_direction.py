"""Sim-only / real-only / real+sim / real+CycleGAN detectors on the toy world, per seed.

Prints one row per seed and whether the expected ordering holds:
sim < real, real+sim <= real+cyclegan + 2 points, real+cyclegan > real.
"""

import argparse
import json
import logging
from pathlib import Path

from lidar_nsm import experiments as ex


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("out")
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--ratio", type=float, default=2.0)
    ap.add_argument("-v", "--verbose", action="store_true")
    a = ap.parse_args()
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING)
    out = Path(a.out)
    rows = {}
    for seed in (int(s) for s in a.seeds.split(",")):
        corpus = ex.desk_corpus(out / f"seed{seed}" / "corpus", seed)
        m = ex.table1_direction(corpus, out / f"seed{seed}" / "t1", seed, a.ratio)
        ok = m["sim"] < m["real"] and m["real+sim"] <= m["real+cyclegan"] + 2.0 and m["real+cyclegan"] > m["real"]
        rows[seed] = {**m, "ordering_holds": ok}
        print(f"seed {seed}: " + "  ".join(f"{k} {v:.2f}" for k, v in m.items()) + f"  ordering {'ok' if ok else 'no'}")
    (out / "summary.json").write_text(json.dumps(rows, indent=1) + "\n")


if __name__ == "__main__":
    main()
