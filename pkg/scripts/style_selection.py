"""Rank a real-drawn style against a blank style with a real-only probe detector."""

import argparse
import logging
from pathlib import Path

from lidar_nsm import experiments as ex


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("out")
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--probe", help="real-only detector checkpoint (trained here when omitted)")
    ap.add_argument("-v", "--verbose", action="store_true")
    a = ap.parse_args()
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING)
    out = Path(a.out)
    for seed in (int(s) for s in a.seeds.split(",")):
        corpus = ex.desk_corpus(out / f"seed{seed}" / "corpus", seed)
        r = ex.style_selection(corpus, out / f"seed{seed}" / "style", seed, probe_ckpt=a.probe)
        maps = ", ".join(f"{m:.3f}" for m in r.map_by_style)
        print(f"seed {seed}: ranking {r.order} (0 = real style, 1 = blank); probe mAP {maps}")


if __name__ == "__main__":
    main()
