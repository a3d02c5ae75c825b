"""Write the desk toy-world corpus (600 sim / 200 real / 100 test frames) to a directory."""

import argparse

from lidar_nsm import experiments as ex


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("out")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--n-sim", type=int, default=600)
    ap.add_argument("--n-real", type=int, default=200)
    ap.add_argument("--n-test", type=int, default=100)
    a = ap.parse_args()
    c = ex.desk_corpus(a.out, a.seed, a.n_sim, a.n_real, a.n_test)
    print(f"{len(c.sim)} sim, {len(c.real)} real, {len(c.test)} test frames in {c.root}")


if __name__ == "__main__":
    main()
