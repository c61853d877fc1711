"""ASA over a (k, m) grid on freshly generated phantoms, without touching disk.

    python scripts/slic_grid.py --cases 5 --k 500,1000,1500,2500 --m 0.25,0.5,1
"""
import argparse

from tumorgraph.phantom import PhantomSpec, case_seeds, generate_phantom
from tumorgraph.supervoxel import slic_grid_search
from tumorgraph.volume import compute_dataset_stats, crop_to_brain_bbox, rescale_by_percentile, standardize


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--cases", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--k", default="500,1000,1500,2500")
    p.add_argument("--m", default="0.25,0.5,1.0")
    args = p.parse_args()
    staged = []
    for s in case_seeds(args.seed, args.cases):
        v, lab = crop_to_brain_bbox(*generate_phantom(PhantomSpec(), s))
        staged.append((rescale_by_percentile(v), lab))
    stats = compute_dataset_stats([v for v, _ in staged])
    cases = [(standardize(v, stats), lab) for v, lab in staged]
    res = slic_grid_search(cases, [int(k) for k in args.k.split(",")], [float(m) for m in args.m.split(",")])
    print("k\tm\tasa")
    for k, m, asa in res.table:
        print(f"{k}\t{m:g}\t{asa:.4f}")
    print("best", res.best)


if __name__ == "__main__":
    main()
