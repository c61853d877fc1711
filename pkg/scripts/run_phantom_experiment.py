"""Full phantom experiment: generate, preprocess, train both stages, predict and score.

    python scripts/run_phantom_experiment.py --out runs/phantom [--config configs/phantom.yaml]
"""
import argparse
import csv
import sys
import time
from pathlib import Path

from tumorgraph.cli import main as cli


def median_row(path):
    with open(path, newline="") as fh:
        return next(r for r in csv.DictReader(fh) if r["case_id"] == "#median")


def run(args) -> int:
    out = Path(args.out)
    c = ["--config", args.config, "--jobs", str(args.jobs)]
    steps = [
        ["gen-phantoms", "--out", str(out / "raw"), "--train", str(args.train), "--val", str(args.val),
         "--seed", str(args.seed)],
        ["preprocess", "--data", str(out / "raw"), "--out", str(out / "pre")],
        ["train", "--data", str(out / "pre"), "--out", str(out / "run"), "--stage", "both"],
        ["predict", "--data", str(out / "pre"), "--gnn", str(out / "run" / "gnn.ckpt"),
         "--out", str(out / "pred_gnn"), "--cache", str(out / "run" / "cache")],
        ["predict", "--data", str(out / "pre"), "--gnn", str(out / "run" / "gnn.ckpt"),
         "--cnn", str(out / "run" / "cnn.ckpt"), "--out", str(out / "pred_joint"),
         "--cache", str(out / "run" / "cache")],
        ["evaluate", "--pred", str(out / "pred_gnn"), "--truth", str(out / "raw"),
         "--out", str(out / "report_gnn.csv")],
        ["evaluate", "--pred", str(out / "pred_joint"), "--truth", str(out / "raw"),
         "--out", str(out / "report_joint.csv")],
    ]
    t0 = time.perf_counter()
    for step in steps:
        t = time.perf_counter()
        code = cli(step + c)
        print(f"{step[0]:<13} {time.perf_counter() - t:8.1f}s", file=sys.stderr)
        if code:
            return code
    print(f"total {time.perf_counter() - t0:.1f}s")
    for kind in ("gnn", "joint"):
        row = median_row(out / f"report_{kind}.csv")
        print(kind, " ".join(f"{k}={row[k]}" for k in row if k.startswith(("dice", "hd95"))))
    return 0


if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=str(Path(__file__).resolve().parents[1] / "configs" / "phantom.yaml"))
    p.add_argument("--train", type=int, default=20)
    p.add_argument("--val", type=int, default=5)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--jobs", type=int, default=1)
    sys.exit(run(p.parse_args()))
