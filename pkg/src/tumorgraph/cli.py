"""Command-line entry point: ``tumorgraph <command> ...``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error.
Logs go to stderr; result summaries go to stdout.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

from . import pipeline as pl
from .config import PipelineConfig, SlicConfig, apply_overrides, config_to_dict, dump_config, load_config
from .errors import DataError, TumorGraphError, UsageError
from .gnn import GraphSageNet, train_gnn
from .metrics import evaluate_case, missing_case_report, write_report
from .phantom import generate_dataset
from .refine import RefineCNN, train_cnn
from .supervoxel import slic_grid_search
from .volume import case_paths, read_labels, read_nifti

log = logging.getLogger("tumorgraph")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _csv_list(cast):
    def parse(text):
        try:
            return [cast(x) for x in text.split(",") if x.strip()]
        except ValueError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from exc
    return parse


def _resolve_config(args) -> PipelineConfig:
    cfg = load_config(getattr(args, "config", None))
    cfg = apply_overrides(cfg, getattr(args, "set", None) or [])
    if getattr(args, "jobs", None) is not None:
        cfg.jobs = args.jobs
    if cfg.jobs < 1:
        raise UsageError("--jobs must be at least 1")
    log.info("resolved config: %s", json.dumps(config_to_dict(cfg), sort_keys=True))
    return cfg


def _write_log(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "lr", "loss"])
        w.writerows(rows)


def _preprocessed_paths(data_dir, split):
    data_dir = Path(data_dir)
    cases = pl.select(pl.list_preprocessed(data_dir), split)
    if not cases:
        raise UsageError(f"no {split} cases in {data_dir}")
    return [cid for cid, _ in cases], [data_dir / f"{cid}.npz" for cid, _ in cases]


# ---------------------------------------------------------------- commands


def cmd_gen_phantoms(args) -> int:
    cfg = _resolve_config(args)
    rows = generate_dataset(cfg.phantom, args.train, args.val, args.seed, args.out)
    log.info("wrote %d phantom cases to %s", len(rows), args.out)
    return 0


def cmd_preprocess(args) -> int:
    cfg = _resolve_config(args)
    stats = pl.preprocess_dataset(args.data, args.out, cfg.jobs)
    print(json.dumps(stats.to_dict(), sort_keys=True))
    return 0


def cmd_tune_slic(args) -> int:
    cfg = _resolve_config(args)
    _, paths = _preprocessed_paths(args.data, args.split)
    cases = []
    for p in paths:
        case = pl.PreprocessedCase.load(p)
        if case.labels is None:
            raise UsageError(f"case {case.case_id} has no labels; ASA needs ground truth")
        cases.append((case.volume, case.labels))
    res = slic_grid_search(cases, args.k_grid, args.m_grid, cfg.slic.max_iter)
    lines = ["k\tm\tasa"] + [f"{k}\t{m:g}\t{a:.6f}" for k, m, a in res.table]
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    print(f"best\tk={res.best[0]}\tm={res.best[1]:g}")
    return 0


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    case_ids, paths = _preprocessed_paths(args.data, "train")
    (out / f"config.{args.stage}.yaml").write_text(dump_config(cfg))
    pairs = pl.cached_graphs(paths, cfg.slic, out / "cache", cfg.jobs)
    gnn_path = out / "gnn.ckpt"

    if args.stage in ("gnn", "both"):
        rows = []
        model, _ = train_gnn([g for _, g in pairs], cfg.gnn,
                             on_epoch=lambda e, lr, loss: rows.append((e, f"{lr:.8g}", f"{loss:.8f}")))
        model.save(gnn_path, epoch=cfg.gnn.epochs, extra={"slic": asdict(cfg.slic)})
        _write_log(out / "gnn_log.csv", rows)
        log.info("GNN trained: final loss %s", rows[-1][2] if rows else "n/a")

    if args.stage in ("cnn", "both"):
        if not gnn_path.exists():
            raise UsageError(f"CNN training needs a trained GNN at {gnn_path}")
        gnn_model, meta = GraphSageNet.load(gnn_path)
        if meta.get("slic") != asdict(cfg.slic):
            raise UsageError("SLIC settings differ from those the GNN was trained with")
        tag = pl.file_digest(gnn_path)
        cases = [pl.refine_case_inputs(pl.PreprocessedCase.load(p),
                                       pl.cached_logit_volume(gnn_model, tag, p, cfg.slic, part, g, out / "cache"))
                 for p, (part, g) in zip(paths, pairs)]
        rows = []
        cnn_model, _ = train_cnn(cases, cfg.cnn,
                                 on_epoch=lambda e, lr, loss: rows.append((e, f"{lr:.8g}", f"{loss:.8f}")))
        cnn_model.save(out / "cnn.ckpt", epoch=cfg.cnn.epochs)
        _write_log(out / "cnn_log.csv", rows)
        log.info("CNN trained: final loss %s", rows[-1][2] if rows else "n/a")
    return 0


def cmd_predict(args) -> int:
    cfg = _resolve_config(args)
    gnn_model, meta = GraphSageNet.load(args.gnn)
    if "slic" not in meta:
        raise DataError(f"{args.gnn}: checkpoint lacks SLIC settings")
    slic = SlicConfig(**meta["slic"])
    cnn_model = RefineCNN.load(args.cnn)[0] if args.cnn else None
    margin = cnn_model.cfg.crop_margin if cnn_model is not None else cfg.cnn.crop_margin
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    case_ids, paths = _preprocessed_paths(args.data, args.split)
    cache = Path(args.cache) if args.cache else out / "cache"
    pairs = pl.cached_graphs(paths, slic, cache, cfg.jobs)
    patch_rows = []
    for cid, path, (part, g) in zip(case_ids, paths, pairs):
        case = pl.PreprocessedCase.load(path)
        pred = pl.predict_case(case, part, g, gnn_model, cnn_model, margin)
        pl.export_prediction(out / f"{cid}.nii.gz", case, pred.final)
        ob = pl.original_bounds(case, pred.bounds)
        patch_rows.append([cid] + (["", ""] if ob is None else
                                   [",".join(map(str, ob[0])), ",".join(map(str, ob[1]))]))
    with open(out / "patches.tsv", "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["case_id", "lo", "hi"])
        w.writerows(patch_rows)
    log.info("wrote %d predictions to %s", len(case_ids), out)
    return 0


def cmd_evaluate(args) -> int:
    cfg = _resolve_config(args)
    penalty = args.penalty if args.penalty is not None else cfg.metrics.hd95_penalty
    truth_dir, pred_dir = Path(args.truth), Path(args.pred)
    cases = pl.select(pl.list_cases(truth_dir), args.split)
    if not cases:
        raise UsageError(f"no {args.split} cases in {truth_dir}")
    reports = []
    for cid, _ in cases:
        _, seg = case_paths(truth_dir / cid, cid)
        truth = read_labels(seg)
        pred_path = pred_dir / f"{cid}.nii.gz"
        if not pred_path.exists():
            # also accept a directory laid out like the raw data
            pred_path = case_paths(pred_dir / cid, cid)[1]
        if not pred_path.exists():
            log.warning("no prediction for %s; scoring as missing", cid)
            reports.append(missing_case_report(cid, penalty))
            continue
        pred = read_labels(pred_path, truth.shape)
        _, header = read_nifti(seg)
        spacing = tuple(float(z) for z in header.get_zooms()[:3])
        reports.append(evaluate_case(pred.labels, truth.labels, spacing, penalty, cid))
    summary = write_report(args.out, reports)
    print(json.dumps(summary, sort_keys=True))
    return 0


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tumorgraph", description="Supervoxel-graph brain tumour segmentation.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="YAML pipeline configuration")
            p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="config override")
        p.add_argument("--jobs", type=int, default=None, help="worker processes")

    p = sub.add_parser("gen-phantoms", help="write a synthetic phantom dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--train", type=int, default=20)
    p.add_argument("--val", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    common(p)
    p.set_defaults(fn=cmd_gen_phantoms)

    p = sub.add_parser("preprocess", help="crop, rescale and standardise a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(fn=cmd_preprocess)

    p = sub.add_parser("tune-slic", help="grid-search SLIC k and m by ASA")
    p.add_argument("--data", required=True)
    p.add_argument("--k-grid", type=_csv_list(int), required=True)
    p.add_argument("--m-grid", type=_csv_list(float), required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--out")
    common(p)
    p.set_defaults(fn=cmd_tune_slic)

    p = sub.add_parser("train", help="train the GNN, the CNN, or both in sequence")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--stage", choices=("gnn", "cnn", "both"), default="both")
    common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("predict", help="segment preprocessed cases")
    p.add_argument("--data", required=True)
    p.add_argument("--gnn", required=True)
    p.add_argument("--cnn")
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="val")
    p.add_argument("--cache", help="graph cache directory (default: <out>/cache)")
    common(p)
    p.set_defaults(fn=cmd_predict)

    p = sub.add_parser("evaluate", help="score predictions against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="val")
    p.add_argument("--penalty", type=float)
    common(p)
    p.set_defaults(fn=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                            format="%(asctime)s %(name)s %(levelname)s %(message)s", stream=sys.stderr)
        return args.fn(args)
    except UsageError as exc:
        print(f"tumorgraph: error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"tumorgraph: data error: {exc}", file=sys.stderr)
        return 2
    except TumorGraphError as exc:
        print(f"tumorgraph: error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"tumorgraph: I/O error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
