"""Command line entry point: ``generate``, ``run``, ``explain`` and ``stats``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ARMS, ConfigError, load_config

EXIT_OK, EXIT_CONFIG, EXIT_ARM = 0, 2, 3


def _add_common(p):
    p.add_argument("--config", help="JSON file overriding the packaged defaults")
    p.add_argument("--seed", type=int, help="run seed override (echoed in the report)")
    p.add_argument("--out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rnvit", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write the synthetic phantom cohort")
    _add_common(g)

    r = sub.add_parser("run", help="run the configured arms end to end")
    _add_common(r)
    r.add_argument("--arms", help=f"comma-separated subset of {','.join(ARMS)}")
    r.add_argument("--cohort", help="existing cohort directory (default: generate inline)")
    r.add_argument("--parallel-folds", action="store_true", help="train folds in parallel processes")

    e = sub.add_parser("explain", help="attention rollout heatmap for one sample")
    e.add_argument("--checkpoint", required=True, help="fold checkpoint path (without suffix)")
    e.add_argument("--cohort", required=True, help="cohort directory holding labeled/")
    e.add_argument("--sample", required=True, help="lesion id")
    e.add_argument("--out", required=True, help="output NIfTI path")
    e.add_argument("--channels", type=int, choices=(1, 2),
                   help="expected input channels (checked against the checkpoint)")

    s = sub.add_parser("stats", help="standalone statistical test on CSV input")
    s.add_argument("test", choices=("fisher", "mannwhitney", "shapiro", "pairedt", "auc"))
    s.add_argument("csv", help="fisher: 2 rows of counts; mannwhitney/pairedt: two columns; "
                               "shapiro: one column; auc: score,label columns")
    s.add_argument("--midp", action="store_true", help="fisher: mid-p two-sided variant")
    return ap


def _logging(out: Path | None):
    root = logging.getLogger("rnvit")
    root.setLevel(logging.INFO)
    for h in list(root.handlers):
        root.removeHandler(h)
    console = logging.StreamHandler(sys.stderr)
    console.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root.addHandler(console)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        fh = logging.FileHandler(out / "run.log", mode="w")
        fh.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
        root.addHandler(fh)


def _read_columns(path):
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]

    def num(v):
        try:
            return float(v)
        except ValueError:
            return None

    if rows and all(num(v) is None for v in rows[0] if v != ""):
        rows = rows[1:]
    width = max(len(r) for r in rows)
    cols = [[] for _ in range(width)]
    for r in rows:
        for j, v in enumerate(r):
            if v.strip() != "":
                cols[j].append(float(v))
    return rows, [np.array(c) for c in cols]


def cmd_stats(args) -> int:
    from . import evalstat as es

    rows, cols = _read_columns(args.csv)
    if args.test == "fisher":
        table = [[int(float(v)) for v in r if v.strip() != ""] for r in rows]
        res = es.fisher_exact(table, "midp" if args.midp else "minlike").to_dict()
    elif args.test == "mannwhitney":
        res = es.mann_whitney_u(cols[0], cols[1]).to_dict()
    elif args.test == "pairedt":
        res = es.paired_t(cols[0], cols[1]).to_dict()
    elif args.test == "shapiro":
        res = es.shapiro_wilk(cols[0]).to_dict()
    else:
        res = {"name": "roc_auc", "auc": es.roc_auc(cols[0], cols[1].astype(int)).auc}
    print(json.dumps(res, indent=1, sort_keys=True))
    return EXIT_OK


def cmd_explain(args) -> int:
    from .autograd import load_checkpoint
    from .imaging_io import read_raw_cohort, write_nifti
    from .preprocess import assemble_channels, preprocess_sample
    from .vit3d import ViTConfig, as_params, attention_rollout, check_params, forward
    from .vit3d import mask_attention_fraction

    params, manifest = load_checkpoint(args.checkpoint)
    vcfg = ViTConfig(**manifest["config"]["vit"])
    if args.channels is not None and args.channels != vcfg.in_channels:
        raise ConfigError(f"checkpoint expects {vcfg.in_channels} channel(s), --channels={args.channels}")
    check_params(params, vcfg)
    samples = {s.id: s for s in read_raw_cohort(Path(args.cohort) / "labeled")}
    if args.sample not in samples:
        raise ConfigError(f"sample {args.sample!r} not found in {args.cohort}")
    s = preprocess_sample(samples[args.sample], vcfg.input_side)
    x = assemble_channels(s.image, s.mask, vcfg.in_channels)
    _, trace = forward(as_params(params), x, vcfg, capture=True)
    heat = attention_rollout(trace.sample(0), vcfg, like=s.image)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_nifti(heat, args.out)
    frac = mask_attention_fraction(heat, s.mask)
    print(json.dumps({"sample": args.sample, "heatmap": str(args.out),
                      "mask_attention_fraction": frac}, sort_keys=True))
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "stats":
            return cmd_stats(args)
        if args.command == "explain":
            _logging(None)
            return cmd_explain(args)
        from . import pipeline

        arms = args.arms.split(",") if getattr(args, "arms", None) else None
        cfg = load_config(args.config, seed=args.seed, arms=arms, out=args.out,
                          parallel_folds=True if getattr(args, "parallel_folds", False) else None)
        if args.command == "generate":
            out = pipeline.cmd_generate(cfg, cfg.out)
            print(out)
            return EXIT_OK
        _logging(Path(cfg.out))
        result = pipeline.run(cfg, args.cohort)
        summary = {a: round(m["test_auc"], 4) for a, m in result.report.arms.items()}
        print(json.dumps({"report": str(result.out / "report.json"), "seed": cfg.seed,
                          "test_auc": summary, "failures": sorted(result.report.failures)},
                         sort_keys=True))
        return EXIT_ARM if result.report.failures else EXIT_OK
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
