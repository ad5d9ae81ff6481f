"""``pccl`` command line: synth, train, eval, ablate, report.

Exit status is 0 on success, 2 for usage or validation errors and 1 for
anything that fails at runtime.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

from .core import ConfigError, TrainConfig, ValidationError, apply_overrides, config_keys, load_config
from .data import SPLITS, synth_generate
from .trainer import (HISTORY_NAME, MODES, TEST_REPORT_NAME, ablate, evaluate_checkpoint,
                      read_history, train)

OUTPUT_ENV = "PCCL_OUTPUT_DIR"
COMPARISON_FIELDS = ["run", "mode", "semi", "con", "mac", "dsc", "hd95", "asd"]

log = logging.getLogger("pccl")


class RuntimeFailure(Exception):
    """Raised for failures that should exit with status 1."""


def _default_out():
    return Path(os.environ.get(OUTPUT_ENV, "runs"))


def _keys_epilog():
    lines = ["config keys (defaults):"]
    for k, v in config_keys().items():
        lines.append(f"  {k} = {v}")
    lines.append(f"\ndefault output directory: ${OUTPUT_ENV} or ./runs")
    return "\n".join(lines)


def _build_config(args):
    config = TrainConfig.desk() if args.desk else TrainConfig()
    if args.config:
        config = load_config(args.config, base=config)
    if args.override:
        config = apply_overrides(config, args.override)
    return config


def _config_args(p):
    p.add_argument("--config", type=Path, help="TOML config file")
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key; repeatable, dotted keys for sections")
    p.add_argument("--desk", action="store_true",
                   help="start from the desk-scale defaults (64 px, 60 epochs, small models)")


# ---------------------------------------------------------------------------
# verbs

def cmd_synth(args):
    written = synth_generate(args.n, args.size, args.seed, args.out)
    counts = ", ".join(f"{s}={len(written[s])}" for s in SPLITS)
    print(f"wrote {args.n} phantoms ({args.size}px, seed {args.seed}) to {args.out}: {counts}")


def cmd_train(args):
    config = _build_config(args)
    out = args.out or _default_out() / args.mode
    res = train(config, args.data, mode=args.mode, output_dir=out)
    print(f"checkpoint: {res.checkpoint}")
    print(f"history:    {res.history}")
    if res.test_report is not None:
        print(f"test:       {res.test_report.summary()}")


def cmd_eval(args):
    if not Path(args.checkpoint).is_file():
        raise ValidationError(f"checkpoint not found: {args.checkpoint}")
    report = evaluate_checkpoint(args.checkpoint, args.data, args.split)
    if args.out:
        report.to_csv(args.out)
    print(report.summary())


def cmd_ablate(args):
    config = _build_config(args)
    out = args.out or _default_out() / "ablation"
    rows = ablate(config, args.data, out, seeds=args.seeds)
    for r in rows:
        print(f"semi={r['semi']:d} con={r['con']:d} mac={r['mac']:d}  "
              f"DSC={r['dsc']:.2f} HD95={r['hd95']:.2f} ASD={r['asd']:.2f}")
    print(f"table: {Path(out) / 'ablation.csv'}")


def _run_summary(path, records):
    meta = next((r for r in records if r["kind"] == "meta"), {})
    row = {"run": path.parent.name or path.stem, "mode": meta.get("mode", ""),
           "semi": meta.get("semi", ""), "con": meta.get("con", ""), "mac": meta.get("mac", "")}
    test_csv = path.parent / TEST_REPORT_NAME
    if test_csv.is_file():
        from .metrics import MetricReport
        row.update(MetricReport.from_csv(test_csv).aggregate())
    else:
        epochs = [r for r in records if r["kind"] == "epoch"]
        if epochs:
            best = max(epochs, key=lambda r: r["val_dsc"])
            row.update(dsc=best["val_dsc"], hd95=best["val_hd95"], asd=best["val_asd"])
    return row


def _plot(path, records, out):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    name = path.parent.name or path.stem
    steps = [r for r in records if r["kind"] == "step"]
    epochs = [r for r in records if r["kind"] == "epoch"]

    fig, ax = plt.subplots(figsize=(6, 4))
    x = [r["step"] for r in steps]
    for key in ("total", "sup1", "sup2", "semi1", "semi2", "con", "mac"):
        y = [r[key] for r in steps]
        if any(y):
            ax.plot(x, y, label=key, lw=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title(name)
    ax.legend(fontsize=7)
    fig.tight_layout()
    loss_png = out / f"{name}_loss.png"
    fig.savefig(loss_png, dpi=100)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot([r["epoch"] for r in epochs], [r["val_dsc"] for r in epochs], marker=".", label="val DSC")
    ax.set_xlabel("epoch")
    ax.set_ylabel("DSC (%)")
    ax.set_title(name)
    ax.legend(fontsize=7)
    fig.tight_layout()
    metric_png = out / f"{name}_metrics.png"
    fig.savefig(metric_png, dpi=100)
    plt.close(fig)
    return loss_png, metric_png


def cmd_report(args):
    out = args.out or _default_out() / "report"
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for p in args.histories:
        p = Path(p)
        if p.is_dir():
            p = p / HISTORY_NAME
        if not p.is_file():
            raise ValidationError(f"history file not found: {p}")
        try:
            records = read_history(p)
        except ValidationError as e:
            raise RuntimeFailure(str(e)) from e
        for png in _plot(p, records, out):
            print(f"plot: {png}")
        rows.append(_run_summary(p, records))
    table = out / "comparison.csv"
    with table.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=COMPARISON_FIELDS, extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)
    print(f"table: {table}")


# ---------------------------------------------------------------------------

def build_parser():
    fmt = argparse.RawDescriptionHelpFormatter
    parser = argparse.ArgumentParser(prog="pccl", description=__doc__.splitlines()[0],
                                     epilog=_keys_epilog(), formatter_class=fmt)
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("synth", help="write a synthetic phantom dataset")
    p.add_argument("--n", type=int, default=340)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one mode", epilog=_keys_epilog(), formatter_class=fmt)
    p.add_argument("--data", type=Path, required=True, help="dataset root")
    p.add_argument("--mode", choices=MODES, default="pccl")
    p.add_argument("--out", type=Path, help=f"run directory (default ${OUTPUT_ENV}/<mode>)")
    _config_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset split")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--split", choices=SPLITS, default="test")
    p.add_argument("--out", type=Path, help="per-image CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train the four loss-toggle rows",
                       epilog=_keys_epilog(), formatter_class=fmt)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--seeds", type=int, nargs="+", default=None)
    p.add_argument("--out", type=Path)
    _config_args(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="plots and a comparison table from history files")
    p.add_argument("histories", nargs="+", help="history.jsonl files or run directories")
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except ConfigError as e:
        print("invalid configuration:", file=sys.stderr)
        for problem in e.problems:
            print(f"  - {problem}", file=sys.stderr)
        return 2
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
