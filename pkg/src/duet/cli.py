"""Command-line entry point: ``duet <command> --config <path> [--out DIR] ...``.

Exit status: 0 on success, 2 for usage errors (unknown command, bad
flags), 3 for a malformed config, 4 for missing input files, 1 for any
other failure.
"""
import argparse
import contextlib
import csv
import json
import logging
import os
import sys

from threadpoolctl import threadpool_limits

from . import checkpoint
from . import experiment as X
from .metrics import rela_impr

log = logging.getLogger("duet")

COMMANDS = ("simulate", "train", "eval", "ablate", "sweep-lambda", "bench-attn", "report")
EXIT_CONFIG, EXIT_MISSING, EXIT_FAILURE = 3, 4, 1


def _thread_limits():
    """Cap BLAS pools at DUET_THREADS; numba's pool is capped at import time."""
    n = os.environ.get("DUET_THREADS")
    if not n:
        return contextlib.nullcontext()
    return threadpool_limits(limits=max(1, int(n)))


def build_parser():
    p = argparse.ArgumentParser(prog="duet", description="Set-wise CTR pre-ranking experiments.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="JSON experiment config; omitted keys take defaults")
    p.add_argument("--out", default="runs/default", help="output directory (default: runs/default)")
    p.add_argument("--seed", type=int, help="override the training seed list with one seed")
    p.add_argument("--variant", choices=X.VARIANTS, help="training variant for train/eval")
    p.add_argument("--lambda", dest="lam", type=float, help="consistency weight for train/eval")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def cmd_simulate(cfg, out):
    manifest, splits = X.simulate(cfg, out)
    print(f"wrote {sum(len(s) for s in splits.values())} requests to {out} (checksum {manifest['checksum'][:12]})")


def cmd_train(cfg, out):
    _, splits = X.prepare_data(cfg, out)
    t = cfg["train"]
    row, _, _ = X.run_training(cfg, splits, t["ablation"], t["lam"], cfg["seeds"][0], out)
    print(render_rows([row], "single"))


def cmd_eval(cfg, out):
    path = cfg["eval"]["checkpoint"]
    if path is None:
        try:
            with open(os.path.join(out, "metrics.json"), encoding="utf-8") as fh:
                best = json.load(fh)["rows"][0]["best"]
        except (OSError, KeyError, IndexError):
            best = "a"
        path = os.path.join(out, f"model_{best}.ckpt")
    if not os.path.exists(path):
        raise X.MissingInputError(f"checkpoint not found: {path}")
    params = checkpoint.load(path)
    if cfg["data"]["dir"] is None and not os.path.exists(os.path.join(out, "manifest.json")):
        raise X.MissingInputError(f"no dataset in {out}; run simulate/train first or set data.dir")
    if cfg["data"]["dir"] is None:
        cfg = dict(cfg, data=dict(cfg["data"], dir=out))
    _, splits = X.prepare_data(cfg, out)
    row = X.evaluate_checkpoint(cfg, params, splits, pointwise=cfg["train"]["ablation"] == "no_set")
    X.write_json(os.path.join(out, "metrics.json"), {"kind": "single", "rows": [row]})
    print(render_rows([row], "single"))


def cmd_ablate(cfg, out):
    _, splits = X.prepare_data(cfg, out)
    rows, _ = X.run_ablation(cfg, splits, out)
    print(render_rows(rows, "ablation"))


def cmd_sweep(cfg, out):
    _, splits = X.prepare_data(cfg, out)
    rows, _ = X.run_sweep(cfg, splits, out)
    print(render_rows(rows, "sweep"))


def cmd_bench(cfg, out):
    b = cfg["bench"]
    rows = X.bench_attention(b["sizes"], b["dim"], b["trials"], b["seed"])
    with open(os.path.join(out, "bench.csv"), "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    for r in rows:
        print(f"{r['impl']:>7} n={r['n']:>5}  {r['median_seconds'] * 1e3:10.3f} ms")
    lin, nai = X.timing_ratio(rows, "linear"), X.timing_ratio(rows, "naive")
    print(f"t(max)/t(min): linear {lin:.2f}, naive {nai:.2f}")


# -- report ---------------------------------------------------------------------

def report_table(rows, kind):
    """Rows with AUC, RelaImpr against the no_co row (when present) and UAUC."""
    base = next((r for r in rows if r.get("variant") == "no_co"), None)
    if kind == "sweep":
        rows = sorted((r for r in rows if not r.get("baseline")), key=lambda r: r["lambda"]) + \
            [r for r in rows if r.get("baseline")]
    table = []
    for r in rows:
        if kind == "sweep" and not r.get("baseline"):
            label = f"lambda={r['lambda']:g}"
        else:
            label = r.get("variant", "run")
        ri = None
        if base is not None and r is not base:
            ri = rela_impr(r["auc_entire"], base["auc_entire"])
        table.append({"label": label, "auc_entire": r["auc_entire"], "rela_impr": ri,
                      "uauc_entire": r["uauc_entire"], "auc_exposed": r["auc_exposed"]})
    return table


def render_rows(rows, kind):
    table = report_table(rows, kind)
    head = f"{'run':<14}{'AUC':>9}{'RelaImpr':>11}{'UAUC':>9}{'AUC(exp)':>10}"
    lines = [head, "-" * len(head)]
    for t in table:
        ri = "-" if t["rela_impr"] is None else f"{t['rela_impr']:+.2f}%"
        lines.append(f"{t['label']:<14}{t['auc_entire']:>9.4f}{ri:>11}{t['uauc_entire']:>9.4f}{t['auc_exposed']:>10.4f}")
    return "\n".join(lines)


def cmd_report(cfg, out):
    path = os.path.join(out, "metrics.json")
    if not os.path.exists(path):
        raise X.MissingInputError(f"no metrics.json in {out}")
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if not doc.get("rows"):
        raise X.MissingInputError(f"{path} has no rows")
    text = render_rows(doc["rows"], doc["kind"])
    with open(os.path.join(out, "report.txt"), "w", encoding="utf-8") as fh:
        fh.write(text + "\n")
    table = report_table(doc["rows"], doc["kind"])
    with open(os.path.join(out, "report.csv"), "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(table[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(table)
    print(text)


HANDLERS = {"simulate": cmd_simulate, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate,
            "sweep-lambda": cmd_sweep, "bench-attn": cmd_bench, "report": cmd_report}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = X.load_config(args.config, seed=args.seed, variant=args.variant, lam=args.lam)
        if args.command != "report":
            os.makedirs(args.out, exist_ok=True)
            X.write_json(os.path.join(args.out, "resolved_config.json"), cfg)
        with _thread_limits():
            HANDLERS[args.command](cfg, args.out)
    except X.ConfigError as exc:
        print(f"duet: malformed config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (X.MissingInputError, FileNotFoundError) as exc:
        print(f"duet: missing input: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except Exception as exc:  # noqa: BLE001 - top-level diagnostic
        log.debug("failure", exc_info=True)
        print(f"duet: {args.command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    return 0


if __name__ == "__main__":
    sys.exit(main())
