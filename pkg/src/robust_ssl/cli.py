"""``robust-ssl`` command line: run sweeps, summarize, plot, verify, generate data.

Exit codes: 0 on success, 1 for invalid input (config, spec, arguments),
2 when something fails at run time.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_INVALID)


def _err(msg: str) -> None:
    print(f"error: {msg}", file=sys.stderr)


def cmd_run(args) -> int:
    from .harness.config import ConfigError, load_config
    from .harness.runner import run_experiment
    from .harness.summary import to_markdown, write_summary

    try:
        cfg = load_config(args.config)
    except (ConfigError, ValueError) as e:
        _err(str(e))
        return EXIT_INVALID
    cells = cfg.cells()
    print(f"{cfg.name}: {len(cells)} cells -> {cfg.output_dir}")
    t0 = time.perf_counter()

    def progress(cell, outcome):
        msg = f"  {outcome.status:9s} {outcome.fingerprint} {cell.run_mode} seed={cell.seed}"
        if cell.sweep:
            msg += " " + " ".join(f"{k}={v}" for k, v in cell.sweep)
        if outcome.error:
            msg += f" ({outcome.error})"
        print(msg, flush=True)

    outcomes = run_experiment(cfg, args.workers, progress)
    skipped = sum(o.status == "skipped" for o in outcomes)
    failed = sum(o.status == "failed" for o in outcomes)
    print(f"done in {time.perf_counter() - t0:.1f}s: {len(outcomes) - skipped - failed} trained, "
          f"{skipped} skipped, {failed} failed")
    rows = write_summary(cfg.output_dir)
    print(to_markdown(rows))
    return EXIT_RUNTIME if failed else EXIT_OK


def cmd_summarize(args) -> int:
    from .harness.summary import load_reports, to_markdown, write_summary

    out = Path(args.dir)
    if not out.is_dir():
        _err(f"not a directory: {out}")
        return EXIT_INVALID
    if not any(r.get("status") == "completed" for r in load_reports(out)):
        print(f"no completed reports in {out}")
        return EXIT_OK
    print(to_markdown(write_summary(out)), end="")
    print(f"wrote {out / 'summary.md'} and {out / 'summary.csv'}")
    return EXIT_OK


def cmd_plot(args) -> int:
    from .harness.plots import PlotError, make_plots

    out = Path(args.dir)
    if not out.is_dir():
        _err(f"not a directory: {out}")
        return EXIT_INVALID
    try:
        paths = make_plots(out, args.kind)
    except PlotError as e:
        _err(str(e))
        return EXIT_INVALID
    for p in paths:
        print(p)
    return EXIT_OK


def cmd_verify(args) -> int:
    from .oracles import run_suite

    t0 = time.perf_counter()
    results = run_suite(args.neumann_scale)
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} properties hold "
          f"({time.perf_counter() - t0:.1f}s)")
    return EXIT_RUNTIME if failed else EXIT_OK


def cmd_gen_data(args) -> int:
    from .data import DataError, make_dataset, save_csv
    from .harness.config import ConfigError, load_data_spec

    try:
        spec = load_data_spec(args.spec)
        ds = make_dataset(spec)
    except (ConfigError, DataError) as e:
        _err(str(e))
        return EXIT_INVALID
    try:
        save_csv(ds, args.out)
    except OSError as e:
        _err(f"cannot write {args.out}: {e}")
        return EXIT_RUNTIME
    print(json.dumps(ds.summary(), indent=1, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    from .harness.plots import PLOT_KINDS

    p = _Parser(prog="robust-ssl", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress of each run")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    r = sub.add_parser("run", help="run every cell of an experiment config")
    r.add_argument("config", help="TOML experiment file")
    r.add_argument("--workers", type=int, default=None,
                   help="parallel cells (default: the config value, else CPU count)")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("summarize", help="mean ± std of test accuracy per cell group")
    s.add_argument("dir")
    s.set_defaults(func=cmd_summarize)

    pl = sub.add_parser("plot", help="write SVG figures from a run directory")
    pl.add_argument("dir")
    pl.add_argument("--kind", required=True, choices=PLOT_KINDS)
    pl.set_defaults(func=cmd_plot)

    v = sub.add_parser("verify", help="run the fast correctness oracles")
    v.add_argument("--neumann-scale", type=float, default=0.4,
                   help="scale for the Neumann oracle (values near 10 make it diverge)")
    v.set_defaults(func=cmd_verify)

    g = sub.add_parser("gen-data", help="write a synthetic dataset to CSV")
    g.add_argument("spec", help="TOML file with data fields (bare or under [data])")
    g.add_argument("out", help="output CSV path")
    g.set_defaults(func=cmd_gen_data)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except KeyboardInterrupt:
        return EXIT_RUNTIME
    except Exception as e:  # anything unexpected is a run-time failure, not a traceback
        logging.getLogger(__name__).debug("unhandled", exc_info=True)
        _err(f"{type(e).__name__}: {e}")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
