"""Command-line driver: ``wqed run``, ``wqed oracle`` and ``wqed validate``."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .config import RunConfig, load_config
from .evolve import ConfigError, RunRecord, Scenario, run
from .tensor import NumericalError

logger = logging.getLogger("wqed")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_IO = 0, 1, 2, 3, 4


# -- output files ------------------------------------------------------------------

def _fmt(x: float) -> str:
    return repr(float(x))


def header_lines(sc: Scenario, extra: dict | None = None) -> list[str]:
    lines = [f"# wqed {__version__}"]
    for key, val in sc.as_dict().items():
        lines.append(f"# {key} = {json.dumps(val)}")
    for key, val in (extra or {}).items():
        lines.append(f"# {key} = {json.dumps(val)}")
    return lines


def write_csv(path: Path, header: list[str], columns: Sequence[str], rows) -> Path:
    buf = io.StringIO()
    buf.write("\n".join(header) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([v if isinstance(v, str) else _fmt(v) for v in row])
    path.write_text(buf.getvalue(), encoding="utf-8")
    return path


def read_csv(path: Path) -> tuple[list[str], np.ndarray]:
    lines = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines() if not ln.startswith("#")]
    cols = lines[0].split(",")
    data = np.array([[float(v) for v in ln.split(",")] for ln in lines[1:]])
    return cols, data.reshape(-1, len(cols))


def _tag(cfg: RunConfig, sc: Scenario) -> str:
    if cfg.sweep_parameter is None:
        return sc.preset
    return f"{sc.preset}_{cfg.sweep_parameter}={getattr(sc, cfg.sweep_parameter)}"


def write_record(rec: RunRecord, out_dir: Path, tag: str, extra: dict | None = None) -> list[Path]:
    sc = rec.scenario
    header = header_lines(sc, extra)
    paths = []
    for name, series in rec.series.items():
        paths.append(write_csv(out_dir / f"{tag}_{name}.csv", header, ["time", name], zip(rec.times, series)))
    diag = rec.diagnostics
    names = ["max_bond", "discarded", "trace_error", "hermiticity", "min_eig"]
    paths.append(write_csv(out_dir / f"{tag}_diagnostics.csv", header, ["time"] + names,
                           zip(rec.times, *(diag[n] for n in names))))
    if rec.spectrum is not None:
        s = rec.spectrum
        cols = ["omega", "S_raw", "S_peak_normalized", "S_input_reference"]
        paths.append(write_csv(out_dir / f"{tag}_spectrum.csv", header, cols, zip(*(s[c] for c in cols))))
    return paths


def plot_csv(path: Path) -> Path:
    """Render a CSV as a static SVG line plot (first column on the x axis)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    cols, data = read_csv(path)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for j in range(1, len(cols)):
        ax.plot(data[:, 0], data[:, j], label=cols[j])
    ax.set_xlabel(cols[0])
    ax.legend()
    fig.tight_layout()
    out = path.with_suffix(".svg")
    # fixed hash salt and no date keep the SVG byte-identical between runs
    with matplotlib.rc_context({"svg.hashsalt": "wqed"}):
        fig.savefig(out, format="svg", metadata={"Date": None})
    plt.close(fig)
    return out


# -- commands ----------------------------------------------------------------------------

def _workers(n_jobs: int) -> int:
    cap = os.environ.get("WQED_THREADS")
    limit = os.cpu_count() or 1
    if cap:
        try:
            limit = max(1, int(cap))
        except ValueError:
            raise ConfigError(f"WQED_THREADS must be an integer, got {cap!r}")
    return max(1, min(limit, n_jobs))


def _run_one(sc: Scenario) -> RunRecord:
    return run(sc)


def _prepare_out(out_dir: Path) -> Path:
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        probe = out_dir / ".wqed_write_test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"output directory {out_dir} is not writable: {exc}") from exc
    return out_dir


def cmd_run(cfg: RunConfig, plots: bool = False) -> int:
    out_dir = _prepare_out(cfg.out_dir)
    scenarios = cfg.scenarios()
    n = _workers(len(scenarios))
    t0 = time.perf_counter()
    if n > 1:
        with ProcessPoolExecutor(max_workers=n) as pool:
            records = list(pool.map(_run_one, scenarios))
    else:
        records = [_run_one(sc) for sc in scenarios]
    long_rows = []
    written: list[Path] = []
    for rec in records:
        sc = rec.scenario
        tag = _tag(cfg, sc)
        written += write_record(rec, out_dir, tag)
        sweep_val = getattr(sc, cfg.sweep_parameter) if cfg.sweep_parameter else ""
        for name, series in rec.series.items():
            long_rows += [(str(sweep_val), name, t, v) for t, v in zip(rec.times, series)]
    extra = {"sweep_parameter": cfg.sweep_parameter, "sweep_values": list(cfg.sweep_values)}
    written.append(write_csv(out_dir / f"{cfg.scenario.preset}_long.csv", header_lines(cfg.scenario, extra),
                             ["sweep_value", "observable", "time", "value"], long_rows))
    if plots or cfg.plots:
        for p in list(written):
            if not p.name.endswith(("_long.csv", "_diagnostics.csv")):
                written.append(plot_csv(p))

    label = cfg.sweep_parameter or "run"
    print(f"{label:>14} {'max chi':>8} {'discarded':>12} {'wall s':>8}")
    for rec in records:
        val = getattr(rec.scenario, cfg.sweep_parameter) if cfg.sweep_parameter else rec.scenario.preset
        print(f"{str(val):>14} {rec.max_bond:>8d} {rec.discarded:>12.3e} {rec.wall_time:>8.2f}")
    print(f"wrote {len(written)} files to {out_dir} in {time.perf_counter() - t0:.1f}s")
    return EXIT_OK


def cmd_oracle(cfg: RunConfig) -> int:
    from .acceptance import oracle_comparison

    out_dir = _prepare_out(cfg.out_dir)
    for sc in cfg.scenarios():
        kind, times, columns = oracle_comparison(sc)
        names = list(columns)
        rows = zip(times, *(columns[c] for c in names))
        path = write_csv(out_dir / f"{_tag(cfg, sc)}_oracle.csv", header_lines(sc, {"oracle": kind}),
                         ["time"] + names, rows)
        diffs = [c for c in names if c.startswith("abs_diff_")]
        worst = max((float(np.max(columns[c])) for c in diffs), default=math.nan)
        print(f"{_tag(cfg, sc)}: oracle={kind} max abs diff={worst:.3e} -> {path}")
    return EXIT_OK


def cmd_validate(name_filter: str | None = None) -> int:
    from .acceptance import run_all

    results = run_all(name_filter, report=print)
    if not results:
        print(f"no criterion matches {name_filter!r}")
        return EXIT_FAIL
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} criteria passed")
    return EXIT_FAIL if failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="wqed", description=__doc__)
    p.add_argument("--version", action="version", version=f"wqed {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a scenario or sweep from a TOML config")
    r.add_argument("config")
    r.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a scenario field (repeatable)")
    r.add_argument("--out", help="output directory (overrides [output].dir)")
    r.add_argument("--plots", action="store_true", help="also write SVG line plots")

    o = sub.add_parser("oracle", help="compare a config against its brute-force reference")
    o.add_argument("config")
    o.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    o.add_argument("--out")

    v = sub.add_parser("validate", help="run the acceptance criteria")
    v.add_argument("--filter", dest="name_filter", help="only criteria whose name contains this text")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "validate":
            return cmd_validate(args.name_filter)
        cfg = load_config(args.config, args.overrides)
        if args.out:
            cfg = RunConfig(cfg.scenario, cfg.sweep_parameter, cfg.sweep_values, Path(args.out), cfg.plots,
                            cfg.source)
        if args.command == "run":
            return cmd_run(cfg, plots=args.plots)
        return cmd_oracle(cfg)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
