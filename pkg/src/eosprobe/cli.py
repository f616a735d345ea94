"""Command-line entry point: ``eosprobe <subcommand> [--config PATH] [--set key=value ...]``.

Every run writes its resolved config, the toolkit version, telemetry and
plots into ``--out``. Failures print one line ``error[<category>]: <message>``
to stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from . import config as cfgmod
from . import experiments as ex
from . import plots, verify
from .data import DatasetError
from .storage import SnapshotError, TelemetryFormatError
from .trainer import MissingSnapshotError

log = logging.getLogger("eosprobe")

SUBCOMMANDS = ("train", "flow", "sweep", "classes", "entry", "cusp", "table", "verify")
EXIT_CODES = {"usage": 2, "config": 3, "data": 4, "io": 5, "snapshot": 6, "runtime": 1,
              "verify": 7}


class CliError(Exception):
    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise CliError("usage", message)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="flat key = value config file")
    common.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="override one config key (repeatable)")
    common.add_argument("--out", type=Path, default=Path("eosprobe_out"), help="output directory")
    common.add_argument("--seed", type=int, help="sets model.seed, data.seed and train.seed")
    common.add_argument("--threads", type=int,
                        help="parallel cells (default: $EOSPROBE_THREADS or 1)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="eosprobe", description="Edge-of-stability Hessian probes for full-batch GD.")
    p.add_argument("--version", action="version", version=f"eosprobe {__version__}")
    sub = p.add_subparsers(dest="command", metavar="{" + ",".join(SUBCOMMANDS) + "}",
                           parser_class=_Parser)
    sub.required = True
    helps = {
        "train": "one fixed-step GD run with telemetry",
        "flow": "gradient-flow runs over flow.n_Ds, with peak-curvature fit",
        "sweep": "learning-rate x activation x arch grid",
        "classes": "class-count grid",
        "entry": "dense telemetry over a short horizon",
        "cusp": "loss profile along the top eigenvector at peak curvature",
        "table": "attribution table from existing run directories",
        "verify": "built-in oracle suite",
    }
    for name in SUBCOMMANDS:
        sp = sub.add_parser(name, parents=[common], help=helps[name])
        if name == "table":
            sp.add_argument("inputs", nargs="+", type=Path,
                            help="cell directories, or directories holding cells/")
    return p


def _threads(args) -> int:
    if args.threads is not None:
        n = args.threads
    else:
        env = os.environ.get("EOSPROBE_THREADS", "1")
        try:
            n = int(env)
        except ValueError:
            raise CliError("config", f"EOSPROBE_THREADS={env!r} is not an integer") from None
    if n < 1:
        raise CliError("config", "threads must be >= 1")
    return n


def resolve_args(args) -> dict:
    layers = []
    if args.config is not None:
        layers.append(cfgmod.load(args.config))
    overrides = cfgmod.parse_overrides(args.overrides)
    if args.seed is not None:
        overrides.update({"model.seed": args.seed, "data.seed": args.seed, "train.seed": args.seed})
    layers.append(overrides)
    return cfgmod.resolve(*layers)


def _prepare_out(out: Path, cfg: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.cfg").write_text(cfgmod.dumps(cfg))
    (out / "VERSION").write_text(f"eosprobe {__version__}\n")


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def cmd_train(cfg, out, threads):
    run = ex.run_cell(ex.Cell("run", cfg), out)
    ex.check_rho_order(run.records)
    rows = ex.long_table({"run": run}, ex.top_bulk_series())
    if rows:
        rho_rows = [r for r in rows if r["series"].startswith("rho")]
        norm_rows = [r for r in rows if r["series"].endswith("norm")]
        plots.emit_figure("stability", rho_rows, out, dotted=("rho_bulk",))
        plots.emit_figure("gradient", norm_rows, out, dotted=("bulk_norm",))
    print(f"{run.termination} at iteration {run.final_iteration}, loss {run.final_loss:.6g}")


def _emit_sweep(result, out):
    rows = result.table
    rho_rows = [r for r in rows if r["series"].startswith("rho")]
    norm_rows = [r for r in rows if r["series"].endswith("norm")]
    if rho_rows:
        plots.emit_figure("stability", rho_rows, out, dotted=("rho_bulk",))
    if norm_rows:
        plots.emit_figure("gradient", norm_rows, out, dotted=("bulk_norm",))
    labels = {c.name: c.labels for c in result.plan.cells}
    table = ex.attribution_table({n: r.records for n, r in result.runs.items()}, labels)
    (out / "attribution.tsv").write_text(ex.format_attribution_table(table))
    for name, run in result.runs.items():
        print(f"{name}: {run.termination} at iteration {run.final_iteration}")


def cmd_sweep(cfg, out, threads):
    plan = ex.eos_sweep_plan(cfg, cfg["sweep.etas"], cfg["sweep.activations"], cfg["sweep.archs"],
                             out_dir=out)
    _emit_sweep(ex.run_eos_sweep(plan, threads), out)


def cmd_classes(cfg, out, threads):
    plan = ex.class_sweep_plan(cfg, cfg["classes.n_cs"], bool(cfg["classes.include_full"]), out)
    res = ex.run_class_sweep(plan, threads)
    if res.table:
        plots.emit_figure("classes", res.table, out, dotted=("rho_nc",))
    for name, run in res.runs.items():
        print(f"{name}: {run.termination} at iteration {run.final_iteration}")


def cmd_entry(cfg, out, threads):
    plan = ex.fine_grained_plan(cfg, int(cfg["entry.every"]), int(cfg["entry.iters"]), out)
    res = ex.run_fine_grained_entry(plan, threads)
    plots.emit_figure("entry", res.table, out,
                      dotted=tuple(s for s in {r["series"] for r in res.table} if s.startswith("abs")))
    print(f"{len(res.table)} series points written")


def cmd_flow(cfg, out, threads):
    plan = ex.flow_scaling_plan(cfg, cfg["flow.n_Ds"], out)
    res = ex.run_flow_scaling(plan, threads)
    plots.emit_figure("curvature", res.table, out, x="t")
    _write_json(out / "flow_scaling.json", {"peaks": res.peaks, "slope": res.slope,
                                            "intercept": res.intercept, "r_squared": res.r_squared})
    for p in res.peaks:
        print(f"n_D={p['n_D']}: peak lambda_1 {p['peak_lambda1']:.6g} at t={p['t_peak']:.4g}")
    print(f"linear fit R^2 = {res.r_squared:.6g}")


def cmd_cusp(cfg, out, threads):
    if cfg["cusp.run_dir"] is not None:
        cell, run = ex.load_run_dir(cfg["cusp.run_dir"])
        spec, data, _ = cfgmod.build(cell.config)
    else:
        spec, data, _ = cfgmod.build(cfg)
        run = ex.run_cell(ex.Cell("run", cfg), out)
    prof = ex.run_cusp_probe(run, spec, data, int(cfg["cusp.n_delta"]), float(cfg["cusp.half_width"]))
    plots.emit_cusp(prof.deltas, prof.values, out, float(cfg["cusp.half_width"]))
    _write_json(out / "cusp.json", {"peak_iteration": prof.peak_iteration,
                                    "snapshot_iteration": prof.snapshot_iteration,
                                    "lambda1": prof.lambda1, "base_loss": prof.base_loss})
    print(f"profile at iteration {prof.snapshot_iteration} (peak {prof.peak_iteration}), "
          f"lambda_1 {prof.lambda1:.6g}")


def _cell_dirs(paths):
    for p in paths:
        if (p / "telemetry.jsonl").exists():
            yield p
        elif (p / "cells").is_dir():
            yield from sorted(d for d in (p / "cells").iterdir() if (d / "telemetry.jsonl").exists())
        else:
            raise CliError("io", f"{p}: no telemetry.jsonl or cells/ directory")


def cmd_table(cfg, out, threads, inputs):
    telemetry, labels = {}, {}
    for d in _cell_dirs(inputs):
        cell, records, _ = ex.load_cell_dir(d)
        ex.check_rho_order(records)
        telemetry[cell.name], labels[cell.name] = records, cell.labels
    rows = ex.attribution_table(telemetry, labels, gate=float(cfg["table.gate"]))
    text = ex.format_attribution_table(rows)
    (out / "attribution.tsv").write_text(text)
    _write_json(out / "attribution.json", rows)
    sys.stdout.write(text)


def cmd_verify(cfg, out, threads):
    results = verify.run_all()
    for r in results:
        print(r.line())
    _write_json(out / "verify.json", [{"name": r.name, "passed": r.passed, "detail": r.detail}
                                      for r in results])
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise CliError("verify", f"{len(failed)} check(s) failed: {', '.join(failed)}")


COMMANDS = {"train": cmd_train, "flow": cmd_flow, "sweep": cmd_sweep, "classes": cmd_classes,
            "entry": cmd_entry, "cusp": cmd_cusp, "table": cmd_table, "verify": cmd_verify}


def run_cli(argv=None) -> int:
    args = None
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = resolve_args(args)
        threads = _threads(args)
        if args.command == "train" and cfg["train.mode"] != "fixed_lr":
            raise CliError("config", "train runs fixed_lr; use the flow subcommand")
        _prepare_out(args.out, cfg)
        extra = (args.inputs,) if args.command == "table" else ()
        COMMANDS[args.command](cfg, args.out, threads, *extra)
    except CliError as exc:
        return _fail(exc.category, str(exc))
    except cfgmod.ConfigError as exc:
        return _fail("config", str(exc))
    except DatasetError as exc:
        return _fail("data", str(exc))
    except (SnapshotError, MissingSnapshotError) as exc:
        return _fail("snapshot", str(exc).strip("'\""))
    except (TelemetryFormatError, ex.IntegrityError) as exc:
        return _fail("data", str(exc))
    except OSError as exc:
        return _fail("io", f"{exc.filename or ''}: {exc.strerror or exc}".lstrip(": "))
    except (ValueError, plots.PlotError) as exc:
        return _fail("config", str(exc))
    except Exception as exc:
        if args is not None and args.verbose:
            raise
        return _fail("runtime", f"{type(exc).__name__}: {exc}")
    return 0


def _fail(category: str, message: str) -> int:
    message = " ".join(message.split())
    print(f"error[{category}]: {message}", file=sys.stderr)
    return EXIT_CODES.get(category, 1)


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
