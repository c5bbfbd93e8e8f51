"""Command-line entry point: ``firstarrival <subcommand> [options]``.

Every subcommand writes its outputs plus a ``manifest.json`` into ``--out``.
Exit status is 0 on success, 1 on invalid input or usage and 2 on runtime
failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import platform
import shutil
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import FIELDS, RunConfig, file_sha256
from .grid_data import InputError, load_dataset, write_csv, write_tables
from .model import SCALARS, Model

log = logging.getLogger("firstarrival")

INPUT_FILES = ("pixels.csv", "checklists.csv", "occurrences.csv", "bbs.csv", "bbs_segments.csv", "nao.csv",
               "landcover.csv", "tables.csv")
COPY_FILES = ("pixels.csv", "bbs.csv", "bbs_segments.csv", "nao.csv", "landcover.csv")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# -- manifest ---------------------------------------------------------------------
def write_manifest(out: Path, command: str, args, config_path, inputs, outputs, started: float):
    def digest(p):
        p = Path(p)
        return {"path": str(p), "sha256": file_sha256(p)} if p.is_file() else None

    manifest = {
        "command": command,
        "argv": sys.argv[1:],
        "seed": getattr(args, "seed", None),
        "config": digest(config_path) if config_path else None,
        "inputs": [d for d in (digest(p) for p in inputs) if d],
        "outputs": [d for d in (digest(out / p) for p in outputs) if d],
        "versions": {"firstarrival": __version__, "python": platform.python_version(),
                     "numpy": np.__version__},
        "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(started)),
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def verify_manifest(path) -> list[str]:
    """Files whose hashes no longer match the manifest."""
    m = json.loads(Path(path).read_text())
    bad = []
    for entry in [m.get("config")] + m.get("inputs", []) + m.get("outputs", []):
        if entry and (not Path(entry["path"]).is_file() or file_sha256(entry["path"]) != entry["sha256"]):
            bad.append(entry["path"])
    return bad


# -- helpers ------------------------------------------------------------------------
def load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if getattr(args, "gev_only", False):
        cfg = replace(cfg, model=replace(cfg.model, gev_only=True))
    for key in ("iterations", "burn_in", "thin"):
        val = getattr(args, key, None)
        if val is not None:
            cfg = replace(cfg, chain=replace(cfg.chain, **{key: val}))
    return cfg


def data_dir(args, cfg: RunConfig) -> Path:
    d = args.data or cfg.data_dir
    if d is None:
        raise UsageError("no data directory given (use --data or data_dir in the config)")
    return Path(d)


def input_paths(d: Path):
    return [d / n for n in INPUT_FILES if (d / n).exists()]


def set_threads(n):
    if n is None:
        return
    if n < 1:
        raise UsageError("--threads must be positive")
    import numba
    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


def run_dir_model(args, cfg):
    """Model and draws for a fitted run directory."""
    from .draws import PosteriorDraws

    run = Path(args.run)
    if not (run / "draws.bin").exists():
        raise InputError(f"{run}: no draws.bin (run `fit` first)")
    used = run / "config.toml"
    if not args.config and used.exists():
        cfg = RunConfig.load(used)
    grid, tables = load_dataset(data_dir(args, cfg), cfg.model.pixel_km)
    model = Model(grid, tables, cfg.model)
    draws = PosteriorDraws.read(run / "draws.bin")
    if draws.n_pixels != model.D or not np.array_equal(draws.years, grid.years):
        raise InputError(f"{run}/draws.bin does not match the grid in {data_dir(args, cfg)}")
    return model, draws, cfg


# -- subcommands ------------------------------------------------------------------------
def cmd_ingest(args, out: Path):
    cfg = load_config(args)
    d = data_dir(args, cfg)
    grid, tables = load_dataset(d, cfg.model.pixel_km)
    write_tables(out / "tables.csv", grid, tables)
    for name in COPY_FILES:
        if (d / name).exists() and (d / name).resolve() != (out / name).resolve():
            shutil.copyfile(d / name, out / name)
    print(f"{grid.n_pixels} pixels x {grid.n_years} years; {int(tables.n_ckl.sum())} checklists, "
          f"{int(np.isfinite(tables.z).sum())} first-arrival cells, {len(tables.routes)} route-years")
    return input_paths(d), ["tables.csv", *[n for n in COPY_FILES if (out / n).exists()]]


def cmd_simulate(args, out: Path):
    from .draws import PosteriorDraws
    from .simulate import SimConfig, run_recovery_study, simulate_dataset, write_dataset, write_recovery_report

    cfg = load_config(args)
    sim = SimConfig(nx=args.nx, ny=args.ny, years=tuple(range(args.first_year, args.first_year + args.years)),
                    overdispersion=float("inf") if args.r == "inf" else float(args.r))
    if args.recovery:
        results = run_recovery_study(sim, cfg, args.recovery, base_seed=args.seed)
        write_recovery_report(results, out)
        ok = [r for r in results if not r.failed]
        print(f"{len(ok)}/{len(results)} replicates fitted")
        for r in ok:
            print(f"replicate {r.replicate}: coverage {r.coverage:.2f}, MAE debiased {r.mae_debiased:.2f} "
                  f"vs observed {r.mae_observed:.2f}")
        return [], ["recovery.csv", "boxplot_data.csv"]
    ds = simulate_dataset(sim, args.seed)
    write_dataset(ds, out)
    PosteriorDraws.from_states([ds.state], ds.grid.years).write(out / "truth.bin")
    print(f"simulated {ds.grid.n_pixels} pixels x {ds.grid.n_years} years; "
          f"GEV rejection rate {ds.z_rejection_rate:.3%}")
    return [], [*INPUT_FILES, "truth.bin"]


def cmd_fit(args, out: Path):
    from .mcmc import run_chain

    cfg = load_config(args)
    d = data_dir(args, cfg)
    grid, tables = load_dataset(d, cfg.model.pixel_km)
    model = Model(grid, tables, cfg.model)
    (out / "config.toml").write_text(replace(cfg, data_dir=str(d.resolve())).to_toml())
    step = max(cfg.chain.iterations // 20, 1)

    def progress(it):
        if it % step == 0:
            log.info("iteration %d/%d", it, cfg.chain.iterations)

    res = run_chain(model, cfg.chain, args.seed, progress=progress)
    if res.draws is None:
        raise InputError("no post-burn-in draws: iterations must exceed burn_in by at least thin")
    res.draws.write(out / "draws.bin")
    write_trace(out / "trace.csv", res)
    write_csv(out / "diagnostics.csv", ("kind", "name", "value"),
              [("ess", k, v) for k, v in res.ess.items()]
              + [("acceptance", k, v) for k, v in res.acceptance.items()]
              + [("step_size", k, v) for k, v in res.steps.items()]
              + [("runtime_s", "chain", round(res.runtime_s, 3))])
    print(f"{len(res.draws)} draws in {res.runtime_s:.1f} s")
    return input_paths(d), ["config.toml", "draws.bin", "trace.csv", "diagnostics.csv"]


def write_trace(path, res):
    acc = [k for k in res.trace if k.startswith("acc:")]
    cols = ["iteration", *acc, *SCALARS, "log_posterior"]
    n = len(res.trace["log_posterior"])
    data = [np.arange(1, n + 1)] + [res.trace[k] for k in cols[1:]]
    rows = ((int(data[0][i]), *(int(res.trace[k][i]) for k in acc),
             *(float(res.trace[k][i]) for k in [*SCALARS, "log_posterior"])) for i in range(n))
    write_csv(path, cols, rows)


def cmd_predict(args, out: Path):
    from .posterior import predict_arrival

    cfg = load_config(args)
    model, draws, cfg = run_dir_model(args, cfg)
    pc = cfg.predict
    mode = args.mode or pc.effort_mode
    threshold = pc.mask_threshold if args.mask_threshold is None else args.mask_threshold
    years = args.year or [int(y) for y in model.grid.years]
    preds = [predict_arrival(model, draws, y, nao=args.nao, effort_mode=mode, lambda_source=pc.lambda_source,
                             mask_threshold=threshold, quantiles=pc.quantiles) for y in years]
    write_csv(out / "arrival_pred.csv", preds[0].columns, (row for p in preds for row in p.rows()))
    n_mask = int(preds[0].masked.sum())
    print(f"predicted {len(years)} year(s) in {mode}-effort mode; {n_mask} pixel(s) masked")
    return [Path(args.run) / "draws.bin"], ["arrival_pred.csv"]


def cmd_excursions(args, out: Path):
    from .posterior import excursion_function

    cfg = load_config(args)
    model, draws, cfg = run_dir_model(args, cfg)
    if args.field not in draws.fields or args.field == "x_year":
        raise InputError(f"unknown spatial field {args.field!r}")
    x = draws.fields[args.field]
    signs = ("positive", "negative") if args.sign == "both" else (args.sign,)
    rows = []
    for u in args.u:
        for sign in signs:
            f = excursion_function(x, u, sign)
            rows.extend((i, u, sign, float(v)) for i, v in enumerate(f))
    write_csv(out / "excursions.csv", ("pixel_id", "u", "sign", "F"), rows)
    return [Path(args.run) / "draws.bin"], ["excursions.csv"]


def cmd_correlate(args, out: Path):
    from .posterior import landcover_correlation

    cfg = load_config(args)
    model, draws, cfg = run_dir_model(args, cfg)
    if model.tables.landcover is None:
        raise InputError("landcover.csv is required for correlations")
    means = {f: draws.fields[f].mean(axis=0) for f in FIELDS if f != "x_year"}
    res = landcover_correlation(means, model.tables.landcover)
    write_csv(out / "landcover_corr.csv", ("field", "class", "rho", "undefined"),
              ((c.field, c.landcover_class, c.rho, int(c.undefined)) for c in res))
    return [Path(args.run) / "draws.bin"], ["landcover_corr.csv"]


def read_trace(path):
    path = Path(path)
    if not path.is_file():
        raise InputError(f"missing trace file {path}")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        data = np.asarray([[float(v) for v in row] for row in reader], dtype=float).reshape(-1, len(header))
    return header, data


def diagnose(trace_path, burn_in: int, thin: int = 1):
    """ESS and acceptance per column of a trace file, over post-burn-in iterations."""
    from .diagnostics import ess

    header, data = read_trace(trace_path)
    it = data[:, 0]
    post = data[(it > burn_in) & ((it - burn_in) % thin == 0)]
    if len(post) == 0:
        raise InputError("trace has no post-burn-in iterations")
    report = []
    for j, name in enumerate(header):
        if name in SCALARS:
            col = post[:, j]
            val, const = ess(col) if len(col) >= 10 else (float("nan"), False)
            report.append(("ess", name, val, int(const), float(col.mean()), float(col.std())))
        elif name.startswith("acc:"):
            report.append(("acceptance", name[4:], float(post[:, j].mean()), 0, "", ""))
    return header, data, report


def cmd_diagnose(args, out: Path):
    run = Path(args.run)
    burn_in, thin = args.burn_in, args.thin
    if (burn_in is None or thin is None) and (run / "config.toml").exists():
        chain = RunConfig.load(run / "config.toml").chain
        burn_in = chain.burn_in if burn_in is None else burn_in
        thin = chain.thin if thin is None else thin
    burn_in = burn_in or 0
    thin = thin or 1
    header, data, report = diagnose(run / "trace.csv", burn_in, thin)
    write_csv(out / "diagnostics_report.csv", ("kind", "name", "value", "constant", "mean", "sd"), report)
    scal = [j for j, h in enumerate(header) if h in SCALARS or h == "log_posterior"]
    write_csv(out / "trace_tidy.csv", ("iteration", "parameter", "value", "burn_in"),
              ((int(row[0]), header[j], row[j], int(row[0] <= burn_in)) for row in data for j in scal))
    width = max(len(r[1]) for r in report)
    print(f"burn-in: {burn_in} iterations, thin {thin}")
    for kind, name, val, const, *_ in report:
        flag = "  (constant)" if const else ""
        print(f"{kind:<10} {name:<{width}} {val:10.3f}{flag}")
    return [run / "trace.csv"], ["diagnostics_report.csv", "trace_tidy.csv"]


COMMANDS = {"ingest": cmd_ingest, "simulate": cmd_simulate, "fit": cmd_fit, "predict": cmd_predict,
            "excursions": cmd_excursions, "correlate": cmd_correlate, "diagnose": cmd_diagnose}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="TOML run configuration")
    common.add_argument("--seed", type=int, default=0, help="master RNG seed (default 0)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--threads", type=int, help="worker threads (default: all cores)")
    common.add_argument("--gev-only", action="store_true", help="disable all sharing (comparison model)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="firstarrival", description="Bayesian first-arrival model with effort debiasing.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("--print-config", action="store_true", help="print the default configuration and exit")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("ingest", parents=[common], help="aggregate raw CSV records into response tables")
    s.add_argument("--data", help="input directory")

    s = sub.add_parser("simulate", parents=[common], help="simulate a dataset or run the recovery study")
    s.add_argument("--nx", type=int, default=12)
    s.add_argument("--ny", type=int, default=13)
    s.add_argument("--years", type=int, default=6)
    s.add_argument("--first-year", type=int, default=2001)
    s.add_argument("--r", default="10", help="NegBin overdispersion r, or 'inf' for Poisson")
    s.add_argument("--recovery", type=int, default=0, metavar="N", help="run N recovery replicates")

    s = sub.add_parser("fit", parents=[common], help="run the MCMC sampler")
    s.add_argument("--data", help="input directory")
    s.add_argument("--iterations", type=int)
    s.add_argument("--burn-in", dest="burn_in", type=int)
    s.add_argument("--thin", type=int)

    for name, helptext in (("predict", "posterior median arrival days"),
                           ("excursions", "excursion functions of a latent field"),
                           ("correlate", "land-cover correlations of posterior-mean fields")):
        s = sub.add_parser(name, parents=[common], help=helptext)
        s.add_argument("--run", required=True, help="fit output directory")
        s.add_argument("--data", help="input directory (default: the one recorded by fit)")
        if name == "predict":
            s.add_argument("--year", type=int, action="append", help="prediction year (repeatable)")
            s.add_argument("--nao", type=float, help="NAO value for an out-of-sample year")
            s.add_argument("--mode", choices=("observed", "infinite"))
            s.add_argument("--mask-threshold", type=float)
        elif name == "excursions":
            s.add_argument("--field", default="x_niche")
            s.add_argument("--u", type=float, action="append", required=True, help="threshold (repeatable)")
            s.add_argument("--sign", choices=("positive", "negative", "both"), default="both")

    s = sub.add_parser("diagnose", parents=[common], help="ESS and acceptance summary of a fit")
    s.add_argument("--run", required=True)
    s.add_argument("--burn-in", dest="burn_in", type=int)
    s.add_argument("--thin", type=int)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    if args.print_config:
        sys.stdout.write(RunConfig().to_toml())
        return 0
    if not args.command:
        parser.print_usage(sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    started = time.time()
    try:
        set_threads(args.threads)
        out = Path(args.out or os.getcwd())
        out.mkdir(parents=True, exist_ok=True)
        inputs, outputs = COMMANDS[args.command](args, out)
        write_manifest(out, args.command, args, args.config, inputs, outputs, started)
    except (UsageError, InputError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        log.debug("runtime failure", exc_info=True)
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
