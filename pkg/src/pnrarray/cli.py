"""Command-line entry point: ``pnrarray <subcommand> ...``.

Exit codes: 0 success, 2 usage or configuration error, 3 check failure,
4 I/O error.  Relative ``--config``/``--source`` paths that do not exist are
also looked up in ``$PNRARRAY_CONFIG_DIR``.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .array_model import (
    ConfigError,
    CrosstalkModel,
    DetectorArrayConfig,
    load_config,
    paper_config,
    validate_config,
)
from .heralding import HeraldCondition, g2_reduction, reduction_csv
from .pmatrix import (
    ClickStatistics,
    ProbabilityMatrix,
    build_uniform_pmatrix,
    build_weighted_pmatrix,
)
from .rate import extract_mcr, sde_vs_rate, single_pixel_config
from .reconstruct import fit_poisson_mu, reconstruct_distribution
from .simulator import LightSourceSpec, SimulationRun, simulate, source_from_dict
from .tagstream import (
    TagFormatError,
    click_statistics,
    crosstalk_histogram,
    estimate_crosstalk_probability,
    load_stream,
    recovery_curve_from_tags,
    save_stream,
    time_profile_histogram,
    window_clicks,
)

EXIT_USAGE, EXIT_CHECK, EXIT_IO = 2, 3, 4
CONFIG_DIR_ENV = "PNRARRAY_CONFIG_DIR"


class CheckFailed(Exception):
    pass


def _resolve(path: str) -> Path:
    p = Path(path)
    if not p.exists() and not p.is_absolute() and os.environ.get(CONFIG_DIR_ENV):
        alt = Path(os.environ[CONFIG_DIR_ENV]) / p
        if alt.exists():
            return alt
    return p


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _config(args) -> DetectorArrayConfig:
    cfg = load_config(_resolve(args.config)) if getattr(args, "config", None) else None
    pixels = getattr(args, "pixels", None)
    eta = getattr(args, "efficiency", None)
    if cfg is None:
        cfg = paper_config()
        if pixels is not None:
            cfg = DetectorArrayConfig.uniform(pixels, cfg.pixel_efficiencies[0], recovery=cfg.recovery)
    elif pixels is not None and pixels != cfg.pixel_count:
        cfg = DetectorArrayConfig.uniform(pixels, cfg.pixel_efficiencies[0], recovery=cfg.recovery)
    if eta is not None:
        cfg = cfg.replace(pixel_efficiencies=(eta,) * cfg.pixel_count)
    xt = getattr(args, "crosstalk_prob", None)
    if xt is not None:
        adjacency = cfg.crosstalk.adjacency or tuple((i, i + 1) for i in range(cfg.pixel_count - 1))
        cfg = cfg.replace(crosstalk=CrosstalkModel.symmetric(
            adjacency, xt,
            delay_offset=cfg.crosstalk.delay_offset,
            delay_window=cfg.crosstalk.delay_window,
            delay_distribution=cfg.crosstalk.delay_distribution,
        ))
    return validate_config(cfg)


def _matrix(args, M_max: int) -> ProbabilityMatrix:
    if getattr(args, "matrix", None):
        return ProbabilityMatrix.load(args.matrix)
    cfg = _config(args)
    w, eta = cfg.illumination_weights, cfg.pixel_efficiencies
    if len(set(w)) == 1 and len(set(eta)) == 1:
        return build_uniform_pmatrix(cfg.pixel_count, eta[0], M_max)
    return build_weighted_pmatrix(w, eta, M_max)


def _add_array_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="detector array JSON config")
    p.add_argument("--pixels", type=int, help="uniform array pixel count (overrides config)")
    p.add_argument("--efficiency", type=float, help="per-pixel efficiency (overrides config)")


def _add_window_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--tags", required=False, help="tag file (.sntt or .csv)")
    p.add_argument("--period-ps", type=int, help="trigger period (default: from metadata)")
    p.add_argument("--offset-ps", type=int, help="window start after trigger (default: trigger delay - 500)")
    p.add_argument("--width-ps", type=int, default=1000, help="window width")
    p.add_argument("--distinct", action="store_true", help="count each channel once per window")
    p.add_argument("--max-clicks", type=int, help="fold higher click numbers into this bin")


# --- subcommands --------------------------------------------------------


def cmd_pmatrix(args) -> int:
    P = _matrix(args, args.max_photons)
    text = P.to_json() + "\n" if args.format == "json" else P.to_csv()
    _emit(text, args.out)
    if args.check_table:
        ref = ProbabilityMatrix.load(args.check_table).entries
        rows, cols = min(ref.shape[0], P.entries.shape[0]), min(ref.shape[1], P.entries.shape[1])
        dev = float(np.max(np.abs(P.entries[:rows, :cols] - ref[:rows, :cols])))
        print(f"max absolute deviation: {dev:.6f}", file=sys.stderr)
        if dev > args.tolerance:
            raise CheckFailed(f"deviation {dev:.6f} exceeds tolerance {args.tolerance}")
    return 0


def _source(args) -> LightSourceSpec:
    src = LightSourceSpec()
    if args.source:
        with open(_resolve(args.source)) as fh:
            src = source_from_dict(json.load(fh))
    flags = {
        "mode": args.mode, "rep_rate": args.rep_rate, "mu": args.mu,
        "statistics": args.statistics, "pulse_shape": args.shape,
        "pulse_width": args.width_ns, "pulse_tau": args.tau_ns,
        "cw_rate": args.cw_rate, "pedestal_rate": args.pedestal_rate,
    }
    return replace(src, **{k: v for k, v in flags.items() if v is not None})


def cmd_simulate(args) -> int:
    cfg = _config(args)
    src = _source(args)
    run = SimulationRun(
        cfg=cfg, source=src,
        pulses=args.pulses or 0, duration=args.duration or 0.0, seed=args.seed,
        crosstalk=not args.no_crosstalk, darks=not args.no_darks,
        recovery=not args.no_recovery, jitter=not args.no_jitter,
        trigger_delay_ps=args.trigger_delay_ps,
    )
    res = simulate(run, threads=args.threads)
    save_stream(res.stream, args.out)
    print(json.dumps({"tags": len(res.stream), **res.stats}))
    return 0


def _counts(args):
    stream = load_stream(args.tags)
    period = args.period_ps or stream.trigger_period
    if period is None:
        raise ValueError("trigger period unknown: pass --period-ps")
    offset = args.offset_ps
    if offset is None:
        offset = int(stream.metadata.get("trigger_delay_ps", 500)) - 500
    return window_clicks(stream, period, offset, args.width_ps, distinct_channels=args.distinct)


def _click_stats_from_args(args, n_rows: int | None = None) -> ClickStatistics:
    if getattr(args, "clicks", None):
        text = Path(args.clicks).read_text()
        return ClickStatistics.from_csv(text) if args.clicks.endswith(".csv") else ClickStatistics.from_json(text)
    if not args.tags:
        raise ValueError("pass --clicks or --tags")
    n_max = args.max_clicks if args.max_clicks is not None else n_rows
    return click_statistics(_counts(args), n_max=n_max)


def cmd_analyze(args) -> int:
    if args.what == "clicks":
        Q = click_statistics(_counts(args), n_max=args.max_clicks)
        text = Q.to_csv() if args.out and args.out.endswith(".csv") else Q.to_json() + "\n"
        _emit(text, args.out)
    elif args.what == "profile":
        stream = load_stream(args.tags)
        period = args.period_ps or stream.trigger_period
        if period is None:
            raise ValueError("trigger period unknown: pass --period-ps")
        h = time_profile_histogram(stream, period, args.bin_ps, channel=args.channel)
        _emit(h.to_csv(), args.out)
        if args.out:
            try:
                width = h.fwhm()
            except ValueError:
                width = None
            print(json.dumps({"tags": int(h.counts.sum()), "fwhm_ps": width}))
    elif args.what == "crosstalk":
        stream = load_stream(args.tags)
        h, n_primary = crosstalk_histogram(stream, args.primary, args.secondary, args.max_lag_ps, args.bin_ps)
        est = estimate_crosstalk_probability(h, n_primary, tuple(args.lag_range))
        summary = json.dumps(asdict(est))
        if args.out:
            Path(args.out).write_text(h.to_csv())
            print(summary)
        else:
            print(summary)
    elif args.what == "recovery":
        stream = load_stream(args.tags)
        est = recovery_curve_from_tags(
            stream, bin_width=args.bin_ns, max_lag=args.max_lag_ns, min_count=args.min_count
        )
        summary = json.dumps({"rt90_ns": est.rt90, "plateau": est.plateau, "dropped_bins": list(est.dropped)})
        if args.out:
            Path(args.out).write_text(est.to_csv())
        print(summary)
    return 0


def cmd_fit_mu(args) -> int:
    P = _matrix(args, args.max_photons)
    Q = _click_stats_from_args(args, P.pixel_count)
    fit = fit_poisson_mu(Q, P)
    _emit(json.dumps(asdict(fit)) + "\n", args.out)
    return 0


def cmd_reconstruct(args) -> int:
    P = _matrix(args, args.max_photons)
    Q = _click_stats_from_args(args, P.pixel_count)
    M = args.reconstruct_max if args.reconstruct_max is not None else min(2 * P.pixel_count, P.truncation)
    res = reconstruct_distribution(Q, P, M_max=M)
    doc = {
        "probabilities": res.distribution.probabilities.tolist(),
        "mean": res.distribution.mean,
        "residual": res.residual,
        "iterations": res.iterations,
        "converged": res.converged,
        "condition_number": res.condition_number,
    }
    _emit(json.dumps(doc) + "\n", args.out)
    return 0


def cmd_rate_curve(args) -> int:
    cfg = _config(args)
    if args.single_pixel:
        cfg = single_pixel_config(cfg)
    rates = args.rates or np.geomspace(args.min_rate, args.max_rate, args.points)
    curve = sde_vs_rate(
        cfg, rates, duration=args.duration, seed=args.seed,
        photons_per_point=args.photons_per_point, threads=args.threads,
    )
    try:
        mcr = extract_mcr(curve)
    except ValueError:
        mcr = None
    if args.out:
        Path(args.out).write_text(curve.to_csv())
        print(json.dumps({"mcr_cps": mcr, "sde_max": float(curve.sde.max())}))
    else:
        sys.stdout.write(curve.to_csv())
    return 0


def cmd_herald(args) -> int:
    P = _matrix(args, args.max_photons)
    nbar = args.nbar or np.geomspace(args.nbar_min, args.nbar_max, args.points)
    rows = g2_reduction(
        nbar, P,
        bucket_efficiency=args.bucket_efficiency,
        herald_transmission=args.herald_transmission,
        statistics=args.statistics,
        pnr_condition=HeraldCondition.exactly(args.herald_clicks),
        bucket=P if args.identical else None,
        M_max=args.max_photons,
    )
    _emit(reduction_csv(rows), args.out)
    return 0


# --- parser -------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pnrarray", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("--threads", type=int, default=None, help="worker cap (default: all cores)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pmatrix", help="click-probability matrix")
    _add_array_flags(p)
    p.add_argument("--max-photons", type=int, default=8)
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--out")
    p.add_argument("--check-table", help="reference matrix CSV to compare against")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=cmd_pmatrix)

    p = sub.add_parser("simulate", help="Monte Carlo tag generation")
    _add_array_flags(p)
    p.add_argument("--source", help="light source JSON")
    p.add_argument("--mode", choices=("pulsed", "cw"))
    p.add_argument("--rep-rate", type=float)
    p.add_argument("--mu", type=float)
    p.add_argument("--statistics", choices=("poisson", "fock", "thermal"))
    p.add_argument("--shape", choices=("delta", "square", "exponential"))
    p.add_argument("--width-ns", type=float)
    p.add_argument("--tau-ns", type=float)
    p.add_argument("--cw-rate", type=float)
    p.add_argument("--pedestal-rate", type=float)
    p.add_argument("--crosstalk-prob", type=float, help="same probability on every adjacent ordered pair")
    group = p.add_mutually_exclusive_group()
    group.add_argument("--pulses", type=int)
    group.add_argument("--duration", type=float, help="seconds (CW)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trigger-delay-ps", type=int, default=1000)
    for name in ("crosstalk", "darks", "recovery", "jitter"):
        p.add_argument(f"--no-{name}", action="store_true")
    p.add_argument("--out", required=True, help="output tags (.sntt or .csv)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("analyze", help="tag-stream analyses")
    asub = p.add_subparsers(dest="what", required=True)
    a = asub.add_parser("clicks", help="per-pulse click statistics")
    _add_window_flags(a)
    a.add_argument("--out")
    a = asub.add_parser("profile", help="time profile modulo the trigger period")
    a.add_argument("--tags", required=True)
    a.add_argument("--period-ps", type=int)
    a.add_argument("--bin-ps", type=int, default=100)
    a.add_argument("--channel", type=int)
    a.add_argument("--out")
    a = asub.add_parser("crosstalk", help="crosstalk lag histogram and probability")
    a.add_argument("--tags", required=True)
    a.add_argument("--primary", type=int, required=True)
    a.add_argument("--secondary", type=int, required=True)
    a.add_argument("--max-lag-ps", type=int, default=20000)
    a.add_argument("--bin-ps", type=int, default=100)
    a.add_argument("--lag-range", type=float, nargs=2, default=(1000.0, 5000.0), metavar=("LO", "HI"))
    a.add_argument("--out")
    a = asub.add_parser("recovery", help="efficiency vs time since last click (CW run)")
    a.add_argument("--tags", required=True)
    a.add_argument("--bin-ns", type=float, default=0.25)
    a.add_argument("--max-lag-ns", type=float, default=30.0)
    a.add_argument("--min-count", type=int, default=100)
    a.add_argument("--out")
    p.set_defaults(func=cmd_analyze)

    for name, func, extra in (
        ("fit-mu", cmd_fit_mu, "Poisson mean-photon-number fit"),
        ("reconstruct", cmd_reconstruct, "photon-number distribution reconstruction"),
    ):
        p = sub.add_parser(name, help=extra)
        _add_array_flags(p)
        p.add_argument("--matrix", help="P matrix file (.csv or .json)")
        p.add_argument("--max-photons", type=int, default=40)
        p.add_argument("--clicks", help="click statistics (.json or .csv)")
        _add_window_flags(p)
        p.add_argument("--out")
        if name == "reconstruct":
            p.add_argument("--reconstruct-max", type=int, help="photon-number truncation (default 2N)")
        p.set_defaults(func=func)

    p = sub.add_parser("rate-curve", help="SDE versus detection rate")
    _add_array_flags(p)
    p.add_argument("--rates", type=float, nargs="+")
    p.add_argument("--min-rate", type=float, default=1e6)
    p.add_argument("--max-rate", type=float, default=3e10)
    p.add_argument("--points", type=int, default=16)
    p.add_argument("--duration", type=float, help="seconds per point")
    p.add_argument("--photons-per-point", type=float, default=2e5)
    p.add_argument("--single-pixel", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_rate_curve)

    p = sub.add_parser("herald", help="heralded g2(0): PNR array vs bucket detector")
    _add_array_flags(p)
    p.add_argument("--matrix")
    p.add_argument("--max-photons", type=int, default=60)
    p.add_argument("--bucket-efficiency", type=float, default=0.90)
    p.add_argument("--herald-transmission", type=float, default=0.95)
    p.add_argument("--statistics", choices=("thermal", "poisson"), default="thermal")
    p.add_argument("--herald-clicks", type=int, default=1)
    p.add_argument("--identical", action="store_true", help="use the PNR matrix as the bucket too")
    p.add_argument("--nbar", type=float, nargs="+")
    p.add_argument("--nbar-min", type=float, default=0.01)
    p.add_argument("--nbar-max", type=float, default=1.0)
    p.add_argument("--points", type=int, default=21)
    p.add_argument("--out")
    p.set_defaults(func=cmd_herald)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CheckFailed as exc:
        print(f"check failed: {exc}", file=sys.stderr)
        return EXIT_CHECK
    except TagFormatError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
