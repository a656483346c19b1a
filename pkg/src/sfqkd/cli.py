"""Command-line front end.

Exit codes: 0 success, 2 config/usage, 3 domain, 4 non-convergence,
5 I/O, 6 tag-file format.
"""
from __future__ import annotations

import argparse
import csv
import io
import sys
from pathlib import Path

import numpy as np

from . import serialize
from .calibrate import DEFAULT_BOOTSTRAP, DegenerateDataError, ScanKind, ScanPoint, fit_key_rate_scan, fit_noise_scan
from .config import ConfigError, ResolvedConfig, load_config
from .model import DomainError, FibreModel, OperatingPoint, evaluate_point
from .optimize import OptimizationRequest, SweepParameter, SweepSpec, curve_peaks, optimize_fov, run_sweep, scenario_walk
from .tags import SimConfig, Site, TagFormatError, extract_coincidences, read_tags, simulate_tags, synchronize, write_tags

EXIT_OK, EXIT_USAGE, EXIT_DOMAIN, EXIT_NONCONVERGED, EXIT_IO, EXIT_FORMAT = 0, 2, 3, 4, 5, 6

SWEEP_COLUMNS = (
    "param_name", "param_value", "theta_sf_urad", "tau_ps", "key_rate_bps", "key_rate_raw_bps", "qber",
    "c_sift_cps", "c_measured_cps", "c_true_cps", "c_acc_cps", "eta_c", "s_bob_true_cps",
    "s_bob_background_cps", "s_bob_total_cps",
)


class UsageError(Exception):
    pass


def _envelope(command: str, cfg: ResolvedConfig, result, **extra) -> dict:
    doc = {"command": command, **extra, "result": result}
    doc["config"] = cfg.values
    doc["provenance"] = cfg.provenance
    return doc


def _emit(args, text: str) -> None:
    if args.out:
        Path(args.out).write_text(text)
        if not args.quiet:
            print(f"wrote {args.out}", file=sys.stderr)
    elif not args.quiet:
        sys.stdout.write(text)


def _require_seed(args) -> int:
    if args.seed is None:
        raise UsageError(f"'{args.command}' is randomized and needs an explicit --seed")
    if args.seed < 0:
        raise UsageError("--seed must be nonnegative")
    return args.seed


def cmd_eval(args, cfg: ResolvedConfig) -> int:
    if args.theta_urad is not None:
        cfg = cfg.with_override("operating", "theta_sf_urad", args.theta_urad)
    if args.tau_ps is not None:
        cfg = cfg.with_override("operating", "tau_ps", args.tau_ps)
    if args.no_fibre:
        cfg = cfg.with_override("operating", "fibre_model", FibreModel.NO_FIBRE.value)
    br = evaluate_point(cfg.link(), cfg.system(), cfg.operating_point())
    _emit(args, serialize.dumps(_envelope("eval", cfg, br.as_dict())))
    return EXIT_OK


def _read_scan(path, kind: ScanKind) -> list[ScanPoint]:
    text = Path(path).read_text()
    rows = [r for r in csv.reader(io.StringIO(text)) if r and not r[0].lstrip().startswith("#")]
    if not rows:
        raise UsageError(f"{path}: empty scan file")
    header = [h.strip() for h in rows[0]]
    if header != ["theta_sf_urad", "value"]:
        raise UsageError(f"{path}: header must be 'theta_sf_urad,value'")
    if len(rows) < 2:
        raise UsageError(f"{path}: no data rows")
    try:
        return [ScanPoint(float(r[0]), float(r[1]), kind) for r in rows[1:]]
    except (ValueError, IndexError) as exc:
        raise UsageError(f"{path}: bad row ({exc})") from None


def cmd_fit(args, cfg: ResolvedConfig) -> int:
    kind = ScanKind.NOISE if args.kind == "noise" else ScanKind.KEY
    if kind is ScanKind.KEY and args.b0_cps is None:
        raise UsageError("--kind keyrate needs --b0-cps")
    n_boot = args.bootstrap
    seed = _require_seed(args) if n_boot > 0 else 0
    points = _read_scan(args.input, kind)
    try:
        if kind is ScanKind.NOISE:
            fit = fit_noise_scan(points, fix_gamma=args.fix_gamma, n_boot=n_boot, seed=seed)
        else:
            gamma = args.fix_gamma if args.fix_gamma is not None else cfg.get("link", "gamma_urad")
            op = OperatingPoint(1.0, cfg.get("operating", "tau_ps"), FibreModel(cfg.get("operating", "fibre_model")))
            fit = fit_key_rate_scan(points, args.b0_cps, cfg.system(), op, gamma=gamma, n_boot=n_boot, seed=seed)
    except DegenerateDataError as exc:
        raise DomainError(str(exc)) from None
    text = serialize.dumps(_envelope("fit", cfg, fit.as_dict(), kind=args.kind, input=str(args.input)))
    _emit(args, text)
    return EXIT_OK if fit.converged else EXIT_NONCONVERGED


def _request(cfg: ResolvedConfig) -> OptimizationRequest:
    o = cfg.values["optimize"]
    return OptimizationRequest(
        cfg.link(),
        cfg.system(),
        FibreModel(o["fibre_model"]),
        o["optimize_tau"],
        (o["theta_min_urad"], o["theta_max_urad"]),
        (o["tau_min_ps"], o["tau_max_ps"]),
        cfg.get("operating", "tau_ps"),
    )


def cmd_optimize(args, cfg: ResolvedConfig) -> int:
    opt = optimize_fov(_request(cfg))
    result = {
        "theta_sf_urad": opt.theta,
        "tau_ps": opt.tau,
        "key_rate_bps": opt.key_rate,
        "boundary": opt.boundary,
        "note": opt.note,
        "breakdown": opt.breakdown.as_dict(),
    }
    _emit(args, serialize.dumps(_envelope("optimize", cfg, result)))
    return EXIT_OK


def _config_comments(cfg: ResolvedConfig) -> list[str]:
    return [f"{s}.{k} = {serialize.to_plain(v)}" for s, kv in cfg.values.items() for k, v in kv.items()]


def cmd_sweep(args, cfg: ResolvedConfig) -> int:
    s, o = cfg.values["sweep"], cfg.values["optimize"]
    out_dir = Path(args.out or ".")
    out_dir.mkdir(parents=True, exist_ok=True)
    theta_grid = np.linspace(o["theta_min_urad"], o["theta_max_urad"], s["theta_points_count"])
    summary = {}
    for param in SweepParameter:
        unit = param.unit
        values = np.linspace(s[f"{param.value}_min_{unit}"], s[f"{param.value}_max_{unit}"], s["points_count"])
        spec = SweepSpec(cfg.link(), cfg.system(), param, tuple(values), FibreModel(o["fibre_model"]))
        rows = run_sweep(spec, o["optimize_tau"], theta_grid, tau=cfg.get("operating", "tau_ps"),
                         tau_bounds=(o["tau_min_ps"], o["tau_max_ps"]))
        table = []
        for r in rows:
            b = r.breakdown
            table.append((
                r.param_name, r.param_value, r.theta, r.tau, b.key_rate, b.key_rate_raw, b.qber, b.c_sift,
                b.c_measured, b.c_true, b.c_acc, b.eta_c, b.s_bob_true, b.s_bob_background, b.s_bob_total,
            ))
        path = out_dir / f"sweep_{param.value}.csv"
        path.write_text(serialize.csv_text(SWEEP_COLUMNS, table, _config_comments(cfg)))
        summary[param.value] = {
            "file": path.name,
            "unit": unit,
            "peaks": [
                {"param_value": v, "theta_sf_urad": th, "tau_ps": tau, "key_rate_bps": rate}
                for v, (th, tau, rate) in sorted(curve_peaks(rows).items())
            ],
        }
    (out_dir / "sweep_summary.json").write_text(serialize.dumps(_envelope("sweep", cfg, summary)))
    if not args.quiet:
        print(f"wrote {len(summary)} sweep tables to {out_dir}", file=sys.stderr)
    return EXIT_OK


def cmd_scenario(args, cfg: ResolvedConfig) -> int:
    sc, o = cfg.values["scenario"], cfg.values["optimize"]
    report = scenario_walk(
        cfg.link(),
        cfg.system(),
        sc["delta_start_urad"],
        sc["delta_changed_urad"],
        FibreModel(o["fibre_model"]),
        sc["optimize_tau"],
        (o["theta_min_urad"], o["theta_max_urad"]),
        (o["tau_min_ps"], o["tau_max_ps"]),
        cfg.get("operating", "tau_ps"),
    )
    _emit(args, serialize.dumps(_envelope("scenario", cfg, report.as_dict())))
    return EXIT_OK


def _sim_config(cfg: ResolvedConfig, seed: int) -> SimConfig:
    s = cfg.values["simulation"]
    return SimConfig(
        cfg.link(), cfg.system(), cfg.operating_point(), s["duration_s"], seed, s["clock_offset_ps"], s["clock_drift_frac"]
    )


def cmd_simulate(args, cfg: ResolvedConfig) -> int:
    seed = _require_seed(args)
    if args.theta_urad is not None:
        cfg = cfg.with_override("operating", "theta_sf_urad", args.theta_urad)
    alice, bob = simulate_tags(_sim_config(cfg, seed))
    out_dir = Path(args.out or ".")
    out_dir.mkdir(parents=True, exist_ok=True)
    write_tags(out_dir / "alice.tags", alice)
    write_tags(out_dir / "bob.tags", bob)
    result = {"alice_file": "alice.tags", "bob_file": "bob.tags", "alice_count": len(alice), "bob_count": len(bob)}
    (out_dir / "simulate.json").write_text(serialize.dumps(_envelope("simulate", cfg, result, seed=seed)))
    if not args.quiet:
        print(f"wrote {len(alice)} + {len(bob)} tags to {out_dir}", file=sys.stderr)
    return EXIT_OK


def _durations(args, cfg: ResolvedConfig):
    return args.duration_s if args.duration_s is not None else cfg.get("simulation", "duration_s")


def cmd_sync(args, cfg: ResolvedConfig) -> int:
    span = _durations(args, cfg)
    alice = read_tags(args.alice, span, Site.ALICE)
    bob = read_tags(args.bob, span, Site.BOB)
    res = synchronize(alice, bob)
    result = {"offset_ps": res.offset, "drift": res.drift, "significance": res.significance}
    if args.corrected:
        write_tags(args.corrected, res.corrected)
        result["corrected_file"] = str(args.corrected)
    _emit(args, serialize.dumps(_envelope("sync", cfg, result)))
    return EXIT_OK


def cmd_coincide(args, cfg: ResolvedConfig) -> int:
    if args.tau_ps is not None:
        cfg = cfg.with_override("operating", "tau_ps", args.tau_ps)
    span = _durations(args, cfg)
    alice = read_tags(args.alice, span, Site.ALICE)
    bob = read_tags(args.bob, span, Site.BOB)
    res = extract_coincidences(alice, bob, cfg.get("operating", "tau_ps"), span, cfg.get("system", "f_ec_factor"))
    _emit(args, serialize.dumps(_envelope("coincide", cfg, res.as_dict())))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI configuration file (defaults used when omitted)")
    common.add_argument("--out", help="output file (or directory for sweep/simulate)")
    common.add_argument("--seed", type=int, help="master seed for randomized commands")
    common.add_argument("--quiet", action="store_true", help="suppress console output")

    parser = argparse.ArgumentParser(prog="sfqkd", description="Free-space QKD key-rate model and tools")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("eval", parents=[common], help="rate breakdown at one operating point")
    p.add_argument("--theta-urad", type=float)
    p.add_argument("--tau-ps", type=float)
    p.add_argument("--no-fibre", action="store_true", help="use the no-fibre noise model")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("fit", parents=[common], help="fit a noise or key-rate scan")
    p.add_argument("--kind", choices=("noise", "keyrate"), required=True)
    p.add_argument("--in", dest="input", required=True, help="CSV with header theta_sf_urad,value")
    p.add_argument("--fix-gamma", type=float, help="hold gamma (urad) fixed")
    p.add_argument("--b0-cps", type=float, help="noise amplitude, required for keyrate fits")
    p.add_argument("--bootstrap", type=int, default=DEFAULT_BOOTSTRAP, help="bootstrap resamples (0 disables)")
    p.set_defaults(func=cmd_fit)

    for name, func, text in (
        ("optimize", cmd_optimize, "optimal field stop (and window)"),
        ("sweep", cmd_sweep, "key-rate curves over B0, Delta and S0"),
        ("scenario", cmd_scenario, "fixed versus re-optimized field stop walk"),
    ):
        p = sub.add_parser(name, parents=[common], help=text)
        p.set_defaults(func=func)

    p = sub.add_parser("simulate", parents=[common], help="Monte Carlo tag streams")
    p.add_argument("--theta-urad", type=float)
    p.set_defaults(func=cmd_simulate)

    for name, func, text in (("sync", cmd_sync, "recover clock offset and drift"),
                             ("coincide", cmd_coincide, "coincidences, QBER and key rate")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("alice")
        p.add_argument("bob")
        p.add_argument("--duration-s", type=float, help="acquisition time (default from config)")
        if name == "sync":
            p.add_argument("--corrected", help="write Bob's corrected tags here")
        else:
            p.add_argument("--tau-ps", type=float)
        p.set_defaults(func=func)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TagFormatError as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (DomainError, ValueError) as exc:
        print(f"domain error: {exc}", file=sys.stderr)
        return EXIT_DOMAIN


if __name__ == "__main__":
    sys.exit(main())
