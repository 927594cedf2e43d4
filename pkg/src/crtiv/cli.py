"""Command line driver: estimate, weights, simulate.

Exit codes partition outcomes: 0 success, 1 environment/input problems
(unreadable files, invalid trial data, bad configuration), 2 statistical
degeneracy (zero compliance difference, no compliers) and usage errors.

Every single-stream report (estimate, weights) embeds its run manifest.  The
simulate command writes the manifest to a sibling manifest.json instead: the
report CSV must stay byte-identical across worker counts for the same seed,
and the manifest necessarily records worker count and wall-clock duration.
"""

import argparse
import dataclasses
import hashlib
import json
import os
import sys
import time
import warnings
from fractions import Fraction
from importlib import resources

from . import __version__
from .data import ingest_csv, summarize
from .errors import (
    CapExceeded,
    ConfigError,
    CrtivError,
    EstimationError,
    InvalidTrialError,
)
from .estimators import (
    METHOD_CLUSTER_LEVEL,
    METHOD_EFFECT_RATIO,
    METHOD_TSLS,
    estimate_cluster_level,
    estimate_effect_ratio,
    estimate_tsls,
)
from .identification import identified_value, method_weights, read_spec_csv, true_cace
from .regions import RegionKind
from .simulation import (
    report_tables,
    run_scenario,
    scenario_from_json,
    write_report_csv,
)

_MC_FALLBACK_DRAWS = 100_000

_METHOD_FLAGS = {"cl": METHOD_CLUSTER_LEVEL, "tsls": METHOD_TSLS, "er": METHOD_EFFECT_RATIO}
_VALID_CI = {"cl": ("delta",), "tsls": ("sandwich",), "er": ("quadratic", "permutation")}

_KIND_PROSE = {
    RegionKind.FINITE_INTERVAL: "finite",
    RegionKind.COMPLEMENT_OF_INTERVAL: "two rays",
    RegionKind.WHOLE_LINE: "whole line",
    RegionKind.EMPTY: "empty",
}

_DEFAULT_SCENARIO_RESOURCE = "default_scenario.json"


def _file_digest(path) -> str:
    """64-bit content hash, hex."""
    h = hashlib.blake2b(digest_size=8)
    with open(path, "rb") as handle:
        for block in iter(lambda: handle.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def _resolve_seed(cli_seed):
    if cli_seed is not None:
        return cli_seed
    env = os.environ.get("CRTIV_SEED")
    if env is None:
        return None
    try:
        return int(env)
    except ValueError:
        raise ConfigError(f"CRTIV_SEED must be an integer, got {env!r}") from None


def _manifest(command, options, input_digests, seeds, duration) -> dict:
    return {
        "command": command,
        "options": options,
        "input_digests": input_digests,
        "seeds": seeds,
        "version": __version__,
        "duration_seconds": duration,
    }


def _print_manifest_text(manifest, out):
    print("manifest:", file=out)
    print(f"  command: {manifest['command']}", file=out)
    print(f"  version: {manifest['version']}", file=out)
    for key, value in manifest["options"].items():
        print(f"  option {key}: {value}", file=out)
    for name, digest in manifest["input_digests"].items():
        print(f"  input {name}: {digest}", file=out)
    for name, value in manifest["seeds"].items():
        print(f"  seed {name}: {value}", file=out)
    print(f"  duration_seconds: {manifest['duration_seconds']:.3f}", file=out)


def _flatten(payload, prefix=""):
    rows = []
    for key, value in payload.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            rows.extend(_flatten(value, prefix=f"{name}."))
        elif isinstance(value, (list, tuple)):
            for i, item in enumerate(value):
                rows.append((f"{name}[{i}]", item))
        else:
            rows.append((name, value))
    return rows


def _csv_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    text = str(value)
    if any(ch in text for ch in ',"\n'):
        text = '"' + text.replace('"', '""') + '"'
    return text


def _emit(payload, manifest, fmt, out):
    if fmt == "json":
        payload = dict(payload)
        payload["manifest"] = manifest
        json.dump(payload, out, indent=2, default=str)
        out.write("\n")
        return
    if fmt == "csv":
        for name, digest in manifest["input_digests"].items():
            print(f"# manifest input {name}={digest}", file=out)
        print(f"# manifest command={manifest['command']} version={manifest['version']}", file=out)
        print("field,value", file=out)
        for name, value in _flatten(payload):
            print(f"{_csv_cell(name)},{_csv_cell(value)}", file=out)
        return
    _emit_text(payload, out)
    _print_manifest_text(manifest, out)


def _emit_text(payload, out, indent=""):
    for key, value in payload.items():
        if isinstance(value, dict):
            print(f"{indent}{key}:", file=out)
            _emit_text(value, out, indent + "  ")
        elif isinstance(value, (list, tuple)):
            if not value:
                continue
            print(f"{indent}{key}:", file=out)
            for item in value:
                print(f"{indent}  - {item}", file=out)
        else:
            if isinstance(value, float):
                value = format(value, ".10g")
            print(f"{indent}{key}: {value}", file=out)


def cmd_estimate(args) -> int:
    if args.ci is None:
        args.ci = _VALID_CI[args.method][0]
    if args.ci not in _VALID_CI[args.method]:
        valid = "|".join(_VALID_CI[args.method])
        args.parser.error(
            f"--ci {args.ci} is not valid for --method {args.method} (valid: {valid})"
        )
    seed = _resolve_seed(args.seed)
    start = time.perf_counter()
    trial = ingest_csv(args.data)
    summaries = summarize(trial)
    m, j, n = trial.m, trial.J, trial.n
    notes = []
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        if args.method == "cl":
            report = estimate_cluster_level(summaries, m, j, args.alpha)
        elif args.method == "tsls":
            report = estimate_tsls(summaries, m, j, n, args.alpha)
        elif args.ci == "quadratic":
            report = estimate_effect_ratio(summaries, m, j, args.alpha, "quadratic")
        else:
            try:
                report = estimate_effect_ratio(
                    summaries,
                    m,
                    j,
                    args.alpha,
                    "permutation",
                    perm_seed=seed,
                    perm_cap=args.perm_cap,
                )
            except CapExceeded as exc:
                notes.append(f"{exc}; fell back to {_MC_FALLBACK_DRAWS} Monte Carlo draws")
                report = estimate_effect_ratio(
                    summaries,
                    m,
                    j,
                    args.alpha,
                    "permutation",
                    perm_draws=_MC_FALLBACK_DRAWS,
                    perm_seed=seed,
                    perm_cap=args.perm_cap,
                )
    notes.extend(str(w.message) for w in caught)
    if report.region.is_infinite:
        notes.append(
            "infinite confidence region: the data carry little information "
            "about the effect (weak instrument)"
        )
    duration = time.perf_counter() - start
    region = report.region
    payload = {
        "method": report.method,
        "ci": args.ci,
        "alpha": report.alpha,
        "clusters": j,
        "treated_clusters": m,
        "units": n,
        "point_estimate": report.point,
        "variance": report.variance,
        "region": {
            "kind": region.kind.value,
            "kind_text": _KIND_PROSE[region.kind],
            "lo": region.lo,
            "hi": region.hi,
            "set": region.describe(),
        },
        "diagnostics": report.diagnostics,
        "warnings": notes,
    }
    manifest = _manifest(
        "estimate",
        {
            "data": args.data,
            "method": args.method,
            "ci": args.ci,
            "alpha": args.alpha,
            "perm_cap": args.perm_cap,
            "format": args.format,
        },
        {"data": _file_digest(args.data)},
        {"seed": seed},
        duration,
    )
    _emit(payload, manifest, args.format, sys.stdout)
    return 0


def _format_exact(value):
    if isinstance(value, Fraction):
        return str(value)
    if isinstance(value, float):
        return format(value, ".10g")
    return str(value)


def cmd_weights(args) -> int:
    start = time.perf_counter()
    specs = read_spec_csv(args.spec, exact=args.exact)
    truth = true_cace(specs)
    methods = (METHOD_CLUSTER_LEVEL, METHOD_TSLS, METHOD_EFFECT_RATIO)
    table = {}
    for method in methods:
        value = identified_value(specs, method)
        table[method] = {
            "weights": method_weights(specs, method),
            "identified_value": value,
            "gap": abs(value - truth),
        }
    duration = time.perf_counter() - start
    manifest = _manifest(
        "weights",
        {"spec": args.spec, "exact": args.exact, "format": args.format},
        {"spec": _file_digest(args.spec)},
        {},
        duration,
    )
    if args.format == "json":
        payload = {
            "clusters": len(specs),
            "units": sum(s.n for s in specs),
            "compliers": _format_exact(sum(s.n_co for s in specs)) if args.exact else float(sum(s.n_co for s in specs)),
            "true_cace": _format_exact(truth) if args.exact else float(truth),
            "methods": {
                method: {
                    "identified_value": _format_exact(row["identified_value"]) if args.exact else float(row["identified_value"]),
                    "gap": _format_exact(row["gap"]) if args.exact else float(row["gap"]),
                    "weights": [_format_exact(w) if args.exact else float(w) for w in row["weights"]],
                }
                for method, row in table.items()
            },
            "manifest": manifest,
        }
        json.dump(payload, sys.stdout, indent=2, default=str)
        sys.stdout.write("\n")
        return 0
    if args.format == "csv":
        print(f"# manifest input spec={manifest['input_digests']['spec']}", file=sys.stdout)
        print(f"# manifest command=weights version={__version__}", file=sys.stdout)
        print("quantity,method,cluster,value", file=sys.stdout)
        print(f"true_cace,,,{_format_exact(truth)}", file=sys.stdout)
        for method, row in table.items():
            print(f"identified_value,{method},,{_format_exact(row['identified_value'])}")
            print(f"gap,{method},,{_format_exact(row['gap'])}")
            for idx, w in enumerate(row["weights"], start=1):
                print(f"weight,{method},{idx},{_format_exact(w)}")
        return 0
    out = sys.stdout
    units = sum(s.n for s in specs)
    compliers = sum(s.n_co for s in specs)
    print(f"population: {len(specs)} clusters, {units} units, {_format_exact(compliers)} compliers", file=out)
    print(f"true CACE (complier-weighted): {_format_exact(truth)}", file=out)
    print("", file=out)
    width = max(len(m) for m in methods)
    print(f"{'method':<{width}}  {'identified value':>18}  {'gap from true':>14}", file=out)
    for method, row in table.items():
        value = _format_exact(row["identified_value"])
        gap = _format_exact(row["gap"])
        print(f"{method:<{width}}  {value:>18}  {gap:>14}", file=out)
    print("", file=out)
    print("per-cluster identification weights:", file=out)
    header = f"  {'cluster':>7}  {'n':>6}  {'n_co':>8}  {'tau':>10}"
    for method in methods:
        header += f"  {method:>15}"
    print(header, file=out)
    for idx, spec in enumerate(specs):
        row = f"  {idx + 1:>7}  {spec.n:>6}  {_format_exact(spec.n_co):>8}  {_format_exact(spec.tau):>10}"
        for method in methods:
            row += f"  {_format_exact(table[method]['weights'][idx]):>15}"
        print(row, file=out)
    _print_manifest_text(manifest, out)
    return 0


def cmd_simulate(args) -> int:
    start = time.perf_counter()
    if args.scenario is None:
        bundled = resources.files("crtiv").joinpath("data", _DEFAULT_SCENARIO_RESOURCE)
        with resources.as_file(bundled) as path:
            scenario = scenario_from_json(path)
        scenario_name = f"bundled:{_DEFAULT_SCENARIO_RESOURCE}"
        scenario_digest = hashlib.blake2b(bundled.read_bytes(), digest_size=8).hexdigest()
    else:
        scenario = scenario_from_json(args.scenario)
        scenario_name = args.scenario
        scenario_digest = _file_digest(args.scenario)
    seed = _resolve_seed(args.seed)
    if seed is not None:
        scenario = dataclasses.replace(scenario, seed=seed)
    os.makedirs(args.out, exist_ok=True)
    report = run_scenario(scenario, workers=args.workers)
    csv_path = os.path.join(args.out, "report.csv")
    tables_path = os.path.join(args.out, "tables.txt")
    write_report_csv(report, csv_path)
    with open(tables_path, "w", encoding="utf-8") as handle:
        handle.write(report_tables(report))
    duration = time.perf_counter() - start
    manifest = _manifest(
        "simulate",
        {
            "scenario": scenario_name,
            "out": args.out,
            "workers": args.workers,
            "replicates": scenario.replicates,
            "j_grid": list(scenario.j_grid),
            "gamma_grid": list(scenario.gamma_grid),
            "alpha_level": scenario.alpha_level,
            "coverage_target": scenario.coverage_target,
        },
        {"scenario": scenario_digest},
        {"master": report.master_seed},
        duration,
    )
    manifest["output_digests"] = {
        "report.csv": _file_digest(csv_path),
        "tables.txt": _file_digest(tables_path),
    }
    with open(os.path.join(args.out, "manifest.json"), "w", encoding="utf-8") as handle:
        json.dump(manifest, handle, indent=2)
        handle.write("\n")
    print(f"wrote {csv_path}, {tables_path}, manifest.json (seed {report.master_seed})")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crtiv",
        description=(
            "Complier average effects in cluster randomized trials with "
            "noncompliance: estimation, identification weights, simulation."
        ),
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    est = sub.add_parser("estimate", help="estimate the complier effect from a trial CSV")
    est.add_argument("--data", required=True, help="trial CSV with columns cluster_id,z,d,y")
    est.add_argument("--method", required=True, choices=sorted(_METHOD_FLAGS))
    est.add_argument(
        "--ci",
        choices=("delta", "sandwich", "quadratic", "permutation"),
        default=None,
        help="confidence method; must match --method (cl: delta, tsls: sandwich, er: quadratic|permutation)",
    )
    est.add_argument("--alpha", type=float, default=0.05)
    est.add_argument("--perm-cap", type=int, default=2_000_000, dest="perm_cap")
    est.add_argument("--seed", type=int, default=None)
    est.add_argument("--format", choices=("text", "csv", "json"), default="text")
    est.set_defaults(func=cmd_estimate, parser=est)

    wts = sub.add_parser("weights", help="identification weights for a known population spec")
    wts.add_argument("--spec", required=True, help="CSV with columns n,n_co,tau")
    wts.add_argument("--exact", action="store_true", help="exact rational arithmetic")
    wts.add_argument("--format", choices=("text", "csv", "json"), default="text")
    wts.set_defaults(func=cmd_weights, parser=wts)

    sim = sub.add_parser("simulate", help="run a Monte Carlo scenario grid")
    sim.add_argument("--scenario", default=None, help="scenario JSON (default: bundled grid)")
    sim.add_argument("--out", required=True, help="output directory")
    sim.add_argument("--workers", type=int, default=1)
    sim.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    sim.set_defaults(func=cmd_simulate, parser=sim)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except EstimationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (InvalidTrialError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except CrtivError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
