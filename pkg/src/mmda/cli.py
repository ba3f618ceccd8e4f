"""Command-line interface: scenario runs, calibration, PDF studies, BMA comparison.

Exit codes: 0 on success, 1 on runtime failures (with a diagnostic naming
the failing step), 2 on usage errors.
"""

from __future__ import annotations

import argparse
import csv
import importlib.resources
import json
import sys
from pathlib import Path

import numpy as np

from mmda.harness import (
    ConfigurationError,
    ObservationConfig,
    Scenario,
    heterogeneous_pdf_study,
    load_scenario,
    run_experiment,
    rmse,
    write_metrics_json,
    write_results_csv,
)

__all__ = ["main", "compare_bma", "resolve_scenario", "bundled_scenarios"]


def bundled_scenarios() -> list[str]:
    root = importlib.resources.files("mmda") / "scenarios"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".toml"))


def resolve_scenario(ref: str) -> Path:
    """A path on disk, or the name of a bundled scenario."""
    p = Path(ref)
    if p.exists():
        return p
    root = importlib.resources.files("mmda") / "scenarios"
    candidate = root / f"{ref}.toml"
    if candidate.is_file():
        return Path(str(candidate))
    raise ConfigurationError(
        f"scenario {ref!r} is neither a file nor a bundled name "
        f"(bundled: {', '.join(bundled_scenarios())})")


def _write_results_json(bundle, path) -> None:
    ids = list(bundle.model_means)
    rows = []
    for k in range(bundle.scenario.n_steps + 1):
        obs = bundle.observations.get(k)
        rows.append({
            "step": k,
            "t": float(bundle.times[k]),
            "truth": [float(v) for v in bundle.truth[k]],
            "obs": None if obs is None else [float(v) for v in obs],
            "models": {mid: [None if not np.isfinite(v) else float(v)
                             for v in bundle.model_means[mid][k]] for mid in ids},
            "analyzed_mean": [float(v) for v in bundle.analyzed_means[k]],
            "analyzed_var": [float(v) for v in bundle.analyzed_vars[k]],
        })
    with open(path, "w") as f:
        json.dump(rows, f, indent=1)
        f.write("\n")


def compare_bma(scenario: Scenario, noise_sds: tuple, out_dir: Path,
                seed: int | None = None) -> Path:
    """EKF runs at each observation-noise level plus one BMA run, side by side.

    Emits ``compare_bma.csv`` with one analyzed-trajectory column per EKF
    noise level (named ``ekf@<sd>``) and one BMA column; the BMA column is
    data-independent by construction.
    """
    if not scenario.models:
        raise ConfigurationError("compare-bma needs at least one model")
    seed = scenario.seed if seed is None else seed
    runs = []
    for sd in noise_sds:
        sc = scenario.with_overrides(
            filter="ekf", seed=seed,
            observations=ObservationConfig(scenario.observations.every, sd * sd))
        runs.append((f"ekf@{sd:g}", run_experiment(sc)))
    bma_bundle = run_experiment(scenario.with_overrides(filter="bma", seed=seed))
    runs.append(("bma", bma_bundle))

    ref = runs[0][1]
    out = out_dir / "compare_bma.csv"
    with open(out, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["step", "t", "truth_0"] + [name for name, _ in runs])
        for k in range(scenario.n_steps + 1):
            row = [str(k), repr(float(ref.times[k])), repr(float(ref.truth[k][0]))]
            row += [repr(float(b.analyzed_means[k][0])) for _, b in runs]
            wr.writerow(row)
    metrics = {
        "noise_sds": list(noise_sds),
        "rmse": {name: rmse(b.analyzed_means, ref.truth) for name, b in runs},
    }
    with open(out_dir / "compare_bma_metrics.json", "w") as f:
        json.dump(metrics, f, indent=2, sort_keys=True)
        f.write("\n")
    return out


def _cmd_run(args) -> int:
    scenario = load_scenario(resolve_scenario(args.scenario))
    scenario = scenario.with_overrides(seed=args.seed, filter=args.filter)
    bundle = run_experiment(scenario)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_results_csv(bundle, out / "results.csv")
    write_metrics_json(bundle, out / "metrics.json")
    if args.format == "json":
        _write_results_json(bundle, out / "results.json")
    m = bundle.metrics
    print(f"{scenario.name} [{scenario.filter}] seed={m['seed']} "
          f"rmse_obs={m['rmse_analyzed_obs']:.6g} rmse_all={m['rmse_analyzed_all']:.6g} "
          f"-> {out / 'results.csv'}")
    return 0


def _cmd_calibrate(args) -> int:
    from mmda.harness import calibrate_model_errors

    scenario = load_scenario(resolve_scenario(args.scenario))
    if scenario.kind != "infiltration":
        raise ConfigurationError("calibrate applies to infiltration scenarios")
    runs = scenario.open_loop_means()
    truth = scenario.truth_series()
    white = calibrate_model_errors(runs, truth, "white",
                                   window=scenario.calibration_window)
    timed = calibrate_model_errors(runs, truth, "time-dependent",
                                   window=scenario.calibration_window)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "calibration.csv"
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["model", "step", "t", "variance", "white_variance"])
        for mid, sched in timed.values.items():
            for idx, var in enumerate(sched, start=1):
                wr.writerow([mid, idx, repr(float(scenario.times()[idx])),
                             repr(float(var)), repr(float(white.values[mid]))])
    summary = {mid: float(v) for mid, v in white.values.items()}
    print(f"calibrated {len(summary)} model(s): {summary} -> {path}")
    return 0


def _cmd_pdf(args) -> int:
    scenario = load_scenario(resolve_scenario(args.scenario))
    cfg = dict(scenario.hetero)
    if args.seed is not None:
        cfg["seed"] = args.seed
    cfg.setdefault("seed", scenario.seed)
    study = heterogeneous_pdf_study(soil=scenario.soil, truth=scenario.truth,
                                    threads=args.threads, **cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "pdf.csv"
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["source", "bin_left", "bin_right", "height"])
        for source, pdf in study["pdfs"].items():
            for j, h in enumerate(pdf.heights):
                wr.writerow([source, repr(float(pdf.edges[j])),
                             repr(float(pdf.edges[j + 1])), repr(float(h))])
    stats = {k: {"mean": float(np.mean(v)), "std": float(np.std(v, ddof=1)),
                 "n": int(len(v))}
             for k, v in study["samples"].items()}
    with open(out / "pdf_metrics.json", "w") as f:
        json.dump({"observation": study["observation"], "stats": stats,
                   "skipped": study["skipped"]}, f, indent=2, sort_keys=True)
        f.write("\n")
    print(f"pdf study: obs={study['observation']:.6g} "
          f"stds={ {k: round(s['std'], 6) for k, s in stats.items()} } -> {path}")
    return 0


def _cmd_compare_bma(args) -> int:
    scenario = load_scenario(resolve_scenario(args.scenario))
    sds = tuple(float(x) for x in args.noise_levels.split(","))
    if len(sds) < 1:
        raise ConfigurationError("need at least one noise level")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = compare_bma(scenario, sds, out, seed=args.seed)
    print(f"compare-bma over noise sds {sds} -> {path}")
    return 0


def _cmd_list(args) -> int:
    for name in bundled_scenarios():
        print(name)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mmda",
        description="Multi-model sequential data assimilation experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, scenario_required=True):
        p.add_argument("--scenario", required=scenario_required,
                       help="scenario TOML path or bundled scenario name")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--seed", type=int, default=None, help="seed override")
        p.add_argument("--threads", type=int, default=1,
                       help="worker cap for sample sweeps (results are identical)")
        p.add_argument("--format", choices=("csv", "json"), default="csv")

    p_run = sub.add_parser("run", help="run one scenario end to end")
    common(p_run)
    p_run.add_argument("--filter", choices=("mmkf", "ekf", "enkf", "pf", "bma"),
                       default=None, help="filter override")
    p_run.set_defaults(func=_cmd_run)

    p_cal = sub.add_parser("calibrate", help="calibrate model-error variances")
    common(p_cal)
    p_cal.set_defaults(func=_cmd_calibrate)

    p_pdf = sub.add_parser("pdf", help="heterogeneous-soil Monte Carlo PDF study")
    common(p_pdf)
    p_pdf.set_defaults(func=_cmd_pdf)

    p_cmp = sub.add_parser("compare-bma", help="EKF at several noise levels vs BMA")
    common(p_cmp)
    p_cmp.add_argument("--noise-levels", default="0.002,0.01",
                       help="comma-separated observation noise standard deviations")
    p_cmp.set_defaults(func=_cmd_compare_bma)

    p_ls = sub.add_parser("list-scenarios", help="list bundled scenarios")
    p_ls.set_defaults(func=_cmd_list)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"mmda {args.command}: configuration error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - single CLI boundary
        print(f"mmda {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
