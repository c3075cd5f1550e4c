"""Command-line front end: generate, decompose, estimate, sensitivity.

Usage:
  gridimp generate --seed 3 --days 30 --out run/
  gridimp decompose --topology run/topology.json
  gridimp estimate --topology run/topology.json --measurements run/measurements.csv \\
      --benchmark run/benchmark.csv --out run/report/
  gridimp sensitivity --topology run/topology.json --measurements run/measurements.csv \\
      --benchmark run/ground_truth.csv --sizes 500,1000,5000,10000 --out run/report/
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass
from pathlib import Path

from . import decomposer, reports
from .estimator import EstimatorConfig, FeasibleVoltageBand, estimate_all, phase_spread
from .grid_model import TopologyError, load_topology, save_topology
from .measurements import MeasurementError, ingest_csv
from .sensitivity import SizeExceedsData, median_error_by_size, run_sensitivity
from .synth import (
    AspernConfig,
    InvalidConfig,
    InvalidScenario,
    emulate_measurements,
    load_scenario,
    make_aspern_like,
    save_scenario,
    write_benchmark,
    write_ground_truth,
)
from .measurements import write_csv

log = logging.getLogger("gridimp")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INPUT = 3
EXIT_NO_RESULTS = 4


class CliError(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


@dataclass
class RunConfig:
    topology_path: Path
    measurements_path: Path
    output_dir: Path
    benchmark_path: Path | None = None
    v_nominal: float = 230.0
    v_min: float | None = None
    v_max: float | None = None
    min_samples: int = 100
    estimator_variant: str = "first_moment"
    case3_model: str = "split"
    seed: int | None = None

    def validate(self):
        for p in (self.topology_path, self.measurements_path, self.benchmark_path):
            if p is not None and not Path(p).is_file():
                raise CliError(EXIT_CONFIG, f"input file not found: {p}")
        if not self.v_nominal > 0:
            raise CliError(EXIT_CONFIG, "--v-nominal must be positive")
        if self.min_samples < 1:
            raise CliError(EXIT_CONFIG, "--min-samples must be at least 1")

    def band(self) -> FeasibleVoltageBand:
        try:
            return FeasibleVoltageBand(self.v_nominal, self.v_min, self.v_max)
        except ValueError as exc:
            raise CliError(EXIT_CONFIG, str(exc)) from exc

    def estimator_config(self) -> EstimatorConfig:
        return EstimatorConfig(variant=self.estimator_variant, min_samples=self.min_samples,
                               case3_model=self.case3_model)


def _load_inputs(cfg: RunConfig):
    try:
        topo = load_topology(cfg.topology_path)
        ms = ingest_csv(cfg.measurements_path)
        reference = reports.load_reference(cfg.benchmark_path) if cfg.benchmark_path else None
    except (TopologyError, MeasurementError, json.JSONDecodeError, KeyError, ValueError) as exc:
        raise CliError(EXIT_INPUT, f"could not parse input: {exc}") from exc
    return topo, ms, reference


def _write(path: Path, writer, *args):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer(*args, fh)


def cmd_estimate(cfg: RunConfig) -> int:
    cfg.validate()
    band = cfg.band()
    topo, ms, reference = _load_inputs(cfg)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)

    result = estimate_all(topo, ms, band, cfg.estimator_config())
    _write(out / "classification.csv", reports.write_rows_csv,
           decomposer.classification_rows(result.classifications), ("line_id", "from", "to", "case"))
    _write(out / "estimates.csv", reports.write_estimates_csv, result.estimates)
    _write(out / "estimates.json", reports.write_estimates_json, result.estimates)

    summary = {
        "case_counts": decomposer.case_counts(result.classifications),
        "undetermined": sum(not e.determined for e in result.estimates),
        "phase_spread": phase_spread(result.estimates),
        "ingest": asdict(ms.report),
    }
    if reference is not None:
        rows = reports.comparison_rows(result.estimates, reference)
        _write(out / "comparison.csv", reports.write_rows_csv, rows, reports.COMPARISON_FIELDS)
        summary["errors_case1"] = asdict(reports.summarize(rows))
    with open(out / "summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")

    print(decomposer.format_table(result.classifications))
    determined = sum(e.determined for e in result.estimates)
    print(f"\n{determined}/{len(result.estimates)} (line, phase) estimates determined; reports in {out}")
    if "errors_case1" in summary and summary["errors_case1"]["n"]:
        s = summary["errors_case1"]
        print(f"Case-1 error: mean {s['mean_pct']:.1f}%  median {s['median_pct']:.1f}%  "
              f"max {s['max_pct']:.1f}%  max angle {s['max_delta_deg']:.2f} deg")
    if determined == 0:
        print("estimation produced no results", file=sys.stderr)
        return EXIT_NO_RESULTS
    return EXIT_OK


def cmd_sensitivity(cfg: RunConfig, sizes, *, random_subsample=False) -> int:
    cfg.validate()
    if cfg.benchmark_path is None:
        raise CliError(EXIT_CONFIG, "sensitivity needs --benchmark (data sheet or ground truth)")
    band = cfg.band()
    topo, ms, reference = _load_inputs(cfg)
    try:
        rows = run_sensitivity(topo, ms, reference, sizes, band, cfg.estimator_config(),
                               random_subsample=random_subsample, seed=cfg.seed or 0)
    except SizeExceedsData as exc:
        raise CliError(EXIT_INPUT, str(exc)) from exc
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write(out / "sensitivity.csv", reports.write_rows_csv, rows, reports.SENSITIVITY_FIELDS)
    for n, med in median_error_by_size(rows).items():
        print(f"{n:>8d} samples: median error {'n/a' if med is None else f'{med:.2f}%'}")
    return EXIT_OK


def cmd_generate(scenario_path, output_dir, aspern: AspernConfig | None = None) -> int:
    try:
        scenario = load_scenario(scenario_path) if scenario_path else make_aspern_like(aspern or AspernConfig())
    except (InvalidScenario, InvalidConfig, OSError, json.JSONDecodeError) as exc:
        raise CliError(EXIT_INPUT, f"invalid scenario: {exc}") from exc
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    ms = emulate_measurements(scenario)
    save_scenario(scenario, out / "scenario.json")
    save_topology(scenario.topology, out / "topology.json")
    _write(out / "measurements.csv", write_csv, ms)
    _write(out / "ground_truth.csv", write_ground_truth, scenario)
    if scenario.line_data:
        _write(out / "benchmark.csv", write_benchmark, scenario)

    counts = decomposer.case_counts(decomposer.decompose(scenario.topology))
    lengths = [len(s) for s in ms]
    print("case mix: " + ", ".join(f"{k}={v}" for k, v in counts.items()))
    print(f"{len(scenario.topology.nodes)} nodes, {len(scenario.topology.measured_nodes)} metered, "
          f"{scenario.n_steps} sample instants per node, "
          f"{min(lengths, default=0)}-{max(lengths, default=0)} readings kept per node and phase")
    return EXIT_OK


def cmd_decompose(topology_path, fmt="table", output_dir=None) -> int:
    if not Path(topology_path).is_file():
        raise CliError(EXIT_CONFIG, f"input file not found: {topology_path}")
    try:
        topo = load_topology(topology_path)
    except (TopologyError, json.JSONDecodeError, KeyError) as exc:
        raise CliError(EXIT_INPUT, f"could not parse topology: {exc}") from exc
    classes = decomposer.decompose(topo)
    rows = decomposer.classification_rows(classes)
    if fmt == "csv":
        reports.write_rows_csv(rows, ("line_id", "from", "to", "case"), sys.stdout)
    else:
        print(decomposer.format_table(classes))
        print("\n" + ", ".join(f"{k}={v}" for k, v in decomposer.case_counts(classes).items()))
    if output_dir:
        out = Path(output_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write(out / "classification.csv", reports.write_rows_csv, rows, ("line_id", "from", "to", "case"))
    return EXIT_OK


def _sizes(text: str):
    try:
        sizes = [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad --sizes value {text!r}") from exc
    if not sizes or min(sizes) < 1:
        raise argparse.ArgumentTypeError("--sizes needs positive integers")
    return sizes


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gridimp", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="synthesise a feeder and its GMD readings")
    g.add_argument("--scenario", type=Path, help="scenario JSON; default: random Aspern-like feeder")
    g.add_argument("--out", type=Path, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--nodes", type=int, default=15)
    g.add_argument("--coverage", type=float, default=0.5)
    g.add_argument("--imbalance", type=float, default=0.2)
    g.add_argument("--days", type=float, default=30.0)
    g.add_argument("--noise", type=float, default=0.01, help="relative noise sigma per reading")
    g.add_argument("--missing-rate", type=float, default=0.13)

    d = sub.add_parser("decompose", help="classify lines into the four basic cases")
    d.add_argument("--topology", type=Path, required=True)
    d.add_argument("--format", choices=("table", "csv"), default="table")
    d.add_argument("--out", type=Path)

    def common(p):
        p.add_argument("--topology", type=Path, required=True)
        p.add_argument("--measurements", type=Path, required=True)
        p.add_argument("--benchmark", type=Path)
        p.add_argument("--v-nominal", type=float, default=230.0)
        p.add_argument("--v-min", type=float)
        p.add_argument("--v-max", type=float)
        p.add_argument("--min-samples", type=int, default=100)
        p.add_argument("--variant", choices=("first_moment", "second_moment"), default="first_moment")
        p.add_argument("--case3-model", choices=("split", "series"), default="split")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", type=Path, required=True)

    e = sub.add_parser("estimate", help="estimate line impedances")
    common(e)
    s = sub.add_parser("sensitivity", help="error versus number of samples used")
    common(s)
    s.add_argument("--sizes", type=_sizes, default=[500, 1000, 5000, 10000])
    s.add_argument("--random-subsample", action="store_true")
    return parser


def _run_config(args) -> RunConfig:
    return RunConfig(
        topology_path=args.topology, measurements_path=args.measurements, output_dir=args.out,
        benchmark_path=args.benchmark, v_nominal=args.v_nominal, v_min=args.v_min, v_max=args.v_max,
        min_samples=args.min_samples, estimator_variant=args.variant, case3_model=args.case3_model,
        seed=args.seed,
    )


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "generate":
            aspern = AspernConfig(n_nodes=args.nodes, coverage=args.coverage, imbalance=args.imbalance,
                                  days=args.days, seed=args.seed, noise_pct=args.noise,
                                  missing_rate=args.missing_rate)
            return cmd_generate(args.scenario, args.out, aspern)
        if args.command == "decompose":
            return cmd_decompose(args.topology, args.format, args.out)
        if args.command == "estimate":
            return cmd_estimate(_run_config(args))
        return cmd_sensitivity(_run_config(args), args.sizes, random_subsample=args.random_subsample)
    except CliError as exc:
        print(f"gridimp: error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
