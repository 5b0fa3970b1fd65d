"""Command-line front-end: scenario runs, sweeps and bound checks.

Exit status is 0 on success, 1 for a bad scenario or missing input and 2
when a run fails part-way (whatever finished is still written, flagged
as partial).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import re
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Sequence

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import analysis
from .recovery_benchmarks import POLICIES
from .sim_engine import ConfigError, MetricsRecord, SimulationConfig, run, worker_count

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2
CSV_COLUMNS = (
    "policy",
    "rho",
    "mu",
    "m",
    "seed",
    "mean_delay_ms",
    "convergence_count",
    "convergence_ms",
    "bound_flags",
)
RECORDS_FILE = "runs.jsonl"
SUMMARY_FILE = "summary.json"
BOUNDS_FILE = "bounds.json"
AXES = ("rho", "mu", "m")
TOP_KEYS = {"name", "policies", "replications", "d_th", "wall_clock", "config", "axes", "output"}


class ScenarioError(ValueError):
    """Invalid scenario; ``line`` points at the offending key when known."""

    def __init__(self, message: str, line: int | None = None, source: str = "<scenario>"):
        self.line = line
        self.source = source
        where = f"{source}:{line}: " if line else f"{source}: "
        super().__init__(where + message)


@dataclass(frozen=True)
class Scenario:
    name: str
    config: SimulationConfig
    rhos: tuple[float, ...]
    mus: tuple[float | None, ...]
    ms: tuple[int, ...]
    policies: tuple[str, ...]
    replications: int = 1
    out_dir: Path = Path("out")
    d_th: float | None = None
    wall_clock: bool = False

    def configs(self) -> list[SimulationConfig]:
        return [
            self.config.replace(rho=rho, mu=mu, m=m, policy=policy, seed=self.config.seed + r)
            for m in self.ms
            for mu in self.mus
            for rho in self.rhos
            for policy in self.policies
            for r in range(self.replications)
        ]

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "config": self.config.to_dict(),
            "axes": {"rho": list(self.rhos), "mu": list(self.mus), "m": list(self.ms)},
            "policies": list(self.policies),
            "replications": self.replications,
            "d_th": self.d_th,
            "wall_clock": self.wall_clock,
        }


def _line_of(text: str, key: str) -> int | None:
    pattern = re.compile(rf"^\s*{re.escape(key)}\s*=")
    for n, line in enumerate(text.splitlines(), 1):
        if pattern.match(line):
            return n
    return None


def _as_list(value: Any) -> list:
    return list(value) if isinstance(value, (list, tuple)) else [value]


def parse_scenario(text: str, source: str = "<scenario>") -> Scenario:
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        m = re.search(r"line (\d+)", str(exc))
        raise ScenarioError(str(exc), int(m.group(1)) if m else None, source) from None

    def fail(message: str, key: str) -> ScenarioError:
        return ScenarioError(message, _line_of(text, key), source)

    for key in doc:
        if key not in TOP_KEYS:
            raise fail(f"unknown key {key!r}", key)
    base = dict(doc.get("config", {}))
    known = {f.name for f in dataclasses.fields(SimulationConfig)}
    for key in base:
        if key not in known:
            raise fail(f"unknown config key {key!r}", key)
    try:
        config = SimulationConfig.from_mapping(base)
    except (ConfigError, TypeError, ValueError) as exc:
        bad = next((k for k in base if k in str(exc)), "config")
        raise fail(str(exc), bad) from None

    axes = doc.get("axes", {})
    for key in axes:
        if key not in AXES:
            raise fail(f"unknown axis {key!r}; axes are {', '.join(AXES)}", key)
    values = {}
    for key in AXES:
        default = None if key == "mu" and config.n_servers is not None else getattr(config, key)
        raw = axes.get(key, default)
        items = _as_list(raw)
        if not items:
            raise fail(f"axis {key!r} is empty", key)
        values[key] = items
    for rho in values["rho"]:
        if not isinstance(rho, (int, float)) or not 0.0 <= rho <= 1.0:
            raise fail(f"rho values must lie in [0, 1], got {rho!r}", "rho")
    for mu in values["mu"]:
        if mu is not None and (not isinstance(mu, (int, float)) or not 0.0 < mu <= 1.0):
            raise fail(f"mu values must lie in (0, 1], got {mu!r}", "mu")
    for m in values["m"]:
        if not isinstance(m, int) or m < 2:
            raise fail(f"m values must be integers >= 2, got {m!r}", "m")

    policies = _as_list(doc.get("policies", [config.policy]))
    if not policies:
        raise fail("policies list is empty", "policies")
    for p in policies:
        if p not in POLICIES:
            raise fail(f"unknown policy {p!r}; choose from {', '.join(sorted(POLICIES))}", "policies")
    reps = doc.get("replications", 1)
    if not isinstance(reps, int) or reps < 1:
        raise fail("replications must be a positive integer", "replications")
    d_th = doc.get("d_th")
    if d_th is not None and (not isinstance(d_th, (int, float)) or d_th <= 0):
        raise fail("d_th must be a positive number of seconds", "d_th")
    out = doc.get("output", {}).get("dir", f"out/{doc.get('name', 'scenario')}")
    return Scenario(
        name=str(doc.get("name", Path(source).stem)),
        config=config,
        rhos=tuple(float(r) for r in values["rho"]),
        mus=tuple(None if mu is None else float(mu) for mu in values["mu"]),
        ms=tuple(values["m"]),
        policies=tuple(policies),
        replications=reps,
        out_dir=Path(out),
        d_th=None if d_th is None else float(d_th),
        wall_clock=bool(doc.get("wall_clock", False)),
    )


def bundled_scenarios() -> list[str]:
    root = resources.files("edge_failover") / "scenarios"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".toml"))


def load_scenario(ref: str) -> Scenario:
    """Scenario from a file path, or a bundled one by name (``fig3``)."""
    path = Path(ref)
    if path.is_file():
        return parse_scenario(path.read_text(), str(path))
    name = path.stem if path.suffix == ".toml" else ref
    if name in bundled_scenarios():
        text = (resources.files("edge_failover") / "scenarios" / f"{name}.toml").read_text()
        return parse_scenario(text, f"{name}.toml")
    raise ScenarioError(f"no scenario file {ref!r} and no bundled scenario of that name", source=ref)


# --- execution -----------------------------------------------------------


@dataclass
class Batch:
    records: list[MetricsRecord] = field(default_factory=list)
    error: str | None = None

    @property
    def complete(self) -> bool:
        return self.error is None


def execute(configs: Sequence[SimulationConfig], workers: int) -> Batch:
    """Run configs in order; stops at the first failure, keeping finished runs."""
    batch = Batch()
    if workers <= 1 or len(configs) <= 1:
        for cfg in configs:
            try:
                batch.records.append(run(cfg))
            except Exception as exc:  # noqa: BLE001 - reported as a partial batch
                batch.error = f"seed {cfg.seed} policy {cfg.policy}: {exc}"
                break
        return batch
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(run, cfg) for cfg in configs]
        for cfg, fut in zip(configs, futures):
            try:
                batch.records.append(fut.result())
            except Exception as exc:  # noqa: BLE001
                batch.error = f"seed {cfg.seed} policy {cfg.policy}: {exc}"
                for rest in futures:
                    rest.cancel()
                break
    return batch


def _fmt(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(round(value, 6))
    return str(value)


def csv_row(record: MetricsRecord, d_th: float | None, wall_clock: bool) -> dict[str, str]:
    cfg = record.config
    return {
        "policy": cfg["policy"],
        "rho": _fmt(cfg["rho"]),
        "mu": _fmt(cfg["mu"]),
        "m": _fmt(cfg["m"]),
        "seed": _fmt(cfg["seed"]),
        "mean_delay_ms": _fmt(record.mean_delay_ms),
        "convergence_count": _fmt(record.convergence_count),
        # wall time varies between runs; left empty unless asked for
        "convergence_ms": _fmt(record.convergence_ms) if wall_clock else "",
        "bound_flags": analysis.check_record(record, d_th).flags,
    }


def write_outputs(scenario: Scenario, batch: Batch, out_dir: Path) -> dict:
    out_dir.mkdir(parents=True, exist_ok=True)
    files = {}
    for policy in scenario.policies:
        path = out_dir / f"{scenario.name}_{policy}.csv"
        with path.open("w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\n")
            writer.writeheader()
            for rec in batch.records:
                if rec.config["policy"] == policy:
                    writer.writerow(csv_row(rec, scenario.d_th, scenario.wall_clock))
        files[policy] = path.name
    with (out_dir / RECORDS_FILE).open("w") as fh:
        for rec in batch.records:
            fh.write(rec.to_json() + "\n")
    summary = {
        "scenario": scenario.to_dict(),
        "complete": batch.complete,
        "error": batch.error,
        "runs": len(batch.records),
        "expected_runs": len(scenario.configs()),
        "csv": files,
        "means": _group_means(batch.records),
    }
    (out_dir / SUMMARY_FILE).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def _group_means(records: Sequence[MetricsRecord]) -> list[dict]:
    groups: dict[tuple, list[MetricsRecord]] = {}
    for rec in records:
        c = rec.config
        groups.setdefault((c["policy"], c["rho"], c["mu"] if c["mu"] is not None else -1, c["m"]), []).append(rec)
    out = []
    for (policy, rho, mu, m), recs in sorted(groups.items()):
        out.append(
            {
                "policy": policy,
                "rho": rho,
                "mu": None if mu == -1 else mu,
                "m": m,
                "runs": len(recs),
                "mean_delay_ms": sum(r.mean_delay_ms for r in recs) / len(recs),
                "convergence_count": sum(r.convergence_count for r in recs) / len(recs),
            }
        )
    return out


def run_scenario(scenario: Scenario, out_dir: Path | None = None, workers: int | None = None) -> int:
    out_dir = out_dir or scenario.out_dir
    workers = worker_count() if workers is None else workers
    batch = execute(scenario.configs(), workers)
    summary = write_outputs(scenario, batch, out_dir)
    print(f"{scenario.name}: {summary['runs']}/{summary['expected_runs']} runs -> {out_dir}")
    if not batch.complete:
        print(f"error: run failed, outputs are partial: {batch.error}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def check_bounds(run_dir: Path, d_th: float | None = None) -> dict:
    """Per-run latency-bound and threshold checks over a finished run directory."""
    records_path = run_dir / RECORDS_FILE
    if not records_path.is_file():
        raise FileNotFoundError(f"{records_path} not found; run a scenario into {run_dir} first")
    if d_th is None and (run_dir / SUMMARY_FILE).is_file():
        d_th = json.loads((run_dir / SUMMARY_FILE).read_text())["scenario"].get("d_th")
    rows = []
    for line in records_path.read_text().splitlines():
        if not line.strip():
            continue
        rec = MetricsRecord.from_dict(json.loads(line))
        check = analysis.check_record(rec, d_th)
        c = rec.config
        rows.append({"policy": c["policy"], "rho": c["rho"], "mu": c["mu"], "m": c["m"], "seed": c["seed"], **check.to_dict()})
    report = {
        "d_th": d_th,
        "runs": len(rows),
        "latency_violations": sum(not r["latency_ok"] for r in rows),
        "threshold_violations": sum(r["threshold_ok"] is False for r in rows),
        "guarantee_violations": sum(r["guarantee_applies"] and r["threshold_ok"] is False for r in rows),
        "checks": rows,
    }
    (run_dir / BOUNDS_FILE).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return report


# --- argument handling ---------------------------------------------------


def parse_axis(text: str, kind: type = float) -> list:
    """``a:b:step`` (inclusive) or a comma list."""
    try:
        if ":" in text:
            start, stop, step = (float(x) for x in text.split(":"))
            if step <= 0:
                raise ValueError
            n = int(round((stop - start) / step)) + 1
            values = [round(start + k * step, 10) for k in range(n) if start + k * step <= stop + 1e-9]
        else:
            values = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad axis {text!r}; use a:b:step or a comma list") from None
    if not values:
        raise argparse.ArgumentTypeError("axis is empty")
    return [kind(v) for v in values]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="edge-failover-sim", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a scenario file or a bundled scenario (fig3 ... fig7)")
    p_run.add_argument("scenario")
    p_run.add_argument("--seed", type=int, help="base seed; replication r uses seed + r")
    p_run.add_argument("--policy", choices=sorted(POLICIES), help="run only this policy")
    p_run.add_argument("--out", type=Path, help="output directory")
    p_run.add_argument("--replications", type=int)
    p_run.add_argument("--wall-clock", action="store_true", help="fill convergence_ms with measured wall time")

    p_chk = sub.add_parser("check-bounds", help="check the latency bounds of finished runs")
    p_chk.add_argument("run_dir", type=Path)
    p_chk.add_argument("--d-th", type=float, help="latency threshold in seconds")

    p_sw = sub.add_parser("sweep", help="ad hoc sweep without a scenario file")
    p_sw.add_argument("--rho", type=parse_axis, default=[0.3])
    p_sw.add_argument("--mu", type=parse_axis, default=[0.3])
    p_sw.add_argument("--m", type=lambda s: parse_axis(s, int), default=[300])
    p_sw.add_argument("--policy", action="append", choices=sorted(POLICIES))
    p_sw.add_argument("--replications", type=int, default=1)
    p_sw.add_argument("--seed", type=int, default=0)
    p_sw.add_argument("--horizon", type=int)
    p_sw.add_argument("--warmup", type=int)
    p_sw.add_argument("--d-th", type=float)
    p_sw.add_argument("--out", type=Path, default=Path("out/sweep"))
    p_sw.add_argument("--wall-clock", action="store_true")

    sub.add_parser("list", help="list bundled scenarios")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        if args.command == "list":
            print("\n".join(bundled_scenarios()))
            return EXIT_OK
        if args.command == "check-bounds":
            report = check_bounds(args.run_dir, args.d_th)
            print(
                f"{report['runs']} runs: {report['latency_violations']} latency-bound violations, "
                f"{report['guarantee_violations']} threshold violations within tolerance, "
                f"{report['threshold_violations']} runs above threshold"
            )
            return EXIT_OK
        if args.command == "run":
            scenario = load_scenario(args.scenario)
            changes: dict[str, Any] = {}
            if args.seed is not None:
                changes["config"] = scenario.config.replace(seed=args.seed)
            if args.policy:
                changes["policies"] = (args.policy,)
            if args.replications is not None:
                if args.replications < 1:
                    raise ScenarioError("--replications must be positive")
                changes["replications"] = args.replications
            if args.wall_clock:
                changes["wall_clock"] = True
            scenario = dataclasses.replace(scenario, **changes)
            return run_scenario(scenario, args.out)
        # sweep
        base = SimulationConfig(seed=args.seed)
        if args.horizon is not None or args.warmup is not None:
            horizon = args.horizon if args.horizon is not None else base.horizon
            warmup = args.warmup if args.warmup is not None else min(base.warmup, horizon // 4)
            base = base.replace(horizon=horizon, warmup=warmup)
        scenario = Scenario(
            name="sweep",
            config=base,
            rhos=tuple(args.rho),
            mus=tuple(args.mu),
            ms=tuple(args.m),
            policies=tuple(args.policy or ["fodt"]),
            replications=args.replications,
            out_dir=args.out,
            d_th=args.d_th,
            wall_clock=args.wall_clock,
        )
        return run_scenario(scenario)
    except (ScenarioError, ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - command-line boundary
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
