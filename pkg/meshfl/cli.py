#!/usr/bin/env python3
"""
Command-line harness: validate scenarios, run experiments, compare routing
policies and generate or replay link traces.

Exit codes: 0 success, 1 invalid input, 2 runtime failure.
"""

import functools
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import click
import pandas as pd
from rich.console import Console
from rich.table import Table

from .artifacts import (SNAPSHOT_FILE, rounds_frame, summarize, write_manifest, write_plot_data,
                        write_run_artifacts)
from .channel import TraceWriter, trace_filename
from .exceptions import MeshFLError, ValidationError
from .flworkload import Policy, init_state, run_experiment
from .link_scheduler import LinkScheduler, ScheduleTimeline, run_scheduler
from .logging_config import configure_logging
from .rng import StreamFactory
from .routing import import_qtables, load_snapshot
from .scenario import Scenario, load_scenario, with_trace_files

logger = logging.getLogger(__name__)
console = Console()

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_RUNTIME = 2

ALL_POLICIES = (Policy.SHORTEST_PATH.value, Policy.MARL_ONLINE.value, Policy.MARL_FROZEN.value)


def handle_errors(command):
    """Map meshfl exceptions to exit codes with a one-line diagnostic."""

    @functools.wraps(command)
    def wrapper(*args, **kwargs):
        try:
            return command(*args, **kwargs)
        except ValidationError as e:
            console.print(f"[red]invalid input:[/red] {e}", markup=True, highlight=False)
            sys.exit(EXIT_INVALID)
        except MeshFLError as e:
            console.print(f"[red]error:[/red] {e}", markup=True, highlight=False)
            sys.exit(EXIT_RUNTIME)
        except OSError as e:
            console.print(f"[red]error:[/red] {e}", markup=True, highlight=False)
            sys.exit(EXIT_RUNTIME)

    return wrapper


def parse_policy(value: str, snapshot: Optional[str] = None) -> Tuple[Policy, Optional[Path]]:
    """``shortest_path``, ``marl_online`` or ``marl_frozen=<snapshot>``."""
    name, _, path = value.partition("=")
    try:
        policy = Policy(name)
    except ValueError:
        raise click.BadParameter(f"unknown policy {name!r}; expected one of {', '.join(ALL_POLICIES)}") from None
    path = path or snapshot
    if policy is Policy.MARL_FROZEN and not path:
        raise click.BadParameter("marl_frozen needs a snapshot: marl_frozen=<qtables.json> or --snapshot")
    return policy, Path(path) if path else None


def load_tables(scenario: Scenario, path: Optional[Path]):
    if path is None:
        return None
    return import_qtables(load_snapshot(path), scenario.topology)


def scenario_table(scenario: Scenario) -> Table:
    topo = scenario.topology
    table = Table(title=f"Scenario {scenario.name}")
    table.add_column("Property", style="cyan")
    table.add_column("Value", style="green")
    table.add_row("Routers", str(len(topo.routers)))
    table.add_row("Workers", ", ".join(topo.workers))
    table.add_row("Aggregator", ", ".join(topo.aggregators))
    table.add_row("Radio links", str(len(topo.links)))
    table.add_row("Channel model", topo.channel_model.name.value)
    table.add_row("Replayed interfaces", str(sum(1 for n in topo.nodes for r in n.interfaces if r.trace_file)))
    table.add_row("Seed", str(topo.seed))
    table.add_row("Rounds", str(scenario.fl.rounds))
    table.add_row("Chunk size (B)", str(scenario.netsim.chunk_size_bytes))
    return table


def result_table(title: str, frame: pd.DataFrame) -> Table:
    table = Table(title=title)
    for column in frame.columns:
        table.add_column(str(column), style="cyan" if column == frame.columns[0] else "green")
    for row in frame.itertuples(index=False):
        table.add_row(*(f"{v:.4f}" if isinstance(v, float) else str(v) for v in row))
    return table


@click.group()
@click.option("--log-level", default=None, help="DEBUG, INFO, WARNING or ERROR (overrides MESHFL_LOG).")
@click.option("--log-json", type=click.Path(dir_okay=False), default=None, help="Also write JSON log lines here.")
def cli(log_level: Optional[str], log_json: Optional[str]):
    """Simulate federated learning over a multi-hop wireless mesh."""
    configure_logging(log_level, log_json)


@cli.command()
@click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False), help="Scenario JSON.")
@handle_errors
def validate(config_path: str):
    """Parse a scenario and run every validation."""
    scenario = load_scenario(config_path)
    LinkScheduler(scenario.topology, scenario.scheduler, StreamFactory(scenario.seed), base_dir=scenario.base_dir)
    init_state(scenario.topology, scenario.fl, StreamFactory(scenario.seed))
    console.print(scenario_table(scenario))
    console.print(f"[green]{config_path} is valid[/green]")


def _run_one(scenario: Scenario, policy: Policy, snapshot: Optional[Path], rounds: Optional[int],
             seed: Optional[int], out: Path):
    result = run_experiment(scenario, policy, load_tables(scenario, snapshot), rounds=rounds, seed=seed)
    write_run_artifacts(result, out, scenario.name)
    return result


@cli.command()
@click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False), help="Scenario JSON.")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False), help="Output directory.")
@click.option("--policy", default=Policy.SHORTEST_PATH.value, show_default=True,
              help="shortest_path, marl_online or marl_frozen=<snapshot>.")
@click.option("--snapshot", default=None, type=click.Path(dir_okay=False), help="Q-table snapshot to import.")
@click.option("--rounds", type=click.IntRange(min=1), default=None, help="Override fl.rounds.")
@click.option("--seed", type=click.IntRange(min=0), default=None, help="Override the scenario seed.")
@handle_errors
def run(config_path: str, out_dir: str, policy: str, snapshot: Optional[str], rounds: Optional[int],
        seed: Optional[int]):
    """Run one experiment and write its artifacts."""
    chosen, snapshot_path = parse_policy(policy, snapshot)
    scenario = load_scenario(config_path)
    result = _run_one(scenario, chosen, snapshot_path, rounds, seed, Path(out_dir))
    frame = pd.DataFrame({"round": [r.round for r in result.rounds], "loss": result.losses,
                          "round_time_s": result.round_times})
    console.print(result_table(f"{chosen.value}, seed {result.seed}", frame.tail(10)))
    console.print(f"mean time per round: {result.mean_round_time():.3f} s, Q updates: {result.q_updates}")
    console.print(f"artifacts written to {out_dir}")


@dataclass(frozen=True)
class Job:
    """One (policy, seed) run of a comparison; picklable for worker processes."""
    config_path: str
    policy: str
    seed: int
    rounds: Optional[int]
    snapshot: Optional[str]
    out_dir: str


def run_job(job: Job) -> Dict[str, Any]:
    """Run a comparison cell; failures are reported, not raised."""
    try:
        scenario = load_scenario(job.config_path)
        result = _run_one(scenario, Policy(job.policy), Path(job.snapshot) if job.snapshot else None,
                          job.rounds, job.seed, Path(job.out_dir))
    except MeshFLError as e:
        logger.error("%s seed %d failed: %s", job.policy, job.seed, e)
        return {"policy": job.policy, "seed": job.seed, "rounds": [], "error": str(e)}
    rows = [{"round": r.round, "loss": r.loss, "sim_time_s": r.sim_time_s, "round_time_s": r.round_time_s}
            for r in result.rounds]
    return {"policy": job.policy, "seed": job.seed, "rounds": rows, "error": None}


def run_jobs(jobs: Sequence[Job], workers: int) -> List[Dict[str, Any]]:
    """Run jobs in order, in-process or on a process pool; results keep job order."""
    if workers <= 1 or len(jobs) <= 1:
        return [run_job(job) for job in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run_job, jobs))


@cli.command()
@click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False), help="Scenario JSON.")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False), help="Output directory.")
@click.option("--seed", "seeds", type=click.IntRange(min=0), multiple=True, help="Seed to run (repeatable).")
@click.option("--policy", "policies", type=click.Choice(ALL_POLICIES), multiple=True,
              help="Policy to include (repeatable); all three by default.")
@click.option("--snapshot", default=None, type=click.Path(dir_okay=False),
              help="Snapshot for marl_frozen; by default each seed's marl_online snapshot.")
@click.option("--rounds", type=click.IntRange(min=1), default=None, help="Override fl.rounds.")
@click.option("--jobs", type=click.IntRange(min=1), default=1, show_default=True, help="Parallel simulations.")
@click.option("--skip-rounds", type=click.IntRange(min=0), default=0, show_default=True,
              help="Leading rounds excluded from the summary.")
@handle_errors
def compare(config_path: str, out_dir: str, seeds: Tuple[int, ...], policies: Tuple[str, ...],
            snapshot: Optional[str], rounds: Optional[int], jobs: int, skip_rounds: int):
    """Run every (policy, seed) combination and summarize time per round."""
    scenario = load_scenario(config_path)
    seeds = tuple(seeds) or (scenario.seed,)
    policies = tuple(p for p in ALL_POLICIES if p in policies) if policies else ALL_POLICIES
    if Policy.MARL_FROZEN.value in policies and snapshot is None and Policy.MARL_ONLINE.value not in policies:
        raise click.UsageError("marl_frozen without --snapshot needs marl_online in the comparison")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    def cell(policy: str, seed: int) -> str:
        return str(out / policy / f"seed{seed}")

    first = [Job(config_path, p, s, rounds, None, cell(p, s))
             for p in policies if p != Policy.MARL_FROZEN.value for s in seeds]
    results = run_jobs(first, jobs)
    if Policy.MARL_FROZEN.value in policies:
        frozen = []
        for s in seeds:
            source = snapshot or str(Path(cell(Policy.MARL_ONLINE.value, s)) / SNAPSHOT_FILE)
            frozen.append(Job(config_path, Policy.MARL_FROZEN.value, s, rounds, source,
                              cell(Policy.MARL_FROZEN.value, s)))
        results += run_jobs(frozen, jobs)

    frames = [rounds_frame(r["policy"], r["seed"], r["rounds"]) for r in results if r["error"] is None]
    for r in results:
        if r["error"] is not None:
            console.print(f"[yellow]{r['policy']} seed {r['seed']} failed:[/yellow] {r['error']}", highlight=False)
    if not frames:
        console.print("[red]every run failed[/red]")
        sys.exit(EXIT_RUNTIME)
    frame = pd.concat(frames, ignore_index=True)
    summary = summarize(frame, policies, seeds, first_round=skip_rounds)
    summary.to_csv(out / "summary.csv", index=False, float_format="%.10g", lineterminator="\n")
    write_plot_data(frame, policies, out)
    write_manifest(out, {"scenario": scenario.name, "seeds": list(seeds), "policies": list(policies)})
    console.print(result_table("Time per round", summary))
    if any(r["error"] is not None for r in results):
        sys.exit(EXIT_RUNTIME)


@cli.group()
def trace():
    """Generate or replay per-interface link traces."""


def write_timeline(timeline: ScheduleTimeline, path: Path) -> Path:
    rows = [{"t": t, "link": link, "mcs_index": mcs, "effective_rate_mbps": rate}
            for t, link, mcs, rate in timeline.signature()]
    pd.DataFrame(rows, columns=["t", "link", "mcs_index", "effective_rate_mbps"]).to_csv(
        path, index=False, float_format="%.10g", lineterminator="\n")
    return path


@trace.command("generate")
@click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False), help="Scenario JSON.")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False), help="Trace directory.")
@click.option("--horizon", type=click.FloatRange(min=0, min_open=True), required=True, help="Seconds to simulate.")
@click.option("--seed", type=click.IntRange(min=0), default=None, help="Override the scenario seed.")
@handle_errors
def trace_generate(config_path: str, out_dir: str, horizon: float, seed: Optional[int]):
    """Run the link scheduler alone and record one CSV per backbone interface."""
    scenario = load_scenario(config_path)
    if seed is not None:
        scenario = scenario.with_seed(seed)
    scheduler = LinkScheduler(scenario.topology, scenario.scheduler, StreamFactory(scenario.seed),
                              base_dir=scenario.base_dir)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with TraceWriter(out) as sink:
        timeline = run_scheduler(scheduler, horizon, sink)
        files = sink.files()
    write_timeline(timeline, out / "linkstates.csv")
    write_manifest(out, {"scenario": scenario.name, "seed": scenario.seed, "horizon_s": horizon})
    console.print(f"wrote {len(files)} trace files ({len(timeline.ticks)} ticks) to {out_dir}")


@trace.command("replay")
@click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False), help="Scenario JSON.")
@click.option("--traces", "trace_dir", required=True, type=click.Path(file_okay=False),
              help="Directory written by 'trace generate'.")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False), help="Output directory.")
@click.option("--policy", default=Policy.SHORTEST_PATH.value, show_default=True,
              help="shortest_path, marl_online or marl_frozen=<snapshot>.")
@click.option("--rounds", type=click.IntRange(min=1), default=None, help="Override fl.rounds.")
@click.option("--seed", type=click.IntRange(min=0), default=None, help="Override the scenario seed.")
@click.option("--horizon", type=click.FloatRange(min=0, min_open=True), default=None,
              help="Only replay the link schedule over this horizon (no FL rounds).")
@handle_errors
def trace_replay(config_path: str, trace_dir: str, out_dir: str, policy: str, rounds: Optional[int],
                 seed: Optional[int], horizon: Optional[float]):
    """Run a scenario with its backbone interfaces driven by recorded traces."""
    chosen, snapshot_path = parse_policy(policy)
    original = load_scenario(config_path)
    traces = {}
    for node in original.topology.nodes:
        for radio in node.interfaces:
            candidate = Path(trace_dir) / trace_filename(node.id, radio.iface_id)
            if candidate.is_file():
                traces[(node.id, radio.iface_id)] = candidate.resolve()
    if not traces:
        raise ValidationError(f"no trace files for this scenario in {trace_dir}")

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    derived_path = out / "scenario.replay.json"
    derived = with_trace_files(original.document, traces, out, original.base_dir)
    derived_path.write_text(json.dumps(derived, indent=2) + "\n", encoding="utf-8")
    scenario = load_scenario(derived_path)
    if seed is not None:
        scenario = scenario.with_seed(seed)

    if horizon is not None:
        scheduler = LinkScheduler(scenario.topology, scenario.scheduler, StreamFactory(scenario.seed),
                                  base_dir=scenario.base_dir)
        timeline = run_scheduler(scheduler, horizon)
        write_timeline(timeline, out / "linkstates.csv")
        write_manifest(out, {"scenario": scenario.name, "seed": scenario.seed, "horizon_s": horizon})
        console.print(f"replayed {len(traces)} traces over {len(timeline.ticks)} ticks")
        return
    result = _run_one(scenario, chosen, snapshot_path, rounds, None, out / "run")
    exhausted = [e["iface"] for e in result.engine.events if e["kind"] == "trace_exhausted"]
    if exhausted:
        console.print(f"[yellow]traces exhausted:[/yellow] {', '.join(exhausted)}")
    console.print(f"mean time per round: {result.mean_round_time():.3f} s; artifacts in {out / 'run'}")


def main():
    cli()


if __name__ == "__main__":
    main()
