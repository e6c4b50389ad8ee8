"""
Run artifacts: round CSV, per-hop delay CSV, event log, Q-table snapshot,
counters, comparison summaries and the manifest that hashes them.
"""

import csv
import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Union

import pandas as pd

from .flworkload import ExperimentResult, FLRoundLog
from .netsim import DelaySample
from .routing import MultiAgentQRouting, snapshot_to_json

logger = logging.getLogger(__name__)

ROUNDS_FILE = "rounds.csv"
DELAYS_FILE = "delays.csv"
EVENTS_FILE = "events.jsonl"
SNAPSHOT_FILE = "qtables.json"
COUNTERS_FILE = "counters.json"
MANIFEST_FILE = "manifest.json"

ROUND_HEADER = ("round", "loss", "sim_time_s", "slowest_worker", "upload_max_s", "download_max_s")
DELAY_HEADER = ("t", "node", "next_hop", "flow_src", "flow_dst", "delay_s")

PLOT_SCRIPT = '''"""Plot the data files written by ``meshfl compare`` (needs pandas and matplotlib)."""

import sys
from pathlib import Path

import matplotlib.pyplot as plt
import pandas as pd

folder = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(__file__).parent

fig, axes = plt.subplots(1, 3, figsize=(15, 4))
for ax, name, x, ylabel in [
    (axes[0], "loss_vs_round.dat", "round", "global loss"),
    (axes[1], "loss_vs_time.dat", None, "global loss"),
    (axes[2], "time_per_round.dat", "round", "time per round (s)"),
]:
    data = pd.read_csv(folder / name, sep=" ")
    if x is None:
        for policy in sorted({c.rsplit("_", 1)[0] for c in data.columns}):
            ax.plot(data[f"{policy}_time"], data[f"{policy}_loss"], label=policy)
        ax.set_xlabel("simulated wall-clock (s)")
    else:
        for column in data.columns:
            if column != x:
                ax.plot(data[x], data[column], label=column)
        ax.set_xlabel(x)
    ax.set_ylabel(ylabel)
    ax.legend()

fig.tight_layout()
fig.savefig(folder / "results.png", dpi=150)
'''


def _number(value: float) -> str:
    return repr(float(value))


def write_round_csv(rounds: Sequence[FLRoundLog], path: Union[str, Path]) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(ROUND_HEADER)
        for log in rounds:
            writer.writerow([log.round, _number(log.loss), _number(log.sim_time_s), log.straggler,
                             _number(log.upload_max_s), _number(log.download_max_s)])
    return path


def read_round_csv(path: Union[str, Path]) -> pd.DataFrame:
    return pd.read_csv(path)


def write_delay_csv(samples: Iterable[DelaySample], path: Union[str, Path]) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(DELAY_HEADER)
        for s in samples:
            writer.writerow([_number(s.t), s.node, s.next_hop, s.flow_src, s.flow_dst, _number(s.delay_s)])
    return path


def write_event_log(events: Iterable[Mapping[str, Any]], path: Union[str, Path]) -> Path:
    """One JSON object per line, keys sorted."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as handle:
        for event in events:
            handle.write(json.dumps(event, sort_keys=True) + "\n")
    return path


def counters_of(result: ExperimentResult) -> Dict[str, Any]:
    counters: Dict[str, Any] = {"network": result.engine.counters.to_dict()}
    if isinstance(result.router, MultiAgentQRouting):
        counters["routing"] = dict(result.router.counters.__dict__)
    else:
        counters["routing"] = {"q_updates": 0}
    return counters


def sha256_file(path: Union[str, Path]) -> str:
    digest = hashlib.sha256()
    with Path(path).open("rb") as handle:
        for block in iter(lambda: handle.read(65536), b""):
            digest.update(block)
    return digest.hexdigest()


def write_manifest(directory: Union[str, Path], extra: Optional[Mapping[str, Any]] = None) -> Path:
    """
    Hash every file below ``directory`` (except the manifest) into manifest.json.

    Paths are relative and sorted so equal outputs give equal manifests.
    """
    directory = Path(directory)
    files = {}
    for path in sorted(p for p in directory.rglob("*") if p.is_file() and p.name != MANIFEST_FILE):
        files[path.relative_to(directory).as_posix()] = sha256_file(path)
    manifest = dict(extra or {})
    manifest["files"] = files
    target = directory / MANIFEST_FILE
    target.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return target


def write_run_artifacts(result: ExperimentResult, directory: Union[str, Path],
                        scenario_name: str = "scenario") -> List[Path]:
    """
    Write every artifact of one run and its manifest.

    Returns:
        The written files, manifest last
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = [
        write_round_csv(result.rounds, directory / ROUNDS_FILE),
        write_delay_csv(result.engine.delay_samples, directory / DELAYS_FILE),
        write_event_log(result.engine.events, directory / EVENTS_FILE),
    ]
    snapshot = result.snapshot()
    if snapshot is not None:
        target = directory / SNAPSHOT_FILE
        target.write_text(snapshot_to_json(snapshot) + "\n", encoding="utf-8")
        written.append(target)
    counters = directory / COUNTERS_FILE
    counters.write_text(json.dumps(counters_of(result), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    written.append(counters)
    written.append(write_manifest(directory, {"scenario": scenario_name, "policy": result.policy.value,
                                              "seed": result.seed, "rounds": len(result.rounds)}))
    logger.info("wrote %d artifacts to %s", len(written), directory)
    return written


def rounds_frame(policy: str, seed: int, rounds: Sequence[Mapping[str, Any]]) -> pd.DataFrame:
    """Per-round rows of one run, tagged with policy and seed."""
    frame = pd.DataFrame(list(rounds), columns=["round", "loss", "sim_time_s", "round_time_s"])
    frame.insert(0, "seed", seed)
    frame.insert(0, "policy", policy)
    return frame


def summarize(frame: pd.DataFrame, policies: Sequence[str], seeds: Sequence[int],
              first_round: int = 0) -> pd.DataFrame:
    """
    Mean and variance of time per round for every policy.

    Policies with no successful run keep a row with empty statistics.
    """
    window = frame[frame["round"] >= first_round]
    rows = []
    for policy in policies:
        subset = window[window["policy"] == policy]
        runs = sorted(subset["seed"].unique().tolist())
        missing = [s for s in seeds if s not in runs]
        times = subset["round_time_s"]
        rows.append({
            "policy": policy,
            "runs": len(runs),
            "mean_round_time_s": float(times.mean()) if len(times) else float("nan"),
            "var_round_time_s": float(times.var(ddof=0)) if len(times) else float("nan"),
            "missing_seeds": " ".join(str(s) for s in missing),
        })
    return pd.DataFrame(rows, columns=["policy", "runs", "mean_round_time_s", "var_round_time_s", "missing_seeds"])


def write_plot_data(frame: pd.DataFrame, policies: Sequence[str], directory: Union[str, Path]) -> List[Path]:
    """Column-oriented, space-separated series averaged over seeds, plus a plotting script."""
    directory = Path(directory)
    present = [p for p in policies if (frame["policy"] == p).any()]
    means = frame.groupby(["policy", "round"], sort=True)[["loss", "sim_time_s", "round_time_s"]].mean()

    def per_round(column: str) -> pd.DataFrame:
        table = means[column].unstack(level=0)
        return table[present].reset_index()

    paths = []
    target = directory / "time_per_round.dat"
    per_round("round_time_s").to_csv(target, sep=" ", index=False, float_format="%.10g", lineterminator="\n")
    paths.append(target)
    target = directory / "loss_vs_round.dat"
    per_round("loss").to_csv(target, sep=" ", index=False, float_format="%.10g", lineterminator="\n")
    paths.append(target)

    columns = {}
    for policy in present:
        columns[f"{policy}_time"] = pd.Series(means.loc[policy, "sim_time_s"].to_numpy())
        columns[f"{policy}_loss"] = pd.Series(means.loc[policy, "loss"].to_numpy())
    target = directory / "loss_vs_time.dat"
    pd.DataFrame(columns).to_csv(target, sep=" ", index=False, float_format="%.10g", lineterminator="\n")
    paths.append(target)

    target = directory / "plot_results.py"
    target.write_text(PLOT_SCRIPT, encoding="utf-8")
    paths.append(target)
    return paths
