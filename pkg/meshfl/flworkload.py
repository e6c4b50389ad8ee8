"""
Federated learning rounds on top of the network engine.

Workers run local SGD on synthetic quadratic objectives, upload their models
to the aggregator as network flows, the aggregator averages them and sends
the global model back. Training arithmetic never depends on timing, so the
loss-vs-round sequence is the same under every routing policy; only the
simulated wall-clock changes.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import TYPE_CHECKING, Any, Dict, List, Mapping, Optional, Protocol, Sequence, Tuple

import numpy as np

from .exceptions import ConfigError, MeshFLError
from .link_scheduler import LinkScheduler
from .netsim import Flow, NetworkEngine
from .rng import StreamFactory
from .routing import (MultiAgentQRouting, PolicyMode, QTable, RoutingPolicy, ShortestPathRouting, SnapshotError,
                      export_qtables)
from .schema import expect_mapping, get_enum, get_field, get_int, get_number, reject_unknown
from .topology import Topology

if TYPE_CHECKING:
    from .scenario import Scenario

logger = logging.getLogger(__name__)


class FLError(MeshFLError):
    """Base exception for federated learning errors."""
    pass


class FLConfigError(FLError, ConfigError):
    """Raised when the ``fl`` section is invalid."""
    pass


class RoundAbortedError(FLError):
    """Raised when a round cannot finish (failed flow or round timeout)."""
    pass


class Aggregation(str, Enum):
    UNIFORM = "uniform"
    WEIGHTED = "weighted"


class ComputeModel(str, Enum):
    CONSTANT = "constant"
    GAUSSIAN = "gaussian"
    PER_WORKER = "per_worker"


class Policy(str, Enum):
    SHORTEST_PATH = "shortest_path"
    MARL_ONLINE = "marl_online"
    MARL_FROZEN = "marl_frozen"


@dataclass(frozen=True)
class FLConfig:
    """Federated learning settings (scenario section ``fl``)."""
    rounds: int = 50
    local_iters: int = 10
    learning_rate: float = 0.1
    model_size_bytes: int = 5_800_000
    aggregation: Aggregation = Aggregation.UNIFORM
    batch_noise_sigma: float = 0.0
    model_dim: int = 10
    compute_time_s: float = 5.0
    compute_model: ComputeModel = ComputeModel.CONSTANT
    compute_sigma_s: float = 0.5
    per_worker_compute_s: Mapping[str, float] = field(default_factory=dict)
    centers: Mapping[str, Tuple[float, ...]] = field(default_factory=dict)
    sample_counts: Mapping[str, int] = field(default_factory=dict)
    initial_model: Optional[Tuple[float, ...]] = None
    participation: float = 1.0
    max_round_time_s: float = 3600.0

    def __post_init__(self):
        checks = [
            (self.rounds >= 1, "rounds", "must be >= 1"),
            (self.local_iters >= 1, "local_iters", "must be >= 1"),
            (self.learning_rate > 0, "learning_rate", "must be > 0"),
            (self.model_size_bytes > 0, "model_size_bytes", "must be > 0"),
            (self.batch_noise_sigma >= 0, "batch_noise_sigma", "must be >= 0"),
            (self.model_dim >= 1, "model_dim", "must be >= 1"),
            (self.compute_time_s >= 0, "compute_time_s", "must be >= 0"),
            (self.compute_sigma_s >= 0, "compute_sigma_s", "must be >= 0"),
            (0.0 < self.participation <= 1.0, "participation", "must be in (0, 1]"),
            (self.max_round_time_s > 0, "max_round_time_s", "must be > 0"),
        ]
        for ok, key, reason in checks:
            if not ok:
                raise FLConfigError(reason, f"$.fl.{key}")
        for worker, center in self.centers.items():
            if len(center) != self.model_dim:
                raise FLConfigError(f"center has {len(center)} entries, model_dim is {self.model_dim}",
                                    f"$.fl.centers.{worker}")
        if self.initial_model is not None and len(self.initial_model) != self.model_dim:
            raise FLConfigError("initial_model does not match model_dim", "$.fl.initial_model")
        if any(count <= 0 for count in self.sample_counts.values()):
            raise FLConfigError("sample counts must be > 0", "$.fl.sample_counts")

    @classmethod
    def from_dict(cls, data: Any, path: str = "$.fl") -> "FLConfig":
        data = expect_mapping(data, path)
        reject_unknown(data, [f.name for f in cls.__dataclass_fields__.values()], path)
        defaults = cls()

        def vector(raw: Any, where: str) -> Tuple[float, ...]:
            if not isinstance(raw, list) or not all(isinstance(v, (int, float)) and not isinstance(v, bool)
                                                    for v in raw):
                raise FLConfigError("expected a list of numbers", where)
            return tuple(float(v) for v in raw)

        centers_raw = expect_mapping(get_field(data, "centers", path, {}), f"{path}.centers")
        per_worker_raw = expect_mapping(get_field(data, "per_worker_compute_s", path, {}),
                                        f"{path}.per_worker_compute_s")
        counts_raw = expect_mapping(get_field(data, "sample_counts", path, {}), f"{path}.sample_counts")
        initial = get_field(data, "initial_model", path, None)
        return cls(
            rounds=get_int(data, "rounds", path, defaults.rounds, minimum=1),
            local_iters=get_int(data, "local_iters", path, defaults.local_iters, minimum=1),
            learning_rate=get_number(data, "learning_rate", path, defaults.learning_rate),
            model_size_bytes=get_int(data, "model_size_bytes", path, defaults.model_size_bytes, minimum=1),
            aggregation=get_enum(data, "aggregation", path, Aggregation, defaults.aggregation),
            batch_noise_sigma=get_number(data, "batch_noise_sigma", path, defaults.batch_noise_sigma, minimum=0.0),
            model_dim=get_int(data, "model_dim", path, defaults.model_dim, minimum=1),
            compute_time_s=get_number(data, "compute_time_s", path, defaults.compute_time_s, minimum=0.0),
            compute_model=get_enum(data, "compute_model", path, ComputeModel, defaults.compute_model),
            compute_sigma_s=get_number(data, "compute_sigma_s", path, defaults.compute_sigma_s, minimum=0.0),
            per_worker_compute_s={k: get_number(per_worker_raw, k, f"{path}.per_worker_compute_s", minimum=0.0)
                                  for k in per_worker_raw},
            centers={k: vector(v, f"{path}.centers.{k}") for k, v in centers_raw.items()},
            sample_counts={k: get_int(counts_raw, k, f"{path}.sample_counts", minimum=1) for k in counts_raw},
            initial_model=None if initial is None else vector(initial, f"{path}.initial_model"),
            participation=get_number(data, "participation", path, defaults.participation),
            max_round_time_s=get_number(data, "max_round_time_s", path, defaults.max_round_time_s),
        )


@dataclass(frozen=True)
class WorkerObjective:
    """Local loss ``F(w) = 0.5 * ||w - center||^2`` of one worker."""
    worker_id: str
    center: np.ndarray
    weight: int = 1

    def loss(self, w: np.ndarray) -> float:
        diff = w - self.center
        return 0.5 * float(diff @ diff)

    def gradient(self, w: np.ndarray) -> np.ndarray:
        return w - self.center


def local_sgd(objective: WorkerObjective, w_in: np.ndarray, local_iters: int, learning_rate: float,
              rng: Optional[np.random.Generator] = None, noise_sigma: float = 0.0) -> np.ndarray:
    """
    Run ``local_iters`` noisy gradient steps on a worker objective.

    Without noise the result equals ``c + (1 - lr)^H (w_in - c)`` up to
    rounding.

    Args:
        objective: Worker objective
        w_in: Starting model
        local_iters: Number of steps H
        learning_rate: Step size
        rng: Source of gradient noise (required when ``noise_sigma > 0``)
        noise_sigma: Standard deviation of the Gaussian gradient noise

    Returns:
        The updated model
    """
    w = np.array(w_in, dtype=float)
    if w.shape != objective.center.shape:
        raise FLError(f"model shape {w.shape} does not match objective {objective.worker_id} "
                      f"shape {objective.center.shape}")
    if learning_rate >= 2.0:
        logger.debug("local step with learning rate %s on %s diverges", learning_rate, objective.worker_id)
    for _ in range(local_iters):
        grad = objective.gradient(w)
        if noise_sigma > 0:
            grad = grad + rng.normal(0.0, noise_sigma, size=w.shape)
        w = w - learning_rate * grad
    return w


def fedavg(models: Sequence[Tuple[np.ndarray, float]], mode: Aggregation = Aggregation.UNIFORM) -> np.ndarray:
    """
    Average worker models.

    Args:
        models: ``(model, sample_count)`` pairs in a fixed order
        mode: Uniform mean or sample-weighted mean
    """
    if not models:
        raise FLError("fedavg needs at least one model")
    shape = np.shape(models[0][0])
    if any(np.shape(w) != shape for w, _ in models):
        raise FLError("fedavg models have different dimensions")
    stacked = np.array([w for w, _ in models], dtype=float)
    if mode is Aggregation.WEIGHTED:
        weights = np.array([m for _, m in models], dtype=float)
        return (weights[:, None] * stacked).sum(axis=0) / weights.sum()
    return stacked.sum(axis=0) / len(models)


def global_loss(objectives: Sequence[WorkerObjective], w: np.ndarray) -> float:
    """Mean of the worker losses at ``w``."""
    return sum(obj.loss(w) for obj in objectives) / len(objectives)


def closed_form_global(w0: np.ndarray, centers: Sequence[np.ndarray], learning_rate: float,
                       local_iters: int, rounds: int) -> List[np.ndarray]:
    """
    Noise-free global models for uniform FedAvg on quadratics.

    ``w_{t+1} = c_mean + (1 - lr)^H (w_t - c_mean)``; returns the model after
    every round.
    """
    c_mean = np.mean(np.array(centers, dtype=float), axis=0)
    factor = (1.0 - learning_rate) ** local_iters
    w = np.array(w0, dtype=float)
    history = []
    for _ in range(rounds):
        w = c_mean + factor * (w - c_mean)
        history.append(w.copy())
    return history


class Trainer(Protocol):
    """Anything that can run local training for a worker and score a model."""

    def train(self, worker_id: str, w_in: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        ...

    def loss(self, w: np.ndarray) -> float:
        ...

    def weight(self, worker_id: str) -> float:
        ...


class QuadraticTrainer:
    """Local SGD on per-worker quadratic objectives."""

    def __init__(self, objectives: Sequence[WorkerObjective], local_iters: int, learning_rate: float,
                 noise_sigma: float = 0.0):
        self.objectives = {obj.worker_id: obj for obj in objectives}
        self.local_iters = local_iters
        self.learning_rate = learning_rate
        self.noise_sigma = noise_sigma

    def train(self, worker_id: str, w_in: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        return local_sgd(self.objectives[worker_id], w_in, self.local_iters, self.learning_rate, rng,
                         self.noise_sigma)

    def loss(self, w: np.ndarray) -> float:
        return global_loss(list(self.objectives.values()), w)

    def weight(self, worker_id: str) -> float:
        return self.objectives[worker_id].weight


def build_objectives(workers: Sequence[str], config: FLConfig, streams: StreamFactory) -> List[WorkerObjective]:
    """Worker objectives in sorted worker order; missing centers are drawn from N(0, I)."""
    objectives = []
    for worker in sorted(workers):
        if worker in config.centers:
            center = np.array(config.centers[worker], dtype=float)
        else:
            center = streams.stream("worker", worker, "center").normal(0.0, 1.0, size=config.model_dim)
        objectives.append(WorkerObjective(worker, center, config.sample_counts.get(worker, 1)))
    unknown = set(config.centers) - set(workers)
    if unknown:
        raise FLConfigError(f"centers given for unknown workers {sorted(unknown)}", "$.fl.centers")
    return objectives


@dataclass
class FLState:
    """Global model plus everything needed to run the next round."""
    model: np.ndarray
    workers: List[str]
    aggregator: str
    trainer: Trainer


@dataclass(frozen=True)
class FLRoundLog:
    round: int
    loss: float
    sim_time_s: float
    start_time_s: float
    upload_delays: Mapping[str, float]
    download_delays: Mapping[str, float]
    compute_times: Mapping[str, float]
    straggler: str
    model: Tuple[float, ...]

    @property
    def round_time_s(self) -> float:
        return self.sim_time_s - self.start_time_s

    @property
    def upload_max_s(self) -> float:
        return max(self.upload_delays.values())

    @property
    def download_max_s(self) -> float:
        return max(self.download_delays.values())


def compute_time(config: FLConfig, worker: str, streams: StreamFactory) -> float:
    if config.compute_model is ComputeModel.PER_WORKER:
        return config.per_worker_compute_s.get(worker, config.compute_time_s)
    if config.compute_model is ComputeModel.GAUSSIAN:
        return max(0.0, float(streams.stream("compute", worker).normal(config.compute_time_s,
                                                                         config.compute_sigma_s)))
    return config.compute_time_s


def select_participants(state: FLState, config: FLConfig, streams: StreamFactory) -> List[str]:
    if config.participation >= 1.0:
        return list(state.workers)
    count = max(1, math.ceil(config.participation * len(state.workers)))
    chosen = streams.stream("participation").choice(len(state.workers), size=count, replace=False)
    return [state.workers[i] for i in sorted(chosen)]


def run_round(engine: NetworkEngine, config: FLConfig, state: FLState, round_idx: int,
              streams: StreamFactory) -> FLRoundLog:
    """
    Run one synchronous round and advance the engine to its end.

    Local training happens at the round start (its duration is the sampled
    compute time), then uploads, FedAvg at the aggregator and downloads.

    Raises:
        RoundAbortedError: If a transfer fails or the round exceeds
            ``max_round_time_s``
    """
    start = engine.now
    engine.router.set_round(round_idx)
    participants = select_participants(state, config, streams)
    local_models = {w: state.trainer.train(w, state.model, streams.stream("worker", w, "sgd"))
                    for w in participants}
    compute_times = {w: compute_time(config, w, streams) for w in participants}

    uploads: Dict[str, float] = {}
    downloads: Dict[str, float] = {}
    flow_ids: List[int] = []
    aggregated: Dict[str, np.ndarray] = {}
    engine.record("round_start", round=round_idx, workers=participants)

    def on_download(flow: Flow) -> None:
        downloads[flow.dst] = engine.end_to_end_delay(flow.flow_id)

    def on_upload(flow: Flow) -> None:
        uploads[flow.src] = engine.end_to_end_delay(flow.flow_id)
        if len(uploads) < len(participants):
            return
        aggregated["model"] = fedavg([(local_models[w], state.trainer.weight(w)) for w in participants],
                                     config.aggregation)
        engine.record("fedavg", round=round_idx)
        for worker in participants:
            flow_ids.append(engine.start_flow(state.aggregator, worker, config.model_size_bytes, engine.now,
                                              reliable=True, label=f"round {round_idx} download {worker}",
                                              on_complete=on_download))

    def upload_starter(worker: str):
        def start_upload(now: float) -> None:
            flow_ids.append(engine.start_flow(worker, state.aggregator, config.model_size_bytes, now,
                                              reliable=True, label=f"round {round_idx} upload {worker}",
                                              on_complete=on_upload))
        return start_upload

    for worker in participants:
        engine.schedule_timer(start + compute_times[worker], upload_starter(worker), f"compute {worker}")

    def finished() -> bool:
        return len(downloads) == len(participants) or any(engine.flows[f].failed for f in flow_ids)

    engine.run_until(start + config.max_round_time_s, stop=finished)
    failed = [engine.flows[f] for f in flow_ids if engine.flows[f].failed]
    if failed or len(downloads) < len(participants):
        detail = ", ".join(f"{f.label} ({f.src}->{f.dst})" for f in failed) or "timeout"
        engine.record("round_aborted", round=round_idx, reason=detail)
        raise RoundAbortedError(f"round {round_idx} aborted: {detail}")

    state.model = aggregated["model"]
    loss = state.trainer.loss(state.model)
    straggler = max(participants, key=lambda w: (uploads[w] + downloads[w], w))
    log = FLRoundLog(round=round_idx, loss=loss, sim_time_s=engine.now, start_time_s=start,
                     upload_delays=dict(uploads), download_delays=dict(downloads), compute_times=compute_times,
                     straggler=straggler, model=tuple(float(v) for v in state.model))
    engine.record("round_complete", round=round_idx, loss=loss, round_time_s=log.round_time_s,
                  straggler=straggler)
    logger.info("round %d: loss=%.6g time=%.3fs straggler=%s", round_idx, loss, log.round_time_s, straggler)
    return log


def build_router(policy: Policy, topo: Topology, scenario_routing, streams: StreamFactory,
                 tables: Optional[Dict[str, QTable]] = None) -> RoutingPolicy:
    """Routing policy for an experiment; ``tables`` warm-starts or freezes the agents."""
    if policy is Policy.SHORTEST_PATH:
        return ShortestPathRouting()
    if policy is Policy.MARL_FROZEN:
        if tables is None:
            raise SnapshotError("marl_frozen needs a Q-table snapshot")
        return MultiAgentQRouting(topo, replace(scenario_routing, mode=PolicyMode.FROZEN), streams, tables)
    return MultiAgentQRouting(topo, replace(scenario_routing, mode=PolicyMode.ONLINE), streams, tables)


@dataclass
class ExperimentResult:
    """Everything one (scenario, policy, seed) run produced."""
    policy: Policy
    seed: int
    rounds: List[FLRoundLog]
    engine: NetworkEngine
    router: RoutingPolicy

    @property
    def losses(self) -> List[float]:
        return [r.loss for r in self.rounds]

    @property
    def round_times(self) -> List[float]:
        return [r.round_time_s for r in self.rounds]

    def mean_round_time(self, first: int = 0, last: Optional[int] = None) -> float:
        times = self.round_times[first:last]
        return float(np.mean(times)) if times else math.nan

    @property
    def qtables(self) -> Optional[Dict[str, QTable]]:
        return self.router.tables if isinstance(self.router, MultiAgentQRouting) else None

    def snapshot(self) -> Optional[Dict[str, Any]]:
        tables = self.qtables
        return export_qtables(tables) if tables is not None else None

    @property
    def q_updates(self) -> int:
        return self.router.counters.q_updates if isinstance(self.router, MultiAgentQRouting) else 0


def init_state(topo: Topology, config: FLConfig, streams: StreamFactory) -> FLState:
    workers = sorted(topo.workers)
    aggregators = topo.aggregators
    if len(aggregators) != 1:
        raise FLConfigError(f"expected exactly one aggregator, found {len(aggregators)}", "$.nodes")
    if not workers:
        raise FLConfigError("the topology has no workers", "$.nodes")
    objectives = build_objectives(workers, config, streams)
    trainer = QuadraticTrainer(objectives, config.local_iters, config.learning_rate, config.batch_noise_sigma)
    initial = np.zeros(config.model_dim) if config.initial_model is None else np.array(config.initial_model)
    return FLState(model=initial, workers=workers, aggregator=aggregators[0], trainer=trainer)


def run_experiment(scenario: "Scenario", policy: Policy, tables: Optional[Dict[str, QTable]] = None,
                   rounds: Optional[int] = None, seed: Optional[int] = None) -> ExperimentResult:
    """
    Run every FL round of a scenario under one routing policy.

    Args:
        scenario: Loaded scenario
        policy: Routing policy
        tables: Imported Q-tables (required for ``marl_frozen``, optional
            warm start for ``marl_online``)
        rounds: Overrides ``fl.rounds``
        seed: Overrides the scenario seed
    """
    seed = scenario.topology.seed if seed is None else seed
    config = scenario.fl if rounds is None else replace(scenario.fl, rounds=rounds)
    streams = StreamFactory(seed)
    topo = replace(scenario.topology, seed=seed)
    scheduler = LinkScheduler(topo, scenario.scheduler, streams, base_dir=scenario.base_dir)
    router = build_router(policy, topo, scenario.routing, streams, tables)
    engine = NetworkEngine(topo, router, scenario.netsim, streams, scheduler)
    state = init_state(topo, config, streams)
    if config.learning_rate >= 2.0:
        logger.warning("learning rate %s >= 2 diverges on a unit-curvature quadratic", config.learning_rate)
        engine.record("divergence_warning", learning_rate=config.learning_rate)

    logger.info("running %s: %d rounds, seed %d, policy %s", scenario.name, config.rounds, seed, policy.value)
    logs = [run_round(engine, config, state, r, streams) for r in range(config.rounds)]
    return ExperimentResult(policy=policy, seed=seed, rounds=logs, engine=engine, router=router)


__all__ = [
    "Aggregation", "ComputeModel", "ExperimentResult", "FLConfig", "FLConfigError", "FLError", "FLRoundLog",
    "FLState", "Policy", "QuadraticTrainer", "RoundAbortedError", "Trainer", "WorkerObjective",
    "build_objectives", "build_router", "closed_form_global", "fedavg", "global_loss", "init_state", "local_sgd",
    "run_experiment", "run_round",
]
