"""FedAvg with pluggable aggregation weights, plus the baseline aggregators.

One round: sample participation, obtain this round's weights (from the
previous rounds' participation only), run ``I`` local SGD steps on every
participating client starting from the global model, and aggregate
``x + (eta/N) * sum_n w_n * delta_n``.

Every random draw is keyed by (seed, round, client, local step), so the
trajectory is a pure function of the config. Client updates may run on a
thread pool; aggregation always reduces in client-index order.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import rng as rngmod
from .config import BASELINES, ExperimentConfig, build_objective, build_population
from .errors import ConfigError, DivergenceError
from .metrics import MetricRecorder, Targets, rows_to_csv
from .objective import Objective
from .participation import ClientPopulation
from .weighting import STRATEGIES as WEIGHT_STRATEGIES, WeightEstimator

log = logging.getLogger(__name__)

DIVERGENCE_BOUND = 1e9


@dataclass
class ClientUpdate:
    client: int
    delta: np.ndarray
    participated: bool


@dataclass
class RoundRecord:
    t: int
    indicators: np.ndarray
    weights: np.ndarray
    step_norm: float


@dataclass
class Trace:
    config_hash: str
    seed: int
    strategy: str
    p: np.ndarray
    records: list[RoundRecord] = field(default_factory=list)
    rows: list[dict] = field(default_factory=list)
    xs: list[np.ndarray] = field(default_factory=list)
    x_final: np.ndarray | None = None
    start_round: int = 0
    status: str = "ok"
    error: str | None = None

    def weights(self) -> np.ndarray:
        return np.array([r.weights for r in self.records]).reshape(len(self.records), self.p.size)

    def indicators(self) -> np.ndarray:
        return np.array([r.indicators for r in self.records], dtype=bool).reshape(len(self.records), self.p.size)

    def header(self) -> list[str]:
        return [f"config_sha256={self.config_hash}", f"seed={self.seed}", f"strategy={self.strategy}"]

    def csv(self) -> str:
        return rows_to_csv(self.rows, self.header())


def local_update(
    objective: Objective,
    n: int,
    x: np.ndarray,
    gamma: float,
    I: int,
    seed: int,
    t: int,
) -> ClientUpdate:
    """``I`` sequential SGD steps from ``x``; step i draws from stream (seed, t, n, i)."""
    y = x.copy()
    for i in range(I):
        gen = rngmod.scratch_stream(seed, rngmod.GRADIENT, t, n, i) if objective.stochastic else None
        y = y - gamma * objective.stochastic_grad(n, y, gen)
    delta = y - x
    if not np.all(np.isfinite(delta)):
        raise FloatingPointError(f"client {n} produced a non-finite update in round {t}")
    return ClientUpdate(n, delta, True)


def _masked(update: ClientUpdate, participated: bool) -> ClientUpdate:
    # Analysis mode: every client computes, non-participants are multiplied by 0.
    if participated:
        return update
    return ClientUpdate(update.client, 0.0 * update.delta, False)


def aggregate_weighted(x: np.ndarray, updates: list[ClientUpdate], weights, eta: float, N: int) -> np.ndarray:
    acc = np.zeros_like(x)
    for u in sorted(updates, key=lambda u: u.client):
        acc += weights[u.client] * u.delta
    return x + (eta / N) * acc


def aggregate_baseline(
    kind: str,
    x: np.ndarray,
    updates: list[ClientUpdate],
    eta: float,
    N: int,
    memory: np.ndarray | None = None,
) -> np.ndarray:
    """Baseline aggregation rules. ``memory`` (N x d) is updated in place for fedvarp/mifa."""
    part = sorted((u for u in updates if u.participated), key=lambda u: u.client)
    if kind == "average_all":
        return aggregate_weighted(x, updates, np.ones(N), eta, N)
    if kind == "average_participating":
        if not part:
            return x.copy()
        acc = np.zeros_like(x)
        for u in part:
            acc += u.delta
        return x + (eta / len(part)) * acc
    if kind in ("fedvarp", "mifa"):
        if memory is None or memory.shape != (N, x.size):
            raise ConfigError(f"{kind} needs an N x d server memory", "server_memory")
        if kind == "fedvarp":
            correction = np.zeros_like(x)
            for u in part:
                correction += u.delta - memory[u.client]
            if part:
                correction /= len(part)
            new_x = x + eta * (correction + memory.sum(axis=0) / N)
            for u in part:
                memory[u.client] = u.delta
            return new_x
        for u in part:
            memory[u.client] = u.delta
        return x + eta * (memory.sum(axis=0) / N)
    raise ConfigError(f"unknown baseline {kind!r}; valid: {', '.join(BASELINES)}", "strategy")


def _effective_weights(kind: str, indicators: np.ndarray) -> np.ndarray:
    # What each fresh update is multiplied by, relative to eta/N.
    N = indicators.size
    count = int(indicators.sum())
    if kind in ("average_participating", "fedvarp") and count:
        return np.full(N, N / count)
    return np.ones(N)


def simulate_weights(population: ClientPopulation, estimator: WeightEstimator, T: int) -> tuple[np.ndarray, np.ndarray]:
    """Weights and participation bits for rounds ``0..T-1`` without any model.

    Uses the same participation stream as a full run with the same seed.
    """
    N = population.num_clients
    weights = np.empty((T, N))
    ind = np.empty((T, N), dtype=bool)
    for t in range(T):
        weights[t] = estimator.weights if t == 0 else estimator.advance(ind[t - 1])
        ind[t] = population.sample_round(t)
    return weights, ind


class _Checkpointer:
    def __init__(self, directory, every: int) -> None:
        self.dir = Path(directory) if directory else None
        self.every = every

    def due(self, rounds_done: int) -> bool:
        return bool(self.dir) and self.every > 0 and rounds_done % self.every == 0

    def write(self, doc: dict) -> Path:
        self.dir.mkdir(parents=True, exist_ok=True)
        path = self.dir / f"checkpoint_{doc['round']:08d}.json"
        path.write_text(json.dumps(doc, sort_keys=True) + "\n")
        return path


def load_checkpoint(path) -> dict:
    return json.loads(Path(path).read_text())


def run_experiment(
    cfg: ExperimentConfig,
    *,
    population: ClientPopulation | None = None,
    objective: Objective | None = None,
    resume: dict | None = None,
    checkpoint_dir=None,
    keep_records: bool = True,
) -> Trace:
    """Run the configured experiment and return its trace.

    Raises ``DivergenceError`` (carrying the partial trace) if the model
    becomes non-finite or its norm exceeds 1e9.
    """
    pop = population if population is not None else build_population(cfg)
    obj = objective if objective is not None else build_objective(cfg, pop)
    N = cfg.N
    if pop.num_clients != N or obj.num_clients != N:
        raise ConfigError(f"population has {pop.num_clients} and objective {obj.num_clients} clients, N = {N}", "N")
    d = obj.dim
    x = np.zeros(d) if cfg.x0 is None else np.asarray(cfg.x0, dtype=np.float64).copy()
    if x.shape != (d,):
        raise ConfigError(f"expected length {d}", "x0")

    weighted = cfg.strategy in WEIGHT_STRATEGIES
    estimator = WeightEstimator(cfg.strategy, N, K=cfg.K, beta=cfg.beta, p=pop.p) if weighted else None
    memory = np.zeros((N, d)) if cfg.strategy in ("fedvarp", "mifa") else None
    targets = Targets(obj, pop.p, cfg.h_weights(pop.p))
    recorder = MetricRecorder(pop.p, targets, cfg.cadence)
    trace = Trace(cfg.hash(), cfg.seed, cfg.strategy, pop.p.copy())
    checkpoints = _Checkpointer(checkpoint_dir, cfg.checkpoint_every)

    start, last_step = 0, 0.0
    if resume is not None:
        if resume.get("config_sha256") != trace.config_hash or resume.get("seed") != cfg.seed:
            raise ConfigError("checkpoint belongs to a different config or seed", "resume")
        start = int(resume["round"])
        x = np.asarray(resume["x"], dtype=np.float64)
        last_step = float(resume["last_step"])
        recorder.restore(resume["recorder"])
        if estimator is not None:
            estimator = WeightEstimator.from_dict(resume["estimator"])
        if memory is not None:
            memory = np.asarray(resume["server_memory"], dtype=np.float64).reshape(N, d)
    trace.start_round = start
    if cfg.record_x:
        trace.xs.append(x.copy())

    pool = ThreadPoolExecutor(max_workers=cfg.workers) if cfg.workers > 1 else None
    prev_ind = pop.sample_round(start - 1) if start > 0 else None
    try:
        for t in range(start, cfg.T):
            if t > 0 and recorder.due(t):
                recorder.row(t, x, last_step)
            ind = pop.sample_round(t)
            if weighted:
                w = estimator.weights if t == 0 and resume is None else estimator.advance(prev_ind)
                w = cfg.weight_scale * w
            else:
                w = _effective_weights(cfg.strategy, ind)
            recorder.observe_weights(w)
            if t == 0:
                recorder.row(0, x, last_step)

            gamma = cfg.gamma_at(t)
            clients = range(N) if cfg.analysis_mode else np.flatnonzero(ind).tolist()

            def work(n, x=x, gamma=gamma, t=t):
                return local_update(obj, n, x, gamma, cfg.I, cfg.seed, t)

            try:
                updates = list(pool.map(work, clients)) if pool else [work(n) for n in clients]
            except FloatingPointError as exc:
                raise DivergenceError(str(exc)) from None
            if cfg.analysis_mode:
                updates = [_masked(u, bool(ind[u.client])) for u in updates]

            if weighted:
                new_x = aggregate_weighted(x, updates, w, cfg.eta, N)
            else:
                new_x = aggregate_baseline(cfg.strategy, x, updates, cfg.eta, N, memory)

            if not np.all(np.isfinite(new_x)) or np.linalg.norm(new_x) > DIVERGENCE_BOUND:
                raise DivergenceError(f"model diverged in round {t} (norm {np.linalg.norm(new_x):.3g})")
            last_step = float(np.linalg.norm(new_x - x))
            x = new_x
            prev_ind = ind
            if keep_records:
                trace.records.append(RoundRecord(t, ind, w, last_step))
            if cfg.record_x:
                trace.xs.append(x.copy())
            if checkpoints.due(t + 1):
                checkpoints.write(
                    {
                        "round": t + 1,
                        "x": x.tolist(),
                        "last_step": last_step,
                        "recorder": recorder.state(),
                        "estimator": estimator.to_dict() if estimator else None,
                        "server_memory": memory.tolist() if memory is not None else None,
                        "config_sha256": trace.config_hash,
                        "seed": cfg.seed,
                    }
                )
        if cfg.T == 0:
            recorder.observe_weights(estimator.weights if weighted else np.ones(N))
            recorder.row(0, x, 0.0)
        elif recorder.due(cfg.T, final=True) and (not recorder.rows or recorder.rows[-1]["t"] != cfg.T):
            recorder.row(cfg.T, x, last_step)
    except DivergenceError as exc:
        trace.status = "diverged"
        trace.error = str(exc)
        trace.rows = recorder.rows
        trace.x_final = x
        log.error("run aborted: %s", exc)
        raise DivergenceError(str(exc), trace) from None
    finally:
        if pool:
            pool.shutdown()
    trace.rows = recorder.rows
    trace.x_final = x
    return trace
