"""Experiment configuration: parsing, validation and object construction.

Configs are TOML (preferred) or JSON documents. See ``configs/`` for an
annotated example of every supported scenario.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import rng as rngmod
from .errors import ConfigError
from .objective import LogisticSynthetic, Objective, QuadraticGeneral, QuadraticIsotropic, make_logistic
from .participation import DEFAULT_P_MIN, ClientPopulation, dirichlet, generate_population, manual_population
from .weighting import DEFAULT_BETA, STRATEGIES as WEIGHT_STRATEGIES, parse_K

BASELINES = ("average_participating", "average_all", "fedvarp", "mifa")
ALL_STRATEGIES = WEIGHT_STRATEGIES + BASELINES
OBJECTIVE_KINDS = ("quadratic_isotropic", "quadratic_general", "logistic")

# Keys that cannot change the numerical output and are left out of the hash.
# The seed is hashed, so equal hashes mean byte-identical deterministic outputs.
_UNHASHED = ("workers", "checkpoint_every", "record_x", "analysis_mode")

_REQUIRED = object()


def _get(doc: dict, key: str, kind, path: str, default=_REQUIRED):
    full = f"{path}.{key}" if path else key
    if key not in doc:
        if default is _REQUIRED:
            raise ConfigError("missing required field", full)
        return default
    value = doc[key]
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"expected a number, got {value!r}", full)
        if not math.isfinite(value):
            raise ConfigError("must be finite", full)
        return float(value)
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            if isinstance(value, float) and value.is_integer():
                return int(value)
            raise ConfigError(f"expected an integer, got {value!r}", full)
        return value
    if kind is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"expected true/false, got {value!r}", full)
        return value
    if kind is str:
        if not isinstance(value, str):
            raise ConfigError(f"expected a string, got {value!r}", full)
        return value
    if kind is dict:
        if not isinstance(value, dict):
            raise ConfigError("expected a table", full)
        return value
    return value


@dataclass
class ExperimentConfig:
    N: int
    T: int
    I: int
    gamma: float
    eta: float
    strategy: str
    objective: dict
    population: dict
    seed: int = 0
    K: int | None = None
    beta: float = DEFAULT_BETA
    weight_scale: float = 1.0
    cadence: int = 10
    x0: list | None = None
    workers: int = 1
    checkpoint_every: int = 0
    analysis_mode: bool = False
    record_x: bool = False
    lr_decay: dict | None = None
    h_alpha: object = 1.0
    overrides: dict = field(default_factory=dict)
    raw: dict = field(default_factory=dict, repr=False)

    def __post_init__(self) -> None:
        if self.N < 1:
            raise ConfigError("must be at least 1", "N")
        if self.T < 0:
            raise ConfigError("must be nonnegative", "T")
        if self.I < 1:
            raise ConfigError("must be at least 1", "I")
        if not self.gamma >= 0:
            raise ConfigError("must be nonnegative", "gamma")
        if not self.eta > 0:
            raise ConfigError("must be positive", "eta")
        if self.strategy not in ALL_STRATEGIES:
            raise ConfigError(
                f"unknown strategy {self.strategy!r}; valid: {', '.join(ALL_STRATEGIES)}",
                "algorithm.strategy",
            )
        if self.cadence < 1:
            raise ConfigError("must be at least 1", "cadence")
        if self.workers < 1:
            raise ConfigError("must be at least 1", "workers")
        if not self.weight_scale > 0:
            raise ConfigError("must be positive", "algorithm.weight_scale")
        if self.seed < 0:
            raise ConfigError("must be nonnegative", "seed")

    def with_strategy(self, strategy: str) -> "ExperimentConfig":
        """Copy of this config running ``strategy`` with any per-strategy overrides."""
        if strategy not in ALL_STRATEGIES:
            raise ConfigError(f"unknown strategy {strategy!r}; valid: {', '.join(ALL_STRATEGIES)}", "strategies")
        raw = copy.deepcopy(self.raw)
        raw.setdefault("algorithm", {})["strategy"] = strategy
        return from_dict(raw)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        raw = copy.deepcopy(self.raw)
        raw["seed"] = int(seed)
        return from_dict(raw)

    def replace(self, **changes) -> "ExperimentConfig":
        """Copy with raw keys replaced; ``algorithm__K=5`` reaches into tables."""
        raw = copy.deepcopy(self.raw)
        for key, value in changes.items():
            node = raw
            parts = key.split("__")
            for part in parts[:-1]:
                node = node.setdefault(part, {})
            node[parts[-1]] = value
        return from_dict(raw)

    def hash(self) -> str:
        doc = {k: v for k, v in self.raw.items() if k not in _UNHASHED}
        doc.setdefault("seed", 0)
        text = json.dumps(doc, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()

    def gamma_at(self, t: int) -> float:
        if not self.lr_decay:
            return self.gamma
        start = self.lr_decay.get("start", 0)
        every = self.lr_decay["every"]
        if t < start:
            return self.gamma
        return self.gamma * self.lr_decay["factor"] ** ((t - start) // every + 1)

    def h_weights(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=np.float64)
        if isinstance(self.h_alpha, str):
            if self.h_alpha == "inverse_p":
                return 1.0 / p
            raise ConfigError(f"expected a number, a list or 'inverse_p', got {self.h_alpha!r}", "metrics.h_alpha")
        alpha = np.broadcast_to(np.asarray(self.h_alpha, dtype=np.float64), p.shape).copy()
        return alpha


def _apply_overrides(doc: dict) -> dict:
    strategy = doc.get("algorithm", {}).get("strategy")
    over = doc.get("overrides", {}).get(strategy) if strategy else None
    if not over:
        return doc
    doc = copy.deepcopy(doc)
    for key, value in over.items():
        if key in ("K", "beta", "weight_scale"):
            doc.setdefault("algorithm", {})[key] = value
        else:
            doc[key] = value
    return doc


def from_dict(doc: dict) -> ExperimentConfig:
    if not isinstance(doc, dict):
        raise ConfigError("top level must be a table")
    raw = copy.deepcopy(doc)
    doc = _apply_overrides(doc)
    alg = _get(doc, "algorithm", dict, "", {})
    metrics = _get(doc, "metrics", dict, "", {})
    T = _get(doc, "T", int, "")
    strategy = _get(alg, "strategy", str, "algorithm")
    K = parse_K(alg.get("K"), T) if "K" in alg else None
    lr_decay = doc.get("lr_decay")
    if lr_decay is not None:
        lr_decay = {
            "factor": _get(lr_decay, "factor", float, "lr_decay"),
            "every": _get(lr_decay, "every", int, "lr_decay"),
            "start": _get(lr_decay, "start", int, "lr_decay", 0),
        }
        if lr_decay["every"] < 1:
            raise ConfigError("must be at least 1", "lr_decay.every")
    x0 = doc.get("x0")
    cfg = ExperimentConfig(
        N=_get(doc, "N", int, ""),
        T=T,
        I=_get(doc, "I", int, ""),
        gamma=_get(doc, "gamma", float, ""),
        eta=_get(doc, "eta", float, ""),
        strategy=strategy,
        objective=_get(doc, "objective", dict, ""),
        population=_get(doc, "population", dict, ""),
        seed=_get(doc, "seed", int, "", 0),
        K=K,
        beta=_get(alg, "beta", float, "algorithm", DEFAULT_BETA),
        weight_scale=_get(alg, "weight_scale", float, "algorithm", 1.0),
        cadence=_get(doc, "cadence", int, "", 10),
        x0=x0,
        workers=_get(doc, "workers", int, "", 1),
        checkpoint_every=_get(doc, "checkpoint_every", int, "", 0),
        analysis_mode=_get(doc, "analysis_mode", bool, "", False),
        record_x=_get(doc, "record_x", bool, "", False),
        lr_decay=lr_decay,
        h_alpha=metrics.get("h_alpha", 1.0),
        overrides=_get(doc, "overrides", dict, "", {}),
        raw=raw,
    )
    if strategy in ("fedau_finite_K", "fedau_ema") and cfg.K is None:
        raise ConfigError(f"{strategy} needs a finite K", "algorithm.K")
    return cfg


def load(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    if path.suffix.lower() == ".json":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    else:
        try:
            doc = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"invalid TOML: {exc}") from None
    return from_dict(doc)


def build_population(cfg: ExperimentConfig) -> ClientPopulation:
    pop = cfg.population
    mode = _get(pop, "mode", str, "population", "manual" if "p" in pop else "generated")
    if mode == "manual":
        p = _get(pop, "p", list, "population")
        if len(p) != cfg.N:
            raise ConfigError(f"has {len(p)} entries but N = {cfg.N}", "population.p")
        return manual_population(p, seed=cfg.seed, kappa=pop.get("kappa"))
    if mode == "generated":
        return generate_population(
            cfg.N,
            _get(pop, "C", int, "population", 10),
            _get(pop, "alpha_d", float, "population", 0.1),
            _get(pop, "alpha_p", float, "population", 0.1),
            _get(pop, "mu", float, "population", 0.1),
            _get(pop, "p_min", float, "population", DEFAULT_P_MIN),
            seed=cfg.seed,
        )
    if mode == "file":
        loaded = ClientPopulation.load(_get(pop, "path", str, "population"))
        if loaded.num_clients != cfg.N:
            raise ConfigError(f"file has {loaded.num_clients} clients but N = {cfg.N}", "population.path")
        loaded.seed = cfg.seed
        return loaded
    raise ConfigError(f"unknown mode {mode!r}; valid: manual, generated, file", "population.mode")


def build_objective(cfg: ExperimentConfig, population: ClientPopulation) -> Objective:
    obj = cfg.objective
    kind = _get(obj, "kind", str, "objective")
    sigma = _get(obj, "noise_sigma", float, "objective", 0.0)
    data_seed = _get(obj, "seed", int, "objective", cfg.seed)
    rng = rngmod.stream(data_seed, rngmod.DATA)
    if kind == "quadratic_isotropic":
        if "centers" in obj:
            centers = np.asarray(obj["centers"], dtype=np.float64)
        else:
            d = _get(obj, "dim", int, "objective")
            centers = _get(obj, "center_scale", float, "objective", 1.0) * rng.standard_normal((cfg.N, d))
        if centers.ndim != 2 or centers.shape[0] != cfg.N:
            raise ConfigError(f"need {cfg.N} centers", "objective.centers")
        if "dim" in obj and centers.shape[1] != obj["dim"]:
            raise ConfigError("center length does not match dim", "objective.centers")
        return QuadraticIsotropic(centers, noise_sigma=sigma)
    if kind == "quadratic_general":
        d = _get(obj, "dim", int, "objective")
        if "centers" in obj:
            centers = np.asarray(obj["centers"], dtype=np.float64)
        else:
            centers = _get(obj, "center_scale", float, "objective", 1.0) * rng.standard_normal((cfg.N, d))
        if "hessians" in obj:
            hessians = np.asarray(obj["hessians"], dtype=np.float64)
        else:
            lo = _get(obj, "eig_min", float, "objective", 0.5)
            hi = _get(obj, "eig_max", float, "objective", 2.0)
            hessians = []
            for _ in range(cfg.N):
                q, _ = np.linalg.qr(rng.standard_normal((d, d)))
                eig = rng.uniform(lo, hi, size=d)
                h = (q * eig) @ q.T
                hessians.append(0.5 * (h + h.T))
            hessians = np.array(hessians)
        if centers.shape != (cfg.N, d):
            raise ConfigError(f"need {cfg.N} centers of length {d}", "objective.centers")
        return QuadraticGeneral(hessians, centers, noise_sigma=sigma)
    if kind == "logistic":
        kappa = population.kappa
        if kappa is None:
            C = _get(obj, "classes", int, "objective", 10)
            alpha_d = _get(obj, "alpha_d", float, "objective", 0.1)
            kappa = np.stack([dirichlet(alpha_d, C, rng) for _ in range(cfg.N)])
        obj_out = make_logistic(
            kappa,
            _get(obj, "samples_per_client", int, "objective", 50),
            _get(obj, "features", int, "objective", 10),
            rng,
            separation=_get(obj, "separation", float, "objective", 2.0),
            batch_size=_get(obj, "batch_size", int, "objective", 32),
            l2=_get(obj, "l2", float, "objective", 1e-3),
        )
        return obj_out
    raise ConfigError(f"unknown kind {kind!r}; valid: {', '.join(OBJECTIVE_KINDS)}", "objective.kind")


__all__ = [
    "ALL_STRATEGIES",
    "BASELINES",
    "ExperimentConfig",
    "LogisticSynthetic",
    "build_objective",
    "build_population",
    "from_dict",
    "load",
]
