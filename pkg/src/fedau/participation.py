"""Hidden client participation: probabilities and per-round Bernoulli draws.

Heterogeneous probabilities are generated so that they correlate with each
client's class mix: every client draws a class distribution ``kappa_n`` from
``Dir(alpha_d)``, one global class-importance vector ``q`` is drawn from
``Dir(alpha_p)``, and ``p_n = C * mu * <kappa_n, q>``. Since both Dirichlet
means are uniform, ``E[p_n] = mu`` before the floor ``p_min`` is applied.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import rng as rngmod
from .errors import ConfigError

DEFAULT_P_MIN = 0.02


def dirichlet(alpha: float, size: int, rng: np.random.Generator) -> np.ndarray:
    """One draw from a symmetric Dirichlet via normalized Gamma(alpha, 1) variates."""
    while True:
        g = rng.gamma(alpha, 1.0, size=size)
        total = g.sum()
        # Very small alpha can underflow every coordinate; redraw in that case.
        if total > 0.0 and np.isfinite(total):
            return g / total


@dataclass
class ClientPopulation:
    p: np.ndarray
    kappa: np.ndarray | None = None
    q: np.ndarray | None = None
    seed: int = 0
    metadata: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.p = np.asarray(self.p, dtype=np.float64)
        if self.p.ndim != 1 or self.p.size < 1:
            raise ConfigError("p must be a non-empty vector", "population.p")
        if np.any(~np.isfinite(self.p)) or np.any(self.p <= 0.0) or np.any(self.p > 1.0):
            raise ConfigError("every p_n must lie in (0, 1]", "population.p")
        if self.kappa is not None:
            self.kappa = np.asarray(self.kappa, dtype=np.float64)
            if self.kappa.ndim != 2 or self.kappa.shape[0] != self.p.size:
                raise ConfigError("kappa must have one row per client", "population.kappa")
            if np.any(np.abs(self.kappa.sum(axis=1) - 1.0) > 1e-12):
                raise ConfigError("each kappa_n must sum to 1", "population.kappa")
        if self.q is not None:
            self.q = np.asarray(self.q, dtype=np.float64)
            if abs(self.q.sum() - 1.0) > 1e-12:
                raise ConfigError("q must sum to 1", "population.q")
        p_min = self.metadata.get("p_min")
        if p_min is not None and self.p.min() < p_min:
            raise ConfigError("p_n below p_min", "population.p")

    @property
    def num_clients(self) -> int:
        return self.p.size

    def sample_round(self, t: int) -> np.ndarray:
        """Participation bits for round ``t`` as a bool vector.

        Bit n is the n-th uniform of the stream keyed by (seed, t) compared
        against p_n, so it depends only on (seed, t, n).
        """
        u = rngmod.scratch_stream(self.seed, rngmod.PARTICIPATION, t).random(self.num_clients)
        return u < self.p

    def sample_rounds(self, start: int, stop: int) -> np.ndarray:
        """Stack of ``sample_round(t)`` for ``start <= t < stop``."""
        out = np.empty((max(stop - start, 0), self.num_clients), dtype=bool)
        for i, t in enumerate(range(start, stop)):
            out[i] = self.sample_round(t)
        return out

    def to_dict(self) -> dict:
        return {
            "N": self.num_clients,
            "C": None if self.kappa is None else int(self.kappa.shape[1]),
            "p": self.p.tolist(),
            "kappa": None if self.kappa is None else self.kappa.tolist(),
            "q": None if self.q is None else self.q.tolist(),
            "seed": self.seed,
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ClientPopulation":
        try:
            pop = cls(
                p=doc["p"],
                kappa=doc.get("kappa"),
                q=doc.get("q"),
                seed=int(doc.get("seed", 0)),
                metadata=dict(doc.get("metadata") or {}),
            )
        except KeyError as exc:
            raise ConfigError("missing required field", f"population.{exc.args[0]}") from None
        if "N" in doc and doc["N"] != pop.num_clients:
            raise ConfigError("N does not match len(p)", "population.N")
        return pop

    def dump(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "ClientPopulation":
        return cls.from_dict(json.loads(Path(path).read_text()))


def generate_population(
    N: int,
    C: int,
    alpha_d: float,
    alpha_p: float,
    mu: float = 0.1,
    p_min: float = DEFAULT_P_MIN,
    seed: int = 0,
) -> ClientPopulation:
    if N < 1:
        raise ConfigError("must be at least 1", "population.N")
    if C < 2:
        raise ConfigError("must be at least 2", "population.C")
    if not alpha_d > 0:
        raise ConfigError("must be positive", "population.alpha_d")
    if not alpha_p > 0:
        raise ConfigError("must be positive", "population.alpha_p")
    if not 0 < mu <= 1:
        raise ConfigError("must lie in (0, 1]", "population.mu")
    if not 0 < p_min <= 1:
        raise ConfigError("must lie in (0, 1]", "population.p_min")
    rng = rngmod.stream(seed, rngmod.POPULATION)
    kappa = np.stack([dirichlet(alpha_d, C, rng) for _ in range(N)])
    q = dirichlet(alpha_p, C, rng)
    raw = C * mu * (kappa @ q)
    p = np.clip(raw, p_min, 1.0)
    meta = {"alpha_d": alpha_d, "alpha_p": alpha_p, "mu": mu, "p_min": p_min, "mode": "generated"}
    return ClientPopulation(p=p, kappa=kappa, q=q, seed=seed, metadata=meta)


def manual_population(p, seed: int = 0, kappa=None) -> ClientPopulation:
    return ClientPopulation(p=p, kappa=kappa, seed=seed, metadata={"mode": "manual"})
