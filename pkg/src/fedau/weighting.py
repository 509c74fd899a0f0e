"""Per-client aggregation weights.

``WeightEstimator`` holds, for every client, the three scalars the online
interval estimator needs: the number of finished intervals ``M``, the length
of the interval still open, and the current weight. Each round it sees only
the previous round's participation bits, so the weight used in round ``t``
never depends on round ``t`` itself.

An interval closes when the client participated in the previous round or
when the open interval reaches the cutoff ``K``. The weight is the running
mean of all closed interval lengths, which estimates ``1/p_n`` (biased down by
``(1 - p_n)^K / p_n`` for finite ``K``).
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ConfigError

FEDAU_FINITE = "fedau_finite_K"
FEDAU_INFINITE = "fedau_infinite_K"
FEDAU_EMA = "fedau_ema"
CONSTANT_ONE = "constant_one"
KNOWN_PROB = "known_prob"

STRATEGIES = (FEDAU_FINITE, FEDAU_INFINITE, FEDAU_EMA, CONSTANT_ONE, KNOWN_PROB)
ADAPTIVE = (FEDAU_FINITE, FEDAU_INFINITE, FEDAU_EMA)
DEFAULT_BETA = 0.05

# Stand-in for an unreachable cutoff; the open interval can never grow this long.
_NO_CUTOFF = np.iinfo(np.int64).max


def theoretical_K_schedule(T: int) -> int:
    """Cutoff ``round(T ** (1/9))``, at least 1."""
    if T < 1:
        raise ConfigError("T must be at least 1", "T")
    return max(1, round(T ** (1.0 / 9.0)))


class WeightEstimator:
    def __init__(
        self,
        strategy: str,
        N: int,
        K: int | None = None,
        beta: float = DEFAULT_BETA,
        p=None,
    ) -> None:
        if strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {strategy!r}; valid: {', '.join(STRATEGIES)}", "strategy")
        if N < 1:
            raise ConfigError("must be at least 1", "N")
        self.strategy = strategy
        self.N = int(N)
        self.beta = float(beta)
        self.t = 0
        if strategy in (FEDAU_FINITE, FEDAU_EMA):
            if K is None or int(K) < 1:
                raise ConfigError(f"{strategy} needs a positive integer K", "K")
            self.K = int(K)
        elif strategy == FEDAU_INFINITE:
            self.K = None
        else:
            self.K = None if K is None else int(K)
        if strategy == FEDAU_EMA and not 0 < self.beta <= 1:
            raise ConfigError("must lie in (0, 1]", "beta")

        self.M = np.zeros(self.N, dtype=np.int64)
        self.S_open = np.zeros(self.N, dtype=np.int64)
        if strategy == KNOWN_PROB:
            if p is None:
                raise ConfigError("known_prob needs the true participation probabilities", "p")
            p = np.asarray(p, dtype=np.float64)
            if p.shape != (self.N,) or np.any(p <= 0) or np.any(p > 1):
                raise ConfigError("p must have N entries in (0, 1]", "p")
            self.p = p
            self.omega = 1.0 / p
        else:
            self.p = None if p is None else np.asarray(p, dtype=np.float64)
            self.omega = np.ones(self.N)

    @property
    def adaptive(self) -> bool:
        return self.strategy in ADAPTIVE

    @property
    def weights(self) -> np.ndarray:
        """Weights for the current round (a copy)."""
        return self.omega.copy()

    def advance(self, indicators) -> np.ndarray:
        """Consume round ``t-1`` participation bits and return round ``t`` weights."""
        ind = np.asarray(indicators)
        if ind.shape != (self.N,):
            raise ValueError(f"expected {self.N} indicators, got shape {ind.shape}")
        self.t += 1
        if not self.adaptive:
            return self.omega.copy()
        ind = ind.astype(bool)
        cutoff = _NO_CUTOFF if self.K is None else self.K
        self.S_open += 1
        done = ind | (self.S_open >= cutoff)
        if done.any():
            s = self.S_open[done].astype(np.float64)
            m = self.M[done]
            prev = self.omega[done]
            if self.strategy == FEDAU_EMA:
                running = (1.0 - self.beta) * prev + self.beta * s
            else:
                running = (m * prev + s) / (m + 1)
            self.omega[done] = np.where(m == 0, s, running)
            self.M[done] += 1
            self.S_open[done] = 0
        return self.omega.copy()

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "N": self.N,
            "K": self.K,
            "beta": self.beta,
            "t": self.t,
            "M": self.M.tolist(),
            "S_open": self.S_open.tolist(),
            "omega": self.omega.tolist(),
            "p": None if self.p is None else self.p.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "WeightEstimator":
        est = cls(doc["strategy"], doc["N"], K=doc["K"], beta=doc["beta"], p=doc.get("p"))
        est.t = int(doc["t"])
        est.M = np.asarray(doc["M"], dtype=np.int64)
        est.S_open = np.asarray(doc["S_open"], dtype=np.int64)
        est.omega = np.asarray(doc["omega"], dtype=np.float64)
        return est


def new_estimator(strategy: str, N: int, K: int | None = None, beta: float = DEFAULT_BETA, p=None) -> WeightEstimator:
    return WeightEstimator(strategy, N, K=K, beta=beta, p=p)


def parse_K(value, T: int) -> int | None:
    """Interpret a configured cutoff: an integer, ``"theory"`` or ``"inf"``."""
    if value is None:
        return None
    if isinstance(value, str):
        v = value.strip().lower()
        if v in ("inf", "infinity", "none"):
            return None
        if v == "theory":
            return theoretical_K_schedule(max(T, 1))
        raise ConfigError(f"expected an integer, 'theory' or 'inf', got {value!r}", "algorithm.K")
    if isinstance(value, float) and math.isinf(value):
        return None
    if isinstance(value, bool) or int(value) != value or int(value) < 1:
        raise ConfigError(f"must be a positive integer, got {value!r}", "algorithm.K")
    return int(value)
