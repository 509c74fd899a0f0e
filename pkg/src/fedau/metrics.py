"""Analytical quantities, trace diagnostics and the metrics CSV.

The cutoff geometric distribution describes one participation interval of a
Bernoulli(p) client when intervals are truncated at ``K``:
``P(S = k) = p (1-p)^(k-1)`` for ``k < K`` and ``(1-p)^(K-1)`` for ``k = K``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

UNDERFLOW = 1e-300

CSV_COLUMNS = ("t", "grad_norm_f", "dist_f", "dist_h", "weight_error_cum", "q_diag", "step_norm", "loss_f")


def _check_pk(p: float, K: int) -> None:
    if not 0 < p <= 1:
        raise ValueError(f"p must lie in (0, 1], got {p}")
    if K < 1 or int(K) != K:
        raise ValueError(f"K must be a positive integer, got {K}")


def survival_power(p: float, exponent: float) -> tuple[float, bool]:
    """``(1 - p) ** exponent`` evaluated in log space.

    Returns the value and whether it was flushed to zero for being below
    1e-300.
    """
    if exponent == 0:
        return 1.0, False
    if p >= 1.0:
        return 0.0, False
    log_value = exponent * math.log1p(-p)
    if log_value < math.log(UNDERFLOW):
        return 0.0, True
    return math.exp(log_value), False


def cutoff_geometric_pmf(p: float, K: int, k: int) -> float:
    _check_pk(p, K)
    if not 1 <= k <= K:
        raise ValueError(f"k must lie in [1, {K}], got {k}")
    tail, _ = survival_power(p, k - 1)
    return tail if k == K else p * tail


def cutoff_geometric_moments(p: float, K: int) -> tuple[float, float]:
    """Mean and variance of the cutoff interval length."""
    _check_pk(p, K)
    if K == 1 or p == 1.0:
        # Degenerate: every interval has length 1. The general formula only
        # gets there up to rounding.
        return 1.0, 0.0
    qk, _ = survival_power(p, K)
    q2k, _ = survival_power(p, 2 * K)
    mean = 1.0 / p - qk / p
    var = (1.0 - p) / p**2 - (2 * K - 1) * qk / p - q2k / p**2
    # Cancellation can leave a tiny negative residue when the variance is 0.
    return mean, max(var, 0.0)


def cutoff_geometric_fourth_central(p: float, K: int) -> float:
    """Fourth central moment by enumerating the pmf (used for z-scores)."""
    mean, _ = cutoff_geometric_moments(p, K)
    k = np.arange(1, K + 1, dtype=np.float64)
    pmf = np.array([cutoff_geometric_pmf(p, K, int(j)) for j in k]) if K <= 10_000 else None
    if pmf is None:
        raise ValueError("K too large for enumeration")
    return float(np.sum(pmf * (k - mean) ** 4))


def simulate_intervals(p: float, K: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """Monte Carlo interval lengths: first success of Bernoulli(p) trials, capped at K."""
    _check_pk(p, K)
    if p == 1.0:
        return np.ones(size, dtype=np.int64)
    return np.minimum(rng.geometric(p, size=size), K)


def weight_error_term(weights, p) -> float:
    """``(1/(N T)) * sum_t sum_n (p_n w_t^n - 1)^2`` over a ``T x N`` weight array."""
    w = np.asarray(weights, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    if w.ndim != 2 or w.shape[1] != p.size:
        raise ValueError("weights must be a T x N array matching p")
    if w.shape[0] == 0 or not np.all(np.isfinite(w)):
        raise ValueError("weights missing for some rounds")
    return float(np.mean((w * p - 1.0) ** 2))


def q_diagnostic(weights, p) -> float:
    """``max_t (1/N) sum_n p_n (w_t^n)^2``."""
    w = np.asarray(weights, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    if w.ndim != 2 or w.shape[1] != p.size or w.shape[0] == 0:
        raise ValueError("weights must be a non-empty T x N array matching p")
    return float(np.max(np.mean(p * w**2, axis=1)))


@dataclass
class MetricSeries:
    name: str
    rounds: list[int] = field(default_factory=list)
    values: list[float] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def append(self, t: int, value: float) -> None:
        if self.rounds and t <= self.rounds[-1]:
            raise ValueError(f"{self.name}: rounds must be strictly increasing")
        if not math.isfinite(value):
            raise ValueError(f"{self.name}: non-finite value at round {t}")
        self.rounds.append(t)
        self.values.append(float(value))


class Targets:
    """Minimizers of f and of the reweighted objective h, computed once per run.

    ``h`` weights client n by ``alpha_n * p_n``; with ``alpha_n = 1/p_n`` it
    coincides with f.
    """

    def __init__(self, objective, p, alpha=None) -> None:
        p = np.asarray(p, dtype=np.float64)
        alpha = np.ones_like(p) if alpha is None else np.broadcast_to(np.asarray(alpha, dtype=np.float64), p.shape)
        if np.any(alpha <= 0):
            raise ConfigError("alpha must be positive", "metrics.h_alpha")
        self.objective = objective
        self.x_f = objective.minimizer()
        self.x_h = objective.weighted_minimizer(alpha * p)
        self.numerical = objective.minimizer_numerical


def optimality_gaps(x, targets: Targets) -> dict[str, float]:
    """``||grad f(x)||^2``, ``||x - argmin f||``, ``||x - argmin h||`` and ``f(x)``."""
    obj = targets.objective
    g = obj.global_grad(x)
    return {
        "grad_norm_f": float(g @ g),
        "dist_f": float(np.linalg.norm(x - targets.x_f)),
        "dist_h": float(np.linalg.norm(x - targets.x_h)),
        "loss_f": obj.global_loss(x),
    }


class MetricRecorder:
    """Accumulates per-round diagnostics and emits rows on a fixed cadence.

    Row ``t`` describes ``x_t`` (the model at the start of round ``t``).
    ``weight_error_cum`` and ``q_diag`` at row ``t >= 1`` cover rounds
    ``0..t-1``; row 0 covers the round-0 weights alone.
    """

    def __init__(self, p, targets: Targets | None, cadence: int = 10) -> None:
        if cadence < 1:
            raise ConfigError("must be at least 1", "cadence")
        self.p = np.asarray(p, dtype=np.float64)
        self.targets = targets
        self.cadence = int(cadence)
        self.err_sum = 0.0
        self.q_max = -math.inf
        self.rounds_seen = 0
        self.rows: list[dict] = []

    def observe_weights(self, weights) -> None:
        w = np.asarray(weights, dtype=np.float64)
        self.err_sum += float(np.sum((self.p * w - 1.0) ** 2))
        self.q_max = max(self.q_max, float(np.mean(self.p * w**2)))
        self.rounds_seen += 1

    def weight_error(self) -> float:
        return self.err_sum / (self.p.size * max(self.rounds_seen, 1))

    def due(self, t: int, final: bool = False) -> bool:
        return t % self.cadence == 0 or final

    def row(self, t: int, x, step_norm: float) -> dict:
        row = {"t": t}
        if self.targets is not None:
            row.update(optimality_gaps(x, self.targets))
        else:
            row.update(grad_norm_f=math.nan, dist_f=math.nan, dist_h=math.nan, loss_f=math.nan)
        row["weight_error_cum"] = self.weight_error()
        row["q_diag"] = self.q_max
        row["step_norm"] = float(step_norm)
        self.rows.append(row)
        return row

    def state(self) -> dict:
        return {
            "err_sum": self.err_sum,
            "q_max": self.q_max,
            "rounds_seen": self.rounds_seen,
            "rows": [dict(r) for r in self.rows],
        }

    def restore(self, doc: dict) -> None:
        self.err_sum = float(doc["err_sum"])
        self.q_max = float(doc["q_max"])
        self.rounds_seen = int(doc["rounds_seen"])
        self.rows = [dict(r) for r in doc.get("rows", [])]


def series_from_rows(rows: list[dict]) -> dict[str, MetricSeries]:
    out = {}
    for name in CSV_COLUMNS[1:]:
        s = MetricSeries(name)
        for r in rows:
            if name in r and math.isfinite(r[name]):
                s.append(r["t"], r[name])
        out[name] = s
    return out


def format_float(value) -> str:
    """Shortest decimal string that round-trips to the same double."""
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def rows_to_csv(rows: list[dict], header_comments: list[str] | None = None) -> str:
    buf = io.StringIO()
    for line in header_comments or []:
        buf.write(f"# {line}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in rows:
        writer.writerow([format_float(r[c]) for c in CSV_COLUMNS])
    return buf.getvalue()


def read_csv(text: str) -> list[dict]:
    lines = [ln for ln in text.splitlines() if not ln.startswith("#")]
    reader = csv.DictReader(lines)
    rows = []
    for rec in reader:
        rows.append({k: (int(v) if k == "t" else float(v)) for k, v in rec.items()})
    return rows
