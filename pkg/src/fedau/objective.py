"""Local client objectives and exact convergence targets.

Three families are provided. The two quadratic families have closed-form
minimizers for any nonnegative weighting of the clients, which is what makes
the bias of mis-weighted averaging measurable exactly. The logistic family is
a qualitative workload whose optima come from a numerical oracle.

All objectives are immutable after construction and safe to share between
threads; randomness enters only through a caller-supplied generator.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ConfigError, OracleError

ORACLE_TOL = 1e-8
ORACLE_MAX_ITER = 10**6


def _as_weights(weights, n_clients: int) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (n_clients,):
        raise ConfigError(f"expected {n_clients} weights, got shape {w.shape}", "weights")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ConfigError("weights must be finite and nonnegative", "weights")
    if w.sum() <= 0:
        raise ConfigError("weights must have a positive sum", "weights")
    return w


class Objective:
    """Common surface of the objective families.

    Subclasses define ``grad``, ``loss``, ``weighted_minimizer`` and
    ``gradient_divergence``. The global objective is the plain average of
    the client objectives.
    """

    kind: str = ""
    noise_sigma: float = 0.0
    # True when gradient_divergence() is exact rather than a probe supremum.
    divergence_exact: bool = True
    # True when weighted_minimizer() comes from an iterative solver.
    minimizer_numerical: bool = False

    @property
    def num_clients(self) -> int:
        raise NotImplementedError

    @property
    def dim(self) -> int:
        raise NotImplementedError

    @property
    def stochastic(self) -> bool:
        """Whether stochastic_grad consumes random draws."""
        return self.noise_sigma > 0.0

    def _check_x(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.dim,):
            raise ConfigError(f"expected a vector of length {self.dim}, got shape {x.shape}", "x")
        return x

    def _check_client(self, n: int) -> None:
        if not 0 <= n < self.num_clients:
            raise IndexError(f"client {n} out of range [0, {self.num_clients})")

    def grad(self, n: int, x) -> np.ndarray:
        raise NotImplementedError

    def loss(self, n: int, x) -> float:
        raise NotImplementedError

    def stochastic_grad(self, n: int, x, rng: np.random.Generator | None) -> np.ndarray:
        """Exact gradient plus isotropic Gaussian noise of total power sigma^2."""
        g = self.grad(n, x)
        if self.noise_sigma == 0.0:
            return g
        scale = self.noise_sigma / math.sqrt(self.dim)
        return g + scale * rng.standard_normal(self.dim)

    def global_loss(self, x) -> float:
        return math.fsum(self.loss(n, x) for n in range(self.num_clients)) / self.num_clients

    def global_grad(self, x) -> np.ndarray:
        total = np.zeros(self.dim)
        for n in range(self.num_clients):
            total += self.grad(n, x)
        return total / self.num_clients

    def weighted_grad(self, weights, x) -> np.ndarray:
        w = _as_weights(weights, self.num_clients)
        total = np.zeros(self.dim)
        for n in range(self.num_clients):
            if w[n] != 0.0:
                total += w[n] * self.grad(n, x)
        return total

    def minimizer(self) -> np.ndarray:
        """Minimizer of the global (uniformly weighted) objective."""
        return self.weighted_minimizer(np.ones(self.num_clients))

    def weighted_minimizer(self, weights) -> np.ndarray:
        raise NotImplementedError

    def gradient_divergence(self) -> float:
        raise NotImplementedError

    def smoothness(self) -> float:
        raise NotImplementedError

    def _probe_divergence(self, probes: np.ndarray) -> float:
        worst = 0.0
        for x in probes:
            g = self.global_grad(x)
            for n in range(self.num_clients):
                worst = max(worst, float(np.linalg.norm(self.grad(n, x) - g)))
        return worst

    def _probe_points(self, count: int = 16, radius: float = 1.0, seed: int = 0) -> np.ndarray:
        center = self.minimizer()
        rng = np.random.default_rng(seed)
        offsets = rng.standard_normal((count, self.dim)) * radius
        return np.vstack([center, center + offsets])


class QuadraticIsotropic(Objective):
    """F_n(x) = 0.5 * ||x - c_n||^2."""

    kind = "quadratic_isotropic"

    def __init__(self, centers, noise_sigma: float = 0.0) -> None:
        c = np.array(centers, dtype=np.float64)
        if c.ndim != 2 or c.shape[0] < 1 or c.shape[1] < 1:
            raise ConfigError("centers must be a non-empty N x d array", "centers")
        if not np.all(np.isfinite(c)):
            raise ConfigError("centers must be finite", "centers")
        if noise_sigma < 0:
            raise ConfigError("must be nonnegative", "noise_sigma")
        c.setflags(write=False)
        self.centers = c
        self.noise_sigma = float(noise_sigma)

    @property
    def num_clients(self) -> int:
        return self.centers.shape[0]

    @property
    def dim(self) -> int:
        return self.centers.shape[1]

    def grad(self, n, x):
        self._check_client(n)
        return self._check_x(x) - self.centers[n]

    def loss(self, n, x):
        self._check_client(n)
        r = self._check_x(x) - self.centers[n]
        return 0.5 * float(r @ r)

    def weighted_minimizer(self, weights):
        w = _as_weights(weights, self.num_clients)
        return (w @ self.centers) / w.sum()

    def gradient_divergence(self):
        mean = self.centers.mean(axis=0)
        return float(np.max(np.linalg.norm(self.centers - mean, axis=1)))

    def smoothness(self):
        return 1.0


class QuadraticGeneral(Objective):
    """F_n(x) = 0.5 * (x - c_n)^T H_n (x - c_n) with H_n symmetric positive definite."""

    kind = "quadratic_general"
    MIN_EIGENVALUE = 1e-6

    def __init__(self, hessians, centers, noise_sigma: float = 0.0) -> None:
        h = np.array(hessians, dtype=np.float64)
        c = np.array(centers, dtype=np.float64)
        if c.ndim != 2 or c.shape[0] < 1:
            raise ConfigError("centers must be a non-empty N x d array", "centers")
        n, d = c.shape
        if h.shape != (n, d, d):
            raise ConfigError(f"expected shape {(n, d, d)}, got {h.shape}", "hessians")
        if not (np.all(np.isfinite(h)) and np.all(np.isfinite(c))):
            raise ConfigError("hessians and centers must be finite", "hessians")
        for k in range(n):
            if not np.allclose(h[k], h[k].T, rtol=0.0, atol=1e-12):
                raise ConfigError(f"H_{k} is not symmetric", "hessians")
            if np.linalg.eigvalsh(h[k]).min() < self.MIN_EIGENVALUE:
                raise ConfigError(
                    f"H_{k} has an eigenvalue below {self.MIN_EIGENVALUE}", "hessians"
                )
        if noise_sigma < 0:
            raise ConfigError("must be nonnegative", "noise_sigma")
        h.setflags(write=False)
        c.setflags(write=False)
        self.hessians = h
        self.centers = c
        self.noise_sigma = float(noise_sigma)
        same = all(np.array_equal(h[0], h[k]) for k in range(n))
        self.divergence_exact = same

    @property
    def num_clients(self):
        return self.centers.shape[0]

    @property
    def dim(self):
        return self.centers.shape[1]

    def grad(self, n, x):
        self._check_client(n)
        return self.hessians[n] @ (self._check_x(x) - self.centers[n])

    def loss(self, n, x):
        self._check_client(n)
        r = self._check_x(x) - self.centers[n]
        return 0.5 * float(r @ self.hessians[n] @ r)

    def weighted_minimizer(self, weights):
        w = _as_weights(weights, self.num_clients)
        h = np.einsum("n,nij->ij", w, self.hessians)
        b = np.einsum("n,nij,nj->i", w, self.hessians, self.centers)
        return np.linalg.solve(h, b)

    def gradient_divergence(self):
        if self.divergence_exact:
            # Shared H: grad F_n - grad f = H (mean(c) - c_n), independent of x.
            hc = self.centers @ self.hessians[0].T
            return float(np.max(np.linalg.norm(hc - hc.mean(axis=0), axis=1)))
        return self._probe_divergence(self._probe_points())

    def smoothness(self):
        return float(max(np.linalg.eigvalsh(hk).max() for hk in self.hessians))


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


class LogisticSynthetic(Objective):
    """Multinomial logistic regression over per-client labeled datasets.

    Parameters are the flattened ``C x (D + 1)`` weight matrix (bias last).
    Each F_n is the mean cross-entropy over client n's samples plus
    ``0.5 * l2 * ||x||^2``. Stochastic gradients use minibatches drawn with
    replacement, so they are unbiased; additive noise is not used.
    """

    kind = "logistic"
    divergence_exact = False
    minimizer_numerical = True
    stochastic = True

    def __init__(self, features, labels, num_classes: int, batch_size: int = 32, l2: float = 1e-3) -> None:
        if len(features) != len(labels) or len(features) < 1:
            raise ConfigError("need one feature matrix and label vector per client", "features")
        if num_classes < 2:
            raise ConfigError("need at least two classes", "classes")
        if batch_size < 1:
            raise ConfigError("must be positive", "batch_size")
        if l2 < 0:
            raise ConfigError("must be nonnegative", "l2")
        self.num_classes = int(num_classes)
        self.batch_size = int(batch_size)
        self.l2 = float(l2)
        self._a: list[np.ndarray] = []
        self._y: list[np.ndarray] = []
        width = None
        for k, (xk, yk) in enumerate(zip(features, labels)):
            xk = np.asarray(xk, dtype=np.float64)
            yk = np.asarray(yk, dtype=np.int64)
            if xk.ndim != 2 or xk.shape[0] < 1 or xk.shape[0] != yk.shape[0]:
                raise ConfigError(f"client {k} needs at least one sample", "features")
            if np.any(yk < 0) or np.any(yk >= num_classes):
                raise ConfigError(f"client {k} has labels outside [0, {num_classes})", "labels")
            if width is None:
                width = xk.shape[1]
            elif xk.shape[1] != width:
                raise ConfigError("all clients must share the feature dimension", "features")
            a = np.hstack([xk, np.ones((xk.shape[0], 1))])
            a.setflags(write=False)
            yk.setflags(write=False)
            self._a.append(a)
            self._y.append(yk)
        self.feature_dim = int(width)
        self._minimizer_cache: dict[bytes, np.ndarray] = {}

    @property
    def num_clients(self):
        return len(self._a)

    @property
    def dim(self):
        return self.num_classes * (self.feature_dim + 1)

    def samples(self, n: int) -> tuple[np.ndarray, np.ndarray]:
        return self._a[n][:, :-1], self._y[n]

    def _matrix(self, x) -> np.ndarray:
        return self._check_x(x).reshape(self.num_classes, self.feature_dim + 1)

    def _batch_grad(self, w: np.ndarray, a: np.ndarray, y: np.ndarray) -> np.ndarray:
        probs = _softmax(a @ w.T)
        probs[np.arange(len(y)), y] -= 1.0
        g = probs.T @ a / len(y)
        return (g + self.l2 * w).ravel()

    def grad(self, n, x):
        self._check_client(n)
        return self._batch_grad(self._matrix(x), self._a[n], self._y[n])

    def stochastic_grad(self, n, x, rng):
        self._check_client(n)
        idx = rng.integers(0, len(self._y[n]), size=self.batch_size)
        return self._batch_grad(self._matrix(x), self._a[n][idx], self._y[n][idx])

    def loss(self, n, x):
        self._check_client(n)
        w = self._matrix(x)
        logits = self._a[n] @ w.T
        top = logits.max(axis=1)
        lse = top + np.log(np.exp(logits - top[:, None]).sum(axis=1))
        ce = float(np.mean(lse - logits[np.arange(len(self._y[n])), self._y[n]]))
        return ce + 0.5 * self.l2 * float(w.ravel() @ w.ravel())

    def measured_noise(self, n: int, x, draws: int, rng: np.random.Generator) -> float:
        """Root mean squared minibatch gradient error at ``x`` for client n."""
        g = self.grad(n, x)
        err = [self.stochastic_grad(n, x, rng) - g for _ in range(draws)]
        return math.sqrt(float(np.mean([e @ e for e in err])))

    def _weighted_hessian(self, w: np.ndarray, x: np.ndarray) -> np.ndarray:
        c, d1 = self.num_classes, self.feature_dim + 1
        mat = self._matrix(x)
        h = np.zeros((c * d1, c * d1))
        for n in range(self.num_clients):
            if w[n] == 0.0:
                continue
            a = self._a[n]
            s = w[n] / len(self._y[n])
            probs = _softmax(a @ mat.T)
            for k in range(c):
                block = (a * (s * probs[:, k])[:, None]).T @ a
                h[k * d1:(k + 1) * d1, k * d1:(k + 1) * d1] += block
            outer = (probs[:, :, None] * a[:, None, :]).reshape(len(a), c * d1)
            h -= s * (outer.T @ outer)
        h += self.l2 * w.sum() * np.eye(c * d1)
        return h

    def _weighted_loss(self, w: np.ndarray, x: np.ndarray) -> float:
        return math.fsum(w[n] * self.loss(n, x) for n in range(self.num_clients) if w[n] != 0.0)

    def weighted_minimizer(self, weights):
        """Damped Newton iterations on the normalized weighted loss.

        Stops once the gradient norm of ``sum_n w_n F_n / sum_n w_n`` is at
        most 1e-8. The result is cached per weight vector.
        """
        w = _as_weights(weights, self.num_clients)
        w = w / w.sum()
        cache_key = w.tobytes()
        if cache_key in self._minimizer_cache:
            return self._minimizer_cache[cache_key].copy()
        x = np.zeros(self.dim)
        value = self._weighted_loss(w, x)
        for _ in range(ORACLE_MAX_ITER):
            g = self.weighted_grad(w, x)
            if np.linalg.norm(g) <= ORACLE_TOL:
                break
            step = np.linalg.lstsq(self._weighted_hessian(w, x), g, rcond=None)[0]
            slope = float(g @ step)
            t = 1.0
            while True:
                candidate = x - t * step
                new_value = self._weighted_loss(w, candidate)
                if new_value <= value - 1e-4 * t * slope or t < 1e-12:
                    break
                t *= 0.5
            if t < 1e-12:
                # Line search exhausted: accept a plain gradient step.
                candidate = x - g / max(self.smoothness(), 1e-12)
                new_value = self._weighted_loss(w, candidate)
            x, value = candidate, new_value
        else:
            raise OracleError(
                f"logistic oracle did not reach gradient norm {ORACLE_TOL} "
                f"in {ORACLE_MAX_ITER} iterations"
            )
        self._minimizer_cache[cache_key] = x.copy()
        return x

    def gradient_divergence(self):
        return self._probe_divergence(self._probe_points(count=8))

    def smoothness(self):
        radius = max(float(np.max(np.einsum("ij,ij->i", a, a))) for a in self._a)
        return 0.5 * radius + self.l2


def make_logistic(
    kappa: np.ndarray,
    samples_per_client: int,
    feature_dim: int,
    rng: np.random.Generator,
    separation: float = 2.0,
    batch_size: int = 32,
    l2: float = 1e-3,
) -> LogisticSynthetic:
    """Draw a synthetic classification dataset whose label mix follows ``kappa``.

    Class-conditional features are unit-covariance Gaussians. When
    ``feature_dim >= C`` the class means are mutually orthogonal and every pair
    sits exactly ``separation`` apart; otherwise they are random directions of
    norm ``separation / sqrt(2)``.
    """
    kappa = np.asarray(kappa, dtype=np.float64)
    n_clients, n_classes = kappa.shape
    if samples_per_client < 1:
        raise ConfigError("must be at least 1", "samples_per_client")
    if feature_dim < 1:
        raise ConfigError("must be at least 1", "features")
    raw = rng.standard_normal((max(feature_dim, n_classes), n_classes))
    if feature_dim >= n_classes:
        basis, _ = np.linalg.qr(raw[:feature_dim])
        means = basis.T[:n_classes]
    else:
        dirs = raw[:feature_dim].T
        means = dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    means = means * (separation / math.sqrt(2.0))
    features, labels = [], []
    for n in range(n_clients):
        y = rng.choice(n_classes, size=samples_per_client, p=kappa[n] / kappa[n].sum())
        x = means[y] + rng.standard_normal((samples_per_client, feature_dim))
        features.append(x)
        labels.append(y)
    return LogisticSynthetic(features, labels, n_classes, batch_size=batch_size, l2=l2)
