"""RBF-kernel Gaussian process and expected improvement.

The GP is the only reward signal the tree search sees. It is fit once per
episode on the few-shot offline set, with standardized targets, a
median-heuristic lengthscale and a fixed jitter (escalated only when the
Cholesky factorization fails).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.special import erfcx

from mdts.core import Design, OfflineDataset, Vocabulary
from mdts.errors import FitError, NumericalError

JITTER = 1e-6
MAX_JITTER = 1e-2
SIGMA_FLOOR = 1e-12
_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def norm_pdf(z: float) -> float:
    return _INV_SQRT_2PI * math.exp(-0.5 * z * z)


def norm_cdf(z: float) -> float:
    return 0.5 * math.erfc(-z / _SQRT2)


def rbf_kernel(a, b, lengthscale: float, signal_variance: float = 1.0) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    d2 = float(np.sum((a - b) ** 2))
    return signal_variance * math.exp(-d2 / (2.0 * lengthscale**2))


def _sq_dists(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    d2 = (A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2.0 * A @ B.T
    return np.maximum(d2, 0.0)


def rbf_gram(A: np.ndarray, B: np.ndarray, lengthscale: float, signal_variance: float = 1.0) -> np.ndarray:
    return signal_variance * np.exp(-_sq_dists(A, B) / (2.0 * lengthscale**2))


def one_hot(tokens: Sequence[int], size: int) -> np.ndarray:
    out = np.zeros((len(tokens), size))
    out[np.arange(len(tokens)), np.asarray(tokens)] = 1.0
    return out.ravel()


@dataclass(frozen=True)
class Featurizer:
    """Maps designs to GP inputs.

    Discrete designs become per-position one-hot blocks; numeric designs are
    standardized per dimension with the offline mean and std.
    """

    vocabulary: Vocabulary
    mean: np.ndarray | None = None
    std: np.ndarray | None = None

    @classmethod
    def for_dataset(cls, dataset: OfflineDataset, vocabulary: Vocabulary) -> "Featurizer":
        if not vocabulary.is_numeric:
            return cls(vocabulary)
        X = np.array([d.decoded for d in dataset.designs], dtype=float)
        std = X.std(axis=0)
        std[std == 0] = 1.0
        return cls(vocabulary, X.mean(axis=0), std)

    def __call__(self, design: Design) -> np.ndarray:
        if self.vocabulary.is_numeric:
            return (np.asarray(design.decoded, dtype=float) - self.mean) / self.std
        return one_hot(design.tokens, self.vocabulary.size)

    def many(self, designs: Sequence[Design]) -> np.ndarray:
        return np.stack([self(d) for d in designs])


def median_lengthscale(X: np.ndarray) -> float:
    if len(X) < 2:
        return 1.0
    iu = np.triu_indices(len(X), k=1)
    d = np.sqrt(_sq_dists(X, X)[iu])
    d = d[d > 0]
    return float(np.median(d)) if d.size else 1.0


@dataclass(frozen=True)
class GPModel:
    train_features: np.ndarray
    train_targets_standardized: np.ndarray
    y_mean: float
    y_std: float
    lengthscale: float
    signal_variance: float
    jitter: float
    chol: np.ndarray
    alpha: np.ndarray
    featurizer: Featurizer | None = None

    def featurize(self, design: Design) -> np.ndarray:
        return self.featurizer(design)


def fit_features(X: np.ndarray, y: Sequence[float], featurizer: Featurizer | None = None,
                 lengthscale: float | None = None, jitter: float = JITTER) -> GPModel:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float)
    if len(X) < 1 or len(X) != len(y):
        raise FitError("need at least one (design, score) pair with matching lengths")
    y_mean = float(y.mean())
    y_std = float(y.std())
    if not y_std > 0:
        y_std = 1.0
    ys = (y - y_mean) / y_std
    ell = median_lengthscale(X) if lengthscale is None else float(lengthscale)
    K = rbf_gram(X, X, ell)
    while True:
        try:
            L = np.linalg.cholesky(K + jitter * np.eye(len(X)))
            break
        except np.linalg.LinAlgError:
            jitter *= 10.0
            if jitter > MAX_JITTER * (1 + 1e-9):
                raise FitError("Cholesky factorization failed even with jitter 1e-2") from None
    alpha = cho_solve((L, True), ys)
    return GPModel(X, ys, y_mean, y_std, ell, 1.0, jitter, L, alpha, featurizer)


def fit(dataset: OfflineDataset, vocabulary: Vocabulary) -> GPModel:
    featurizer = Featurizer.for_dataset(dataset, vocabulary)
    return fit_features(featurizer.many(dataset.designs), dataset.scores, featurizer)


def predict_many(model: GPModel, Xq: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    Xq = np.atleast_2d(np.asarray(Xq, dtype=float))
    Ks = rbf_gram(Xq, model.train_features, model.lengthscale, model.signal_variance)
    mu = Ks @ model.alpha
    v = solve_triangular(model.chol, Ks.T, lower=True)
    var = model.signal_variance - (v * v).sum(axis=0)
    if np.any(var < -1e-10):
        raise NumericalError(f"negative predictive variance {var.min():.3e}")
    var = np.maximum(var, 0.0)
    return mu * model.y_std + model.y_mean, np.sqrt(var) * model.y_std


def predict(model: GPModel, x) -> tuple[float, float]:
    mu, sigma = predict_many(model, np.asarray(x, dtype=float)[None, :])
    return float(mu[0]), float(sigma[0])


def ei_from_moments(mu: float, sigma: float, f_best: float) -> float:
    improvement = mu - f_best
    if sigma < SIGMA_FLOOR:
        return max(improvement, 0.0)
    z = improvement / sigma
    if z >= -1.0:
        return max(improvement * norm_cdf(z) + sigma * norm_pdf(z), 0.0)
    # z*Phi(z) + phi(z) cancels badly in the lower tail; rewrite with the scaled erfc
    a = -z
    mills = math.sqrt(math.pi / 2.0) * float(erfcx(a / _SQRT2))
    return max(sigma * norm_pdf(z) * (1.0 - a * mills), 0.0)


def expected_improvement(model: GPModel, x, f_best: float) -> float:
    mu, sigma = predict(model, x)
    return ei_from_moments(mu, sigma, f_best)


def design_ei(model: GPModel, designs: Sequence[Design], f_best: float) -> list[float]:
    if not designs:
        return []
    mu, sigma = predict_many(model, model.featurizer.many(designs))
    return [ei_from_moments(float(m), float(s), f_best) for m, s in zip(mu, sigma)]
