"""One-class SVM with an RBF kernel, trained on clean vectors only.

Dual problem for ``l`` training vectors::

    minimize   1/2 * sum_ij a_i a_j K(x_i, x_j)
    subject to 0 <= a_i <= 1/(nu*l),  sum_i a_i = 1

solved by two-variable working-set descent: each step moves weight from the
most over-served index (largest gradient among a_i > 0) to the most
under-served one (smallest gradient among a_i < upper bound) until the gap
between them drops below ``kkt_tolerance``.

The decision function is ``sum_i a_i K(s_i, x) - rho``; positive is normal.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

log = logging.getLogger(__name__)

SV_THRESHOLD = 1e-12


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, diagnostics: Mapping):
        super().__init__(message)
        self.diagnostics = dict(diagnostics)


def rbf_kernel(x: Sequence[float], y: Sequence[float], gamma: float) -> float:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape:
        raise ValueError(f"dimension mismatch: {x.shape} vs {y.shape}")
    d = x - y
    return float(np.exp(-gamma * np.dot(d, d)))


def rbf_matrix(A: np.ndarray, B: np.ndarray, gamma: float) -> np.ndarray:
    """K[i, j] = exp(-gamma * |A_i - B_j|^2)."""
    sq = (A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2.0 * A @ B.T
    np.maximum(sq, 0.0, out=sq)
    return np.exp(-gamma * sq)


@dataclass(frozen=True)
class TrainConfig:
    nu: float = 0.05
    gamma: float | None = None  # None means 1/d
    kkt_tolerance: float = 1e-4
    max_passes: int | None = None  # None means 10*l
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.nu <= 1.0:
            raise ValueError(f"nu must lie in (0, 1], got {self.nu}")
        if self.gamma is not None and not self.gamma > 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")
        if not self.kkt_tolerance > 0:
            raise ValueError("kkt_tolerance must be positive")

    def resolved_gamma(self, dim: int) -> float:
        return self.gamma if self.gamma is not None else 1.0 / dim


@dataclass(frozen=True, eq=False)
class OcSvmModel:
    support_vectors: np.ndarray
    alphas: np.ndarray
    rho: float
    gamma: float
    nu: float
    dim: int
    # free-form feature description (event set, window size), persisted as-is
    meta: Mapping = field(default_factory=dict, compare=False)
    # training-time bookkeeping, not persisted
    info: Mapping = field(default_factory=dict, compare=False, repr=False)

    def __eq__(self, other) -> bool:
        if not isinstance(other, OcSvmModel):
            return NotImplemented
        return (np.array_equal(self.support_vectors, other.support_vectors)
                and np.array_equal(self.alphas, other.alphas)
                and (self.rho, self.gamma, self.nu, self.dim) == (other.rho, other.gamma, other.nu, other.dim))

    __hash__ = None

    def decision(self, X) -> np.ndarray:
        """Decision values for a batch (n, d); see :func:`decision` for one vector."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.dim:
            raise ValueError(f"expected {self.dim}-dimensional vectors, got {X.shape[1]}")
        out = np.empty(len(X))
        step = max(1, 2_000_000 // max(1, len(self.alphas)))
        for s in range(0, len(X), step):
            K = rbf_matrix(X[s:s + step], self.support_vectors, self.gamma)
            out[s:s + step] = K @ self.alphas - self.rho
        return out

    def anomaly_scores(self, X) -> np.ndarray:
        return -self.decision(X)

    def to_json(self) -> dict:
        return {
            "meta": dict(self.meta),
            "nu": self.nu,
            "gamma": self.gamma,
            "rho": self.rho,
            "dim": self.dim,
            "support_vectors": self.support_vectors.tolist(),
            "alphas": self.alphas.tolist(),
        }

    @classmethod
    def from_json(cls, doc: Mapping) -> "OcSvmModel":
        dim = int(doc["dim"])
        sv = np.asarray(doc["support_vectors"], dtype=float).reshape(-1, dim)
        alphas = np.asarray(doc["alphas"], dtype=float)
        if len(alphas) != len(sv):
            raise ValueError("alphas and support_vectors differ in length")
        return cls(sv, alphas, float(doc["rho"]), float(doc["gamma"]), float(doc["nu"]), dim,
                   meta=dict(doc.get("meta", {})))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json()) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "OcSvmModel":
        return cls.from_json(json.loads(Path(path).read_text()))


def decision(model: OcSvmModel, x) -> float:
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ValueError("decision() takes a single vector; use model.decision for batches")
    return float(model.decision(x[None, :])[0])


def anomaly_score(model: OcSvmModel, x) -> float:
    return -decision(model, x)


class _KernelColumns:
    """Kernel columns computed on demand with a bounded cache."""

    def __init__(self, X: np.ndarray, gamma: float, capacity: int = 4096):
        self.X = X
        self.gamma = gamma
        self.sq = (X * X).sum(1)
        self.capacity = capacity
        self.cache: dict[int, np.ndarray] = {}

    def __call__(self, i: int) -> np.ndarray:
        col = self.cache.get(i)
        if col is None:
            d = self.sq + self.sq[i] - 2.0 * (self.X @ self.X[i])
            np.maximum(d, 0.0, out=d)
            col = np.exp(-self.gamma * d)
            if len(self.cache) >= self.capacity:
                self.cache.pop(next(iter(self.cache)))
            self.cache[i] = col
        return col


def _initial_alphas(l: int, upper: float, rng: np.random.Generator) -> np.ndarray:
    alpha = np.zeros(l)
    remaining = 1.0
    for i in rng.permutation(l):
        a = min(upper, remaining)
        alpha[i] = a
        remaining -= a
        if remaining <= 0.0:
            break
    return alpha


def _rho(alpha: np.ndarray, grad: np.ndarray, upper: float) -> float:
    tiny = SV_THRESHOLD
    free = (alpha > tiny) & (alpha < upper - tiny)
    if free.any():
        return float(grad[free].mean())
    at_upper = alpha >= upper - tiny
    at_zero = alpha <= tiny
    hi = grad[at_upper].max() if at_upper.any() else None
    lo = grad[at_zero].min() if at_zero.any() else None
    if hi is None:
        return float(lo)
    if lo is None:
        return float(hi)
    return float((hi + lo) / 2.0)


def train(vectors, cfg: TrainConfig = TrainConfig()) -> OcSvmModel:
    X = np.asarray(vectors, dtype=float)
    if X.ndim != 2:
        raise ValueError("training vectors must form a 2-D array")
    l, d = X.shape
    if l < 2:
        raise ValueError("need at least 2 training vectors")
    if cfg.nu * l < 1.0 - 1e-12:
        raise ValueError(f"nu*l = {cfg.nu * l:g} < 1: box constraint infeasible with sum(alpha)=1")
    upper = 1.0 / (cfg.nu * l)
    gamma = cfg.resolved_gamma(d)
    tol = cfg.kkt_tolerance
    max_iter = cfg.max_passes if cfg.max_passes is not None else 10 * l
    rng = np.random.default_rng(cfg.seed)
    col = _KernelColumns(X, gamma)

    alpha = _initial_alphas(l, upper, rng)
    grad = np.zeros(l)
    for j in np.flatnonzero(alpha):
        grad += alpha[j] * col(j)

    gap = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        up = np.where(alpha < upper, grad, np.inf)
        low = np.where(alpha > 0.0, grad, -np.inf)
        i = int(np.argmin(up))
        j = int(np.argmax(low))
        gap = low[j] - up[i]
        if gap <= tol:
            break
        Ki, Kj = col(i), col(j)
        eta = max(Ki[i] + Kj[j] - 2.0 * Ki[j], 1e-12)
        delta = min(gap / eta, upper - alpha[i], alpha[j])
        alpha[i] += delta
        alpha[j] -= delta
        # snap to the box so the masks above stay exact
        if upper - alpha[i] < 1e-15 * upper:
            alpha[i] = upper
        if alpha[j] < 1e-15 * upper:
            alpha[j] = 0.0
        grad += delta * (Ki - Kj)
    else:
        up = np.where(alpha < upper, grad, np.inf)
        low = np.where(alpha > 0.0, grad, -np.inf)
        gap = low.max() - up.min()
        if gap > tol:
            raise ConvergenceError(
                f"no convergence after {max_iter} iterations (KKT gap {gap:.3g} > {tol:g})",
                {"iterations": max_iter, "gap": float(gap), "alphas": alpha.copy(),
                 "rho": _rho(alpha, grad, upper)},
            )

    rho = _rho(alpha, grad, upper)
    keep = alpha > SV_THRESHOLD
    log.debug("oc-svm: l=%d d=%d iterations=%d gap=%.3g n_sv=%d", l, d, it, gap, keep.sum())
    return OcSvmModel(
        support_vectors=X[keep].copy(),
        alphas=alpha[keep].copy(),
        rho=rho,
        gamma=gamma,
        nu=cfg.nu,
        dim=d,
        info={
            "iterations": it,
            "gap": float(gap),
            "upper": upper,
            "train_alphas": alpha,
            "train_decision": grad - rho,
        },
    )
