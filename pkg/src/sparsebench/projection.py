"""Exact t-SNE for the per-factor embedding vectors, and the 2-D factor atlas."""

from __future__ import annotations

import csv
import hashlib
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

LOG2 = math.log(2.0)

log = logging.getLogger(__name__)


class ProjectionError(ValueError):
    pass


@dataclass(frozen=True)
class TsneConfig:
    perplexity: float = 5.0
    n_iter: int = 1000
    early_exaggeration: float = 12.0
    exaggeration_iters: int = 250
    learning_rate: float | None = None  # None: max(n_points / (4 * early_exaggeration), 50)
    momentum_early: float = 0.5
    momentum_late: float = 0.8
    entropy_tol: float = 1e-5
    init_scale: float = 1e-4
    seed: int = 0

    def check(self, n_points: int) -> None:
        if n_points < 4:
            raise ProjectionError(f"t-SNE needs at least 4 points, got {n_points}")
        if not 0 < self.perplexity < (n_points - 1) / 3:
            raise ProjectionError(
                f"perplexity {self.perplexity} infeasible for {n_points} points (need 0 < perplexity < {(n_points - 1) / 3:.3g})")
        if self.n_iter < 1 or (self.learning_rate is not None and self.learning_rate <= 0):
            raise ProjectionError("n_iter and learning_rate must be positive")

    def step_size(self, n_points: int) -> float:
        # the usual "auto" rule; a fixed 200 overshoots on exact gradients at n = 55
        if self.learning_rate is not None:
            return float(self.learning_rate)
        return max(n_points / (4.0 * self.early_exaggeration), 50.0)


def squared_distances(X: np.ndarray) -> np.ndarray:
    sq = np.einsum("ij,ij->i", X, X)
    D = sq[:, None] + sq[None, :] - 2.0 * X @ X.T
    np.fill_diagonal(D, 0.0)
    return np.maximum(D, 0.0)


def _row_entropy(d: np.ndarray, beta: float) -> tuple[float, np.ndarray]:
    """Entropy in bits of p_j ∝ exp(-beta * d_j), and p itself."""
    w = np.exp(-beta * (d - d.min()))
    s = w.sum()
    p = w / s
    h = beta * float(p @ (d - d.min())) + math.log(s)
    return h / LOG2, p


def conditional_probabilities(X, perplexity: float, tol: float = 1e-5, max_iter: int = 200):
    """Row-stochastic P(j|i) with per-row Gaussian precision found by bisection
    so that each row's entropy equals log2(perplexity)."""
    X = np.asarray(X, dtype=float)
    n = X.shape[0]
    D = squared_distances(X)
    target = math.log2(perplexity)
    P = np.zeros((n, n))
    betas = np.ones(n)
    entropies = np.zeros(n)
    for i in range(n):
        d = np.delete(D[i], i)
        lo, hi, beta = 0.0, math.inf, 1.0
        if np.ptp(d) > 0:
            beta = 1.0 / float(np.median(d[d > 0]) if np.any(d > 0) else 1.0)
        h, p = _row_entropy(d, beta)
        for _ in range(max_iter):
            if abs(h - target) < tol:
                break
            if h > target:
                lo = beta
                beta = beta * 2 if math.isinf(hi) else 0.5 * (beta + hi)
            else:
                hi = beta
                beta = 0.5 * (beta + lo)
            h, p = _row_entropy(d, beta)
        betas[i], entropies[i] = beta, h
        P[i, np.arange(n) != i] = p
    return P, betas, entropies


def joint_probabilities(X, perplexity: float, tol: float = 1e-5) -> np.ndarray:
    P, _, h = conditional_probabilities(X, perplexity, tol)
    miss = np.abs(h - math.log2(perplexity))
    if miss.max() > tol:
        # equidistant neighbours fix the entropy at log2(n - 1); perplexity < 1 is never reachable
        log.warning("bandwidth search missed the target entropy on %d row(s) (worst %.3g bits)",
                    int(np.sum(miss > tol)), float(miss.max()))
    P = (P + P.T) / (2.0 * P.shape[0])
    return P / P.sum()


def _initial_layout(X: np.ndarray, seed: int, scale: float) -> np.ndarray:
    # each point's start depends only on its own content and the seed, so
    # permuting the input rows permutes the output rows
    Y = np.empty((X.shape[0], 2))
    for i, row in enumerate(X):
        h = hashlib.sha256(np.int64(seed).tobytes() + np.ascontiguousarray(row, dtype=np.float64).tobytes())
        Y[i] = scale * np.random.default_rng(int.from_bytes(h.digest()[:8], "little")).standard_normal(2)
    return Y


def _q_kernel(Y: np.ndarray) -> np.ndarray:
    num = 1.0 / (1.0 + squared_distances(Y))
    np.fill_diagonal(num, 0.0)
    return num


def kl_divergence(P: np.ndarray, Y: np.ndarray) -> float:
    num = _q_kernel(Y)
    Q = np.maximum(num / num.sum(), 1e-300)
    mask = P > 0
    return float(np.sum(P[mask] * np.log(P[mask] / Q[mask])))


@dataclass
class TsneResult:
    coords: np.ndarray
    P: np.ndarray = field(repr=False)
    kl_history: list[float] = field(repr=False, default_factory=list)

    def kl_at(self, iteration: int) -> float:
        """KL(P||Q) after ``iteration`` updates (1-based)."""
        return self.kl_history[iteration - 1]


def tsne(vectors, cfg: TsneConfig = TsneConfig()) -> TsneResult:
    """Exact t-SNE: momentum gradient descent on KL(P||Q), with early exaggeration."""
    X = np.asarray(vectors, dtype=float)
    if X.ndim != 2 or not np.all(np.isfinite(X)):
        raise ProjectionError("vectors must be a finite 2-D array")
    n = X.shape[0]
    cfg.check(n)
    # optimise in a content-defined row order so that permuting the input
    # permutes the output exactly (floating-point sums depend on order)
    order = np.lexsort(X.T[::-1])
    Xs = X[order]
    P = joint_probabilities(Xs, cfg.perplexity, cfg.entropy_tol)
    Y = _initial_layout(Xs, cfg.seed, cfg.init_scale)
    velocity = np.zeros_like(Y)
    lr = cfg.step_size(n)
    history = []
    for it in range(1, cfg.n_iter + 1):
        early = it <= cfg.exaggeration_iters
        Pe = P * cfg.early_exaggeration if early else P
        num = _q_kernel(Y)
        Q = num / num.sum()
        W = (Pe - Q) * num
        grad = 4.0 * (W.sum(axis=1)[:, None] * Y - W @ Y)
        momentum = cfg.momentum_early if early else cfg.momentum_late
        velocity = momentum * velocity - lr * grad
        Y = Y + velocity
        Y = Y - Y.mean(axis=0)
        history.append(kl_divergence(P, Y))
    inv = np.empty(n, dtype=int)
    inv[order] = np.arange(n)
    return TsneResult(Y[inv], P[np.ix_(inv, inv)], history)


# -- factor vectors and atlas --------------------------------------------------------

def factor_vectors(ranking, factors: Sequence[str] | None = None) -> tuple[list[str], np.ndarray]:
    """One 16-vector per factor: the mean of its per-task embedding summaries."""
    per_factor: dict[str, list[np.ndarray]] = {}
    for (task, f), v in ranking.embeddings.items():
        per_factor.setdefault(f, []).append(np.asarray(v, dtype=float))
    names = list(factors) if factors is not None else [f for f in ranking.factors if f in per_factor]
    missing = [f for f in names if f not in per_factor]
    if missing:
        raise ProjectionError(f"no successful embedding runs for factor(s): {', '.join(missing)}")
    if not names:
        raise ProjectionError("ranking holds no embeddings")
    vecs = np.array([np.mean(per_factor[f], axis=0) for f in names])
    if not np.all(np.isfinite(vecs)):
        raise ProjectionError("non-finite embedding vector")
    return names, vecs


@dataclass
class EmbeddingAtlas:
    factors: list[str]
    indices: list[int]
    projects: list[str]
    vectors: np.ndarray = field(repr=False)
    coords: np.ndarray = field(repr=False)
    inverse_ranks: list[float] = field(default_factory=list)

    def write_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["index", "factor", "project", "x", "y", "inverse_rank"])
            for i, f in enumerate(self.factors):
                w.writerow([self.indices[i], f, self.projects[i], repr(float(self.coords[i, 0])),
                            repr(float(self.coords[i, 1])), repr(self.inverse_ranks[i])])
        return path


def build_atlas(ranking, projects: dict[str, str], cfg: TsneConfig = TsneConfig()) -> EmbeddingAtlas:
    names, vecs = factor_vectors(ranking)
    result = tsne(vecs, cfg)
    order = list(ranking.factors)
    return EmbeddingAtlas(
        names, [order.index(f) for f in names], [projects.get(f, "") for f in names], vecs, result.coords,
        [ranking.inverse_rank(f) for f in names],
    )
