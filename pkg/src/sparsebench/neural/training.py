"""Adam training with per-epoch validation resampling and patience-based stopping."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..preprocess import DesignMatrix
from .network import (
    EMBED_DIM, EVAL, LINEAR_HEAD, RELU_HEAD, TRAIN, EmbeddingBank, LayerStack, Network,
    NonFiniteLossError,
)

PATIENCE, CEILING = "Patience", "Ceiling"


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    max_epochs: int = 10_000
    learning_rate: float = 0.001
    early_stop_patience: int = 500
    val_fraction: float = 0.15
    seed: int = 0
    leaky_alpha: float = 0.01
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    dtype: str = "float32"

    def __post_init__(self):
        for name in ("batch_size", "max_epochs", "early_stop_patience"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must lie in (0, 1)")


@dataclass
class TrainedNet:
    net: Network
    best_epoch: int
    best_val_mse: float
    stopped_reason: str
    epochs_run: int
    val_history: list[float] = field(repr=False, default_factory=list)
    train_history: list[float] = field(repr=False, default_factory=list)
    best_val_rows: np.ndarray | None = field(repr=False, default=None)
    input_columns: np.ndarray | None = None
    config: TrainConfig | None = None

    def _select(self, X) -> np.ndarray:
        X = np.asarray(getattr(X, "values", X))
        if self.input_columns is not None and X.shape[1] != self.net.arch.input_width:
            X = X[:, self.input_columns]
        return X

    def predict(self, X) -> np.ndarray:
        return self.net.predict(self._select(X)).astype(np.float64)

    @property
    def embedding(self) -> EmbeddingBank | None:
        return self.net.arch.embedding

    def factor_embedding(self, factor: str) -> np.ndarray:
        """Summary 16-vector of one factor: column mean of its projection plus bias."""
        bank = self.net.arch.embedding
        if bank is None:
            raise ValueError("network has no embedding bank")
        k = bank.factors.index(factor)
        W = self.net.projection(k).astype(np.float64)
        b = self.net.params["emb.b"][k * bank.dim:(k + 1) * bank.dim].astype(np.float64)
        return (W.mean(axis=0) if W.shape[0] else np.zeros(bank.dim)) + b


class Adam:
    def __init__(self, params: dict[str, np.ndarray], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self._tmp = {k: np.empty_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for k, g in grads.items():
            m, v, tmp = self.m[k], self.v[k], self._tmp[k]
            m *= b1
            np.multiply(g, 1 - b1, out=tmp)
            m += tmp
            v *= b2
            np.multiply(g, g, out=tmp)
            tmp *= 1 - b2
            v += tmp
            # p -= lr/c1 * m / (sqrt(v/c2) + eps)
            np.multiply(v, 1.0 / c2, out=tmp)
            np.sqrt(tmp, out=tmp)
            tmp += self.eps
            np.divide(m, tmp, out=tmp)
            tmp *= self.lr / c1
            params[k] -= tmp


def _batches(idx: np.ndarray, size: int) -> list[np.ndarray]:
    chunks = [idx[i:i + size] for i in range(0, len(idx), size)]
    # a trailing single row cannot be batch-normalised; fold it into its neighbour
    if len(chunks) > 1 and len(chunks[-1]) == 1:
        chunks[-2] = np.concatenate([chunks[-2], chunks.pop()])
    return chunks


def default_head(y) -> str:
    return RELU_HEAD if np.all(np.asarray(y) >= 0) else LINEAR_HEAD


def train(X_train, y_train, cfg: TrainConfig = TrainConfig(), embedding: EmbeddingBank | None = None,
          head: str | None = None, arch: LayerStack | None = None) -> TrainedNet:
    """Fit a network.

    Each epoch draws a fresh validation subset (``val_fraction`` of rows),
    runs Adam over shuffled mini-batches of the rest, then scores the
    validation subset in Eval mode. Training stops after
    ``early_stop_patience`` epochs without a new best validation MSE, or at
    ``max_epochs``; the returned network holds the best epoch's weights.
    """
    X = np.asarray(getattr(X_train, "values", X_train), dtype=np.dtype(cfg.dtype))
    y = np.asarray(y_train, dtype=np.float64).ravel()
    n = X.shape[0]
    if n != y.shape[0]:
        raise ValueError("X and y row counts differ")
    n_val = max(1, int(round(cfg.val_fraction * n)))
    if n - n_val < 2:
        raise ValueError(f"need >= 2 training rows after the validation split, have {n - n_val}")
    if arch is None:
        arch = LayerStack(X.shape[1], head or default_head(y), leaky_alpha=cfg.leaky_alpha, embedding=embedding)
    seeds = np.random.SeedSequence(cfg.seed).spawn(2)
    init_rng, rng = np.random.default_rng(seeds[0]), np.random.default_rng(seeds[1])
    net = Network(arch, init_rng, np.dtype(cfg.dtype), output_bias=float(y.mean()))
    opt = Adam(net.params, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    y_t = y.astype(net.dtype)

    best_mse, best_epoch, best_state, best_rows = np.inf, 0, net.state(), None
    val_hist, train_hist = [], []
    reason, epoch = CEILING, 0
    for epoch in range(1, cfg.max_epochs + 1):
        perm = rng.permutation(n)
        val_idx, fit_idx = perm[:n_val], perm[n_val:]
        losses = []
        for b, batch in enumerate(_batches(fit_idx, cfg.batch_size)):
            try:
                loss, grads = net.loss_and_grads(X[batch], y_t[batch], TRAIN, rng, batch_index=b)
            except NonFiniteLossError as exc:
                raise NonFiniteLossError(exc.batch_index, epoch) from None
            opt.step(net.params, grads)
            losses.append(loss)
        train_hist.append(float(np.mean(losses)))
        pred = net.forward(X[val_idx], EVAL).astype(np.float64)
        val_mse = float(np.mean((pred - y[val_idx]) ** 2))
        if not np.isfinite(val_mse):
            raise NonFiniteLossError(-1, epoch)
        val_hist.append(val_mse)
        if val_mse < best_mse:
            best_mse, best_epoch, best_state, best_rows = val_mse, epoch, net.state(), val_idx.copy()
        elif epoch - best_epoch >= cfg.early_stop_patience:
            reason = PATIENCE
            break
    net.load_state(best_state)
    return TrainedNet(net, best_epoch, best_mse, reason, epoch, val_hist, train_hist, best_rows, None, cfg)


def train_full(dm: DesignMatrix, y, cfg: TrainConfig = TrainConfig(), head: str | None = None) -> TrainedNet:
    return train(dm.values, y, cfg, None, head)


def train_embedded(dm: DesignMatrix, y, cfg: TrainConfig = TrainConfig(), head: str | None = None,
                   dim: int = EMBED_DIM) -> TrainedNet:
    return train(dm.values, y, cfg, EmbeddingBank.from_design(dm, dim=dim), head)


def embed_forward(bank: EmbeddingBank, dm, projections=None, biases=None) -> np.ndarray:
    """Concatenated per-factor embeddings ``x_f @ P_f + b_f``.

    ``projections``/``biases`` are per-factor lists; the design matrix must be
    partitioned exactly as the bank expects.
    """
    if isinstance(dm, DesignMatrix):
        bank.check_design(dm)
    X = np.asarray(getattr(dm, "values", dm), dtype=np.float64)
    if X.shape[1] != bank.n_inputs:
        raise ValueError(f"bank expects {bank.n_inputs} columns, got {X.shape[1]}")
    out = np.empty((X.shape[0], bank.output_width))
    for k, cols in enumerate(bank.slices):
        P = np.asarray(projections[k], dtype=np.float64).reshape(cols.size, bank.dim)
        out[:, k * bank.dim:(k + 1) * bank.dim] = X[:, cols] @ P + np.asarray(biases[k])
    return out


def single_factor_net(dm: DesignMatrix, y, factor: str, cfg: TrainConfig = TrainConfig(),
                      head: str | None = None) -> TrainedNet:
    """Embedded network that sees only ``factor``'s columns (16 core inputs)."""
    from ..preprocess import columns_for_factor

    cols = np.asarray(columns_for_factor(dm, factor), dtype=int)
    bank = EmbeddingBank([factor], [np.arange(cols.size)], cols.size)
    X = dm.values[:, cols]
    trained = train(X, y, cfg, bank, head)
    trained.input_columns = cols
    return trained
