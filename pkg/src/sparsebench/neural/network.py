"""Feedforward regression network with optional per-factor embeddings.

Layout (input -> output)::

    [embedding bank: x_f @ P_f + b_f per factor, concatenated]
    3 x (dense -> batchnorm -> leaky ReLU -> dropout)
    dense(1) -> ReLU head | linear head

Embedding projections are packed: ``emb.W`` has one row per input column
(columns grouped factor by factor, in bank order) and ``dim`` columns, so
factor k's projection matrix is a contiguous row block.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

RELU_HEAD = "ReLUHead"
LINEAR_HEAD = "LinearHead"
TRAIN, EVAL = "Train", "Eval"

REFERENCE_BLOCKS = 3
REFERENCE_WIDTH = 256
REFERENCE_DROPOUT = 0.5
EMBED_DIM = 16


class NonFiniteLossError(FloatingPointError):
    def __init__(self, batch_index: int, epoch: int | None = None):
        self.batch_index = batch_index
        self.epoch = epoch
        where = f"epoch {epoch}, " if epoch is not None else ""
        super().__init__(f"non-finite loss at {where}batch {batch_index}")


@dataclass
class EmbeddingBank:
    """Per-factor linear projections to ``dim`` values each.

    ``slices[k]`` holds the input column indices of ``factors[k]``; a factor
    may own no columns, in which case its embedding is just its bias.
    """

    factors: list[str]
    slices: list[np.ndarray]
    n_inputs: int
    dim: int = EMBED_DIM

    def __post_init__(self):
        self.slices = [np.asarray(s, dtype=int) for s in self.slices]
        if len(self.factors) != len(self.slices):
            raise ValueError("one column slice per factor")
        cols = np.concatenate(self.slices) if self.slices else np.zeros(0, dtype=int)
        if cols.size and (np.unique(cols).size != cols.size or cols.min() < 0 or cols.max() >= self.n_inputs):
            raise ValueError("factor slices must be disjoint column indices within the input")

    @classmethod
    def from_design(cls, dm, factors=None, dim: int = EMBED_DIM, keep_empty: bool = False) -> "EmbeddingBank":
        from ..preprocess import columns_for_factor

        names = list(dm.factors if factors is None else factors)
        slices = [np.asarray(columns_for_factor(dm, f), dtype=int) for f in names]
        if not keep_empty:
            keep = [i for i, s in enumerate(slices) if s.size]
            names, slices = [names[i] for i in keep], [slices[i] for i in keep]
        return cls(names, slices, dm.values.shape[1], dim)

    @property
    def output_width(self) -> int:
        return self.dim * len(self.factors)

    @property
    def column_order(self) -> np.ndarray:
        """Input columns in packed-row order."""
        return np.concatenate(self.slices) if self.slices else np.zeros(0, dtype=int)

    def row_blocks(self) -> list[slice]:
        """Row block of each factor within the packed projection."""
        out, start = [], 0
        for cols in self.slices:
            out.append(slice(start, start + cols.size))
            start += cols.size
        return out

    def mask(self, dtype=np.float64) -> np.ndarray:
        m = np.zeros((self.n_inputs, self.output_width), dtype=dtype)
        for k, cols in enumerate(self.slices):
            m[cols, k * self.dim:(k + 1) * self.dim] = 1
        return m

    def check_design(self, dm) -> None:
        from ..preprocess import columns_for_factor

        if dm.values.shape[1] != self.n_inputs:
            raise ValueError(f"bank expects {self.n_inputs} columns, design has {dm.values.shape[1]}")
        for f, cols in zip(self.factors, self.slices):
            if not np.array_equal(np.asarray(columns_for_factor(dm, f)), cols):
                raise ValueError(f"factor {f!r}: column partition does not match the bank")


@dataclass
class LayerStack:
    input_width: int
    head: str = RELU_HEAD
    n_blocks: int = REFERENCE_BLOCKS
    width: int = REFERENCE_WIDTH
    dropout: float = REFERENCE_DROPOUT
    leaky_alpha: float = 0.01
    bn_momentum: float = 0.9
    bn_eps: float = 1e-5
    embedding: EmbeddingBank | None = None

    def __post_init__(self):
        if self.head not in (RELU_HEAD, LINEAR_HEAD):
            raise ValueError(f"unknown head {self.head!r}")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")
        if self.embedding is not None and self.embedding.n_inputs != self.input_width:
            raise ValueError("embedding bank input width differs from the network input")

    @property
    def core_width(self) -> int:
        """Width entering the first dense block."""
        return self.embedding.output_width if self.embedding is not None else self.input_width

    def is_reference_architecture(self) -> bool:
        return (
            self.n_blocks == REFERENCE_BLOCKS
            and self.width == REFERENCE_WIDTH
            and self.dropout == REFERENCE_DROPOUT
            and (self.embedding is None or self.embedding.dim == EMBED_DIM)
        )

    def describe(self) -> list[tuple[str, ...]]:
        layers: list[tuple[str, ...]] = []
        if self.embedding is not None:
            layers.append(("embedding", str(len(self.embedding.factors)), str(self.embedding.dim)))
        for _ in range(self.n_blocks):
            layers += [("dense", str(self.width)), ("batchnorm",), ("leaky_relu", str(self.leaky_alpha)),
                       ("dropout", str(self.dropout))]
        layers.append(("dense", "1"))
        layers.append(("relu",) if self.head == RELU_HEAD else ("linear",))
        return layers


def leaky_relu(x: np.ndarray, alpha: float) -> np.ndarray:
    return np.where(x > 0, x, alpha * x)


def dropout_mask(shape, p: float, rng: np.random.Generator, dtype=np.float64) -> np.ndarray:
    """Inverted-dropout multiplier: 0 with probability p, 1/(1-p) otherwise."""
    keep = rng.random(shape) >= p
    dt = np.dtype(dtype)
    return keep.astype(dt) / dt.type(1.0 - p)


class Network:
    """Parameters, batchnorm running statistics, forward and backward passes."""

    def __init__(self, arch: LayerStack, rng: np.random.Generator | None = None, dtype=np.float32,
                 output_bias: float = 0.0):
        self.arch = arch
        self.dtype = np.dtype(dtype)
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self._emb = None
        rng = rng if rng is not None else np.random.default_rng(0)
        dt = self.dtype
        if arch.embedding is not None:
            bank = arch.embedding
            sizes = np.array([c.size for c in bank.slices], dtype=int)
            nonempty = np.flatnonzero(sizes)
            starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])[nonempty]
            self._emb = (bank.column_order, nonempty, starts, np.repeat(np.arange(len(sizes)), sizes))
            W = np.concatenate(
                [rng.normal(0.0, np.sqrt(1.0 / c.size), size=(c.size, bank.dim)) for c in bank.slices if c.size]
                or [np.zeros((0, bank.dim))]
            )
            self.params["emb.W"] = W.astype(dt)
            self.params["emb.b"] = np.zeros(bank.output_width, dtype=dt)
        fan_in = arch.core_width
        for i in range(arch.n_blocks):
            self.params[f"dense{i}.W"] = rng.normal(0.0, np.sqrt(2.0 / max(fan_in, 1)),
                                                    size=(fan_in, arch.width)).astype(dt)
            self.params[f"dense{i}.b"] = np.zeros(arch.width, dtype=dt)
            self.params[f"bn{i}.gamma"] = np.ones(arch.width, dtype=dt)
            self.params[f"bn{i}.beta"] = np.zeros(arch.width, dtype=dt)
            self.buffers[f"bn{i}.running_mean"] = np.zeros(arch.width, dtype=dt)
            self.buffers[f"bn{i}.running_var"] = np.ones(arch.width, dtype=dt)
            fan_in = arch.width
        self.params["head.W"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, 1)).astype(dt)
        self.params["head.b"] = np.full(1, output_bias, dtype=dt)

    # -- state ----------------------------------------------------------------
    def state(self) -> dict[str, np.ndarray]:
        out = {k: v.copy() for k, v in self.params.items()}
        out.update({k: v.copy() for k, v in self.buffers.items()})
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k in self.params:
            self.params[k] = state[k].astype(self.dtype, copy=True)
        for k in self.buffers:
            self.buffers[k] = state[k].astype(self.dtype, copy=True)

    def n_parameters(self) -> int:
        return sum(v.size for v in self.params.values())

    def projection(self, k: int) -> np.ndarray:
        """Projection matrix (factor columns x dim) of the k-th bank factor."""
        return self.params["emb.W"][self.arch.embedding.row_blocks()[k]]

    def dense_projection(self) -> np.ndarray:
        """The embedding as one block-diagonal (inputs x 16F) matrix."""
        bank = self.arch.embedding
        W = np.zeros((bank.n_inputs, bank.output_width), dtype=self.dtype)
        for k, (cols, rows) in enumerate(zip(bank.slices, bank.row_blocks())):
            W[cols, k * bank.dim:(k + 1) * bank.dim] = self.params["emb.W"][rows]
        return W

    # -- passes ---------------------------------------------------------------
    def embed(self, X: np.ndarray) -> np.ndarray:
        if self.arch.embedding is None:
            raise ValueError("network has no embedding bank")
        bank = self.arch.embedding
        order, nonempty, starts, _ = self._emb
        n = X.shape[0]
        out = np.zeros((n, len(bank.factors), bank.dim), dtype=self.dtype)
        if order.size:
            Z = X[:, order][:, :, None] * self.params["emb.W"][None, :, :]
            out[:, nonempty] = np.add.reduceat(Z, starts, axis=1)
        return out.reshape(n, -1) + self.params["emb.b"]

    def forward(self, X, mode: str = EVAL, rng: np.random.Generator | None = None, dropout: bool = True,
                update_stats: bool = True, cache: dict | None = None) -> np.ndarray:
        """Predictions for a batch.

        Train mode normalises with batch statistics (and updates the running
        averages when ``update_stats``) and applies dropout when ``dropout``;
        Eval mode uses running statistics and no dropout.
        """
        arch = self.arch
        X = np.asarray(X, dtype=self.dtype)
        if X.ndim != 2 or X.shape[1] != arch.input_width:
            raise ValueError(f"expected batch of width {arch.input_width}, got {X.shape}")
        if mode == TRAIN and X.shape[0] < 2:
            raise ValueError("Train-mode batchnorm needs a batch of at least 2 rows")
        if mode not in (TRAIN, EVAL):
            raise ValueError(f"unknown mode {mode!r}")
        use_dropout = mode == TRAIN and dropout and arch.dropout > 0
        if use_dropout and rng is None:
            raise ValueError("dropout needs an rng")
        if cache is not None:
            cache["X"] = X
        h = X
        if arch.embedding is not None:
            h = self.embed(X)
        if cache is not None:
            cache["h_in0"] = h
        dt = self.dtype
        for i in range(arch.n_blocks):
            p = self.params
            a = h @ p[f"dense{i}.W"] + p[f"dense{i}.b"]
            if mode == TRAIN:
                mu = a.mean(axis=0)
                centred = a - mu
                centred[:, np.ptp(a, axis=0) == 0] = 0
                var = (centred * centred).mean(axis=0)
                if update_stats:
                    m = dt.type(arch.bn_momentum)
                    rm, rv = f"bn{i}.running_mean", f"bn{i}.running_var"
                    self.buffers[rm] = m * self.buffers[rm] + (1 - m) * mu
                    self.buffers[rv] = m * self.buffers[rv] + (1 - m) * var
            else:
                centred = a - self.buffers[f"bn{i}.running_mean"]
                var = self.buffers[f"bn{i}.running_var"]
            inv_std = 1.0 / np.sqrt(var + dt.type(arch.bn_eps))
            xhat = centred * inv_std
            out = p[f"bn{i}.gamma"] * xhat + p[f"bn{i}.beta"]
            act = np.where(out > 0, out, dt.type(arch.leaky_alpha) * out)
            mask = dropout_mask(act.shape, arch.dropout, rng, dt) if use_dropout else None
            h = act * mask if mask is not None else act
            if cache is not None:
                cache[f"block{i}"] = (xhat, inv_std, out, mask)
                cache[f"h_in{i + 1}"] = h
        z = (h @ self.params["head.W"] + self.params["head.b"])[:, 0]
        if cache is not None:
            cache["z"] = z
            cache["mode"] = mode
        if arch.head == RELU_HEAD:
            return np.maximum(z, 0)
        return z

    def predict(self, X) -> np.ndarray:
        return self.forward(X, EVAL)

    def backward(self, cache: dict, y_pred: np.ndarray, y: np.ndarray,
                 batch_index: int = 0) -> tuple[float, dict[str, np.ndarray]]:
        """MSE loss and its gradient w.r.t. every parameter, from a forward cache."""
        arch = self.arch
        y = np.asarray(y, dtype=self.dtype)
        n = y.shape[0]
        err = y_pred - y
        loss = float(np.mean(err.astype(np.float64) ** 2))
        if not np.isfinite(loss):
            raise NonFiniteLossError(batch_index)
        grads: dict[str, np.ndarray] = {}
        dz = (2.0 / n) * err
        if arch.head == RELU_HEAD:
            dz = dz * (cache["z"] > 0)
        dz = dz.astype(self.dtype)[:, None]
        h = cache[f"h_in{arch.n_blocks}"]
        grads["head.W"] = h.T @ dz
        grads["head.b"] = dz.sum(axis=0)
        dh = dz @ self.params["head.W"].T
        for i in reversed(range(arch.n_blocks)):
            xhat, inv_std, out, mask = cache[f"block{i}"]
            if mask is not None:
                dh = dh * mask
            dout = dh * np.where(out > 0, 1.0, arch.leaky_alpha).astype(self.dtype)
            grads[f"bn{i}.gamma"] = (dout * xhat).sum(axis=0)
            grads[f"bn{i}.beta"] = dout.sum(axis=0)
            dxhat = dout * self.params[f"bn{i}.gamma"]
            if cache["mode"] == TRAIN:
                m = dxhat.shape[0]
                da = (inv_std / m) * (m * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
            else:
                da = dxhat * inv_std
            h_prev = cache[f"h_in{i}"]
            grads[f"dense{i}.W"] = h_prev.T @ da
            grads[f"dense{i}.b"] = da.sum(axis=0)
            dh = da @ self.params[f"dense{i}.W"].T
        if arch.embedding is not None:
            order, _, _, row_factor = self._emb
            bank = arch.embedding
            dh3 = dh.reshape(dh.shape[0], len(bank.factors), bank.dim)
            grads["emb.W"] = np.einsum("nm,nmd->md", cache["X"][:, order], dh3[:, row_factor, :])
            grads["emb.b"] = dh.sum(axis=0)
        return loss, grads

    def loss_and_grads(self, X, y, mode: str = TRAIN, rng=None, dropout: bool = True,
                       update_stats: bool = True, batch_index: int = 0):
        cache: dict = {}
        pred = self.forward(X, mode, rng, dropout, update_stats, cache)
        return self.backward(cache, pred, y, batch_index)


def forward(net: Network, batch, mode: str = EVAL, rng=None) -> np.ndarray:
    return net.forward(batch, mode, rng)


def backward(net: Network, batch, targets, mode: str = EVAL, rng=None, dropout: bool = False):
    """Gradients of the batch MSE. Defaults to the deterministic setting
    (running statistics, dropout off) used for gradient checks."""
    _, grads = net.loss_and_grads(batch, targets, mode, rng, dropout, update_stats=False)
    return grads


# -- checkpoints -------------------------------------------------------------

def save_checkpoint(net: Network, prefix, extra: dict | None = None) -> tuple[Path, Path]:
    """Write ``prefix.bin`` (little-endian float32 tensors, manifest order) and
    ``prefix.json`` (shapes, factor layout, architecture, extra metadata)."""
    prefix = Path(prefix)
    state = net.state()
    names = list(state)
    blob = b"".join(np.ascontiguousarray(state[k], dtype="<f4").tobytes() for k in names)
    bin_path, json_path = prefix.with_suffix(".bin"), prefix.with_suffix(".json")
    bin_path.write_bytes(blob)
    arch = net.arch
    manifest = {
        "dtype": "float32-le",
        "tensors": [{"name": k, "shape": list(state[k].shape)} for k in names],
        "architecture": {
            "input_width": arch.input_width, "head": arch.head, "n_blocks": arch.n_blocks,
            "width": arch.width, "dropout": arch.dropout, "leaky_alpha": arch.leaky_alpha,
            "bn_momentum": arch.bn_momentum, "bn_eps": arch.bn_eps,
        },
        "factor_layout": None if arch.embedding is None else {
            "factors": arch.embedding.factors,
            "columns": [s.tolist() for s in arch.embedding.slices],
            "dim": arch.embedding.dim,
        },
    }
    manifest.update(extra or {})
    json_path.write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    return bin_path, json_path


def load_checkpoint(prefix) -> tuple[Network, dict]:
    prefix = Path(prefix)
    manifest = json.loads(prefix.with_suffix(".json").read_text(encoding="utf-8"))
    blob = np.frombuffer(prefix.with_suffix(".bin").read_bytes(), dtype="<f4")
    a = manifest["architecture"]
    bank = None
    if manifest["factor_layout"] is not None:
        fl = manifest["factor_layout"]
        bank = EmbeddingBank(fl["factors"], [np.asarray(c, dtype=int) for c in fl["columns"]],
                             a["input_width"], fl["dim"])
    arch = LayerStack(a["input_width"], a["head"], a["n_blocks"], a["width"], a["dropout"],
                      a["leaky_alpha"], a["bn_momentum"], a["bn_eps"], bank)
    net = Network(arch, dtype=np.float32)
    state, offset = {}, 0
    for t in manifest["tensors"]:
        size = int(np.prod(t["shape"])) if t["shape"] else 1
        state[t["name"]] = blob[offset:offset + size].reshape(t["shape"]).astype(np.float32)
        offset += size
    if offset != blob.size:
        raise ValueError("checkpoint blob size does not match manifest")
    net.load_state(state)
    return net, manifest
