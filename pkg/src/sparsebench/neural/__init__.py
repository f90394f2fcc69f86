from .network import (
    EMBED_DIM, EVAL, LINEAR_HEAD, RELU_HEAD, TRAIN, EmbeddingBank, LayerStack, Network,
    NonFiniteLossError, backward, dropout_mask, forward, leaky_relu, load_checkpoint, save_checkpoint,
)
from .training import (
    CEILING, PATIENCE, Adam, TrainConfig, TrainedNet, default_head, embed_forward, single_factor_net,
    train, train_embedded, train_full,
)

__all__ = [
    "EMBED_DIM", "EVAL", "LINEAR_HEAD", "RELU_HEAD", "TRAIN", "EmbeddingBank", "LayerStack", "Network",
    "NonFiniteLossError", "backward", "dropout_mask", "forward", "leaky_relu", "load_checkpoint",
    "save_checkpoint", "CEILING", "PATIENCE", "Adam", "TrainConfig", "TrainedNet", "default_head",
    "embed_forward", "single_factor_net", "train", "train_embedded", "train_full",
]
