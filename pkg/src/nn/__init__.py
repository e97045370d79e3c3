from src.nn.network import (
    ForwardTrace,
    Network,
    backward,
    build_network,
    describe,
    load_checkpoint,
    one_hot,
    save_checkpoint,
)

__all__ = [
    "ForwardTrace",
    "Network",
    "backward",
    "build_network",
    "describe",
    "load_checkpoint",
    "one_hot",
    "save_checkpoint",
]
