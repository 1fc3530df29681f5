from .checkpoint import dumps_checkpoint, load_checkpoint, loads_checkpoint, save_checkpoint
from .network import Gradients, Layer, Network, backward, build_reference_net, forward

__all__ = [
    "Gradients",
    "Layer",
    "Network",
    "backward",
    "build_reference_net",
    "dumps_checkpoint",
    "forward",
    "load_checkpoint",
    "loads_checkpoint",
    "save_checkpoint",
]
