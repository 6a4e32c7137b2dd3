from .tensor import Tensor, Graph, active_graph
from .params import ParamSet, adam_step, save_checkpoint, load_checkpoint
from . import ops

__all__ = [
    "Tensor",
    "Graph",
    "active_graph",
    "ParamSet",
    "adam_step",
    "save_checkpoint",
    "load_checkpoint",
    "ops",
]
