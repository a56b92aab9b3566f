"""Framework-free volumetric segmentation with a Mamba-style state-space network."""
from .config import precision, set_default_dtype, set_workers, worker_count
from .network import NetworkConfig, StageOutputs, encode, forward, init_weights, param_count
from .tensor import Tape, Tensor, backward, no_grad

__version__ = "0.1.0"
