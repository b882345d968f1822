"""Desk-scale encoder-decoder saliency toolkit in plain numpy.

Layers with hand-written gradients, pre-activation dropout with its pooled
outcome law, artifact-free upsampling blocks, synthetic data, training and
the usual saliency metrics.
"""
from .model import NetworkConfig, build_network, infer_saliency, multiscale_ensemble, toy_config
from .training import TrainConfig, train

__all__ = [
    "NetworkConfig",
    "TrainConfig",
    "build_network",
    "infer_saliency",
    "multiscale_ensemble",
    "toy_config",
    "train",
]
__version__ = "0.1.0"
