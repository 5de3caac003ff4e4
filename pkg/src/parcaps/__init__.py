"""Parallel capsule networks: vector (dynamic-routing) and matrix
(EM-routing) capsules over a numpy reverse-mode autodiff core, with a
training CLI."""

from . import autodiff, caps_dr, caps_em, config, data, layers, metrics, network, optim, training
from .autodiff import Tensor, grad_check
from .network import ArchitectureConfig, Network, build_network, count_parameters, network_forward
from .rng import RngPool

__version__ = "0.1.0"
