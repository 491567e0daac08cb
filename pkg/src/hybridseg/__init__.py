"""Desk-scale segmentation toolkit: autodiff engine, hybrid encoder-decoder
network with ConvLSTM skip fusion and windowed attention, composite region +
boundary losses, evaluation metrics, and a training/ablation CLI."""

__version__ = "0.1.0"

from .tensor import Tensor, Tape, record, backward, grad_check  # noqa: F401
