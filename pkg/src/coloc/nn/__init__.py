"""Dense-matrix reverse-mode autodiff kernel: LSTM cell, graph attention,
Gaussian NLL losses, and Adam."""

from . import tensor
from .checkpoint import load_params, save_params
from .layers import (GatParams, LstmParams, gat_forward, init_gat, init_lstm,
                     lstm_step, lstm_zero_state)
from .loss import diag_nll, gaussian_nll_value, mv_nll_loss
from .optim import AdamState, adam_step
from .params import ParamSet, uniform_init
from .tensor import ShapeError, Tensor, no_grad

__all__ = [
    "tensor", "Tensor", "ShapeError", "no_grad",
    "ParamSet", "uniform_init",
    "LstmParams", "GatParams", "init_lstm", "init_gat", "lstm_step",
    "lstm_zero_state", "gat_forward",
    "mv_nll_loss", "diag_nll", "gaussian_nll_value",
    "AdamState", "adam_step",
    "save_params", "load_params",
]
