"""Framework-free differentiable kernels, parameter storage, Adam and
finite-difference gradient checking."""

from .adam import AdamState, adam_step
from .functional import (
    BLSTMOutput,
    LSTMParams,
    bce_stop_loss,
    bce_stop_loss_backward,
    blstm_backward,
    blstm_forward,
    cross_entropy,
    linear_backward,
    linear_forward,
    lstm_backward,
    lstm_cell_step,
    lstm_forward,
    masked_mean,
    masked_mean_backward,
    mse_loss,
    mse_loss_backward,
    sigmoid,
    softmax,
    token_attention,
    token_attention_backward,
)
from .gradcheck import GradCheckReport, grad_check
from .params import ParameterStore, glorot_uniform, recurrent_uniform

__all__ = [
    "AdamState",
    "BLSTMOutput",
    "GradCheckReport",
    "LSTMParams",
    "ParameterStore",
    "adam_step",
    "bce_stop_loss",
    "bce_stop_loss_backward",
    "blstm_backward",
    "blstm_forward",
    "cross_entropy",
    "glorot_uniform",
    "grad_check",
    "linear_backward",
    "linear_forward",
    "lstm_backward",
    "lstm_cell_step",
    "lstm_forward",
    "masked_mean",
    "masked_mean_backward",
    "mse_loss",
    "mse_loss_backward",
    "recurrent_uniform",
    "sigmoid",
    "softmax",
    "token_attention",
    "token_attention_backward",
]
