"""Minimal layer library with analytic gradients."""
from .checkpoint import read_arrays, write_arrays
from .gradcheck import GradCheckResult, grad_check, rel_error
from .layers import (
    LSTM,
    BatchNorm1D,
    Conv1D,
    Dense,
    Dropout,
    Layer,
    MaxPool1D,
    Param,
    ReLU,
    UpSample1D,
    glorot_uniform,
    sigmoid,
)
from .losses import log_softmax, mse, mse_terms, softmax, softmax_xent, softmax_xent_terms
from .optim import Adam
