from . import tensor as ops
from .checkpoint import load_parameters, load_state_dict, save_parameters, state_dict
from .layers import BiLSTM, LSTM, LayerNorm, Linear, LstmState, MLP, Module, lstm_forward
from .optim import Adam, AdamState, NonFiniteGradient, adam_step, clip_grad_norm
from .tensor import ShapeError, Tensor, tensor

__all__ = [
    "Adam", "AdamState", "BiLSTM", "LSTM", "LayerNorm", "Linear", "LstmState", "MLP", "Module",
    "NonFiniteGradient", "ShapeError", "Tensor", "adam_step", "clip_grad_norm", "load_parameters",
    "load_state_dict", "lstm_forward", "ops", "save_parameters", "state_dict", "tensor",
]
