from .autograd import Tensor, no_grad, l1_loss, dropout
from .layers import ParamStore, Initializer, Dense, LSTM, LayerNorm, MultiHeadAttention, adam_step, dense
from .training import TrainConfig, TrainHistory, TrainingDiverged, EarlyStopping, train

__all__ = [
    "Tensor", "no_grad", "l1_loss", "dropout",
    "ParamStore", "Initializer", "Dense", "LSTM", "LayerNorm", "MultiHeadAttention", "adam_step", "dense",
    "TrainConfig", "TrainHistory", "TrainingDiverged", "EarlyStopping", "train",
]
