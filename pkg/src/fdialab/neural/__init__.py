from .layers import (BatchNorm1d, Conv1d, Flatten, LeakyReLU, Linear,
                     bce_with_logits, sigmoid)
from .network import (ArchitectureSpec, NalModel, default_architecture,
                      load_model, save_model)
from .optim import Adam
from .training import (TrainConfig, TrainReport, evaluate,
                       smoothed_loss_nonincreasing, standardization_from,
                       train, train_on_dataset)

__all__ = [
    "Adam", "ArchitectureSpec", "BatchNorm1d", "Conv1d", "Flatten",
    "LeakyReLU", "Linear", "NalModel", "TrainConfig", "TrainReport",
    "bce_with_logits", "default_architecture", "evaluate", "load_model",
    "save_model", "sigmoid", "smoothed_loss_nonincreasing",
    "standardization_from", "train", "train_on_dataset",
]
