"""Feed-forward regressors trained over star joins."""

from .activations import ACTIVATIONS, activation_apply
from .mlp import (
    Activations,
    GradientSet,
    MlpParams,
    RTupleCacheNN,
    backward,
    backward_upper,
    build_rtuple_cache_nn,
    forward_first_layer,
    forward_first_layer_factorized,
    forward_first_layer_multiway,
    forward_full,
    mse_loss,
)
from .train import NnConfig, NnTrace, train_nn
