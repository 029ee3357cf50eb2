"""Triplet relative-distance metric learning with a small convolutional network."""

from .errors import (ConfigError, ContractViolation, DegenerateInputError, InvalidShapeError,
                     NumericError, TrimetricError)
from .loss import ImageTable, LossConfig, Triplet, count_violations, distance_diff, objective, output_gradients
from .nn import ArchitectureConfig, NetworkParams, init_params, network_backward, network_forward
from .trainer import (PropagationCounter, TrainConfig, generate_triplets, image_based_gradient,
                      train_batch_mode, train_image_based, train_triplet_based, triplet_based_gradient)

__version__ = "0.1.0"
