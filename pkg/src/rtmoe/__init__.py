"""Sequentially routed mixture-of-experts classifiers on a numpy autodiff core."""
from .autodiff import DimensionError, NoCandidateError, NumericError, Tape, Tensor, no_grad, tensor
from .harness import TrainConfig, evaluate, train
from .model import ModelConfig, RTModel, build_model, load_model
from .routing import ActiveMask, RoutingParams, init_routing_weights, routing_forward
from .sequencer import ActivationSequence, build_sequence, build_sequences

__version__ = "0.1.0"
