"""Exponential family attention (EFA) for sequences of tokens and values."""

from .heads import Categorical, GaussianKnownVar, PoissonOnePlus, PoissonShifted, SupportError, make_head
from .model import EFAConfig, EFAModel, SequenceBatch, instantiate_example, load_checkpoint
from .tensor import Tensor, backward, no_grad

__version__ = "0.1.0"
