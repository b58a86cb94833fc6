"""Unrolled sparse coding and dictionary learning.

Submodules: ``datagen`` (synthetic problems), ``encoder`` (unrolled ISTA and
a lasso solver), ``grads`` (dictionary gradient estimators and code
Jacobians), ``trainer`` (learning loops), ``metrics`` (dictionary
comparison), ``theory`` (convergence validators), ``interpret``
(representer-point attribution), ``io`` and ``cli``.
"""

__version__ = "0.1.0"

from .datagen import (AmplitudeLaw, InitSpec, SyntheticProblem, make_problem,
                      perturb_dictionary, tau_over_log_m)
from .encoder import EncoderConfig, LambdaSchedule, encode, solve_lasso
from .grads import backprop_grad, grad_dec
from .metrics import align_dictionaries, relative_error
from .trainer import Optimizer, TrainConfig, train_altmin, train_pudle

__all__ = [
    "AmplitudeLaw", "InitSpec", "SyntheticProblem", "make_problem", "perturb_dictionary",
    "tau_over_log_m", "EncoderConfig", "LambdaSchedule", "encode", "solve_lasso",
    "backprop_grad", "grad_dec", "align_dictionaries", "relative_error", "Optimizer",
    "TrainConfig", "train_altmin", "train_pudle",
]
