"""Deformable image registration by unrolled gradient descent with learned regularisation."""
from .registration import (RegistrationConfig, RegistrationParams, Variant, count_parameters,
                           forward_register, register_pair)
from .similarity import SimilarityKind
from .tensor import Parameter, Tape, Tensor
from .transform import DisplacementField

__version__ = "0.1.0"

__all__ = ["DisplacementField", "Parameter", "RegistrationConfig", "RegistrationParams",
           "SimilarityKind", "Tape", "Tensor", "Variant", "count_parameters",
           "forward_register", "register_pair", "__version__"]
