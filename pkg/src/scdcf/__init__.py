"""Scaling-translation-equivariant convolutional networks with decomposed filters."""
from .basis import ScaleGrid, make_scale_basis, make_spatial_basis
from .errors import (ConfigurationError, DimensionError, FormatError, PreconditionError,
                     ScdcfError, StateError, UndefinedError)
from .filterbank import CoefficientBlock, compute_A_l, compute_regularity, project_to_A2
from .network import NetworkSpec, build_network
from .tensor import FlopCounter

__version__ = "0.1.0"
