"""Nearly-orthogonal first-layer kernels for small CNNs."""

from .errors import (ConfigError, DegeneracyError, DimensionError, DivergenceError, FormatError,
                     InputError, NumericError)
from .ortho import (KernelBank, almost_right_grad, almost_right_loss, combined_loss, flatten_kernels,
                    hard_ortho_grad, hard_ortho_loss, lsuv_init)

__version__ = "0.1.0"
