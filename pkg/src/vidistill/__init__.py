"""Adversarial video distillation on numpy: a 3D-conv encoder compresses a clip
into one RGB image, trained against a reconstruction decoder and a teacher."""

from .errors import (BadMagicError, ConfigError, ContractError, DimensionError, FormatError,
                     SplitLeakageError, TrainingAborted, TruncatedFileError, VersionError, VidistillError)
from .tensor import Tensor, no_grad

__version__ = "0.1.0"
