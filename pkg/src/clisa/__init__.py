"""CLiSA: hybrid-transformer cloud segmentation with a Lipschitz verification lab."""

__version__ = "0.1.0"

from .tensor import Tensor, no_grad

__all__ = ["Tensor", "no_grad", "__version__"]
