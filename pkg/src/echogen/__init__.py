"""echogen: desk-scale latent diffusion for breast-ultrasound phantom synthesis."""

__version__ = "0.1.0"

from .tensor import Tensor, no_grad  # noqa: F401
