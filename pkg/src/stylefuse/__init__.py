"""Style-conditioned toy diffusion with attention-based style extraction,
text-image alignment, and explicit embedding fusion."""

__version__ = "0.1.0"

from .tensor import RngStream, Tensor, finite_diff_grad, no_grad  # noqa: F401
