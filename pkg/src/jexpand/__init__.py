"""jexpand: registration-free lung tissue expansion estimation at desk scale.

Synthesizes paired (expiration-like slice, Jacobian expansion map) phantoms,
trains a conditional least-squares GAN with Charbonnier loss and top-k
discriminator rejection sampling, and evaluates predictions with a full
image-translation metric suite.
"""

__version__ = "0.1.0"

from .tensor import Tensor

__all__ = ["Tensor", "__version__"]
