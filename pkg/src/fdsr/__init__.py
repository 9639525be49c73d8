"""Feature-driven super-resolution toolkit.

An SR generator built on back-projection units, trained by a weighted sum of
a pixel reconstruction loss and a feature alignment loss measured through a
frozen convolutional backbone, with datasets, metrics and a CLI harness for
running the comparison end to end on a desk-scale synthetic task.
"""

from .tensor import Tensor, Tape, backward, finite_diff_grad

__version__ = "0.1.0"

__all__ = ["Tensor", "Tape", "backward", "finite_diff_grad", "__version__"]
