"""Feature-structure distillation workbench.

Implements CKA/HSIC structure losses between toy transformer encoders, a
k-means memory bank for global structure transfer, the training harness,
and the diagnostic suite (relation difference, restoration rate, CKA
heatmaps).
"""

from .tensor import Tensor

__all__ = ["Tensor"]
__version__ = "0.1.0"
