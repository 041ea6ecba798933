"""Learned local descriptors for 3D point-cloud patches.

Pipeline: ISS keypoints and local reference frames (``geometry``), a histogram
baseline (``baseline``), training-set mining (``mining``), a permutation-invariant
patch encoder with hand-written gradients (``model``), SGD training (``trainer``),
correspondence metrics (``evaluation``) and ITQ binary codes (``binarization``).
"""

from .errors import PatchDescError

__version__ = "0.1.0"
__all__ = ["PatchDescError", "__version__"]
