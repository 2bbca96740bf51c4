"""Demographic shortcut learning in volumetric classifiers, on synthetic phantoms.

The package generates phantom cohorts with planted attribute and disease
signals, curates baseline and biased train/test pairs, trains small 3D CNNs,
explains them with GradCAM and compares regional attribution ranks.
"""

from .volume import Atlas, SpatialTransform, Volume

__all__ = ["Atlas", "SpatialTransform", "Volume"]
__version__ = "0.1.0"
