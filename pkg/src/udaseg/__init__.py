"""Unsupervised domain adaptation for 2D segmentation at desk scale.

Subpackages cover the synthetic two-domain dataset, the multi-scale
variational segmentation network, mutual-information estimation between
segmentation and reconstruction, the closed-form losses with their
numerical oracles, and the training / evaluation drivers.
"""

__version__ = "0.1.0"
