"""
lmreg: landmark-guided deformable registration of CT volumes.

A self-supervised Siamese CNN predicts landmark correspondences between two
volumes; the correspondences then guide a mutual-information B-spline
registration.
"""

__version__ = "0.1.0"
