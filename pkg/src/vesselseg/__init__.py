"""Retinal vessel segmentation toolkit.

A self-contained dense-prediction stack: a reverse-mode autodiff engine
over 4-d numpy arrays, normalization layers, encoder-decoder network
builders with dilated context modules, a patch-based training loop, and
segmentation metrics, all driven from a small CLI.
"""

__version__ = "0.1.0"
