"""Point-based instance segmentation at desk scale.

A miniature dense one-stage detector whose point-of-interest features
are turned into per-instance masks by dynamically generated convolution
weights, together with the training, evaluation, and cost-model tooling
around it.
"""

__version__ = "0.1.0"
