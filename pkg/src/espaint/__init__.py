"""Interactive two-stage image inpainting.

Stage 1 reconstructs a coarse result and bottleneck features with an
external-spatial-attention autoencoder; stage 2 re-synthesizes the hole
under a user-editable semantic mask through a spatially-adaptive
normalization decoder. See the README for the training, evaluation, CLI
and HTTP-service entry points.
"""

__version__ = "0.1.0"
