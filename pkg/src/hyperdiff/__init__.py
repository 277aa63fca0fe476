"""Diffusion-feature classification of hyperspectral cubes.

Modules: ``hsio`` (containers, patches, splits), ``ndk`` (operators, Adam,
checkpoints), ``diffusion`` (schedule, sampling, training), ``ssdn``
(spectral-spatial denoiser), ``featx`` (feature extraction + PCA), ``svit``
(transformer classifier), ``evalx`` (metrics, maps), ``synth`` (synthetic
scenes), ``pipeline`` (staged runs) and ``cli``.
"""

__version__ = "0.1.0"
