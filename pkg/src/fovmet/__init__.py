"""Foveated metamer toolkit.

Synthesizes images that are locally texture-matched to an original within
eccentricity-dependent pooling regions, calibrates how much distortion each
region tolerates, and fits the roving-ABX psychophysics used to validate
the synthesis. Submodules:

- ``geometry``: log-polar pooling windows with foveal grouping.
- ``features``: manifest-driven convolutional encoder/decoder.
- ``styletransfer``: noise coloring, masked AdaIN, the metamer transform.
- ``iqa``: SSIM / MS-SSIM / IW-SSIM, global and pooled per region.
- ``optimization``: per-region distortion search and sigmoid calibration.
- ``psychometrics``: ABX proportion-correct model, fitting, bootstrap.
- ``session`` / ``server``: ABX session plans and the local HTTP service.
"""

__version__ = "0.1.0"
