"""Foreground-sampled state-space encoding of sparse voxel scenes.

Modules: ``diffcore`` (tape autodiff), ``voxel``, ``curve`` (serialization),
``ssm``, ``fusion``, ``rgsw`` (sliding-window encoder), ``backbone``,
``loss``, ``harness`` (synthetic scenes, training, ablations) and ``cli``.
"""

__version__ = "0.1.0"
