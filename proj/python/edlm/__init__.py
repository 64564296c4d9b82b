"""Masked-diffusion decoding with elastic context retention.

Thin re-export of the compiled module: block layout construction, the
transformer forward/capture paths, the denoising decoder, and the toy
trainer. Matrices come back as numpy arrays.
"""

from ._edlm import *  # noqa: F401,F403

__all__ = [name for name in dir() if not name.startswith("_")]
