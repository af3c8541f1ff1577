"""Deviation-based first-order solvers with per-iteration certificates.

Subpackages by role:

- ``tensors``: float64 arrays, linear maps with certified norm bounds.
- ``objectives``: smooth terms, prox-friendly terms, composite problems.
- ``transforms``: discrete gradient, Haar wavelets, Gaussian blur, ray transform.
- ``smooth``: the deviation-augmented gradient scheme and its rate certificates.
- ``forward_backward``: the deviation-augmented proximal-gradient scheme,
  Lyapunov certificates, and the momentum-as-deviation adapter.
- ``autodiff``: a small reverse-mode tape used to train selection rules.
- ``networks`` / ``learned``: the convolutional selection rule, its safety
  normalization, and the unrolled trainer.
- ``phantoms``: test images (piecewise-constant scenes, graymap ingestion).
- ``harness`` / ``cli``: experiment configs, reference optima, curve export.
"""

from devopt.tensors import Array, DivergenceError, LinearMap

__all__ = ["Array", "DivergenceError", "LinearMap"]
__version__ = "0.1.0"
