"""Multigroup thermal radiative transfer solvers on 2D rectangular grids.

The suite pairs a discrete-ordinates full-order model with three
radiation-diffusion reduced models (P1, P1/3, flux-limited diffusion) and a
variable Eddington factor model whose closure is computed from transport
sweeps driven by reduced-model temperatures.
"""

__version__ = "0.1.0"
