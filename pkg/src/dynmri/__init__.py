"""Dynamic MR reconstruction toolkit.

Cascaded residual dense networks with data-consistency layers and
edge-enhanced total-variation training losses, a classical TV-regularized
compressed-sensing baseline, k-t undersampling simulation, and synthetic
dynamic phantoms, all on a small self-contained autodiff engine.
"""

__version__ = "0.1.0"
