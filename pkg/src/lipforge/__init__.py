"""Post-hoc activation thresholding ("forging") for Lipschitz-style hardening of
small neural networks, with bound analysis, attacks and smoothing certification."""

__version__ = "0.1.0"
